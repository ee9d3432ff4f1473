fn main() {
    std::process::exit(exitcascade_cli::main_with_args(std::env::args_os()));
}
