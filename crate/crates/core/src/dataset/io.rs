//! Manifest + binary payload storage.
//!
//! Manifest: UTF-8, one record per line,
//! `video_id<TAB>n_frames<TAB>dim<TAB>label_spec<TAB>payload_file<TAB>byte_offset`.
//! Payload paths are resolved relative to the manifest's directory. A payload
//! holds little-endian `f64`s, frame after frame, with no padding. Records
//! sharing a payload must tile it exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Difficulty, LabelSpec, VideoFeatures};
use crate::error::{Error, Result};

struct Record {
    video_id: String,
    n_frames: usize,
    dim: usize,
    label: LabelSpec,
    payload: String,
    offset: u64,
}

impl Record {
    fn byte_len(&self) -> u64 {
        (self.n_frames * self.dim * 8) as u64
    }
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<VideoFeatures>> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest)
        .map_err(|e| Error::io(format!("reading manifest {}", manifest.display()), e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));

    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(manifest, lineno + 1, line)?);
    }

    let mut payloads: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
    for r in &records {
        if !payloads.contains_key(r.payload.as_str()) {
            let path = base.join(&r.payload);
            let bytes = fs::read(&path)
                .map_err(|e| Error::io(format!("reading payload {}", path.display()), e))?;
            payloads.insert(&r.payload, bytes);
        }
    }

    check_tiling(base, &records, &payloads)?;

    records
        .iter()
        .map(|r| {
            let bytes = &payloads[r.payload.as_str()];
            let start = r.offset as usize;
            let values: Vec<f64> = bytes[start..start + r.byte_len() as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            VideoFeatures::new(r.video_id.clone(), r.dim, values, r.label.clone()).map_err(|e| {
                Error::Dataset {
                    path: base.join(&r.payload),
                    video_id: r.video_id.clone(),
                    offset: r.offset,
                    message: e.to_string(),
                }
            })
        })
        .collect()
}

fn parse_record(manifest: &Path, line: usize, text: &str) -> Result<Record> {
    let fields: Vec<&str> = text.split('\t').collect();
    let video_id = fields.first().copied().unwrap_or_default().to_string();
    let offset_hint = fields.get(5).and_then(|f| f.trim().parse().ok()).unwrap_or(0);
    let fail = |message: String| Error::Dataset {
        path: manifest.to_path_buf(),
        video_id: video_id.clone(),
        offset: offset_hint,
        message: format!("line {line}: {message}"),
    };
    if fields.len() != 6 {
        return Err(fail(format!("expected 6 tab-separated fields, found {}", fields.len())));
    }
    let positive = |name: &str, f: &str| -> Result<usize> {
        match f.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(fail(format!("{name} must be a positive integer, got `{f}`"))),
        }
    };
    let n_frames = positive("n_frames", fields[1])?;
    let dim = positive("dim", fields[2])?;
    let label = fields[3].trim().parse().map_err(|e: Error| fail(e.to_string()))?;
    let offset = fields[5]
        .trim()
        .parse()
        .map_err(|_| fail(format!("malformed byte offset `{}`", fields[5])))?;
    if fields[4].is_empty() {
        return Err(fail("empty payload file name".into()));
    }
    Ok(Record {
        video_id,
        n_frames,
        dim,
        label,
        payload: fields[4].to_string(),
        offset,
    })
}

fn check_tiling(base: &Path, records: &[Record], payloads: &BTreeMap<&str, Vec<u8>>) -> Result<()> {
    let mut by_file: BTreeMap<&str, Vec<&Record>> = BTreeMap::new();
    for r in records {
        by_file.entry(&r.payload).or_default().push(r);
    }
    for (file, mut rs) in by_file {
        let len = payloads[file].len() as u64;
        rs.sort_by_key(|r| r.offset);
        let mut cursor = 0u64;
        for r in &rs {
            let fail = |message: String| Error::Dataset {
                path: base.join(file),
                video_id: r.video_id.clone(),
                offset: r.offset,
                message,
            };
            if r.offset != cursor {
                return Err(fail(format!(
                    "dimension mismatch: record starts at byte {} but the previous record ends at byte {cursor}",
                    r.offset
                )));
            }
            cursor = r.offset + r.byte_len();
            if cursor > len {
                return Err(fail(format!(
                    "dimension mismatch: {} frames x {} dims need {} bytes, payload has {}",
                    r.n_frames,
                    r.dim,
                    r.byte_len(),
                    len.saturating_sub(r.offset)
                )));
            }
        }
        if cursor != len {
            let last = rs.last().expect("at least one record per payload");
            return Err(Error::Dataset {
                path: base.join(file),
                video_id: last.video_id.clone(),
                offset: last.offset,
                message: format!(
                    "dimension mismatch: {} trailing payload bytes after the last record",
                    len - cursor
                ),
            });
        }
    }
    Ok(())
}

/// Writes `videos` as a manifest at `manifest` plus one payload file next to
/// it (same stem, `.bin` extension).
pub fn save_dataset(manifest: impl AsRef<Path>, videos: &[VideoFeatures]) -> Result<()> {
    let manifest = manifest.as_ref();
    let payload_path = manifest.with_extension("bin");
    let payload_name = payload_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad manifest path {}", manifest.display())))?
        .to_string();

    let mut text = String::new();
    let mut payload = Vec::new();
    for v in videos {
        if v.video_id.contains(['\t', '\n']) {
            return Err(Error::InvalidArgument(format!(
                "video id `{}` contains a tab or newline",
                v.video_id
            )));
        }
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            v.video_id,
            v.n_frames(),
            v.dim(),
            v.label,
            payload_name,
            payload.len()
        ));
        for x in v.raw() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_file(&payload_path, &payload)?;
    write_file(manifest, text.as_bytes())
}

/// Writes synthetic ground-truth difficulty as
/// `video_id<TAB>easy|hard<TAB>comma-separated informative frames`.
pub fn save_difficulty(
    path: impl AsRef<Path>,
    videos: &[VideoFeatures],
    meta: &[Difficulty],
) -> Result<()> {
    let mut text = String::new();
    for (v, d) in videos.iter().zip(meta) {
        let frames: Vec<String> = d.informative.iter().map(usize::to_string).collect();
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            v.video_id,
            if d.easy { "easy" } else { "hard" },
            frames.join(",")
        ));
    }
    write_file(path.as_ref(), text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut f = fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    f.write_all(bytes).map_err(|e| Error::io(ctx(), e))
}
