//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json          generator config, video list, split assignment
//! <dir>/<id>.labels.csv        header "frame_index,phase_id", one row per frame
//! <dir>/<id>.frames.bin        frame blob (see below)
//! ```
//!
//! Frame blob: magic `"MOSFRAME"`, `u32` version (1), four `u32` dims
//! `[frames, channels, height, width]`, then raw little-endian `f32` pixels,
//! frame-major, each frame channel-major row-major. All integers little-endian.
//! Write → read round-trips bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{sample_procedure, video_seed, GeneratorConfig, ProcedureRecord};

pub const FRAME_MAGIC: &[u8; 8] = b"MOSFRAME";
pub const FRAME_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub split: Split,
    pub frames_file: String,
    pub labels_file: String,
    pub num_frames: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub videos: Vec<VideoEntry>,
}

/// A dataset held in memory: the manifest plus every record, manifest order.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ProcedureRecord>,
}

impl Dataset {
    /// Records belonging to one split, manifest order.
    pub fn split(&self, split: Split) -> Vec<&ProcedureRecord> {
        self.manifest
            .videos
            .iter()
            .zip(&self.records)
            .filter(|(entry, _)| entry.split == split)
            .map(|(_, rec)| rec)
            .collect()
    }
}

/// Generate all videos for a config: ids `video_000`, `video_001`, ... with
/// train videos first, then val, then test. Bytes on disk are a pure function
/// of the config (including its seed).
pub fn generate_dataset(config: &GeneratorConfig) -> Result<(Vec<ProcedureRecord>, Vec<Split>)> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.total_videos());
    let mut splits = Vec::with_capacity(config.total_videos());
    for idx in 0..config.total_videos() {
        let mut rec = sample_procedure(config, video_seed(config.seed, idx))?;
        rec.video_id = format!("video_{idx:03}");
        records.push(rec);
        splits.push(if idx < config.videos_train {
            Split::Train
        } else if idx < config.videos_train + config.videos_val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok((records, splits))
}

pub fn write_frames_blob(path: &Path, rec: &ProcedureRecord) -> Result<()> {
    let mut out = Vec::with_capacity(28 + rec.frames.len() * rec.frames.first().map_or(0, |f| f.len()) * 4);
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    for dim in [
        rec.frames.len() as u32,
        rec.channels as u32,
        rec.height as u32,
        rec.width as u32,
    ] {
        out.extend_from_slice(&dim.to_le_bytes());
    }
    for frame in &rec.frames {
        for v in frame {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Frames plus `(channels, height, width)` from a blob.
pub fn read_frames_blob(path: &Path) -> Result<(Vec<Vec<f32>>, usize, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 28 {
        return Err(Error::format(path, "truncated before header"));
    }
    if &bytes[..8] != FRAME_MAGIC {
        return Err(Error::format(path, "bad magic bytes (not a frame blob)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FRAME_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FRAME_VERSION,
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap()) as usize;
    let (n, ch, h, w) = (dim(0), dim(1), dim(2), dim(3));
    let frame_len = ch * h * w;
    let expected = 28 + n * frame_len * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {}", bytes.len() - 28, expected - 28),
        ));
    }
    let mut frames = Vec::with_capacity(n);
    let mut offset = 28;
    for _ in 0..n {
        let frame: Vec<f32> = bytes[offset..offset + frame_len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        frames.push(frame);
        offset += frame_len * 4;
    }
    Ok((frames, ch, h, w))
}

pub fn write_labels_csv(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::from("frame_index,phase_id\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("frame_index,phase_id") => {}
        other => {
            return Err(Error::format(
                path,
                format!("expected header 'frame_index,phase_id', got {other:?}"),
            ))
        }
    }
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let idx: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, format!("line {}: bad frame index", lineno + 2)))?;
        let phase: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, format!("line {}: bad phase id", lineno + 2)))?;
        if idx != labels.len() {
            return Err(Error::format(
                path,
                format!("line {}: frame index {idx} out of order", lineno + 2),
            ));
        }
        labels.push(phase);
    }
    Ok(labels)
}

/// Write a full dataset directory (manifest + per-video files).
pub fn write_dataset(
    records: &[ProcedureRecord],
    splits: &[Split],
    config: &GeneratorConfig,
    dir: &Path,
) -> Result<()> {
    if records.len() != splits.len() {
        return Err(Error::Usage("write_dataset: records/splits length mismatch".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let videos = records
        .iter()
        .zip(splits)
        .map(|(rec, &split)| VideoEntry {
            id: rec.video_id.clone(),
            split,
            frames_file: format!("{}.frames.bin", rec.video_id),
            labels_file: format!("{}.labels.csv", rec.video_id),
            num_frames: rec.num_frames(),
        })
        .collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        generator: config.clone(),
        videos,
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Usage(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    for rec in records {
        write_frames_blob(&dir.join(format!("{}.frames.bin", rec.video_id)), rec)?;
        write_labels_csv(&dir.join(format!("{}.labels.csv", rec.video_id)), &rec.labels)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&path, format!("invalid manifest JSON: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.format_version,
            supported: MANIFEST_VERSION,
        });
    }
    Ok(manifest)
}

/// Read a dataset directory back; every file the manifest lists must exist
/// and agree with it.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut records = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let frames_path = dir.join(&entry.frames_file);
        let (frames, ch, h, w) = read_frames_blob(&frames_path)?;
        let labels = read_labels_csv(&dir.join(&entry.labels_file))?;
        if frames.len() != entry.num_frames {
            return Err(Error::format(
                &frames_path,
                format!("{} frames but manifest lists {}", frames.len(), entry.num_frames),
            ));
        }
        if labels.len() != frames.len() {
            return Err(Error::format(
                dir.join(&entry.labels_file),
                format!("{} labels for {} frames", labels.len(), frames.len()),
            ));
        }
        records.push(ProcedureRecord {
            video_id: entry.id.clone(),
            frames,
            labels,
            channels: ch,
            height: h,
            width: w,
            fps: 1,
        });
    }
    Ok(Dataset { manifest, records })
}

/// Convenience: directory path of a video's frame blob.
pub fn frames_path(dir: &Path, entry: &VideoEntry) -> PathBuf {
    dir.join(&entry.frames_file)
}
