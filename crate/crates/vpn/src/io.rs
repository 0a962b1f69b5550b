//! Dataset files: pose text, raw video volumes and the CSV manifest.
//!
//! A dataset directory holds `manifest.csv` (`id,label,video,pose`, paths
//! relative to the manifest), `videos/<id>.vpk` and `poses/<id>.txt`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use vpn_core::data::{PoseSequence, SampleRecord, Video};

use crate::error::{Error, Result};

pub const VIDEO_MAGIC: &[u8; 4] = b"VPK1";
const VIDEO_HEADER: usize = 20;
pub const MANIFEST_NAME: &str = "manifest.csv";

/// One frame per block of `J` lines `x y z`; blocks are separated by a blank line.
pub fn format_poses(poses: &PoseSequence) -> String {
    let mut out = String::new();
    for f in 0..poses.frames() {
        if f > 0 {
            out.push('\n');
        }
        for j in 0..poses.joints() {
            let [x, y, z] = poses.joint(f, j);
            out.push_str(&format!("{x} {y} {z}\n"));
        }
    }
    out
}

pub fn parse_poses(text: &str, path: &Path) -> Result<PoseSequence> {
    let mut frames: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut current: Vec<[f64; 3]> = Vec::new();
    let mut close = |current: &mut Vec<[f64; 3]>, line: usize| -> Result<()> {
        if current.is_empty() {
            return Ok(());
        }
        if let Some(first) = frames.first() {
            if first.len() != current.len() {
                return Err(Error::at_line(path, line, format!("frame has {} joints, expected {}", current.len(), first.len())));
            }
        }
        frames.push(std::mem::take(current));
        Ok(())
    };
    let mut last = 0;
    for (i, line) in text.lines().enumerate() {
        last = i + 1;
        let line = line.trim();
        if line.is_empty() {
            close(&mut current, i + 1)?;
            continue;
        }
        let values: Vec<&str> = line.split_whitespace().collect();
        if values.len() != 3 {
            return Err(Error::at_line(path, i + 1, format!("expected 3 coordinates, found {}", values.len())));
        }
        let mut joint = [0.0; 3];
        for (slot, v) in joint.iter_mut().zip(&values) {
            *slot = v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::at_line(path, i + 1, format!("bad coordinate {v:?}")))?;
        }
        current.push(joint);
    }
    close(&mut current, last)?;
    if frames.is_empty() {
        return Err(Error::at_line(path, 1, "no pose frames"));
    }
    PoseSequence::from_frames(&frames).map_err(|e| Error::at_line(path, 1, e.to_string()))
}

pub fn write_poses(path: &Path, poses: &PoseSequence) -> Result<()> {
    fs::write(path, format_poses(poses)).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: &Path) -> Result<PoseSequence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text, path)
}

/// `VPK1`, then `T, H, W, C` as little-endian `u32`, then the `f32` values.
pub fn encode_video(video: &Video) -> Vec<u8> {
    let mut out = Vec::with_capacity(VIDEO_HEADER + 4 * video.data.len());
    out.extend_from_slice(VIDEO_MAGIC);
    for d in video.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &video.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_video(bytes: &[u8], path: &Path) -> Result<Video> {
    if bytes.len() < VIDEO_HEADER {
        return Err(Error::at_offset(path, bytes.len(), "truncated header"));
    }
    if &bytes[..4] != VIDEO_MAGIC {
        return Err(Error::at_offset(path, 0, "bad magic, expected VPK1"));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let [t, h, w, c] = [dim(0), dim(1), dim(2), dim(3)];
    let count = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::at_offset(path, 4, "extent overflow"))?;
    let body = &bytes[VIDEO_HEADER..];
    if body.len() != count * 4 {
        return Err(Error::at_offset(
            path,
            VIDEO_HEADER,
            format!("{t}x{h}x{w}x{c} needs {} data bytes, found {}", count * 4, body.len()),
        ));
    }
    let data: Vec<f32> = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::at_offset(path, VIDEO_HEADER + 4 * i, "non-finite value"));
    }
    Ok(Video::new(t, h, w, c, data)?)
}

pub fn write_video(path: &Path, video: &Video) -> Result<()> {
    fs::write(path, encode_video(video)).map_err(|e| Error::io(path, e))
}

pub fn read_video(path: &Path) -> Result<Video> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_video(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: usize,
    pub video: PathBuf,
    pub pose: PathBuf,
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && id != "." && id != "..";
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("sample id {id:?} is not a safe file name")))
    }
}

/// Writes `samples` under `dir` and returns the manifest path.
pub fn save_dataset(dir: &Path, samples: &[SampleRecord]) -> Result<PathBuf> {
    for sub in ["videos", "poses"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = dir.join(MANIFEST_NAME);
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(&manifest, std::io::Error::other(e));
    writer.write_record(["id", "label", "video", "pose"]).map_err(csv_err)?;
    for s in samples {
        check_id(&s.id)?;
        let record = ManifestRecord {
            id: s.id.clone(),
            label: s.label,
            video: Path::new("videos").join(format!("{}.vpk", s.id)),
            pose: Path::new("poses").join(format!("{}.txt", s.id)),
        };
        write_video(&dir.join(&record.video), &s.video)?;
        write_poses(&dir.join(&record.pose), &s.poses)?;
        writer.serialize(&record).map_err(csv_err)?;
    }
    let mut inner = writer.into_inner().map_err(|e| Error::io(&manifest, std::io::Error::other(e.to_string())))?;
    inner.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers().map_err(|e| Error::at_line(path, 1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "label", "video", "pose"] {
        return Err(Error::at_line(path, 1, format!("expected header id,label,video,pose, found {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::at_line(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let record: ManifestRecord = row.deserialize(Some(&headers)).map_err(|e| Error::at_line(path, line, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

/// Loads every record of a manifest; relative paths resolve against its directory.
pub fn load_dataset(manifest: &Path) -> Result<Vec<SampleRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let video = read_video(&base.join(&r.video))?;
            let poses = read_poses(&base.join(&r.pose))?;
            Ok(SampleRecord { id: r.id, label: r.label, video, poses })
        })
        .collect()
}
