//! On-disk formats: `SGF1` frame files and line-delimited JSON records.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::synth::GroundTruth;
use super::{FrameSequence, TaggedSentence};
use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub const FRAME_MAGIC: &[u8; 4] = b"SGF1";
pub const FRAME_VERSION: u32 = 1;
/// Frame files carry no rate; this is attached on load.
pub const DEFAULT_FPS: f32 = 25.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
}

pub fn write_frame_file(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * frames.len());
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for v in frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &buf)
}

pub fn read_frame_file(path: &Path, video_id: &str) -> Result<FrameSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let data_err = |detail: String| Error::Data {
        video_id: video_id.to_string(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..4] != FRAME_MAGIC {
        return Err(data_err(format!("{} is not an SGF1 file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (version, t, c) = (word(4), word(8) as usize, word(12) as usize);
    if version != FRAME_VERSION {
        return Err(data_err(format!("unsupported SGF version {version}")));
    }
    let payload = &bytes[16..];
    let expected = t.checked_mul(c).and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(data_err(format!(
            "header declares T={t}, c_in={c} ({} floats) but payload holds {} bytes",
            t * c,
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FrameSequence::new(video_id, Tensor::from_vec(t, c, data)?, DEFAULT_FPS)
}

/// Loads every entry of a manifest, in manifest order.
pub fn load_frame_sequences(manifest_path: &Path) -> Result<Vec<FrameSequence>> {
    let entries: Vec<ManifestEntry> = read_jsonl(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .map(|e| read_frame_file(&resolve(base, &e.path), &e.video_id))
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn read_transcripts(path: &Path) -> Result<Vec<TaggedSentence>> {
    let out: Vec<TaggedSentence> = read_jsonl(path)?;
    if let Some(s) = out.iter().find(|s| s.words.is_empty()) {
        return Err(Error::Data {
            video_id: s.video_id.clone(),
            detail: "transcript has no words".into(),
        });
    }
    Ok(out)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    read_jsonl(path)
}

/// Writes a corpus directory: `frames/<id>.sgf`, `manifest.jsonl`,
/// `transcripts.jsonl` and, when given, `ground_truth.jsonl`.
pub fn write_corpus_dir(
    dir: &Path,
    videos: &[FrameSequence],
    sentences: &[TaggedSentence],
    truth: Option<&[GroundTruth]>,
) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut manifest = Vec::with_capacity(videos.len());
    for v in videos {
        let rel = format!("frames/{}.sgf", v.video_id);
        write_frame_file(&dir.join(&rel), &v.frames)?;
        manifest.push(ManifestEntry {
            video_id: v.video_id.clone(),
            path: rel,
        });
    }
    write_jsonl(&dir.join("manifest.jsonl"), &manifest)?;
    write_jsonl(&dir.join("transcripts.jsonl"), sentences)?;
    if let Some(t) = truth {
        write_jsonl(&dir.join("ground_truth.jsonl"), t)?;
    }
    Ok(())
}

/// A corpus directory as written by [`write_corpus_dir`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusDir {
    pub videos: Vec<FrameSequence>,
    pub sentences: Vec<TaggedSentence>,
    pub truth: Option<Vec<GroundTruth>>,
}

/// Reads `manifest.jsonl` and `transcripts.jsonl`, plus `ground_truth.jsonl`
/// when present.
pub fn read_corpus_dir(dir: &Path) -> Result<CorpusDir> {
    let videos = load_frame_sequences(&dir.join("manifest.jsonl"))?;
    let sentences = read_transcripts(&dir.join("transcripts.jsonl"))?;
    let gt = dir.join("ground_truth.jsonl");
    let truth = if gt.exists() {
        Some(read_ground_truth(&gt)?)
    } else {
        None
    };
    Ok(CorpusDir {
        videos,
        sentences,
        truth,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Pos, TaggedWord};

    fn ramp(t: usize, c: usize) -> Tensor<f32> {
        Tensor::from_vec(t, c, (0..t * c).map(|i| i as f32 * 0.5).collect()).unwrap()
    }

    #[test]
    fn frame_file_round_trip_and_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        let a = FrameSequence::new("b_second", ramp(10, 4), DEFAULT_FPS).unwrap();
        let b = FrameSequence::new("a_first", ramp(3, 4), DEFAULT_FPS).unwrap();
        let s = TaggedSentence {
            video_id: "b_second".into(),
            words: vec![TaggedWord::new("x", Pos::Noun)],
        };
        write_corpus_dir(dir.path(), &[a.clone(), b.clone()], &[s.clone()], None).unwrap();
        let loaded = load_frame_sequences(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded, vec![a, b]);
        assert_eq!(loaded[0].frames.shape(), (10, 4));
        let ts = read_transcripts(&dir.path().join("transcripts.jsonl")).unwrap();
        assert_eq!(ts, vec![s]);
    }

    #[test]
    fn short_payload_is_a_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.sgf");
        write_frame_file(&p, &ramp(10, 4)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_frame_file(&p, "vid7").unwrap_err().to_string();
        assert!(err.contains("vid7"), "{err}");
        assert!(err.contains("T=10"), "{err}");
    }

    #[test]
    fn non_finite_payload_names_the_video() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.sgf");
        let mut t = ramp(2, 2);
        t.data_mut()[3] = f32::NAN;
        write_frame_file(&p, &t).unwrap();
        let err = read_frame_file(&p, "nanvid").unwrap_err().to_string();
        assert!(err.contains("nanvid"), "{err}");
    }

    #[test]
    fn missing_frame_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("manifest.jsonl");
        fs::write(&m, "{\"video_id\":\"x\",\"path\":\"nope.sgf\"}\n").unwrap();
        assert!(matches!(load_frame_sequences(&m), Err(Error::Io { .. })));
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("t.jsonl");
        fs::write(&m, "{\"video_id\":\"x\",\"words\":[]}\nnot json\n").unwrap();
        match read_jsonl::<TaggedSentence>(&m) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
