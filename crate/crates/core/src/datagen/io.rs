//! Dataset directory: `meta.json` plus a little-endian `samples.bin`.
//!
//! `samples.bin` layout:
//!
//! ```text
//! magic "S3VESYN1"
//! u32 num_subjects, u32 num_clips, u32 eeg_dim, u32 video_dim
//! per clip, in subject then time order:
//!     u32 subject_id, u32 time_index, u8 stage_label, u8 ahi_level,
//!     eeg_dim x f32, video_dim x f32
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClipSample, SplitAssignment, SubjectRecord, SyntheticSpec, NUM_AHI_LEVELS, NUM_STAGES};
use crate::error::{Error, Result};

pub const SAMPLES_MAGIC: &[u8; 8] = b"S3VESYN1";
pub const FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const SAMPLES_FILE: &str = "samples.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub subjects: Vec<SubjectRecord>,
    pub split: SplitAssignment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub spec: SyntheticSpec,
    pub eeg_dim: usize,
    pub video_dim: usize,
    pub num_subjects: usize,
    pub num_clips: usize,
    pub stage_counts: [usize; NUM_STAGES],
    pub ahi_counts: [usize; NUM_AHI_LEVELS],
    pub split: SplitAssignment,
}

impl Dataset {
    /// Generates the subjects of `spec` and splits them with `spec.seed`.
    pub fn synthesize(spec: &SyntheticSpec) -> Result<Self> {
        let subjects = super::generate(spec)?;
        let split = super::split(&subjects, spec.seed)?;
        Ok(Self {
            spec: spec.clone(),
            subjects,
            split,
        })
    }

    pub fn meta(&self) -> DatasetMeta {
        let mut stage_counts = [0; NUM_STAGES];
        let mut ahi_counts = [0; NUM_AHI_LEVELS];
        for s in &self.subjects {
            ahi_counts[s.ahi_level as usize] += 1;
            for c in &s.clips {
                stage_counts[c.stage_label as usize] += 1;
            }
        }
        DatasetMeta {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            eeg_dim: self.spec.eeg_dim,
            video_dim: self.spec.video_dim,
            num_subjects: self.subjects.len(),
            num_clips: stage_counts.iter().sum(),
            stage_counts,
            ahi_counts,
            split: self.split.clone(),
        }
    }

    pub fn subject(&self, id: u32) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    /// Subjects whose ids are in `ids`, in id order.
    pub fn subjects_in<'a>(&'a self, ids: &std::collections::BTreeSet<u32>) -> Vec<&'a SubjectRecord> {
        self.subjects.iter().filter(|s| ids.contains(&s.subject_id)).collect()
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join(META_FILE);
    let meta = serde_json::to_string_pretty(&data.meta()).expect("meta serializes");
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let bin_path = dir.join(SAMPLES_FILE);
    let file = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut w = BufWriter::new(file);
    let num_clips: usize = data.subjects.iter().map(|s| s.clips.len()).sum();
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(SAMPLES_MAGIC);
    for v in [data.subjects.len(), num_clips, data.spec.eeg_dim, data.spec.video_dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(&bin_path, e))?;
    for s in &data.subjects {
        for c in &s.clips {
            buf.clear();
            buf.extend_from_slice(&c.subject_id.to_le_bytes());
            buf.extend_from_slice(&c.time_index.to_le_bytes());
            buf.push(c.stage_label);
            buf.push(s.ahi_level);
            for &v in c.eeg_signal.iter().chain(&c.video_signal) {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf).map_err(|e| Error::io(&bin_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&bin_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(Error::MissingArtifact(meta_path));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| format_err(&meta_path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(format_err(
            &meta_path,
            format!("unsupported format version {}", meta.format_version),
        ));
    }

    let bin_path: PathBuf = dir.join(SAMPLES_FILE);
    let file = File::open(&bin_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(bin_path.clone())
        } else {
            Error::io(&bin_path, e)
        }
    })?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(&bin_path, e))?;
    if &magic != SAMPLES_MAGIC {
        return Err(format_err(&bin_path, "bad magic"));
    }
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32_buf).map_err(|e| Error::io(&bin_path, e))?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let num_subjects = read_u32(&mut r)? as usize;
    let num_clips = read_u32(&mut r)? as usize;
    let eeg_dim = read_u32(&mut r)? as usize;
    let video_dim = read_u32(&mut r)? as usize;
    if num_subjects != meta.num_subjects
        || num_clips != meta.num_clips
        || eeg_dim != meta.eeg_dim
        || video_dim != meta.video_dim
    {
        return Err(format_err(&bin_path, "header disagrees with meta.json"));
    }

    let record_len = 10 + 4 * (eeg_dim + video_dim);
    let mut rec = vec![0u8; record_len];
    let mut subjects: Vec<SubjectRecord> = Vec::with_capacity(num_subjects);
    let f32_at = |b: &[u8], i: usize| f32::from_le_bytes(b[i..i + 4].try_into().unwrap()) as f64;
    for _ in 0..num_clips {
        r.read_exact(&mut rec).map_err(|e| Error::io(&bin_path, e))?;
        let subject_id = u32::from_le_bytes(rec[0..4].try_into().unwrap());
        let time_index = u32::from_le_bytes(rec[4..8].try_into().unwrap());
        let stage_label = rec[8];
        let ahi_level = rec[9];
        if stage_label as usize >= NUM_STAGES || ahi_level as usize >= NUM_AHI_LEVELS {
            return Err(format_err(&bin_path, "label out of range"));
        }
        let eeg_signal = (0..eeg_dim).map(|k| f32_at(&rec, 10 + 4 * k)).collect();
        let video_signal = (0..video_dim).map(|k| f32_at(&rec, 10 + 4 * (eeg_dim + k))).collect();
        let clip = ClipSample {
            subject_id,
            time_index,
            stage_label,
            eeg_signal,
            video_signal,
        };
        match subjects.last_mut() {
            Some(s) if s.subject_id == subject_id => s.clips.push(clip),
            _ => subjects.push(SubjectRecord {
                subject_id,
                ahi_level,
                clips: vec![clip],
            }),
        }
    }
    if subjects.len() != num_subjects {
        return Err(format_err(&bin_path, "subject records are not contiguous"));
    }
    Ok(Dataset {
        spec: meta.spec,
        subjects,
        split: meta.split,
    })
}
