//! FIFO memory banks of momentum features with class labels, top-K hard
//! negative selection and the symmetric margin contrastive loss.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::datagen::NUM_STAGES;
use crate::diffcore::{Tape, Tensor, Var};
use crate::encoders::Modality;
use crate::error::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 256;
pub const DEFAULT_K: usize = 64;
pub const DEFAULT_MARGIN: f64 = 0.2;
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub feature: Arc<[f64]>,
    pub class_label: u8,
    pub age: u64,
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    entries: VecDeque<BankEntry>,
    capacity: usize,
    modality: Modality,
    next_age: u64,
}

impl MemoryBank {
    pub fn new(modality: Modality, capacity: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            modality,
            next_age: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn get(&self, position: usize) -> Option<&BankEntry> {
        self.entries.get(position)
    }

    /// Appends rows of `features` in order, evicting the oldest entries.
    /// Validates the whole batch before touching the queue.
    pub fn enqueue(&mut self, features: &Tensor, labels: &[u8]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "enqueue",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(first) = self.entries.front() {
            if first.feature.len() != features.cols() {
                return Err(Error::Shape {
                    op: "enqueue",
                    lhs: vec![first.feature.len()],
                    rhs: features.shape().to_vec(),
                });
            }
        }
        for (r, &label) in labels.iter().enumerate() {
            let norm = features.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((1.0 - NORM_TOLERANCE)..=(1.0 + NORM_TOLERANCE)).contains(&norm) {
                return Err(Error::invalid(format!(
                    "bank feature {r} has norm {norm}; features must be l2-normalized"
                )));
            }
            if label as usize >= NUM_STAGES {
                return Err(Error::invalid(format!("class label {label} out of range")));
            }
        }
        for (r, &label) in labels.iter().enumerate() {
            self.entries.push_back(BankEntry {
                feature: features.row_slice(r).into(),
                class_label: label,
                age: self.next_age,
            });
            self.next_age += 1;
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Bank features as an `M x D` matrix, oldest first.
    pub fn feature_matrix(&self) -> Option<Tensor> {
        let d = self.entries.front()?.feature.len();
        let values = self.entries.iter().flat_map(|e| e.feature.iter().copied()).collect();
        Some(Tensor::new(&[self.entries.len(), d], values).expect("bank matrix"))
    }

    /// Entries whose label differs from at least one of `anchor_labels`.
    pub fn eligible_count(&self, anchor_labels: &[u8]) -> usize {
        self.entries
            .iter()
            .filter(|e| anchor_labels.iter().any(|&a| a != e.class_label))
            .count()
    }

    pub fn select_hard_negatives(&self, anchor: &[f64], anchor_label: u8, k: usize) -> HardNegativeSet {
        let sims: Vec<f64> = self
            .entries
            .iter()
            .map(|e| e.feature.iter().zip(anchor).map(|(a, b)| a * b).sum())
            .collect();
        self.select_from_similarities(&sims, anchor_label, k)
    }

    /// Top-K selection given precomputed similarities, one per entry.
    pub fn select_from_similarities(&self, sims: &[f64], anchor_label: u8, k: usize) -> HardNegativeSet {
        let mut candidates: Vec<HardNegative> = self
            .entries
            .iter()
            .zip(sims)
            .enumerate()
            .filter(|(_, (e, _))| e.class_label != anchor_label)
            .map(|(position, (e, &similarity))| HardNegative {
                position,
                age: e.age,
                class_label: e.class_label,
                similarity,
            })
            .collect();
        candidates.sort_by(hardness_order);
        candidates.truncate(k);
        HardNegativeSet {
            anchor_label,
            k,
            selected: candidates,
        }
    }

    /// One JSON object per entry, oldest first: age, label and the SHA-256
    /// of the feature's little-endian bytes.
    pub fn dump_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            modality: Modality,
            age: u64,
            label: u8,
            feature_sha256: &'a str,
        }
        for e in &self.entries {
            let mut h = Sha256::new();
            for v in e.feature.iter() {
                h.update(v.to_le_bytes());
            }
            let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
            let line = Line {
                modality: self.modality,
                age: e.age,
                label: e.class_label,
                feature_sha256: &digest,
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardNegative {
    /// Queue position, 0 = oldest.
    pub position: usize,
    pub age: u64,
    pub class_label: u8,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HardNegativeSet {
    pub anchor_label: u8,
    pub k: usize,
    pub selected: Vec<HardNegative>,
}

/// Higher similarity first, then newer, then lower queue position.
fn hardness_order(a: &HardNegative, b: &HardNegative) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(b.age.cmp(&a.age))
        .then(a.position.cmp(&b.position))
}

/// Raw hinge sum and its `N * K` normalization.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLoss {
    pub raw: Var,
    pub normalized: Var,
    /// Number of hinge terms that entered the sum.
    pub num_terms: usize,
}

/// `sum_k sum_n [alpha - S(a_n, p_n) + S(a_n, neg_k(a_n))]_+` for anchors `a`
/// against the bank, with positives `p`.
fn directional_terms(
    tape: &mut Tape,
    anchors: Var,
    pos: Var,
    labels: &[u8],
    bank: &MemoryBank,
    k: usize,
    alpha: f64,
) -> Result<Option<(Var, usize)>> {
    let Some(matrix) = bank.feature_matrix() else {
        return Ok(None);
    };
    let m = matrix.rows();
    let b = tape.constant(matrix);
    let sims = tape.matmul_nt(anchors, b)?;
    let mut neg_idx = Vec::new();
    let mut anchor_idx = Vec::new();
    for (n, &label) in labels.iter().enumerate() {
        let row = &tape.value(sims).values()[n * m..(n + 1) * m];
        let set = bank.select_from_similarities(row, label, k);
        for h in &set.selected {
            neg_idx.push(n * m + h.position);
            anchor_idx.push(n);
        }
    }
    tape.note_branch(&neg_idx);
    if neg_idx.is_empty() {
        return Ok(None);
    }
    let count = neg_idx.len();
    let neg = tape.gather_flat(sims, neg_idx.into())?;
    let p = tape.gather_flat(pos, anchor_idx.into())?;
    let diff = tape.sub(neg, p)?;
    let z = tape.add_scalar(diff, alpha);
    let h = tape.hinge(z);
    Ok(Some((tape.sum(h), count)))
}

fn check_pair(tape: &Tape, f_v: Var, f_s: Var, labels: &[u8]) -> Result<()> {
    let (tv, ts) = (tape.value(f_v), tape.value(f_s));
    if tv.shape() != ts.shape() || tv.shape().len() != 2 {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: tv.shape().to_vec(),
            rhs: ts.shape().to_vec(),
        });
    }
    if tv.rows() != labels.len() {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: tv.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    Ok(())
}

fn finish(tape: &mut Tape, parts: [Option<(Var, usize)>; 2], n: usize, k: usize) -> Result<ContrastiveLoss> {
    let mut raw: Option<Var> = None;
    let mut num_terms = 0;
    for (p, count) in parts.into_iter().flatten() {
        num_terms += count;
        raw = Some(match raw {
            Some(r) => tape.add(r, p)?,
            None => p,
        });
    }
    let raw = raw.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    let normalized = tape.scale(raw, 1.0 / (n * k.max(1)) as f64);
    Ok(ContrastiveLoss {
        raw,
        normalized,
        num_terms,
    })
}

/// Two-way symmetric loss: video anchors against EEG-bank negatives plus EEG
/// anchors against video-bank negatives. `f_v` and `f_s` are row-normalized
/// features of the same clips; bank entries are constants.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss_two_way(
    tape: &mut Tape,
    f_v: Var,
    f_s: Var,
    labels: &[u8],
    video_bank: &MemoryBank,
    eeg_bank: &MemoryBank,
    k: usize,
    alpha: f64,
) -> Result<ContrastiveLoss> {
    check_pair(tape, f_v, f_s, labels)?;
    let prod = tape.mul(f_v, f_s)?;
    let pos = tape.sum_last(prod);
    let a = directional_terms(tape, f_v, pos, labels, eeg_bank, k, alpha)?;
    let b = directional_terms(tape, f_s, pos, labels, video_bank, k, alpha)?;
    finish(tape, [a, b], labels.len(), k)
}

/// Only the video-anchor direction of [`contrastive_loss_two_way`].
pub fn contrastive_loss_one_way(
    tape: &mut Tape,
    f_v: Var,
    f_s: Var,
    labels: &[u8],
    eeg_bank: &MemoryBank,
    k: usize,
    alpha: f64,
) -> Result<ContrastiveLoss> {
    check_pair(tape, f_v, f_s, labels)?;
    let prod = tape.mul(f_v, f_s)?;
    let pos = tape.sum_last(prod);
    let a = directional_terms(tape, f_v, pos, labels, eeg_bank, k, alpha)?;
    finish(tape, [a, None], labels.len(), k)
}
