//! Synthetic paired-modality sleep benchmark.
//!
//! Each clip carries a teacher ("EEG") signal that is a noisy linear image
//! of its class prototype, and a student ("video") signal whose latent mixes
//! the prototype with a per-subject confound. Stages follow a Markov chain
//! per subject, so consecutive clips are strongly correlated.

mod io;
mod spec;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset, Dataset, DatasetMeta, FORMAT_VERSION, SAMPLES_MAGIC};
pub use spec::{
    default_ahi_proportions, default_class_prior, default_transition, stage_index, PlantedAhi, SyntheticSpec,
    AHI_NAMES, DEFAULT_SELF_TRANSITION, NUM_AHI_LEVELS, NUM_STAGES, REFERENCE_AHI_COUNTS, REFERENCE_STAGE_COUNTS,
    STAGE_NAMES,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub subject_id: u32,
    pub time_index: u32,
    pub stage_label: u8,
    pub eeg_signal: Vec<f64>,
    pub video_signal: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: u32,
    pub ahi_level: u8,
    pub clips: Vec<ClipSample>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<u32>,
    pub val: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

impl SplitAssignment {
    pub fn contains(&self, subject_id: u32) -> bool {
        self.train.contains(&subject_id) || self.val.contains(&subject_id) || self.test.contains(&subject_id)
    }
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed
        ^ tag
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect()
}

fn categorical(rng: &mut impl Rng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the cumulative sum
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// `out = m * x` for a row-major `rows x x.len()` matrix.
fn mat_vec(m: &[f64], x: &[f64]) -> Vec<f64> {
    m.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Splits `n` items across `proportions` by largest remainder.
fn apportion(n: usize, proportions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Fixed random quantities shared by every subject.
struct World {
    prototypes: Vec<Vec<f64>>,
    eeg_mix: Vec<f64>,
    video_mix: Vec<f64>,
}

impl World {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xC1A5));
        let prototypes = (0..NUM_STAGES)
            .map(|_| normal_vec(&mut rng, spec.latent_dim, 1.0))
            .collect();
        let scale = 1.0 / (spec.latent_dim as f64).sqrt();
        let eeg_mix = normal_vec(&mut rng, spec.eeg_dim * spec.latent_dim, scale);
        let video_mix = normal_vec(&mut rng, spec.video_dim * spec.latent_dim, scale);
        Self {
            prototypes,
            eeg_mix,
            video_mix,
        }
    }
}

/// Generates every subject. Pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SubjectRecord>> {
    spec.validate()?;
    let transition = spec.transition()?;
    for (i, row) in transition.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|v| *v < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                format!("stage_transition[{i}]"),
                "row is not a probability distribution",
            ));
        }
    }
    let world = World::new(spec);

    // AHI levels: quota per level by largest remainder, randomly assigned
    let mut levels: Vec<u8> = apportion(spec.num_subjects, &spec.ahi_proportions)
        .iter()
        .enumerate()
        .flat_map(|(lvl, &n)| std::iter::repeat_n(lvl as u8, n))
        .collect();
    levels.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0xA41)));

    let subjects = levels
        .par_iter()
        .enumerate()
        .map(|(sid, &ahi)| generate_subject(spec, &world, &transition, sid as u32, ahi))
        .collect();
    Ok(subjects)
}

fn generate_subject(
    spec: &SyntheticSpec,
    world: &World,
    transition: &[[f64; NUM_STAGES]; NUM_STAGES],
    subject_id: u32,
    ahi_level: u8,
) -> SubjectRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1 + subject_id as u64));
    let confound = normal_vec(&mut rng, spec.latent_dim, 1.0);
    let mut stage = categorical(&mut rng, &spec.class_prior);
    let mut clips = Vec::with_capacity(spec.clips_per_subject);
    for t in 0..spec.clips_per_subject {
        if t > 0 {
            stage = categorical(&mut rng, &transition[stage]);
        }
        let proto = &world.prototypes[stage];
        let mut eeg = mat_vec(&world.eeg_mix, proto);
        for v in eeg.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += spec.eeg_noise * z;
        }
        let latent: Vec<f64> = proto
            .iter()
            .zip(&confound)
            .map(|(z, b)| (1.0 - spec.gap) * z + spec.gap * b)
            .collect();
        let mut video = mat_vec(&world.video_mix, &latent);
        for v in video.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += spec.video_noise * z;
        }
        if let Some(planted) = &spec.planted_ahi {
            eeg[planted.channel] += planted.strength * ahi_level as f64;
            video[planted.channel] += planted.strength * ahi_level as f64;
        }
        // stored values are exactly representable in the on-disk f32 format
        let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect();
        clips.push(ClipSample {
            subject_id,
            time_index: t as u32,
            stage_label: stage as u8,
            eeg_signal: to_f32(eeg),
            video_signal: to_f32(video),
        });
    }
    SubjectRecord {
        subject_id,
        ahi_level,
        clips,
    }
}

/// Minimum subjects per AHI level for a split with non-empty train, val and
/// test parts.
pub const MIN_SUBJECTS_PER_LEVEL: usize = 5;

/// Subject-disjoint split stratified by AHI level: about 20% of each level
/// for test, then 20% of the remainder for validation.
pub fn split(subjects: &[SubjectRecord], seed: u64) -> Result<SplitAssignment> {
    let mut by_level: Vec<Vec<u32>> = vec![Vec::new(); NUM_AHI_LEVELS];
    for s in subjects {
        let lvl = s.ahi_level as usize;
        if lvl >= NUM_AHI_LEVELS {
            return Err(Error::invalid(format!("subject {} has AHI level {lvl}", s.subject_id)));
        }
        by_level[lvl].push(s.subject_id);
    }
    let mut out = SplitAssignment::default();
    for (lvl, ids) in by_level.iter_mut().enumerate() {
        if ids.len() < MIN_SUBJECTS_PER_LEVEL {
            return Err(Error::invalid(format!(
                "AHI level {} has {} subjects; at least {MIN_SUBJECTS_PER_LEVEL} are needed",
                AHI_NAMES[lvl],
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5B1 + lvl as u64)));
        let n_test = (0.2 * ids.len() as f64).round() as usize;
        let rest = ids.len() - n_test;
        let n_val = (0.2 * rest as f64).round() as usize;
        out.test.extend(&ids[..n_test]);
        out.val.extend(&ids[n_test..n_test + n_val]);
        out.train.extend(&ids[n_test + n_val..]);
    }
    Ok(out)
}

/// One training batch: `batch_size` consecutive clips of one subject.
pub type Batch<'a> = Vec<&'a ClipSample>;

/// One epoch of contiguous windows in seeded random order. Tails shorter
/// than `batch_size` are dropped.
pub fn batches<'a>(subjects: &[&'a SubjectRecord], batch_size: usize, seed: u64) -> Result<Vec<Batch<'a>>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size must be at least 2"));
    }
    if !subjects.iter().any(|s| s.clips.len() >= batch_size) {
        return Err(Error::invalid(format!("no subject has at least {batch_size} clips")));
    }
    let mut windows: Vec<Batch<'a>> = subjects
        .iter()
        .flat_map(|s| s.clips.chunks_exact(batch_size).map(|w| w.iter().collect::<Vec<_>>()))
        .collect();
    windows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(windows)
}
