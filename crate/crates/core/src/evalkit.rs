//! Classification metrics, per-subject stage profiles, Spearman analysis
//! against AHI levels and CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datagen::{ClipSample, SubjectRecord, AHI_NAMES, NUM_AHI_LEVELS, NUM_STAGES, STAGE_NAMES};
use crate::diffcore::Tensor;
use crate::encoders::{Encoder, Modality};
use crate::error::{Error, Result};

pub const DEFAULT_CHANNEL_THRESHOLD: f64 = 0.4;
pub const MIN_SPEARMAN_SUBJECTS: usize = 5;
const ENCODE_CHUNK: usize = 4096;

/// Rows are true stages, columns predicted stages.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_STAGES]; NUM_STAGES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Each row divided by its sum; rows without support stay zero.
    pub fn row_normalized(&self) -> [[f64; NUM_STAGES]; NUM_STAGES] {
        let mut out = [[0.0; NUM_STAGES]; NUM_STAGES];
        for (o, row) in out.iter_mut().zip(&self.counts) {
            let s: u64 = row.iter().sum();
            if s > 0 {
                for (x, &c) in o.iter_mut().zip(row) {
                    *x = c as f64 / s as f64;
                }
            }
        }
        out
    }
}

pub fn confusion(truth: &[u8], predicted: &[u8]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape {
            op: "confusion",
            lhs: vec![truth.len()],
            rhs: vec![predicted.len()],
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&y, &p) in truth.iter().zip(predicted) {
        if y as usize >= NUM_STAGES || p as usize >= NUM_STAGES {
            return Err(Error::invalid(format!("label pair ({y}, {p}) out of range")));
        }
        cm.counts[y as usize][p as usize] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub mf1: f64,
    pub kappa: f64,
    /// Recall of each stage; 0 for a stage with no support.
    pub per_class_acc: [f64; NUM_STAGES],
    pub per_class_f1: [f64; NUM_STAGES],
    pub confusion: ConfusionMatrix,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::invalid("metrics of an empty confusion matrix"));
    }
    let n = n as f64;
    let c = &cm.counts;
    let row = |i: usize| c[i].iter().sum::<u64>() as f64;
    let col = |j: usize| (0..NUM_STAGES).map(|i| c[i][j]).sum::<u64>() as f64;

    let mut per_class_acc = [0.0; NUM_STAGES];
    let mut per_class_f1 = [0.0; NUM_STAGES];
    // integer numerators keep a diagonal matrix at exactly acc = kappa = 1
    let (mut trace, mut chance) = (0u128, 0u128);
    for k in 0..NUM_STAGES {
        let tp = c[k][k] as f64;
        let (support, predicted) = (row(k), col(k));
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        per_class_acc[k] = recall;
        per_class_f1[k] = ratio(2.0 * precision * recall, precision + recall);
        trace += c[k][k] as u128;
        chance += support as u128 * predicted as u128;
    }
    let p_a = trace as f64 / n;
    let p_e = chance as f64 / (n * n);
    let kappa = if p_e == 1.0 { 0.0 } else { (p_a - p_e) / (1.0 - p_e) };
    Ok(MetricsReport {
        acc: p_a,
        mf1: per_class_f1.iter().sum::<f64>() / NUM_STAGES as f64,
        kappa,
        per_class_acc,
        per_class_f1,
        confusion: cm.clone(),
    })
}

/// Signals of one modality for every clip of `subjects`, in order.
pub fn signal_matrix(subjects: &[&SubjectRecord], modality: Modality) -> Result<Tensor> {
    let clips: Vec<_> = subjects.iter().flat_map(|s| &s.clips).collect();
    let Some(first) = clips.first() else {
        return Err(Error::invalid("no clips to stack"));
    };
    fn pick(c: &ClipSample, modality: Modality) -> &[f64] {
        match modality {
            Modality::Video => &c.video_signal,
            Modality::Eeg => &c.eeg_signal,
        }
    }
    let d = pick(first, modality).len();
    let values = clips.iter().flat_map(|c| pick(c, modality).iter().copied()).collect();
    Tensor::new(&[clips.len(), d], values)
}

/// Encodes many rows in bounded chunks.
pub fn encode_rows(encoder: &Encoder, signals: &Tensor) -> Result<Tensor> {
    let (rows, cols) = (signals.rows(), signals.cols());
    let chunks: Vec<Tensor> = signals
        .values()
        .par_chunks(ENCODE_CHUNK * cols)
        .map(|chunk| {
            let t = Tensor::new(&[chunk.len() / cols, cols], chunk.to_vec())?;
            encoder.encode(&t)
        })
        .collect::<Result<_>>()?;
    let width = encoder.config.output_dim;
    let values = chunks.into_iter().flat_map(Tensor::into_values).collect();
    Tensor::new(&[rows, width], values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectStageProfile {
    pub subject_id: u32,
    pub ahi_level: u8,
    /// Mean feature per stage; `None` when the subject has no clip of it.
    pub mean_feature: [Option<Vec<f64>>; NUM_STAGES],
}

/// Per subject and ground-truth stage, the mean feature of `encoder` on one
/// modality.
pub fn stage_profiles(
    encoder: &Encoder,
    subjects: &[&SubjectRecord],
    modality: Modality,
) -> Result<Vec<SubjectStageProfile>> {
    subjects
        .par_iter()
        .map(|s| {
            let signals = signal_matrix(&[*s], modality)?;
            let feats = encode_rows(encoder, &signals)?;
            let d = feats.cols();
            let mut sums = vec![vec![0.0; d]; NUM_STAGES];
            let mut counts = [0usize; NUM_STAGES];
            for (r, c) in s.clips.iter().enumerate() {
                let k = c.stage_label as usize;
                counts[k] += 1;
                for (a, v) in sums[k].iter_mut().zip(feats.row_slice(r)) {
                    *a += v;
                }
            }
            let mut mean_feature: [Option<Vec<f64>>; NUM_STAGES] = Default::default();
            for k in 0..NUM_STAGES {
                if counts[k] > 0 {
                    let n = counts[k] as f64;
                    mean_feature[k] = Some(sums[k].iter().map(|v| v / n).collect());
                }
            }
            Ok(SubjectStageProfile {
                subject_id: s.subject_id,
                ahi_level: s.ahi_level,
                mean_feature,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AhiTarget {
    /// Ordinal level 0..=3.
    Overall,
    /// Indicator of one level.
    Level(u8),
}

impl AhiTarget {
    pub fn all() -> Vec<AhiTarget> {
        let mut v = vec![AhiTarget::Overall];
        v.extend((0..NUM_AHI_LEVELS as u8).map(AhiTarget::Level));
        v
    }

    pub fn label(self) -> String {
        match self {
            AhiTarget::Overall => "overall".to_string(),
            AhiTarget::Level(l) => AHI_NAMES[l as usize].to_string(),
        }
    }

    pub fn value(self, ahi_level: u8) -> f64 {
        match self {
            AhiTarget::Overall => ahi_level as f64,
            AhiTarget::Level(l) => f64::from(u8::from(l == ahi_level)),
        }
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Two-sided p-value of `rho` from the t-approximation with `n - 2` degrees
/// of freedom.
pub fn spearman_p_value(rho: f64, n: usize) -> f64 {
    if n < 3 {
        return 1.0;
    }
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub stage: u8,
    pub target: AhiTarget,
    pub num_subjects: usize,
    pub rho: Vec<f64>,
    /// t-approximation p-values.
    pub p_value: Vec<f64>,
}

pub fn spearman_ahi(profiles: &[SubjectStageProfile], stage: u8, target: AhiTarget) -> Result<SpearmanResult> {
    if stage as usize >= NUM_STAGES {
        return Err(Error::invalid(format!("stage {stage} out of range")));
    }
    let present: Vec<(&Vec<f64>, u8)> = profiles
        .iter()
        .filter_map(|p| p.mean_feature[stage as usize].as_ref().map(|f| (f, p.ahi_level)))
        .collect();
    let n = present.len();
    if n < MIN_SPEARMAN_SUBJECTS {
        return Err(Error::invalid(format!(
            "stage {} is present for {n} subjects; at least {MIN_SPEARMAN_SUBJECTS} are needed",
            STAGE_NAMES[stage as usize]
        )));
    }
    let y: Vec<f64> = present.iter().map(|(_, l)| target.value(*l)).collect();
    let d = present[0].0.len();
    let rho: Vec<f64> = (0..d)
        .into_par_iter()
        .map(|ch| {
            let x: Vec<f64> = present.iter().map(|(f, _)| f[ch]).collect();
            spearman(&x, &y)
        })
        .collect();
    let p_value = rho.iter().map(|&r| spearman_p_value(r, n)).collect();
    Ok(SpearmanResult {
        stage,
        target,
        num_subjects: n,
        rho,
        p_value,
    })
}

/// Channels with `rho > threshold`, ascending.
pub fn select_channels(rho: &[f64], threshold: f64) -> Vec<usize> {
    rho.iter()
        .enumerate()
        .filter(|(_, &r)| r > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_g6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".to_string() } else { v.to_string() };
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa.to_string()),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("name,acc,mf1,kappa");
    for s in STAGE_NAMES {
        write!(out, ",acc_{s}").unwrap();
    }
    out.push('\n');
    for (name, m) in rows {
        write!(out, "{name},{},{},{}", fmt_g6(m.acc), fmt_g6(m.mf1), fmt_g6(m.kappa)).unwrap();
        for a in m.per_class_acc {
            write!(out, ",{}", fmt_g6(a)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// CSV of student features: `subject_id,time_index,stage_label,ahi_level`
/// followed by one column per feature channel.
pub fn export_embeddings(encoder: &Encoder, subjects: &[&SubjectRecord], path: &Path) -> Result<usize> {
    let signals = signal_matrix(subjects, Modality::Video)?;
    let feats = encode_rows(encoder, &signals)?;
    let mut out = String::from("subject_id,time_index,stage_label,ahi_level");
    for k in 0..feats.cols() {
        write!(out, ",f{k}").unwrap();
    }
    out.push('\n');
    let mut r = 0;
    for s in subjects {
        for c in &s.clips {
            write!(
                out,
                "{},{},{},{}",
                c.subject_id, c.time_index, c.stage_label, s.ahi_level
            )
            .unwrap();
            for v in feats.row_slice(r) {
                out.push(',');
                out.push_str(&fmt_g6(*v));
            }
            out.push('\n');
            r += 1;
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(r)
}
