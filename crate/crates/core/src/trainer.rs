//! Two-phase training: the teacher learns its own modality with
//! cross-entropy, then stays frozen while the student is distilled with the
//! four-term objective. Also runs the variant grid.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::contrastbank::{
    contrastive_loss_one_way, contrastive_loss_two_way, MemoryBank, DEFAULT_CAPACITY, DEFAULT_K, DEFAULT_MARGIN,
};
use crate::datagen::{batches, derive_seed, Batch, Dataset, SubjectRecord, STAGE_NAMES};
use crate::diffcore::{Parameter, Tape, Tensor, Var};
use crate::encoders::{Classifier, EncoderConfig, Modality, Module, MomentumEncoder, DEFAULT_MOMENTUM, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::evalkit::{confusion, fmt_g6, metrics, signal_matrix, MetricsReport};
use crate::graphalign::{structural_loss, GraphConfig, GraphEncoder, StructuralLossConfig, StructuralMode};
use crate::objective::{cross_entropy_loss, jsd_loss, LossWeights};

const PREDICT_CHUNK: usize = 4096;

/// Which loss terms the student objective keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    V0,
    V1,
    V2,
    V3,
    V4,
}

impl Variant {
    /// Grid order used by ablation tables.
    pub const ALL: [Variant; 6] = [
        Variant::V0,
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::V0 => "v0",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        }
    }

    pub fn uses_structural(self) -> bool {
        matches!(self, Variant::Full | Variant::V2 | Variant::V3 | Variant::V4)
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, Variant::Full | Variant::V1 | Variant::V2 | Variant::V4)
    }

    pub fn uses_jsd(self) -> bool {
        matches!(self, Variant::Full | Variant::V1 | Variant::V3 | Variant::V4)
    }

    /// Contrastive term restricted to video anchors.
    pub fn one_way(self) -> bool {
        self == Variant::V4
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(
                    "ablation_variant",
                    format!("unknown variant {s:?}; expected v0..v4 or full"),
                )
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    /// Heavy-ball momentum of the SGD update; 0 is plain SGD.
    pub sgd_momentum: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub k: usize,
    pub bank_capacity: usize,
    pub momentum_coeff: f64,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub seed: u64,
    pub ablation_variant: Variant,
    pub hidden_dims: Vec<usize>,
    pub graph: GraphConfig,
    pub structural: StructuralLossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 0.001,
            weight_decay: 0.0005,
            optimizer: Optimizer::Sgd,
            sgd_momentum: 0.0,
            lambda1: 0.5,
            lambda2: 1.0,
            lambda3: 1.0,
            alpha: DEFAULT_MARGIN,
            k: DEFAULT_K,
            bank_capacity: DEFAULT_CAPACITY,
            momentum_coeff: DEFAULT_MOMENTUM,
            teacher_epochs: 5,
            student_epochs: 5,
            seed: 0,
            ablation_variant: Variant::Full,
            hidden_dims: vec![128, 128],
            graph: GraphConfig::default(),
            structural: StructuralLossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::config("sgd_momentum", "must lie in [0, 1)"));
        }
        for (field, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config("alpha", "must be non-negative"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be positive"));
        }
        if self.bank_capacity == 0 {
            return Err(Error::config("bank_capacity", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum_coeff) {
            return Err(Error::config("momentum_coeff", "must lie in [0, 1]"));
        }
        if self.graph.input_dim != FEATURE_DIM {
            return Err(Error::config(
                "graph.input_dim",
                format!("must equal the feature width {FEATURE_DIM}"),
            ));
        }
        self.structural.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: FEATURE_DIM,
        }
    }
}

/// `theta <- theta - lr * v` with `v <- mu * v + grad + wd * theta`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, weight_decay: f64, momentum: f64) -> Self {
        Self {
            lr,
            weight_decay,
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// Updates every trainable parameter and clears its gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params.into_iter().filter(|p| p.trainable) {
            let grad = p.grad.values().to_vec();
            let theta = p.tensor.values_mut();
            if self.momentum == 0.0 {
                for (t, g) in theta.iter_mut().zip(&grad) {
                    *t -= self.lr * (g + self.weight_decay * *t);
                }
            } else {
                let v = self
                    .velocity
                    .entry(p.name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                for ((t, g), vi) in theta.iter_mut().zip(&grad).zip(v.iter_mut()) {
                    *vi = self.momentum * *vi + g + self.weight_decay * *t;
                    *t -= self.lr * *vi;
                }
            }
            p.zero_grad();
        }
    }
}

/// Student classifier plus the two graph encoders trained alongside it.
#[derive(Clone, Debug)]
pub struct Student {
    pub classifier: Classifier,
    pub graph_v: GraphEncoder,
    pub graph_s: GraphEncoder,
}

impl Student {
    pub fn new(video_dim: usize, cfg: &TrainConfig) -> Self {
        let seed = derive_seed(cfg.seed, 0x57D);
        Self {
            classifier: Classifier::new("student", cfg.encoder_config(video_dim), seed),
            graph_v: GraphEncoder::new("student.graph_v", cfg.graph.clone(), derive_seed(seed, 1)),
            graph_s: GraphEncoder::new("student.graph_s", cfg.graph.clone(), derive_seed(seed, 2)),
        }
    }
}

impl Module for Student {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.classifier.params();
        out.extend(self.graph_v.params());
        out.extend(self.graph_s.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.classifier.params_mut();
        out.extend(self.graph_v.params_mut());
        out.extend(self.graph_s.params_mut());
        out
    }
}

pub fn new_teacher(eeg_dim: usize, cfg: &TrainConfig) -> Classifier {
    Classifier::new("teacher", cfg.encoder_config(eeg_dim), derive_seed(cfg.seed, 0x7EA))
}

pub fn teacher_checkpoint(teacher: &Classifier) -> Checkpoint {
    let arch = serde_json::json!({ "encoder": teacher.encoder.config });
    Checkpoint::from_params("teacher", arch, teacher.params())
}

pub fn student_checkpoint(student: &Student) -> Checkpoint {
    let arch = serde_json::json!({
        "encoder": student.classifier.encoder.config,
        "graph": student.graph_v.config,
    });
    Checkpoint::from_params("student", arch, student.params())
}

fn arch_field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, field: &str) -> Result<T> {
    let v = ck
        .arch
        .get(field)
        .ok_or_else(|| Error::invalid(format!("{} checkpoint lacks arch.{field}", ck.kind)))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::invalid(format!("arch.{field}: {e}")))
}

/// Rebuilds the encoder and head of a teacher or student checkpoint.
pub fn classifier_from_checkpoint(ck: &Checkpoint) -> Result<Classifier> {
    let enc: EncoderConfig = arch_field(ck, "encoder")?;
    let mut c = Classifier::new(&ck.kind, enc, 0);
    ck.restore(c.params_mut())?;
    Ok(c)
}

pub fn student_from_checkpoint(ck: &Checkpoint) -> Result<Student> {
    if ck.kind != "student" {
        return Err(Error::invalid(format!(
            "expected a student checkpoint, found {}",
            ck.kind
        )));
    }
    let graph: GraphConfig = arch_field(ck, "graph")?;
    let mut s = Student {
        classifier: classifier_from_checkpoint(ck)?,
        graph_v: GraphEncoder::new("student.graph_v", graph.clone(), 0),
        graph_s: GraphEncoder::new("student.graph_s", graph, 0),
    };
    ck.restore(s.graph_v.params_mut().into_iter().chain(s.graph_s.params_mut()))?;
    Ok(s)
}

fn batch_tensor(batch: &Batch<'_>, modality: Modality) -> Tensor {
    let rows: Vec<Vec<f64>> = batch
        .iter()
        .map(|c| match modality {
            Modality::Video => c.video_signal.clone(),
            Modality::Eeg => c.eeg_signal.clone(),
        })
        .collect();
    Tensor::from_rows(&rows).expect("batch rows share a width")
}

fn check_finite(component: &str, v: f64, step: u64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
            step,
        })
    }
}

/// Predictions of `classifier` on one modality of every clip.
pub fn predict(classifier: &Classifier, subjects: &[&SubjectRecord], modality: Modality) -> Result<(Vec<u8>, Vec<u8>)> {
    let signals = signal_matrix(subjects, modality)?;
    let cols = signals.cols();
    let chunks: Vec<Vec<u8>> = signals
        .values()
        .par_chunks(PREDICT_CHUNK * cols)
        .map(|c| classifier.predict(&Tensor::new(&[c.len() / cols, cols], c.to_vec())?))
        .collect::<Result<_>>()?;
    let truth = subjects
        .iter()
        .flat_map(|s| s.clips.iter().map(|c| c.stage_label))
        .collect();
    Ok((truth, chunks.concat()))
}

/// Confusion-matrix metrics of `classifier` on one modality of `subjects`.
pub fn evaluate(classifier: &Classifier, subjects: &[&SubjectRecord], modality: Modality) -> Result<MetricsReport> {
    let (truth, pred) = predict(classifier, subjects, modality)?;
    metrics(&confusion(&truth, &pred)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    /// Parameters from the epoch with the best validation accuracy, or the
    /// initialization when no epoch ran.
    pub teacher: Classifier,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochLog>,
}

pub fn train_teacher(data: &Dataset, cfg: &TrainConfig) -> Result<TeacherOutcome> {
    cfg.validate()?;
    let train = data.subjects_in(&data.split.train);
    let val = data.subjects_in(&data.split.val);
    let mut teacher = new_teacher(data.spec.eeg_dim, cfg);
    let mut best = teacher.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut opt = Sgd::new(cfg.lr, cfg.weight_decay, cfg.sgd_momentum);
    let mut epochs = Vec::with_capacity(cfg.teacher_epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.teacher_epochs {
        let mut total = 0.0;
        let order = batches(&train, cfg.batch_size, derive_seed(cfg.seed, 0x7000 + epoch as u64))?;
        for batch in &order {
            let labels: Vec<u8> = batch.iter().map(|c| c.stage_label).collect();
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(batch, Modality::Eeg));
            let (_, logits) = teacher.forward(&mut tape, x)?;
            let loss = cross_entropy_loss(&mut tape, logits, &labels)?;
            let l = tape.value(loss).item();
            check_finite("l_ce", l, step)?;
            total += l;
            tape.backward(loss)?.accumulate(teacher.params_mut());
            opt.step(teacher.params_mut());
            step += 1;
        }
        let val_acc = if val.is_empty() {
            0.0
        } else {
            evaluate(&teacher, &val, Modality::Eeg)?.acc
        };
        if val_acc > best_acc {
            best_acc = val_acc;
            best = teacher.clone();
            best_epoch = Some(epoch);
        }
        epochs.push(EpochLog {
            epoch,
            mean_loss: total / order.len() as f64,
            val_acc,
        });
    }
    Ok(TeacherOutcome {
        teacher: best,
        best_epoch,
        epochs,
    })
}

/// One line of the JSONL step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub l_ce: f64,
    pub l_d: f64,
    pub l_c: f64,
    pub l_jsd: f64,
    pub total: f64,
    /// Video bank then EEG bank.
    pub bank_sizes: [usize; 2],
    pub lr: f64,
}

pub fn log_jsonl(log: &[StepLog]) -> String {
    let mut out = String::new();
    for line in log {
        out.push_str(&serde_json::to_string(line).expect("log line serializes"));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct StudentOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub student: Student,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochLog>,
    pub log: Vec<StepLog>,
    pub teacher_hash: String,
}

impl StudentOutcome {
    /// Mean of `l_d` over the steps of one epoch.
    pub fn mean_structural(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self.log.iter().filter(|l| l.epoch == epoch).map(|l| l.l_d).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn l2_rows(t: &Tensor) -> Result<Tensor> {
    let c = t.cols();
    let mut out = t.values().to_vec();
    for row in out.chunks_mut(c) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return Err(Error::Domain {
                op: "l2_normalize",
                detail: "zero momentum feature".into(),
            });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(t.shape(), out)
}

/// Per-step state of the distillation phase.
struct Distiller<'a> {
    cfg: &'a TrainConfig,
    variant: Variant,
    teacher: Classifier,
    student: Student,
    shadow_v: MomentumEncoder,
    shadow_s: MomentumEncoder,
    video_bank: MemoryBank,
    eeg_bank: MemoryBank,
    opt: Sgd,
    previous_eeg: Option<Tensor>,
}

impl Distiller<'_> {
    fn step(&mut self, batch: &Batch<'_>, step: u64, epoch: usize) -> Result<StepLog> {
        let cfg = self.cfg;
        let labels: Vec<u8> = batch.iter().map(|c| c.stage_label).collect();
        let xv = batch_tensor(batch, Modality::Video);
        let xs = batch_tensor(batch, Modality::Eeg);

        let mut tape = Tape::new();
        let v_in = tape.constant(xv.clone());
        let s_in = tape.constant(xs.clone());
        let (f_v, logits_v) = self.student.classifier.forward(&mut tape, v_in)?;
        // frozen teacher: its parameters enter the tape as constants
        let (f_s, logits_s) = self.teacher.forward(&mut tape, s_in)?;

        let ce = cross_entropy_loss(&mut tape, logits_v, &labels)?;
        let mut total = ce;
        let value = |tape: &Tape, v: Var| tape.value(v).item();
        let mut report = [value(&tape, ce), 0.0, 0.0, 0.0];

        if self.variant.uses_structural() {
            let layers = cfg.structural.num_propagation_layers;
            let o_v = self.student.graph_v.embed(&mut tape, f_v, layers)?;
            let o_s = self.student.graph_s.embed(&mut tape, f_s, layers)?;
            let negative = match (cfg.structural.mode, &self.previous_eeg) {
                (StructuralMode::HingeWithNegatives, Some(prev)) => {
                    let x = tape.constant(prev.clone());
                    let (f_prev, _) = self.teacher.forward(&mut tape, x)?;
                    Some(self.student.graph_s.embed(&mut tape, f_prev, layers)?)
                }
                _ => None,
            };
            let pull_only = StructuralLossConfig {
                mode: StructuralMode::PullOnly,
                ..cfg.structural.clone()
            };
            let l_d = match negative {
                Some(_) => structural_loss(&mut tape, o_v, o_s, negative, &cfg.structural)?,
                // no mismatched graph before the second step
                None => structural_loss(&mut tape, o_v, o_s, None, &pull_only)?,
            };
            report[1] = value(&tape, l_d);
            let w = tape.scale(l_d, cfg.lambda1);
            total = tape.add(total, w)?;
        }

        if self.variant.uses_contrastive() {
            let warm =
                self.video_bank.eligible_count(&labels) >= cfg.k && self.eeg_bank.eligible_count(&labels) >= cfg.k;
            if warm {
                let fv = tape.l2_normalize(f_v)?;
                let fs = tape.l2_normalize(f_s)?;
                let lc = if self.variant.one_way() {
                    contrastive_loss_one_way(&mut tape, fv, fs, &labels, &self.eeg_bank, cfg.k, cfg.alpha)?
                } else {
                    contrastive_loss_two_way(
                        &mut tape,
                        fv,
                        fs,
                        &labels,
                        &self.video_bank,
                        &self.eeg_bank,
                        cfg.k,
                        cfg.alpha,
                    )?
                };
                report[2] = value(&tape, lc.normalized);
                let w = tape.scale(lc.normalized, cfg.lambda2);
                total = tape.add(total, w)?;
            }
        }

        if self.variant.uses_jsd() {
            let l = jsd_loss(&mut tape, logits_v, logits_s)?;
            report[3] = value(&tape, l);
            let w = tape.scale(l, cfg.lambda3);
            total = tape.add(total, w)?;
        }

        for (name, v) in ["l_ce", "l_d", "l_c", "l_jsd"].iter().zip(report) {
            check_finite(name, v, step)?;
        }
        let total_value = value(&tape, total);
        check_finite("total", total_value, step)?;

        tape.backward(total)?.accumulate(self.student.params_mut());
        self.opt.step(self.student.params_mut());

        self.shadow_v.update(&self.student.classifier.encoder)?;
        self.shadow_s.update(&self.teacher.encoder)?;
        if self.variant.uses_contrastive() {
            self.video_bank
                .enqueue(&l2_rows(&self.shadow_v.encode(&xv)?)?, &labels)?;
            self.eeg_bank.enqueue(&l2_rows(&self.shadow_s.encode(&xs)?)?, &labels)?;
        }
        self.previous_eeg = Some(xs);

        Ok(StepLog {
            step,
            epoch,
            l_ce: report[0],
            l_d: report[1],
            l_c: report[2],
            l_jsd: report[3],
            total: total_value,
            bank_sizes: [self.video_bank.len(), self.eeg_bank.len()],
            lr: cfg.lr,
        })
    }
}

/// Distills `teacher` into a fresh student. The teacher is never modified.
pub fn train_student(data: &Dataset, teacher: &Classifier, cfg: &TrainConfig) -> Result<StudentOutcome> {
    cfg.validate()?;
    let train = data.subjects_in(&data.split.train);
    let val = data.subjects_in(&data.split.val);
    let teacher_hash = teacher_checkpoint(teacher).hash();

    let mut frozen = teacher.clone();
    frozen.set_trainable(false);
    let student = Student::new(data.spec.video_dim, cfg);
    let mut d = Distiller {
        cfg,
        variant: cfg.ablation_variant,
        shadow_v: MomentumEncoder::new(&student.classifier.encoder, cfg.momentum_coeff)?,
        shadow_s: MomentumEncoder::new(&frozen.encoder, cfg.momentum_coeff)?,
        teacher: frozen,
        student,
        video_bank: MemoryBank::new(Modality::Video, cfg.bank_capacity),
        eeg_bank: MemoryBank::new(Modality::Eeg, cfg.bank_capacity),
        opt: Sgd::new(cfg.lr, cfg.weight_decay, cfg.sgd_momentum),
        previous_eeg: None,
    };

    let mut best = d.student.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut epochs = Vec::with_capacity(cfg.student_epochs);
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.student_epochs {
        let order = batches(&train, cfg.batch_size, derive_seed(cfg.seed, 0x5000 + epoch as u64))?;
        let mut total = 0.0;
        for batch in &order {
            let line = d.step(batch, step, epoch)?;
            total += line.total;
            log.push(line);
            step += 1;
        }
        let val_acc = if val.is_empty() {
            0.0
        } else {
            evaluate(&d.student.classifier, &val, Modality::Video)?.acc
        };
        if val_acc > best_acc {
            best_acc = val_acc;
            best = d.student.clone();
            best_epoch = Some(epoch);
        }
        epochs.push(EpochLog {
            epoch,
            mean_loss: total / order.len() as f64,
            val_acc,
        });
    }
    Ok(StudentOutcome {
        student: best,
        best_epoch,
        epochs,
        log,
        teacher_hash,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub teacher_hash: String,
    /// Mean `l_d` over the first and the last epoch.
    pub structural_first: Option<f64>,
    pub structural_last: Option<f64>,
    #[serde(skip)]
    pub log: Vec<StepLog>,
}

/// Trains every variant for every seed against the same teacher and
/// evaluates on the test split. Rows come back seed-major in
/// [`Variant::ALL`] order.
pub fn run_ablation(
    data: &Dataset,
    teacher: &Classifier,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let test = data.subjects_in(&data.split.test);
    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&s| Variant::ALL.into_iter().map(move |v| (s, v)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, variant)| {
            let run_cfg = TrainConfig {
                seed,
                ablation_variant: variant,
                ..cfg.clone()
            };
            let out = train_student(data, teacher, &run_cfg)?;
            let last = cfg.student_epochs.checked_sub(1);
            Ok(AblationRow {
                variant,
                seed,
                metrics: evaluate(&out.student.classifier, &test, Modality::Video)?,
                teacher_hash: out.teacher_hash.clone(),
                structural_first: variant.uses_structural().then(|| out.mean_structural(0)).flatten(),
                structural_last: variant
                    .uses_structural()
                    .then(|| last.and_then(|e| out.mean_structural(e)))
                    .flatten(),
                log: out.log,
            })
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "variant,seed,acc,mf1,kappa,acc_W,acc_N1,acc_N2,acc_N3,acc_REM";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    debug_assert_eq!(STAGE_NAMES.len(), 5);
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.variant,
            r.seed,
            fmt_g6(m.acc),
            fmt_g6(m.mf1),
            fmt_g6(m.kappa)
        ));
        for a in m.per_class_acc {
            out.push(',');
            out.push_str(&fmt_g6(a));
        }
        out.push('\n');
    }
    out
}

/// Mean test accuracy per variant over the rows.
pub fn mean_accuracy(rows: &[AblationRow]) -> Vec<(Variant, f64)> {
    Variant::ALL
        .into_iter()
        .filter_map(|v| {
            let accs: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.metrics.acc).collect();
            (!accs.is_empty()).then(|| (v, accs.iter().sum::<f64>() / accs.len() as f64))
        })
        .collect()
}
