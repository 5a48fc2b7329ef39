//! Central-difference checks of every differentiable loss at reduced widths.

use std::fmt;
use std::str::FromStr;

use sacd_core::contrastbank::{contrastive_loss_one_way, contrastive_loss_two_way, MemoryBank};
use sacd_core::diffcore::{CheckReport, GradCheck};
use sacd_core::encoders::{Classifier, EncoderConfig, Modality, Module};
use sacd_core::graphalign::{structural_loss, GraphConfig, GraphEncoder, StructuralLossConfig, StructuralMode};
use sacd_core::objective::{cross_entropy_loss, jsd_loss};
use sacd_core::{Error, Result, Tape, Tensor, Var};

pub const GRADCHECK_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;
/// The graph pipeline accumulates a few ulps of rounding per forward pass,
/// which at 1e-5 is already comparable to the relative-error floor.
const GRAPH_EPS: f64 = 1e-4;
/// Analytic gradients are scaled by this under fault injection.
const FAULT_SCALE: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteModule {
    All,
    Objective,
    Contrastbank,
    Graphalign,
    Encoders,
}

impl SuiteModule {
    fn name(self) -> &'static str {
        match self {
            SuiteModule::All => "all",
            SuiteModule::Objective => "objective",
            SuiteModule::Contrastbank => "contrastbank",
            SuiteModule::Graphalign => "graphalign",
            SuiteModule::Encoders => "encoders",
        }
    }

    fn covers(self, other: SuiteModule) -> bool {
        self == SuiteModule::All || self == other
    }
}

impl fmt::Display for SuiteModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteModule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            SuiteModule::All,
            SuiteModule::Objective,
            SuiteModule::Contrastbank,
            SuiteModule::Graphalign,
            SuiteModule::Encoders,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| format!("unknown module {s:?}; expected all, graphalign, contrastbank, objective or encoders"))
    }
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub module: SuiteModule,
    pub name: &'static str,
    pub report: CheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Smooth deterministic fill in roughly [-1, 1].
fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v = (0..n)
        .map(|i| (1.7 * i as f64 + phase).sin() * (0.3 * i as f64 + 2.0 * phase).cos())
        .collect();
    Tensor::new(shape, v).expect("shape and length agree")
}

fn unit_rows(rows: usize, cols: usize, phase: f64) -> Tensor {
    let t = filled(&[rows, cols], phase);
    let mut v = t.values().to_vec();
    for r in v.chunks_mut(cols) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::new(&[rows, cols], v).expect("unit rows")
}

fn checker(fault: bool) -> GradCheck {
    GradCheck {
        analytic_scale: if fault { FAULT_SCALE } else { 1.0 },
        ..GradCheck::new(EPS, GRADCHECK_TOL)
    }
}

/// Points to the parameters of `modules`, in order, after `inputs`.
fn point_with_params(inputs: Vec<Tensor>, modules: &[&dyn Module]) -> (Vec<Tensor>, Vec<String>) {
    let mut point = inputs;
    let mut names = Vec::new();
    for m in modules {
        for p in m.params() {
            point.push(p.tensor.clone());
            names.push(p.name.clone());
        }
    }
    (point, names)
}

fn bind_all(tape: &mut Tape, names: &[String], vars: &[Var]) {
    for (name, &v) in names.iter().zip(vars) {
        tape.bind_to(name, v);
    }
}

const LABELS: [u8; 6] = [0, 1, 2, 3, 4, 2];

fn objective_checks(g: &GradCheck, out: &mut Vec<SuiteResult>) -> Result<()> {
    let logits = filled(&[6, 5], 0.3);
    let other = filled(&[6, 5], 1.1);
    let ce = g.run(
        |t, v| cross_entropy_loss(t, v[0], &LABELS),
        std::slice::from_ref(&logits),
    )?;
    let js = g.run(|t, v| jsd_loss(t, v[0], v[1]), &[logits, other])?;
    out.push(SuiteResult {
        module: SuiteModule::Objective,
        name: "cross_entropy",
        report: ce,
    });
    out.push(SuiteResult {
        module: SuiteModule::Objective,
        name: "jsd",
        report: js,
    });
    Ok(())
}

fn contrastive_checks(g: &GradCheck, out: &mut Vec<SuiteResult>) -> Result<()> {
    const D: usize = 6;
    const K: usize = 3;
    let labels = &LABELS[..4];
    let bank_labels: Vec<u8> = (0..12).map(|i| (i % 5) as u8).collect();
    let mut video = MemoryBank::new(Modality::Video, 12);
    let mut eeg = MemoryBank::new(Modality::Eeg, 12);
    video.enqueue(&unit_rows(12, D, 2.0), &bank_labels)?;
    eeg.enqueue(&unit_rows(12, D, 3.0), &bank_labels)?;
    let point = [filled(&[4, D], 0.7), filled(&[4, D], 1.9)];
    let alpha = 0.2;

    let two = g.run(
        |t, v| {
            let fv = t.l2_normalize(v[0])?;
            let fs = t.l2_normalize(v[1])?;
            Ok(contrastive_loss_two_way(t, fv, fs, labels, &video, &eeg, K, alpha)?.normalized)
        },
        &point,
    )?;
    let one = g.run(
        |t, v| {
            let fv = t.l2_normalize(v[0])?;
            let fs = t.l2_normalize(v[1])?;
            Ok(contrastive_loss_one_way(t, fv, fs, labels, &eeg, K, alpha)?.normalized)
        },
        &point,
    )?;
    out.push(SuiteResult {
        module: SuiteModule::Contrastbank,
        name: "contrastive_two_way",
        report: two,
    });
    out.push(SuiteResult {
        module: SuiteModule::Contrastbank,
        name: "contrastive_one_way",
        report: one,
    });
    Ok(())
}

fn small_graph_config() -> GraphConfig {
    GraphConfig {
        input_dim: 6,
        node_dim: 5,
        edge_dim: 3,
        message_dim: 4,
        readout_dim: 4,
        output_dim: 7,
        attention_slope: 0.2,
    }
}

fn graph_checks(g: &GradCheck, out: &mut Vec<SuiteResult>) -> Result<()> {
    let gv = GraphEncoder::new("graph_v", small_graph_config(), 11);
    let gs = GraphEncoder::new("graph_s", small_graph_config(), 12);
    let inputs = vec![filled(&[4, 6], 0.2), filled(&[4, 6], 1.4), filled(&[4, 6], 2.6)];
    let (point, names) = point_with_params(inputs, &[&gv, &gs]);
    let layers = 2;

    // one unit above the negative distance keeps the hinge active without
    // inflating the loss value that the differences are taken of
    let mut scratch = Tape::new();
    let (a, b) = (scratch.constant(point[0].clone()), scratch.constant(point[2].clone()));
    let (o_a, o_b) = (gv.embed(&mut scratch, a, layers)?, gs.embed(&mut scratch, b, layers)?);
    let d = scratch.sq_distance(o_a, o_b)?;
    let hinge_margin = scratch.value(d).item() + 1.0;

    for (name, mode, margin) in [
        ("structural_pull_only", StructuralMode::PullOnly, 1.0),
        ("structural_hinge", StructuralMode::HingeWithNegatives, hinge_margin),
    ] {
        let cfg = StructuralLossConfig {
            margin,
            num_propagation_layers: layers,
            mode,
        };
        let report = g.run(
            |t, v| {
                bind_all(t, &names, &v[3..]);
                let o_v = gv.embed(t, v[0], layers)?;
                let o_s = gs.embed(t, v[1], layers)?;
                let neg = match mode {
                    StructuralMode::PullOnly => None,
                    StructuralMode::HingeWithNegatives => Some(gs.embed(t, v[2], layers)?),
                };
                structural_loss(t, o_v, o_s, neg, &cfg)
            },
            &point,
        )?;
        out.push(SuiteResult {
            module: SuiteModule::Graphalign,
            name,
            report,
        });
    }
    Ok(())
}

fn encoder_checks(g: &GradCheck, out: &mut Vec<SuiteResult>) -> Result<()> {
    let cfg = EncoderConfig {
        input_dim: 6,
        hidden_dims: vec![5, 4],
        output_dim: 7,
    };
    let model = Classifier::new("clf", cfg, 5);
    let (point, names) = point_with_params(vec![filled(&[6, 6], 0.9)], &[&model]);
    let report = g.run(
        |t, v| {
            bind_all(t, &names, &v[1..]);
            let (feats, logits) = model.forward(t, v[0])?;
            let ce = cross_entropy_loss(t, logits, &LABELS)?;
            let fm = t.mean(feats);
            t.add(ce, fm)
        },
        &point,
    )?;
    out.push(SuiteResult {
        module: SuiteModule::Encoders,
        name: "classifier",
        report,
    });
    Ok(())
}

/// Runs the checks of `module`. With `fault` the analytic gradients are
/// deliberately mis-scaled so every check must fail.
pub fn run(module: SuiteModule, fault: bool) -> Result<Vec<SuiteResult>> {
    let g = checker(fault);
    let mut out = Vec::new();
    if module.covers(SuiteModule::Objective) {
        objective_checks(&g, &mut out)?;
    }
    if module.covers(SuiteModule::Contrastbank) {
        contrastive_checks(&g, &mut out)?;
    }
    if module.covers(SuiteModule::Graphalign) {
        graph_checks(
            &GradCheck {
                eps: GRAPH_EPS,
                ..g.clone()
            },
            &mut out,
        )?;
    }
    if module.covers(SuiteModule::Encoders) {
        encoder_checks(&g, &mut out)?;
    }
    for r in &out {
        if r.report.checked == 0 {
            return Err(Error::InvalidInput(format!("{} checked no coordinates", r.name)));
        }
    }
    Ok(out)
}
