use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 5;
pub const NUM_AHI_LEVELS: usize = 4;
pub const STAGE_NAMES: [&str; NUM_STAGES] = ["W", "N1", "N2", "N3", "REM"];
pub const AHI_NAMES: [&str; NUM_AHI_LEVELS] = ["Normal", "Mild", "Moderate", "Severe"];

/// Clip counts per stage (W, N1, N2, N3, REM) in the reference recording set.
pub const REFERENCE_STAGE_COUNTS: [f64; NUM_STAGES] = [55878.0, 5909.0, 40522.0, 20237.0, 12290.0];
/// Subjects per AHI group (Normal, Mild, Moderate, Severe).
pub const REFERENCE_AHI_COUNTS: [f64; NUM_AHI_LEVELS] = [30.0, 30.0, 20.0, 25.0];

/// Probability of staying in the current stage for the default chain.
pub const DEFAULT_SELF_TRANSITION: f64 = 0.85;

const STOCHASTIC_TOL: f64 = 1e-9;

pub fn stage_index(name: &str) -> Option<usize> {
    STAGE_NAMES.iter().position(|s| s.eq_ignore_ascii_case(name))
}

fn normalized<const N: usize>(counts: [f64; N]) -> [f64; N] {
    let total: f64 = counts.iter().sum();
    counts.map(|c| c / total)
}

pub fn default_class_prior() -> [f64; NUM_STAGES] {
    normalized(REFERENCE_STAGE_COUNTS)
}

pub fn default_ahi_proportions() -> [f64; NUM_AHI_LEVELS] {
    normalized(REFERENCE_AHI_COUNTS)
}

/// Adds `strength * ahi_level` to one signal channel of both modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedAhi {
    pub channel: usize,
    #[serde(default = "one")]
    pub strength: f64,
}

fn one() -> f64 {
    1.0
}

/// Parameters of the synthetic paired-modality benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_subjects: usize,
    pub clips_per_subject: usize,
    pub latent_dim: usize,
    pub eeg_dim: usize,
    pub video_dim: usize,
    /// Fraction of the student latent replaced by a per-subject confound.
    pub gap: f64,
    pub eeg_noise: f64,
    pub video_noise: f64,
    pub class_prior: [f64; NUM_STAGES],
    /// Row-stochastic; `None` derives the default chain from `class_prior`.
    pub stage_transition: Option<[[f64; NUM_STAGES]; NUM_STAGES]>,
    pub ahi_proportions: [f64; NUM_AHI_LEVELS],
    pub planted_ahi: Option<PlantedAhi>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_subjects: 105,
            clips_per_subject: 960,
            latent_dim: 16,
            eeg_dim: 32,
            video_dim: 64,
            gap: 0.6,
            eeg_noise: 0.5,
            video_noise: 1.0,
            class_prior: default_class_prior(),
            stage_transition: None,
            ahi_proportions: default_ahi_proportions(),
            planted_ahi: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_subjects", self.num_subjects),
            ("clips_per_subject", self.clips_per_subject),
            ("latent_dim", self.latent_dim),
            ("eeg_dim", self.eeg_dim),
            ("video_dim", self.video_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.gap) {
            return Err(Error::config("gap", "must lie in [0, 1]"));
        }
        if !(self.eeg_noise >= 0.0) {
            return Err(Error::config("eeg_noise", "must be non-negative"));
        }
        if !(self.video_noise >= 0.0) {
            return Err(Error::config("video_noise", "must be non-negative"));
        }
        check_distribution("class_prior", &self.class_prior)?;
        check_distribution("ahi_proportions", &self.ahi_proportions)?;
        if let Some(p) = &self.stage_transition {
            for (i, row) in p.iter().enumerate() {
                check_distribution(&format!("stage_transition[{i}]"), row)?;
            }
        }
        if let Some(planted) = &self.planted_ahi {
            if planted.channel >= self.eeg_dim.min(self.video_dim) {
                return Err(Error::config(
                    "planted_ahi.channel",
                    "must index a channel present in both modalities",
                ));
            }
        }
        Ok(())
    }

    /// The transition matrix in effect.
    pub fn transition(&self) -> Result<[[f64; NUM_STAGES]; NUM_STAGES]> {
        match self.stage_transition {
            Some(p) => Ok(p),
            None => default_transition(&self.class_prior, DEFAULT_SELF_TRANSITION),
        }
    }
}

fn check_distribution(field: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::config(field, "entries must be finite and non-negative"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::config(field, format!("entries sum to {s}, expected 1")));
    }
    Ok(())
}

/// Sleep-stage chain with `stay` self-transition whose stationary
/// distribution is exactly `prior`.
///
/// The off-diagonal mass follows symmetric flows on the stage graph
/// W-N1, N1-N2, N2-N3, N2-REM, W-N2, W-N3, W-REM. Symmetric flows with row
/// sums `prior` leave `prior` invariant. N1 splits evenly between W and N2;
/// N3 and REM send the same fraction `s` to N2 and the rest to W, with `s`
/// chosen so that the W and N2 balances close.
pub fn default_transition(prior: &[f64; NUM_STAGES], stay: f64) -> Result<[[f64; NUM_STAGES]; NUM_STAGES]> {
    const W: usize = 0;
    const N1: usize = 1;
    const N2: usize = 2;
    const N3: usize = 3;
    const REM: usize = 4;
    check_distribution("class_prior", prior)?;
    if prior.iter().any(|&p| p <= 0.0) {
        return Err(Error::config(
            "stage_transition",
            "default chain needs every class prior positive; supply the matrix explicitly",
        ));
    }
    let deep = prior[N3] + prior[REM];
    let s = 0.5 * (1.0 - (prior[W] - prior[N2]) / deep);
    let w_n2 = prior[N2] - 0.5 * prior[N1] - s * deep;
    if !(0.0..=1.0).contains(&s) || w_n2 < 0.0 {
        return Err(Error::config(
            "stage_transition",
            "class prior admits no default chain on the stage graph; supply the matrix explicitly",
        ));
    }
    let mut flow = [[0.0; NUM_STAGES]; NUM_STAGES];
    let mut link = |a: usize, b: usize, f: f64| {
        flow[a][b] = f;
        flow[b][a] = f;
    };
    link(W, N1, 0.5 * prior[N1]);
    link(N1, N2, 0.5 * prior[N1]);
    link(N2, N3, s * prior[N3]);
    link(W, N3, (1.0 - s) * prior[N3]);
    link(N2, REM, s * prior[REM]);
    link(W, REM, (1.0 - s) * prior[REM]);
    link(W, N2, w_n2);

    let mut p = [[0.0; NUM_STAGES]; NUM_STAGES];
    for a in 0..NUM_STAGES {
        for b in 0..NUM_STAGES {
            p[a][b] = if a == b {
                stay
            } else {
                (1.0 - stay) * flow[a][b] / prior[a]
            };
        }
        // absorb rounding so rows are stochastic to machine precision
        let off: f64 = (0..NUM_STAGES).filter(|&b| b != a).map(|b| p[a][b]).sum();
        p[a][a] = 1.0 - off;
    }
    Ok(p)
}
