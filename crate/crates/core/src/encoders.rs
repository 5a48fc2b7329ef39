//! MLP feature encoders, linear classifier heads and momentum-updated shadow
//! copies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::NUM_STAGES;
use crate::diffcore::{Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 512;

/// Which side of the paired data a component belongs to. Video is the
/// student modality, EEG the teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Eeg,
}
pub const DEFAULT_MOMENTUM: f64 = 0.999;

/// Anything that owns named parameters.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable;
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Affine layer `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    pub fn new(name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = draw(input * output);
        let b = draw(output);
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::new(&[input, output], w).expect("linear weight"),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::new(&[output], b).expect("linear bias")),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.bind(&self.weight);
        let b = tape.bind(&self.bias);
        tape.linear(x, w, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![128, 128],
            output_dim: FEATURE_DIM,
        }
    }
}

/// MLP with ReLU after every hidden layer and a linear output layer.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub layers: Vec<Linear>,
}

impl Encoder {
    pub fn new(name: &str, config: EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.output_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(&format!("{name}.l{i}"), d[0], d[1], &mut rng))
            .collect();
        Self { config, layers }
    }

    /// Differentiable forward over a batch `N x input_dim`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.config.input_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: vec![self.config.input_dim],
                rhs: tape.value(x).shape().to_vec(),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Inference on a batch of signals, off any caller tape.
    pub fn encode(&self, signals: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(signals.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Linear map from features to the five stage logits.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new(name: &str, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            linear: Linear::new(name, feature_dim, NUM_STAGES, &mut rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let width = tape.value(features).cols();
        if width != self.linear.input_dim() {
            return Err(Error::Shape {
                op: "classify",
                lhs: vec![self.linear.input_dim()],
                rhs: tape.value(features).shape().to_vec(),
            });
        }
        self.linear.forward(tape, features)
    }

    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

impl Module for ClassifierHead {
    fn params(&self) -> Vec<&Parameter> {
        self.linear.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.linear.params_mut()
    }
}

/// Encoder followed by a classifier head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: ClassifierHead,
}

impl Classifier {
    pub fn new(name: &str, config: EncoderConfig, seed: u64) -> Self {
        let head = ClassifierHead::new(&format!("{name}.head"), config.output_dim, seed ^ 0x4EAD);
        Self {
            encoder: Encoder::new(&format!("{name}.encoder"), config, seed),
            head,
        }
    }

    /// Features and logits for a batch.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let f = self.encoder.forward(tape, x)?;
        let logits = self.head.forward(tape, f)?;
        Ok((f, logits))
    }

    pub fn logits(&self, signals: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(signals.clone());
        let (_, y) = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Arg-max class per row; ties go to the lower class index.
    pub fn predict(&self, signals: &Tensor) -> Result<Vec<u8>> {
        let logits = self.logits(signals)?;
        Ok(logits
            .values()
            .chunks(logits.cols())
            .map(|row| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect())
    }
}

impl Module for Classifier {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.encoder.params();
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.params_mut();
        out.extend(self.head.params_mut());
        out
    }
}

/// Exponential-moving-average shadow of an encoder. Never trained directly.
#[derive(Clone, Debug)]
pub struct MomentumEncoder {
    pub shadow: Encoder,
    pub momentum: f64,
}

impl MomentumEncoder {
    pub fn new(source: &Encoder, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config("momentum_coeff", "must lie in [0, 1]"));
        }
        let mut shadow = source.clone();
        shadow.set_trainable(false);
        Ok(Self { shadow, momentum })
    }

    /// `shadow <- m * shadow + (1 - m) * source`, elementwise.
    pub fn update(&mut self, source: &Encoder) -> Result<()> {
        let m = self.momentum;
        let src = source.params();
        let dst = self.shadow.params_mut();
        if src.len() != dst.len() {
            return Err(Error::invalid("momentum update: layer counts differ"));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if d.shape() != s.shape() {
                return Err(Error::Shape {
                    op: "momentum_update",
                    lhs: d.shape().to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            for (k, q) in d.tensor.values_mut().iter_mut().zip(s.tensor.values()) {
                *k = m * *k + (1.0 - m) * q;
            }
        }
        Ok(())
    }

    pub fn encode(&self, signals: &Tensor) -> Result<Tensor> {
        self.shadow.encode(signals)
    }
}
