//! Parameterised layers shared by the generator, discriminators and the
//! perceptual feature stack.

use dehaze_tensor::{Bound, NormMode, ParamId, ParamSet, RunningStats, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// He-normal initialised convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, stride: 1, bias: true }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Scalar parameter count.
    pub fn count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.bias { self.cout } else { 0 }
    }
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = (spec.cin * spec.k * spec.k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let shape = [spec.cout, spec.cin, spec.k, spec.k];
        let weight = params.push(format!("{name}.weight"), Tensor::from_fn(&shape, |_| normal.sample(rng)));
        let bias = spec.bias.then(|| params.push(format!("{name}.bias"), Tensor::zeros(&[spec.cout])));
        Conv { weight, bias, stride: spec.stride, pad: spec.k / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.weight), self.stride, self.pad)?;
        Ok(match self.bias {
            Some(b) => tape.add_channel(y, p.var(b))?,
            None => y,
        })
    }
}

/// Affine batch norm; running statistics live in the owning network's
/// `stats` vector at index `slot`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slot: usize,
}

impl BatchNorm {
    pub fn new(params: &mut ParamSet, stats: &mut Vec<RunningStats>, name: &str, channels: usize) -> Self {
        let gamma = params.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = params.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
        stats.push(RunningStats::new(channels));
        BatchNorm { gamma, beta, slot: stats.len() - 1 }
    }

    pub fn count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, stats: &mut [RunningStats], x: Var, mode: NormMode) -> Result<Var> {
        Ok(tape.batch_norm(x, p.var(self.gamma), p.var(self.beta), &mut stats[self.slot], mode)?)
    }
}

/// 3×3 conv (no bias) → batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        stats: &mut Vec<RunningStats>,
        name: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let cout = spec.cout;
        let conv = Conv::new(params, &format!("{name}.conv"), spec.no_bias(), rng);
        let bn = BatchNorm::new(params, stats, &format!("{name}.bn"), cout);
        ConvBn { conv, bn }
    }

    pub fn count(cin: usize, cout: usize, k: usize) -> usize {
        ConvSpec::new(cin, cout, k).no_bias().count() + BatchNorm::count(cout)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, stats: &mut [RunningStats], x: Var, mode: NormMode) -> Result<Var> {
        let y = self.conv.forward(tape, p, x)?;
        self.bn.forward(tape, p, stats, y, mode)
    }
}
