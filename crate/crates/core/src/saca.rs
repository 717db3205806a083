//! Spatially aware channel attention: an embedded dot-product non-local
//! block followed by softmax channel re-weighting.

use dehaze_tensor::{Bound, ParamSet, Tape, Var};
use rand::Rng;

use crate::error::{DehazeError, Result};
use crate::nn::{Conv, ConvSpec};

#[derive(Debug, Clone)]
pub struct SacaBlock {
    pub channels: usize,
    pub theta: Conv,
    pub phi: Conv,
    pub g: Conv,
    pub w_z: Conv,
    pub attn: Conv,
}

/// Intermediate values of one SACA pass.
#[derive(Debug, Clone, Copy)]
pub struct SacaParts {
    /// Output of the non-local stage, `x + W_z(...)`.
    pub nonlocal: Var,
    /// Channel weights `[N, C, 1, 1]`, each sample summing to 1.
    pub weights: Var,
    pub out: Var,
}

impl SacaBlock {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(DehazeError::invalid(format!("SACA needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        let mut conv = |suffix: &str, cin: usize, cout: usize| {
            Conv::new(params, &format!("{name}.{suffix}"), ConvSpec::new(cin, cout, 1), rng)
        };
        Ok(SacaBlock {
            channels,
            theta: conv("theta", channels, half),
            phi: conv("phi", channels, half),
            g: conv("g", channels, half),
            w_z: conv("w_z", half, channels),
            attn: conv("attn", channels, channels),
        })
    }

    /// `3C² + 3.5C`: four 1×1 projections with bias plus the C→C attention conv.
    pub fn param_count(channels: usize) -> usize {
        let half = channels / 2;
        3 * ConvSpec::new(channels, half, 1).count()
            + ConvSpec::new(half, channels, 1).count()
            + ConvSpec::new(channels, channels, 1).count()
    }

    /// Non-local stage only.
    pub fn nonlocal(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(DehazeError::invalid(format!("SACA expects a 4-d input, got {shape:?}")));
        };
        if c != self.channels {
            return Err(DehazeError::invalid(format!("SACA block for {} channels got {c}", self.channels)));
        }
        let half = c / 2;
        let flat = [n, half, h * w];
        let th = self.theta.forward(tape, p, x)?;
        let th = tape.reshape(th, &flat)?;
        let ph = self.phi.forward(tape, p, x)?;
        let ph = tape.reshape(ph, &flat)?;
        let gv = self.g.forward(tape, p, x)?;
        let gv = tape.reshape(gv, &flat)?;
        let a = tape.attention(th, ph, gv)?;
        let a = tape.reshape(a, &[n, half, h, w])?;
        let z = self.w_z.forward(tape, p, a)?;
        Ok(tape.add(x, z)?)
    }

    /// Softmax over channels of the pooled 1×1 conv response.
    pub fn channel_weights(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        let logits = self.attn.forward(tape, p, y)?;
        let pooled = tape.global_avg_pool(logits)?;
        Ok(tape.softmax(pooled, 1)?)
    }

    pub fn forward_parts(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<SacaParts> {
        let nonlocal = self.nonlocal(tape, p, x)?;
        let weights = self.channel_weights(tape, p, nonlocal)?;
        let scaled = tape.scale(weights, self.channels as f64)?;
        let out = tape.mul_channel(nonlocal, scaled)?;
        Ok(SacaParts { nonlocal, weights, out })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, p, x)?.out)
    }
}
