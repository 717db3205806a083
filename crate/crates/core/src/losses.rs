//! Training objectives on the tape: reconstruction (L1, SSIM, perceptual)
//! and the adversarial terms for generator and discriminators.

use dehaze_tensor::{Bound, ParamSet, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DehazeError, Result};
use crate::freq::gaussian_2d;
use crate::nn::{Conv, ConvSpec};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Lower clamp for every log argument.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.5, lambda2: 0.5 }
    }
}

pub fn l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    Ok(tape.mean(d)?)
}

/// Mean SSIM over channels and valid window positions of `[N, C, H, W]`.
pub fn ssim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(DehazeError::invalid(format!("ssim expects [N, C, H, W], got {shape:?}")));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(DehazeError::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let planes = [n * c, 1, h, w];
    let a = tape.reshape(a, &planes)?;
    let b = tape.reshape(b, &planes)?;
    let win = tape.constant(Tensor::new(
        &[1, 1, SSIM_WINDOW, SSIM_WINDOW],
        gaussian_2d(SSIM_WINDOW, SSIM_SIGMA),
    )?)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let mut filt = |x| tape.conv2d(x, win, 1, 0);
    let (mu_a, mu_b) = (filt(a)?, filt(b)?);
    let (e_aa, e_bb, e_ab) = (filt(aa)?, filt(bb)?, filt(ab)?);

    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let lum_n = tape.scale(mu_ab, 2.0)?;
    let lum_n = tape.offset(lum_n, SSIM_C1)?;
    let con_n = tape.scale(cov, 2.0)?;
    let con_n = tape.offset(con_n, SSIM_C2)?;
    let lum_d = tape.add(mu_aa, mu_bb)?;
    let lum_d = tape.offset(lum_d, SSIM_C1)?;
    let con_d = tape.add(var_a, var_b)?;
    let con_d = tape.offset(con_d, SSIM_C2)?;
    let num = tape.mul(lum_n, con_n)?;
    let den = tape.mul(lum_d, con_d)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map)?)
}

/// Fixed convolutional feature extractor for the perceptual loss.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    params: ParamSet,
    convs: Vec<Conv>,
}

pub const FEATURE_WIDTHS: [usize; 3] = [16, 32, 64];

impl FeatureNet {
    /// Random He-normal stack drawn from `seed`.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut cin = 3;
        let convs = FEATURE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&mut params, &format!("feat{i}"), ConvSpec::new(cin, c, 3), &mut rng);
                cin = c;
                conv
            })
            .collect();
        FeatureNet { params, convs }
    }

    /// Externally supplied `(weight [Cout, Cin, k, k], bias [Cout])` per
    /// block, e.g. converted pretrained filters. Kernels must be odd-sized.
    pub fn from_weights(blocks: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(DehazeError::invalid("feature net needs at least one block"));
        }
        let mut params = ParamSet::new();
        let mut convs = Vec::with_capacity(blocks.len());
        let mut cin = 3;
        for (i, (w, b)) in blocks.into_iter().enumerate() {
            let &[cout, wc, kh, kw] = w.shape() else {
                return Err(DehazeError::invalid(format!("block {i}: weight must be 4-d, got {:?}", w.shape())));
            };
            if wc != cin || kh != kw || kh % 2 == 0 || b.shape() != [cout] {
                return Err(DehazeError::invalid(format!(
                    "block {i}: weight {:?} / bias {:?} do not fit {cin} input channels",
                    w.shape(),
                    b.shape()
                )));
            }
            let weight = params.push(format!("feat{i}.weight"), w);
            let bias = Some(params.push(format!("feat{i}.bias"), b));
            convs.push(Conv { weight, bias, stride: 1, pad: kh / 2 });
            cin = cout;
        }
        Ok(FeatureNet { params, convs })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    fn features(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut cur = x;
        for conv in &self.convs {
            let y = conv.forward(tape, p, cur)?;
            let y = tape.relu(y)?;
            cur = tape.maxpool(y, 2)?;
            out.push(cur);
        }
        Ok(out)
    }

    /// `Σ_blocks mean((φ(a) − φ(b))²)`; the net's weights never train.
    pub fn loss(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let p = self.params.bind_frozen(tape)?;
        let fa = self.features(tape, &p, a)?;
        let fb = self.features(tape, &p, b)?;
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = tape.sub(x, y)?;
            let d = tape.square(d)?;
            let m = tape.mean(d)?;
            total = Some(match total {
                Some(t) => tape.add(t, m)?,
                None => m,
            });
        }
        Ok(total.expect("at least one block"))
    }
}

/// `mean(log(max(x, LOG_FLOOR)))`.
fn mean_log(tape: &mut Tape, x: Var) -> Result<Var> {
    let l = tape.log_clamped(x, LOG_FLOOR)?;
    Ok(tape.mean(l)?)
}

fn one_minus(tape: &mut Tape, x: Var) -> Result<Var> {
    let neg = tape.scale(x, -1.0)?;
    Ok(tape.offset(neg, 1.0)?)
}

/// Scalar pieces of the generator objective, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeneratorTerms {
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

/// `L1 + (1 − SSIM) + perceptual + Σ λ·mean(log(1 − D))`. Each entry of
/// `adversarial` pairs a discriminator output map on the fake with its
/// weight; zero weights add nothing to the graph. With `non_saturating`
/// the adversarial term is `λ·mean(−log D)` instead.
pub fn generator_loss(
    tape: &mut Tape,
    real: Var,
    fake: Var,
    adversarial: &[(Var, f64)],
    non_saturating: bool,
    features: &FeatureNet,
) -> Result<(Var, GeneratorTerms)> {
    let l1v = l1(tape, fake, real)?;
    let s = ssim(tape, fake, real)?;
    let dssim = one_minus(tape, s)?;
    let perc = features.loss(tape, fake, real)?;
    let recon = tape.add(l1v, dssim)?;
    let mut total = tape.add(recon, perc)?;
    let mut adv_sum = 0.0;
    for &(d, lambda) in adversarial {
        if lambda == 0.0 {
            continue;
        }
        let term = if non_saturating {
            let m = mean_log(tape, d)?;
            tape.scale(m, -lambda)?
        } else {
            let q = one_minus(tape, d)?;
            let m = mean_log(tape, q)?;
            tape.scale(m, lambda)?
        };
        adv_sum += tape.value(term).item();
        total = tape.add(total, term)?;
    }
    let terms = GeneratorTerms {
        l1: tape.value(l1v).item(),
        ssim: tape.value(s).item(),
        perceptual: tape.value(perc).item(),
        adversarial: adv_sum,
    };
    Ok((total, terms))
}

/// `−mean(log D(real)) − mean(log(1 − D(fake)))`.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = mean_log(tape, d_real)?;
    let q = one_minus(tape, d_fake)?;
    let f = mean_log(tape, q)?;
    let s = tape.add(r, f)?;
    Ok(tape.scale(s, -1.0)?)
}
