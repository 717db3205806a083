//! Four-level encoder-decoder with SACA-refined skips, multi-scale feature
//! aggregation into the bottleneck and pixel-shuffle upsampling.

use dehaze_tensor::{Bound, NormMode, ParamSet, RunningStats, Tape, Tensor, Var};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{DehazeError, Result};
use crate::nn::{Conv, ConvBn, ConvSpec};
use crate::saca::SacaBlock;

pub const LEVELS: usize = 4;
/// Spatial size must be a multiple of this (four 2× poolings).
pub const DIVISOR: usize = 16;
pub const MIN_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub base_width: usize,
    pub saca: bool,
    pub msfa: bool,
}

impl GeneratorConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self { base_width: 32 / cfg.width_factor, saca: cfg.toggles.saca, msfa: cfg.toggles.msfa }
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        [1, 2, 4, 8].map(|m| self.base_width * m)
    }

    /// Input channels of the bottleneck fusion conv.
    pub fn fusion_in(&self) -> usize {
        let w = self.widths();
        if self.msfa {
            w[LEVELS - 1] + w.iter().sum::<usize>()
        } else {
            w[LEVELS - 1]
        }
    }
}

/// Closed-form parameter count.
pub fn param_count(cfg: &GeneratorConfig) -> usize {
    let w = cfg.widths();
    let mut total = 0;
    let mut cin = 3;
    for &c in &w {
        total += ConvBn::count(cin, c, 3) + ConvBn::count(c, c, 3);
        if cfg.saca {
            total += SacaBlock::param_count(c);
        }
        cin = c;
    }
    total += ConvSpec::new(cfg.fusion_in(), w[LEVELS - 1], 1).count();
    let mut up_in = w[LEVELS - 1];
    for &c in w.iter().rev() {
        total += ConvBn::count(up_in / 4, c, 3) + ConvBn::count(2 * c, c, 3);
        up_in = c;
    }
    total + ConvSpec::new(w[0], 3, 1).count()
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    a: ConvBn,
    b: ConvBn,
    saca: Option<SacaBlock>,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    up: ConvBn,
    merge: ConvBn,
}

/// Layer layout; parameters and running statistics live in [`Generator`].
#[derive(Debug, Clone)]
pub struct GeneratorArch {
    pub cfg: GeneratorConfig,
    encoder: Vec<EncoderBlock>,
    fusion: Conv,
    decoder: Vec<DecoderBlock>,
    head: Conv,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub arch: GeneratorArch,
    pub params: ParamSet,
    pub stats: Vec<RunningStats>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(cfg: GeneratorConfig, rng: &mut R) -> Result<Self> {
        if cfg.base_width == 0 || cfg.base_width % 4 != 0 {
            return Err(DehazeError::invalid(format!("base width {} must be a positive multiple of 4", cfg.base_width)));
        }
        let mut params = ParamSet::new();
        let mut stats = Vec::new();
        let w = cfg.widths();
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = 3;
        for (i, &c) in w.iter().enumerate() {
            let a = ConvBn::new(&mut params, &mut stats, &format!("enc{i}.a"), ConvSpec::new(cin, c, 3), rng);
            let b = ConvBn::new(&mut params, &mut stats, &format!("enc{i}.b"), ConvSpec::new(c, c, 3), rng);
            let saca = if cfg.saca { Some(SacaBlock::new(&mut params, &format!("saca{i}"), c, rng)?) } else { None };
            encoder.push(EncoderBlock { a, b, saca });
            cin = c;
        }
        let fusion = Conv::new(&mut params, "fusion", ConvSpec::new(cfg.fusion_in(), w[LEVELS - 1], 1), rng);
        let mut decoder = Vec::with_capacity(LEVELS);
        let mut up_in = w[LEVELS - 1];
        for (i, &c) in w.iter().enumerate().rev() {
            let up = ConvBn::new(&mut params, &mut stats, &format!("dec{i}.up"), ConvSpec::new(up_in / 4, c, 3), rng);
            let merge = ConvBn::new(&mut params, &mut stats, &format!("dec{i}.merge"), ConvSpec::new(2 * c, c, 3), rng);
            decoder.push(DecoderBlock { up, merge });
            up_in = c;
        }
        let head = Conv::new(&mut params, "head", ConvSpec::new(w[0], 3, 1), rng);
        Ok(Generator { arch: GeneratorArch { cfg, encoder, fusion, decoder, head }, params, stats })
    }

    /// Binds the parameters as trainable leaves and runs the network.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: NormMode) -> Result<(Var, Bound)> {
        let p = self.params.bind(tape)?;
        let y = self.arch.forward(tape, &p, &mut self.stats, x, mode)?;
        Ok((y, p))
    }

    /// Eval-mode inference on a `[N, 3, H, W]` batch.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let mut stats = self.stats.clone();
        let y = self.arch.forward(&mut tape, &p, &mut stats, xv, NormMode::Eval)?;
        Ok(tape.value(y).clone())
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h % DIVISOR != 0 || w % DIVISOR != 0 || h < MIN_SIZE || w < MIN_SIZE {
        return Err(DehazeError::invalid(format!(
            "generator input {h}x{w}: height and width must be divisible by {DIVISOR} and at least {MIN_SIZE}"
        )));
    }
    Ok(())
}

impl GeneratorArch {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, stats: &mut [RunningStats], x: Var, mode: NormMode) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(DehazeError::invalid(format!("generator expects [N, 3, H, W], got {shape:?}")));
        };
        if c != 3 {
            return Err(DehazeError::invalid(format!("generator expects 3 channels, got {c}")));
        }
        check_input_size(h, w)?;

        let mut skips = Vec::with_capacity(LEVELS);
        let mut cur = x;
        for blk in &self.encoder {
            let y = blk.a.forward(tape, p, stats, cur, mode)?;
            let y = tape.relu(y)?;
            let y = blk.b.forward(tape, p, stats, y, mode)?;
            let tap = tape.relu(y)?;
            let skip = match &blk.saca {
                Some(s) => s.forward(tape, p, tap)?,
                None => tap,
            };
            skips.push(skip);
            cur = tape.maxpool(tap, 2)?;
        }

        let bottleneck = if self.cfg.msfa {
            let mut parts = vec![cur];
            for (i, &s) in skips.iter().enumerate() {
                parts.push(tape.maxpool(s, 1 << (LEVELS - i))?);
            }
            tape.concat(&parts, 1)?
        } else {
            cur
        };
        cur = self.fusion.forward(tape, p, bottleneck)?;

        for (blk, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = tape.pixel_shuffle(cur, 2)?;
            let up = blk.up.forward(tape, p, stats, up, mode)?;
            let up = tape.relu(up)?;
            let cat = tape.concat(&[up, skip], 1)?;
            let y = blk.merge.forward(tape, p, stats, cat, mode)?;
            cur = tape.relu(y)?;
        }
        let out = self.head.forward(tape, p, cur)?;
        Ok(tape.sigmoid(out)?)
    }
}
