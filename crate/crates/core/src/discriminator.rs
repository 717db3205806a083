//! Patch discriminators over image + frequency-prior inputs.

use dehaze_tensor::{Bound, NormMode, ParamSet, RunningStats, Tape, Var};
use rand::Rng;

use crate::error::{DehazeError, Result};
use crate::freq;
use crate::nn::{BatchNorm, Conv, ConvSpec};

pub const KERNEL: usize = 3;
pub const STRIDES: [usize; 6] = [2, 2, 2, 1, 1, 1];
pub const WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
pub const SLOPE: f64 = 0.2;
/// Output cells per input pixel along each axis is `1 / DOWNSAMPLE`.
pub const DOWNSAMPLE: usize = 8;

/// What a discriminator looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscKind {
    /// Image concatenated with its Gaussian low-pass.
    Lf,
    /// Image concatenated with its normalized Laplacian.
    Hf,
    /// Raw image only.
    Simple,
}

impl DiscKind {
    pub fn in_channels(self) -> usize {
        match self {
            DiscKind::Lf | DiscKind::Hf => 6,
            DiscKind::Simple => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscKind::Lf => "lf",
            DiscKind::Hf => "hf",
            DiscKind::Simple => "simple",
        }
    }

    /// Builds this discriminator's input from an image batch on the tape.
    pub fn prepare(self, tape: &mut Tape, img: Var) -> Result<Var> {
        match self {
            DiscKind::Lf => freq::lf_input(tape, img),
            DiscKind::Hf => freq::hf_input(tape, img),
            DiscKind::Simple => Ok(img),
        }
    }
}

/// Receptive field of a conv stack via `RF ← RF·stride + (k − stride)`,
/// walking from the output back to the input.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    layers.iter().rev().fold(1, |rf, &(k, s)| rf * s + (k - s))
}

pub fn default_layers() -> Vec<(usize, usize)> {
    STRIDES.iter().map(|&s| (KERNEL, s)).collect()
}

/// Input-axis span `[lo, hi]` (unclamped) that output cell `o` depends on.
pub fn cell_span(o: usize, layers: &[(usize, usize)]) -> (i64, i64) {
    let (mut lo, mut hi) = (o as i64, o as i64);
    for &(k, s) in layers.iter().rev() {
        let pad = (k / 2) as i64;
        lo = lo * s as i64 - pad;
        hi = hi * s as i64 - pad + k as i64 - 1;
    }
    (lo, hi)
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv,
    bn: Option<BatchNorm>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorArch {
    pub kind: DiscKind,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub arch: DiscriminatorArch,
    pub params: ParamSet,
    pub stats: Vec<RunningStats>,
}

pub fn widths(width_factor: usize) -> [usize; 6] {
    let w = WIDTHS.map(|c| c / width_factor);
    [w[0], w[1], w[2], w[3], w[4], 1]
}

pub fn param_count(kind: DiscKind, width_factor: usize) -> usize {
    let mut cin = kind.in_channels();
    let mut total = 0;
    for (i, c) in widths(width_factor).into_iter().enumerate() {
        let with_bn = (1..=4).contains(&i);
        let spec = ConvSpec::new(cin, c, KERNEL);
        total += if with_bn { spec.no_bias().count() + BatchNorm::count(c) } else { spec.count() };
        cin = c;
    }
    total
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(kind: DiscKind, width_factor: usize, rng: &mut R) -> Result<Self> {
        if width_factor == 0 || WIDTHS[0] % width_factor != 0 {
            return Err(DehazeError::invalid(format!("width factor {width_factor} must divide {}", WIDTHS[0])));
        }
        let mut params = ParamSet::new();
        let mut stats = Vec::new();
        let mut blocks = Vec::new();
        let mut cin = kind.in_channels();
        let prefix = kind.name();
        for (i, (c, &s)) in widths(width_factor).into_iter().zip(&STRIDES).enumerate() {
            let name = format!("{prefix}.block{i}");
            let with_bn = (1..=4).contains(&i);
            let mut spec = ConvSpec::new(cin, c, KERNEL).stride(s);
            if with_bn {
                spec = spec.no_bias();
            }
            let conv = Conv::new(&mut params, &format!("{name}.conv"), spec, rng);
            let bn = with_bn.then(|| BatchNorm::new(&mut params, &mut stats, &format!("{name}.bn"), c));
            blocks.push(Block { conv, bn });
            cin = c;
        }
        Ok(Discriminator { arch: DiscriminatorArch { kind, blocks }, params, stats })
    }

    pub fn kind(&self) -> DiscKind {
        self.arch.kind
    }
}

impl DiscriminatorArch {
    /// Scores an already prepared input `[N, in_channels, H, W]`; returns
    /// `[N, 1, H/8, W/8]` in `(0, 1)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, stats: &mut [RunningStats], x: Var, mode: NormMode) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(DehazeError::invalid(format!("discriminator expects a 4-d input, got {shape:?}")));
        };
        if c != self.kind.in_channels() {
            return Err(DehazeError::invalid(format!(
                "{} discriminator expects {} channels, got {c}",
                self.kind.name(),
                self.kind.in_channels()
            )));
        }
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h < 16 || w < 16 {
            return Err(DehazeError::invalid(format!(
                "discriminator input {h}x{w}: sides must be divisible by {DOWNSAMPLE} and at least 16"
            )));
        }
        let last = self.blocks.len() - 1;
        let mut cur = x;
        for (i, blk) in self.blocks.iter().enumerate() {
            cur = blk.conv.forward(tape, p, cur)?;
            if let Some(bn) = &blk.bn {
                cur = bn.forward(tape, p, stats, cur, mode)?;
            }
            cur = if i == last { tape.sigmoid(cur)? } else { tape.leaky_relu(cur, SLOPE)? };
        }
        Ok(cur)
    }

    /// Prepares the prior input from an image batch, then scores it.
    pub fn score_image(&self, tape: &mut Tape, p: &Bound, stats: &mut [RunningStats], img: Var, mode: NormMode) -> Result<Var> {
        let x = self.kind.prepare(tape, img)?;
        self.forward(tape, p, stats, x, mode)
    }
}
