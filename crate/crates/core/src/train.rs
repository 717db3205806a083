//! Model state, batch construction and the alternating GAN updates.

use std::path::Path;

use dehaze_tensor::{adam_step, AdamConfig, AdamState, NormMode, Tape, Tensor, TensorError};
use rand::Rng;

use crate::config::RunConfig;
use crate::dataset::Pair;
use crate::discriminator::{DiscKind, Discriminator};
use crate::error::{DehazeError, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::glda::{paste_patches, sample_patches, Flip, GldaConfig};
use crate::haze::{apply_haze, sample_params};
use crate::image::Image;
use crate::losses::{discriminator_loss, generator_loss, FeatureNet, GeneratorTerms};
use crate::rng::RngStream;

/// Seed of the fixed perceptual feature net; independent of the run seed.
pub const FEATURE_SEED: u64 = 0x5eed_f00d;

/// One discriminator with its optimiser state.
#[derive(Debug, Clone)]
pub struct DiscSlot {
    pub disc: Discriminator,
    pub adam: AdamState,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    /// Snapshot taken at creation; toggles are never changed afterwards.
    pub config: RunConfig,
    pub generator: Generator,
    pub g_adam: AdamState,
    /// `[Lf, Hf]`, `[Hf]`, `[Simple]` or empty, depending on the toggles.
    pub discs: Vec<DiscSlot>,
    pub features: FeatureNet,
    /// Completed `train_step` calls.
    pub step: u64,
}

/// Discriminators implied by the toggles, in update order.
pub fn disc_kinds(cfg: &RunConfig) -> Vec<DiscKind> {
    let t = &cfg.toggles;
    if !t.gan {
        return Vec::new();
    }
    match (t.lf_prior, t.hf_prior) {
        (false, false) => vec![DiscKind::Simple],
        (true, false) => vec![DiscKind::Lf],
        (false, true) => vec![DiscKind::Hf],
        (true, true) => vec![DiscKind::Lf, DiscKind::Hf],
    }
}

impl ModelState {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut g_rng = RngStream::new(config.seed, "init/generator", 0).rng();
        let generator = Generator::new(GeneratorConfig::from_run(&config), &mut g_rng)?;
        let g_adam = AdamState::for_params(&generator.params);
        let discs = disc_kinds(&config)
            .into_iter()
            .map(|kind| {
                let mut rng = RngStream::new(config.seed, format!("init/{}", kind.name()), 0).rng();
                let disc = Discriminator::new(kind, config.width_factor, &mut rng)?;
                let adam = AdamState::for_params(&disc.params);
                Ok(DiscSlot { disc, adam })
            })
            .collect::<Result<_>>()?;
        Ok(ModelState { config, generator, g_adam, discs, features: FeatureNet::seeded(FEATURE_SEED), step: 0 })
    }

    pub fn disc(&self, kind: DiscKind) -> Option<&DiscSlot> {
        self.discs.iter().find(|s| s.disc.kind() == kind)
    }

    /// Weight of a discriminator's adversarial term.
    pub fn lambda(&self, kind: DiscKind) -> f64 {
        match kind {
            DiscKind::Lf | DiscKind::Simple => self.config.lambda1,
            DiscKind::Hf => self.config.lambda2,
        }
    }
}

/// Where training pairs come from.
#[derive(Debug, Clone)]
pub enum Pool {
    /// Clean images; haze is synthesized per sample.
    Clean(Vec<Image>),
    /// Fixed (hazy, clean) pairs.
    Paired(Vec<Pair>),
}

impl Pool {
    pub fn len(&self) -> usize {
        match self {
            Pool::Clean(v) => v.len(),
            Pool::Paired(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self, i: usize) -> (usize, usize) {
        match self {
            Pool::Clean(v) => v[i].dims(),
            Pool::Paired(v) => v[i].clean.dims(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthesized,
    Paired,
    Glda,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[N, 3, P, P]` network inputs.
    pub hazy: Tensor,
    /// `[N, 3, P, P]` clean targets, aligned with `hazy`.
    pub clean: Tensor,
    pub tags: Vec<Provenance>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    /// Probability of the localized augmentation when the toggle is on.
    pub glda_prob: f64,
    /// Fixed patch count instead of a random one.
    pub glda_patches: Option<usize>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self { glda_prob: 0.5, glda_patches: None }
    }
}

/// Item `k` of step `step` draws from its own stream
/// `(seed, "batch", step·batch_size + k)`, so batches can be rebuilt in any
/// order.
pub fn build_batch(pool: &Pool, cfg: &RunConfig, step: u64, opts: &BatchOptions) -> Result<Batch> {
    if pool.is_empty() {
        return Err(DehazeError::invalid("training pool is empty"));
    }
    let p = cfg.patch_size;
    let mut hazy_items = Vec::with_capacity(cfg.batch_size);
    let mut clean_items = Vec::with_capacity(cfg.batch_size);
    let mut tags = Vec::with_capacity(cfg.batch_size);
    for k in 0..cfg.batch_size {
        let mut rng = RngStream::new(cfg.seed, "batch", step * cfg.batch_size as u64 + k as u64).rng();
        let idx = rng.random_range(0..pool.len());
        let (h, w) = pool.dims(idx);
        if h < p || w < p {
            return Err(DehazeError::invalid(format!("pool image {idx} is {h}x{w}, smaller than patch {p}")));
        }
        let top = rng.random_range(0..=h - p);
        let left = rng.random_range(0..=w - p);
        let (clean, mut hazy, mut tag) = match pool {
            Pool::Clean(v) => {
                let c = v[idx].crop(top, left, p, p)?;
                let params = sample_params(p, p, &mut rng);
                let hz = apply_haze(&c, &params)?;
                (c, hz, Provenance::Synthesized)
            }
            Pool::Paired(v) => {
                let pair = &v[idx];
                (pair.clean.crop(top, left, p, p)?, pair.hazy.crop(top, left, p, p)?, Provenance::Paired)
            }
        };
        if cfg.toggles.glda && rng.random_bool(opts.glda_prob) {
            let gcfg = GldaConfig { max_patch: cfg.glda_max_patch, max_patches: cfg.glda_max_patches };
            let patches = sample_patches(p, p, &gcfg, opts.glda_patches, &mut rng)?;
            hazy = paste_patches(&clean, &hazy, &patches)?.0;
            tag = Provenance::Glda;
        }
        let flip = Flip::sample(&mut rng);
        hazy_items.push(flip.apply(&hazy));
        clean_items.push(flip.apply(&clean));
        tags.push(tag);
    }
    Ok(Batch { hazy: Image::to_batch(&hazy_items)?, clean: Image::to_batch(&clean_items)?, tags })
}

/// Per-step scalars; an absent discriminator reports 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepScalars {
    pub loss_g: f64,
    /// LF discriminator loss, or the simple discriminator's.
    pub loss_d_lf: f64,
    pub loss_d_hf: f64,
    pub terms: GeneratorTerms,
}

fn non_finite(step: u64, e: DehazeError) -> DehazeError {
    match e {
        DehazeError::Tensor(TensorError::NonFinite { op, index }) => {
            DehazeError::NonFinite { step, detail: format!("output of `{op}` at flat index {index}") }
        }
        other => other,
    }
}

fn check_grads(step: u64, owner: &str, names: &dehaze_tensor::ParamSet, grads: &[Tensor]) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(j) = g.first_non_finite() {
            return Err(DehazeError::NonFinite {
                step,
                detail: format!("{owner} gradient `{}` at flat index {j}", names.name(dehaze_tensor::ParamId(i))),
            });
        }
    }
    Ok(())
}

/// Updates one discriminator on real targets against detached fakes.
fn update_disc(slot: &mut DiscSlot, cfg: &RunConfig, real: &Tensor, fake: &Tensor, step: u64) -> Result<f64> {
    let adam = AdamConfig::new(cfg.lr_d, cfg.beta1, cfg.beta2);
    let mut last = 0.0;
    for _ in 0..cfg.d_steps {
        let mut tape = Tape::new();
        let p = slot.disc.params.bind(&mut tape)?;
        let r = tape.constant(real.clone())?;
        let f = tape.constant(fake.clone())?;
        let arch = &slot.disc.arch;
        let d_real = arch.score_image(&mut tape, &p, &mut slot.disc.stats, r, NormMode::Train)?;
        let d_fake = arch.score_image(&mut tape, &p, &mut slot.disc.stats, f, NormMode::Train)?;
        let loss = discriminator_loss(&mut tape, d_real, d_fake)?;
        last = tape.value(loss).item();
        let grads = p.grads(&tape.backward(loss)?);
        check_grads(step, slot.disc.kind().name(), &slot.disc.params, &grads)?;
        adam_step(&mut slot.disc.params, &grads, &mut slot.adam, &adam)?;
    }
    Ok(last)
}

/// One alternating update: generator forward, each discriminator on
/// detached fakes, then the generator against the updated discriminators.
///
/// The generator step reuses the first forward pass. The generator has not
/// changed in between, so a second forward would give identical values; the
/// only difference is that batch-norm running statistics advance once per
/// step rather than twice.
pub fn train_step(state: &mut ModelState, batch: &Batch) -> Result<StepScalars> {
    let step = state.step;
    let cfg = state.config.clone();
    let mut run = || -> Result<StepScalars> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.hazy.clone())?;
        let real = tape.constant(batch.clean.clone())?;
        let (fake, gp) = state.generator.forward(&mut tape, x, NormMode::Train)?;
        let fake_value = tape.value(fake).clone();

        let mut scalars = StepScalars::default();
        for slot in state.discs.iter_mut() {
            let loss = update_disc(slot, &cfg, &batch.clean, &fake_value, step)?;
            match slot.disc.kind() {
                DiscKind::Lf | DiscKind::Simple => scalars.loss_d_lf = loss,
                DiscKind::Hf => scalars.loss_d_hf = loss,
            }
        }

        let mut adversarial = Vec::with_capacity(state.discs.len());
        for slot in &state.discs {
            let lambda = state.lambda(slot.disc.kind());
            if lambda == 0.0 {
                continue;
            }
            let p = slot.disc.params.bind_frozen(&mut tape)?;
            // batch statistics as in the discriminator update; running
            // statistics are left untouched
            let mut stats = slot.disc.stats.clone();
            let d = slot.disc.arch.score_image(&mut tape, &p, &mut stats, fake, NormMode::Train)?;
            adversarial.push((d, lambda));
        }
        let (loss, terms) = generator_loss(&mut tape, real, fake, &adversarial, cfg.non_saturating, &state.features)?;
        scalars.loss_g = tape.value(loss).item();
        scalars.terms = terms;
        let grads = gp.grads(&tape.backward(loss)?);
        check_grads(step, "generator", &state.generator.params, &grads)?;
        let adam = AdamConfig::new(cfg.lr_g, cfg.beta1, cfg.beta2);
        adam_step(&mut state.generator.params, &grads, &mut state.g_adam, &adam)?;
        Ok(scalars)
    };
    let scalars = run().map_err(|e| non_finite(step, e))?;
    state.step += 1;
    Ok(scalars)
}

/// Updates only the discriminators, against fakes from the frozen generator
/// in eval mode. Neither the generator nor the step counter changes.
pub fn discriminator_step(state: &mut ModelState, batch: &Batch) -> Result<StepScalars> {
    let step = state.step;
    let fake = state.generator.infer(&batch.hazy).map_err(|e| non_finite(step, e))?;
    let mut scalars = StepScalars::default();
    for slot in state.discs.iter_mut() {
        let loss = update_disc(slot, &state.config, &batch.clean, &fake, step).map_err(|e| non_finite(step, e))?;
        match slot.disc.kind() {
            DiscKind::Lf | DiscKind::Simple => scalars.loss_d_lf = loss,
            DiscKind::Hf => scalars.loss_d_hf = loss,
        }
    }
    Ok(scalars)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub scalars: StepScalars,
    /// Held-out `(psnr, ssim)` on evaluation steps.
    pub eval: Option<(f64, f64)>,
}

impl LogRow {
    /// `step  loss_g  loss_d_lf  loss_d_hf  [psnr  ssim]`, tab separated.
    pub fn to_line(&self) -> String {
        let s = &self.scalars;
        let mut line = format!("{}\t{:.6}\t{:.6}\t{:.6}", self.step, s.loss_g, s.loss_d_lf, s.loss_d_hf);
        if let Some((p, q)) = self.eval {
            line.push_str(&format!("\t{p:.4}\t{q:.4}"));
        }
        line
    }
}

pub struct LoopOptions<'a> {
    pub batch: BatchOptions,
    /// Held-out pairs scored every `eval_every` steps.
    pub eval_set: &'a [Pair],
    /// Checkpoints go here every `checkpoint_every` steps (and at the end).
    pub out_dir: Option<&'a Path>,
}

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

/// Runs `train_step` until `state.step == config.steps`, calling `on_row`
/// after every step.
pub fn train_loop(
    state: &mut ModelState,
    pool: &Pool,
    opts: &LoopOptions,
    mut on_row: impl FnMut(&LogRow) -> Result<()>,
) -> Result<Vec<LogRow>> {
    let mut log = Vec::new();
    while state.step < state.config.steps {
        let batch = build_batch(pool, &state.config, state.step, &opts.batch)?;
        let scalars = train_step(state, &batch)?;
        let done = state.step;
        let cfg = &state.config;
        let eval = if !opts.eval_set.is_empty() && cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let table = crate::eval::evaluate(&state.generator, opts.eval_set)?;
            Some((table.mean.0, table.mean.1))
        } else {
            None
        };
        let row = LogRow { step: done, scalars, eval };
        on_row(&row)?;
        log.push(row);
        if let Some(dir) = opts.out_dir {
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            if periodic || done == cfg.steps {
                let bytes = crate::checkpoint::encode(state);
                let named = dir.join(format!("step_{done:06}.ckpt"));
                for path in [named, dir.join(LATEST_CHECKPOINT)] {
                    std::fs::write(&path, &bytes).map_err(|e| DehazeError::io(&path, e))?;
                }
            }
        }
    }
    Ok(log)
}
