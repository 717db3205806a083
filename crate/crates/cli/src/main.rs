use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dehaze_core::checkpoint;
use dehaze_core::config::parse_assignment;
use dehaze_core::dataset::{is_pair_dir, load_images, load_pairs, Pair, CLEAN_DIR, HAZY_DIR};
use dehaze_core::eval::{dehaze, evaluate_report};
use dehaze_core::freq::{high_freq, low_freq};
use dehaze_core::glda::{glda, GldaConfig};
use dehaze_core::haze::{apply_haze, sample_params, DEPTH_MAX};
use dehaze_core::image::{file_stem, list_ppm};
use dehaze_core::rng::RngStream;
use dehaze_core::scenes::procedural_scene;
use dehaze_core::train::{train_loop, BatchOptions, LoopOptions, LATEST_CHECKPOINT};
use dehaze_core::{Image, ModelState, Pool, RunConfig};

#[derive(Parser)]
#[command(name = "dehaze", version, about = "Single-image dehazing: data synthesis, training and inference")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create hazy/clean/depth triples from clean images.
    Synthesize {
        /// Folder of clean .ppm images.
        #[arg(long, conflicts_with = "procedural", required_unless_present = "procedural")]
        clean: Option<PathBuf>,
        /// Generate this many procedural scenes instead.
        #[arg(long)]
        procedural: Option<usize>,
        /// Side length of procedural scenes.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply localized haze augmentation to a pair folder.
    Augment {
        /// Folder with hazy/ and clean/ subfolders.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        max_patch: usize,
        #[arg(long, default_value_t = 8)]
        max_patches: usize,
    },
    /// Write the low- and high-frequency priors of one image.
    Priors {
        #[arg(long)]
        input: PathBuf,
        /// Receives lf.ppm and hf.ppm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generator and its discriminators.
    Train {
        /// Pair folder (hazy/ + clean/) or a flat folder of clean images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, repeatable; beats the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Total number of steps (same as --set steps=N).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Held-out pair folder; defaults to synthesized scenes.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
    /// Score a checkpoint on a pair folder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Dehaze every image in a folder.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn synthesize(clean: Option<PathBuf>, procedural: Option<usize>, size: usize, seed: u64, out: &Path) -> Result<()> {
    let images: Vec<(String, Image)> = match (clean, procedural) {
        (Some(dir), _) => load_images(&dir)?,
        (None, Some(n)) => (0..n)
            .map(|i| {
                let mut rng = RngStream::new(seed, "scene", i as u64).rng();
                (format!("scene_{i:04}"), procedural_scene(size, size, &mut rng))
            })
            .collect(),
        (None, None) => bail!("either --clean or --procedural is required"),
    };
    if images.is_empty() {
        bail!("no input images");
    }
    for sub in [CLEAN_DIR, HAZY_DIR, "depth"] {
        mkdir(&out.join(sub))?;
    }
    for (i, (name, img)) in images.iter().enumerate() {
        let mut rng = RngStream::new(seed, "synthesize", i as u64).rng();
        let params = sample_params(img.height(), img.width(), &mut rng);
        let hazy = apply_haze(img, &params)?;
        let file = format!("{name}.ppm");
        img.save(&out.join(CLEAN_DIR).join(&file))?;
        hazy.save(&out.join(HAZY_DIR).join(&file))?;
        params.depth.to_image(DEPTH_MAX).save(&out.join("depth").join(&file))?;
    }
    println!("wrote {} pairs to {}", images.len(), out.display());
    Ok(())
}

fn augment(pairs: &Path, out: &Path, seed: u64, cfg: GldaConfig) -> Result<()> {
    let pairs = load_pairs(pairs)?;
    for sub in [CLEAN_DIR, HAZY_DIR, "mask"] {
        mkdir(&out.join(sub))?;
    }
    for (i, p) in pairs.iter().enumerate() {
        let mut rng = RngStream::new(seed, "augment", i as u64).rng();
        let (img, mask) = glda(&p.clean, &p.hazy, &cfg, &mut rng)?;
        let file = format!("{}.ppm", p.name);
        img.save(&out.join(HAZY_DIR).join(&file))?;
        p.clean.save(&out.join(CLEAN_DIR).join(&file))?;
        mask.to_image().save(&out.join("mask").join(&file))?;
    }
    println!("augmented {} pairs into {}", pairs.len(), out.display());
    Ok(())
}

fn priors(input: &Path, out: &Path) -> Result<()> {
    let img = Image::load(input)?;
    mkdir(out)?;
    low_freq(&img)?.save(&out.join("lf.ppm"))?;
    high_freq(&img)?.save(&out.join("hf.ppm"))?;
    Ok(())
}

/// Four procedural scenes, hazed, from streams the training batches never use.
fn heldout_set(cfg: &RunConfig) -> Result<Vec<Pair>> {
    (0..4)
        .map(|i| {
            let mut rng = RngStream::new(cfg.seed, "heldout", i).rng();
            let clean = procedural_scene(cfg.patch_size, cfg.patch_size, &mut rng);
            let params = sample_params(cfg.patch_size, cfg.patch_size, &mut rng);
            let hazy = apply_haze(&clean, &params)?;
            Ok(Pair { name: format!("heldout_{i}"), hazy, clean })
        })
        .collect()
}

/// Keys that may change when resuming without altering the model.
const RESUMABLE_KEYS: &[&str] = &["steps", "eval_every", "checkpoint_every"];

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    out: &Path,
    config: Option<PathBuf>,
    set: &[String],
    steps: Option<u64>,
    resume: Option<PathBuf>,
    eval: Option<PathBuf>,
) -> Result<()> {
    let mut overrides = set.iter().map(|s| parse_assignment(s)).collect::<dehaze_core::Result<Vec<_>>>()?;
    if let Some(n) = steps {
        overrides.push(("steps".into(), n.to_string()));
    }
    let mut state = match &resume {
        Some(path) => {
            if config.is_some() {
                bail!("--config cannot be combined with --resume; the checkpoint carries its config");
            }
            let mut state = checkpoint::load(path)?;
            for (k, v) in &overrides {
                if !RESUMABLE_KEYS.contains(&k.as_str()) {
                    bail!("{k} cannot be changed when resuming");
                }
                state.config.set(k, v)?;
            }
            state
        }
        None => ModelState::new(RunConfig::load(config.as_deref(), &overrides)?)?,
    };

    let pool = if is_pair_dir(data) {
        Pool::Paired(load_pairs(data)?)
    } else {
        Pool::Clean(load_images(data)?.into_iter().map(|(_, img)| img).collect())
    };
    let eval_set = match &eval {
        Some(dir) => load_pairs(dir)?,
        None => heldout_set(&state.config)?,
    };

    mkdir(out)?;
    fs::write(out.join("config.txt"), state.config.to_text()).context("writing config.txt")?;
    let log_path = out.join("train.log");
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let opts = LoopOptions { batch: BatchOptions::default(), eval_set: &eval_set, out_dir: Some(out) };
    let start = state.step;
    train_loop(&mut state, &pool, &opts, |row| {
        writeln!(log, "{}", row.to_line()).map_err(|source| dehaze_core::DehazeError::Io { path: log_path.clone(), source })
    })?;
    println!(
        "trained steps {start}..{}; checkpoint {}",
        state.step,
        out.join(LATEST_CHECKPOINT).display()
    );
    Ok(())
}

fn eval(ckpt: &Path, pairs: &Path) -> Result<()> {
    let state = checkpoint::load(ckpt)?;
    let pairs = load_pairs(pairs)?;
    let report = evaluate_report(&state.generator, &pairs)?;
    print!("{}", report.table.render());
    eprintln!("hazy baseline\tMEAN\t{:.4}\t{:.4}", report.baseline.mean.0, report.baseline.mean.1);
    Ok(())
}

fn infer(ckpt: &Path, input: &Path, out: &Path) -> Result<()> {
    let state = checkpoint::load(ckpt)?;
    let files = list_ppm(input)?;
    if files.is_empty() {
        bail!("no .ppm images in {}", input.display());
    }
    mkdir(out)?;
    for f in &files {
        let img = Image::load(f)?;
        dehaze(&state.generator, &img)?.save(&out.join(format!("{}.ppm", file_stem(f))))?;
    }
    println!("dehazed {} images into {}", files.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize { clean, procedural, size, seed, out } => synthesize(clean, procedural, size, seed, &out),
        Command::Augment { pairs, out, seed, max_patch, max_patches } => {
            augment(&pairs, &out, seed, GldaConfig { max_patch, max_patches })
        }
        Command::Priors { input, out } => priors(&input, &out),
        Command::Train { data, out, config, set, steps, resume, eval } => {
            train(&data, &out, config, &set, steps, resume, eval)
        }
        Command::Eval { checkpoint, pairs } => eval(&checkpoint, &pairs),
        Command::Infer { checkpoint, input, out } => infer(&checkpoint, &input, &out),
    }
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|p| p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
