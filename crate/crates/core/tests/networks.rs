//! Whole-network checks: finite differences through the generator and
//! discriminators, SACA invariants, discriminator locality and the
//! parameter-count bookkeeping of every toggle.

use dehaze_core::discriminator::{self, cell_span, default_layers, receptive_field, DiscKind, Discriminator};
use dehaze_core::generator::{self, Generator, GeneratorConfig};
use dehaze_core::saca::SacaBlock;
use dehaze_core::train::ModelState;
use dehaze_core::RunConfig;
use dehaze_tensor::gradcheck::{check, GradCheckConfig};
use dehaze_tensor::{Bound, NormMode, ParamSet, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Projection weights scaled by `1/sqrt(n)` so the probed scalar stays O(1)
/// and finite-difference roundoff stays far below the error floor.
fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let t = rand_tensor(rng, shape, -1.0, 1.0);
    t.map(|v| v / (n as f64).sqrt())
}

fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> dehaze_tensor::Result<Var> {
    let w = tape.constant(w.clone())?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn inputs_with_params(x: Tensor, params: &ParamSet) -> Vec<Tensor> {
    std::iter::once(x).chain(params.tensors().iter().cloned()).collect()
}

fn tensor_err(e: dehaze_core::DehazeError) -> dehaze_tensor::TensorError {
    match e {
        dehaze_core::DehazeError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

fn gen_cfg(saca: bool, msfa: bool) -> GeneratorConfig {
    GeneratorConfig { base_width: 4, saca, msfa }
}

#[test]
fn generator_matches_finite_differences() {
    let cfg = GradCheckConfig { max_coords: 2, ..GradCheckConfig::default() };
    let mut worst: f64 = 0.0;
    let (mut coords, mut crossed) = (0, 0);
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Generator::new(gen_cfg(true, true), &mut rng).unwrap();
        let x = rand_tensor(&mut rng, &[1, 3, 32, 32], 0.0, 1.0);
        let w = projection(&mut rng, &[1, 3, 32, 32]);
        let inputs = inputs_with_params(x, &g.params);
        let report = check(
            &inputs,
            |tape, vars| {
                let p = Bound::from_vars(vars[1..].to_vec());
                let mut stats = g.stats.clone();
                let y = g.arch.forward(tape, &p, &mut stats, vars[0], NormMode::Train).map_err(tensor_err)?;
                weighted_sum(tape, y, &w)
            },
            &cfg,
        )
        .unwrap();
        worst = worst.max(report.max_rel_err);
        (coords, crossed) = (coords + report.coords, crossed + report.crossed);
        assert!(report.max_rel_err < TOL, "seed {seed}: {report:?}");
    }
    assert!(crossed * 10 <= coords, "{crossed} kink crossings against {coords} compared coordinates");
    eprintln!("generator: worst relative error {worst:.2e} over {coords} coordinates ({crossed} across kinks)");
}

#[test]
fn discriminators_match_finite_differences() {
    let cfg = GradCheckConfig { max_coords: 4, ..GradCheckConfig::default() };
    for kind in [DiscKind::Lf, DiscKind::Hf, DiscKind::Simple] {
        let mut worst: f64 = 0.0;
        let (mut coords, mut crossed) = (0, 0);
        for seed in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let d = Discriminator::new(kind, 8, &mut rng).unwrap();
            let x = rand_tensor(&mut rng, &[2, 3, 32, 32], 0.0, 1.0);
            let w = projection(&mut rng, &[2, 1, 4, 4]);
            let inputs = inputs_with_params(x, &d.params);
            let report = check(
                &inputs,
                |tape, vars| {
                    let p = Bound::from_vars(vars[1..].to_vec());
                    let mut stats = d.stats.clone();
                    let y = d.arch.score_image(tape, &p, &mut stats, vars[0], NormMode::Train).map_err(tensor_err)?;
                    weighted_sum(tape, y, &w)
                },
                &cfg,
            )
            .unwrap();
            worst = worst.max(report.max_rel_err);
            (coords, crossed) = (coords + report.coords, crossed + report.crossed);
            assert!(report.max_rel_err < TOL, "{} seed {seed}: {report:?}", kind.name());
        }
        assert!(crossed * 10 <= coords, "{}: {crossed} kink crossings against {coords} coordinates", kind.name());
        eprintln!(
            "{} discriminator: worst relative error {worst:.2e} over {coords} coordinates ({crossed} across kinks)",
            kind.name()
        );
    }
}

fn saca_block(c: usize, seed: u64) -> (SacaBlock, ParamSet) {
    let mut params = ParamSet::new();
    let b = SacaBlock::new(&mut params, "s", c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (b, params)
}

#[test]
fn saca_weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..20 {
        let (b, params) = saca_block(8, seed);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let x = tape.constant(rand_tensor(&mut rng, &[3, 8, 5, 6], -3.0, 3.0)).unwrap();
        let parts = b.forward_parts(&mut tape, &p, x).unwrap();
        let wts = tape.value(parts.weights);
        assert_eq!(wts.shape(), &[3, 8, 1, 1]);
        for n in 0..3 {
            let s: f64 = wts.data()[n * 8..(n + 1) * 8].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "sample {n}: sum {s}");
            assert!(wts.data()[n * 8..(n + 1) * 8].iter().all(|&v| v > 0.0));
        }
    }
}

/// Moves pixel `perm[i]` of every channel to position `i`.
fn permute_spatial(t: &Tensor, perm: &[usize]) -> Tensor {
    let [n, c, h, w] = t.dims4("permute").unwrap();
    let hw = h * w;
    Tensor::from_fn(&[n, c, h, w], |i| {
        let (plane, pos) = (i / hw, i % hw);
        t.data()[plane * hw + perm[pos]]
    })
}

#[test]
fn saca_is_permutation_equivariant() {
    let (b, params) = saca_block(6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 6, 6, 7], -1.0, 1.0);
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let parts = b.forward_parts(&mut tape, &p, xv).unwrap();
        (tape.value(parts.nonlocal).clone(), tape.value(parts.out).clone())
    };
    let (base_nl, base_out) = run(&x);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..42).collect();
        perm.shuffle(&mut rng);
        let (nl, out) = run(&permute_spatial(&x, &perm));
        for (got, want) in [(&nl, permute_spatial(&base_nl, &perm)), (&out, permute_spatial(&base_out, &perm))] {
            let dev = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(dev);
        }
    }
    assert!(worst < 1e-9, "max deviation {worst:e}");
}

#[test]
fn saca_uniform_logits_reduce_to_nonlocal() {
    for seed in 0..5 {
        let (b, mut params) = saca_block(4, seed);
        let w = b.attn.weight;
        *params.get_mut(w) = Tensor::zeros(params.get(w).shape());
        let bias = b.attn.bias.unwrap();
        *params.get_mut(bias) = Tensor::full(&[4], 0.7);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape).unwrap();
        let x = tape.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 4, 5, 5], -1.0, 1.0)).unwrap();
        let parts = b.forward_parts(&mut tape, &p, x).unwrap();
        assert!(tape.value(parts.weights).data().iter().all(|&v| v == 0.25));
        assert_eq!(tape.value(parts.out), tape.value(parts.nonlocal));
    }
}

#[test]
fn discriminator_geometry() {
    assert_eq!(receptive_field(&default_layers()), 63);
    for kind in [DiscKind::Lf, DiscKind::Hf, DiscKind::Simple] {
        let d = Discriminator::new(kind, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (h, w) in [(64, 64), (32, 48), (16, 16)] {
            let mut tape = Tape::new();
            let p = d.params.bind_frozen(&mut tape).unwrap();
            let x = tape.constant(Tensor::full(&[1, 3, h, w], 0.5)).unwrap();
            let y = d.arch.score_image(&mut tape, &p, &mut d.stats.clone(), x, NormMode::Eval).unwrap();
            assert_eq!(tape.shape(y), &[1, 1, h / 8, w / 8]);
        }
    }
}

#[test]
fn discriminator_cells_only_see_their_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = Discriminator::new(DiscKind::Hf, 4, &mut rng).unwrap();
    let (h, w) = (96, 96);
    let score = |x: &Tensor| {
        let mut tape = Tape::new();
        let p = d.params.bind_frozen(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = d.arch.forward(&mut tape, &p, &mut d.stats.clone(), xv, NormMode::Eval).unwrap();
        tape.value(y).clone()
    };
    let x = rand_tensor(&mut rng, &[1, 6, h, w], 0.0, 1.0);
    let base = score(&x);
    let layers = default_layers();
    for _ in 0..10 {
        let (py, px) = (rng.random_range(0..h), rng.random_range(0..w));
        let mut bumped = x.clone();
        for c in 0..6 {
            bumped.data_mut()[(c * h + py) * w + px] += 0.5;
        }
        let out = score(&bumped);
        let mut changed = 0;
        for oy in 0..h / 8 {
            for ox in 0..w / 8 {
                let i = oy * (w / 8) + ox;
                let (ylo, yhi) = cell_span(oy, &layers);
                let (xlo, xhi) = cell_span(ox, &layers);
                let inside = (ylo..=yhi).contains(&(py as i64)) && (xlo..=xhi).contains(&(px as i64));
                if !inside {
                    assert_eq!(out.data()[i], base.data()[i], "cell ({oy},{ox}) saw pixel ({py},{px})");
                } else if out.data()[i] != base.data()[i] {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0, "pixel ({py},{px}) changed nothing");
    }
}

#[test]
fn generator_counts_follow_toggles() {
    for (saca, msfa) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = GeneratorConfig { base_width: 8, saca, msfa };
        let g = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.params.count(), generator::param_count(&cfg));
    }
    let base = generator::param_count(&gen_cfg(false, false));
    let widths = gen_cfg(false, false).widths();
    let saca_delta: usize = widths.iter().map(|&c| 3 * c * c + 7 * c / 2).sum();
    assert_eq!(generator::param_count(&gen_cfg(true, false)) - base, saca_delta);
    let w4 = widths[3];
    let msfa_delta = widths.iter().sum::<usize>() * w4;
    assert_eq!(generator::param_count(&gen_cfg(false, true)) - base, msfa_delta);
    assert_eq!(generator::param_count(&gen_cfg(true, true)) - base, saca_delta + msfa_delta);
}

#[test]
fn discriminator_counts_follow_toggles() {
    let wf = 4;
    let w0 = discriminator::widths(wf)[0];
    let prior = discriminator::param_count(DiscKind::Hf, wf);
    let simple = discriminator::param_count(DiscKind::Simple, wf);
    assert_eq!(prior - simple, 3 * w0 * 9);
    assert_eq!(discriminator::param_count(DiscKind::Lf, wf), prior);

    let count = |lf: bool, hf: bool| {
        let mut cfg = RunConfig::default();
        cfg.toggles.lf_prior = lf;
        cfg.toggles.hf_prior = hf;
        let s = ModelState::new(cfg).unwrap();
        s.discs.iter().map(|d| d.disc.params.count()).sum::<usize>()
    };
    assert_eq!(count(false, false), simple);
    assert_eq!(count(false, true), prior);
    assert_eq!(count(true, true) - count(false, true), prior);
}

#[test]
fn lf_and_hf_discriminators_are_independent() {
    let s = ModelState::new(RunConfig::default()).unwrap();
    let lf = &s.disc(DiscKind::Lf).unwrap().disc.params;
    let hf = &s.disc(DiscKind::Hf).unwrap().disc.params;
    assert_eq!(lf.tensors().len(), hf.tensors().len());
    assert_ne!(lf.tensors()[0], hf.tensors()[0]);
}

#[test]
fn every_generator_parameter_is_reachable() {
    let mut g = Generator::new(GeneratorConfig { base_width: 8, saca: true, msfa: true }, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let mut reached = vec![false; g.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let x = rand_tensor(&mut rng, &[2, 3, 32, 32], 0.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 3, 32, 32], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let (y, p) = g.forward(&mut tape, xv, NormMode::Train).unwrap();
        let loss = weighted_sum(&mut tape, y, &w).unwrap();
        let grads = p.grads(&tape.backward(loss).unwrap());
        for (r, gt) in reached.iter_mut().zip(&grads) {
            *r |= gt.data().iter().any(|&v| v != 0.0);
        }
    }
    let dead: Vec<&str> = g.params.iter().zip(&reached).filter(|(_, &r)| !r).map(|((n, _), _)| n).collect();
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}
