//! Metrics against brute-force oracles, and the behaviour of the training
//! objectives.

use dehaze_core::discriminator::{DiscKind, Discriminator};
use dehaze_core::losses::{self, discriminator_loss, generator_loss, FeatureNet, SSIM_C1, SSIM_C2};
use dehaze_core::metrics::{psnr, ssim, PSNR_CAP};
use dehaze_core::Image;
use dehaze_tensor::gradcheck::{check, GradCheckConfig};
use dehaze_tensor::{Bound, NormMode, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(h, w, data).unwrap()
}

/// `b` is `a` plus noise of random strength, clipped to `[0, 1]`, so pairs
/// span the whole similarity range.
fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Image, Image) {
    let a = random_image(rng, h, w);
    let sigma = rng.random_range(0.0..0.5);
    let mut b = a.clone();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = a.get(y, x, c) + sigma * rng.random_range(-1.0..1.0);
                b.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    (a, b)
}

fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            for c in 0..3 {
                let d = a.get(y, x, c) - b.get(y, x, c);
                sum += d * d;
                n += 1.0;
            }
        }
    }
    if sum == 0.0 {
        PSNR_CAP
    } else {
        -10.0 * (sum / n).log10()
    }
}

/// Direct 2-d windowed SSIM: full 11×11 Gaussian at every valid position.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let r = 5i64;
    let mut win = vec![0.0; 121];
    for dy in -r..=r {
        for dx in -r..=r {
            win[((dy + r) * 11 + dx + r) as usize] = (-((dy * dy + dx * dx) as f64) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);

    let (h, w) = a.dims();
    let mut acc = 0.0;
    let mut count = 0.0;
    for c in 0..3 {
        for y in 5..h - 5 {
            for x in 5..w - 5 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = win[dy * 11 + dx];
                        let va = a.get(y + dy - 5, x + dx - 5, c);
                        let vb = b.get(y + dy - 5, x + dx - 5, c);
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1.0;
            }
        }
    }
    acc / count
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..50 {
        let (a, b) = random_pair(&mut rng, 32, 32);
        let (p, q) = (psnr(&a, &b).unwrap(), ssim(&a, &b).unwrap());
        assert!((p - psnr_oracle(&a, &b)).abs() < 1e-8, "pair {i}: psnr {p}");
        assert!((q - ssim_oracle(&a, &b)).abs() < 1e-8, "pair {i}: ssim {q}");
    }
}

#[test]
fn ssim_closed_forms() {
    let zero = Image::filled(16, 16, 0.0);
    let one = Image::filled(16, 16, 1.0);
    let want = SSIM_C1 / (1.0 + SSIM_C1);
    assert!((ssim(&zero, &one).unwrap() - want).abs() < 1e-15);
    assert!((want - 9.999e-5).abs() < 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = random_pair(&mut rng, 20, 24);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
}

#[test]
fn psnr_falls_as_error_grows() {
    let a = Image::filled(8, 8, 0.5);
    let mut last = f64::INFINITY;
    for k in 0..20 {
        let b = Image::filled(8, 8, 0.5 + 0.02 * k as f64);
        let p = psnr(&a, &b).unwrap();
        assert!(p < last, "offset {k}: {p} not below {last}");
        last = p;
    }
}

#[test]
fn tape_ssim_matches_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let (a, b) = random_pair(&mut rng, 24, 20);
        let mut tape = Tape::new();
        let av = tape.constant(Image::to_batch(std::slice::from_ref(&a)).unwrap()).unwrap();
        let bv = tape.constant(Image::to_batch(std::slice::from_ref(&b)).unwrap()).unwrap();
        let s = losses::ssim(&mut tape, av, bv).unwrap();
        assert!((tape.value(s).item() - ssim(&a, &b).unwrap()).abs() < 1e-12);
    }
}

fn perceptual(net: &FeatureNet, a: &Image, b: &Image) -> f64 {
    let mut tape = Tape::new();
    let av = tape.constant(Image::to_batch(std::slice::from_ref(a)).unwrap()).unwrap();
    let bv = tape.constant(Image::to_batch(std::slice::from_ref(b)).unwrap()).unwrap();
    let l = net.loss(&mut tape, av, bv).unwrap();
    tape.value(l).item()
}

#[test]
fn perceptual_loss_separates_pairs() {
    let net = FeatureNet::seeded(1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..20 {
        let (a, b) = random_pair(&mut rng, 32, 32);
        if a == b {
            continue;
        }
        let ab = perceptual(&net, &a, &b);
        assert!(ab > 0.0, "pair {i}");
        assert_eq!(ab, perceptual(&net, &b, &a));
        assert_eq!(perceptual(&net, &a, &a), 0.0);
    }
}

#[test]
fn blending_toward_real_lowers_generator_loss() {
    let net = FeatureNet::seeded(2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = Discriminator::new(DiscKind::Hf, 8, &mut rng).unwrap();
    for trial in 0..5 {
        let real = random_image(&mut rng, 32, 32);
        let noise = random_image(&mut rng, 32, 32);
        let mut last = f64::INFINITY;
        for k in 0..5 {
            let alpha = k as f64 / 4.0;
            let fake = Image::from_fn(32, 32, |y, x, c| alpha * real.get(y, x, c) + (1.0 - alpha) * noise.get(y, x, c));
            let mut tape = Tape::new();
            let r = tape.constant(Image::to_batch(std::slice::from_ref(&real)).unwrap()).unwrap();
            let f = tape.constant(Image::to_batch(std::slice::from_ref(&fake)).unwrap()).unwrap();
            let p = d.params.bind_frozen(&mut tape).unwrap();
            let score = d.arch.score_image(&mut tape, &p, &mut d.stats.clone(), f, NormMode::Eval).unwrap();
            let (loss, terms) = generator_loss(&mut tape, r, f, &[(score, 0.0)], false, &net).unwrap();
            let v = tape.value(loss).item();
            assert_eq!(terms.adversarial, 0.0);
            assert!(v < last, "trial {trial} alpha {alpha}: {v} not below {last}");
            last = v;
        }
        assert!(last.abs() < 1e-12, "fake = real should cost nothing, got {last}");
    }
}

#[test]
fn discriminator_loss_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Discriminator::new(DiscKind::Lf, 16, &mut rng).unwrap();
        let real = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
        let fake = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
        let report = check(
            d.params.tensors(),
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let mut stats = d.stats.clone();
                let r = tape.constant(real.clone())?;
                let f = tape.constant(fake.clone())?;
                let unwrap = |e: dehaze_core::DehazeError| match e {
                    dehaze_core::DehazeError::Tensor(t) => t,
                    other => panic!("{other}"),
                };
                let dr = d.arch.score_image(tape, &p, &mut stats, r, NormMode::Train).map_err(unwrap)?;
                let df = d.arch.score_image(tape, &p, &mut stats, f, NormMode::Train).map_err(unwrap)?;
                discriminator_loss(tape, dr, df).map_err(unwrap)
            },
            &GradCheckConfig { max_coords: 8, ..cfg },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "seed {seed}: {report:?}");
        assert!(report.crossed * 10 <= report.coords, "seed {seed}: {report:?}");
    }
}

fn image_strategy() -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, 16 * 16 * 3).prop_map(|v| Image::new(16, 16, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_stay_finite(a in image_strategy(), b in image_strategy(), d in 0.0f64..=1.0, e in 0.0f64..=1.0) {
        let net = FeatureNet::seeded(3);
        let mut tape = Tape::new();
        let av = tape.constant(Image::to_batch(std::slice::from_ref(&a)).unwrap()).unwrap();
        let bv = tape.constant(Image::to_batch(std::slice::from_ref(&b)).unwrap()).unwrap();
        let dr = tape.constant(Tensor::full(&[1, 1, 2, 2], d)).unwrap();
        let df = tape.constant(Tensor::full(&[1, 1, 2, 2], e)).unwrap();
        let (g, _) = generator_loss(&mut tape, av, bv, &[(df, 0.5), (dr, 0.5)], false, &net).unwrap();
        let dl = discriminator_loss(&mut tape, dr, df).unwrap();
        prop_assert!(tape.value(g).item().is_finite());
        prop_assert!(tape.value(dl).item().is_finite());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}
