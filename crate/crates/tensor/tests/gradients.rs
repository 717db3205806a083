//! Finite-difference checks for every tape primitive, plus direct-summation
//! and hand-rolled reference computations.

use dehaze_tensor::gradcheck::{check, GradCheckConfig};
use dehaze_tensor::{adam_step, AdamConfig, AdamState, NormMode, ParamSet, Result, RunningStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Contracts `y` with fixed random weights so no output symmetry can hide a
/// wrong gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, tape.shape(y), -1.0, 1.0);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn run<F>(name: &str, make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy,
{
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make_inputs(&mut rng);
        let report = check(
            &inputs,
            |tape, vars| {
                let y = f(tape, vars)?;
                weighted_sum(tape, y, seed)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        worst = worst.max(report.max_rel_err);
        assert!(report.max_rel_err < TOL, "{name} seed {seed}: {report:?}");
        assert!(report.coords > 0 && report.crossed * 10 <= report.coords, "{name} seed {seed}: {report:?}");
    }
    eprintln!("{name}: worst relative error {worst:.2e}");
}

#[test]
fn elementwise_binary() {
    let two = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0), rand_tensor(rng, &[2, 3, 4], 0.5, 2.0)];
    run("add", two, |t, v| t.add(v[0], v[1]));
    run("sub", two, |t, v| t.sub(v[0], v[1]));
    run("mul", two, |t, v| t.mul(v[0], v[1]));
    run("div", two, |t, v| t.div(v[0], v[1]));
}

#[test]
fn elementwise_unary() {
    let one = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[3, 7], -2.0, 2.0)];
    run("scale", one, |t, v| t.scale(v[0], -1.7));
    run("offset", one, |t, v| t.offset(v[0], 0.3));
    run("relu", one, |t, v| t.relu(v[0]));
    run("leaky_relu", one, |t, v| t.leaky_relu(v[0], 0.2));
    run("sigmoid", one, |t, v| t.sigmoid(v[0]));
    run("abs", one, |t, v| t.abs(v[0]));
    run("square", one, |t, v| t.square(v[0]));
    let pos = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[3, 7], 0.1, 2.0)];
    run("log", pos, |t, v| t.log_clamped(v[0], 1e-12));
}

#[test]
fn reductions_and_layout() {
    let one = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0)];
    run("sum", one, |t, v| t.sum(v[0]));
    run("mean", one, |t, v| t.mean(v[0]));
    run("softmax axis 1", one, |t, v| t.softmax(v[0], 1));
    run("softmax axis 3", one, |t, v| t.softmax(v[0], 3));
    run("reshape", one, |t, v| t.reshape(v[0], &[6, 16]));
    run("global_avg_pool", one, |t, v| t.global_avg_pool(v[0]));
    run("maxpool", one, |t, v| t.maxpool(v[0], 2));
    run("reflect_pad", one, |t, v| t.reflect_pad(v[0], 2));
    run("minmax_normalize", one, |t, v| t.minmax_normalize(v[0]));
    let sixteen = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[2, 8, 3, 3], -1.0, 1.0)];
    run("pixel_shuffle", sixteen, |t, v| t.pixel_shuffle(v[0], 2));
    run("pixel_unshuffle", one, |t, v| t.pixel_unshuffle(v[0], 2));
    let parts = |rng: &mut ChaCha8Rng| {
        vec![rand_tensor(rng, &[2, 1, 3, 3], -1.0, 1.0), rand_tensor(rng, &[2, 2, 3, 3], -1.0, 1.0)]
    };
    run("concat", parts, |t, v| t.concat(&[v[0], v[1], v[0]], 1));
}

#[test]
fn channel_ops() {
    let xb = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0), rand_tensor(rng, &[3], -1.0, 1.0)];
    run("add_channel", xb, |t, v| t.add_channel(v[0], v[1]));
    let xs = |rng: &mut ChaCha8Rng| {
        vec![rand_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0), rand_tensor(rng, &[2, 3, 1, 1], -1.0, 1.0)]
    };
    run("mul_channel", xs, |t, v| t.mul_channel(v[0], v[1]));
}

#[test]
fn conv2d_gradients() {
    // the 1×1×5×5 input with a 1×1×3×3 kernel case plus strided/padded ones
    let small = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[1, 1, 5, 5], -1.0, 1.0), rand_tensor(rng, &[1, 1, 3, 3], -1.0, 1.0)];
    run("conv2d 5x5", small, |t, v| t.conv2d(v[0], v[1], 1, 0));
    run("conv2d 5x5 sum", small, |t, v| {
        let y = t.conv2d(v[0], v[1], 1, 0)?;
        t.sum(y)
    });
    let wide = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[2, 2, 6, 6], -1.0, 1.0), rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0)];
    run("conv2d stride 2 pad 1", wide, |t, v| t.conv2d(v[0], v[1], 2, 1));
    let point = |rng: &mut ChaCha8Rng| vec![rand_tensor(rng, &[2, 3, 4, 4], -1.0, 1.0), rand_tensor(rng, &[5, 3, 1, 1], -1.0, 1.0)];
    run("conv2d 1x1", point, |t, v| t.conv2d(v[0], v[1], 1, 0));
}

#[test]
fn batchnorm_gradients() {
    let inputs = |rng: &mut ChaCha8Rng| {
        vec![
            rand_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0),
            rand_tensor(rng, &[3], 0.5, 1.5),
            rand_tensor(rng, &[3], -0.5, 0.5),
        ]
    };
    run("batchnorm train", inputs, |t, v| {
        let mut stats = RunningStats::new(3);
        t.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Train)
    });
    run("batchnorm eval", inputs, |t, v| {
        let mut stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
        t.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Eval)
    });
    // the plain sum(output) functional: its x-gradient is analytically zero
    // in train mode, so the comparison is effectively absolute (1e-8)
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let report = check(
        &inputs(&mut rng),
        |t, v| {
            let mut stats = RunningStats::new(3);
            let y = t.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Train)?;
            t.sum(y)
        },
        &GradCheckConfig { floor: 1e-4, ..GradCheckConfig::default() },
    )
    .unwrap();
    assert!(report.max_rel_err < TOL, "{report:?}");
}

#[test]
fn attention_gradients() {
    let inputs = |rng: &mut ChaCha8Rng| {
        vec![
            rand_tensor(rng, &[2, 3, 40], -1.0, 1.0),
            rand_tensor(rng, &[2, 3, 40], -1.0, 1.0),
            rand_tensor(rng, &[2, 2, 40], -1.0, 1.0),
        ]
    };
    run("attention", inputs, |t, v| t.attention(v[0], v[1], v[2]));
}

/// Naive quadruple loop, written independently of the im2col path.
fn conv_direct(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = x.dims4("x").unwrap();
    let [f, _, kh, kw] = k.dims4("k").unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, f, ho, wo]);
    for b in 0..n {
        for o in 0..f {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.data()[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * c + ch) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * f + o) * ho + y) * wo + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let got = dehaze_tensor::conv2d(&x, &k, 2, 1).unwrap();
        let want = conv_direct(&x, &k, 2, 1);
        assert_eq!(got.shape(), &[1, 3, 3, 3]);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_matches_hand_rolled_trace() {
    // f(θ) = θ², θ₀ = 1, lr = 0.1, β = (0.5, 0.9)
    let (lr, b1, b2, eps) = (0.1, 0.5, 0.9, 1e-8);
    let mut theta = 1.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut trace = Vec::new();
    for t in 1..=5 {
        let g = 2.0 * theta;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
        trace.push(theta);
    }

    let mut params = ParamSet::new();
    let id = params.push("theta", Tensor::scalar(1.0));
    let mut state = AdamState::for_params(&params);
    let cfg = AdamConfig::new(lr, b1, b2);
    for want in trace {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let sq = tape.square(bound.var(id)).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = bound.grads(&tape.backward(loss).unwrap());
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert!((params.get(id).item() - want).abs() < 1e-12);
    }
    assert_eq!(state.t, 5);
    assert!(state.v.iter().all(|v| v.data().iter().all(|&x| x >= 0.0)));
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = rand_tensor(&mut rng, &[1, 4, 64], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[1, 4, 64], -1.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let qv = tape.leaf(q.clone(), true).unwrap();
        let kv = tape.leaf(k.clone(), true).unwrap();
        let a = tape.attention(qv, kv, qv).unwrap();
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(a).clone(), g.get(qv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn probes_across_a_kink_are_not_compared() {
    let inputs = [Tensor::new(&[3], vec![3e-6, -0.5, 0.7]).unwrap()];
    let relu_sum = |tape: &mut Tape, v: &[Var]| {
        let r = tape.relu(v[0])?;
        tape.sum(r)
    };
    let report = check(&inputs, relu_sum, &GradCheckConfig::default()).unwrap();
    assert_eq!(report.crossed, 1);
    assert_eq!(report.coords, 2);
    assert!(report.max_rel_err < 1e-10);

    let mut tape = Tape::new();
    let a = tape.leaf(inputs[0].clone(), false).unwrap();
    tape.relu(a).unwrap();
    let mut other = Tape::new();
    let b = other.leaf(Tensor::new(&[3], vec![-3e-6, -0.5, 0.7]).unwrap(), false).unwrap();
    other.relu(b).unwrap();
    assert_ne!(tape.branch_digest(), other.branch_digest());
}
