//! Finite-difference suite over every tape op, every loss term and the
//! full-network training objective, in 64-bit precision.

use std::time::{Duration, Instant};

use gsc::autodiff::gradcheck::{check, GradCheck, Tolerance};
use gsc::autodiff::{Fault, Tape, Tensor, Var};
use gsc::losses::{
    build_soft_labels, ce_loss, pd_loss, sc_loss, sg_loss, sr_loss, total_loss, LossComponents, LossWeights,
};
use gsc::relabel::PROB_EPS;
use gsc::segnet::{Architecture, SegNetwork};
use gsc::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Smallest distance a ReLU input may have from the kink; closer trials are
/// redrawn since the central difference straddles a non-differentiable point.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub tolerance: f64,
    pub trials: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            tolerance: 1e-3,
            trials: 50,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComponentResult {
    pub name: &'static str,
    pub check: GradCheck,
    pub trials: usize,
    pub elapsed: Duration,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.check.passed()
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One random trial: inputs plus the scalar function of them.
struct Trial {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

type Generator = fn(&mut ChaCha8Rng) -> Trial;

pub const OP_COMPONENTS: [&str; 19] = [
    "conv2d",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "sqrt",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_const",
    "softmax",
    "pool_mean_h",
    "pool_mean_w",
    "avg_pool2",
    "sum",
    "mean",
    "pick_channel",
    "sum_channels",
];

pub const LOSS_COMPONENTS: [&str; 6] = ["ce_loss", "sg_loss", "sr_loss", "sc_loss", "pd_loss", "objective"];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn nchw(rng: &mut ChaCha8Rng, even: bool) -> [usize; 4] {
    let side = |rng: &mut ChaCha8Rng| {
        if even {
            2 * rng.random_range(1..=2)
        } else {
            rng.random_range(2..=4)
        }
    };
    [rng.random_range(1..=2), rng.random_range(1..=3), side(rng), side(rng)]
}

/// A tensor of random NCHW shape with entries uniform in `[lo, hi)`.
fn random_input(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let shape = nchw(rng, false);
    uniform(rng, &shape, lo, hi)
}

/// Contracts a tensor output with fixed random weights so that every output
/// coordinate contributes to the scalar.
fn contract(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.mul_const(out, weights.clone())?;
    tape.sum(w)
}

/// Builds a trial for an elementwise or shape-changing op with one input.
fn unary(
    rng: &mut ChaCha8Rng,
    input: Tensor<f64>,
    out_shape: impl Fn(&[usize]) -> Vec<usize>,
    op: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
) -> Trial {
    let weights = uniform(rng, &out_shape(input.shape()), -1.0, 1.0);
    Trial {
        inputs: vec![input],
        build: Box::new(move |t, v| {
            let out = op(t, v[0])?;
            contract(t, out, &weights)
        }),
    }
}

fn binary(rng: &mut ChaCha8Rng, op: impl Fn(&mut Tape<f64>, Var, Var) -> Result<Var> + 'static) -> Trial {
    let shape = nchw(rng, false);
    let weights = uniform(rng, &shape, -1.0, 1.0);
    Trial {
        inputs: vec![uniform(rng, &shape, -2.0, 2.0), uniform(rng, &shape, -2.0, 2.0)],
        build: Box::new(move |t, v| {
            let out = op(t, v[0], v[1])?;
            contract(t, out, &weights)
        }),
    }
}

fn same(s: &[usize]) -> Vec<usize> {
    s.to_vec()
}

fn gen_conv2d(rng: &mut ChaCha8Rng) -> Trial {
    let [n, c, h, w] = nchw(rng, false);
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let pad = if k == 3 && rng.random_bool(0.7) { 1 } else { 0 };
    let (h, w) = (h.max(k), w.max(k));
    let co = rng.random_range(1..=3);
    let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let weights = uniform(rng, &[n, co, oh, ow], -1.0, 1.0);
    Trial {
        inputs: vec![
            uniform(rng, &[n, c, h, w], -1.0, 1.0),
            uniform(rng, &[co, c, k, k], -1.0, 1.0),
            uniform(rng, &[co], -1.0, 1.0),
        ],
        build: Box::new(move |t, v| {
            let out = t.conv2d(v[0], v[1], v[2], pad)?;
            contract(t, out, &weights)
        }),
    }
}

fn gen_relu(rng: &mut ChaCha8Rng) -> Trial {
    let shape = nchw(rng, false);
    let input = Tensor::from_fn(&shape, |_| {
        let m = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    unary(rng, input, same, |t, x| t.relu(x))
}

fn gen_sigmoid(rng: &mut ChaCha8Rng) -> Trial {
    let input = random_input(rng, -4.0, 4.0);
    unary(rng, input, same, |t, x| t.sigmoid(x))
}

fn gen_log(rng: &mut ChaCha8Rng) -> Trial {
    let input = random_input(rng, 0.2, 3.0);
    unary(rng, input, same, |t, x| t.log_clamped(x, PROB_EPS))
}

fn gen_exp(rng: &mut ChaCha8Rng) -> Trial {
    let input = random_input(rng, -2.0, 2.0);
    unary(rng, input, same, |t, x| t.exp(x))
}

fn gen_sqrt(rng: &mut ChaCha8Rng) -> Trial {
    let input = random_input(rng, 0.2, 3.0);
    unary(rng, input, same, |t, x| t.sqrt(x))
}

fn gen_add(rng: &mut ChaCha8Rng) -> Trial {
    binary(rng, |t, a, b| t.add(a, b))
}

fn gen_sub(rng: &mut ChaCha8Rng) -> Trial {
    binary(rng, |t, a, b| t.sub(a, b))
}

fn gen_mul(rng: &mut ChaCha8Rng) -> Trial {
    binary(rng, |t, a, b| t.mul(a, b))
}

fn gen_scale(rng: &mut ChaCha8Rng) -> Trial {
    let s = rng.random_range(-3.0..3.0);
    let input = random_input(rng, -2.0, 2.0);
    unary(rng, input, same, move |t, x| t.scale(x, s))
}

fn gen_mul_const(rng: &mut ChaCha8Rng) -> Trial {
    let shape = nchw(rng, false);
    let c = uniform(rng, &shape, -2.0, 2.0);
    let input = uniform(rng, &shape, -2.0, 2.0);
    unary(rng, input, same, move |t, x| t.mul_const(x, c.clone()))
}

fn gen_softmax(rng: &mut ChaCha8Rng) -> Trial {
    let input = random_input(rng, -3.0, 3.0);
    unary(rng, input, same, |t, x| t.softmax(x))
}

fn gen_pool(rng: &mut ChaCha8Rng, axis: usize) -> Trial {
    let input = random_input(rng, -2.0, 2.0);
    let out = move |s: &[usize]| {
        let mut o = s.to_vec();
        o[axis] = 1;
        o
    };
    unary(rng, input, out, move |t, x| t.pool_mean(x, axis))
}

fn gen_pool_h(rng: &mut ChaCha8Rng) -> Trial {
    gen_pool(rng, 2)
}

fn gen_pool_w(rng: &mut ChaCha8Rng) -> Trial {
    gen_pool(rng, 3)
}

fn gen_avg_pool2(rng: &mut ChaCha8Rng) -> Trial {
    let mut shape = nchw(rng, true);
    // odd extents exercise the dropped trailing row/column
    if rng.random_bool(0.3) {
        shape[2] += 1;
    }
    let input = uniform(rng, &shape, -2.0, 2.0);
    unary(
        rng,
        input,
        |s| vec![s[0], s[1], s[2] / 2, s[3] / 2],
        |t, x| t.avg_pool2(x),
    )
}

fn gen_sum(rng: &mut ChaCha8Rng) -> Trial {
    let input = random_input(rng, -2.0, 2.0);
    let k = rng.random_range(0.5..2.0);
    unary(
        rng,
        input,
        |_| vec![1],
        move |t, x| {
            let s = t.sum(x)?;
            t.scale(s, k)
        },
    )
}

fn gen_mean(rng: &mut ChaCha8Rng) -> Trial {
    let input = random_input(rng, -2.0, 2.0);
    let k = rng.random_range(0.5..2.0);
    unary(
        rng,
        input,
        |_| vec![1],
        move |t, x| {
            let s = t.mean(x)?;
            t.scale(s, k)
        },
    )
}

fn random_targets(rng: &mut ChaCha8Rng, pixels: usize, channels: usize, ignore: f64) -> Vec<Option<usize>> {
    (0..pixels)
        .map(|_| (!rng.random_bool(ignore)).then(|| rng.random_range(0..channels)))
        .collect()
}

fn gen_pick_channel(rng: &mut ChaCha8Rng) -> Trial {
    let shape = nchw(rng, false);
    let index = random_targets(rng, shape[0] * shape[2] * shape[3], shape[1], 0.3);
    let input = uniform(rng, &shape, -2.0, 2.0);
    unary(
        rng,
        input,
        |s| vec![s[0], 1, s[2], s[3]],
        move |t, x| t.pick_channel(x, index.clone()),
    )
}

fn gen_sum_channels(rng: &mut ChaCha8Rng) -> Trial {
    let input = random_input(rng, -2.0, 2.0);
    unary(rng, input, |s| vec![s[0], 1, s[2], s[3]], |t, x| t.sum_channels(x))
}

/// Logits of shape `[n, k, h, w]` with `k >= 2`.
fn logits_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    let [n, _, h, w] = nchw(rng, false);
    [n, rng.random_range(2..=5), h, w]
}

fn gen_ce(rng: &mut ChaCha8Rng) -> Trial {
    let shape = logits_shape(rng);
    let targets = random_targets(rng, shape[0] * shape[2] * shape[3], shape[1], 0.25);
    Trial {
        inputs: vec![uniform(rng, &shape, -3.0, 3.0)],
        build: Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            Ok(ce_loss(t, p, &targets)?.var)
        }),
    }
}

fn gen_sg(rng: &mut ChaCha8Rng) -> Trial {
    let shape = logits_shape(rng);
    let px = shape[0] * shape[2] * shape[3];
    let targets = random_targets(rng, px, shape[1], 0.25);
    let psi: Vec<f64> = (0..px).map(|_| rng.random_range(0.0..10.0)).collect();
    Trial {
        inputs: vec![uniform(rng, &shape, -3.0, 3.0)],
        build: Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            Ok(sg_loss(t, p, &targets, &psi)?.var)
        }),
    }
}

fn gen_sr(rng: &mut ChaCha8Rng) -> Trial {
    let shape = logits_shape(rng);
    let soft = uniform(rng, &shape, 0.0, 1.0);
    Trial {
        inputs: vec![uniform(rng, &shape, -3.0, 3.0)],
        build: Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            Ok(sr_loss(t, p, &soft)?.var)
        }),
    }
}

fn gen_sc(rng: &mut ChaCha8Rng) -> Trial {
    let shape = logits_shape(rng);
    Trial {
        inputs: vec![uniform(rng, &shape, -3.0, 3.0)],
        build: Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            Ok(sc_loss(t, p)?.var)
        }),
    }
}

fn gen_pd(rng: &mut ChaCha8Rng) -> Trial {
    let layers = rng.random_range(1..=3);
    let mut inputs = Vec::new();
    let mut old = Vec::new();
    for _ in 0..layers {
        let shape = nchw(rng, true);
        inputs.push(uniform(rng, &shape, 0.0, 2.0));
        old.push(uniform(rng, &shape, 0.0, 2.0));
    }
    Trial {
        inputs,
        build: Box::new(move |t, v| Ok(pd_loss(t, v, &old)?.var)),
    }
}

/// Smallest |pre-activation| over all ReLU inputs of `net` with parameters `params`.
fn kink_distance(net: &SegNetwork<f64>, images: &Tensor<f64>, params: &[Tensor<f64>]) -> Result<f64> {
    let mut t = Tape::new();
    let x = t.constant(images.clone());
    let vars: Vec<Var> = params.iter().map(|p| t.constant(p.clone())).collect();
    let fwd = net.forward_with(&mut t, x, vars)?;
    // the first block's input is the image; later blocks see post-ReLU maps
    // whose zeros come from negative pre-activations, so probe those directly
    let pad = params[0].shape()[2] / 2;
    let mut inputs = vec![x];
    inputs.extend(fwd.intermediates.iter().take(fwd.intermediates.len() - 1).copied());
    let mut closest = f64::INFINITY;
    for (i, &input) in inputs.iter().enumerate() {
        let k = t.constant(params[2 * i].clone());
        let b = t.constant(params[2 * i + 1].clone());
        let z = t.conv2d(input, k, b, pad)?;
        closest = t.value(z).data().iter().fold(closest, |m, v| m.min(v.abs()));
    }
    Ok(closest)
}

/// The incremental training objective through a complete network: a frozen
/// old model supplies soft labels and pooled-feature targets, and the new
/// model's parameters are the checked inputs.
fn gen_objective(rng: &mut ChaCha8Rng) -> Trial {
    let arch = Architecture {
        in_channels: 3,
        widths: vec![3, 3],
        kernel: 3,
    };
    loop {
        let mut old = SegNetwork::<f64>::new(&arch, 2, rng).expect("valid architecture");
        old.mark_step_trained();
        let net = old
            .expand_head(rng.random_range(1..=2), Default::default(), rng)
            .expect("head expands");
        let n = rng.random_range(1..=2);
        let images = uniform(rng, &[n, 3, 4, 4], 0.0, 1.0);
        let params: Vec<Tensor<f64>> = net
            .params()
            .into_iter()
            .map(|p| {
                let noise = uniform(rng, p.shape(), -0.3, 0.3);
                Tensor::from_fn(p.shape(), |i| p.data()[i] + noise.data()[i])
            })
            .collect();
        if kink_distance(&net, &images, &params).expect("forward runs") < KINK_MARGIN {
            continue;
        }
        let frozen = old.infer(&images).expect("forward runs");
        let width = net.head_width();
        let px = n * 16;
        let targets = random_targets(rng, px, width, 0.25);
        let gt: Vec<usize> = (0..px)
            .map(|_| {
                if rng.random_bool(0.5) {
                    0
                } else {
                    rng.random_range(old.head_width()..width)
                }
            })
            .collect();
        let soft = build_soft_labels(&gt, &frozen.logits, width).expect("soft labels");
        let psi: Vec<f64> = (0..px).map(|_| rng.random_range(0.0..10.0)).collect();
        let weights = LossWeights {
            lambda1: rng.random_range(0.1..1.0),
            lambda2: rng.random_range(0.1..1.0),
            lambda_pd: rng.random_range(0.01..1.0),
        };
        return Trial {
            inputs: params,
            build: Box::new(move |t, v| {
                let x = t.constant(images.clone());
                let fwd = net.forward_with(t, x, v.to_vec())?;
                let p = t.softmax(fwd.logits)?;
                let sg = sg_loss(t, p, &targets, &psi)?.var;
                let sr = sr_loss(t, p, &soft)?.var;
                let sc = sc_loss(t, p)?.var;
                let pd = pd_loss(t, &fwd.intermediates, &frozen.intermediates)?.var;
                let c = LossComponents {
                    sg,
                    sr: Some(sr),
                    sc: Some(sc),
                    pd: Some(pd),
                };
                total_loss(t, c, &weights)
            }),
        };
    }
}

fn generators() -> Vec<(&'static str, Generator)> {
    let ops: [Generator; 19] = [
        gen_conv2d,
        gen_relu,
        gen_sigmoid,
        gen_log,
        gen_exp,
        gen_sqrt,
        gen_add,
        gen_sub,
        gen_mul,
        gen_scale,
        gen_mul_const,
        gen_softmax,
        gen_pool_h,
        gen_pool_w,
        gen_avg_pool2,
        gen_sum,
        gen_mean,
        gen_pick_channel,
        gen_sum_channels,
    ];
    let losses: [Generator; 6] = [gen_ce, gen_sg, gen_sr, gen_sc, gen_pd, gen_objective];
    OP_COMPONENTS
        .into_iter()
        .zip(ops)
        .chain(LOSS_COMPONENTS.into_iter().zip(losses))
        .collect()
}

/// Runs `opts.trials` random trials of every component.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<ComponentResult>> {
    let tol = Tolerance {
        relative: opts.tolerance,
        ..Tolerance::default()
    };
    let mut results = Vec::new();
    for (i, (name, generate)) in generators().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1000).wrapping_add(i as u64));
        let start = Instant::now();
        let mut total = GradCheck::default();
        for _ in 0..opts.trials {
            let trial = generate(&mut rng);
            let fault = opts.fault;
            let build = trial.build;
            let r = check(
                &trial.inputs,
                move |t, v| {
                    if let Some(f) = fault {
                        t.inject_fault(f);
                    }
                    build(t, v)
                },
                tol,
                None,
                &mut rng,
            )?;
            total.merge(&r);
        }
        results.push(ComponentResult {
            name,
            check: total,
            trials: opts.trials,
            elapsed: start.elapsed(),
        });
    }
    Ok(results)
}
