//! Oracle and property suites shared by the `verify` command and the
//! acceptance tests.
//!
//! Every check returns a [`Check`] with the measured error so a report can
//! print what was compared, not just whether it passed. Kernel oracles take
//! the kernel under test as a parameter so a deliberately broken kernel can
//! be fed through the same path.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::agc::{agc_select, ambiguity_from_scalars, LabelMap};
use crate::diff::{grad_check, JsDraws, PairKernel, Tape, Tensor, Var};
use crate::error::Result;
use crate::gaussian::{compose_product, DiagonalGaussian};
use crate::losses::{
    kl_sum, masked_mean, prob_contrastive, supervised_ce, target_ce, total_loss, Anchors, LossParts, LossWeights,
    PseudoLabels,
};
use crate::model::{forward_tape, ModelShape, NetworkParams, INPUT_DIM};
use crate::rng::labeled;
use crate::similarity::{log_bk, log_elk, wasserstein2, Moments, SimilarityKind};
use crate::synthdata::{generate, Domain, Rect, WorldSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Human-readable measurement, e.g. the worst error seen.
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub type KernelFn = fn(&DiagonalGaussian, &DiagonalGaussian) -> Result<f64>;

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> DiagonalGaussian {
    let mean = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var = (0..d).map(|_| rng.random_range(0.3f64.ln()..3f64.ln()).exp()).collect();
    DiagonalGaussian::new(mean, var).expect("valid by construction")
}

fn log_density(g: &DiagonalGaussian, z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&zi, &m), &v) in z.iter().zip(g.mean()).zip(g.var()) {
        acc += -0.5 * ((zi - m) * (zi - m) / v + v.ln() + (2.0 * std::f64::consts::PI).ln());
    }
    acc
}

/// Outcome of comparing one analytic kernel against its sampling estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelComparison {
    pub dim: usize,
    pub analytic: f64,
    pub estimate: f64,
    /// Delta-method standard error of `estimate`.
    pub std_error: f64,
}

impl KernelComparison {
    pub fn z(&self) -> f64 {
        (self.analytic - self.estimate).abs() / self.std_error
    }
}

/// For `pairs` random pairs in each dimension, compares `elk(p, q)` with
/// `log mean q(z)` and `bk(p, q)` with `log mean sqrt(q(z)/p(z))`, both over
/// `samples` draws `z ~ p`.
pub fn kernel_comparisons(
    elk: KernelFn,
    bk: KernelFn,
    dims: &[usize],
    pairs: usize,
    samples: usize,
    seed: u64,
) -> Result<(Vec<KernelComparison>, Vec<KernelComparison>)> {
    let mut rng = labeled(seed, "verify/kernels");
    let (mut elks, mut bks) = (Vec::new(), Vec::new());
    for &d in dims {
        for _ in 0..pairs {
            let p = random_gaussian(&mut rng, d);
            let q = random_gaussian(&mut rng, d);
            let sd: Vec<f64> = p.var().iter().map(|v| v.sqrt()).collect();
            let mut z = vec![0.0; d];
            let (mut e, mut b) = (Moments::default(), Moments::default());
            for _ in 0..samples {
                for j in 0..d {
                    let n: f64 = rng.sample(StandardNormal);
                    z[j] = p.mean()[j] + sd[j] * n;
                }
                let lq = log_density(&q, &z);
                let lp = log_density(&p, &z);
                e.push(lq.exp());
                b.push((0.5 * (lq - lp)).exp());
            }
            for (moments, kernel, out) in [(e, elk, &mut elks), (b, bk, &mut bks)] {
                let est = moments.estimate();
                out.push(KernelComparison {
                    dim: d,
                    analytic: kernel(&p, &q)?,
                    estimate: est.value.ln(),
                    std_error: est.std_error / est.value,
                });
            }
        }
    }
    Ok((elks, bks))
}

/// Kernel-vs-sampling agreement within `sigmas` standard errors.
pub fn kernel_oracle(
    elk: KernelFn,
    bk: KernelFn,
    pairs: usize,
    samples: usize,
    sigmas: f64,
    seed: u64,
) -> Result<Vec<Check>> {
    let (elks, bks) = kernel_comparisons(elk, bk, &[1, 2, 4], pairs, samples, seed)?;
    let mut out = Vec::new();
    for (name, cmp) in [
        ("log_elk vs sampled E_p[q]", elks),
        ("log_bk vs sampled E_p[sqrt(q/p)]", bks),
    ] {
        let fails = cmp.iter().filter(|c| c.z().is_nan() || c.z() > sigmas).count();
        let worst = cmp.iter().map(KernelComparison::z).fold(0.0, f64::max);
        out.push(Check::new(
            name,
            fails == 0,
            format!("{} pairs, {fails} beyond {sigmas} SE, worst {worst:.2} SE", cmp.len()),
        ));
    }
    Ok(out)
}

fn left_fold(members: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    let mut acc = members[0].clone();
    for m in &members[1..] {
        acc = compose_product(&[acc, m.clone()])?;
    }
    Ok(acc)
}

/// Batch composition against a pairwise left fold, and the equal-variance
/// case against the arithmetic mean.
pub fn composition_oracle(lists: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = labeled(seed, "verify/composition");
    let mut worst_rel = 0.0f64;
    let mut worst_equal = 0.0f64;
    for _ in 0..lists {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=6);
        let members: Vec<DiagonalGaussian> = (0..n).map(|_| random_gaussian(&mut rng, d)).collect();
        let batch = compose_product(&members)?;
        let fold = left_fold(&members)?;
        let scale = members
            .iter()
            .flat_map(|m| m.mean().iter().map(|x| x.abs()))
            .fold(0.0f64, f64::max);
        for j in 0..d {
            let dm =
                (batch.mean()[j] - fold.mean()[j]).abs() / batch.mean()[j].abs().max(fold.mean()[j].abs()).max(scale);
            let dv = (batch.var()[j] - fold.var()[j]).abs() / batch.var()[j].max(fold.var()[j]);
            worst_rel = worst_rel.max(dm).max(dv);
        }

        let shared: Vec<f64> = members[0].var().to_vec();
        let equal: Vec<DiagonalGaussian> = members
            .iter()
            .map(|m| DiagonalGaussian::new(m.mean().to_vec(), shared.clone()))
            .collect::<Result<_>>()?;
        let c = compose_product(&equal)?;
        for j in 0..d {
            let avg = equal.iter().map(|m| m.mean()[j]).sum::<f64>() / n as f64;
            worst_equal = worst_equal.max((c.mean()[j] - avg).abs());
        }
    }
    Ok(vec![
        Check::new(
            "compose_product batch vs left fold",
            worst_rel <= 1e-10,
            format!("{lists} lists, worst relative error {worst_rel:.2e}"),
        ),
        Check::new(
            "equal-variance composition is the arithmetic mean",
            worst_equal <= 1e-12,
            format!("worst absolute error {worst_equal:.2e}"),
        ),
    ])
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Values in `[-hi, -lo] ∪ [lo, hi]`, away from a kink at zero.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Reduces an op output to a scalar through a fixed random weighting so
/// that every output element carries gradient.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

type OpCase = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Random inputs and a recorded expression for one op.
fn op_case(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, OpCase) {
    let r = rng.random_range(1..=4usize);
    let c = rng.random_range(1..=5usize);
    let k = rng.random_range(1..=4usize);
    let sh = [r, c];
    let w = rand_tensor(rng, &sh, -1.0, 1.0);
    let single = |f: fn(&mut Tape, Var) -> Result<Var>, w: Tensor| -> OpCase {
        Box::new(move |t, v| {
            let y = f(t, v[0])?;
            weighted_sum(t, y, &w)
        })
    };
    match name {
        "add" | "sub" | "mul" => {
            let (a, b) = (rand_tensor(rng, &sh, -2.0, 2.0), rand_tensor(rng, &sh, -2.0, 2.0));
            let op = name.to_string();
            (
                vec![a, b],
                Box::new(move |t, v| {
                    let y = match op.as_str() {
                        "add" => t.add(v[0], v[1])?,
                        "sub" => t.sub(v[0], v[1])?,
                        _ => t.mul(v[0], v[1])?,
                    };
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "div" => {
            let a = rand_tensor(rng, &sh, -2.0, 2.0);
            let b = rand_away_from_zero(rng, &sh, 0.5, 2.0);
            (
                vec![a, b],
                Box::new(move |t, v| {
                    let y = t.div(v[0], v[1])?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "scale" | "add_scalar" | "neg" => {
            let s = rng.random_range(-3.0..3.0);
            let op = name.to_string();
            (
                vec![rand_tensor(rng, &sh, -2.0, 2.0)],
                Box::new(move |t, v| {
                    let y = match op.as_str() {
                        "scale" => t.scale(v[0], s)?,
                        "add_scalar" => {
                            let a = t.add_scalar(v[0], s)?;
                            t.mul(a, a)?
                        }
                        _ => t.neg(v[0])?,
                    };
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "matmul" => {
            let a = rand_tensor(rng, &[r, k], -1.0, 1.0);
            let b = rand_tensor(rng, &[k, c], -1.0, 1.0);
            (
                vec![a, b],
                Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "affine" => {
            let x = rand_tensor(rng, &[r, k], -1.0, 1.0);
            let wt = rand_tensor(rng, &[k, c], -1.0, 1.0);
            let b = rand_tensor(rng, &[1, c], -1.0, 1.0);
            (
                vec![x, wt, b],
                Box::new(move |t, v| {
                    let y = t.affine(v[0], v[1], v[2])?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "exp" => (vec![rand_tensor(rng, &sh, -2.0, 2.0)], single(|t, x| t.exp(x), w)),
        "log" => (vec![rand_tensor(rng, &sh, 0.2, 3.0)], single(|t, x| t.log(x), w)),
        "sqrt" => (vec![rand_tensor(rng, &sh, 0.2, 3.0)], single(|t, x| t.sqrt(x), w)),
        "relu" => (
            vec![rand_away_from_zero(rng, &sh, 0.05, 2.0)],
            single(|t, x| t.relu(x), w),
        ),
        "clamp" => {
            // Keep inputs at least 0.05 away from either bound.
            let n = r * c;
            let data = (0..n)
                .map(|_| {
                    let u = rng.random_range(0.0..3.0);
                    if u < 1.0 {
                        -1.0 - 0.05 - u
                    } else if u < 2.0 {
                        -0.95 + (u - 1.0) * 1.9
                    } else {
                        1.05 + (u - 2.0)
                    }
                })
                .collect();
            let x = Tensor::new(sh.to_vec(), data).expect("shape");
            (
                vec![x],
                Box::new(move |t, v| {
                    let y = t.clamp(v[0], -1.0, 1.0)?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "softmax" | "log_softmax" | "l2_normalize" => {
            let axis = rng.random_range(0..2usize);
            let x = rand_tensor(rng, &sh, -2.0, 2.0);
            let x = if name == "l2_normalize" {
                x.map(|v| if v.abs() < 0.1 { v + 0.5 } else { v })
            } else {
                x
            };
            let op = name.to_string();
            (
                vec![x],
                Box::new(move |t, v| {
                    let y = match op.as_str() {
                        "softmax" => t.softmax(v[0], axis)?,
                        "log_softmax" => t.log_softmax(v[0], axis)?,
                        _ => t.l2_normalize(v[0], axis)?,
                    };
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "logsumexp" | "sum_axis" => {
            let axis = rng.random_range(0..2usize);
            let x = rand_tensor(rng, &sh, -2.0, 2.0);
            let len = if axis == 0 { c } else { r };
            let w = rand_tensor(rng, &[len], -1.0, 1.0);
            let op = name.to_string();
            (
                vec![x],
                Box::new(move |t, v| {
                    let y = if op == "logsumexp" {
                        t.logsumexp(v[0], axis)?
                    } else {
                        t.sum_axis(v[0], axis)?
                    };
                    let y = t.reshape(y, &[len])?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "sum" | "mean" => {
            let op = name.to_string();
            (
                vec![rand_tensor(rng, &sh, -2.0, 2.0)],
                Box::new(move |t, v| {
                    let s = if op == "sum" { t.sum(v[0])? } else { t.mean(v[0])? };
                    t.mul(s, s)
                }),
            )
        }
        "slice" => {
            let axis = rng.random_range(0..2usize);
            let dim = sh[axis];
            let start = rng.random_range(0..dim);
            let len = rng.random_range(1..=dim - start);
            let mut out_shape = sh;
            out_shape[axis] = len;
            let w = rand_tensor(rng, &out_shape, -1.0, 1.0);
            (
                vec![rand_tensor(rng, &sh, -2.0, 2.0)],
                Box::new(move |t, v| {
                    let y = t.slice(v[0], axis, start, len)?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "concat" => {
            let axis = rng.random_range(0..2usize);
            let mut sb = sh;
            sb[axis] = k;
            let mut out_shape = sh;
            out_shape[axis] += k;
            let w = rand_tensor(rng, &out_shape, -1.0, 1.0);
            (
                vec![rand_tensor(rng, &sh, -2.0, 2.0), rand_tensor(rng, &sb, -2.0, 2.0)],
                Box::new(move |t, v| {
                    let y = t.concat(&[v[0], v[1]], axis)?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "expand_rows" => {
            let x = rand_tensor(rng, &[1, c], -2.0, 2.0);
            (
                vec![x],
                Box::new(move |t, v| {
                    let y = t.expand_rows(v[0], r)?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "expand_cols" => {
            let x = rand_tensor(rng, &[r, 1], -2.0, 2.0);
            (
                vec![x],
                Box::new(move |t, v| {
                    let y = t.expand_cols(v[0], c)?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "pick" => {
            let idx: Vec<Option<usize>> = (0..r)
                .map(|_| (rng.random::<f64>() < 0.8).then(|| rng.random_range(0..c)))
                .collect();
            let w = rand_tensor(rng, &[r], -1.0, 1.0);
            (
                vec![rand_tensor(rng, &sh, -2.0, 2.0)],
                Box::new(move |t, v| {
                    let y = t.pick(v[0], &idx)?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "reshape" => {
            let w = rand_tensor(rng, &[r * c], -1.0, 1.0);
            (
                vec![rand_tensor(rng, &sh, -2.0, 2.0)],
                Box::new(move |t, v| {
                    let y = t.reshape(v[0], &[r * c])?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "pairwise_ppk" | "pairwise_neg_kl" | "pairwise_neg_w2" => {
            let d = rng.random_range(1..=4usize);
            let kind = match name {
                "pairwise_ppk" => PairKernel::Ppk(rng.random_range(0.3..1.5)),
                "pairwise_neg_kl" => PairKernel::NegKl,
                _ => PairKernel::NegW2,
            };
            let w = rand_tensor(rng, &[r, k], -1.0, 1.0);
            (
                vec![
                    rand_tensor(rng, &[r, d], -1.0, 1.0),
                    rand_tensor(rng, &[r, d], 0.3, 2.0),
                    rand_tensor(rng, &[k, d], -1.0, 1.0),
                    rand_tensor(rng, &[k, d], 0.3, 2.0),
                ],
                Box::new(move |t, v| {
                    let y = t.pairwise(v[0], v[1], v[2], v[3], kind)?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        "pairwise_js" => {
            let d = rng.random_range(1..=4usize);
            let samples = rng.random_range(1..=3usize);
            let draws = JsDraws {
                samples,
                eps_x: (0..samples * d).map(|_| rng.sample(StandardNormal)).collect(),
                eps_y: (0..samples * d).map(|_| rng.sample(StandardNormal)).collect(),
            };
            let w = rand_tensor(rng, &[r, k], -1.0, 1.0);
            (
                vec![
                    rand_tensor(rng, &[r, d], -1.0, 1.0),
                    rand_tensor(rng, &[r, d], 0.3, 2.0),
                    rand_tensor(rng, &[k, d], -1.0, 1.0),
                    rand_tensor(rng, &[k, d], 0.3, 2.0),
                ],
                Box::new(move |t, v| {
                    let y = t.pairwise_js(v[0], v[1], v[2], v[3], draws.clone())?;
                    weighted_sum(t, y, &w)
                }),
            )
        }
        other => unreachable!("no gradient case for op `{other}`"),
    }
}

/// Every differentiable op of the tape.
pub const OPS: [&str; 31] = [
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "neg",
    "matmul",
    "affine",
    "exp",
    "log",
    "sqrt",
    "relu",
    "clamp",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "logsumexp",
    "sum_axis",
    "sum",
    "mean",
    "slice",
    "concat",
    "expand_rows",
    "expand_cols",
    "pick",
    "reshape",
    "pairwise_ppk",
    "pairwise_neg_kl",
    "pairwise_neg_w2",
    "pairwise_js",
];

/// The largest relative gradient error of `op` over `cases` random inputs.
pub fn op_gradient_error(op: &str, cases: usize, seed: u64) -> Result<f64> {
    let mut rng = labeled(seed, &format!("verify/grad/{op}"));
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (inputs, f) = op_case(op, &mut rng);
        let report = grad_check(|t, v| f(t, v), &inputs, 1e-6)?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

/// One random configuration of the full weighted loss on an 8-pixel,
/// 3-class fixture: 4 source and 4 target pixels through a small network.
pub struct LossFixture {
    pub shape: ModelShape,
    pub params: Vec<Tensor>,
    pub source_x: Tensor,
    pub target_x: Tensor,
    pub source_labels: Vec<Option<usize>>,
    pub pseudo: PseudoLabels,
    pub prototypes: Vec<Option<DiagonalGaussian>>,
    pub kind: SimilarityKind,
    pub tau: f64,
    pub weights: LossWeights,
    pub mc_seed: u64,
}

impl LossFixture {
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let shape = ModelShape {
            hidden: 5,
            proj_hidden: 4,
            embed_dim: 3,
            classes: 3,
        };
        // Random biases too: with zero biases and a narrow layer, a pixel whose
        // mean-branch units are all inactive has an exactly zero raw mean,
        // where normalization is not differentiable in any useful sense.
        let mut params = NetworkParams::init(shape, rng)?.tensors().to_vec();
        for t in params.iter_mut().skip(1).step_by(2) {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let source_x = rand_tensor(rng, &[4, INPUT_DIM], -0.5, 0.5);
        let target_x = rand_tensor(rng, &[4, INPUT_DIM], -0.5, 0.5);
        let source_labels = (0..4).map(|_| Some(rng.random_range(0..3))).collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let mask: Vec<bool> = (0..4).map(|_| rng.random::<f64>() < 0.7).collect();
        let pseudo = PseudoLabels {
            confidence: vec![1.0; 4],
            labels,
            mask,
        };
        let prototypes = (0..3)
            .map(|c| {
                (c < 2 || rng.random::<bool>()).then(|| {
                    let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..2.0)).collect();
                    DiagonalGaussian::new(mean, var).expect("valid")
                })
            })
            .collect();
        let kinds = [
            SimilarityKind::Elk,
            SimilarityKind::Bk,
            SimilarityKind::Ppk { rho: 0.7 },
            SimilarityKind::Kl,
            SimilarityKind::Wasserstein2,
            SimilarityKind::Cosine,
            SimilarityKind::JsMc { samples: 3 },
            SimilarityKind::McCosine { samples: 3 },
        ];
        Ok(Self {
            shape,
            params,
            source_x,
            target_x,
            source_labels,
            pseudo,
            prototypes,
            kind: kinds[rng.random_range(0..kinds.len())],
            tau: rng.random_range(0.1..1.0),
            weights: LossWeights {
                lambda_t: rng.random_range(0.1..2.0),
                lambda_c: rng.random_range(0.1..2.0),
                lambda_kl: rng.random_range(0.01..1.0),
            },
            mc_seed: rng.random(),
        })
    }

    /// Records the full loss with `vars` bound to the network parameters.
    pub fn record(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let bound = crate::model::BoundParams::from_vars(vars.to_vec());
        let s = forward_tape(tape, &bound, self.source_x.clone(), true)?;
        let t = forward_tape(tape, &bound, self.target_x.clone(), true)?;
        let ce = supervised_ce(tape, s.logits, &self.source_labels)?;
        let lt = target_ce(tape, t.logits, &self.pseudo)?;
        let (sm, sv) = s.embeddings.expect("requested");
        let (tm, tv) = t.embeddings.expect("requested");
        let tl = self.pseudo.masked();
        let sets = [
            Anchors {
                mean: sm,
                var: sv,
                labels: &self.source_labels,
            },
            Anchors {
                mean: tm,
                var: tv,
                labels: &tl,
            },
        ];
        let mut mc = labeled(self.mc_seed, "fixture/mc");
        let c = prob_contrastive(tape, &sets, &self.prototypes, self.kind, self.tau, &mut mc)?;
        let ks = kl_sum(tape, sm, sv, &[true; 4])?;
        let kt = kl_sum(tape, tm, tv, &[true; 4])?;
        let kl = masked_mean(tape, &[ks, kt])?;
        let parts = LossParts {
            source: ce.loss,
            target: Some(lt),
            contrast: Some(c.loss),
            kl: Some(kl),
        };
        total_loss(tape, &parts, &self.weights)
    }
}

/// Worst relative gradient error of the full loss over `cases` fixtures.
pub fn full_loss_gradient_error(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = labeled(seed, "verify/full_loss");
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let fx = LossFixture::random(&mut rng)?;
        let report = grad_check(|t, v| fx.record(t, v), &fx.params, 1e-5)?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

pub fn gradient_suite(cases: usize, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for op in OPS {
        let err = op_gradient_error(op, cases, seed)?;
        out.push(Check::new(
            format!("gradient of {op}"),
            err < 1e-6,
            format!("{cases} cases, worst relative error {err:.2e}"),
        ));
    }
    let err = full_loss_gradient_error(cases, seed)?;
    out.push(Check::new(
        "gradient of the full weighted loss (8 pixels, K=3)",
        err < 1e-4,
        format!("{cases} cases, worst relative error {err:.2e}"),
    ));
    Ok(out)
}

/// Contrastive loss of one anchor against `k` prototypes that all sit at the
/// same kernel value from it.
pub fn equidistant_contrast(k: usize, kind: SimilarityKind) -> Result<f64> {
    let mut tape = Tape::new();
    let anchor_mean = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0])?);
    let anchor_var = tape.constant(Tensor::matrix(1, 2, vec![1.0, 1.0])?);
    let protos: Vec<Option<DiagonalGaussian>> = (0..k)
        .map(|c| {
            let a = std::f64::consts::TAU * c as f64 / k as f64;
            Some(DiagonalGaussian::new(vec![a.cos(), a.sin()], vec![0.5, 0.5]).expect("valid"))
        })
        .collect();
    let labels = [Some(0)];
    let sets = [Anchors {
        mean: anchor_mean,
        var: anchor_var,
        labels: &labels,
    }];
    let mut rng = labeled(0, "verify/equidistant");
    let out = prob_contrastive(&mut tape, &sets, &protos, kind, 0.1, &mut rng)?;
    Ok(tape.value(out.loss).item())
}

pub fn closed_form_checks() -> Result<Vec<Check>> {
    let kl = DiagonalGaussian::new(vec![1.0], vec![1.0])?.kl_to_standard();
    let k = 5;
    let contrast = equidistant_contrast(k, SimilarityKind::Elk)?;
    let w2 = wasserstein2(
        &DiagonalGaussian::new(vec![0.0], vec![1.0])?,
        &DiagonalGaussian::new(vec![3.0], vec![1.0])?,
    )?;
    let e = |x: f64, want: f64| (x - want).abs();
    Ok(vec![
        Check::new(
            "kl_to_standard(N(1,1)) = 0.5",
            e(kl, 0.5) <= 1e-12,
            format!("got {kl:.15}"),
        ),
        Check::new(
            format!("equidistant contrast = log {k}"),
            e(contrast, (k as f64).ln()) <= 1e-10,
            format!("error {:.2e}", e(contrast, (k as f64).ln())),
        ),
        Check::new(
            "wasserstein2(N(0,1), N(3,1)) = 3",
            e(w2, 3.0) <= 1e-12,
            format!("got {w2:.15}"),
        ),
    ])
}

/// Index of the candidate with the most pixels in the `k` most ambiguous
/// classes, computed by direct counting.
pub fn top_k_count_oracle(labels: &[u8], width: usize, candidates: &[Rect], weights: &[f64], k: usize) -> usize {
    let mut classes: Vec<usize> = (0..weights.len()).collect();
    classes.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).expect("finite").then(a.cmp(&b)));
    let chosen = &classes[..k];
    let mut best = (0, 0usize);
    for (i, r) in candidates.iter().enumerate() {
        let mut count = 0;
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                if chosen.contains(&(labels[y * width + x] as usize)) {
                    count += 1;
                }
            }
        }
        if i == 0 || count > best.1 {
            best = (i, count);
        }
    }
    best.0
}

/// With equal prototype variances, AGC picks the same crop as a top-k
/// pixel-count argmax over the same candidates.
pub fn rcs_reduction(images: usize, seed: u64) -> Result<(usize, usize)> {
    let mut agree = 0;
    for i in 0..images {
        let mut spec = WorldSpec::benchmark(seed.wrapping_add(i as u64));
        spec.height = 48;
        spec.width = 48;
        spec.blob_scale = 8.0;
        let grid = generate(&spec, 1, Domain::Source)?.remove(0);
        let scalars = vec![Some(0.7); spec.classes];
        let weights = ambiguity_from_scalars(&scalars, 1.0)?.weights;
        let k = 1 + i % spec.classes;
        let map = LabelMap {
            labels: &grid.labels,
            height: grid.height,
            width: grid.width,
        };
        let mut rng = labeled(seed, &format!("verify/rcs/{i}"));
        let sel = agc_select(&map, &weights, k, 10, 16, &mut rng)?;
        if sel.index == top_k_count_oracle(&grid.labels, grid.width, &sel.candidates, &weights, k) {
            agree += 1;
        }
    }
    Ok((agree, images))
}

/// The complete suite as run by the `verify` command.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = kernel_oracle(log_elk, log_bk, 50, 1_000_000, 3.0, seed)?;
    out.extend(composition_oracle(200, seed)?);
    out.extend(gradient_suite(100, seed)?);
    out.extend(closed_form_checks()?);
    let (agree, n) = rcs_reduction(100, seed)?;
    out.push(Check::new(
        "AGC with equal variances matches the top-k count oracle",
        agree == n,
        format!("{agree}/{n} images agree"),
    ));
    Ok(out)
}
