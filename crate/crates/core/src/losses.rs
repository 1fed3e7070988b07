//! Training objectives recorded on a [`Tape`].
//!
//! Masked means are built from [`Masked`] partial sums so that source and
//! target pixels, which come from separate forward passes, can share one
//! denominator.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{kernels, JsDraws, PairKernel, Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::gaussian::DiagonalGaussian;
use crate::similarity::SimilarityKind;

/// A summed loss term and the number of pixels it covers.
#[derive(Debug, Clone, Copy)]
pub struct Masked {
    pub sum: Var,
    pub count: usize,
}

/// `Σ sum / Σ count`, or a constant zero when nothing is covered.
pub fn masked_mean(tape: &mut Tape, parts: &[Masked]) -> Result<Var> {
    let count: usize = parts.iter().map(|p| p.count).sum();
    let live: Vec<Var> = parts.iter().filter(|p| p.count > 0).map(|p| p.sum).collect();
    if count == 0 || live.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut total = live[0];
    for &v in &live[1..] {
        total = tape.add(total, v)?;
    }
    tape.scale(total, 1.0 / count as f64)
}

/// Summed cross-entropy over rows with a label; `None` rows are ignored.
pub fn ce_sum(tape: &mut Tape, logits: Var, labels: &[Option<usize>]) -> Result<Masked> {
    let ls = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(ls, labels)?;
    let s = tape.sum(picked)?;
    Ok(Masked {
        sum: tape.neg(s)?,
        count: labels.iter().filter(|l| l.is_some()).count(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct CeOutput {
    pub loss: Var,
    pub count: usize,
    /// Set when no pixel carried a label; the loss is then a constant zero.
    pub all_unlabeled: bool,
}

/// Mean of `-log softmax(logits)[label]` over labeled rows.
pub fn supervised_ce(tape: &mut Tape, logits: Var, labels: &[Option<usize>]) -> Result<CeOutput> {
    let part = ce_sum(tape, logits, labels)?;
    if part.count == 0 {
        log::warn!("cross-entropy over a batch without labels; using zero loss");
    }
    Ok(CeOutput {
        loss: masked_mean(tape, &[part])?,
        count: part.count,
        all_unlabeled: part.count == 0,
    })
}

/// Masked mean cross-entropy against pseudo-labels; zero for an empty mask.
pub fn target_ce(tape: &mut Tape, logits: Var, pseudo: &PseudoLabels) -> Result<Var> {
    let part = ce_sum(tape, logits, &pseudo.masked())?;
    masked_mean(tape, &[part])
}

/// Argmax labels of a teacher prediction and its confidence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
    pub mask: Vec<bool>,
}

impl PseudoLabels {
    /// Labels with unmasked pixels set to `None`.
    pub fn masked(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .zip(&self.mask)
            .map(|(&l, &m)| m.then_some(l))
            .collect()
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// `label = argmax`, `mask = max softmax probability > alpha`.
pub fn pseudo_label(logits: &[f64], classes: usize, alpha: f64) -> Result<PseudoLabels> {
    contract!(
        (0.0..1.0).contains(&alpha),
        "confidence threshold {alpha} outside [0, 1)"
    );
    contract!(
        classes >= 1 && logits.len().is_multiple_of(classes),
        "{} logits do not split into rows of {classes}",
        logits.len()
    );
    let probs = kernels::softmax_rows(logits, classes);
    let mut labels = Vec::with_capacity(logits.len() / classes);
    let mut confidence = Vec::with_capacity(labels.capacity());
    for row in probs.chunks(classes) {
        let (best, p) = row.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc },
        );
        labels.push(best);
        confidence.push(p);
    }
    let mask = confidence.iter().map(|&c| c > alpha).collect();
    Ok(PseudoLabels {
        labels,
        confidence,
        mask,
    })
}

/// Student embeddings of one forward pass together with their anchor labels.
#[derive(Debug, Clone, Copy)]
pub struct Anchors<'a> {
    pub mean: Var,
    pub var: Var,
    /// Class per row; `None` rows are not anchors.
    pub labels: &'a [Option<usize>],
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastOutput {
    pub loss: Var,
    pub anchors: usize,
    /// Anchors whose class has no prototype yet.
    pub skipped: usize,
}

/// Prototypes that exist, with their class ids.
struct ProtoTable {
    classes: Vec<usize>,
    column: Vec<Option<usize>>,
    mean: Vec<f64>,
    var: Vec<f64>,
    dim: usize,
}

impl ProtoTable {
    fn new(prototypes: &[Option<DiagonalGaussian>]) -> Result<Self> {
        let mut t = ProtoTable {
            classes: Vec::new(),
            column: vec![None; prototypes.len()],
            mean: Vec::new(),
            var: Vec::new(),
            dim: 0,
        };
        for (c, p) in prototypes.iter().enumerate() {
            if let Some(g) = p {
                contract!(
                    t.classes.is_empty() || g.dim() == t.dim,
                    "prototype {c} has dimension {} but others have {}",
                    g.dim(),
                    t.dim
                );
                t.dim = g.dim();
                t.column[c] = Some(t.classes.len());
                t.classes.push(c);
                t.mean.extend_from_slice(g.mean());
                t.var.extend_from_slice(g.var());
            }
        }
        Ok(t)
    }

    fn len(&self) -> usize {
        self.classes.len()
    }
}

/// `n × m` log-similarities between anchor Gaussians and the `m` existing
/// prototypes under `kind`.
fn similarity_logits<R: Rng + ?Sized>(
    tape: &mut Tape,
    mean: Var,
    var: Var,
    protos: &ProtoTable,
    kind: SimilarityKind,
    rng: &mut R,
) -> Result<Var> {
    let (n, d) = tape.value(mean).dims2()?;
    contract!(
        d == protos.dim,
        "anchor dimension {d} differs from prototype dimension {}",
        protos.dim
    );
    let m = protos.len();
    let pair = |tape: &mut Tape, k: PairKernel| -> Result<Var> {
        let pm = tape.constant(Tensor::from_parts(vec![m, d], protos.mean.clone()));
        let pv = tape.constant(Tensor::from_parts(vec![m, d], protos.var.clone()));
        tape.pairwise(mean, var, pm, pv, k)
    };
    match kind {
        SimilarityKind::Elk => pair(tape, PairKernel::Ppk(1.0)),
        SimilarityKind::Bk => pair(tape, PairKernel::Ppk(0.5)),
        SimilarityKind::Ppk { rho } => pair(tape, PairKernel::Ppk(rho)),
        SimilarityKind::Kl => pair(tape, PairKernel::NegKl),
        SimilarityKind::Wasserstein2 => pair(tape, PairKernel::NegW2),
        SimilarityKind::Cosine => {
            let a = tape.l2_normalize(mean, 1)?;
            let (pn, _) = kernels::l2_normalize(&protos.mean, m, d, 1);
            let pt = tape.constant(transpose(&pn, m, d));
            tape.matmul(a, pt)
        }
        SimilarityKind::McCosine { samples } => {
            // Mean of J normalized draws on each side; their dot product is
            // the average over all J² sample pairs.
            let std = tape.sqrt(var)?;
            let mut acc: Option<Var> = None;
            for _ in 0..samples {
                let eps = tape.constant(normal_tensor(rng, &[n, d]));
                let noise = tape.mul(std, eps)?;
                let z = tape.add(mean, noise)?;
                let u = tape.l2_normalize(z, 1)?;
                acc = Some(match acc {
                    None => u,
                    Some(a) => tape.add(a, u)?,
                });
            }
            let ubar = tape.scale(acc.expect("samples >= 1"), 1.0 / samples as f64)?;
            let mut wbar = vec![0.0; m * d];
            for _ in 0..samples {
                let mut z = vec![0.0; m * d];
                for (i, zi) in z.iter_mut().enumerate() {
                    let e: f64 = rng.sample(StandardNormal);
                    *zi = protos.mean[i] + protos.var[i].sqrt() * e;
                }
                let (u, _) = kernels::l2_normalize(&z, m, d, 1);
                for (w, v) in wbar.iter_mut().zip(u) {
                    *w += v / samples as f64;
                }
            }
            let wt = tape.constant(transpose(&wbar, m, d));
            tape.matmul(ubar, wt)
        }
        SimilarityKind::JsMc { samples } => js_logits(tape, mean, var, protos, samples, rng),
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Tensor {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    Tensor::from_parts(vec![cols, rows], t)
}

fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

/// Negative Monte-Carlo Jensen–Shannon divergence with reparameterized
/// draws shared across pairs, so gradients reach the anchor mean and
/// variance.
fn js_logits<R: Rng + ?Sized>(
    tape: &mut Tape,
    mean: Var,
    var: Var,
    protos: &ProtoTable,
    samples: usize,
    rng: &mut R,
) -> Result<Var> {
    let d = tape.value(mean).dims2()?.1;
    let m = protos.len();
    let draws = JsDraws {
        samples,
        eps_x: normal_tensor(rng, &[samples, d]).data().to_vec(),
        eps_y: normal_tensor(rng, &[samples, d]).data().to_vec(),
    };
    let pm = tape.constant(Tensor::from_parts(vec![m, d], protos.mean.clone()));
    let pv = tape.constant(Tensor::from_parts(vec![m, d], protos.var.clone()));
    tape.pairwise_js(mean, var, pm, pv, draws)
}

/// Contrastive loss of anchors against composed prototypes:
/// `-log softmax(κ(q, ρ_c) / τ)[own class]` averaged over anchors.
///
/// Only existing prototypes enter the denominator; anchors of classes
/// without one are skipped and counted.
pub fn prob_contrastive<R: Rng + ?Sized>(
    tape: &mut Tape,
    sets: &[Anchors<'_>],
    prototypes: &[Option<DiagonalGaussian>],
    kind: SimilarityKind,
    tau: f64,
    rng: &mut R,
) -> Result<ContrastOutput> {
    contract!(tau > 0.0 && tau.is_finite(), "temperature must be positive, got {tau}");
    kind.validate()?;
    let protos = ProtoTable::new(prototypes)?;
    let mut parts = Vec::with_capacity(sets.len());
    let (mut anchors, mut skipped) = (0, 0);
    for set in sets {
        let mut cols = Vec::with_capacity(set.labels.len());
        for l in set.labels {
            cols.push(match *l {
                None => None,
                Some(c) => {
                    contract!(c < prototypes.len(), "anchor class {c} out of range");
                    let col = protos.column[c];
                    if col.is_none() {
                        skipped += 1;
                    }
                    col
                }
            });
        }
        let count = cols.iter().filter(|c| c.is_some()).count();
        if count == 0 {
            continue;
        }
        anchors += count;
        let logits = similarity_logits(tape, set.mean, set.var, &protos, kind, rng)?;
        let scaled = tape.scale(logits, 1.0 / tau)?;
        parts.push(ce_sum(tape, scaled, &cols)?);
    }
    Ok(ContrastOutput {
        loss: masked_mean(tape, &parts)?,
        anchors,
        skipped,
    })
}

/// The deterministic baseline: cosine similarity between anchor means and
/// prototype means.
pub fn det_contrastive<R: Rng + ?Sized>(
    tape: &mut Tape,
    sets: &[Anchors<'_>],
    prototypes: &[Option<DiagonalGaussian>],
    tau: f64,
    rng: &mut R,
) -> Result<ContrastOutput> {
    prob_contrastive(tape, sets, prototypes, SimilarityKind::Cosine, tau, rng)
}

/// Summed `KL(N(μ, σ²) ‖ N(0, I))` over rows where `mask` is set.
pub fn kl_sum(tape: &mut Tape, mean: Var, var: Var, mask: &[bool]) -> Result<Masked> {
    let rows = tape.shape(mean)[0];
    contract!(mask.len() == rows, "mask has {} rows, embeddings {rows}", mask.len());
    let m2 = tape.mul(mean, mean)?;
    let lv = tape.log(var)?;
    let t = tape.add(m2, var)?;
    let t = tape.sub(t, lv)?;
    let t = tape.add_scalar(t, -1.0)?;
    let per_row = tape.sum_axis(t, 1)?;
    let w = tape.constant(Tensor::vector(
        mask.iter().map(|&k| if k { 0.5 } else { 0.0 }).collect(),
    ));
    let weighted = tape.mul(per_row, w)?;
    Ok(Masked {
        sum: tape.sum(weighted)?,
        count: mask.iter().filter(|k| **k).count(),
    })
}

/// Masked mean of the per-pixel KL to the standard normal.
pub fn kl_reg(tape: &mut Tape, mean: Var, var: Var, mask: &[bool]) -> Result<Var> {
    let part = kl_sum(tape, mean, var, mask)?;
    masked_mean(tape, &[part])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_kl: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        contract!(
            [self.lambda_t, self.lambda_c, self.lambda_kl]
                .iter()
                .all(|w| w.is_finite() && *w >= 0.0),
            "loss weights must be finite and non-negative: {self:?}"
        );
        Ok(())
    }
}

/// Loss terms of one step; absent terms contribute nothing.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub source: Var,
    pub target: Option<Var>,
    pub contrast: Option<Var>,
    pub kl: Option<Var>,
}

/// `L_s + λ_t L_t + λ_c L_c + λ_KL L_KL`. Terms with zero weight are not
/// recorded at all.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let mut total = parts.source;
    for (term, weight) in [
        (parts.target, w.lambda_t),
        (parts.contrast, w.lambda_c),
        (parts.kl, w.lambda_kl),
    ] {
        if let Some(v) = term {
            if weight != 0.0 {
                let s = tape.scale(v, weight)?;
                total = tape.add(total, s)?;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check;
    use crate::gaussian::LN_2PI;
    use crate::rng::labeled;
    use crate::similarity::{cosine, log_elk};

    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    /// Row-wise diagonal-Gaussian log-density `log N(x; m, v)` for `r × d`
    /// operands, as an `r`-vector.
    fn log_density_rows(tape: &mut Tape, x: Var, m: Var, v: Var) -> Result<Var> {
        let diff = tape.sub(x, m)?;
        let sq = tape.mul(diff, diff)?;
        let q = tape.div(sq, v)?;
        let lv = tape.log(v)?;
        let t = tape.add(q, lv)?;
        let t = tape.add_scalar(t, LN_2PI)?;
        let s = tape.sum_axis(t, 1)?;
        tape.scale(s, -0.5)
    }

    /// `log(e^a + e^b)` for two `r`-vectors.
    fn log_add_exp(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let r = tape.shape(a)[0];
        let a2 = tape.reshape(a, &[r, 1])?;
        let b2 = tape.reshape(b, &[r, 1])?;
        let ab = tape.concat(&[a2, b2], 1)?;
        tape.logsumexp(ab, 1)
    }

    /// The divergence assembled from elementwise tape ops over tiled
    /// rows; the fused op must agree with it.
    fn composed_js_logits<R: Rng + ?Sized>(
        tape: &mut Tape,
        mean: Var,
        var: Var,
        protos: &ProtoTable,
        samples: usize,
        rng: &mut R,
    ) -> Result<Var> {
        let (n, d) = tape.value(mean).dims2()?;
        let (m, j) = (protos.len(), samples);
        let r = n * m * j;
        // Row (i, c, s) pairs anchor i with prototype c under draw s.
        let tile = |tape: &mut Tape, v: Var| -> Result<Var> {
            let copies = vec![v; m * j];
            let wide = tape.concat(&copies, 1)?;
            tape.reshape(wide, &[r, d])
        };
        let mp = tile(tape, mean)?;
        let vp = tile(tape, var)?;
        let eps_x = normal_tensor(rng, &[j, d]);
        let eps_y = normal_tensor(rng, &[j, d]);
        let mut mq = Vec::with_capacity(r * d);
        let mut vq = Vec::with_capacity(r * d);
        let mut ex = Vec::with_capacity(r * d);
        let mut y = Vec::with_capacity(r * d);
        for _ in 0..n {
            for c in 0..m {
                let pm = &protos.mean[c * d..(c + 1) * d];
                let pv = &protos.var[c * d..(c + 1) * d];
                for s in 0..j {
                    mq.extend_from_slice(pm);
                    vq.extend_from_slice(pv);
                    ex.extend_from_slice(&eps_x.data()[s * d..(s + 1) * d]);
                    for k in 0..d {
                        y.push(pm[k] + pv[k].sqrt() * eps_y.data()[s * d + k]);
                    }
                }
            }
        }
        let mq = tape.constant(Tensor::from_parts(vec![r, d], mq));
        let vq = tape.constant(Tensor::from_parts(vec![r, d], vq));
        let ex = tape.constant(Tensor::from_parts(vec![r, d], ex));
        let y = tape.constant(Tensor::from_parts(vec![r, d], y));

        let sp = tape.sqrt(vp)?;
        let noise = tape.mul(sp, ex)?;
        let x = tape.add(mp, noise)?;

        let lp_x = log_density_rows(tape, x, mp, vp)?;
        let lq_x = log_density_rows(tape, x, mq, vq)?;
        let lp_y = log_density_rows(tape, y, mp, vp)?;
        let lq_y = log_density_rows(tape, y, mq, vq)?;
        let lm_x = log_add_exp(tape, lp_x, lq_x)?;
        let lm_y = log_add_exp(tape, lp_y, lq_y)?;
        // ½[(log p − log m)(x) + (log q − log m)(y)], with log m = lse − ln 2.
        let a = tape.sub(lp_x, lm_x)?;
        let b = tape.sub(lq_y, lm_y)?;
        let ab = tape.add(a, b)?;
        let js = tape.add_scalar(ab, 2.0 * std::f64::consts::LN_2)?;
        let js = tape.scale(js, 0.5)?;
        let per = tape.reshape(js, &[n * m, j])?;
        let total = tape.sum_axis(per, 1)?;
        let avg = tape.scale(total, -1.0 / j as f64)?;
        tape.reshape(avg, &[n, m])
    }

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn supervised_ce_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let out = supervised_ce(&mut t, x, &[Some(0)]).unwrap();
        assert!((scalar(&t, out.loss) - softplus(-1.0)).abs() < 1e-12);
        assert!((scalar(&t, out.loss) - 0.3133).abs() < 1e-4);

        let x = t.constant(Tensor::full(&[3, 19], 0.25));
        let out = supervised_ce(&mut t, x, &[Some(0), Some(7), Some(18)]).unwrap();
        assert!((scalar(&t, out.loss) - 19f64.ln()).abs() < 1e-12);

        let x = t.constant(Tensor::matrix(1, 2, vec![800.0, 0.0]).unwrap());
        let out = supervised_ce(&mut t, x, &[Some(0)]).unwrap();
        assert_eq!(scalar(&t, out.loss), 0.0);

        let out = supervised_ce(&mut t, x, &[None]).unwrap();
        assert!(out.all_unlabeled);
        assert_eq!(scalar(&t, out.loss), 0.0);
    }

    #[test]
    fn pseudo_labels_threshold() {
        // Two classes with confidences 0.97 and 0.5.
        let l97 = (0.97f64 / 0.03).ln();
        let logits = [l97, 0.0, 0.0, 0.0];
        let p = pseudo_label(&logits, 2, 0.968).unwrap();
        assert_eq!(p.labels, vec![0, 0]);
        assert_eq!(p.mask, vec![true, false]);
        let p0 = pseudo_label(&logits, 2, 0.0).unwrap();
        assert_eq!(p0.mask, vec![true, true]);
        assert!(pseudo_label(&logits, 2, 1.0).is_err());

        let mut rng = labeled(1, "pl");
        let logits: Vec<f64> = (0..400).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut prev = usize::MAX;
        for a in [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.968, 0.99] {
            let k = pseudo_label(&logits, 4, a).unwrap().kept();
            assert!(k <= prev);
            prev = k;
        }
    }

    #[test]
    fn target_ce_masking() {
        let mut rng = labeled(2, "tce");
        let data: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = vec![0, 1, 2, 1, 0, 2];
        let mk = |mask: Vec<bool>| PseudoLabels {
            labels: labels.clone(),
            confidence: vec![1.0; 6],
            mask,
        };
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(6, 4, data.clone()).unwrap());
        let empty = target_ce(&mut t, x, &mk(vec![false; 6])).unwrap();
        assert_eq!(scalar(&t, empty), 0.0);

        let full = target_ce(&mut t, x, &mk(vec![true; 6])).unwrap();
        let all: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let sup = supervised_ce(&mut t, x, &all).unwrap();
        assert_eq!(scalar(&t, full), scalar(&t, sup.loss));

        let half = target_ce(&mut t, x, &mk(vec![true, false, true, false, true, false])).unwrap();
        let mut want = 0.0;
        for r in [0, 2, 4] {
            let row = &data[r * 4..r * 4 + 4];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[labels[r]];
        }
        assert!((scalar(&t, half) - want / 3.0).abs() < 1e-12);
    }

    fn proto(mean: Vec<f64>, var: f64) -> Option<DiagonalGaussian> {
        Some(DiagonalGaussian::isotropic(mean, var).unwrap())
    }

    fn anchor_vars(t: &mut Tape, mean: Vec<f64>, var: Vec<f64>, d: usize) -> (Var, Var) {
        let n = mean.len() / d;
        (
            t.leaf(Tensor::matrix(n, d, mean).unwrap()),
            t.leaf(Tensor::matrix(n, d, var).unwrap()),
        )
    }

    #[test]
    fn contrastive_closed_forms() {
        let mut rng = labeled(3, "contrast");
        // Single class: zero.
        let mut t = Tape::new();
        let (m, v) = anchor_vars(&mut t, vec![0.3, -0.2], vec![1.0, 1.0], 2);
        let labels = [Some(0)];
        let sets = [Anchors {
            mean: m,
            var: v,
            labels: &labels,
        }];
        let out = prob_contrastive(
            &mut t,
            &sets,
            &[proto(vec![1.0, 0.0], 0.5)],
            SimilarityKind::Elk,
            0.1,
            &mut rng,
        )
        .unwrap();
        assert_eq!(scalar(&t, out.loss), 0.0);

        // Equidistant anchor: log K for K = 19 identical prototypes.
        let protos: Vec<_> = (0..19).map(|_| proto(vec![0.5, 0.5], 0.7)).collect();
        let out = prob_contrastive(&mut t, &sets, &protos, SimilarityKind::Elk, 0.1, &mut rng).unwrap();
        assert!((scalar(&t, out.loss) - 19f64.ln()).abs() < 1e-10);

        // Two classes with κ⁺/τ − κ⁻/τ = 2: softplus(−2).
        let p0 = DiagonalGaussian::isotropic(vec![0.0, 0.0], 0.5).unwrap();
        let p1 = DiagonalGaussian::isotropic(vec![1.0, 0.0], 0.5).unwrap();
        let q = DiagonalGaussian::new(vec![0.2, 0.0], vec![0.5, 0.5]).unwrap();
        let gap = log_elk(&q, &p0).unwrap() - log_elk(&q, &p1).unwrap();
        let tau = gap / 2.0;
        let mut t = Tape::new();
        let (m, v) = anchor_vars(&mut t, q.mean().to_vec(), q.var().to_vec(), 2);
        let sets = [Anchors {
            mean: m,
            var: v,
            labels: &labels,
        }];
        let out = prob_contrastive(&mut t, &sets, &[Some(p0), Some(p1)], SimilarityKind::Elk, tau, &mut rng).unwrap();
        assert!((scalar(&t, out.loss) - softplus(-2.0)).abs() < 1e-12);
        assert!((scalar(&t, out.loss) - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn det_contrastive_closed_forms() {
        let mut rng = labeled(4, "det");
        let labels = [Some(0)];
        let mut t = Tape::new();
        let (m, v) = anchor_vars(&mut t, vec![0.6, 0.8], vec![1.0, 1.0], 2);
        let sets = [Anchors {
            mean: m,
            var: v,
            labels: &labels,
        }];
        let out = det_contrastive(&mut t, &sets, &[proto(vec![1.0, 0.0], 0.5)], 0.1, &mut rng).unwrap();
        assert_eq!(scalar(&t, out.loss), 0.0);

        let protos: Vec<_> = (0..19).map(|_| proto(vec![0.0, 3.0], 0.7)).collect();
        let out = det_contrastive(&mut t, &sets, &protos, 0.1, &mut rng).unwrap();
        assert!((scalar(&t, out.loss) - 19f64.ln()).abs() < 1e-10);

        let (a, b) = (vec![1.0, 0.0], vec![0.0, 1.0]);
        let gap = cosine(&[0.6, 0.8], &b).unwrap() - cosine(&[0.6, 0.8], &a).unwrap();
        let out = det_contrastive(&mut t, &sets, &[proto(b, 1.0), proto(a, 1.0)], gap / 2.0, &mut rng).unwrap();
        assert!((scalar(&t, out.loss) - softplus(-2.0)).abs() < 1e-12);
    }

    #[test]
    fn missing_prototypes_are_skipped_and_counted() {
        let mut rng = labeled(5, "skip");
        let mut t = Tape::new();
        let (m, v) = anchor_vars(&mut t, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![1.0; 6], 2);
        let labels = [Some(0), Some(2), None];
        let sets = [Anchors {
            mean: m,
            var: v,
            labels: &labels,
        }];
        let protos = [proto(vec![0.0, 1.0], 1.0), proto(vec![1.0, 0.0], 1.0), None];
        let out = prob_contrastive(&mut t, &sets, &protos, SimilarityKind::Elk, 0.1, &mut rng).unwrap();
        assert_eq!((out.anchors, out.skipped), (1, 1));
        assert!(scalar(&t, out.loss) > 0.0);
    }

    #[test]
    fn contrastive_decreases_as_positive_logit_grows() {
        let mut rng = labeled(6, "mono");
        let protos = [proto(vec![1.0, 0.0], 0.3), proto(vec![-1.0, 0.0], 0.3)];
        let labels = [Some(0)];
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            let x = -1.0 + 0.2 * step as f64;
            let mut t = Tape::new();
            let (m, v) = anchor_vars(&mut t, vec![x, 0.0], vec![0.4, 0.4], 2);
            let sets = [Anchors {
                mean: m,
                var: v,
                labels: &labels,
            }];
            let l = prob_contrastive(&mut t, &sets, &protos, SimilarityKind::Elk, 0.5, &mut rng).unwrap();
            let l = scalar(&t, l.loss);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn kl_reg_examples() {
        let mut t = Tape::new();
        let (m, v) = anchor_vars(&mut t, vec![0.0; 6], vec![1.0; 6], 3);
        let k = kl_reg(&mut t, m, v, &[true, true]).unwrap();
        assert_eq!(scalar(&t, k), 0.0);
        let (m, v) = anchor_vars(&mut t, vec![1.0], vec![1.0], 1);
        let k = kl_reg(&mut t, m, v, &[true]).unwrap();
        assert!((scalar(&t, k) - 0.5).abs() < 1e-15);

        let means = vec![0.5, -1.0, 2.0, 0.1, 0.0, 0.3];
        let vars = vec![0.2, 3.0, 1.0, 0.5, 1.5, 0.9];
        let (m, v) = anchor_vars(&mut t, means.clone(), vars.clone(), 2);
        let mask = [true, false, true];
        let k = kl_reg(&mut t, m, v, &mask).unwrap();
        let want = [0, 2]
            .iter()
            .map(|&r| {
                DiagonalGaussian::new(means[2 * r..2 * r + 2].to_vec(), vars[2 * r..2 * r + 2].to_vec())
                    .unwrap()
                    .kl_to_standard()
            })
            .sum::<f64>()
            / 2.0;
        assert!((scalar(&t, k) - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weighting() {
        let mut t = Tape::new();
        let parts: Vec<Var> = [1.0, 2.0, 3.0, 1e6]
            .iter()
            .map(|&v| t.leaf(Tensor::scalar(v)))
            .collect();
        let lp = LossParts {
            source: parts[0],
            target: Some(parts[1]),
            contrast: Some(parts[2]),
            kl: Some(parts[3]),
        };
        let w = LossWeights {
            lambda_t: 1.0,
            lambda_c: 1.0,
            lambda_kl: 1e-6,
        };
        let total = total_loss(&mut t, &lp, &w).unwrap();
        assert!((scalar(&t, total) - 7.0).abs() < 1e-12);
        let zero = LossWeights {
            lambda_t: 0.0,
            lambda_c: 0.0,
            lambda_kl: 0.0,
        };
        let total = total_loss(&mut t, &lp, &zero).unwrap();
        assert_eq!(total, parts[0]);
        let neg = LossWeights { lambda_t: -1.0, ..w };
        assert!(total_loss(&mut t, &lp, &neg).is_err());
    }

    #[test]
    fn every_similarity_kind_is_differentiable() {
        let mut rng = labeled(7, "kinds");
        let d = 3;
        let means = Tensor::matrix(4, d, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let vars = Tensor::matrix(4, d, (0..12).map(|_| rng.random_range(0.3..1.5)).collect()).unwrap();
        let protos = [
            proto(vec![0.5, -0.2, 0.1], 0.4),
            proto(vec![-0.3, 0.6, 0.2], 0.8),
            proto(vec![0.1, 0.1, -0.7], 0.6),
        ];
        let labels = [Some(0), Some(1), Some(2), Some(1)];
        for kind in [
            SimilarityKind::Elk,
            SimilarityKind::Bk,
            SimilarityKind::Ppk { rho: 1.5 },
            SimilarityKind::Kl,
            SimilarityKind::Wasserstein2,
            SimilarityKind::Cosine,
            SimilarityKind::McCosine { samples: 3 },
            SimilarityKind::JsMc { samples: 3 },
        ] {
            // Fixed draws per evaluation keep the MC kinds deterministic in θ.
            let r = grad_check(
                |t, p| {
                    let mut rng = labeled(8, "kinds-draws");
                    let sets = [Anchors {
                        mean: p[0],
                        var: p[1],
                        labels: &labels,
                    }];
                    Ok(prob_contrastive(t, &sets, &protos, kind, 0.5, &mut rng)?.loss)
                },
                &[means.clone(), vars.clone()],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{kind}: {r:?}");
        }
    }

    #[test]
    fn js_logits_match_the_mc_estimator_in_the_limit() {
        // With many draws the differentiable estimate approaches the
        // independent estimator from the similarity module.
        let mut rng = labeled(9, "js");
        let p = DiagonalGaussian::new(vec![0.3, -0.1], vec![0.5, 0.8]).unwrap();
        let q = DiagonalGaussian::new(vec![-0.4, 0.6], vec![0.7, 0.4]).unwrap();
        let mut t = Tape::new();
        let (m, v) = anchor_vars(&mut t, p.mean().to_vec(), p.var().to_vec(), 2);
        let protos = ProtoTable::new(&[Some(q.clone())]).unwrap();
        let l = js_logits(&mut t, m, v, &protos, 20000, &mut rng).unwrap();
        let est = crate::similarity::js_divergence_mc(&p, &q, 200_000, &mut rng).unwrap();
        let got = -t.value(l).item();
        assert!((got - est.value).abs() < 0.01, "{got} vs {}", est.value);
    }

    #[test]
    fn fused_js_matches_the_composed_tape_ops() {
        let mut rng = labeled(10, "js-fused");
        let (n, d, j) = (5, 3, 4);
        let mean: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..n * d).map(|_| rng.random_range(0.2..2.0)).collect();
        let protos =
            ProtoTable::new(&[proto(vec![0.5, -0.2, 0.1], 0.4), None, proto(vec![-0.3, 0.6, 0.2], 1.7)]).unwrap();
        let run = |fused: bool| {
            let mut t = Tape::new();
            let (m, v) = anchor_vars(&mut t, mean.clone(), var.clone(), d);
            let mut draws = labeled(11, "js-fused-draws");
            let l = if fused {
                js_logits(&mut t, m, v, &protos, j, &mut draws)
            } else {
                composed_js_logits(&mut t, m, v, &protos, j, &mut draws)
            }
            .unwrap();
            let w = t.constant(Tensor::matrix(n, 2, (0..2 * n).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap());
            let y = t.mul(l, w).unwrap();
            let total = t.sum(y).unwrap();
            let value = t.value(l).data().to_vec();
            let g = t.backward(total).unwrap();
            (
                value,
                g.get(m).unwrap().data().to_vec(),
                g.get(v).unwrap().data().to_vec(),
            )
        };
        let (a, b) = (run(true), run(false));
        for (x, y) in
            a.0.iter()
                .chain(&a.1)
                .chain(&a.2)
                .zip(b.0.iter().chain(&b.1).chain(&b.2))
        {
            assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}
