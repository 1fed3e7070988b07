//! Distribution-to-distribution similarity measures.
//!
//! The probability product kernel `∫ p(z)^ρ q(z)^ρ dz` has a closed form for
//! diagonal Gaussians. `ρ = 1` gives the expected likelihood kernel (ELK),
//! `ρ = ½` the Bhattacharyya kernel (BK). Kernels are only ever exposed as
//! logarithms; exponentiation happens inside a stabilized softmax downstream.
//!
//! Divergences (KL, JS, 2-Wasserstein), the sampled cosine estimator and the
//! deterministic cosine are provided for the measurement comparison.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::gaussian::{DiagonalGaussian, LN_2PI};

/// Which measure drives the contrastive logits.
///
/// Written in configs as `elk`, `bk`, `ppk:<rho>`, `kl`, `js_mc:<samples>`,
/// `wasserstein2`, `cosine` or `mc_cosine:<samples>`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SimilarityKind {
    #[default]
    Elk,
    Bk,
    Ppk {
        rho: f64,
    },
    Kl,
    JsMc {
        samples: usize,
    },
    Wasserstein2,
    Cosine,
    McCosine {
        samples: usize,
    },
}

impl SimilarityKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SimilarityKind::Ppk { rho } => {
                contract!(rho > 0.0 && rho.is_finite(), "ppk rho must be > 0, got {rho}")
            }
            SimilarityKind::JsMc { samples } | SimilarityKind::McCosine { samples } => {
                contract!(samples >= 1, "sample count must be at least 1")
            }
            _ => {}
        }
        Ok(())
    }

    /// Whether the measure uses the embedding variances at all.
    pub fn is_probabilistic(&self) -> bool {
        !matches!(self, SimilarityKind::Cosine)
    }

    /// Similarity score, larger meaning closer. Divergences are negated.
    pub fn score<R: Rng + ?Sized>(&self, p: &DiagonalGaussian, q: &DiagonalGaussian, rng: &mut R) -> Result<f64> {
        self.validate()?;
        match *self {
            SimilarityKind::Elk => log_elk(p, q),
            SimilarityKind::Bk => log_bk(p, q),
            SimilarityKind::Ppk { rho } => log_ppk(p, q, rho),
            SimilarityKind::Kl => kl_divergence(p, q).map(|v| -v),
            SimilarityKind::JsMc { samples } => js_divergence_mc(p, q, samples, rng).map(|e| -e.value),
            SimilarityKind::Wasserstein2 => wasserstein2(p, q).map(|v| -v),
            SimilarityKind::Cosine => cosine(p.mean(), q.mean()),
            SimilarityKind::McCosine { samples } => mc_similarity(p, q, samples, rng).map(|e| e.value),
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimilarityKind::Elk => write!(f, "elk"),
            SimilarityKind::Bk => write!(f, "bk"),
            SimilarityKind::Ppk { rho } => write!(f, "ppk:{rho}"),
            SimilarityKind::Kl => write!(f, "kl"),
            SimilarityKind::JsMc { samples } => write!(f, "js_mc:{samples}"),
            SimilarityKind::Wasserstein2 => write!(f, "wasserstein2"),
            SimilarityKind::Cosine => write!(f, "cosine"),
            SimilarityKind::McCosine { samples } => write!(f, "mc_cosine:{samples}"),
        }
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let bad = || Error::Config(format!("invalid similarity `{s}`"));
        let count = |a: Option<&str>| -> Result<usize> { a.ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let kind = match (name, arg) {
            ("elk", None) => SimilarityKind::Elk,
            ("bk", None) => SimilarityKind::Bk,
            ("ppk", a) => SimilarityKind::Ppk {
                rho: a.ok_or_else(bad)?.parse().map_err(|_| bad())?,
            },
            ("kl", None) => SimilarityKind::Kl,
            ("js_mc", a) => SimilarityKind::JsMc { samples: count(a)? },
            ("wasserstein2", None) => SimilarityKind::Wasserstein2,
            ("cosine", None) => SimilarityKind::Cosine,
            ("mc_cosine", a) => SimilarityKind::McCosine { samples: count(a)? },
            _ => return Err(bad()),
        };
        kind.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(kind)
    }
}

impl TryFrom<String> for SimilarityKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SimilarityKind> for String {
    fn from(k: SimilarityKind) -> String {
        k.to_string()
    }
}

fn same_dim(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<()> {
    contract!(
        p.dim() == q.dim(),
        "distributions have dimensions {} and {}",
        p.dim(),
        q.dim()
    );
    Ok(())
}

/// `log ∫ p q = log N(μ_p; μ_q, Σ_p + Σ_q)`.
pub fn log_elk(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    log_ppk(p, q, 1.0)
}

/// Log Bhattacharyya coefficient `log ∫ sqrt(p q)`; never positive.
pub fn log_bk(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    same_dim(p, q)?;
    let mut acc = 0.0;
    for j in 0..p.dim() {
        let (vp, vq) = (p.var()[j], q.var()[j]);
        let s = vp + vq;
        let dm = p.mean()[j] - q.mean()[j];
        // log(s / (2 sqrt(vp vq))) >= 0 by AM-GM; computed from logs so the
        // product vp*vq cannot under/overflow at the clamp limits.
        let log_ratio = s.ln() - std::f64::consts::LN_2 - 0.5 * (vp.ln() + vq.ln());
        acc += -0.25 * dm * dm / s - 0.5 * log_ratio.max(0.0);
    }
    Ok(acc)
}

/// Log probability product kernel `log ∫ p^ρ q^ρ` for diagonal Gaussians.
///
/// Per coordinate:
/// `(1-2ρ)/2 log 2π - ½ log ρ + (1-ρ)/2 (log v_p + log v_q)
///  - ½ log(v_p + v_q) - ρ/2 Δμ² / (v_p + v_q)`.
pub fn log_ppk(p: &DiagonalGaussian, q: &DiagonalGaussian, rho: f64) -> Result<f64> {
    contract!(rho > 0.0 && rho.is_finite(), "ppk rho must be > 0, got {rho}");
    same_dim(p, q)?;
    let d = p.dim() as f64;
    let mut acc = d * (0.5 * (1.0 - 2.0 * rho) * LN_2PI - 0.5 * rho.ln());
    for j in 0..p.dim() {
        let (vp, vq) = (p.var()[j], q.var()[j]);
        let s = vp + vq;
        let dm = p.mean()[j] - q.mean()[j];
        if rho != 1.0 {
            acc += 0.5 * (1.0 - rho) * (vp.ln() + vq.ln());
        }
        acc += -0.5 * s.ln() - 0.5 * rho * dm * dm / s;
    }
    Ok(acc)
}

/// KL(p || q) in closed form.
pub fn kl_divergence(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    same_dim(p, q)?;
    let mut acc = 0.0;
    for j in 0..p.dim() {
        let (vp, vq) = (p.var()[j], q.var()[j]);
        let dm = p.mean()[j] - q.mean()[j];
        acc += vq.ln() - vp.ln() + (vp + dm * dm) / vq - 1.0;
    }
    Ok(0.5 * acc)
}

/// Closed-form 2-Wasserstein distance between diagonal Gaussians.
pub fn wasserstein2(p: &DiagonalGaussian, q: &DiagonalGaussian) -> Result<f64> {
    same_dim(p, q)?;
    let mut acc = 0.0;
    for j in 0..p.dim() {
        let dm = p.mean()[j] - q.mean()[j];
        let ds = p.var()[j].sqrt() - q.var()[j].sqrt();
        acc += dm * dm + ds * ds;
    }
    Ok(acc.sqrt())
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Default)]
pub(crate) struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub(crate) fn estimate(&self) -> McEstimate {
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        McEstimate {
            value: mean,
            std_error: (var / n).sqrt(),
        }
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Jensen-Shannon divergence against the mixture `m = (p + q) / 2`,
/// estimated with `samples` draws from each of `p` and `q`.
pub fn js_divergence_mc<R: Rng + ?Sized>(
    p: &DiagonalGaussian,
    q: &DiagonalGaussian,
    samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    contract!(samples >= 1, "js sample count must be at least 1");
    same_dim(p, q)?;
    let (cp, cq) = (p.to_canonical(), q.to_canonical());
    let mut z = vec![0.0; p.dim()];
    let mut from_p = Moments::default();
    let mut from_q = Moments::default();
    for _ in 0..samples {
        p.sample_into(rng, &mut z);
        let (lp, lq) = (canonical_log_pdf(&cp, &z), canonical_log_pdf(&cq, &z));
        from_p.push(lp - (log_add_exp(lp, lq) - std::f64::consts::LN_2));
        q.sample_into(rng, &mut z);
        let (lp, lq) = (canonical_log_pdf(&cp, &z), canonical_log_pdf(&cq, &z));
        from_q.push(lq - (log_add_exp(lp, lq) - std::f64::consts::LN_2));
    }
    let (a, b) = (from_p.estimate(), from_q.estimate());
    Ok(McEstimate {
        value: 0.5 * (a.value + b.value),
        std_error: 0.5 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt(),
    })
}

fn canonical_log_pdf(c: &crate::gaussian::CanonicalGaussian, z: &[f64]) -> f64 {
    let mut acc = c.log_partition;
    for ((zi, e), p) in z.iter().zip(&c.shift).zip(&c.precision) {
        acc += e * zi - 0.5 * p * zi * zi;
    }
    acc
}

/// Result of the sampled cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McCosine {
    pub value: f64,
    /// Pairwise terms formed; always `samples²`.
    pub pair_terms: usize,
    /// Pairs dropped because a draw had zero norm.
    pub zero_norm_excluded: usize,
}

/// Average cosine over all `J × J` pairs of draws from `p` and `q`.
pub fn mc_similarity<R: Rng + ?Sized>(
    p: &DiagonalGaussian,
    q: &DiagonalGaussian,
    samples: usize,
    rng: &mut R,
) -> Result<McCosine> {
    contract!(samples >= 1, "mc sample count must be at least 1");
    same_dim(p, q)?;
    let draw = |g: &DiagonalGaussian, rng: &mut R| -> Vec<Option<Vec<f64>>> {
        (0..samples)
            .map(|_| {
                let mut z = vec![0.0; g.dim()];
                g.sample_into(rng, &mut z);
                let n = z.iter().map(|x| x * x).sum::<f64>().sqrt();
                (n > 0.0).then(|| z.iter().map(|x| x / n).collect())
            })
            .collect()
    };
    let zp = draw(p, rng);
    let zq = draw(q, rng);
    let mut pair_terms = 0;
    let mut excluded = 0;
    let mut sum = 0.0;
    for a in &zp {
        for b in &zq {
            pair_terms += 1;
            match (a, b) {
                (Some(a), Some(b)) => sum += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(),
                _ => excluded += 1,
            }
        }
    }
    let kept = pair_terms - excluded;
    if kept == 0 {
        return Err(Error::Numeric("every sampled vector had zero norm".into()));
    }
    Ok(McCosine {
        value: sum / kept as f64,
        pair_terms,
        zero_norm_excluded: excluded,
    })
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    contract!(
        u.len() == v.len(),
        "cosine of vectors with lengths {} and {}",
        u.len(),
        v.len()
    );
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    contract!(nu > 0.0 && nv > 0.0, "cosine of a zero-norm vector");
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}
