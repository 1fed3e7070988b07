//! Diagonal multivariate Gaussians and their closed-form algebra.
//!
//! A [`DiagonalGaussian`] is the unit of all probabilistic reasoning in the
//! crate: pixel embeddings, composed class prototypes and the standard-normal
//! prior are all values of this type. The natural-parameter view
//! ([`CanonicalGaussian`]) makes products of densities a sum of precisions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Variances are clamped into this closed interval at construction.
pub const MIN_VAR: f64 = 1e-8;
pub const MAX_VAR: f64 = 1e8;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian `N(mean, diag(var))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagonalGaussian {
    /// Validates and clamps. Non-finite entries, negative variances, empty or
    /// mismatched vectors are rejected.
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        contract!(!mean.is_empty(), "gaussian dimension must be at least 1");
        contract!(
            mean.len() == var.len(),
            "mean has length {} but var has length {}",
            mean.len(),
            var.len()
        );
        contract!(
            mean.iter().all(|m| m.is_finite()),
            "gaussian mean contains a non-finite entry"
        );
        contract!(
            var.iter().all(|v| v.is_finite() && *v >= 0.0),
            "gaussian variance must be finite and non-negative"
        );
        let var = var.into_iter().map(|v| v.clamp(MIN_VAR, MAX_VAR)).collect();
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Same variance in every coordinate.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![var; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// Mean of the variance vector; the scalar ambiguity of a prototype.
    pub fn mean_var(&self) -> f64 {
        self.var.iter().sum::<f64>() / self.var.len() as f64
    }

    pub fn max_var(&self) -> f64 {
        self.var.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn to_canonical(&self) -> CanonicalGaussian {
        let precision: Vec<f64> = self.var.iter().map(|v| 1.0 / v).collect();
        let shift: Vec<f64> = self.mean.iter().zip(&precision).map(|(m, p)| m * p).collect();
        CanonicalGaussian::from_parts(precision, shift)
    }

    /// Log density. Evaluated through the canonical form
    /// `zeta + eta.z - z.Lambda.z / 2`.
    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        contract!(
            z.len() == self.dim(),
            "log_pdf point has length {} but gaussian has dimension {}",
            z.len(),
            self.dim()
        );
        Ok(self.to_canonical().log_pdf_unchecked(z))
    }

    /// KL(self || N(0, I)).
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| m * m + v - 1.0 - v.ln())
            .sum::<f64>()
    }

    /// Writes one reparameterized draw `mean + sqrt(var) * eps` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for ((o, m), v) in out.iter_mut().zip(&self.mean).zip(&self.var) {
            let eps: f64 = rng.sample(StandardNormal);
            *o = m + v.sqrt() * eps;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        contract!(n >= 1, "sample count must be at least 1");
        Ok((0..n)
            .map(|_| {
                let mut z = vec![0.0; self.dim()];
                self.sample_into(rng, &mut z);
                z
            })
            .collect())
    }
}

/// Natural parameters of a diagonal Gaussian: precision `Λ = 1/var`,
/// shift `η = μ/var` and log-partition `ζ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalGaussian {
    pub precision: Vec<f64>,
    pub shift: Vec<f64>,
    pub log_partition: f64,
}

impl CanonicalGaussian {
    pub fn from_parts(precision: Vec<f64>, shift: Vec<f64>) -> Self {
        let d = precision.len() as f64;
        let log_det: f64 = precision.iter().map(|p| p.ln()).sum();
        let quad: f64 = shift.iter().zip(&precision).map(|(e, p)| e * e / p).sum();
        let log_partition = -0.5 * (d * LN_2PI - log_det + quad);
        Self {
            precision,
            shift,
            log_partition,
        }
    }

    pub fn to_moment(&self) -> Result<DiagonalGaussian> {
        contract!(
            self.precision.iter().all(|p| *p > 0.0 && p.is_finite()),
            "precision entries must be strictly positive"
        );
        let var: Vec<f64> = self.precision.iter().map(|p| 1.0 / p).collect();
        let mean = self.shift.iter().zip(&var).map(|(e, v)| e * v).collect();
        DiagonalGaussian::new(mean, var)
    }

    fn log_pdf_unchecked(&self, z: &[f64]) -> f64 {
        let mut acc = self.log_partition;
        for ((zi, e), p) in z.iter().zip(&self.shift).zip(&self.precision) {
            acc += e * zi - 0.5 * p * zi * zi;
        }
        acc
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Product-of-experts composition: precisions add, and the mean is the
/// precision-weighted average of member means.
pub fn compose_product(members: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    compose_product_iter(members.iter())
}

/// [`compose_product`] over any iterator of member references.
pub fn compose_product_iter<'a, I>(members: I) -> Result<DiagonalGaussian>
where
    I: IntoIterator<Item = &'a DiagonalGaussian>,
{
    let mut iter = members.into_iter();
    let first = match iter.next() {
        Some(g) => g,
        None => {
            return Err(crate::error::Error::Contract(
                "compose_product needs at least one member".into(),
            ))
        }
    };
    let d = first.dim();
    let mut precision = vec![CompensatedSum::default(); d];
    let mut shift = vec![CompensatedSum::default(); d];
    for g in std::iter::once(first).chain(iter) {
        contract!(
            g.dim() == d,
            "compose_product member has dimension {} but expected {}",
            g.dim(),
            d
        );
        for j in 0..d {
            let p = 1.0 / g.var[j];
            precision[j].add(p);
            shift[j].add(g.mean[j] * p);
        }
    }
    let mut mean = Vec::with_capacity(d);
    let mut var = Vec::with_capacity(d);
    for j in 0..d {
        let p = precision[j].value();
        mean.push(shift[j].value() / p);
        var.push(1.0 / p);
    }
    DiagonalGaussian::new(mean, var)
}

/// `beta * old + (1 - beta) * new`, applied to mean and variance alike.
pub fn ema_blend(old: &DiagonalGaussian, new: &DiagonalGaussian, beta: f64) -> Result<DiagonalGaussian> {
    contract!((0.0..=1.0).contains(&beta), "ema momentum {beta} outside [0, 1]");
    contract!(
        old.dim() == new.dim(),
        "ema_blend dimension mismatch: {} vs {}",
        old.dim(),
        new.dim()
    );
    let blend =
        |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| beta * x + (1.0 - beta) * y).collect() };
    DiagonalGaussian::new(blend(&old.mean, &new.mean), blend(&old.var, &new.var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::labeled;
    use approx::assert_relative_eq;

    fn g1(m: f64, v: f64) -> DiagonalGaussian {
        DiagonalGaussian::new(vec![m], vec![v]).unwrap()
    }

    fn random_gaussian(rng: &mut impl Rng, d: usize) -> DiagonalGaussian {
        let mean = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let var = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        DiagonalGaussian::new(mean, var).unwrap()
    }

    // Moment-form density, coded independently of the canonical path.
    fn moment_log_pdf(g: &DiagonalGaussian, z: &[f64]) -> f64 {
        -0.5 * g
            .mean()
            .iter()
            .zip(g.var())
            .zip(z)
            .map(|((m, v), zi)| (2.0 * std::f64::consts::PI * v).ln() + (zi - m).powi(2) / v)
            .sum::<f64>()
    }

    #[test]
    fn construction_rejects_bad_input_and_clamps() {
        assert!(DiagonalGaussian::new(vec![], vec![]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![1.0, 1.0]).is_err());
        assert!(DiagonalGaussian::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0], vec![-1.0]).is_err());
        let g = DiagonalGaussian::new(vec![0.0, 0.0], vec![1e-20, 1e20]).unwrap();
        assert_eq!(g.var(), &[MIN_VAR, MAX_VAR]);
    }

    #[test]
    fn log_pdf_standard_normal() {
        let g = DiagonalGaussian::standard(1);
        assert_relative_eq!(g.log_pdf(&[0.0]).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-12);
        assert_relative_eq!(g.log_pdf(&[1.0]).unwrap(), -1.418_938_533_204_672_7, epsilon = 1e-12);
        assert!(g.log_pdf(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn log_pdf_matches_moment_form() {
        let mut rng = labeled(11, "log_pdf");
        for _ in 0..1000 {
            let g = random_gaussian(&mut rng, 4);
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = g.log_pdf(&z).unwrap();
            let b = moment_log_pdf(&g, &z);
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn canonical_roundtrip() {
        let mut rng = labeled(12, "canon");
        for _ in 0..200 {
            let g = random_gaussian(&mut rng, 5);
            let back = g.to_canonical().to_moment().unwrap();
            for (a, b) in g.mean().iter().zip(back.mean()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300) + 1e-15);
            }
            for (a, b) in g.var().iter().zip(back.var()) {
                assert_relative_eq!(*a, *b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn compose_examples() {
        let c = compose_product(&[g1(0.0, 1.0), g1(2.0, 1.0)]).unwrap();
        assert_relative_eq!(c.mean()[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(c.var()[0], 0.5, epsilon = 1e-15);

        let g = g1(0.3, 2.5);
        assert_eq!(compose_product(std::slice::from_ref(&g)).unwrap(), g);
        assert!(compose_product(&[]).is_err());
        assert!(compose_product(&[g1(0.0, 1.0), DiagonalGaussian::standard(2)]).is_err());
    }

    #[test]
    fn compose_equals_pairwise_fold() {
        let mut rng = labeled(13, "fold");
        for _ in 0..50 {
            let members: Vec<_> = (0..3).map(|_| random_gaussian(&mut rng, 3)).collect();
            let all = compose_product(&members).unwrap();
            let fold = members[1..]
                .iter()
                .fold(members[0].clone(), |acc, m| compose_product(&[acc, m.clone()]).unwrap());
            for j in 0..3 {
                assert_relative_eq!(all.mean()[j], fold.mean()[j], max_relative = 1e-10, epsilon = 1e-12);
                assert_relative_eq!(all.var()[j], fold.var()[j], max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn ema_examples() {
        let old = g1(1.0, 2.0);
        let new = g1(0.0, 1.0);
        assert_eq!(ema_blend(&old, &new, 1.0).unwrap(), old);
        assert_eq!(ema_blend(&old, &new, 0.0).unwrap(), new);
        let b = ema_blend(&old, &new, 0.999).unwrap();
        assert_relative_eq!(b.mean()[0], 0.999, epsilon = 1e-15);
        assert_relative_eq!(b.var()[0], 1.999, epsilon = 1e-14);
        assert!(ema_blend(&old, &new, 1.5).is_err());
        assert!(ema_blend(&old, &new, -0.1).is_err());
        assert!(ema_blend(&old, &DiagonalGaussian::standard(2), 0.5).is_err());
    }

    #[test]
    fn kl_to_standard_examples() {
        assert_eq!(DiagonalGaussian::standard(5).kl_to_standard(), 0.0);
        assert_relative_eq!(g1(1.0, 1.0).kl_to_standard(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn kl_to_standard_matches_monte_carlo() {
        let g = DiagonalGaussian::new(vec![0.7, -0.4], vec![0.6, 1.8]).unwrap();
        let prior = DiagonalGaussian::standard(2);
        let mut rng = labeled(14, "kl-mc");
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        let mut z = [0.0; 2];
        for _ in 0..n {
            g.sample_into(&mut rng, &mut z);
            let x = moment_log_pdf(&g, &z) - moment_log_pdf(&prior, &z);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(
            (mean - g.kl_to_standard()).abs() <= 3.0 * se,
            "{mean} vs {}",
            g.kl_to_standard()
        );
    }

    #[test]
    fn sampling_moments_and_determinism() {
        let n = 1_000_000;
        let mut rng = labeled(15, "moments");
        let std = DiagonalGaussian::standard(1);
        let mut z = [0.0];
        let mut s = 0.0;
        for _ in 0..n {
            std.sample_into(&mut rng, &mut z);
            s += z[0];
        }
        assert!((s / n as f64).abs() < 0.005);

        let wide = g1(0.0, 4.0);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            wide.sample_into(&mut rng, &mut z);
            s += z[0];
            s2 += z[0] * z[0];
        }
        let m = s / n as f64;
        let v = s2 / n as f64 - m * m;
        assert!((v - 4.0).abs() / 4.0 < 0.02, "sample variance {v}");

        let a = wide.sample(10, &mut labeled(1, "det")).unwrap();
        let b = wide.sample(10, &mut labeled(1, "det")).unwrap();
        assert_eq!(a, b);
        assert!(wide.sample(0, &mut rng).is_err());
    }
}
