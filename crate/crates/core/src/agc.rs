//! Target crop selection: ambiguity-guided, class-balanced and random.
//!
//! Candidate crops are scored from a per-image label map in which
//! [`UNKNOWN`] marks pixels without a cached prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::prototypes::PrototypeBank;
use crate::synthdata::Rect;

/// Label-map value for pixels with no prediction yet.
pub const UNKNOWN: u8 = u8::MAX;

/// How a prototype's variance vector becomes one ambiguity number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityReduction {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ambiguity {
    /// Softmax weights, one per class.
    pub weights: Vec<f64>,
    /// The bank held no prototype; weights are uniform.
    pub empty_bank: bool,
}

/// Per-class scalar variance, `None` for classes without a prototype.
pub fn scalar_ambiguity(bank: &PrototypeBank, reduction: AmbiguityReduction) -> Vec<Option<f64>> {
    (0..bank.classes())
        .map(|c| {
            bank.get(c).map(|p| match reduction {
                AmbiguityReduction::Mean => p.mean_var(),
                AmbiguityReduction::Max => p.max_var(),
            })
        })
        .collect()
}

/// `softmax(s / tau)`; missing classes take the smallest observed scalar.
pub fn ambiguity_from_scalars(scalars: &[Option<f64>], tau: f64) -> Result<Ambiguity> {
    contract!(tau > 0.0, "ambiguity temperature must be positive, got {tau}");
    contract!(!scalars.is_empty(), "ambiguity needs at least one class");
    let k = scalars.len();
    let Some(floor) = scalars.iter().flatten().copied().reduce(f64::min) else {
        log::warn!("prototype bank is empty; using uniform class ambiguity");
        return Ok(Ambiguity {
            weights: vec![1.0 / k as f64; k],
            empty_bank: true,
        });
    };
    let z: Vec<f64> = scalars.iter().map(|s| s.unwrap_or(floor) / tau).collect();
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(Ambiguity {
        weights: e.into_iter().map(|v| v / total).collect(),
        empty_bank: false,
    })
}

pub fn class_ambiguity(bank: &PrototypeBank, tau: f64, reduction: AmbiguityReduction) -> Result<Ambiguity> {
    ambiguity_from_scalars(&scalar_ambiguity(bank, reduction), tau)
}

/// Membership mask of the `k` largest weights; ties go to the lower class id.
pub fn top_k_set(weights: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut set = vec![false; weights.len()];
    for &c in order.iter().take(k) {
        set[c] = true;
    }
    set
}

/// Pixel count per class over the known pixels of `rect`.
pub fn class_histogram(labels: &[u8], width: usize, rect: Rect, classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for i in rect.indices(width) {
        let l = labels[i];
        if l != UNKNOWN && (l as usize) < classes {
            h[l as usize] += 1;
        }
    }
    h
}

/// `Σ_i 1[i ∈ top] · a_i · n_i`.
///
/// Counts of classes with identical weights are summed as integers before
/// the multiply, so equal-weight banks rank crops by exact pixel count.
pub fn score_crop(histogram: &[usize], weights: &[f64], top: &[bool]) -> f64 {
    let mut groups: Vec<(f64, usize)> = Vec::new();
    for ((&n, &a), _) in histogram.iter().zip(weights).zip(top).filter(|(_, &t)| t) {
        match groups.iter_mut().find(|(w, _)| w.to_bits() == a.to_bits()) {
            Some((_, count)) => *count += n,
            None => groups.push((a, n)),
        }
    }
    groups.iter().map(|&(a, n)| a * n as f64).sum()
}

/// The chosen crop among the candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub rect: Rect,
    pub index: usize,
    pub candidates: Vec<Rect>,
    pub scores: Vec<f64>,
}

/// Label map of one image.
#[derive(Debug, Clone, Copy)]
pub struct LabelMap<'a> {
    pub labels: &'a [u8],
    pub height: usize,
    pub width: usize,
}

fn draw_candidates<R: Rng + ?Sized>(map: &LabelMap<'_>, count: usize, size: usize, rng: &mut R) -> Result<Vec<Rect>> {
    contract!(count >= 1, "candidate count must be at least 1");
    contract!(
        map.labels.len() == map.height * map.width,
        "label map holds {} values for a {}×{} image",
        map.labels.len(),
        map.height,
        map.width
    );
    (0..count)
        .map(|_| Rect::random(rng, map.height, map.width, size))
        .collect()
}

/// First index of the largest score.
fn first_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Draws `count` random `size × size` crops and keeps the highest-scoring
/// one, the earliest draw winning ties.
pub fn agc_select<R: Rng + ?Sized>(
    map: &LabelMap<'_>,
    weights: &[f64],
    top_k: usize,
    count: usize,
    size: usize,
    rng: &mut R,
) -> Result<Selection> {
    let candidates = draw_candidates(map, count, size, rng)?;
    let top = top_k_set(weights, top_k);
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&r| score_crop(&class_histogram(map.labels, map.width, r, weights.len()), weights, &top))
        .collect();
    let index = first_argmax(&scores);
    Ok(Selection {
        rect: candidates[index],
        index,
        candidates,
        scores,
    })
}

/// Class-balanced choice: the first candidate whose largest class share is
/// below `threshold`, otherwise the candidate with the smallest largest
/// share. Crops with no known pixel count as share 1.
pub fn cbc_select<R: Rng + ?Sized>(
    map: &LabelMap<'_>,
    classes: usize,
    threshold: f64,
    count: usize,
    size: usize,
    rng: &mut R,
) -> Result<Selection> {
    let candidates = draw_candidates(map, count, size, rng)?;
    let shares: Vec<f64> = candidates
        .iter()
        .map(|&r| {
            let h = class_histogram(map.labels, map.width, r, classes);
            let total: usize = h.iter().sum();
            if total == 0 {
                1.0
            } else {
                *h.iter().max().expect("classes >= 1") as f64 / total as f64
            }
        })
        .collect();
    let index = shares.iter().position(|&s| s < threshold).unwrap_or_else(|| {
        let neg: Vec<f64> = shares.iter().map(|s| -s).collect();
        first_argmax(&neg)
    });
    Ok(Selection {
        rect: candidates[index],
        index,
        candidates,
        scores: shares.iter().map(|s| -s).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::DiagonalGaussian;
    use crate::rng::labeled;

    fn bank_with_vars(vars: &[Option<f64>]) -> PrototypeBank {
        let mut members = Vec::new();
        for v in vars {
            members.push(match v {
                Some(v) => vec![DiagonalGaussian::isotropic(vec![0.0, 0.0], *v).unwrap()],
                None => vec![],
            });
        }
        let mut bank = PrototypeBank::new(vars.len());
        bank.update_from_members(&members, 0.5).unwrap();
        bank
    }

    #[test]
    fn ambiguity_examples() {
        let a = class_ambiguity(&bank_with_vars(&[Some(0.7); 4]), 1.0, AmbiguityReduction::Mean).unwrap();
        assert!(a.weights.iter().all(|w| (w - 0.25).abs() < 1e-15));

        let a = class_ambiguity(&bank_with_vars(&[Some(2.0), Some(1.0)]), 1.0, AmbiguityReduction::Mean).unwrap();
        assert!((a.weights[0] - 0.7311).abs() < 1e-4 && (a.weights[1] - 0.2689).abs() < 1e-4);

        let a = class_ambiguity(&bank_with_vars(&[Some(2.0), Some(1.0)]), 1e12, AmbiguityReduction::Mean).unwrap();
        assert!((a.weights[0] - 0.5).abs() < 1e-9);

        let a = class_ambiguity(&PrototypeBank::new(3), 1.0, AmbiguityReduction::Mean).unwrap();
        assert!(a.empty_bank);
        assert_eq!(a.weights, vec![1.0 / 3.0; 3]);

        // A missing class takes the smallest observed scalar.
        let a = class_ambiguity(
            &bank_with_vars(&[Some(3.0), None, Some(1.0)]),
            1.0,
            AmbiguityReduction::Mean,
        )
        .unwrap();
        assert_eq!(a.weights[1], a.weights[2]);
        assert!(class_ambiguity(&PrototypeBank::new(2), 0.0, AmbiguityReduction::Mean).is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_ids() {
        assert_eq!(top_k_set(&[0.1, 0.4, 0.1, 0.4], 2), vec![false, true, false, true]);
        assert_eq!(top_k_set(&[0.25; 4], 2), vec![true, true, false, false]);
        assert_eq!(top_k_set(&[0.2, 0.8], 5), vec![true, true]);
    }

    #[test]
    fn score_examples() {
        let w = vec![0.25; 4];
        let all = vec![true; 4];
        assert_eq!(score_crop(&[10, 2, 0, 4], &w, &all), 16.0 / 4.0);
        assert_eq!(score_crop(&[0, 0, 9, 9], &w, &[true, true, false, false]), 0.0);
        // Hand-built histograms against direct evaluation.
        let w = vec![0.5, 0.3, 0.2];
        let top = top_k_set(&w, 2);
        let hists = [[4, 1, 10], [0, 6, 2], [3, 3, 3]];
        let want = [0.5 * 4.0 + 0.3 * 1.0, 0.3 * 6.0, 0.5 * 3.0 + 0.3 * 3.0];
        for (h, s) in hists.iter().zip(want) {
            assert!((score_crop(h, &w, &top) - s).abs() < 1e-15);
        }
    }

    fn striped_map(h: usize, w: usize) -> Vec<u8> {
        (0..h * w).map(|i| ((i % w) / 3 % 5) as u8).collect()
    }

    #[test]
    fn single_candidate_and_determinism() {
        let labels = striped_map(20, 30);
        let map = LabelMap {
            labels: &labels,
            height: 20,
            width: 30,
        };
        let w = vec![0.2; 5];
        let mut r1 = labeled(1, "agc");
        let mut r2 = labeled(1, "agc");
        let mut r3 = labeled(1, "agc");
        let s1 = agc_select(&map, &w, 2, 1, 8, &mut r1).unwrap();
        let first = Rect::random(&mut r2, 20, 30, 8).unwrap();
        assert_eq!((s1.index, s1.rect), (0, first));
        let a = agc_select(&map, &w, 2, 10, 8, &mut r1).unwrap();
        let b = {
            let _ = agc_select(&map, &w, 2, 1, 8, &mut r3).unwrap();
            agc_select(&map, &w, 2, 10, 8, &mut r3).unwrap()
        };
        assert_eq!(a, b);
        assert!(agc_select(&map, &w, 2, 3, 21, &mut r1).is_err());
    }

    #[test]
    fn constant_ambiguity_reduces_to_top_k_pixel_count() {
        let bank = bank_with_vars(&[Some(0.4); 5]);
        let amb = class_ambiguity(&bank, 1.0, AmbiguityReduction::Mean).unwrap();
        let top = top_k_set(&amb.weights, 2);
        for seed in 0..20 {
            let mut g = labeled(seed, "map");
            let labels: Vec<u8> = (0..24 * 24).map(|_| g.random_range(0..5u8)).collect();
            let map = LabelMap {
                labels: &labels,
                height: 24,
                width: 24,
            };
            let mut rng = labeled(seed, "crops");
            let sel = agc_select(&map, &amb.weights, 2, 10, 8, &mut rng).unwrap();
            let counts: Vec<usize> = sel
                .candidates
                .iter()
                .map(|&r| r.indices(24).filter(|&i| top[labels[i] as usize]).count())
                .collect();
            let best = counts
                .iter()
                .enumerate()
                .fold(0, |b, (i, &c)| if c > counts[b] { i } else { b });
            assert_eq!(sel.index, best);
        }
    }

    #[test]
    fn unknown_pixels_do_not_count() {
        let labels = vec![UNKNOWN; 100];
        let map = LabelMap {
            labels: &labels,
            height: 10,
            width: 10,
        };
        let mut rng = labeled(2, "unk");
        let sel = agc_select(&map, &[0.5, 0.5], 2, 5, 4, &mut rng).unwrap();
        assert_eq!(sel.index, 0);
        assert!(sel.scores.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn cbc_prefers_balanced_crops() {
        // Left half class 0, right half alternating 1/2.
        let (h, w) = (16, 32);
        let labels: Vec<u8> = (0..h * w)
            .map(|i| if i % w < 16 { 0 } else { 1 + (i % 2) as u8 })
            .collect();
        let map = LabelMap {
            labels: &labels,
            height: h,
            width: w,
        };
        let mut rng = labeled(3, "cbc");
        let sel = cbc_select(&map, 3, 0.75, 10, 8, &mut rng).unwrap();
        let hist = class_histogram(&labels, w, sel.rect, 3);
        let total: usize = hist.iter().sum();
        let share = *hist.iter().max().unwrap() as f64 / total as f64;
        let best = sel.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(share < 0.75 || (-share - best).abs() < 1e-15);
    }
}
