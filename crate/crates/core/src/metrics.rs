//! Segmentation metrics and embedding diagnostics.

use std::io::Write;

use crate::diff::kernels::softmax_rows;
use crate::error::{contract, Result};
use crate::model::Embeddings;

/// K×K counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        contract!(
            truth < self.classes && pred < self.classes,
            "pair ({truth}, {pred}) outside {} classes",
            self.classes
        );
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn accumulate(&mut self, truth: &[u8], pred: &[usize]) -> Result<()> {
        contract!(
            truth.len() == pred.len(),
            "{} labels vs {} predictions",
            truth.len(),
            pred.len()
        );
        for (&t, &p) in truth.iter().zip(pred) {
            self.add(t as usize, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        contract!(other.classes == self.classes, "merging matrices of different sizes");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    contract!(cm.total() > 0, "confusion matrix is empty");
    let k = cm.classes;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c);
        let row: u64 = (0..k).map(|j| cm.get(c, j)).sum();
        let col: u64 = (0..k).map(|i| cm.get(i, c)).sum();
        let union = row + col - tp;
        per_class.push((union > 0).then(|| tp as f64 / union as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, miou })
}

/// Per-row softmax entropy in nats.
pub fn entropy_map(logits: &[f64], classes: usize) -> Result<Vec<f64>> {
    contract!(
        classes >= 1 && logits.len().is_multiple_of(classes),
        "logits are not a multiple of {classes}"
    );
    let p = softmax_rows(logits, classes);
    Ok(p.chunks(classes)
        .map(|row| {
            let h: f64 = row.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
            h.max(0.0)
        })
        .collect())
}

/// Mean L2 norm of the (pre-normalization) embedding means and mean scalar
/// variance over the crop.
pub fn crop_statistics(emb: &Embeddings) -> Result<(f64, f64)> {
    contract!(!emb.is_empty(), "crop statistics of an empty crop");
    let n = emb.len() as f64;
    let norm = emb.raw_norm.iter().sum::<f64>() / n;
    let var = emb.var.iter().sum::<f64>() / (n * emb.dim as f64);
    Ok((norm, var))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// One of the inputs was constant, so `rho` is defined as 0.
    pub degenerate: bool,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Spearman> {
    contract!(xs.len() == ys.len(), "spearman inputs differ in length");
    contract!(xs.len() >= 3, "spearman needs at least 3 points, got {}", xs.len());
    contract!(
        xs.iter().chain(ys).all(|v| v.is_finite()),
        "spearman inputs must be finite"
    );
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Spearman {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(Spearman {
        rho: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// One evaluation of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub split: String,
    pub report: IouReport,
}

/// CSV with header `step,split,iou_0..iou_{K-1},miou`; excluded classes are
/// written as `nan`.
pub fn write_trace_csv<W: Write>(mut w: W, classes: usize, rows: &[TraceRow]) -> Result<()> {
    let mut header = String::from("step,split");
    for c in 0..classes {
        header.push_str(&format!(",iou_{c}"));
    }
    header.push_str(",miou\n");
    w.write_all(header.as_bytes())?;
    for r in rows {
        contract!(
            r.report.per_class.len() == classes,
            "trace row has the wrong class count"
        );
        let mut line = format!("{},{}", r.step, r.split);
        for v in &r.report.per_class {
            match v {
                Some(x) => line.push_str(&format!(",{x:.6}")),
                None => line.push_str(",nan"),
            }
        }
        line.push_str(&format!(",{:.6}\n", r.report.miou));
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Maps entropies in `[0, max]` to 8-bit gray, 0 = certain.
pub fn entropy_to_gray(entropy: &[f64], max: f64) -> Vec<u8> {
    entropy
        .iter()
        .map(|&h| {
            if max <= 0.0 {
                0
            } else {
                ((h / max).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_constant_predictions() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap();
        let r = iou(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.miou, 1.0);

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        let r = iou(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);

        assert!(iou(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        let r = iou(&cm).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn iou_matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 500;
        let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..3u8)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3usize)).collect();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &pred).unwrap();
        let r = iou(&cm).unwrap();
        for c in 0..3 {
            let gt: std::collections::HashSet<usize> = (0..n).filter(|&i| truth[i] as usize == c).collect();
            let pr: std::collections::HashSet<usize> = (0..n).filter(|&i| pred[i] == c).collect();
            let want = gt.intersection(&pr).count() as f64 / gt.union(&pr).count() as f64;
            assert!((r.per_class[c].unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let mut a = ConfusionMatrix::new(2);
        let mut b = ConfusionMatrix::new(2);
        let mut all = ConfusionMatrix::new(2);
        a.accumulate(&[0, 1], &[1, 1]).unwrap();
        b.accumulate(&[1, 0], &[0, 0]).unwrap();
        all.accumulate(&[1, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, all);
    }

    #[test]
    fn entropy_examples() {
        let h = entropy_map(&[1000.0, 0.0, 0.0], 3).unwrap();
        assert!(h[0].abs() < 1e-12);
        let h = entropy_map(&[0.0; 8], 8).unwrap();
        assert!((h[0] - 8f64.ln()).abs() < 1e-12);
        let logits = [1.0f64, 0.0];
        let e = 1f64.exp();
        let (p, q) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let want = -(p * p.ln() + q * q.ln());
        assert!((entropy_map(&logits, 2).unwrap()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn crop_statistics_examples() {
        let emb = Embeddings {
            dim: 2,
            mean: vec![1.0, 0.0, 0.0, 1.0],
            var: vec![1.0; 4],
            raw_norm: vec![1.0, 1.0],
        };
        assert_eq!(crop_statistics(&emb).unwrap(), (1.0, 1.0));
        let doubled = Embeddings {
            var: vec![2.0; 4],
            ..emb.clone()
        };
        assert_eq!(crop_statistics(&doubled).unwrap().1, 2.0);
        let mixed = Embeddings {
            dim: 2,
            mean: vec![0.0; 6],
            var: vec![0.5, 1.5, 2.0, 2.0, 0.1, 0.3],
            raw_norm: vec![3.0, 1.0, 2.0],
        };
        let (n, v) = crop_statistics(&mixed).unwrap();
        assert!((n - 2.0).abs() < 1e-15);
        let per_pixel = [(0.5 + 1.5) / 2.0, 2.0, (0.1 + 0.3) / 2.0];
        assert!((v - per_pixel.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap().rho, 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap().rho, -1.0);
        let flat = spearman(&x, &[1.0; 4]).unwrap();
        assert!(flat.degenerate && flat.rho == 0.0);
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());

        // Tied ranks: x ranks (1, 2.5, 2.5, 4, 5), y ranks (2, 1, 4, 3, 5).
        let xs = [1.0, 2.0, 2.0, 3.0, 4.0];
        let ys = [5.0, 3.0, 9.0, 7.0, 11.0];
        let rx = [1.0, 2.5, 2.5, 4.0, 5.0];
        let ry = [2.0, 1.0, 4.0, 3.0, 5.0];
        let m = 3.0;
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
        let sxx: f64 = rx.iter().map(|a| (a - m) * (a - m)).sum();
        let syy: f64 = ry.iter().map(|b| (b - m) * (b - m)).sum();
        let want = sxy / (sxx * syy).sqrt();
        assert!((spearman(&xs, &ys).unwrap().rho - want).abs() < 1e-15);
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            step: 10,
            split: "target".into(),
            report: IouReport {
                per_class: vec![Some(0.5), None],
                miou: 0.5,
            },
        }];
        let mut out = Vec::new();
        write_trace_csv(&mut out, 2, &rows).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "step,split,iou_0,iou_1,miou\n10,target,0.500000,nan,0.500000\n"
        );
    }
}
