//! Per-class segmentation metrics over hard label maps.

use std::fmt::Write as _;

/// Foreground pixels of `mask` that touch the background or the image edge
/// through a 4-neighbour, as `(row, col)`.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let at = |i: isize, j: isize| {
        i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && mask[i as usize * w + j as usize]
    };
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            let (a, b) = (i as isize, j as isize);
            if !(at(a - 1, b) && at(a + 1, b) && at(a, b - 1) && at(a, b + 1)) {
                out.push((i, j));
            }
        }
    }
    out
}

fn nearest(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter()
        .map(|q| {
            let (di, dj) = (p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
            di * di + dj * dj
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Symmetric boundary Hausdorff distance. `percentile` (e.g. 95) replaces
/// the maximum with that percentile of the pooled directed distances.
/// Both empty: 0. Exactly one empty: infinity.
pub fn hausdorff(a: &[bool], b: &[bool], h: usize, w: usize, percentile: Option<f64>) -> f64 {
    let (ba, bb) = (boundary(a, h, w), boundary(b, h, w));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let mut d: Vec<f64> = ba.iter().map(|&p| nearest(p, &bb)).collect();
    d.extend(bb.iter().map(|&p| nearest(p, &ba)));
    match percentile {
        None => d.into_iter().fold(0.0, f64::max),
        Some(q) => {
            d.sort_by(f64::total_cmp);
            let rank = ((q / 100.0) * (d.len() - 1) as f64).round() as usize;
            d[rank.min(d.len() - 1)]
        }
    }
}

/// Confusion counts of one class against the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// 1 when both prediction and truth are empty.
    pub fn dice(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    /// Mean over samples where it is defined; infinite if it never is.
    pub hausdorff: f64,
    /// Samples where exactly one of prediction and truth was empty.
    pub hausdorff_undefined: usize,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// One entry per class, background included.
    pub classes: Vec<ClassMetrics>,
    /// Macro average over foreground classes.
    pub mean: ClassMetrics,
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsOptions {
    /// Use this percentile of boundary distances instead of the maximum.
    pub hausdorff_percentile: Option<f64>,
}

/// Accumulates per-sample metrics and averages them per class.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    k: usize,
    opts: MetricsOptions,
    sums: Vec<[f64; 5]>,
    hd_defined: Vec<usize>,
    samples: usize,
}

impl MetricsAccumulator {
    pub fn new(num_classes: usize, opts: MetricsOptions) -> Self {
        Self {
            k: num_classes,
            opts,
            sums: vec![[0.0; 5]; num_classes],
            hd_defined: vec![0; num_classes],
            samples: 0,
        }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize], h: usize, w: usize) {
        assert_eq!(pred.len(), h * w);
        assert_eq!(truth.len(), h * w);
        for c in 0..self.k {
            let p: Vec<bool> = pred.iter().map(|&l| l == c).collect();
            let t: Vec<bool> = truth.iter().map(|&l| l == c).collect();
            let conf = Confusion::of(&p, &t);
            let hd = hausdorff(&p, &t, h, w, self.opts.hausdorff_percentile);
            let s = &mut self.sums[c];
            s[0] += conf.dice();
            if hd.is_finite() {
                s[1] += hd;
                self.hd_defined[c] += 1;
            }
            s[2] += conf.sensitivity();
            s[3] += conf.specificity();
            s[4] += conf.accuracy();
        }
        self.samples += 1;
    }

    pub fn finish(&self) -> MetricsReport {
        let n = self.samples.max(1) as f64;
        let classes: Vec<ClassMetrics> = (0..self.k)
            .map(|c| {
                let s = self.sums[c];
                let defined = self.hd_defined[c];
                ClassMetrics {
                    dice: s[0] / n,
                    hausdorff: if defined == 0 {
                        f64::INFINITY
                    } else {
                        s[1] / defined as f64
                    },
                    hausdorff_undefined: self.samples - defined,
                    sensitivity: s[2] / n,
                    specificity: s[3] / n,
                    accuracy: s[4] / n,
                }
            })
            .collect();
        let fg = &classes[1.min(classes.len())..];
        let m = fg.len().max(1) as f64;
        let avg = |f: fn(&ClassMetrics) -> f64| fg.iter().map(f).sum::<f64>() / m;
        let mean = ClassMetrics {
            dice: avg(|c| c.dice),
            hausdorff: avg(|c| c.hausdorff),
            hausdorff_undefined: fg.iter().map(|c| c.hausdorff_undefined).sum(),
            sensitivity: avg(|c| c.sensitivity),
            specificity: avg(|c| c.specificity),
            accuracy: avg(|c| c.accuracy),
        };
        MetricsReport {
            classes,
            mean,
            samples: self.samples,
        }
    }
}

impl MetricsReport {
    pub fn mean_foreground_dice(&self) -> f64 {
        self.mean.dice
    }

    /// Header plus one row per class and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dice,hausdorff,sensitivity,specificity,accuracy\n");
        let row = |s: &mut String, name: &str, c: &ClassMetrics| {
            let hd = if c.hausdorff.is_finite() {
                format!("{:.6}", c.hausdorff)
            } else {
                "inf".to_string()
            };
            writeln!(
                s,
                "{name},{:.6},{hd},{:.6},{:.6},{:.6}",
                c.dice, c.sensitivity, c.specificity, c.accuracy
            )
            .expect("writing to a String cannot fail");
        };
        for (i, c) in self.classes.iter().enumerate() {
            row(&mut s, &i.to_string(), c);
        }
        row(&mut s, "mean", &self.mean);
        s
    }
}

/// Argmax over the class axis of `[B, K, H, W]` logits, as `B` label maps.
pub fn argmax_labels(logits: &[f64], b: usize, k: usize, hw: usize) -> Vec<Vec<usize>> {
    (0..b)
        .map(|bi| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if logits[(bi * k + c) * hw + p] > logits[(bi * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::train::augment::D4;
    use crate::verify::oracles;

    fn random_mask(r: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<bool> {
        (0..n * n).map(|_| r.random_bool(density)).collect()
    }

    #[test]
    fn left_half_against_full_frame() {
        let a: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let b = vec![true; 16];
        assert!((Confusion::of(&a, &b).dice() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint_conventions() {
        let mut acc = MetricsAccumulator::new(2, MetricsOptions::default());
        let m: Vec<usize> = (0..16).map(|i| (i % 4 < 2) as usize).collect();
        acc.add(&m, &m, 4, 4);
        let r = acc.finish();
        for c in &r.classes {
            assert_eq!(
                (c.dice, c.hausdorff, c.sensitivity, c.specificity, c.accuracy),
                (1.0, 0.0, 1.0, 1.0, 1.0)
            );
        }
        let empty = vec![false; 16];
        assert_eq!(Confusion::of(&empty, &empty).dice(), 1.0);
        assert_eq!(hausdorff(&empty, &empty, 4, 4, None), 0.0);
        let one: Vec<bool> = (0..16).map(|i| i == 5).collect();
        assert_eq!(Confusion::of(&empty, &one).dice(), 0.0);
        assert!(hausdorff(&empty, &one, 4, 4, None).is_infinite());
        let other: Vec<bool> = (0..16).map(|i| i == 15).collect();
        assert_eq!(Confusion::of(&other, &one).dice(), 0.0);
        assert!((hausdorff(&other, &one, 4, 4, None) - 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn matches_naive_reference() {
        let mut r = ChaCha8Rng::seed_from_u64(42);
        for i in 0..200 {
            let density = [0.02, 0.2, 0.5, 0.9][i % 4];
            let (a, b) = (random_mask(&mut r, 16, density), random_mask(&mut r, 16, density));
            let d = Confusion::of(&a, &b).dice();
            assert!((d - oracles::dice(&a, &b)).abs() < 1e-9);
            let h = hausdorff(&a, &b, 16, 16, None);
            match oracles::hausdorff(&a, &b, 16, 16) {
                Some(o) => assert!((h - o).abs() < 1e-9, "{h} vs {o}"),
                None => assert!(h.is_infinite()),
            }
        }
    }

    #[test]
    fn symmetric_and_d4_invariant() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (a, b) = (random_mask(&mut r, 9, 0.3), random_mask(&mut r, 9, 0.3));
            let (d, h) = (Confusion::of(&a, &b).dice(), hausdorff(&a, &b, 9, 9, None));
            assert_eq!(d, Confusion::of(&b, &a).dice());
            assert_eq!(h, hausdorff(&b, &a, 9, 9, None));
            for e in D4::all() {
                let ta: Vec<bool> = e
                    .apply_mask(&a.iter().map(|&v| v as usize).collect::<Vec<_>>(), 9)
                    .into_iter()
                    .map(|v| v == 1)
                    .collect();
                let tb: Vec<bool> = e
                    .apply_mask(&b.iter().map(|&v| v as usize).collect::<Vec<_>>(), 9)
                    .into_iter()
                    .map(|v| v == 1)
                    .collect();
                assert!((Confusion::of(&ta, &tb).dice() - d).abs() < 1e-15);
                assert!((hausdorff(&ta, &tb, 9, 9, None) - h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn percentile_is_at_most_max() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, b) = (random_mask(&mut r, 12, 0.3), random_mask(&mut r, 12, 0.3));
            assert!(hausdorff(&a, &b, 12, 12, Some(95.0)) <= hausdorff(&a, &b, 12, 12, None));
            assert_eq!(hausdorff(&a, &b, 12, 12, Some(100.0)), hausdorff(&a, &b, 12, 12, None));
        }
    }

    #[test]
    fn report_table_has_k_plus_one_rows() {
        let mut acc = MetricsAccumulator::new(3, MetricsOptions::default());
        let t: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let p: Vec<usize> = (0..16).map(|i| (i / 2) % 3).collect();
        acc.add(&p, &t, 4, 4);
        let r = acc.finish();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,dice,hausdorff,sensitivity,specificity,accuracy");
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert!(lines[4].starts_with("mean,"));
        assert!((r.mean.dice - (r.classes[1].dice + r.classes[2].dice) / 2.0).abs() < 1e-15);
        for c in &r.classes {
            for v in [c.dice, c.sensitivity, c.specificity, c.accuracy] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let logits = [0.0, 2.0, 1.0, 2.0, 0.5, 0.0];
        assert_eq!(argmax_labels(&logits, 1, 3, 2), vec![vec![1, 0]]);
    }
}
