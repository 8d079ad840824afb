//! Confusion matrices and the AA / OA / Kappa / F1 criteria.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[i][j]` = samples of true class `i + 1` predicted as class `j + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    /// Builds from row-major counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Metric("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { classes: c, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count for 1-based class ids.
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[(truth - 1) * self.classes + pred - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Records one sample; ids are 1-based.
    pub fn accumulate(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth == 0 || pred == 0 || truth > self.classes || pred > self.classes {
            return Err(Error::Metric(format!("class ids must lie in 1..={}, got truth {truth} pred {pred}", self.classes)));
        }
        self.counts[(truth - 1) * self.classes + pred - 1] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Metric(format!("cannot merge {}-class and {}-class matrices", self.classes, other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.counts[i * self.classes + j]).sum()
    }

    fn diag(&self, i: usize) -> u64 {
        self.counts[i * self.classes + i]
    }

    /// Recall of every class; errors on a class without samples.
    pub fn per_class_accuracy(&self) -> Result<Vec<f64>> {
        (0..self.classes)
            .map(|i| match self.row_sum(i) {
                0 => Err(Error::Metric(format!("class {} has no samples", i + 1))),
                n => Ok(self.diag(i) as f64 / n as f64),
            })
            .collect()
    }

    /// `(AA, OA)`.
    pub fn aa_oa(&self) -> Result<(f64, f64)> {
        let acc = self.per_class_accuracy()?;
        let aa = acc.iter().sum::<f64>() / self.classes as f64;
        let hits: u64 = (0..self.classes).map(|i| self.diag(i)).sum();
        Ok((aa, hits as f64 / self.total() as f64))
    }

    /// Chance agreement `P = sum_i row_i col_i / N^2`.
    pub fn chance_agreement(&self) -> f64 {
        let n = self.total() as f64;
        (0..self.classes).map(|i| self.row_sum(i) as f64 * self.col_sum(i) as f64).sum::<f64>() / (n * n)
    }

    pub fn kappa(&self) -> Result<f64> {
        let (_, oa) = self.aa_oa()?;
        let p = self.chance_agreement();
        if p == 1.0 {
            return Err(Error::Metric("kappa is undefined when chance agreement is 1".into()));
        }
        Ok((oa - p) / (1.0 - p))
    }

    /// Per-class `2TP / (2TP + FP + FN)`; classes absent from truth and prediction get 0.
    pub fn f1_per_class(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|i| {
                let tp = self.diag(i) as f64;
                let fn_ = self.row_sum(i) as f64 - tp;
                let fp = self.col_sum(i) as f64 - tp;
                let denom = 2.0 * tp + fp + fn_;
                if denom == 0.0 {
                    log::warn!("class {} never occurs; its F1 is taken as 0", i + 1);
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }

    /// Unsquared mean of the per-class F1 scores.
    pub fn f1_macro(&self) -> f64 {
        self.f1_per_class().iter().sum::<f64>() / self.classes as f64
    }

    /// Square of the mean per-class F1.
    pub fn f1(&self) -> f64 {
        self.f1_macro().powi(2)
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let (aa, oa) = self.aa_oa()?;
        Ok(MetricsReport {
            per_class: self.per_class_accuracy()?,
            aa,
            oa,
            kappa: self.kappa()?,
            f1: self.f1(),
            f1_macro: self.f1_macro(),
            samples: self.total(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<f64>,
    pub aa: f64,
    pub oa: f64,
    pub kappa: f64,
    pub f1: f64,
    pub f1_macro: f64,
    pub samples: u64,
}

/// Right-aligned text table; the first column holds row labels.
pub fn format_table(corner: &str, columns: &[String], rows: &[(String, Vec<String>)]) -> String {
    let label_w = rows.iter().map(|r| r.0.len()).chain([corner.len()]).max().unwrap_or(0);
    let widths: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| rows.iter().filter_map(|r| r.1.get(j)).map(|v| v.len()).chain([c.len()]).max().unwrap_or(0))
        .collect();
    let mut s = format!("{corner:<label_w$}");
    for (c, w) in columns.iter().zip(&widths) {
        let _ = write!(s, "  {c:>w$}");
    }
    s.push('\n');
    for (label, cells) in rows {
        let _ = write!(s, "{label:<label_w$}");
        for (v, w) in cells.iter().zip(&widths) {
            let _ = write!(s, "  {v:>w$}");
        }
        s.push('\n');
    }
    s
}

impl MetricsReport {
    /// Column headers of [`MetricsReport::cells`]: one per class, then AA, OA, Kappa, F1.
    pub fn columns(&self, class_names: &[String]) -> Vec<String> {
        let mut cols: Vec<String> =
            (0..self.per_class.len()).map(|i| class_names.get(i).cloned().unwrap_or_else(|| format!("class{}", i + 1))).collect();
        cols.extend(["AA", "OA", "Kappa", "F1"].map(String::from));
        cols
    }

    /// Accuracies in percent, Kappa and F1 as fractions.
    pub fn cells(&self) -> Vec<String> {
        let mut cells: Vec<String> = self.per_class.iter().map(|a| format!("{:.2}", a * 100.0)).collect();
        cells.push(format!("{:.2}", self.aa * 100.0));
        cells.push(format!("{:.2}", self.oa * 100.0));
        cells.push(format!("{:.4}", self.kappa));
        cells.push(format!("{:.4}", self.f1));
        cells
    }

    /// One-row table with `class_names.len() + 4` columns, then the unsquared macro F1.
    pub fn to_text(&self, class_names: &[String], row_label: &str) -> String {
        let mut s = format_table("", &self.columns(class_names), &[(row_label.to_string(), self.cells())]);
        let _ = writeln!(s, "F1_macro (unsquared) {:.4}", self.f1_macro);
        s
    }

    /// `key=value` lines with full precision.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (i, acc) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "class{}_accuracy={acc}", i + 1);
        }
        let _ = writeln!(
            s,
            "AA={}\nOA={}\nKappa={}\nF1={}\nF1_macro={}\nsamples={}",
            self.aa, self.oa, self.kappa, self.f1, self.f1_macro, self.samples
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn example() -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap()
    }

    #[test]
    fn hand_computed_two_class() {
        let cm = example();
        let (aa, oa) = cm.aa_oa().unwrap();
        assert!((oa - 0.70).abs() < 1e-15);
        assert!((aa - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
        assert!((aa - 0.708_333_333_333_333_3).abs() < 1e-12);
        assert!((cm.chance_agreement() - 0.5).abs() < 1e-15);
        assert!((cm.kappa().unwrap() - 0.4).abs() < 1e-12);
        let f = cm.f1_per_class();
        assert!((f[0] - 6.0 / 9.0).abs() < 1e-15);
        assert!((f[1] - 8.0 / 11.0).abs() < 1e-15);
        assert!((cm.f1() - 0.4858).abs() < 5e-5);
    }

    #[test]
    fn perfect_and_anti_diagonal() {
        let d = ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 5]]).unwrap();
        assert_eq!(d.aa_oa().unwrap(), (1.0, 1.0));
        assert_eq!(d.kappa().unwrap(), 1.0);
        assert_eq!(d.f1(), 1.0);
        let anti = ConfusionMatrix::from_rows(&[vec![0, 5], vec![5, 0]]).unwrap();
        assert_eq!(anti.f1(), 0.0);
    }

    #[test]
    fn accumulate_and_errors() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(1, 1).unwrap();
        assert_eq!((cm.get(1, 1), cm.total()), (1, 1));
        assert!(cm.accumulate(0, 1).is_err());
        assert!(cm.accumulate(1, 4).is_err());
        let err = cm.aa_oa().unwrap_err().to_string();
        assert!(err.contains("class 2"), "{err}");
        let single = ConfusionMatrix::from_rows(&[vec![4]]).unwrap();
        assert!(single.kappa().is_err());
    }

    #[test]
    fn balanced_aa_equals_oa() {
        let cm = ConfusionMatrix::from_rows(&[vec![7, 2, 1], vec![0, 9, 1], vec![3, 3, 4]]).unwrap();
        let (aa, oa) = cm.aa_oa().unwrap();
        assert_eq!(aa, oa);
    }

    #[test]
    fn accumulation_order_irrelevant() {
        let pairs: Vec<(usize, usize)> = (0..200).map(|i| (i % 4 + 1, (i * 7) % 4 + 1)).collect();
        let mut a = ConfusionMatrix::new(4);
        let mut b = ConfusionMatrix::new(4);
        for &(t, p) in &pairs {
            a.accumulate(t, p).unwrap();
        }
        for &(t, p) in pairs.iter().rev() {
            b.accumulate(t, p).unwrap();
        }
        assert_eq!(a, b);
        let mut half = ConfusionMatrix::new(4);
        let mut rest = ConfusionMatrix::new(4);
        for (k, &(t, p)) in pairs.iter().enumerate() {
            if k < 77 {
                half.accumulate(t, p).unwrap()
            } else {
                rest.accumulate(t, p).unwrap()
            }
        }
        half.merge(&rest).unwrap();
        assert_eq!(half, a);
    }

    #[test]
    fn independent_predictions_have_zero_kappa() {
        let mut rng = rng_from_seed(77);
        let weights = [0.5, 0.3, 0.2];
        let draw = |rng: &mut crate::tensor::Rng64| {
            let u: f64 = rng.random();
            if u < weights[0] {
                1
            } else if u < weights[0] + weights[1] {
                2
            } else {
                3
            }
        };
        let mut cm = ConfusionMatrix::new(3);
        for _ in 0..100_000 {
            let t = draw(&mut rng);
            let p = draw(&mut rng);
            cm.accumulate(t, p).unwrap();
        }
        assert!(cm.kappa().unwrap().abs() < 0.05);
    }

    /// Separate straightforward evaluation of the four criteria.
    fn oracle(h: &[Vec<u64>]) -> (f64, f64, f64, f64) {
        let c = h.len();
        let n: f64 = h.iter().flatten().map(|&v| v as f64).sum();
        let mut aa = 0.0;
        let mut m = 0.0;
        let mut p = 0.0;
        let mut f1s = 0.0;
        for i in 0..c {
            let row: f64 = h[i].iter().map(|&v| v as f64).sum();
            let mut col = 0.0;
            for r in h {
                col += r[i] as f64;
            }
            let tp = h[i][i] as f64;
            aa += tp / row;
            m += tp;
            p += row * col;
            let d = tp + tp + (col - tp) + (row - tp);
            f1s += if d > 0.0 { 2.0 * tp / d } else { 0.0 };
        }
        let oa = m / n;
        let p = p / (n * n);
        let f = f1s / c as f64;
        (aa / c as f64, oa, (oa - p) / (1.0 - p), f * f)
    }

    proptest! {
        #[test]
        fn matches_oracle(c in 2usize..=15, seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let mut rows = vec![vec![0u64; c]; c];
            for row in rows.iter_mut() {
                row[rng.random_range(0..c)] += 1;
            }
            for _ in 0..10_000 - c {
                rows[rng.random_range(0..c)][rng.random_range(0..c)] += 1;
            }
            let cm = ConfusionMatrix::from_rows(&rows).unwrap();
            let (aa, oa) = cm.aa_oa().unwrap();
            let (eaa, eoa, ek, ef) = oracle(&rows);
            prop_assert!((aa - eaa).abs() < 1e-12);
            prop_assert!((oa - eoa).abs() < 1e-12);
            prop_assert!((cm.kappa().unwrap() - ek).abs() < 1e-12);
            prop_assert!((cm.f1() - ef).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&aa) && (0.0..=1.0).contains(&oa) && (0.0..=1.0).contains(&cm.f1()));
            prop_assert!(cm.kappa().unwrap() <= oa + 1e-12);
        }

        #[test]
        fn relabeling_invariant(seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let c = 5;
            let rows: Vec<Vec<u64>> = (0..c).map(|_| (0..c).map(|_| rng.random_range(1..50)).collect()).collect();
            let perm = [3usize, 0, 4, 1, 2];
            let permuted: Vec<Vec<u64>> = (0..c).map(|i| (0..c).map(|j| rows[perm[i]][perm[j]]).collect()).collect();
            let a = ConfusionMatrix::from_rows(&rows).unwrap();
            let b = ConfusionMatrix::from_rows(&permuted).unwrap();
            let (ra, rb) = (a.report().unwrap(), b.report().unwrap());
            prop_assert!((ra.aa - rb.aa).abs() < 1e-12);
            prop_assert!((ra.oa - rb.oa).abs() < 1e-12);
            prop_assert!((ra.kappa - rb.kappa).abs() < 1e-12);
            prop_assert!((ra.f1 - rb.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_classifier_row() {
        let r = ConfusionMatrix::from_rows(&[vec![5, 0, 0], vec![0, 7, 0], vec![0, 0, 2]]).unwrap().report().unwrap();
        let text = r.to_text(&["a".into(), "b".into(), "c".into()], "MCNN");
        let row: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(row, ["MCNN", "100.00", "100.00", "100.00", "100.00", "100.00", "1.0000", "1.0000"]);
    }

    #[test]
    fn report_formats() {
        let r = example().report().unwrap();
        let text = r.to_text(&["water".into(), "urban".into()], "model");
        assert!(text.contains("70.00") && text.contains("water"));
        let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["water", "urban", "AA", "OA", "Kappa", "F1"]);
        let row: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(row, ["model", "75.00", "66.67", "70.83", "70.00", "0.4000", "0.4858"]);
        let kv = r.to_key_values();
        assert!(kv.contains("OA=0.7\n") && kv.contains("F1_macro="));
    }
}
