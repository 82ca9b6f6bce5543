//! Action-prediction and segmentation metrics, plus report output.
//!
//! The positive class is action 1. Ratios with a zero denominator are 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(truth: &[usize], predicted: &[usize]) -> Self {
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t == 1, p == 1) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn metrics(&self) -> ClassificationMetrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let prec = ratio(self.tp, self.tp + self.fp);
        let rec = ratio(self.tp, self.tp + self.fn_);
        ClassificationMetrics {
            acc: ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_),
            rec,
            prec,
            f1: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            auc: None,
            jaccard: ratio(self.tp, self.tp + self.fp + self.fn_),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub acc: f64,
    pub rec: f64,
    pub prec: f64,
    pub f1: f64,
    /// Absent when the ground truth has a single class.
    pub auc: Option<f64>,
    pub jaccard: f64,
}

/// Metrics for binary actions from `P(a = 1)`; predicted positive when the
/// probability reaches `threshold`.
pub fn classification_metrics(truth: &[usize], p1: &[f64], threshold: f64) -> Result<ClassificationMetrics> {
    if truth.is_empty() || truth.len() != p1.len() {
        return Err(Error::arg("truth and probabilities must be aligned and non-empty"));
    }
    if truth.iter().any(|&a| a > 1) {
        return Err(Error::arg("classification metrics need binary actions"));
    }
    if p1.iter().any(|p| !p.is_finite()) {
        return Err(Error::arg("probabilities must be finite"));
    }
    let predicted: Vec<usize> = p1.iter().map(|&p| usize::from(p >= threshold)).collect();
    let mut m = Confusion::from_predictions(truth, &predicted).metrics();
    m.auc = auc(truth, p1);
    Ok(m)
}

/// Mann-Whitney AUC with averaged ranks for ties.
pub fn auc(truth: &[usize], scores: &[f64]) -> Option<f64> {
    let pos = truth.iter().filter(|&&a| a == 1).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if truth[k] == 1 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<usize>>, usize, usize) {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut c = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        c[x][y] += 1;
    }
    (c, ka, kb)
}

pub fn adjusted_rand_index(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::arg("label sequences differ in length"));
    }
    let n = truth.len();
    if n < 2 {
        return Ok(1.0);
    }
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let (c, _, _) = contingency(truth, predicted);
    let index: f64 = c.iter().flatten().map(|&x| choose2(x)).sum();
    let rows: f64 = c.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..c.first().map_or(0, Vec::len))
        .map(|j| choose2(c.iter().map(|r| r[j]).sum()))
        .sum();
    let expected = rows * cols / choose2(n);
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        // Both labelings are a single cluster (or all singletons).
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Minimum-cost assignment of rows to columns for a square cost matrix
/// (O(n³) shortest augmenting paths with potentials). Returns the column
/// assigned to each row.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Maps each predicted cluster to a true label by maximum-overlap matching;
/// unmatched predicted clusters map to `None`.
pub fn align_labels(truth: &[usize], predicted: &[usize]) -> Result<Vec<Option<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::arg("label sequences differ in length"));
    }
    let (c, ka, kb) = contingency(truth, predicted);
    let n = ka.max(kb);
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i < ka && j < kb { -(c[i][j] as f64) } else { 0.0 })
                .collect()
        })
        .collect();
    let assign = hungarian_min(&cost);
    let mut map = vec![None; kb];
    for (i, &j) in assign.iter().enumerate() {
        if i < ka && j < kb {
            map[j] = Some(i);
        }
    }
    Ok(map)
}

/// Macro-averaged F1 over true labels after optimal one-to-one alignment.
pub fn aligned_macro_f1(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::arg("empty label sequences"));
    }
    let map = align_labels(truth, predicted)?;
    let (c, ka, kb) = contingency(truth, predicted);
    let mut total = 0.0;
    let mut classes = 0;
    for i in 0..ka {
        let row: usize = c[i].iter().sum();
        if row == 0 {
            continue;
        }
        classes += 1;
        let Some(j) = (0..kb).find(|&j| map[j] == Some(i)) else {
            continue;
        };
        let tp = c[i][j];
        let col: usize = c.iter().map(|r| r[j]).sum();
        let denom = row + col;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / classes as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub adjusted_rand: f64,
    pub aligned_macro_f1: f64,
}

pub fn segmentation_metrics(truth: &[usize], predicted: &[usize]) -> Result<SegmentationMetrics> {
    Ok(SegmentationMetrics {
        adjusted_rand: adjusted_rand_index(truth, predicted)?,
        aligned_macro_f1: aligned_macro_f1(truth, predicted)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std })
}

/// `0.867(.012)`.
pub fn format_mean_std(m: MeanStd) -> String {
    let std = format!("{:.3}", m.std);
    let std = std.strip_prefix('0').unwrap_or(&std);
    format!("{:.3}({})", m.mean, std)
}

/// Metrics of one evaluated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: String,
    pub seed: u64,
    pub classification: ClassificationMetrics,
    pub segmentation: Option<SegmentationMetrics>,
}

impl RunMetrics {
    pub fn values(&self) -> BTreeMap<&'static str, Option<f64>> {
        let c = &self.classification;
        let mut m = BTreeMap::new();
        m.insert("acc", Some(c.acc));
        m.insert("rec", Some(c.rec));
        m.insert("prec", Some(c.prec));
        m.insert("f1", Some(c.f1));
        m.insert("auc", c.auc);
        m.insert("jaccard", Some(c.jaccard));
        m.insert("adjusted_rand", self.segmentation.map(|s| s.adjusted_rand));
        m.insert("aligned_macro_f1", self.segmentation.map(|s| s.aligned_macro_f1));
        m
    }
}

pub const METRIC_COLUMNS: [&str; 8] = ["acc", "rec", "prec", "f1", "auc", "jaccard", "adjusted_rand", "aligned_macro_f1"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub runs: Vec<RunMetrics>,
    pub summaries: Vec<MethodSummary>,
}

impl EvalReport {
    /// Groups runs by method in first-appearance order.
    pub fn from_runs(runs: Vec<RunMetrics>) -> Self {
        let mut order: Vec<String> = Vec::new();
        for r in &runs {
            if !order.contains(&r.method) {
                order.push(r.method.clone());
            }
        }
        let summaries = order
            .into_iter()
            .map(|method| {
                let mine: Vec<&RunMetrics> = runs.iter().filter(|r| r.method == method).collect();
                let mut metrics = BTreeMap::new();
                for col in METRIC_COLUMNS {
                    let vals: Vec<f64> = mine.iter().filter_map(|r| r.values()[col]).collect();
                    if let Some(ms) = mean_std(&vals) {
                        metrics.insert(col.to_string(), ms);
                    }
                }
                MethodSummary {
                    seeds: mine.iter().map(|r| r.seed).collect(),
                    method,
                    metrics,
                }
            })
            .collect();
        EvalReport {
            schema_version: 1,
            runs,
            summaries,
        }
    }

    /// One row per method, cells formatted as `mean(std)`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Validation(format!("writing CSV: {e}"));
        let mut header = vec!["method".to_string(), "runs".to_string()];
        header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
        out.write_record(&header).map_err(csv_err)?;
        for s in &self.summaries {
            let mut row = vec![s.method.clone(), s.seeds.len().to_string()];
            for col in METRIC_COLUMNS {
                row.push(s.metrics.get(col).map(|m| format_mean_std(*m)).unwrap_or_default());
            }
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::Validation(format!("writing CSV: {e}")))?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut csv = Vec::new();
        self.write_csv(&mut csv)?;
        crate::persist::write_atomic(&dir.join("metrics.csv"), &csv)?;
        crate::persist::save_json(&dir.join("metrics.json"), self)?;
        crate::persist::write_atomic(&dir.join("metrics.svg"), self.svg_bar_plot().as_bytes())
    }

    /// Grouped bar chart of the classification means with std whiskers.
    pub fn svg_bar_plot(&self) -> String {
        let cols = &METRIC_COLUMNS[..6];
        let methods = self.summaries.len().max(1);
        let group_w = 24.0 * methods as f64 + 20.0;
        let (left, top, height) = (50.0, 20.0, 200.0);
        let width = left + group_w * cols.len() as f64 + 160.0;
        let palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#,
            top + height + 40.0
        );
        for tick in 0..=4 {
            let y = top + height * (1.0 - tick as f64 / 4.0);
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{:.2}</text>"##,
                left + group_w * cols.len() as f64,
                left - 4.0,
                y + 4.0,
                tick as f64 / 4.0
            );
        }
        for (c, col) in cols.iter().enumerate() {
            let gx = left + group_w * c as f64 + 10.0;
            for (mi, summary) in self.summaries.iter().enumerate() {
                let Some(m) = summary.metrics.get(*col) else { continue };
                let x = gx + 24.0 * mi as f64;
                let h = height * m.mean.clamp(0.0, 1.0);
                let color = palette[mi % palette.len()];
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{}" width="20" height="{h}" fill="{color}"/>"#,
                    top + height - h
                );
                let y_hi = top + height * (1.0 - (m.mean + m.std).clamp(0.0, 1.0));
                let y_lo = top + height * (1.0 - (m.mean - m.std).clamp(0.0, 1.0));
                let _ = writeln!(
                    s,
                    r#"<line x1="{0}" y1="{y_hi}" x2="{0}" y2="{y_lo}" stroke="black"/>"#,
                    x + 10.0
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{col}</text>"#,
                gx + 12.0 * methods as f64,
                top + height + 16.0
            );
        }
        for (mi, summary) in self.summaries.iter().enumerate() {
            let y = top + 14.0 * mi as f64;
            let x = left + group_w * cols.len() as f64 + 10.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                y,
                palette[mi % palette.len()],
                x + 14.0,
                y + 9.0,
                xml_escape(&summary.method)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    #[test]
    fn perfect_predictions_score_one() {
        let m = classification_metrics(&[0, 1, 1, 0], &[0.1, 0.9, 0.8, 0.2], 0.5).unwrap();
        for v in [m.acc, m.rec, m.prec, m.f1, m.jaccard, m.auc.unwrap()] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn constant_scores_give_chance_auc() {
        let m = classification_metrics(&[0, 1, 0, 1], &[0.5; 4], 0.5).unwrap();
        assert_eq!(m.auc, Some(0.5));
    }

    #[test]
    fn hand_confusion_counts() {
        // TP=2, FP=1, FN=1, TN=6.
        let truth = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0];
        let pred = [0.9, 0.8, 0.7, 0.1, 0.2, 0.2, 0.1, 0.1, 0.3, 0.0];
        let m = classification_metrics(&truth, &pred, 0.5).unwrap();
        assert_relative_eq!(m.prec, 2.0 / 3.0);
        assert_relative_eq!(m.rec, 2.0 / 3.0);
        assert_relative_eq!(m.f1, 2.0 / 3.0);
        assert_relative_eq!(m.jaccard, 0.5);
        assert_relative_eq!(m.acc, 0.8);
    }

    #[test]
    fn single_class_has_no_auc() {
        let m = classification_metrics(&[1, 1, 1], &[0.2, 0.6, 0.9], 0.5).unwrap();
        assert_eq!(m.auc, None);
        assert!(classification_metrics(&[0, 2], &[0.1, 0.2], 0.5).is_err());
        assert!(classification_metrics(&[], &[], 0.5).is_err());
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = crate::seeding::rng_from_seed(8);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 5.0).round() / 5.0).collect();
            let (mut wins, mut pairs) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if truth[i] == 1 && truth[j] == 0 {
                        pairs += 1.0;
                        wins += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            match auc(&truth, &scores) {
                Some(a) => assert_relative_eq!(a, wins / pairs, epsilon = 1e-12),
                None => assert_eq!(pairs, 0.0),
            }
        }
    }

    #[test]
    fn identical_and_permuted_labelings() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        let b: Vec<usize> = a.iter().map(|&x| (x + 1) % 3).collect();
        assert_relative_eq!(adjusted_rand_index(&a, &b).unwrap(), 1.0);
        assert_relative_eq!(aligned_macro_f1(&a, &b).unwrap(), 1.0);
        assert!(adjusted_rand_index(&a, &a[..3]).is_err());
    }

    #[test]
    fn ari_hand_value() {
        // Classic example: ARI = 0.24242...
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 1, 2, 2];
        assert_relative_eq!(adjusted_rand_index(&a, &b).unwrap(), 0.242_424_242_424_242_4, epsilon = 1e-12);
    }

    #[test]
    fn random_labels_have_null_ari() {
        let mut rng = crate::seeding::rng_from_seed(21);
        let truth: Vec<usize> = (0..480).map(|t| t / 120).collect();
        let mut mean = 0.0;
        for _ in 0..100 {
            let pred: Vec<usize> = (0..480).map(|_| rng.random_range(0..4)).collect();
            let ari = adjusted_rand_index(&truth, &pred).unwrap();
            assert!(ari.abs() < 0.05, "{ari}");
            mean += ari / 100.0;
        }
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = crate::seeding::rng_from_seed(3);
        for _ in 0..200 {
            let n = rng.random_range(1..6);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let a = hungarian_min(&cost);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permutations(&mut perm, 0, &mut |p| {
                best = best.min(p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum());
            });
            assert_relative_eq!(got, best, epsilon = 1e-12);
        }
    }

    fn permutations(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permutations(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn fewer_predicted_clusters_lose_f1() {
        let truth = [0, 0, 1, 1];
        let pred = [0, 0, 0, 0];
        let f = aligned_macro_f1(&truth, &pred).unwrap();
        assert_relative_eq!(f, (2.0 * 2.0 / 6.0) / 2.0);
    }

    #[test]
    fn report_format_and_outputs() {
        assert_eq!(format_mean_std(MeanStd { mean: 0.8671, std: 0.0123 }), "0.867(.012)");
        let run = |method: &str, seed, f1| RunMetrics {
            method: method.into(),
            seed,
            classification: ClassificationMetrics { acc: f1, rec: f1, prec: f1, f1, auc: Some(f1), jaccard: f1 },
            segmentation: None,
        };
        let r = EvalReport::from_runs(vec![run("A", 1, 0.8), run("B", 1, 0.6), run("A", 2, 0.9)]);
        assert_eq!(r.summaries.len(), 2);
        assert_relative_eq!(r.summaries[0].metrics["f1"].mean, 0.85);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,runs,acc"));
        assert!(text.contains("A,2,0.850(.071)"));
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path()).unwrap();
        let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(std::fs::read_to_string(dir.path().join("metrics.svg")).unwrap().starts_with("<svg"));
    }

    proptest! {
        #[test]
        fn metrics_invariant_to_evaluation_order(
            pairs in proptest::collection::vec((0usize..2, 0.0f64..1.0), 2..60),
            seed in 0u64..100,
        ) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p1: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let base = classification_metrics(&truth, &p1, 0.5).unwrap();
            let mut idx: Vec<usize> = (0..truth.len()).collect();
            idx.shuffle(&mut crate::seeding::rng_from_seed(seed));
            let t2: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
            let p2: Vec<f64> = idx.iter().map(|&i| p1[i]).collect();
            let other = classification_metrics(&t2, &p2, 0.5).unwrap();
            prop_assert_eq!(base.acc, other.acc);
            prop_assert_eq!(base.f1, other.f1);
            match (base.auc, other.auc) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
            let pred: Vec<usize> = p1.iter().map(|p| (p * 3.0) as usize).collect();
            let pred2: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            let a = adjusted_rand_index(&truth, &pred).unwrap();
            let b = adjusted_rand_index(&t2, &pred2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_to_monotone_transform(pairs in proptest::collection::vec((0usize..2, 0.01f64..0.99), 2..60)) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let s: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let t: Vec<f64> = s.iter().map(|x| (x / (1.0 - x)).ln() * 3.0 + 1.0).collect();
            match (auc(&truth, &s), auc(&truth, &t)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn metrics_stay_in_unit_interval(pairs in proptest::collection::vec((0usize..2, 0.0f64..1.0), 1..60)) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p1: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let m = classification_metrics(&truth, &p1, 0.5).unwrap();
            for v in [m.acc, m.rec, m.prec, m.f1, m.jaccard, m.auc.unwrap_or(0.5)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
