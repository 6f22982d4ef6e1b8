//! Classification metrics and per-formation summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::taxonomy::{HabitatCode, Taxonomy};

/// Recall averaged over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<f64> {
    let (recalls, _) = recalls(y_true, y_pred, n_classes)?;
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

fn recalls(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<(Vec<f64>, usize)> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Dimension {
            expected: y_true.len(),
            found: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut support = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::invalid(format!("label out of range for {n_classes} classes")));
        }
        support[t] += 1;
        hits[t] += usize::from(t == p);
    }
    let r: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(&s, _)| s > 0)
        .map(|(&s, &h)| h as f64 / s as f64)
        .collect();
    let present = r.len();
    Ok((r, present))
}

/// Chance-corrected balanced accuracy: `(BA - 1/C) / (1 - 1/C)` with `C`
/// the number of classes present in `y_true`. With a single class present
/// the plain balanced accuracy is returned.
pub fn adjusted_ba(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<f64> {
    let (r, c) = recalls(y_true, y_pred, n_classes)?;
    let ba = r.iter().sum::<f64>() / c as f64;
    if c < 2 {
        return Ok(ba);
    }
    let chance = 1.0 / c as f64;
    Ok((ba - chance) / (1.0 - chance))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: HabitatCode,
    pub precision: f64,
    /// Absent when the class never occurs in the reference labels.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormationSummary {
    pub formation: HabitatCode,
    pub n_classes: usize,
    pub f1: Option<MeanStd>,
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub classes: Vec<HabitatCode>,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are reference classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub per_formation: Vec<FormationSummary>,
    pub accuracy: f64,
}

/// Per-class precision, recall and F1 over the union of reference and
/// predicted classes, sorted by code.
pub fn evaluate(y_true: &[HabitatCode], y_pred: &[HabitatCode], taxonomy: Option<&Taxonomy>) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Dimension {
            expected: y_true.len(),
            found: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    if let Some(t) = taxonomy {
        for c in y_true.iter().chain(y_pred) {
            t.validate(c)?;
        }
    }
    let mut classes: Vec<HabitatCode> = y_true.iter().chain(y_pred).cloned().collect();
    classes.sort();
    classes.dedup();
    let index: BTreeMap<&HabitatCode, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (t, p) in y_true.iter().zip(y_pred) {
        confusion[index[t]][index[p]] += 1;
    }
    Ok(report_from_confusion(classes, confusion))
}

/// Builds the report from a square confusion matrix over `classes`.
pub fn report_from_confusion(classes: Vec<HabitatCode>, confusion: Vec<Vec<usize>>) -> MetricsReport {
    let k = classes.len();
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|i| {
            let tp = confusion[i][i];
            let support: usize = confusion[i].iter().sum();
            let predicted: usize = (0..k).map(|r| confusion[r][i]).sum();
            let precision = if predicted > 0 {
                tp as f64 / predicted as f64
            } else {
                0.0
            };
            let recall = (support > 0).then(|| tp as f64 / support as f64);
            let f1 = recall.map(|r| {
                if precision + r > 0.0 {
                    2.0 * precision * r / (precision + r)
                } else {
                    0.0
                }
            });
            ClassMetrics {
                class: classes[i].clone(),
                precision,
                recall,
                f1,
                support,
                predicted,
            }
        })
        .collect();
    let mut groups: BTreeMap<HabitatCode, Vec<&ClassMetrics>> = BTreeMap::new();
    for m in &per_class {
        groups.entry(m.class.formation()).or_default().push(m);
    }
    let per_formation = groups
        .into_iter()
        .map(|(formation, ms)| {
            let scored: Vec<&&ClassMetrics> = ms.iter().filter(|m| m.recall.is_some()).collect();
            let pick = |f: &dyn Fn(&ClassMetrics) -> f64| MeanStd::of(&scored.iter().map(|m| f(m)).collect::<Vec<_>>());
            FormationSummary {
                formation,
                n_classes: scored.len(),
                f1: pick(&|m| m.f1.unwrap_or(0.0)),
                precision: pick(&|m| m.precision),
                recall: pick(&|m| m.recall.unwrap_or(0.0)),
            }
        })
        .collect();
    MetricsReport {
        classes,
        per_class,
        confusion,
        per_formation,
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

fn summary_cell(v: Option<MeanStd>) -> String {
    v.map_or_else(|| "-".to_string(), |m| m.to_string())
}

impl MetricsReport {
    pub fn get(&self, class: &HabitatCode) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|m| &m.class == class)
    }

    /// Formation summary block followed by one row per class.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("formation\tclasses\tf1\tprecision\trecall\n");
        for f in &self.per_formation {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                f.formation,
                f.n_classes,
                summary_cell(f.f1),
                summary_cell(f.precision),
                summary_cell(f.recall)
            );
        }
        out.push_str("\nclass\tf1\tprecision\trecall\tsupport\n");
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                m.class,
                cell(m.f1),
                cell(Some(m.precision)),
                cell(m.recall),
                m.support
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code(s: &str) -> HabitatCode {
        HabitatCode::parse(s).unwrap()
    }

    #[test]
    fn adjusted_ba_examples() {
        let y = [0, 1, 2, 3, 0, 1, 2, 3];
        assert_eq!(adjusted_ba(&y, &y, 4).unwrap(), 1.0);
        assert_eq!(adjusted_ba(&y, &[2; 8], 4).unwrap(), 0.0);
        let t = [0, 0, 0, 0, 1, 1, 1, 1];
        let p = [0, 0, 0, 0, 1, 0, 0, 0];
        assert!((balanced_accuracy(&t, &p, 2).unwrap() - 0.625).abs() < 1e-15);
        assert!((adjusted_ba(&t, &p, 2).unwrap() - 0.25).abs() < 1e-15);
        // class 2 never true: excluded from the mean
        assert_eq!(adjusted_ba(&[0, 1], &[0, 2], 3).unwrap(), 0.0);
        assert!(adjusted_ba(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn adjusted_ba_is_relabel_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t: Vec<usize> = (0..50).map(|_| rng.gen_range(0..4)).collect();
            let p: Vec<usize> = (0..50).map(|_| rng.gen_range(0..4)).collect();
            let perm = [2, 0, 3, 1];
            let t2: Vec<usize> = t.iter().map(|&v| perm[v]).collect();
            let p2: Vec<usize> = p.iter().map(|&v| perm[v]).collect();
            let a = adjusted_ba(&t, &p, 4).unwrap();
            let b = adjusted_ba(&t2, &p2, 4).unwrap();
            assert!((a - b).abs() < 1e-12);
            let c = t.iter().collect::<std::collections::BTreeSet<_>>().len() as f64;
            assert!(a >= -1.0 / (c - 1.0) - 1e-12 && a <= 1.0);
        }
    }

    #[test]
    fn confusion_example() {
        let classes = vec![code("T11"), code("T12")];
        let r = report_from_confusion(classes, vec![vec![8, 2], vec![4, 6]]);
        let m = &r.per_class[0];
        assert_eq!(m.recall, Some(0.8));
        assert!((m.precision - 8.0 / 12.0).abs() < 1e-15);
        assert!((m.f1.unwrap() - 0.727).abs() < 1e-3);
        assert_eq!(r.per_class.iter().map(|m| m.support).sum::<usize>(), 20);
        let tsv = r.to_tsv();
        assert!(tsv.contains("T11\t0.727\t0.667\t0.800\t10"), "{tsv}");
    }

    #[test]
    fn predicted_but_never_true_has_no_recall() {
        let t = vec![code("T11"), code("T11")];
        let p = vec![code("T11"), code("T12")];
        let r = evaluate(&t, &p, None).unwrap();
        let m = r.get(&code("T12")).unwrap();
        assert_eq!(m.recall, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.precision, 0.0);
        assert!(r.to_tsv().contains("T12\t-\t0.000\t-\t0"));
    }

    #[test]
    fn perfect_predictions_score_one() {
        let t: Vec<HabitatCode> = ["T11", "T12", "R21", "T11"].iter().map(|c| code(c)).collect();
        let r = evaluate(&t, &t, None).unwrap();
        for m in &r.per_class {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, Some(1.0), Some(1.0)));
        }
        assert_eq!(r.per_formation[1].f1.unwrap().to_string(), "1.00 ± 0.00");
    }

    #[test]
    fn formation_summary_format() {
        let s = MeanStd::of(&[0.76, 0.98]).unwrap();
        assert_eq!(s.to_string(), "0.87 ± 0.11");
    }

    #[test]
    fn matches_brute_force_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pool: Vec<HabitatCode> = ["Q11", "Q12", "T11", "T12", "T13"].iter().map(|c| code(c)).collect();
        for _ in 0..50 {
            let n = rng.gen_range(1..80);
            let t: Vec<HabitatCode> = (0..n).map(|_| pool[rng.gen_range(0..5)].clone()).collect();
            let p: Vec<HabitatCode> = (0..n).map(|_| pool[rng.gen_range(0..5)].clone()).collect();
            let r = evaluate(&t, &p, None).unwrap();
            for m in &r.per_class {
                let tp = t
                    .iter()
                    .zip(&p)
                    .filter(|(a, b)| **a == m.class && **b == m.class)
                    .count();
                let sup = t.iter().filter(|a| **a == m.class).count();
                let pred = p.iter().filter(|b| **b == m.class).count();
                assert_eq!(m.support, sup);
                assert_eq!(m.predicted, pred);
                assert_eq!(m.recall, (sup > 0).then(|| tp as f64 / sup as f64));
                assert_eq!(m.precision, if pred > 0 { tp as f64 / pred as f64 } else { 0.0 });
            }
            // micro recall equals accuracy
            let tp: usize = r
                .per_class
                .iter()
                .map(|m| {
                    r.confusion[r.classes.iter().position(|c| *c == m.class).unwrap()]
                        [r.classes.iter().position(|c| *c == m.class).unwrap()]
                })
                .sum();
            let acc = t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / n as f64;
            assert_eq!(tp as f64 / n as f64, acc);
            assert_eq!(r.accuracy, acc);
        }
    }
}
