//! Rank-weighted voting over (family, fold) members with per-pixel
//! uncertainty statistics.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_json, save_json, FeatureValue};
use crate::error::{Error, Result};
use crate::learners::{Classifier, Family};
use crate::preprocess::FittedPipeline;
use crate::taxonomy::HabitatCode;

pub const MEMBER_KIND: &str = "member";
pub const MANIFEST_KIND: &str = "ensemble";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Uniform,
    #[default]
    LinearRank,
    ObjectiveProportional,
}

/// One trained model with its encoder and validation score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub classes: Vec<HabitatCode>,
    pub pipeline: FittedPipeline,
    pub classifier: Classifier,
    pub family: Family,
    pub fold: usize,
    pub objective: f64,
}

impl Member {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, MEMBER_KIND, self)
    }

    pub fn load(path: &Path) -> Result<Member> {
        load_json(path, MEMBER_KIND)
    }

    pub fn predict_proba(&self, features: &[FeatureValue]) -> Result<Vec<f64>> {
        self.classifier.predict_proba(&self.pipeline.transform(features)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    /// Combined probability of the top class.
    pub confidence: f64,
    /// Number of members whose top class is each class.
    pub votes: Vec<u32>,
    /// Committee averaging: `votes / members`.
    pub ca: Vec<f64>,
    pub model_spread: f64,
    pub fold_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub classes: Vec<HabitatCode>,
    pub members: Vec<Member>,
    pub weights: Vec<f64>,
    pub scheme: WeightScheme,
}

/// Ranks with ties sharing the mean of the ranks they span; rank 1 is the
/// highest objective.
pub fn average_ranks(objectives: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..objectives.len()).collect();
    idx.sort_by(|&a, &b| objectives[b].total_cmp(&objectives[a]));
    let mut ranks = vec![0.0; objectives.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && objectives[idx[j + 1]] == objectives[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn member_weights(objectives: &[f64], scheme: WeightScheme) -> Result<Vec<f64>> {
    let m = objectives.len();
    if m == 0 {
        return Err(Error::invalid("an ensemble needs at least one member"));
    }
    if objectives.iter().any(|o| !o.is_finite()) {
        return Err(Error::invalid("member objectives must be finite"));
    }
    let raw: Vec<f64> = match scheme {
        WeightScheme::Uniform => vec![1.0; m],
        WeightScheme::LinearRank => average_ranks(objectives)
            .into_iter()
            .map(|r| m as f64 - r + 1.0)
            .collect(),
        WeightScheme::ObjectiveProportional => {
            let clipped: Vec<f64> = objectives.iter().map(|o| o.max(0.0)).collect();
            if clipped.iter().all(|&o| o == 0.0) {
                vec![1.0; m]
            } else {
                clipped
            }
        }
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

fn argmax(v: &[f64]) -> usize {
    crate::learners::forest::argmax(v)
}

fn canonical_order(weights: &[f64], probs: &[Vec<f64>], groups: &[(Family, usize)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| {
        groups[a]
            .cmp(&groups[b])
            .then(weights[a].total_cmp(&weights[b]))
            .then_with(|| {
                probs[a]
                    .iter()
                    .zip(&probs[b])
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
    });
    idx
}

/// Across-group population std of group-mean probabilities, averaged over classes.
fn spread<K: Ord + Copy>(order: &[usize], key: impl Fn(usize) -> K, probs: &[Vec<f64>]) -> f64 {
    let k = probs[0].len();
    let mut groups: Vec<(K, Vec<f64>, usize)> = Vec::new();
    for &i in order {
        let g = key(i);
        let pos = match groups.iter().position(|(kk, _, _)| *kk == g) {
            Some(p) => p,
            None => {
                groups.push((g, vec![0.0; k], 0));
                groups.len() - 1
            }
        };
        let entry = &mut groups[pos];
        for (s, p) in entry.1.iter_mut().zip(&probs[i]) {
            *s += p;
        }
        entry.2 += 1;
    }
    if groups.len() < 2 {
        return 0.0;
    }
    groups.sort_by_key(|g| g.0);
    let means: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, s, n)| s.iter().map(|v| v / *n as f64).collect())
        .collect();
    let g = means.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        // shifted by the first group so identical means give exactly zero
        let x0 = means[0][c];
        let s1 = means.iter().map(|m| m[c] - x0).sum::<f64>() / g;
        let s2 = means.iter().map(|m| (m[c] - x0).powi(2)).sum::<f64>() / g;
        total += (s2 - s1 * s1).max(0.0).sqrt();
    }
    total / k as f64
}

/// Weighted average of member probabilities plus uncertainty statistics.
/// Weights need not be normalized.
/// Members are visited in a canonical order so the result does not depend
/// on how they were listed.
pub fn combine(
    weights: &[f64],
    member_probs: &[Vec<f64>],
    groups: &[(Family, usize)],
) -> Result<(Vec<f64>, Uncertainty)> {
    let m = member_probs.len();
    if m == 0 || weights.len() != m || groups.len() != m {
        return Err(Error::Dimension {
            expected: m.max(1),
            found: weights.len().min(groups.len()),
        });
    }
    let k = member_probs[0].len();
    if let Some(bad) = member_probs.iter().find(|p| p.len() != k) {
        return Err(Error::Dimension {
            expected: k,
            found: bad.len(),
        });
    }
    let order = canonical_order(weights, member_probs, groups);
    let mut p = vec![0.0; k];
    let mut votes = vec![0u32; k];
    let mut total = 0.0;
    for &i in &order {
        for (acc, v) in p.iter_mut().zip(&member_probs[i]) {
            *acc += weights[i] * v;
        }
        total += weights[i];
        votes[argmax(&member_probs[i])] += 1;
    }
    if total.is_nan() || total <= 0.0 {
        return Err(Error::invalid("member weights must have a positive sum"));
    }
    p.iter_mut().for_each(|v| *v /= total);
    let confidence = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ca = votes.iter().map(|&v| v as f64 / m as f64).collect();
    let model_spread = spread(&order, |i| groups[i].0, member_probs);
    let fold_spread = spread(&order, |i| groups[i].1, member_probs);
    Ok((
        p,
        Uncertainty {
            confidence,
            votes,
            ca,
            model_spread,
            fold_spread,
        },
    ))
}

pub fn build_ensemble(members: Vec<Member>, scheme: WeightScheme) -> Result<EnsembleModel> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("an ensemble needs at least one member"))?;
    let classes = first.classes.clone();
    if let Some(bad) = members.iter().find(|m| m.classes != classes) {
        return Err(Error::invalid(format!(
            "member {} fold {} has a different class list",
            bad.family, bad.fold
        )));
    }
    let objectives: Vec<f64> = members.iter().map(|m| m.objective).collect();
    let weights = member_weights(&objectives, scheme)?;
    Ok(EnsembleModel {
        classes,
        members,
        weights,
        scheme,
    })
}

impl EnsembleModel {
    fn groups(&self) -> Vec<(Family, usize)> {
        self.members.iter().map(|m| (m.family, m.fold)).collect()
    }

    pub fn predict(&self, features: &[FeatureValue]) -> Result<(Vec<f64>, Uncertainty)> {
        let probs = self
            .members
            .iter()
            .map(|m| m.predict_proba(features))
            .collect::<Result<Vec<_>>>()?;
        combine(&self.weights, &probs, &self.groups())
    }

    /// Predicts many rows; each member encodes and scores the whole batch.
    pub fn predict_rows(&self, rows: &[Vec<FeatureValue>]) -> Result<Vec<(Vec<f64>, Uncertainty)>> {
        let per_member = self
            .members
            .iter()
            .map(|m| {
                let mut x = Vec::with_capacity(rows.len() * m.pipeline.width());
                for r in rows {
                    m.pipeline.transform_into(r, &mut x)?;
                }
                m.classifier.predict_proba_batch(&x, rows.len())
            })
            .collect::<Result<Vec<_>>>()?;
        let groups = self.groups();
        (0..rows.len())
            .into_par_iter()
            .map(|i| {
                let probs: Vec<Vec<f64>> = per_member.iter().map(|p| p[i].clone()).collect();
                combine(&self.weights, &probs, &groups)
            })
            .collect()
    }

    pub fn manifest(&self, files: &[PathBuf]) -> EnsembleManifest {
        EnsembleManifest {
            classes: self.classes.clone(),
            scheme: self.scheme,
            members: self
                .members
                .iter()
                .zip(files)
                .zip(&self.weights)
                .map(|((m, f), &w)| ManifestEntry {
                    file: f.clone(),
                    family: m.family,
                    fold: m.fold,
                    objective: m.objective,
                    weight: w,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Member file, relative to the manifest's directory.
    pub file: PathBuf,
    pub family: Family,
    pub fold: usize,
    pub objective: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub classes: Vec<HabitatCode>,
    pub scheme: WeightScheme,
    pub members: Vec<ManifestEntry>,
}

impl EnsembleManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, MANIFEST_KIND, self)
    }

    pub fn load(path: &Path) -> Result<EnsembleManifest> {
        load_json(path, MANIFEST_KIND)
    }

    /// Loads every member file and rebuilds the ensemble with the stored scheme.
    pub fn load_ensemble(&self, base: &Path) -> Result<EnsembleModel> {
        let members = self
            .members
            .iter()
            .map(|e| Member::load(&base.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        let ens = build_ensemble(members, self.scheme)?;
        if ens.classes != self.classes {
            return Err(Error::invalid("manifest class list differs from its members"));
        }
        Ok(ens)
    }
}

pub fn load_ensemble(manifest_path: &Path) -> Result<EnsembleModel> {
    let m = EnsembleManifest::load(manifest_path)?;
    m.load_ensemble(manifest_path.parent().unwrap_or(Path::new(".")))
}
