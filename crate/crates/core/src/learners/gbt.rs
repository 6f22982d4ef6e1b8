//! Histogram gradient-boosted trees with a softmax objective.
//!
//! Each round fits one regression tree per class on the second-order
//! expansion of the multiclass log-loss. Features are pre-binned into
//! quantile bins; splits are searched on bin histograms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::dataset::Dataset;
use crate::learners::loss::{lenient_class_weights, log_softmax, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub max_iters: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub early_stopping_rounds: Option<usize>,
    pub min_delta: f64,
    pub bins: usize,
    pub sample_weighted: bool,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub min_child_weight: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            max_iters: 512,
            learning_rate: 0.1,
            max_depth: 6,
            early_stopping_rounds: Some(10),
            min_delta: 0.001,
            bins: 64,
            sample_weighted: false,
            lambda: 1.0,
            min_child_weight: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum RegNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegTree {
    nodes: Vec<RegNode>,
}

impl RegTree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                RegNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
                RegNode::Leaf(v) => return *v,
            }
        }
    }
}

/// Quantile cut points per feature; bin `b` holds values in `(cut[b-1], cut[b]]`.
#[derive(Debug, Clone, PartialEq)]
struct Binner {
    cuts: Vec<Vec<f64>>,
}

impl Binner {
    fn fit(data: &Dataset, max_bins: usize) -> Binner {
        let n = data.n_rows();
        let max_bins = max_bins.clamp(2, 256);
        let cuts = (0..data.n_cols())
            .map(|f| {
                let mut vals: Vec<f64> = (0..n).map(|i| data.row(i)[f]).collect();
                vals.sort_by(f64::total_cmp);
                let mut uniq = vals.clone();
                uniq.dedup();
                if uniq.len() <= max_bins {
                    uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
                } else {
                    let mut cuts: Vec<f64> = (1..max_bins).map(|b| vals[(b * n) / max_bins]).collect();
                    cuts.dedup();
                    if cuts.last() == vals.last() {
                        cuts.pop();
                    }
                    cuts
                }
            })
            .collect();
        Binner { cuts }
    }

    fn bin(&self, f: usize, v: f64) -> u8 {
        self.cuts[f].partition_point(|&c| c < v) as u8
    }

    fn n_bins(&self, f: usize) -> usize {
        self.cuts[f].len() + 1
    }
}

struct TreeBuilder<'a> {
    binned: &'a [u8],
    n_cols: usize,
    binner: &'a Binner,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a GbtParams,
    nodes: Vec<RegNode>,
}

impl TreeBuilder<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.params.lambda) * self.params.learning_rate
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.params.lambda)
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let (g, h) = idx
            .iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]));
        let id = self.nodes.len();
        self.nodes.push(RegNode::Leaf(self.leaf_value(g, h)));
        if depth >= self.params.max_depth || idx.len() < 2 {
            return id;
        }
        let parent = self.score(g, h);
        let best = (0..self.n_cols)
            .into_par_iter()
            .filter_map(|f| {
                let nb = self.binner.n_bins(f);
                if nb < 2 {
                    return None;
                }
                let mut hg = vec![0.0; nb];
                let mut hh = vec![0.0; nb];
                for &i in idx.iter() {
                    let b = self.binned[i * self.n_cols + f] as usize;
                    hg[b] += self.grad[i];
                    hh[b] += self.hess[i];
                }
                let mut best: Option<(f64, usize)> = None;
                let (mut gl, mut hl) = (0.0, 0.0);
                for b in 0..nb - 1 {
                    gl += hg[b];
                    hl += hh[b];
                    let (gr, hr) = (g - gl, h - hl);
                    if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                        continue;
                    }
                    let gain = self.score(gl, hl) + self.score(gr, hr) - parent;
                    if gain > 1e-12 && best.is_none_or(|(bg, _)| gain > bg) {
                        best = Some((gain, b));
                    }
                }
                best.map(|(gain, b)| (gain, f, b))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(None, |acc: Option<(f64, usize, usize)>, cand| match acc {
                Some(a) if a.0 >= cand.0 => Some(a),
                _ => Some(cand),
            });
        let Some((_, feature, bin)) = best else {
            return id;
        };
        let mut mid = 0;
        for j in 0..idx.len() {
            if self.binned[idx[j] * self.n_cols + feature] as usize <= bin {
                idx.swap(mid, j);
                mid += 1;
            }
        }
        let (l, r) = idx.split_at_mut(mid);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = RegNode::Split {
            feature,
            threshold: self.binner.cuts[feature][bin],
            left,
            right,
        };
        id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbt {
    pub n_classes: usize,
    pub base_score: Vec<f64>,
    /// `rounds[r][k]` is the tree for class `k` in round `r`.
    pub rounds: Vec<Vec<RegTree>>,
    /// Training log-loss after each kept round.
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
}

fn mean_logloss(scores: &[f64], y: &[usize], k: usize) -> f64 {
    let n = y.len().max(1) as f64;
    y.iter()
        .enumerate()
        .map(|(i, &l)| -log_softmax(&scores[i * k..(i + 1) * k])[l])
        .sum::<f64>()
        / n
}

impl Gbt {
    pub fn fit(train: &Dataset, valid: Option<&Dataset>, params: &GbtParams) -> Result<Gbt> {
        if params.early_stopping_rounds.is_some() && valid.is_none() {
            return Err(Error::invalid("early stopping needs a validation set"));
        }
        let k = train.n_classes;
        let n = train.n_rows();
        let w = train.n_cols();
        let binner = Binner::fit(train, params.bins);
        let binned: Vec<u8> = (0..n)
            .flat_map(|i| {
                let b = &binner;
                train.row(i).iter().enumerate().map(move |(f, &v)| b.bin(f, v))
            })
            .collect();
        let counts = train.class_counts();
        let class_w = if params.sample_weighted {
            let cw = lenient_class_weights(&counts);
            let present = counts.iter().filter(|&&c| c > 0).count() as f64;
            // rescale so the mean sample weight is comparable to 1
            cw.iter().map(|v| v * present).collect()
        } else {
            vec![1.0; k]
        };
        let sample_w: Vec<f64> = train.y.iter().map(|&l| class_w[l]).collect();

        let wsum: f64 = sample_w.iter().sum();
        let mut prior = vec![0.0; k];
        for (i, &l) in train.y.iter().enumerate() {
            prior[l] += sample_w[i];
        }
        let logs: Vec<f64> = prior.iter().map(|p| (p / wsum).max(1e-6).ln()).collect();
        let mean = logs.iter().sum::<f64>() / k as f64;
        let base_score: Vec<f64> = logs.iter().map(|l| l - mean).collect();

        let mut scores: Vec<f64> = (0..n).flat_map(|_| base_score.iter().copied()).collect();
        let mut vscores: Vec<f64> = valid
            .map(|v| (0..v.n_rows()).flat_map(|_| base_score.iter().copied()).collect())
            .unwrap_or_default();

        let hess_scale = if k > 1 { k as f64 / (k as f64 - 1.0) } else { 1.0 };
        let mut model = Gbt {
            n_classes: k,
            base_score,
            rounds: Vec::new(),
            train_loss: Vec::new(),
            valid_loss: Vec::new(),
        };
        let mut best = (f64::INFINITY, 0usize);
        for round in 0..params.max_iters {
            let mut grads = vec![vec![0.0; n]; k];
            let mut hess = vec![vec![0.0; n]; k];
            for i in 0..n {
                let p = softmax(&scores[i * k..(i + 1) * k]);
                for c in 0..k {
                    let target = if train.y[i] == c { 1.0 } else { 0.0 };
                    grads[c][i] = sample_w[i] * (p[c] - target);
                    hess[c][i] = sample_w[i] * (hess_scale * p[c] * (1.0 - p[c])).max(1e-16);
                }
            }
            let trees: Vec<RegTree> = (0..k)
                .into_par_iter()
                .map(|c| {
                    let mut b = TreeBuilder {
                        binned: &binned,
                        n_cols: w,
                        binner: &binner,
                        grad: &grads[c],
                        hess: &hess[c],
                        params,
                        nodes: Vec::new(),
                    };
                    let mut idx: Vec<usize> = (0..n).collect();
                    b.grow(&mut idx, 0);
                    RegTree { nodes: b.nodes }
                })
                .collect();
            for i in 0..n {
                let row = train.row(i);
                for (c, t) in trees.iter().enumerate() {
                    scores[i * k + c] += t.predict(row);
                }
            }
            model.train_loss.push(mean_logloss(&scores, &train.y, k));
            if let Some(v) = valid {
                for i in 0..v.n_rows() {
                    let row = v.row(i);
                    for (c, t) in trees.iter().enumerate() {
                        vscores[i * k + c] += t.predict(row);
                    }
                }
                model.valid_loss.push(mean_logloss(&vscores, &v.y, k));
            }
            model.rounds.push(trees);

            if let (Some(patience), Some(&vl)) = (params.early_stopping_rounds, model.valid_loss.last()) {
                if vl < best.0 - params.min_delta {
                    best = (vl, round);
                } else if round - best.1 >= patience {
                    break;
                }
            }
        }
        if params.early_stopping_rounds.is_some() && !model.rounds.is_empty() {
            let keep = best.1 + 1;
            model.rounds.truncate(keep);
            model.train_loss.truncate(keep);
            model.valid_loss.truncate(keep);
        }
        Ok(model)
    }

    pub fn logits(&self, row: &[f64]) -> Vec<f64> {
        let mut z = self.base_score.clone();
        for trees in &self.rounds {
            for (c, t) in trees.iter().enumerate() {
                z[c] += t.predict(row);
            }
        }
        z
    }
}
