//! Random forest of CART classification trees (gini impurity).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::learners::dataset::Dataset;
use crate::learners::loss::lenient_class_weights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, n_features: usize) -> usize {
        let m = match self {
            MaxFeatures::Sqrt => (n_features as f64).sqrt().floor() as usize,
            MaxFeatures::All => n_features,
            MaxFeatures::Count(c) => c,
        };
        m.clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub max_features: MaxFeatures,
    /// Bootstrap sample size as a fraction of the training set.
    pub max_samples: f64,
    pub min_samples_split: usize,
    pub class_weighted: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 128,
            max_depth: None,
            max_features: MaxFeatures::Sqrt,
            max_samples: 1.0,
            min_samples_split: 2,
            class_weighted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        dist: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { dist } => return dist,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|c| (c / total).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    data: &'a Dataset,
    weights: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&self, idx: &[usize]) -> Node {
        let mut dist = vec![0.0; self.data.n_classes];
        for &i in idx {
            dist[self.data.y[i]] += self.weights[i];
        }
        let total: f64 = dist.iter().sum();
        if total > 0.0 {
            dist.iter_mut().for_each(|d| *d /= total);
        }
        Node::Leaf { dist }
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let k = self.data.n_classes;
        let mut counts = vec![0.0; k];
        for &i in idx.iter() {
            counts[self.data.y[i]] += self.weights[i];
        }
        let total: f64 = counts.iter().sum();
        let parent = gini(&counts, total);
        let at_limit = self.params.max_depth.is_some_and(|d| depth >= d);
        if at_limit || idx.len() < self.params.min_samples_split || parent <= 1e-12 {
            let id = self.nodes.len();
            let node = self.leaf(idx);
            self.nodes.push(node);
            return id;
        }

        let n_features = self.data.n_cols();
        let mut order: Vec<usize> = (0..n_features).collect();
        order.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None; // (impurity decrease, feature, threshold)
        let mut evaluated = 0;
        let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(idx.len());
        let mut left = vec![0.0; k];
        for &f in &order {
            if evaluated >= self.mtry {
                break;
            }
            sorted.clear();
            sorted.extend(idx.iter().map(|&i| (self.data.row(i)[f], i)));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if sorted[0].0 == sorted[sorted.len() - 1].0 {
                continue;
            }
            evaluated += 1;
            left.iter_mut().for_each(|v| *v = 0.0);
            let mut wl = 0.0;
            for s in 0..sorted.len() - 1 {
                let (v, i) = sorted[s];
                let w = self.weights[i];
                left[self.data.y[i]] += w;
                wl += w;
                let next = sorted[s + 1].0;
                if next == v {
                    continue;
                }
                let wr = total - wl;
                if wl <= 0.0 || wr <= 0.0 {
                    continue;
                }
                let (mut sq_l, mut sq_r) = (0.0, 0.0);
                for (c, l) in counts.iter().zip(&left) {
                    sq_l += l * l;
                    sq_r += (c - l) * (c - l);
                }
                // weighted gini of both children
                let child = (wl - sq_l / wl + wr - sq_r / wr) / total;
                let gain = parent - child;
                if best.is_none_or(|(g, _, _)| gain > g + 1e-15) {
                    let mut threshold = 0.5 * (v + next);
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some((gain, f, threshold));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            let id = self.nodes.len();
            let node = self.leaf(idx);
            self.nodes.push(node);
            return id;
        };
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { dist: Vec::new() });
        let data = self.data;
        let mut mid = 0;
        for j in 0..idx.len() {
            if data.row(idx[j])[feature] <= threshold {
                idx.swap(mid, j);
                mid += 1;
            }
        }
        let (l, r) = idx.split_at_mut(mid);
        let left_id = self.grow(l, depth + 1, rng);
        let right_id = self.grow(r, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left: left_id,
            right: right_id,
        };
        id
    }
}

/// Fits one tree on rows `idx` with per-row `weights`.
pub fn fit_tree(data: &Dataset, idx: &[usize], weights: &[f64], params: &ForestParams, rng: &mut ChaCha8Rng) -> Tree {
    let mut b = Builder {
        data,
        weights,
        params,
        mtry: params.max_features.resolve(data.n_cols()),
        nodes: Vec::new(),
    };
    let mut idx = idx.to_vec();
    b.grow(&mut idx, 0, rng);
    Tree { nodes: b.nodes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub n_classes: usize,
    pub trees: Vec<Tree>,
    /// Out-of-bag accuracy over samples left out by at least one tree.
    pub oob_accuracy: Option<f64>,
}

impl Forest {
    pub fn fit(data: &Dataset, params: &ForestParams, seed: u64) -> Forest {
        let n = data.n_rows();
        let class_w = if params.class_weighted {
            lenient_class_weights(&data.class_counts())
        } else {
            vec![1.0; data.n_classes]
        };
        let draws = ((params.max_samples * n as f64).round() as usize).clamp(1, n);
        let results: Vec<(Tree, Vec<usize>)> = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64 + 1);
                let mut multiplicity = vec![0u32; n];
                for _ in 0..draws {
                    multiplicity[rng.gen_range(0..n)] += 1;
                }
                let in_bag: Vec<usize> = (0..n).filter(|&i| multiplicity[i] > 0).collect();
                let weights: Vec<f64> = (0..n).map(|i| multiplicity[i] as f64 * class_w[data.y[i]]).collect();
                let tree = fit_tree(data, &in_bag, &weights, params, &mut rng);
                let oob: Vec<usize> = (0..n).filter(|&i| multiplicity[i] == 0).collect();
                (tree, oob)
            })
            .collect();

        let mut votes = vec![vec![0.0; data.n_classes]; n];
        let mut covered = vec![false; n];
        for (tree, oob) in &results {
            for &i in oob {
                for (v, p) in votes[i].iter_mut().zip(tree.predict(data.row(i))) {
                    *v += p;
                }
                covered[i] = true;
            }
        }
        let scored: Vec<usize> = (0..n).filter(|&i| covered[i]).collect();
        let oob_accuracy = (!scored.is_empty()).then(|| {
            let hits = scored.iter().filter(|&&i| argmax(&votes[i]) == data.y[i]).count();
            hits as f64 / scored.len() as f64
        });
        Forest {
            n_classes: data.n_classes,
            trees: results.into_iter().map(|(t, _)| t).collect(),
            oob_accuracy,
        }
    }

    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (o, p) in out.iter_mut().zip(t.predict(row)) {
                *o += p;
            }
        }
        let s: f64 = out.iter().sum();
        if s > 0.0 {
            out.iter_mut().for_each(|o| *o /= s);
        } else {
            out.iter_mut().for_each(|o| *o = 1.0 / self.n_classes as f64);
        }
        out
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stump_separates_threshold_labels() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y: Vec<usize> = (0..40).map(|i| usize::from(i >= 17)).collect();
        let d = Dataset::numeric(x, 1, y, 2).unwrap();
        let f = Forest::fit(
            &d,
            &ForestParams {
                max_depth: Some(1),
                n_trees: 16,
                ..Default::default()
            },
            1,
        );
        assert!(f.trees.iter().all(|t| t.depth() <= 1));
        // a bootstrap that misses 16 or 17 puts its cut on the missing point
        for i in (0..40).filter(|i| !(16..=17).contains(i)) {
            assert_eq!(argmax(&f.predict_proba(d.row(i))), d.y[i]);
        }
    }

    #[test]
    fn repeated_sample_gives_certainty() {
        let d = Dataset::numeric(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2, vec![1, 1, 1], 3).unwrap();
        let f = Forest::fit(&d, &ForestParams::default(), 0);
        assert_eq!(f.predict_proba(&[1.0, 2.0]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn deterministic_and_simplex() {
        let x: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
        let y: Vec<usize> = (0..100).map(|i| (i * 7) % 3).collect();
        let d = Dataset::numeric(x, 3, y, 3).unwrap();
        let p = ForestParams {
            n_trees: 8,
            ..Default::default()
        };
        let a = Forest::fit(&d, &p, 5);
        let b = Forest::fit(&d, &p, 5);
        assert_eq!(a, b);
        for i in 0..100 {
            let q = a.predict_proba(d.row(i));
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(a.oob_accuracy.is_some());
    }
}
