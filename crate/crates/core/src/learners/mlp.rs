//! Multi-layer perceptron: [embeddings] -> (linear -> batch norm -> relu)* -> linear.
//!
//! Parameters live in one flat vector so optimizers, snapshots and
//! finite-difference checks can treat the network uniformly.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::dataset::Dataset;
use crate::learners::loss::{LossSpec, ResolvedLoss};
use crate::learners::optim::{Optimizer, OptimizerSpec};
use crate::preprocess::{embedding_dim, ColumnKind};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named hidden-layer layouts.
pub const MLP_SHALLOW: [usize; 1] = [128];
pub const MLP_WIDE: [usize; 1] = [1024];
pub const MLP2: [usize; 2] = [256, 128];
pub const MLP3: [usize; 3] = [512, 256, 128];

pub fn architecture(name: &str) -> Option<Vec<usize>> {
    match name {
        "mlps" | "mlp1_shallow" => Some(MLP_SHALLOW.to_vec()),
        "mlpw" | "mlp1_wide" => Some(MLP_WIDE.to_vec()),
        "mlp2" => Some(MLP2.to_vec()),
        "mlp3" => Some(MLP3.to_vec()),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stopping_rounds: Option<usize>,
    pub optimizer: OptimizerSpec,
    pub loss: LossSpec,
    pub temperature_scaled: bool,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden: MLP_SHALLOW.to_vec(),
            batch_norm: true,
            batch_size: 1024,
            max_epochs: 100,
            early_stopping_rounds: Some(10),
            optimizer: OptimizerSpec::radam(),
            loss: LossSpec::default(),
            temperature_scaled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Tensor {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum InputSlot {
    Numeric,
    Embedding { table: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer {
    w: Tensor,
    bias: Option<Tensor>,
    /// (gamma, beta)
    bn: Option<(Tensor, Tensor)>,
}

/// Per-layer batch-norm running mean and variance.
type RunningStats = (Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    n_classes: usize,
    slots: Vec<InputSlot>,
    embeddings: Vec<Tensor>,
    layers: Vec<Layer>,
    params: Vec<f64>,
    /// Running (mean, variance) per batch-normalised layer.
    running: Vec<RunningStats>,
    pub epochs_trained: usize,
    pub valid_loss: Vec<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    zhat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    act_mask: Array2<bool>,
}

struct Forward {
    caches: Vec<LayerCache>,
    last: Array2<f64>,
    logits: Array2<f64>,
    emb_index: Vec<Vec<usize>>,
    batch_stats: Vec<(Array1<f64>, Array1<f64>)>,
}

impl Mlp {
    pub fn new(layout: &[crate::preprocess::Column], n_classes: usize, params: &MlpParams, seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = Vec::new();
        let alloc = |rows: usize, cols: usize, flat: &mut Vec<f64>, init: &mut dyn FnMut() -> f64| {
            let t = Tensor {
                offset: flat.len(),
                rows,
                cols,
            };
            for _ in 0..rows * cols {
                flat.push(init());
            }
            t
        };
        let mut slots = Vec::new();
        let mut embeddings = Vec::new();
        let mut width = 0;
        for col in layout {
            match col.kind {
                ColumnKind::Numeric => {
                    slots.push(InputSlot::Numeric);
                    width += 1;
                }
                ColumnKind::Embedding { cardinality } => {
                    let dim = embedding_dim(cardinality);
                    let t = alloc(cardinality, dim, &mut flat, &mut || rng.gen_range(-1.0..1.0));
                    slots.push(InputSlot::Embedding {
                        table: embeddings.len(),
                    });
                    embeddings.push(t);
                    width += dim;
                }
            }
        }
        let mut layers = Vec::new();
        let mut running = Vec::new();
        let mut fan_in = width;
        for &h in &params.hidden {
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = alloc(fan_in, h, &mut flat, &mut || rng.gen_range(-bound..bound));
            let (bias, bn) = if params.batch_norm {
                let g = alloc(1, h, &mut flat, &mut || 1.0);
                let b = alloc(1, h, &mut flat, &mut || 0.0);
                running.push((vec![0.0; h], vec![1.0; h]));
                (None, Some((g, b)))
            } else {
                (Some(alloc(1, h, &mut flat, &mut || 0.0)), None)
            };
            layers.push(Layer { w, bias, bn });
            fan_in = h;
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = alloc(fan_in, n_classes, &mut flat, &mut || rng.gen_range(-bound..bound));
        let b = alloc(1, n_classes, &mut flat, &mut || rng.gen_range(-bound..bound));
        layers.push(Layer {
            w,
            bias: Some(b),
            bn: None,
        });
        Mlp {
            n_classes,
            slots,
            embeddings,
            layers,
            params: flat,
            running,
            epochs_trained: 0,
            valid_loss: Vec::new(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn set_parameters(&mut self, p: &[f64]) {
        self.params.copy_from_slice(p);
    }

    fn view(&self, t: Tensor) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((t.rows, t.cols), &self.params[t.offset..t.offset + t.len()]).unwrap()
    }

    fn row1(&self, t: Tensor) -> ndarray::ArrayView1<'_, f64> {
        ndarray::ArrayView1::from(&self.params[t.offset..t.offset + t.len()])
    }

    fn expand(&self, x: &[f64], n: usize) -> Result<(Array2<f64>, Vec<Vec<usize>>)> {
        let w = self.slots.len();
        if x.len() != n * w {
            return Err(Error::Dimension {
                expected: n * w,
                found: x.len(),
            });
        }
        let width: usize = self
            .slots
            .iter()
            .map(|s| match s {
                InputSlot::Numeric => 1,
                InputSlot::Embedding { table } => self.embeddings[*table].cols,
            })
            .sum();
        let mut a = Array2::zeros((n, width));
        let mut idx = vec![Vec::with_capacity(n); self.embeddings.len()];
        for i in 0..n {
            let row = &x[i * w..(i + 1) * w];
            let mut c = 0;
            for (s, &v) in self.slots.iter().zip(row) {
                match s {
                    InputSlot::Numeric => {
                        a[[i, c]] = v;
                        c += 1;
                    }
                    InputSlot::Embedding { table } => {
                        let t = self.embeddings[*table];
                        let k = if v >= 0.0 && (v as usize) < t.rows {
                            v as usize
                        } else {
                            0
                        };
                        idx[*table].push(k);
                        let start = t.offset + k * t.cols;
                        for d in 0..t.cols {
                            a[[i, c + d]] = self.params[start + d];
                        }
                        c += t.cols;
                    }
                }
            }
        }
        Ok((a, idx))
    }

    fn forward(&self, x: &[f64], n: usize, train: bool) -> Result<Forward> {
        let (mut a, emb_index) = self.expand(x, n)?;
        let mut caches = Vec::new();
        let mut batch_stats = Vec::new();
        let hidden = &self.layers[..self.layers.len() - 1];
        for (l, layer) in hidden.iter().enumerate() {
            let mut z = a.dot(&self.view(layer.w));
            if let Some(b) = layer.bias {
                z += &self.row1(b);
            }
            let cols = z.ncols();
            let mut mask = Array2::from_elem(z.raw_dim(), false);
            let (zhat, inv_std) = if let Some((g, beta)) = layer.bn {
                let (mean, var) = if train {
                    let (m, v) = column_moments(&z);
                    batch_stats.push((m.clone(), v.clone()));
                    (m, v)
                } else {
                    let (m, v) = &self.running[l];
                    (Array1::from(m.clone()), Array1::from(v.clone()))
                };
                let inv = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let (gv, bv) = (self.row1(g), self.row1(beta));
                let mut zhat = Array2::zeros(z.raw_dim());
                let zs = z.as_slice_mut().expect("standard layout");
                let hs = zhat.as_slice_mut().expect("standard layout");
                let ms = mask.as_slice_mut().expect("standard layout");
                for ((zr, hr), mr) in zs
                    .chunks_exact_mut(cols)
                    .zip(hs.chunks_exact_mut(cols))
                    .zip(ms.chunks_exact_mut(cols))
                {
                    for j in 0..cols {
                        let h = (zr[j] - mean[j]) * inv[j];
                        hr[j] = h;
                        let y = h * gv[j] + bv[j];
                        mr[j] = y > 0.0;
                        zr[j] = y.max(0.0);
                    }
                }
                (Some(zhat), Some(inv))
            } else {
                for (v, m) in z.iter_mut().zip(mask.iter_mut()) {
                    *m = *v > 0.0;
                    *v = v.max(0.0);
                }
                (None, None)
            };
            caches.push(LayerCache {
                input: a,
                zhat,
                inv_std,
                act_mask: mask,
            });
            a = z;
        }
        let out = self.layers.last().unwrap();
        let mut logits = a.dot(&self.view(out.w));
        logits += &self.row1(out.bias.unwrap());
        Ok(Forward {
            caches,
            last: a,
            logits,
            emb_index,
            batch_stats,
        })
    }

    fn backward(&self, fwd: &Forward, dlogits: Array2<f64>) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let put = |grad: &mut Vec<f64>, t: Tensor, g: &Array2<f64>| {
            for (dst, src) in grad[t.offset..t.offset + t.len()].iter_mut().zip(g.iter()) {
                *dst += *src;
            }
        };
        let out = self.layers.last().unwrap();
        put(&mut grad, out.w, &fwd.last.t().dot(&dlogits));
        put(
            &mut grad,
            out.bias.unwrap(),
            &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)),
        );
        let mut da = dlogits.dot(&self.view(out.w).t());
        for (layer, cache) in self.layers[..self.layers.len() - 1].iter().zip(&fwd.caches).rev() {
            let mut dy = da;
            dy.zip_mut_with(&cache.act_mask, |d, &m| {
                if !m {
                    *d = 0.0
                }
            });
            let dz = if let (Some((g, b)), Some(zhat), Some(inv)) = (layer.bn, &cache.zhat, &cache.inv_std) {
                let cols = dy.ncols();
                let n = dy.nrows() as f64;
                let mut sum_dy = vec![0.0; cols];
                let mut sum_dyh = vec![0.0; cols];
                let hs = zhat.as_slice().expect("standard layout");
                let ds = dy.as_slice_mut().expect("standard layout");
                for (dr, hr) in ds.chunks_exact(cols).zip(hs.chunks_exact(cols)) {
                    for j in 0..cols {
                        sum_dy[j] += dr[j];
                        sum_dyh[j] += dr[j] * hr[j];
                    }
                }
                for (dst, v) in grad[g.offset..g.offset + cols].iter_mut().zip(&sum_dyh) {
                    *dst += v;
                }
                for (dst, v) in grad[b.offset..b.offset + cols].iter_mut().zip(&sum_dy) {
                    *dst += v;
                }
                let gv = self.row1(g);
                let scale: Vec<f64> = (0..cols).map(|j| gv[j] * inv[j] / n).collect();
                for (dr, hr) in ds.chunks_exact_mut(cols).zip(hs.chunks_exact(cols)) {
                    for j in 0..cols {
                        dr[j] = scale[j] * (dr[j] * n - sum_dy[j] - hr[j] * sum_dyh[j]);
                    }
                }
                dy
            } else {
                dy
            };
            put(&mut grad, layer.w, &cache.input.t().dot(&dz));
            if let Some(b) = layer.bias {
                put(&mut grad, b, &dz.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            da = dz.dot(&self.view(layer.w).t());
        }
        if !self.embeddings.is_empty() {
            let mut c = 0;
            for s in &self.slots {
                match s {
                    InputSlot::Numeric => c += 1,
                    InputSlot::Embedding { table } => {
                        let t = self.embeddings[*table];
                        for (i, &k) in fwd.emb_index[*table].iter().enumerate() {
                            let start = t.offset + k * t.cols;
                            for d in 0..t.cols {
                                grad[start + d] += da[[i, c + d]];
                            }
                        }
                        c += t.cols;
                    }
                }
            }
        }
        grad
    }

    /// Mean training-mode loss over a batch and its gradient w.r.t. all parameters.
    pub fn loss_and_gradient(&self, x: &[f64], y: &[usize], loss: &ResolvedLoss) -> Result<(f64, Vec<f64>)> {
        let (l, g, _) = self.loss_grad_stats(x, y, loss)?;
        Ok((l, g))
    }

    /// Mean training-mode loss (batch statistics) without gradients.
    pub fn training_loss(&self, x: &[f64], y: &[usize], loss: &ResolvedLoss) -> Result<f64> {
        let fwd = self.forward(x, y.len(), true)?;
        Ok(mean_loss(&fwd.logits, y, loss))
    }

    #[allow(clippy::type_complexity)]
    fn loss_grad_stats(
        &self,
        x: &[f64],
        y: &[usize],
        loss: &ResolvedLoss,
    ) -> Result<(f64, Vec<f64>, Vec<(Array1<f64>, Array1<f64>)>)> {
        let n = y.len();
        let mut fwd = self.forward(x, n, true)?;
        let mut dlogits = Array2::zeros((n, self.n_classes));
        let mut total = 0.0;
        let mut g = vec![0.0; self.n_classes];
        for i in 0..n {
            let z: Vec<f64> = fwd.logits.row(i).to_vec();
            total += loss.loss_and_grad(&z, y[i], &mut g);
            for (c, gc) in g.iter().enumerate() {
                dlogits[[i, c]] = gc / n as f64;
            }
        }
        let grad = self.backward(&fwd, dlogits);
        let stats = std::mem::take(&mut fwd.batch_stats);
        Ok((total / n as f64, grad, stats))
    }

    /// Inference-mode logits for `n` rows.
    pub fn logits_batch(&self, x: &[f64], n: usize) -> Result<Array2<f64>> {
        Ok(self.forward(x, n, false)?.logits)
    }

    pub fn logits(&self, row: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits_batch(row, 1)?.row(0).to_vec())
    }

    fn update_running(&mut self, stats: &[(Array1<f64>, Array1<f64>)], n: usize) {
        let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        for ((rm, rv), (m, v)) in self.running.iter_mut().zip(stats) {
            for j in 0..rm.len() {
                rm[j] = (1.0 - BN_MOMENTUM) * rm[j] + BN_MOMENTUM * m[j];
                rv[j] = (1.0 - BN_MOMENTUM) * rv[j] + BN_MOMENTUM * v[j] * unbias;
            }
        }
    }

    pub fn fit(train: &Dataset, valid: Option<&Dataset>, params: &MlpParams, seed: u64) -> Result<Mlp> {
        if params.early_stopping_rounds.is_some() && valid.is_none() {
            return Err(Error::invalid("early stopping needs a validation set"));
        }
        if params.batch_size < 2 && params.batch_norm {
            return Err(Error::invalid("batch norm needs batches of at least 2 rows"));
        }
        let loss = params.loss.resolve(&train.class_counts())?;
        let mut net = Mlp::new(&train.layout, train.n_classes, params, seed);
        let mut opt = Optimizer::new(params.optimizer.clone(), net.n_params());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = train.n_rows();
        let w = train.n_cols();
        let mut order: Vec<usize> = (0..n).collect();
        let mut best: Option<(f64, Vec<f64>, Vec<RunningStats>, usize)> = None;
        let mut xb = Vec::new();
        let mut yb = Vec::new();
        for epoch in 0..params.max_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(params.batch_size) {
                if chunk.len() < 2 && params.batch_norm {
                    continue;
                }
                xb.clear();
                yb.clear();
                for &i in chunk {
                    xb.extend_from_slice(&train.x[i * w..(i + 1) * w]);
                    yb.push(train.y[i]);
                }
                let (_, grad, stats) = net.loss_grad_stats(&xb, &yb, &loss)?;
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Training(format!("non-finite gradient at epoch {epoch}")));
                }
                opt.step(&mut net.params, &grad);
                net.update_running(&stats, chunk.len());
            }
            net.epochs_trained = epoch + 1;
            if let (Some(patience), Some(v)) = (params.early_stopping_rounds, valid) {
                let logits = net.logits_batch(&v.x, v.n_rows())?;
                let vl = mean_loss(&logits, &v.y, &loss);
                net.valid_loss.push(vl);
                match &best {
                    Some((b, _, _, _)) if vl >= *b => {
                        if epoch - best.as_ref().unwrap().3 >= patience {
                            break;
                        }
                    }
                    _ => best = Some((vl, net.params.clone(), net.running.clone(), epoch)),
                }
            }
        }
        if let Some((_, p, r, _)) = best {
            net.params = p;
            net.running = r;
        }
        Ok(net)
    }
}

/// Column means and population variances of a row-major matrix.
fn column_moments(z: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let cols = z.ncols();
    let n = z.nrows().max(1) as f64;
    let zs = z.as_slice().expect("standard layout");
    let mut mean = Array1::zeros(cols);
    for r in zs.chunks_exact(cols) {
        for j in 0..cols {
            mean[j] += r[j];
        }
    }
    mean /= n;
    let mut var = Array1::zeros(cols);
    for r in zs.chunks_exact(cols) {
        for j in 0..cols {
            let d = r[j] - mean[j];
            var[j] += d * d;
        }
    }
    var /= n;
    (mean, var)
}

fn mean_loss(logits: &Array2<f64>, y: &[usize], loss: &ResolvedLoss) -> f64 {
    let n = y.len().max(1) as f64;
    logits
        .rows()
        .into_iter()
        .zip(y)
        .map(|(z, &l)| loss.loss(&z.to_vec(), l))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::loss::LossSpec;
    use crate::preprocess::Column;

    fn toy(n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..n).map(|i| (i * 5 + 1) % 3).collect();
        (x, y)
    }

    fn layout(cols: &[ColumnKind]) -> Vec<Column> {
        cols.iter()
            .enumerate()
            .map(|(i, &kind)| Column {
                name: format!("c{i}"),
                kind,
            })
            .collect()
    }

    fn check_gradient(net: &mut Mlp, x: &[f64], y: &[usize], loss: &ResolvedLoss) {
        let (_, g) = net.loss_and_gradient(x, y, loss).unwrap();
        let base = net.parameters().to_vec();
        let h = 1e-6;
        for j in 0..base.len() {
            let mut p = base.clone();
            p[j] += h;
            net.set_parameters(&p);
            let up = net.training_loss(x, y, loss).unwrap();
            p[j] -= 2.0 * h;
            net.set_parameters(&p);
            let down = net.training_loss(x, y, loss).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {j}: fd {fd} vs analytic {}", g[j]);
        }
        net.set_parameters(&base);
    }

    #[test]
    fn gradients_with_embeddings_and_without_batch_norm() {
        let lay = layout(&[
            ColumnKind::Numeric,
            ColumnKind::Embedding { cardinality: 4 },
            ColumnKind::Numeric,
        ]);
        let (mut x, y) = toy(12, 3);
        for i in 0..12 {
            x[i * 3 + 1] = (i % 4) as f64;
        }
        for bn in [true, false] {
            let params = MlpParams {
                hidden: vec![5, 4],
                batch_norm: bn,
                ..Default::default()
            };
            let mut net = Mlp::new(&lay, 3, &params, 7);
            let loss = LossSpec::focal(2.0).resolve(&[4, 4, 4]).unwrap();
            check_gradient(&mut net, &x, &y, &loss);
        }
    }

    #[test]
    fn learns_a_simple_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 600;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<usize> = (0..n).map(|i| usize::from(x[2 * i] + x[2 * i + 1] > 0.0)).collect();
        let d = Dataset::numeric(x, 2, y, 2).unwrap();
        let params = MlpParams {
            hidden: vec![16],
            batch_size: 64,
            max_epochs: 40,
            early_stopping_rounds: None,
            optimizer: OptimizerSpec::RAdam {
                lr: 0.01,
                weight_decay: 0.0,
            },
            ..Default::default()
        };
        let net = Mlp::fit(&d, None, &params, 2).unwrap();
        let logits = net.logits_batch(&d.x, n).unwrap();
        let acc = (0..n)
            .filter(|&i| {
                let r = logits.row(i);
                usize::from(r[1] > r[0]) == d.y[i]
            })
            .count() as f64
            / n as f64;
        assert!(acc > 0.95, "{acc}");
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, y) = toy(50, 4);
        let d = Dataset::numeric(x, 3, y, 3).unwrap();
        let params = MlpParams {
            hidden: vec![8],
            batch_size: 16,
            max_epochs: 3,
            early_stopping_rounds: None,
            ..Default::default()
        };
        let a = Mlp::fit(&d, None, &params, 9).unwrap();
        let b = Mlp::fit(&d, None, &params, 9).unwrap();
        assert_eq!(a, b);
    }
}
