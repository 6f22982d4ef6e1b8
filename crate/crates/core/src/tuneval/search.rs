//! Staged hyperparameter search: quasi-random start-up trials followed by a
//! two-density Parzen surrogate, or a plain grid for neural networks.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::learners::{self, forest::argmax, Dataset, Family, LossSpec, ModelSpec};
use crate::tuneval::metrics::adjusted_ba;

pub type Config = BTreeMap<String, Value>;

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.10;
const GOOD_FRACTION: f64 = 0.25;
const N_CANDIDATES: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Choice { values: Vec<Value> },
}

impl Domain {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            Domain::Uniform { lo, hi } => lo < hi,
            Domain::LogUniform { lo, hi } => *lo > 0.0 && lo < hi,
            Domain::Integer { lo, hi } => lo < hi,
            Domain::Choice { values } => !values.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("empty or inverted domain for `{name}`")))
        }
    }

    fn n_choices(&self) -> Option<usize> {
        match self {
            Domain::Choice { values } => Some(values.len()),
            _ => None,
        }
    }

    /// Maps a unit-interval coordinate to a value.
    fn decode(&self, u: f64) -> Value {
        let u = u.clamp(0.0, 1.0);
        match self {
            Domain::Uniform { lo, hi } => Value::from(lo + u * (hi - lo)),
            Domain::LogUniform { lo, hi } => Value::from((lo.ln() + u * (hi.ln() - lo.ln())).exp()),
            Domain::Integer { lo, hi } => {
                let span = (hi - lo + 1) as f64;
                Value::from((*lo + (u * span).floor() as i64).min(*hi))
            }
            Domain::Choice { values } => {
                let i = ((u * values.len() as f64).floor() as usize).min(values.len() - 1);
                values[i].clone()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    /// Optimiser and model structure.
    B,
    /// Regularisation, tuned with the stage-B optimum fixed.
    C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub domain: Domain,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<Param>,
}

fn p(name: &str, domain: Domain, stage: Stage) -> Param {
    Param {
        name: name.to_string(),
        domain,
        stage,
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for q in &self.params {
            q.domain.validate(&q.name)?;
        }
        Ok(())
    }

    fn stage(&self, s: Stage) -> Vec<&Param> {
        self.params.iter().filter(|q| q.stage == s).collect()
    }

    /// Default spaces. Neural networks get a grid over the four layouts
    /// and the given losses.
    pub fn default_for(family: Family) -> SearchSpace {
        use Domain::*;
        use Stage::*;
        let params = match family {
            Family::Bagging => vec![
                p("max_depth", Integer { lo: 3, hi: 16 }, B),
                p(
                    "class_weighted",
                    Choice {
                        values: vec![false.into(), true.into()],
                    },
                    B,
                ),
                p("min_samples_split", Integer { lo: 2, hi: 20 }, C),
                p("max_samples", Uniform { lo: 0.5, hi: 1.0 }, C),
            ],
            Family::Boosting => vec![
                p("learning_rate", LogUniform { lo: 0.01, hi: 0.3 }, B),
                p("max_depth", Integer { lo: 3, hi: 8 }, B),
                p(
                    "sample_weighted",
                    Choice {
                        values: vec![false.into(), true.into()],
                    },
                    B,
                ),
                p("lambda", LogUniform { lo: 0.1, hi: 10.0 }, C),
                p("min_child_weight", LogUniform { lo: 1e-3, hi: 10.0 }, C),
            ],
            Family::Neural => {
                let losses = [
                    LossSpec::default().weighted(),
                    LossSpec::focal(5.0),
                    LossSpec::ldam(0.5).weighted(),
                    LossSpec::ldam(0.5),
                ];
                neural_grid(&losses)
            }
        };
        SearchSpace { params }
    }
}

/// Grid over the four named layouts crossed with `losses`.
pub fn neural_grid(losses: &[LossSpec]) -> Vec<Param> {
    let archs = ["mlp1_shallow", "mlp1_wide", "mlp2", "mlp3"]
        .iter()
        .map(|a| serde_json::to_value(learners::mlp::architecture(a).unwrap()).unwrap())
        .collect();
    vec![
        p("hidden", Domain::Choice { values: archs }, Stage::B),
        p(
            "loss",
            Domain::Choice {
                values: losses.iter().map(|l| serde_json::to_value(l).unwrap()).collect(),
            },
            Stage::B,
        ),
    ]
}

/// Overwrites named hyperparameters of `base`.
pub fn apply_config(base: &ModelSpec, config: &Config) -> Result<ModelSpec> {
    let mut v = serde_json::to_value(base)?;
    let params = v
        .get_mut("params")
        .and_then(Value::as_object_mut)
        .ok_or_else(|| Error::invalid("model spec has no parameter object"))?;
    for (k, val) in config {
        if !params.contains_key(k) {
            return Err(Error::invalid(format!(
                "unknown hyperparameter `{k}` for {}",
                base.family()
            )));
        }
        params.insert(k.clone(), val.clone());
    }
    serde_json::from_value(v).map_err(|e| Error::invalid(format!("bad hyperparameter value: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Pruned,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub stage: Stage,
    pub config: Config,
    pub objective: Option<f64>,
    pub status: TrialStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: Config,
    pub best_objective: f64,
    pub trials: Vec<TrialRecord>,
}

pub fn write_trials(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trial", "stage", "config", "objective", "status"])?;
    for t in trials {
        let status = match t.status {
            TrialStatus::Completed => "completed",
            TrialStatus::Pruned => "pruned",
            TrialStatus::Failed => "failed",
        };
        w.write_record([
            t.trial.to_string(),
            format!("{:?}", t.stage),
            serde_json::to_string(&t.config)?,
            t.objective.map_or_else(String::new, |o| o.to_string()),
            status.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Randomly shifted Halton point `i` in `dims` dimensions.
pub fn halton(i: usize, shift: &[f64]) -> Vec<f64> {
    shift
        .iter()
        .enumerate()
        .map(|(d, s)| (radical_inverse(i as u64 + 1, PRIMES[d % PRIMES.len()]) + s).fract())
        .collect()
}

/// Tree-structured Parzen proposal over unit-cube coordinates.
struct Parzen<'a> {
    params: &'a [&'a Param],
}

impl Parzen<'_> {
    fn bandwidth(n: usize) -> f64 {
        (0.5 * (n.max(1) as f64).powf(-0.2)).clamp(0.02, 0.5)
    }

    fn log_density(&self, points: &[&Vec<f64>], x: &[f64]) -> f64 {
        let n = points.len();
        let sigma = Self::bandwidth(n);
        let mut total = 0.0;
        for (d, q) in self.params.iter().enumerate() {
            let dens = match q.domain.n_choices() {
                Some(k) => {
                    let bin = |u: f64| ((u * k as f64).floor() as usize).min(k - 1);
                    let hits = points.iter().filter(|p| bin(p[d]) == bin(x[d])).count();
                    // one prior pseudo-count spread over the choices
                    (hits as f64 + 1.0 / k as f64) / (n as f64 + 1.0)
                }
                None => {
                    let kernel = |m: f64| {
                        let z = (x[d] - m) / sigma;
                        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
                    };
                    // uniform prior counts as one extra component
                    (points.iter().map(|p| kernel(p[d])).sum::<f64>() + 1.0) / (n as f64 + 1.0)
                }
            };
            total += dens.max(1e-300).ln();
        }
        total
    }

    fn sample(&self, good: &[&Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sigma = Self::bandwidth(good.len());
        let centre = good.choose(rng).expect("non-empty good set");
        self.params
            .iter()
            .enumerate()
            .map(|(d, q)| match q.domain.n_choices() {
                Some(_) if rng.gen_bool(0.8) => centre[d],
                Some(_) => rng.gen::<f64>(),
                None => {
                    let z: f64 = rng.sample(StandardNormal);
                    (centre[d] + sigma * z).clamp(0.0, 1.0 - 1e-12)
                }
            })
            .collect()
    }
}

fn decode(params: &[&Param], u: &[f64], fixed: &Config) -> Config {
    let mut c = fixed.clone();
    for (q, &x) in params.iter().zip(u) {
        c.insert(q.name.clone(), q.domain.decode(x));
    }
    c
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Maximises `objective` over `space` within `budget` evaluations.
/// `objective` receives a config and a per-trial seed.
pub fn optimize<F>(space: &SearchSpace, budget: usize, seed: u64, objective: F) -> Result<TuneOutcome>
where
    F: Fn(&Config, u64) -> Result<f64> + Sync,
{
    space.validate()?;
    if budget == 0 {
        return Err(Error::invalid("tuning budget must be at least 1"));
    }
    let b_params = space.stage(Stage::B);
    let c_params = space.stage(Stage::C);
    let (b_budget, c_budget) = if c_params.is_empty() {
        (budget, 0)
    } else if b_params.is_empty() {
        (0, budget)
    } else {
        let b = budget.div_ceil(2);
        (b, budget - b)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials: Vec<TrialRecord> = Vec::new();
    let mut last_error: Option<Error> = None;
    let mut fixed = Config::new();
    for (stage, params, stage_budget) in [(Stage::B, &b_params, b_budget), (Stage::C, &c_params, c_budget)] {
        if stage_budget == 0 {
            continue;
        }
        let start = trials.len();
        let n_startup = (stage_budget / 4).max(5).min(stage_budget);
        let shift: Vec<f64> = (0..params.len()).map(|_| rng.gen()).collect();
        let mut points: Vec<Vec<f64>> = (0..n_startup).map(|i| halton(i, &shift)).collect();
        let first: Vec<(Config, Result<f64>)> = points
            .par_iter()
            .enumerate()
            .map(|(i, u)| {
                let cfg = decode(params, u, &fixed);
                let r = objective(&cfg, seed.wrapping_add((start + i) as u64));
                (cfg, r)
            })
            .collect();
        let mut scores: Vec<Option<f64>> = Vec::new();
        for (cfg, r) in first {
            record(&mut trials, stage, cfg, r, &mut scores, &mut last_error);
        }
        for _ in n_startup..stage_budget {
            let done: Vec<(usize, f64)> = scores
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.map(|v| (i, v)))
                .collect();
            let u = if done.len() < 2 {
                (0..params.len()).map(|_| rng.gen()).collect()
            } else {
                let mut ranked = done.clone();
                ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let n_good = ((GOOD_FRACTION * ranked.len() as f64).ceil() as usize).max(1);
                let good: Vec<&Vec<f64>> = ranked[..n_good].iter().map(|(i, _)| &points[*i]).collect();
                let bad: Vec<&Vec<f64>> = ranked[n_good..].iter().map(|(i, _)| &points[*i]).collect();
                let parzen = Parzen { params };
                let mut best: Option<(f64, Vec<f64>)> = None;
                for _ in 0..N_CANDIDATES {
                    let x = parzen.sample(&good, &mut rng);
                    let score = parzen.log_density(&good, &x) - parzen.log_density(&bad, &x);
                    if best.as_ref().is_none_or(|(s, _)| score > *s) {
                        best = Some((score, x));
                    }
                }
                best.unwrap().1
            };
            let cfg = decode(params, &u, &fixed);
            let r = objective(&cfg, seed.wrapping_add(trials.len() as u64));
            points.push(u);
            record(&mut trials, stage, cfg, r, &mut scores, &mut last_error);
        }
        if stage == Stage::B {
            prune(&mut trials[start..], stage_budget);
        }
        let stage_best = trials[start..]
            .iter()
            .filter(|t| t.status == TrialStatus::Completed)
            .max_by(|a, b| {
                a.objective
                    .unwrap()
                    .total_cmp(&b.objective.unwrap())
                    .then(b.trial.cmp(&a.trial))
            });
        if let Some(t) = stage_best {
            fixed = t.config.clone();
        }
    }
    let best = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Completed)
        .max_by(|a, b| {
            a.objective
                .unwrap()
                .total_cmp(&b.objective.unwrap())
                .then(b.trial.cmp(&a.trial))
        });
    match best {
        Some(t) => Ok(TuneOutcome {
            best: t.config.clone(),
            best_objective: t.objective.unwrap(),
            trials: trials.clone(),
        }),
        None => Err(last_error.unwrap_or_else(|| Error::Training("no trial completed".into()))),
    }
}

fn record(
    trials: &mut Vec<TrialRecord>,
    stage: Stage,
    config: Config,
    r: Result<f64>,
    scores: &mut Vec<Option<f64>>,
    last_error: &mut Option<Error>,
) {
    let (objective, status) = match r {
        Ok(v) if v.is_finite() => (Some(v), TrialStatus::Completed),
        Ok(v) => {
            *last_error = Some(Error::Training(format!("objective is {v}")));
            (None, TrialStatus::Failed)
        }
        Err(e) => {
            log::warn!("trial {} failed: {e}", trials.len());
            *last_error = Some(e);
            (None, TrialStatus::Failed)
        }
    };
    scores.push(objective);
    trials.push(TrialRecord {
        trial: trials.len(),
        stage,
        config,
        objective,
        status,
    });
}

/// Marks trials after the first half of the stage budget that score below
/// the running median of the completed trials before them.
fn prune(trials: &mut [TrialRecord], stage_budget: usize) {
    let half = stage_budget / 2;
    let mut seen: Vec<f64> = Vec::new();
    for (i, t) in trials.iter_mut().enumerate() {
        let Some(v) = t.objective else { continue };
        if i >= half && !seen.is_empty() && v < median(&seen) {
            t.status = TrialStatus::Pruned;
        }
        seen.push(v);
    }
}

/// Every combination of the choice parameters, in declaration order.
fn grid(space: &SearchSpace) -> Result<Vec<Config>> {
    let mut out = vec![Config::new()];
    for q in &space.params {
        let Domain::Choice { values } = &q.domain else {
            return Err(Error::invalid(format!(
                "grid search needs choice domains, `{}` is not",
                q.name
            )));
        };
        out = out
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(q.name.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    Ok(out)
}

/// Evaluates grid points in order until the budget is spent.
pub fn grid_search<F>(space: &SearchSpace, budget: usize, seed: u64, objective: F) -> Result<TuneOutcome>
where
    F: Fn(&Config, u64) -> Result<f64> + Sync,
{
    space.validate()?;
    if budget == 0 {
        return Err(Error::invalid("tuning budget must be at least 1"));
    }
    let configs = grid(space)?;
    let results: Vec<Result<f64>> = configs
        .par_iter()
        .take(budget)
        .enumerate()
        .map(|(i, c)| objective(c, seed.wrapping_add(i as u64)))
        .collect();
    let mut trials = Vec::new();
    let mut scores = Vec::new();
    let mut last_error = None;
    for (c, r) in configs.into_iter().zip(results) {
        record(&mut trials, Stage::B, c, r, &mut scores, &mut last_error);
    }
    let best = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Completed)
        .max_by(|a, b| {
            a.objective
                .unwrap()
                .total_cmp(&b.objective.unwrap())
                .then(b.trial.cmp(&a.trial))
        });
    match best {
        Some(t) => Ok(TuneOutcome {
            best: t.config.clone(),
            best_objective: t.objective.unwrap(),
            trials: trials.clone(),
        }),
        None => Err(last_error.unwrap_or_else(|| Error::Training("no trial completed".into()))),
    }
}

/// Stratified random hold-out. Returns `(train, holdout)` row indices,
/// each sorted. Classes with fewer than two rows stay in training.
pub fn split_tuning_holdout(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "hold-out fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for (c, rows) in &by_class {
        if rows.len() < 2 && fraction > 0.0 {
            log::warn!("class {c} has {} sample(s); kept in training", rows.len());
        }
    }
    let eligible: Vec<(usize, usize)> = by_class
        .iter()
        .filter(|(_, r)| r.len() >= 2)
        .map(|(&c, r)| (c, r.len()))
        .collect();
    let total: usize = eligible.iter().map(|e| e.1).sum();
    let target = (fraction * total as f64).round() as usize;
    // largest-remainder allocation, each class keeping one training row
    let mut alloc: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rema: Vec<(f64, usize, usize)> = Vec::new();
    for &(c, n) in &eligible {
        let share = fraction * n as f64;
        let base = (share.floor() as usize).min(n - 1);
        alloc.insert(c, base);
        rema.push((share - share.floor(), c, n));
    }
    let mut assigned: usize = alloc.values().sum();
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c, n) in &rema {
        if assigned >= target {
            break;
        }
        let a = alloc.get_mut(&c).unwrap();
        if *a < n - 1 {
            *a += 1;
            assigned += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for (c, rows) in by_class {
        let mut rows = rows;
        rows.shuffle(&mut rng);
        let h = alloc.get(&c).copied().unwrap_or(0);
        hold.extend_from_slice(&rows[..h]);
        train.extend_from_slice(&rows[h..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    Ok((train, hold))
}

/// Adjusted balanced accuracy of `spec` trained on `train`, scored on `holdout`.
pub fn holdout_objective(spec: &ModelSpec, train: &Dataset, holdout: &Dataset, seed: u64) -> Result<f64> {
    let clf = learners::train(spec, train, Some(holdout), seed)?;
    let probs = clf.predict_proba_batch(&holdout.x, holdout.n_rows())?;
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    adjusted_ba(&holdout.y, &pred, holdout.n_classes)
}

/// Tunes `base` on a train/hold-out pair: grid search for neural networks,
/// staged model-based search otherwise.
pub fn tune(
    base: &ModelSpec,
    space: &SearchSpace,
    train: &Dataset,
    holdout: &Dataset,
    budget: usize,
    seed: u64,
) -> Result<(ModelSpec, TuneOutcome)> {
    if holdout.n_rows() == 0 {
        return Err(Error::invalid("tuning hold-out is empty"));
    }
    let objective = |cfg: &Config, s: u64| holdout_objective(&apply_config(base, cfg)?, train, holdout, s);
    let outcome = match base.family() {
        Family::Neural => grid_search(space, budget, seed, objective)?,
        _ => optimize(space, budget, seed, objective)?,
    };
    Ok((apply_config(base, &outcome.best)?, outcome))
}
