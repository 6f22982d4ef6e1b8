//! Classifier families: random forest (bagging), gradient boosted trees
//! (boosting) and multi-layer perceptrons (neural).

pub mod calibrate;
pub mod dataset;
pub mod forest;
pub mod gbt;
pub mod loss;
pub mod mlp;
pub mod optim;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calibrate::fit_temperature;
pub use dataset::Dataset;
pub use forest::{Forest, ForestParams, MaxFeatures};
pub use gbt::{Gbt, GbtParams};
pub use loss::{
    class_weights, focal_loss, ldam_loss, ldam_margins, softmax, wce_loss, ClassWeighting, LossKind, LossSpec,
    ResolvedLoss,
};
pub use mlp::{Mlp, MlpParams};
pub use optim::{Optimizer, OptimizerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Bagging,
    Boosting,
    Neural,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Bagging, Family::Boosting, Family::Neural];

    pub fn name(self) -> &'static str {
        match self {
            Family::Bagging => "bagging",
            Family::Boosting => "boosting",
            Family::Neural => "neural",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bagging" | "rf" | "forest" => Ok(Family::Bagging),
            "boosting" | "gbt" | "xgboost" => Ok(Family::Boosting),
            "neural" | "mlp" => Ok(Family::Neural),
            _ => Err(Error::invalid(format!("unknown model family `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum ModelSpec {
    Bagging(ForestParams),
    Boosting(GbtParams),
    Neural(MlpParams),
}

impl ModelSpec {
    pub fn family(&self) -> Family {
        match self {
            ModelSpec::Bagging(_) => Family::Bagging,
            ModelSpec::Boosting(_) => Family::Boosting,
            ModelSpec::Neural(_) => Family::Neural,
        }
    }

    pub fn default_for(family: Family) -> ModelSpec {
        match family {
            Family::Bagging => ModelSpec::Bagging(ForestParams::default()),
            Family::Boosting => ModelSpec::Boosting(GbtParams::default()),
            Family::Neural => ModelSpec::Neural(MlpParams::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Forest(Forest),
    Gbt(Gbt),
    Mlp(Mlp),
}

/// A trained model of any family with an optional softmax temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub spec: ModelSpec,
    pub n_classes: usize,
    pub n_features: usize,
    pub model: Model,
    pub temperature: Option<f64>,
}

/// Fits a classifier. `valid` drives early stopping and, for neural
/// networks with `temperature_scaled`, temperature fitting.
pub fn train(spec: &ModelSpec, train: &Dataset, valid: Option<&Dataset>, seed: u64) -> Result<Classifier> {
    train.check_trainable()?;
    if let Some(v) = valid {
        if v.n_cols() != train.n_cols() {
            return Err(Error::Dimension {
                expected: train.n_cols(),
                found: v.n_cols(),
            });
        }
    }
    let model = match spec {
        ModelSpec::Bagging(p) => {
            if p.n_trees == 0 {
                return Err(Error::invalid("forest needs at least one tree"));
            }
            Model::Forest(Forest::fit(train, p, seed))
        }
        ModelSpec::Boosting(p) => Model::Gbt(Gbt::fit(train, valid, p)?),
        ModelSpec::Neural(p) => Model::Mlp(Mlp::fit(train, valid, p, seed)?),
    };
    let mut clf = Classifier {
        spec: spec.clone(),
        n_classes: train.n_classes,
        n_features: train.n_cols(),
        model,
        temperature: None,
    };
    if let (ModelSpec::Neural(p), Some(v)) = (spec, valid) {
        if p.temperature_scaled {
            clf.fit_temperature(v)?;
        }
    }
    Ok(clf)
}

impl Classifier {
    pub fn family(&self) -> Family {
        self.spec.family()
    }

    /// Raw scores before softmax. Forests have none.
    pub fn logits(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_row(row)?;
        match &self.model {
            Model::Forest(_) => Err(Error::invalid("forests do not produce logits")),
            Model::Gbt(g) => Ok(g.logits(row)),
            Model::Mlp(m) => m.logits(row),
        }
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.n_features {
            return Err(Error::Dimension {
                expected: self.n_features,
                found: row.len(),
            });
        }
        Ok(())
    }

    fn scaled_softmax(&self, z: &[f64]) -> Vec<f64> {
        match self.temperature {
            Some(t) => softmax(&z.iter().map(|v| v / t).collect::<Vec<_>>()),
            None => softmax(z),
        }
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.check_row(row)?;
        Ok(match &self.model {
            Model::Forest(f) => f.predict_proba(row),
            Model::Gbt(g) => self.scaled_softmax(&g.logits(row)),
            Model::Mlp(m) => self.scaled_softmax(&m.logits(row)?),
        })
    }

    /// Probabilities for `n` row-major rows.
    pub fn predict_proba_batch(&self, x: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
        if x.len() != n * self.n_features {
            return Err(Error::Dimension {
                expected: n * self.n_features,
                found: x.len(),
            });
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let w = self.n_features;
        match &self.model {
            Model::Mlp(m) => {
                let logits = m.logits_batch(x, n)?;
                Ok(logits
                    .rows()
                    .into_iter()
                    .map(|z| self.scaled_softmax(&z.to_vec()))
                    .collect())
            }
            _ => (0..n)
                .into_par_iter()
                .map(|i| self.predict_proba(&x[i * w..(i + 1) * w]))
                .collect(),
        }
    }

    pub fn logits_batch(&self, x: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
        let w = self.n_features;
        match &self.model {
            Model::Mlp(m) => Ok(m.logits_batch(x, n)?.rows().into_iter().map(|z| z.to_vec()).collect()),
            _ => (0..n).map(|i| self.logits(&x[i * w..(i + 1) * w])).collect(),
        }
    }

    pub fn predict(&self, row: &[f64]) -> Result<usize> {
        Ok(forest::argmax(&self.predict_proba(row)?))
    }

    /// Fits and stores a softmax temperature on held-out data.
    pub fn fit_temperature(&mut self, valid: &Dataset) -> Result<f64> {
        if matches!(self.model, Model::Forest(_)) {
            return Err(Error::invalid("temperature scaling needs a model with logits"));
        }
        let logits = self.logits_batch(&valid.x, valid.n_rows())?;
        let t = fit_temperature(&logits, &valid.y);
        self.temperature = Some(t);
        Ok(t)
    }
}
