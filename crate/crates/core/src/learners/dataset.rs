use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{Column, ColumnKind};

/// Encoded feature matrix (row-major) with class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub n_classes: usize,
    pub layout: Vec<Column>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<usize>, n_classes: usize, layout: Vec<Column>) -> Result<Self> {
        let width = layout.len();
        if width == 0 || x.len() != y.len() * width {
            return Err(Error::Dimension {
                expected: y.len() * width,
                found: x.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            x,
            y,
            n_classes,
            layout,
        })
    }

    /// All-numeric dataset with columns named `x0, x1, ...`.
    pub fn numeric(x: Vec<f64>, n_cols: usize, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        let layout = (0..n_cols)
            .map(|i| Column {
                name: format!("x{i}"),
                kind: ColumnKind::Numeric,
            })
            .collect();
        Dataset::new(x, y, n_classes, layout)
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_cols(&self) -> usize {
        self.layout.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_cols();
        &self.x[i * w..(i + 1) * w]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.n_cols());
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        Dataset {
            x,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
            layout: self.layout.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.y {
            c[l] += 1;
        }
        c
    }

    pub(crate) fn check_trainable(&self) -> Result<()> {
        let present = self.class_counts().iter().filter(|&&n| n > 0).count();
        if present < 2 {
            return Err(Error::invalid(format!(
                "training needs at least 2 classes, found {present}"
            )));
        }
        let w = self.n_cols();
        if let Some(pos) = self.x.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value in column `{}` (row {})",
                self.layout[pos % w].name,
                pos / w
            )));
        }
        Ok(())
    }
}
