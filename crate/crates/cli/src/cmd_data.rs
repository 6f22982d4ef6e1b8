//! Subcommands that touch plot tables only: partition, evaluate, synth.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::Args;
use habmap_core::spatialcv::{build_partition, write_blocks, PartitionParams};
use habmap_core::synth::{World, WorldSpec};
use habmap_core::tuneval::evaluate;
use habmap_core::{HabitatCode, Taxonomy};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::events::Stage;
use crate::prep::{create_dir, read_locations, require_file, write_text};
use crate::Globals;

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub plots: PathBuf,
    /// Grid cell edge in kilometres.
    #[arg(long, default_value_t = 100.0)]
    pub cell_km: f64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Largest tolerated relative deviation of fold sizes from the mean.
    #[arg(long, default_value_t = 0.1)]
    pub balance_tol: f64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: usize,
    #[arg(long, default_value = "blocks.csv")]
    pub out: PathBuf,
}

pub fn partition(g: &Globals, a: &PartitionArgs) -> CliResult<()> {
    let stage = Stage::start("partition");
    if !(a.cell_km > 0.0 && a.cell_km.is_finite()) {
        return Err(CliError::invalid("--cell-km must be positive"));
    }
    if a.folds < 2 {
        return Err(CliError::invalid("--folds must be at least 2"));
    }
    let table = read_locations(&a.plots)?;
    if table.is_empty() {
        return Err(CliError::invalid(format!("{} holds no plots", a.plots.display())));
    }
    let classes: Vec<HabitatCode> = table.class_counts().into_keys().collect();
    let index: BTreeMap<&HabitatCode, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let coords: Vec<(f64, f64)> = table.records.iter().map(|r| (r.x, r.y)).collect();
    let labels: Vec<usize> = table.records.iter().map(|r| index[&r.habitat]).collect();
    let params = PartitionParams {
        cell_size: a.cell_km * 1000.0,
        k: a.folds,
        balance_tol: a.balance_tol,
        max_retries: a.max_retries,
        seed: g.seed,
        origin: None,
    };
    let part = build_partition(&coords, &labels, classes.len(), &params)?;
    if part.unbalanced {
        log::warn!(
            "fold sizes deviate by {:.3} from the mean after {} attempts",
            part.deviation,
            part.attempts
        );
    }
    if !g.dry_run {
        let ids: Vec<String> = table.records.iter().map(|r| r.id.clone()).collect();
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_blocks(&a.out, &ids, &part)?;
    }
    stage.finish(json!({
        "plots": table.len(),
        "classes": classes.len(),
        "cells": part.assignment.len(),
        "cell_size_m": part.cell_size,
        "fold_sizes": part.fold_sizes(),
        "deviation": part.deviation,
        "attempts": part.attempts,
    }));
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV with `id` and `habitat` columns holding predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// CSV with `id` and `habitat` columns holding reference labels.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value = "metrics.tsv")]
    pub out: PathBuf,
}

fn read_labels(path: &Path) -> CliResult<BTreeMap<String, HabitatCode>> {
    require_file(path, "label table")?;
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::invalid(format!("{}: missing column `{name}`", path.display())))
    };
    let (id, habitat) = (col("id")?, col("habitat")?);
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        let code = HabitatCode::parse(row.get(habitat).unwrap_or("").trim())?;
        let key = row.get(id).unwrap_or("").trim().to_string();
        if out.insert(key.clone(), code).is_some() {
            return Err(CliError::invalid(format!("{}: duplicate id `{key}`", path.display())));
        }
    }
    Ok(out)
}

pub fn evaluate_cmd(g: &Globals, a: &EvaluateArgs) -> CliResult<()> {
    let stage = Stage::start("evaluate");
    let pred = read_labels(&a.pred)?;
    let truth = read_labels(&a.truth)?;
    let (mut y_true, mut y_pred) = (Vec::new(), Vec::new());
    for (id, t) in &truth {
        if let Some(p) = pred.get(id) {
            y_true.push(t.clone());
            y_pred.push(p.clone());
        }
    }
    let unmatched = truth.len() - y_true.len();
    if unmatched > 0 {
        log::warn!("{unmatched} reference plots have no prediction");
    }
    if y_true.is_empty() {
        return Err(CliError::invalid(
            "no plot ids shared between predictions and reference",
        ));
    }
    let codes: BTreeSet<HabitatCode> = y_true.iter().chain(&y_pred).cloned().collect();
    let taxonomy = Taxonomy::from_codes(codes)?;
    let report = evaluate(&y_true, &y_pred, Some(&taxonomy))?;
    if !g.dry_run {
        write_text(&a.out, &report.to_tsv())?;
    }
    stage.finish(json!({
        "plots": y_true.len(),
        "unmatched": unmatched,
        "classes": report.classes.len(),
        "accuracy": report.accuracy,
    }));
    Ok(())
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1500)]
    pub plots: usize,
    #[arg(long, default_value_t = 3)]
    pub classes_per_formation: usize,
}

pub fn synth(g: &Globals, a: &SynthArgs) -> CliResult<()> {
    let stage = Stage::start("synth");
    let spec = WorldSpec {
        ncols: a.size,
        nrows: a.size,
        n_plots: a.plots,
        classes_per_formation: a.classes_per_formation,
        seed: g.seed,
        ..WorldSpec::default()
    };
    let world = World::generate(&spec)?;
    if !g.dry_run {
        create_dir(&a.out)?;
        world.write(&a.out)?;
    }
    stage.finish(json!({
        "plots": world.plots.len(),
        "classes": world.plots.class_counts().len(),
        "rasters": world.features.len(),
    }));
    Ok(())
}
