//! Subcommands that fit or inspect models: tune, train, report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use habmap_core::dataio::{load_json, save_json};
use habmap_core::ensemble::{build_ensemble, EnsembleManifest, Member, WeightScheme};
use habmap_core::learners::{self, Dataset, Family, ModelSpec};
use habmap_core::tuneval::{
    adjusted_ba, evaluate, split_tuning_holdout, tune, write_trials, SearchSpace, DEFAULT_HOLDOUT_FRACTION,
};
use habmap_core::{HabitatCode, Taxonomy};
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::events::Stage;
use crate::prep::{
    best_file, create_dir, derive_seed, ensemble_file, member_file, parse_formation, require_dir, require_file,
    trials_file, write_text, FormationData,
};
use crate::Globals;

const SPEC_KIND: &str = "model_spec";

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Weights {
    Uniform,
    LinearRank,
    Objective,
}

impl From<Weights> for WeightScheme {
    fn from(w: Weights) -> Self {
        match w {
            Weights::Uniform => WeightScheme::Uniform,
            Weights::LinearRank => WeightScheme::LinearRank,
            Weights::Objective => WeightScheme::ObjectiveProportional,
        }
    }
}

/// Inputs shared by every per-formation model command.
#[derive(Debug, Args)]
pub struct ModelInputs {
    #[arg(long)]
    pub plots: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Fold assignment written by `partition`.
    #[arg(long)]
    pub blocks: PathBuf,
    #[arg(long)]
    pub formation: String,
    /// Directory for member, trial and ensemble files.
    #[arg(long, default_value = "models")]
    pub models: PathBuf,
}

/// Which (family, fold) jobs to run.
#[derive(Debug, Args)]
pub struct JobSelection {
    /// rf, gbt or mlp (also bagging, boosting, neural).
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub fold: Option<usize>,
    /// Run every family and fold not pinned by --family / --fold.
    #[arg(long)]
    pub all: bool,
    /// Share of each training portion held out for early stopping and calibration.
    #[arg(long, default_value_t = DEFAULT_HOLDOUT_FRACTION)]
    pub holdout: f64,
}

impl JobSelection {
    fn jobs(&self, data: &FormationData) -> CliResult<Vec<(Family, usize)>> {
        let families = match (&self.family, self.all) {
            (Some(f), _) => vec![f.parse::<Family>()?],
            (None, true) => Family::ALL.to_vec(),
            (None, false) => return Err(CliError::invalid("give --family or --all")),
        };
        let folds = match (self.fold, self.all) {
            (Some(k), _) => {
                data.check_fold(k)?;
                vec![k]
            }
            (None, true) => (0..data.k).collect(),
            (None, false) => return Err(CliError::invalid("give --fold or --all")),
        };
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(CliError::invalid("--holdout must be in [0, 1)"));
        }
        Ok(families
            .into_iter()
            .flat_map(|f| folds.iter().map(move |&k| (f, k)))
            .collect())
    }
}

struct Prepared {
    pipeline: habmap_core::preprocess::FittedPipeline,
    fit: Dataset,
    holdout: Dataset,
    test: Dataset,
}

fn prepare(data: &FormationData, family: Family, fold: usize, holdout: f64, seed: u64) -> CliResult<Prepared> {
    let (train_rows, test_rows) = data.split(fold);
    if train_rows.is_empty() {
        return Err(CliError::invalid(format!(
            "fold {fold} leaves no {} plots for training",
            data.formation
        )));
    }
    let pipeline = data.fit_pipeline(&train_rows, family)?;
    let labels: Vec<usize> = train_rows.iter().map(|&i| data.labels[i]).collect();
    let (fit_idx, hold_idx) = split_tuning_holdout(&labels, holdout, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&j| train_rows[j]).collect::<Vec<_>>();
    Ok(Prepared {
        fit: data.dataset(&pipeline, &pick(&fit_idx))?,
        holdout: data.dataset(&pipeline, &pick(&hold_idx))?,
        test: data.dataset(&pipeline, &test_rows)?,
        pipeline,
    })
}

fn job_label(cmd: &str, f: &HabitatCode, family: Family, fold: usize) -> String {
    format!("{cmd}/{f}/{family}/{fold}")
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub jobs: JobSelection,
    /// Trials per (family, fold).
    #[arg(long, default_value_t = 20)]
    pub budget: usize,
}

pub fn tune_cmd(g: &Globals, a: &TuneArgs) -> CliResult<()> {
    let formation = parse_formation(&a.inputs.formation)?;
    let data = FormationData::load(&a.inputs.plots, &a.inputs.schema, &a.inputs.blocks, &formation)?;
    let jobs = a.jobs.jobs(&data)?;
    if a.budget == 0 {
        return Err(CliError::invalid("--budget must be at least 1"));
    }
    if g.dry_run {
        return Ok(());
    }
    create_dir(&a.inputs.models)?;
    for (family, fold) in jobs {
        let stage = Stage::start(format!("tune {formation} {family} fold {fold}"));
        let seed = derive_seed(g.seed, &job_label("tune", &formation, family, fold));
        let p = prepare(&data, family, fold, a.jobs.holdout, seed)?;
        let base = ModelSpec::default_for(family);
        let space = SearchSpace::default_for(family);
        let (best, outcome) = tune(&base, &space, &p.fit, &p.holdout, a.budget, seed)?;
        write_trials(
            &a.inputs.models.join(trials_file(&formation, family, fold)),
            &outcome.trials,
        )?;
        save_json(
            &a.inputs.models.join(best_file(&formation, family, fold)),
            SPEC_KIND,
            &best,
        )?;
        stage.finish(json!({
            "trials": outcome.trials.len(),
            "best_objective": outcome.best_objective,
            "train_rows": p.fit.n_rows(),
            "holdout_rows": p.holdout.n_rows(),
        }));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub jobs: JobSelection,
    /// Model spec file; defaults to the tuned spec if present, else family defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Weights::LinearRank)]
    pub weights: Weights,
}

fn spec_for(a: &TrainArgs, formation: &HabitatCode, family: Family, fold: usize) -> CliResult<ModelSpec> {
    let spec = if let Some(path) = &a.spec {
        require_file(path, "model spec")?;
        load_json::<ModelSpec>(path, SPEC_KIND)?
    } else {
        let tuned = a.inputs.models.join(best_file(formation, family, fold));
        if tuned.is_file() {
            load_json::<ModelSpec>(&tuned, SPEC_KIND)?
        } else {
            ModelSpec::default_for(family)
        }
    };
    if spec.family() != family {
        return Err(CliError::invalid(format!(
            "model spec is for family {}, job is {family}",
            spec.family()
        )));
    }
    Ok(spec)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn score(clf: &learners::Classifier, d: &Dataset) -> CliResult<f64> {
    let probs = clf.predict_proba_batch(&d.x, d.n_rows())?;
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(adjusted_ba(&d.y, &pred, d.n_classes)?)
}

pub fn train_cmd(g: &Globals, a: &TrainArgs) -> CliResult<()> {
    let formation = parse_formation(&a.inputs.formation)?;
    let data = FormationData::load(&a.inputs.plots, &a.inputs.schema, &a.inputs.blocks, &formation)?;
    let jobs = jobs_with_specs(a, &data, &formation)?;
    if g.dry_run {
        return Ok(());
    }
    create_dir(&a.inputs.models)?;
    for (family, fold, spec) in jobs {
        let stage = Stage::start(format!("train {formation} {family} fold {fold}"));
        let seed = derive_seed(g.seed, &job_label("train", &formation, family, fold));
        let p = prepare(&data, family, fold, a.jobs.holdout, seed)?;
        let valid = (p.holdout.n_rows() > 0).then_some(&p.holdout);
        let clf = learners::train(&spec, &p.fit, valid, seed)?;
        let objective = if p.test.n_rows() > 0 {
            score(&clf, &p.test)?
        } else {
            log::warn!("fold {fold} has no {formation} test plots; scoring on the hold-out");
            score(&clf, &p.holdout)?
        };
        let member = Member {
            classes: data.classes.clone(),
            pipeline: p.pipeline,
            classifier: clf,
            family,
            fold,
            objective,
        };
        member.save(&a.inputs.models.join(member_file(&formation, family, fold)))?;
        stage.finish(json!({
            "train_rows": p.fit.n_rows(),
            "valid_rows": p.holdout.n_rows(),
            "test_rows": p.test.n_rows(),
            "objective": objective,
        }));
    }
    let n = rebuild_ensemble(&a.inputs.models, &formation, a.weights.into())?;
    log::info!("ensemble for {formation} now has {n} members");
    Ok(())
}

fn jobs_with_specs(
    a: &TrainArgs,
    data: &FormationData,
    formation: &HabitatCode,
) -> CliResult<Vec<(Family, usize, ModelSpec)>> {
    a.jobs
        .jobs(data)?
        .into_iter()
        .map(|(family, fold)| Ok((family, fold, spec_for(a, formation, family, fold)?)))
        .collect()
}

/// Member files of `formation` in `dir`, ordered by family then fold.
fn member_files(dir: &Path, formation: &HabitatCode) -> CliResult<Vec<(Family, usize, String)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::invalid(format!("{}: {e}", dir.display())))?;
    let prefix = format!("{formation}_");
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Internal(e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_prefix(&prefix).and_then(|s| s.strip_suffix(".json")) else {
            continue;
        };
        let Some((family, fold)) = stem.split_once("_fold") else {
            continue;
        };
        let (Ok(family), Ok(fold)) = (family.parse::<Family>(), fold.parse::<usize>()) else {
            continue;
        };
        if member_file(formation, family, fold) == name {
            out.push((family, fold, name));
        }
    }
    out.sort();
    Ok(out)
}

/// Rewrites the ensemble manifest from every member file on disk.
fn rebuild_ensemble(dir: &Path, formation: &HabitatCode, scheme: WeightScheme) -> CliResult<usize> {
    let files = member_files(dir, formation)?;
    let members = files
        .iter()
        .map(|(_, _, f)| Member::load(&dir.join(f)))
        .collect::<habmap_core::Result<Vec<_>>>()?;
    let ens = build_ensemble(members, scheme)?;
    let names: Vec<PathBuf> = files.into_iter().map(|(_, _, f)| PathBuf::from(f)).collect();
    ens.manifest(&names).save(&dir.join(ensemble_file(formation)))?;
    Ok(names.len())
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long, default_value = "report.tsv")]
    pub out: PathBuf,
}

/// Out-of-fold evaluation: every plot is scored by the members trained
/// without its fold, followed by the member table.
pub fn report_cmd(g: &Globals, a: &ReportArgs) -> CliResult<()> {
    let stage = Stage::start("report");
    let formation = parse_formation(&a.inputs.formation)?;
    require_dir(&a.inputs.models, "model directory")?;
    let manifest_path = a.inputs.models.join(ensemble_file(&formation));
    require_file(&manifest_path, "ensemble manifest")?;
    let data = FormationData::load(&a.inputs.plots, &a.inputs.schema, &a.inputs.blocks, &formation)?;
    let manifest = EnsembleManifest::load(&manifest_path)?;
    if manifest.classes != data.classes {
        return Err(CliError::invalid(
            "ensemble classes differ from the plot table; retrain after changing plots",
        ));
    }
    if g.dry_run {
        return Ok(());
    }
    let mut by_fold: BTreeMap<usize, Vec<Member>> = BTreeMap::new();
    for e in &manifest.members {
        by_fold
            .entry(e.fold)
            .or_default()
            .push(Member::load(&a.inputs.models.join(&e.file))?);
    }
    let (mut y_true, mut y_pred) = (Vec::new(), Vec::new());
    for (fold, members) in by_fold {
        let ens = build_ensemble(members, manifest.scheme)?;
        let rows: Vec<usize> = (0..data.folds.len()).filter(|&i| data.folds[i] == fold).collect();
        let feats: Vec<_> = rows.iter().map(|&i| data.table.records[i].features.clone()).collect();
        for (&i, (p, _)) in rows.iter().zip(ens.predict_rows(&feats)?) {
            y_true.push(data.classes[data.labels[i]].clone());
            y_pred.push(data.classes[argmax(&p)].clone());
        }
    }
    let unscored = data.folds.len() - y_true.len();
    if y_true.is_empty() {
        return Err(CliError::invalid("no plot falls in a fold with trained members"));
    }
    let taxonomy = Taxonomy::from_codes(data.classes.iter().cloned())?;
    let report = evaluate(&y_true, &y_pred, Some(&taxonomy))?;
    let mut text = report.to_tsv();
    text.push_str("\nfamily\tfold\tobjective\tweight\n");
    for e in &manifest.members {
        let _ = writeln!(text, "{}\t{}\t{:.4}\t{:.4}", e.family, e.fold, e.objective, e.weight);
    }
    write_text(&a.out, &text)?;
    stage.finish(json!({
        "scored_plots": y_true.len(),
        "unscored_plots": unscored,
        "members": manifest.members.len(),
        "accuracy": report.accuracy,
    }));
    Ok(())
}
