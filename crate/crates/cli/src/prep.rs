//! Shared input handling: plot tables, fold assignments, per-formation datasets.

use std::collections::BTreeMap;
use std::path::Path;

use habmap_core::dataio::{read_plots, PlotTable};
use habmap_core::learners::{Dataset, Family};
use habmap_core::preprocess::{self, read_schema, FeatureSchema, FittedPipeline};
use habmap_core::spatialcv::read_blocks;
use habmap_core::tuneval::MIN_CLASS_PLOTS;
use habmap_core::HabitatCode;

use crate::error::{CliError, CliResult};

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::invalid(format!("{what} `{}` does not exist", path.display())))
    }
}

pub fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::invalid(format!(
            "{what} `{}` is not a directory",
            path.display()
        )))
    }
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Internal(format!("cannot create {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

/// Plots with coordinates and labels only.
pub fn read_locations(path: &Path) -> CliResult<PlotTable> {
    require_file(path, "plot table")?;
    Ok(read_plots(path, &FeatureSchema::default())?)
}

pub fn load_schema(path: &Path) -> CliResult<FeatureSchema> {
    require_file(path, "schema")?;
    Ok(read_schema(path)?)
}

pub fn parse_formation(text: &str) -> CliResult<HabitatCode> {
    let code = HabitatCode::parse(text)?;
    if code.level() != 1 {
        return Err(CliError::invalid(format!("`{text}` is not a formation code")));
    }
    Ok(code)
}

/// Mixes a base seed with a job label so every (command, formation, family,
/// fold) gets its own reproducible stream.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for b in label.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn member_file(formation: &HabitatCode, family: Family, fold: usize) -> String {
    format!("{formation}_{family}_fold{fold}.json")
}

pub fn best_file(formation: &HabitatCode, family: Family, fold: usize) -> String {
    format!("{formation}_{family}_fold{fold}_best.json")
}

pub fn trials_file(formation: &HabitatCode, family: Family, fold: usize) -> String {
    format!("{formation}_{family}_fold{fold}_trials.csv")
}

pub fn ensemble_file(formation: &HabitatCode) -> String {
    format!("{formation}_ensemble.json")
}

/// One formation's plots joined with their spatial folds.
pub struct FormationData {
    pub formation: HabitatCode,
    pub schema: FeatureSchema,
    pub table: PlotTable,
    pub folds: Vec<usize>,
    pub k: usize,
    pub classes: Vec<HabitatCode>,
    pub labels: Vec<usize>,
}

impl FormationData {
    pub fn load(plots: &Path, schema: &Path, blocks: &Path, formation: &HabitatCode) -> CliResult<FormationData> {
        require_file(plots, "plot table")?;
        require_file(blocks, "block assignment")?;
        let schema = load_schema(schema)?;
        let all = read_plots(plots, &schema)?;
        let mut table = all.filter_formation(formation);
        if table.is_empty() {
            return Err(CliError::invalid(format!("no plots of formation {formation}")));
        }
        let dropped = table.drop_rare_classes(MIN_CLASS_PLOTS);
        if !dropped.is_empty() {
            let names: Vec<String> = dropped.iter().map(|c| c.to_string()).collect();
            log::warn!(
                "dropped {} classes with fewer than {MIN_CLASS_PLOTS} plots: {}",
                dropped.len(),
                names.join(",")
            );
        }
        let classes: Vec<HabitatCode> = table.class_counts().into_keys().collect();
        if classes.len() < 2 {
            return Err(CliError::invalid(format!(
                "formation {formation} has {} usable classes; at least 2 are needed",
                classes.len()
            )));
        }
        let index: BTreeMap<&HabitatCode, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let labels = table.records.iter().map(|r| index[&r.habitat]).collect();

        let rows = read_blocks(blocks)?;
        let k = rows.iter().map(|r| r.fold + 1).max().unwrap_or(0);
        let by_id: BTreeMap<&str, usize> = rows.iter().map(|r| (r.plot_id.as_str(), r.fold)).collect();
        let folds = table
            .records
            .iter()
            .map(|r| {
                by_id
                    .get(r.id.as_str())
                    .copied()
                    .ok_or_else(|| CliError::invalid(format!("plot `{}` has no fold in {}", r.id, blocks.display())))
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(FormationData {
            formation: formation.clone(),
            schema,
            table,
            folds,
            k,
            classes,
            labels,
        })
    }

    pub fn check_fold(&self, fold: usize) -> CliResult<()> {
        if fold >= self.k {
            return Err(CliError::invalid(format!(
                "fold {fold} out of range; the partition has {} folds",
                self.k
            )));
        }
        Ok(())
    }

    /// `(train, test)` row indices for `fold`.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.folds.len()).partition(|&i| self.folds[i] != fold)
    }

    pub fn fit_pipeline(&self, rows: &[usize], family: Family) -> CliResult<FittedPipeline> {
        Ok(preprocess::fit(&self.schema, &self.table.subset(rows), family)?)
    }

    pub fn dataset(&self, pipeline: &FittedPipeline, rows: &[usize]) -> CliResult<Dataset> {
        let x = pipeline.transform_table(&self.table.subset(rows))?;
        let y = rows.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset::new(x, y, self.classes.len(), pipeline.layout.clone())?)
    }
}
