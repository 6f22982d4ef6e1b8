//! Subcommands that produce rasters: predict and assemble.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use habmap_core::dataio::{
    read_association, read_crosswalk, read_grid, read_plots, write_association, Cube, CubeWriter, FeatureValue,
    GridHeader, GridReader, GridWriter, MANIFEST,
};
use habmap_core::ensemble::{load_ensemble, EnsembleModel, Uncertainty};
use habmap_core::mapassembly::{
    assemble, association_matrix, AssembleConfig, MaskParams, DEFAULT_INLAND_DEPTH_M, DEFAULT_TILE_ROWS, DEFAULT_TOP_K,
};
use habmap_core::preprocess::{raster_value, FeatureSchema};
use habmap_core::HabitatCode;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::events::Stage;
use crate::prep::{create_dir, ensemble_file, parse_formation, read_locations, require_dir, require_file};
use crate::Globals;

pub const UNCERTAINTY_LAYERS: [&str; 4] = ["confidence", "ca", "model_spread", "fold_spread"];

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, default_value = "models")]
    pub models: PathBuf,
    #[arg(long)]
    pub formation: String,
    /// Directory of `<feature>.asc` rasters; writes a probability cube.
    #[arg(long, conflicts_with = "plots", required_unless_present = "plots")]
    pub rasters: Option<PathBuf>,
    /// Plot CSV; writes one prediction row per plot.
    #[arg(long)]
    pub plots: Option<PathBuf>,
    /// Cube directory in raster mode, CSV file in plot mode.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TILE_ROWS)]
    pub tile_rows: usize,
}

fn shared_schema(ens: &EnsembleModel) -> CliResult<FeatureSchema> {
    let schema = ens.members[0].pipeline.schema.clone();
    if ens.members.iter().any(|m| m.pipeline.schema != schema) {
        return Err(CliError::invalid(
            "ensemble members were trained on different feature schemas",
        ));
    }
    Ok(schema)
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

fn uncertainty_values(p: &[f64], u: &Uncertainty) -> [f64; 4] {
    [u.confidence, u.ca[argmax(p)], u.model_spread, u.fold_spread]
}

pub fn predict_cmd(g: &Globals, a: &PredictArgs) -> CliResult<()> {
    let formation = parse_formation(&a.formation)?;
    require_dir(&a.models, "model directory")?;
    let manifest = a.models.join(ensemble_file(&formation));
    require_file(&manifest, "ensemble manifest")?;
    if a.tile_rows == 0 {
        return Err(CliError::invalid("--tile-rows must be positive"));
    }
    let ens = load_ensemble(&manifest)?;
    let schema = shared_schema(&ens)?;
    match (&a.rasters, &a.plots) {
        (Some(dir), _) => predict_rasters(g, a, &ens, &schema, dir),
        (None, Some(plots)) => predict_plots(g, a, &ens, &schema, plots),
        (None, None) => Err(CliError::invalid("give --rasters or --plots")),
    }
}

fn is_nodata(v: f64, nodata: f64) -> bool {
    v.is_nan() || v == nodata
}

fn predict_rasters(
    g: &Globals,
    a: &PredictArgs,
    ens: &EnsembleModel,
    schema: &FeatureSchema,
    dir: &Path,
) -> CliResult<()> {
    let stage = Stage::start(format!("predict {} rasters", a.formation));
    require_dir(dir, "raster directory")?;
    let mut readers = Vec::with_capacity(schema.len());
    for f in &schema.features {
        let path = dir.join(format!("{}.asc", f.name));
        require_file(&path, "feature raster")?;
        readers.push(GridReader::open(&path)?);
    }
    let header: GridHeader = readers[0].header;
    for r in &readers[1..] {
        r.header.ensure_aligned(&header)?;
    }
    if g.dry_run {
        return Ok(());
    }
    create_dir(&a.out)?;
    let mut cube = CubeWriter::create(&a.out, header, ens.classes.clone())?;
    let udir = a.out.join("uncertainty");
    create_dir(&udir)?;
    let mut extra = UNCERTAINTY_LAYERS
        .iter()
        .map(|n| GridWriter::create(&udir.join(format!("{n}.asc")), header))
        .collect::<habmap_core::Result<Vec<_>>>()?;

    let (mut row, mut mapped, mut tiles) = (0usize, 0usize, 0usize);
    while row < header.nrows {
        let n = a.tile_rows.min(header.nrows - row);
        let band_header = header.band(row, n);
        let bands = readers
            .iter_mut()
            .map(|r| r.read_rows(n))
            .collect::<habmap_core::Result<Vec<_>>>()?;
        let pixels = band_header.len();
        let mut valid = Vec::with_capacity(pixels);
        let mut rows = Vec::with_capacity(pixels);
        for i in 0..pixels {
            if bands
                .iter()
                .zip(&readers)
                .any(|(b, r)| is_nodata(b[i], r.header.nodata))
            {
                continue;
            }
            valid.push(i);
            rows.push(
                schema
                    .features
                    .iter()
                    .zip(&bands)
                    .map(|(s, b)| raster_value(&s.kind, b[i]))
                    .collect::<Vec<FeatureValue>>(),
            );
        }
        let preds = ens.predict_rows(&rows)?;
        let nodata = header.nodata;
        let mut probs = Cube::new(
            band_header,
            ens.classes.clone(),
            vec![vec![nodata; pixels]; ens.classes.len()],
        )?;
        let mut layers = vec![vec![nodata; pixels]; UNCERTAINTY_LAYERS.len()];
        for (&i, (p, u)) in valid.iter().zip(&preds) {
            probs.set_pixel(i, Some(p));
            for (l, v) in layers.iter_mut().zip(uncertainty_values(p, u)) {
                l[i] = v;
            }
        }
        cube.write_band(&probs)?;
        for (w, l) in extra.iter_mut().zip(&layers) {
            w.write_rows(l)?;
        }
        mapped += valid.len();
        tiles += 1;
        row += n;
    }
    cube.finish()?;
    for w in extra {
        w.finish()?;
    }
    stage.finish(json!({
        "tiles": tiles,
        "pixels": header.len(),
        "predicted_pixels": mapped,
        "members": ens.members.len(),
        "classes": ens.classes.len(),
    }));
    Ok(())
}

fn predict_plots(
    g: &Globals,
    a: &PredictArgs,
    ens: &EnsembleModel,
    schema: &FeatureSchema,
    plots: &Path,
) -> CliResult<()> {
    let stage = Stage::start(format!("predict {} plots", a.formation));
    require_file(plots, "plot table")?;
    let table = read_plots(plots, schema)?;
    if g.dry_run {
        return Ok(());
    }
    let rows: Vec<Vec<FeatureValue>> = table.records.iter().map(|r| r.features.clone()).collect();
    let preds = ens.predict_rows(&rows)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let internal = |e: csv::Error| CliError::Internal(format!("{}: {e}", a.out.display()));
    let mut w = csv::Writer::from_path(&a.out).map_err(internal)?;
    let mut header: Vec<String> = ["id", "habitat"].map(String::from).to_vec();
    header.extend(UNCERTAINTY_LAYERS.iter().map(|s| s.to_string()));
    header.extend(ens.classes.iter().map(|c| format!("p_{c}")));
    w.write_record(&header).map_err(internal)?;
    for (r, (p, u)) in table.records.iter().zip(&preds) {
        let mut rec = vec![r.id.clone(), ens.classes[argmax(p)].to_string()];
        rec.extend(uncertainty_values(p, u).iter().map(|v| v.to_string()));
        rec.extend(p.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(internal)?;
    }
    w.flush().map_err(|e| CliError::Internal(e.to_string()))?;
    stage.finish(json!({ "plots": table.len(), "members": ens.members.len() }));
    Ok(())
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    /// `F=dir` per formation, or one directory whose subdirectories are named by formation.
    #[arg(long, required = true, num_args = 1..)]
    pub cubes: Vec<String>,
    /// Ecoregion grid.
    #[arg(long)]
    pub region: PathBuf,
    /// Distance-to-coast grid in metres.
    #[arg(long)]
    pub coast_dist: PathBuf,
    #[arg(long)]
    pub landcover: PathBuf,
    #[arg(long)]
    pub crosswalk: PathBuf,
    /// Class/region association TSV; derived from --plots when absent.
    #[arg(long, required_unless_present = "plots")]
    pub association: Option<PathBuf>,
    #[arg(long)]
    pub plots: Option<PathBuf>,
    /// Plots needed in a region before a class is allowed there.
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long, default_value_t = DEFAULT_INLAND_DEPTH_M / 1000.0)]
    pub inland_depth_km: f64,
    #[arg(long, value_delimiter = ',', default_value = "N,MA2")]
    pub coastal_formations: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_TILE_ROWS)]
    pub tile_rows: usize,
    #[arg(long, default_value = "map")]
    pub out_dir: PathBuf,
}

fn cube_dirs(specs: &[String]) -> CliResult<BTreeMap<HabitatCode, PathBuf>> {
    let mut out = BTreeMap::new();
    for s in specs {
        if let Some((f, dir)) = s.split_once('=') {
            let f = parse_formation(f)?;
            require_file(&Path::new(dir).join(MANIFEST), "cube manifest")?;
            if out.insert(f.clone(), PathBuf::from(dir)).is_some() {
                return Err(CliError::invalid(format!("formation {f} given twice")));
            }
            continue;
        }
        let root = Path::new(s);
        require_dir(root, "cube directory")?;
        let entries = std::fs::read_dir(root).map_err(|e| CliError::invalid(format!("{s}: {e}")))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::Internal(e.to_string()))?.path();
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let Ok(f) = parse_formation(&name) else {
                continue;
            };
            if path.join(MANIFEST).is_file() && out.insert(f.clone(), path).is_some() {
                return Err(CliError::invalid(format!("formation {f} given twice")));
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::invalid("no probability cubes found"));
    }
    Ok(out)
}

pub fn assemble_cmd(g: &Globals, a: &AssembleArgs) -> CliResult<()> {
    let stage = Stage::start("assemble");
    let cubes = cube_dirs(&a.cubes)?;
    for (p, what) in [
        (&a.region, "region grid"),
        (&a.coast_dist, "coast distance grid"),
        (&a.landcover, "land-cover grid"),
        (&a.crosswalk, "crosswalk"),
    ] {
        require_file(p, what)?;
    }
    if !(a.inland_depth_km >= 0.0 && a.inland_depth_km.is_finite()) {
        return Err(CliError::invalid("--inland-depth-km must be non-negative"));
    }
    let crosswalk = read_crosswalk(&a.crosswalk)?;
    let (association, derived) = match (&a.association, &a.plots) {
        (Some(path), _) => {
            require_file(path, "association table")?;
            (read_association(path)?, false)
        }
        (None, Some(plots)) => {
            let table = read_locations(plots)?;
            let locs: Vec<(f64, f64, HabitatCode)> =
                table.records.iter().map(|r| (r.x, r.y, r.habitat.clone())).collect();
            (association_matrix(&locs, &read_grid(&a.region)?, a.min_count)?, true)
        }
        (None, None) => return Err(CliError::invalid("give --association or --plots")),
    };
    let coastal_formations = a
        .coastal_formations
        .iter()
        .map(|f| parse_formation(f))
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = AssembleConfig {
        cubes,
        region: a.region.clone(),
        coast_dist: a.coast_dist.clone(),
        landcover: a.landcover.clone(),
        crosswalk,
        association,
        mask: MaskParams {
            coastal_formations,
            inland_depth_m: a.inland_depth_km * 1000.0,
        },
        k: a.k,
        tile_rows: a.tile_rows,
        out_dir: a.out_dir.clone(),
    };
    cfg.validate()?;
    if g.dry_run {
        return Ok(());
    }
    let report = assemble(&cfg)?;
    if derived {
        write_association(&cfg.association, &a.out_dir.join("association.tsv"))?;
    }
    if !report.unknown_landcover.is_empty() {
        log::warn!(
            "land-cover codes missing from the crosswalk: {:?}",
            report.unknown_landcover
        );
    }
    stage.finish(serde_json::to_value(&report).map_err(|e| CliError::Internal(e.to_string()))?);
    Ok(())
}
