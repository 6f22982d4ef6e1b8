//! Row-band streaming driver that writes every assembly product.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::{CrosswalkTable, Cube, CubeReader, CubeWriter, Grid, GridReader, GridWriter, LandCover};
use crate::error::{Error, Result};
use crate::mapassembly::{
    apply_masks, classes_without_landcover, landcover_masks_quiet, legend_of, legend_tsv, regional_masks, top_k,
    wall_to_wall_with_legend, AssociationMatrix, MaskParams, TopKMap,
};
use crate::taxonomy::HabitatCode;

pub const DEFAULT_TILE_ROWS: usize = 256;

#[derive(Debug, Clone)]
pub struct AssembleConfig {
    /// Probability cube directory per formation.
    pub cubes: BTreeMap<HabitatCode, PathBuf>,
    pub region: PathBuf,
    pub coast_dist: PathBuf,
    pub landcover: PathBuf,
    pub crosswalk: CrosswalkTable,
    pub association: AssociationMatrix,
    pub mask: MaskParams,
    pub k: usize,
    pub tile_rows: usize,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AssembleReport {
    pub tiles: usize,
    pub pixels: usize,
    pub mapped_pixels: usize,
    pub missing_priority: usize,
    pub unknown_landcover: BTreeSet<LandCover>,
}

struct FormationIo {
    formation: HabitatCode,
    reader: CubeReader,
    masked: CubeWriter,
    ranks: Vec<(GridWriter, GridWriter)>,
}

fn dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

impl AssembleConfig {
    /// Opens every input and checks alignment without writing anything.
    pub fn validate(&self) -> Result<()> {
        if self.cubes.is_empty() {
            return Err(Error::invalid("no probability cubes given"));
        }
        if self.k == 0 || self.tile_rows == 0 {
            return Err(Error::invalid("k and tile height must be positive"));
        }
        let region = GridReader::open(&self.region)?.header;
        GridReader::open(&self.coast_dist)?.header.ensure_aligned(&region)?;
        GridReader::open(&self.landcover)?.header.ensure_aligned(&region)?;
        for (f, path) in &self.cubes {
            let r = CubeReader::open(path)?;
            r.header.ensure_aligned(&region)?;
            if let Some(bad) = r.classes.iter().find(|c| &c.formation() != f) {
                return Err(Error::invalid(format!("cube for formation {f} holds class {bad}")));
            }
        }
        Ok(())
    }
}

/// Runs masking, top-k extraction and wall-to-wall composition over row
/// bands of `tile_rows`, writing under `out_dir`:
/// `masked/<F>/` (regionally masked cubes), `top<k>/<F>/` (ranked class and
/// confidence grids), `wall_to_wall/` (class and confidence grids with
/// legend) and `priority.tsv`.
pub fn assemble(cfg: &AssembleConfig) -> Result<AssembleReport> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    dir(out)?;
    let mut region = GridReader::open(&cfg.region)?;
    let mut coast = GridReader::open(&cfg.coast_dist)?;
    let mut lc = GridReader::open(&cfg.landcover)?;
    let header = region.header;

    let mut io = Vec::new();
    let mut shells = Vec::new();
    for (f, path) in &cfg.cubes {
        let reader = CubeReader::open(path)?;
        for c in &reader.classes {
            if cfg.association.allowed_regions(c).is_none() {
                log::warn!("class {c} has no association entry; it is masked everywhere");
            }
        }
        for c in classes_without_landcover(&cfg.crosswalk, &reader.classes) {
            log::warn!("class {c} is not allowed under any land-cover code");
        }
        let masked = CubeWriter::create(&out.join("masked").join(f.as_str()), header, reader.classes.clone())?;
        let tdir = out.join(format!("top{}", cfg.k)).join(f.as_str());
        dir(&tdir)?;
        write_text(&tdir.join("legend.tsv"), &legend_tsv(&reader.classes))?;
        let ranks = (1..=cfg.k)
            .map(|r| {
                Ok((
                    GridWriter::create(&tdir.join(format!("rank{r}_class.asc")), header)?,
                    GridWriter::create(&tdir.join(format!("rank{r}_confidence.asc")), header)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        shells.push(TopKMap {
            header,
            classes: reader.classes.clone(),
            class_grids: Vec::new(),
            confidence_grids: Vec::new(),
        });
        io.push(FormationIo {
            formation: f.clone(),
            reader,
            masked,
            ranks,
        });
    }
    let legend = legend_of(&shells);
    let wdir = out.join("wall_to_wall");
    dir(&wdir)?;
    write_text(&wdir.join("legend.tsv"), &legend_tsv(&legend))?;
    let mut class_out = GridWriter::create(&wdir.join("class.asc"), header)?;
    let mut conf_out = GridWriter::create(&wdir.join("confidence.asc"), header)?;

    let mut report = AssembleReport::default();
    let mut first = 0;
    while first < header.nrows {
        let rows = cfg.tile_rows.min(header.nrows - first);
        let band = header.band(first, rows);
        let region_band = Grid::new(band, region.read_rows(rows)?)?;
        let coast_band = Grid::new(band, coast.read_rows(rows)?)?;
        let lc_band = Grid::new(band, lc.read_rows(rows)?)?;
        let probs = io
            .iter_mut()
            .map(|f| f.reader.read_band(rows))
            .collect::<Result<Vec<Cube>>>()?;
        let results = probs
            .par_iter()
            .map(|prob| {
                let regional = regional_masks(&prob.classes, &cfg.association, &region_band, &coast_band, &cfg.mask)?;
                let masked = apply_masks(prob, &regional)?;
                let lcm = landcover_masks_quiet(&cfg.crosswalk, &lc_band, &prob.classes);
                let filtered = apply_masks(&masked, &lcm.cube)?;
                Ok((masked, top_k(&filtered, cfg.k), lcm.unknown))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut per_formation = BTreeMap::new();
        for (f, (masked, topk, unknown)) in io.iter_mut().zip(results) {
            f.masked.write_band(&masked)?;
            for ((cw, pw), (cg, pg)) in f
                .ranks
                .iter_mut()
                .zip(topk.class_grids.iter().zip(&topk.confidence_grids))
            {
                cw.write_rows(&cg.values)?;
                pw.write_rows(&pg.values)?;
            }
            report.unknown_landcover.extend(unknown);
            per_formation.insert(f.formation.clone(), topk);
        }
        let w = wall_to_wall_with_legend(&per_formation, &lc_band, &cfg.crosswalk, &legend)?;
        class_out.write_rows(&w.class.values)?;
        conf_out.write_rows(&w.confidence.values)?;
        report.missing_priority += w.missing_priority;
        report.mapped_pixels += w.class.values.iter().filter(|&&v| !w.class.is_nodata(v)).count();
        report.pixels += band.len();
        report.tiles += 1;
        first += rows;
    }
    for f in io {
        f.masked.finish()?;
        for (c, p) in f.ranks {
            c.finish()?;
            p.finish()?;
        }
    }
    class_out.finish()?;
    conf_out.finish()?;
    region.finish()?;
    coast.finish()?;
    lc.finish()?;
    write_text(&out.join("priority.tsv"), &priority_tsv(&cfg.crosswalk))?;

    if !report.unknown_landcover.is_empty() {
        log::warn!(
            "land-cover codes missing from the crosswalk: {:?}",
            report.unknown_landcover
        );
    }
    if report.missing_priority > 0 {
        log::warn!(
            "{} pixels have a land-cover code without priority rule",
            report.missing_priority
        );
    }
    Ok(report)
}

fn priority_tsv(cw: &CrosswalkTable) -> String {
    let mut out = String::from("landcover\tpriority\n");
    for (lc, list) in &cw.lc_priority {
        let names: Vec<&str> = list.iter().map(HabitatCode::as_str).collect();
        out.push_str(&format!("{lc}\t{}\n", names.join(",")));
    }
    out
}
