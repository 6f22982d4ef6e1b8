//! Turning per-formation probability cubes into masked cubes, top-k maps
//! and a single wall-to-wall class map.

mod tiled;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{CrosswalkTable, Cube, Grid, GridHeader, LandCover, MaskCube, ProbabilityCube};
use crate::error::{Error, Result};
use crate::taxonomy::{HabitatCode, COASTAL_FORMATIONS};

pub use tiled::{assemble, AssembleConfig, AssembleReport, DEFAULT_TILE_ROWS};

/// Region id that plots falling outside the region grid are counted against.
pub const OUTSIDE_REGION: i64 = i64::MIN;
pub const DEFAULT_INLAND_DEPTH_M: f64 = 5000.0;
pub const DEFAULT_TOP_K: usize = 3;

/// Which regions each class may occur in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationMatrix {
    pub classes: Vec<HabitatCode>,
    pub regions: Vec<i64>,
    allowed: BTreeMap<HabitatCode, BTreeSet<i64>>,
    pub min_count: usize,
}

impl AssociationMatrix {
    pub fn from_allowed(
        allowed: BTreeMap<HabitatCode, BTreeSet<i64>>,
        regions: Vec<i64>,
        min_count: usize,
    ) -> Result<Self> {
        if let Some((c, _)) = allowed.iter().find(|(_, s)| s.is_empty()) {
            return Err(Error::invalid(format!("class {c} has no allowed region")));
        }
        let mut regions = regions;
        regions.extend(allowed.values().flatten().copied());
        regions.sort_unstable();
        regions.dedup();
        Ok(AssociationMatrix {
            classes: allowed.keys().cloned().collect(),
            regions,
            allowed,
            min_count,
        })
    }

    pub fn is_allowed(&self, class: &HabitatCode, region: i64) -> bool {
        self.allowed.get(class).is_some_and(|s| s.contains(&region))
    }

    pub fn allowed_regions(&self, class: &HabitatCode) -> Option<&BTreeSet<i64>> {
        self.allowed.get(class)
    }

    /// Full matrix as `class<TAB>region<TAB>0|1` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            for r in &self.regions {
                let _ = writeln!(out, "{c}\t{r}\t{}", u8::from(self.is_allowed(c, *r)));
            }
        }
        out
    }
}

fn region_id(v: f64) -> i64 {
    v.round() as i64
}

/// Counts plots per (class, region) and keeps pairs reaching `min_count`.
pub fn association_matrix(
    plots: &[(f64, f64, HabitatCode)],
    region_grid: &Grid,
    min_count: usize,
) -> Result<AssociationMatrix> {
    let mut counts: BTreeMap<HabitatCode, BTreeMap<i64, usize>> = BTreeMap::new();
    let mut outside = 0usize;
    let mut on_nodata = 0usize;
    for (x, y, class) in plots {
        let region = match region_grid.header.cell_at(*x, *y) {
            None => {
                outside += 1;
                OUTSIDE_REGION
            }
            Some((r, c)) => {
                let v = region_grid.get(r, c);
                if region_grid.is_nodata(v) {
                    on_nodata += 1;
                    counts.entry(class.clone()).or_default();
                    continue;
                }
                region_id(v)
            }
        };
        *counts.entry(class.clone()).or_default().entry(region).or_default() += 1;
    }
    if outside > 0 {
        log::warn!("{outside} plots fall outside the region grid");
    }
    if on_nodata > 0 {
        log::warn!("{on_nodata} plots fall on nodata region cells and were not counted");
    }
    let mut regions = BTreeSet::new();
    let mut allowed = BTreeMap::new();
    for (class, per_region) in counts {
        regions.extend(per_region.keys().copied());
        let set: BTreeSet<i64> = per_region
            .into_iter()
            .filter(|&(_, n)| n >= min_count.max(1))
            .map(|(r, _)| r)
            .collect();
        allowed.insert(class, set);
    }
    AssociationMatrix::from_allowed(allowed, regions.into_iter().collect(), min_count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub coastal_formations: Vec<HabitatCode>,
    pub inland_depth_m: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            coastal_formations: COASTAL_FORMATIONS
                .iter()
                .map(|c| HabitatCode::parse(c).expect("valid formation"))
                .collect(),
            inland_depth_m: DEFAULT_INLAND_DEPTH_M,
        }
    }
}

impl MaskParams {
    fn is_coastal(&self, class: &HabitatCode) -> bool {
        let f = class.formation();
        self.coastal_formations.contains(&f)
    }
}

/// 0/1 grid of pixels where `class` may occur. Coastal classes also need
/// the pixel to lie within the inland depth of the coastline; a nodata
/// coast distance counts as too far.
pub fn regional_mask(
    class: &HabitatCode,
    assoc: &AssociationMatrix,
    region: &Grid,
    coast_dist: &Grid,
    params: &MaskParams,
) -> Result<Grid> {
    region.header.ensure_aligned(&coast_dist.header)?;
    let coastal = params.is_coastal(class);
    let nodata = region.header.nodata;
    let values = region
        .values
        .iter()
        .zip(&coast_dist.values)
        .map(|(&r, &d)| {
            if region.is_nodata(r) {
                return nodata;
            }
            let mut ok = assoc.is_allowed(class, region_id(r));
            if coastal {
                ok &= !coast_dist.is_nodata(d) && d <= params.inland_depth_m;
            }
            f64::from(u8::from(ok))
        })
        .collect();
    Grid::new(region.header, values)
}

pub fn regional_masks(
    classes: &[HabitatCode],
    assoc: &AssociationMatrix,
    region: &Grid,
    coast_dist: &Grid,
    params: &MaskParams,
) -> Result<MaskCube> {
    let grids = classes
        .iter()
        .map(|c| regional_mask(c, assoc, region, coast_dist, params))
        .collect::<Result<Vec<_>>>()?;
    Cube::from_grids(classes.to_vec(), grids)
}

/// Multiplies probabilities by masks and renormalises each pixel. Pixels
/// where nothing survives become nodata.
pub fn apply_masks(prob: &ProbabilityCube, mask: &MaskCube) -> Result<ProbabilityCube> {
    if prob.classes != mask.classes {
        return Err(Error::invalid(format!(
            "class lists differ: {} vs {}",
            join_codes(&prob.classes),
            join_codes(&mask.classes)
        )));
    }
    prob.header.ensure_aligned(&mask.header)?;
    let mut out = prob.clone();
    let mut buf = vec![0.0; prob.classes.len()];
    for i in 0..prob.n_pixels() {
        if prob.is_nodata_pixel(i) || mask.is_nodata_pixel(i) {
            out.set_pixel(i, None);
            continue;
        }
        for (c, b) in buf.iter_mut().enumerate() {
            *b = prob.layers[c][i] * mask.layers[c][i];
        }
        let s: f64 = buf.iter().sum();
        if s > 0.0 {
            buf.iter_mut().for_each(|v| *v /= s);
            out.set_pixel(i, Some(&buf));
        } else {
            out.set_pixel(i, None);
        }
    }
    Ok(out)
}

fn join_codes(c: &[HabitatCode]) -> String {
    c.iter().map(HabitatCode::as_str).collect::<Vec<_>>().join(",")
}

pub(crate) struct LandcoverMasks {
    pub cube: MaskCube,
    pub unknown: BTreeSet<LandCover>,
}

pub(crate) fn landcover_masks_quiet(
    crosswalk: &CrosswalkTable,
    landcover: &Grid,
    classes: &[HabitatCode],
) -> LandcoverMasks {
    let n = landcover.values.len();
    let nodata = landcover.header.nodata;
    let mut layers = vec![vec![0.0; n]; classes.len()];
    let mut unknown = BTreeSet::new();
    for (i, &v) in landcover.values.iter().enumerate() {
        if landcover.is_nodata(v) {
            layers.iter_mut().for_each(|l| l[i] = nodata);
            continue;
        }
        let lc = v.round() as LandCover;
        match crosswalk.lc_to_classes.get(&lc) {
            Some(set) => {
                for (c, class) in classes.iter().enumerate() {
                    if set.contains(class) {
                        layers[c][i] = 1.0;
                    }
                }
            }
            None => {
                unknown.insert(lc);
            }
        }
    }
    LandcoverMasks {
        cube: Cube {
            header: landcover.header,
            classes: classes.to_vec(),
            layers,
        },
        unknown,
    }
}

pub(crate) fn classes_without_landcover(crosswalk: &CrosswalkTable, classes: &[HabitatCode]) -> Vec<HabitatCode> {
    classes
        .iter()
        .filter(|c| !crosswalk.lc_to_classes.values().any(|s| s.contains(c)))
        .cloned()
        .collect()
}

/// 0/1 cube with `layer_c = 1` where the pixel's land-cover class allows `c`.
pub fn landcover_masks(crosswalk: &CrosswalkTable, landcover: &Grid, classes: &[HabitatCode]) -> MaskCube {
    let m = landcover_masks_quiet(crosswalk, landcover, classes);
    if !m.unknown.is_empty() {
        log::warn!("land-cover codes missing from the crosswalk: {:?}", m.unknown);
    }
    for c in classes_without_landcover(crosswalk, classes) {
        log::warn!("class {c} is not allowed under any land-cover code");
    }
    m.cube
}

/// Ranked classes per pixel. Class grids hold 1-based indices into `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKMap {
    pub header: GridHeader,
    pub classes: Vec<HabitatCode>,
    pub class_grids: Vec<Grid>,
    pub confidence_grids: Vec<Grid>,
}

impl TopKMap {
    /// Class and confidence at `rank` (0-based) of pixel `i`.
    pub fn at(&self, rank: usize, i: usize) -> Option<(&HabitatCode, f64)> {
        let g = &self.class_grids[rank];
        let v = g.values[i];
        if g.is_nodata(v) {
            return None;
        }
        Some((&self.classes[v as usize - 1], self.confidence_grids[rank].values[i]))
    }

    pub fn k(&self) -> usize {
        self.class_grids.len()
    }
}

pub fn top_k(prob: &ProbabilityCube, k: usize) -> TopKMap {
    let header = prob.header;
    let n = prob.n_pixels();
    let mut class_grids = vec![Grid::filled(header, header.nodata); k];
    let mut confidence_grids = class_grids.clone();
    let mut order: Vec<usize> = (0..prob.classes.len()).collect();
    order.sort_by(|&a, &b| prob.classes[a].cmp(&prob.classes[b]));
    let mut ranked = Vec::with_capacity(order.len());
    for i in 0..n {
        if prob.is_nodata_pixel(i) {
            continue;
        }
        ranked.clear();
        ranked.extend(order.iter().copied().filter(|&c| prob.layers[c][i] > 0.0));
        // stable sort keeps code order among ties
        ranked.sort_by(|&a, &b| prob.layers[b][i].total_cmp(&prob.layers[a][i]));
        for (r, &c) in ranked.iter().take(k).enumerate() {
            class_grids[r].values[i] = (c + 1) as f64;
            confidence_grids[r].values[i] = prob.layers[c][i];
        }
    }
    TopKMap {
        header,
        classes: prob.classes.clone(),
        class_grids,
        confidence_grids,
    }
}

/// Final class map. Class grid values are 1-based indices into `legend`.
#[derive(Debug, Clone, PartialEq)]
pub struct WallToWall {
    pub legend: Vec<HabitatCode>,
    pub class: Grid,
    pub confidence: Grid,
    /// Pixels whose land-cover code has no priority row.
    pub missing_priority: usize,
}

pub fn legend_of<'a>(maps: impl IntoIterator<Item = &'a TopKMap>) -> Vec<HabitatCode> {
    let set: BTreeSet<HabitatCode> = maps.into_iter().flat_map(|m| m.classes.iter().cloned()).collect();
    set.into_iter().collect()
}

pub fn wall_to_wall(
    per_formation: &BTreeMap<HabitatCode, TopKMap>,
    landcover: &Grid,
    crosswalk: &CrosswalkTable,
) -> Result<WallToWall> {
    let legend = legend_of(per_formation.values());
    let out = wall_to_wall_with_legend(per_formation, landcover, crosswalk, &legend)?;
    if out.missing_priority > 0 {
        log::warn!(
            "{} pixels have a land-cover code without priority rule",
            out.missing_priority
        );
    }
    Ok(out)
}

pub(crate) fn wall_to_wall_with_legend(
    per_formation: &BTreeMap<HabitatCode, TopKMap>,
    landcover: &Grid,
    crosswalk: &CrosswalkTable,
    legend: &[HabitatCode],
) -> Result<WallToWall> {
    for m in per_formation.values() {
        landcover.header.ensure_aligned(&m.header)?;
    }
    let header = landcover.header;
    let mut class = Grid::filled(header, header.nodata);
    let mut confidence = Grid::filled(header, header.nodata);
    let mut missing_priority = 0;
    for i in 0..header.len() {
        let v = landcover.values[i];
        if landcover.is_nodata(v) {
            continue;
        }
        let Some(priority) = crosswalk.lc_priority.get(&(v.round() as LandCover)) else {
            missing_priority += 1;
            continue;
        };
        let hit = priority
            .iter()
            .filter_map(|f| per_formation.get(f))
            .find_map(|m| m.at(0, i));
        if let Some((code, conf)) = hit {
            let id = legend
                .binary_search(code)
                .map_err(|_| Error::invalid(format!("class {code} missing from legend")))?;
            class.values[i] = (id + 1) as f64;
            confidence.values[i] = conf;
        }
    }
    Ok(WallToWall {
        legend: legend.to_vec(),
        class,
        confidence,
        missing_priority,
    })
}

pub fn legend_tsv(legend: &[HabitatCode]) -> String {
    let mut out = String::from("id\tclass\n");
    for (i, c) in legend.iter().enumerate() {
        let _ = writeln!(out, "{}\t{c}", i + 1);
    }
    out
}

#[cfg(test)]
mod tests;
