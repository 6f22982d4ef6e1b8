//! Synthetic landscapes with plots, predictor rasters and map-assembly
//! inputs, for tests, benchmarks and demos.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::{
    quantize, write_grid, write_plots, CrosswalkTable, FeatureValue, Grid, GridHeader, PlotRecord, PlotTable,
};
use crate::error::{Error, Result};
use crate::learners::Dataset;
use crate::preprocess::{raster_value, FeatureKind, FeatureSchema, FeatureSpec};
use crate::taxonomy::HabitatCode;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub ncols: usize,
    pub nrows: usize,
    pub cellsize: f64,
    pub n_plots: usize,
    pub classes_per_formation: usize,
    /// Standard deviation of the niche noise; larger values blur classes.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            ncols: 64,
            nrows: 64,
            cellsize: 1000.0,
            n_plots: 1500,
            classes_per_formation: 3,
            label_noise: 0.15,
            seed: 0,
        }
    }
}

/// Land-cover codes of the synthetic world and the formation each favours.
pub const LANDCOVER: [(i64, &str); 3] = [(10, "N"), (20, "R"), (30, "T")];

#[derive(Debug, Clone)]
pub struct World {
    pub schema: FeatureSchema,
    pub plots: PlotTable,
    pub features: BTreeMap<String, Grid>,
    pub region: Grid,
    pub coast_dist: Grid,
    pub landcover: Grid,
    pub crosswalk: CrosswalkTable,
}

#[derive(Debug, Clone)]
pub struct WorldPaths {
    pub plots: PathBuf,
    pub schema: PathBuf,
    pub rasters: PathBuf,
    pub region: PathBuf,
    pub coast_dist: PathBuf,
    pub landcover: PathBuf,
    pub crosswalk: PathBuf,
}

fn code(s: &str) -> HabitatCode {
    HabitatCode::parse(s).expect("valid synthetic code")
}

pub fn schema() -> FeatureSchema {
    FeatureSchema::new(vec![
        FeatureSpec::new("temp", FeatureKind::Continuous),
        FeatureSpec::new("precip", FeatureKind::Continuous),
        FeatureSpec::new("elev", FeatureKind::Continuous),
        FeatureSpec::new("aspect", FeatureKind::Cyclical { period: 360.0 }),
        FeatureSpec::new(
            "soil",
            FeatureKind::Categorical {
                categories: vec!["1".into(), "2".into(), "3".into()],
            },
        ),
        FeatureSpec::new("forest_pct", FeatureKind::Frequency { total: 100.0 }),
    ])
    .expect("valid synthetic schema")
}

impl World {
    pub fn generate(spec: &WorldSpec) -> Result<World> {
        if spec.classes_per_formation == 0 || spec.classes_per_formation > 9 {
            return Err(Error::invalid("classes per formation must be in 1..=9"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let h = GridHeader::new(spec.ncols, spec.nrows, 0.0, 0.0, spec.cellsize);
        let (w, ht) = (spec.ncols as f64, spec.nrows as f64);
        let phase: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let mut layers: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut region = Vec::with_capacity(h.len());
        let mut coast = Vec::with_capacity(h.len());
        let mut lc = Vec::with_capacity(h.len());
        let coastal_cols = (5000.0 / spec.cellsize).floor().max(1.0);
        for r in 0..spec.nrows {
            for c in 0..spec.ncols {
                let (u, v) = ((c as f64 + 0.5) / w, 1.0 - (r as f64 + 0.5) / ht);
                let wave = (6.0 * u + phase[0]).sin() * (5.0 * v + phase[1]).cos();
                let push = |layers: &mut BTreeMap<String, Vec<f64>>, k: &str, x: f64| {
                    layers.entry(k.to_string()).or_default().push(quantize(x));
                };
                push(&mut layers, "temp", 18.0 - 12.0 * v + 2.0 * wave);
                push(&mut layers, "precip", 400.0 + 1200.0 * u + 150.0 * wave);
                push(
                    &mut layers,
                    "elev",
                    800.0 * (1.0 + (4.0 * u + phase[2]).sin() * (4.0 * v + phase[3]).sin()),
                );
                push(&mut layers, "aspect", (360.0 * (u + v) * 2.0) % 360.0);
                push(&mut layers, "soil", 1.0 + ((3.0 * u + 2.0 * v).floor() % 3.0));
                push(
                    &mut layers,
                    "forest_pct",
                    (50.0 + 50.0 * wave).clamp(0.0, 100.0).round(),
                );
                region.push(1.0 + 2.0 * f64::from(u8::from(v < 0.5)) + f64::from(u8::from(u >= 0.5)));
                coast.push((c as f64 + 0.5) * spec.cellsize);
                let code = if (c as f64) < coastal_cols {
                    10.0
                } else if wave > 0.0 {
                    30.0
                } else {
                    20.0
                };
                lc.push(code);
            }
        }
        let schema = schema();
        let features: BTreeMap<String, Grid> = layers
            .into_iter()
            .map(|(k, v)| Grid::new(h, v).map(|g| (k, g)))
            .collect::<Result<_>>()?;

        let k = spec.classes_per_formation;
        let mut crosswalk = CrosswalkTable::default();
        let mut niches: BTreeMap<&str, Vec<(HabitatCode, [f64; 3])>> = BTreeMap::new();
        for (i, &(_, f)) in LANDCOVER.iter().enumerate() {
            let list = (0..k)
                .map(|j| {
                    let centre = [
                        (j as f64 + 0.5) / k as f64,
                        ((j * 7 + i * 3) % k) as f64 / k as f64 + 0.5 / k as f64,
                        rng.gen_range(0.2..0.8),
                    ];
                    (code(&format!("{f}{}{}", 1 + j / 3, 1 + j % 3)), centre)
                })
                .collect();
            niches.insert(f, list);
        }
        for (i, &(lcode, f)) in LANDCOVER.iter().enumerate() {
            let mut allowed: BTreeSet<HabitatCode> = niches[f].iter().map(|n| n.0.clone()).collect();
            let second = LANDCOVER[(i + 1) % 3].1;
            allowed.extend(niches[second].iter().map(|n| n.0.clone()));
            crosswalk.lc_to_classes.insert(lcode, allowed);
            crosswalk.lc_priority.insert(lcode, vec![code(f), code(second)]);
        }

        let names: Vec<String> = schema.features.iter().map(|f| f.name.clone()).collect();
        let norm = |name: &str, v: f64| {
            let g = &features[name];
            let (lo, hi) = g
                .values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |a, &x| (a.0.min(x), a.1.max(x)));
            (v - lo) / (hi - lo).max(1e-9)
        };
        let mut records = Vec::with_capacity(spec.n_plots);
        for i in 0..spec.n_plots {
            let x = rng.gen_range(0.0..w * spec.cellsize);
            let y = rng.gen_range(0.0..ht * spec.cellsize);
            let (r, c) = h.cell_at(x, y).expect("plot inside extent");
            let idx = r * spec.ncols + c;
            let lcv = lc[idx] as i64;
            let formation = LANDCOVER.iter().find(|l| l.0 == lcv).unwrap().1;
            let f = [
                norm("temp", features["temp"].values[idx]),
                norm("precip", features["precip"].values[idx]),
                norm("elev", features["elev"].values[idx]),
            ];
            let habitat = niches[formation]
                .iter()
                .map(|(cls, m)| {
                    let d: f64 = f.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    (d + spec.label_noise * rng.gen::<f64>(), cls)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1
                .clone();
            let values = schema
                .features
                .iter()
                .zip(&names)
                .map(|(s, n)| raster_value(&s.kind, features[n].values[idx]))
                .collect::<Vec<FeatureValue>>();
            records.push(PlotRecord {
                id: format!("p{i:05}"),
                x: quantize(x),
                y: quantize(y),
                habitat,
                features: values,
            });
        }
        Ok(World {
            schema: schema.clone(),
            plots: PlotTable { schema, records },
            features,
            region: Grid::new(h, region)?,
            coast_dist: Grid::new(h, coast)?,
            landcover: Grid::new(h, lc)?,
            crosswalk,
        })
    }

    /// Writes all inputs under `dir` using the file names the CLI expects.
    pub fn write(&self, dir: &Path) -> Result<WorldPaths> {
        let rasters = dir.join("rasters");
        std::fs::create_dir_all(&rasters).map_err(|e| Error::io(&rasters, e))?;
        let paths = WorldPaths {
            plots: dir.join("plots.csv"),
            schema: dir.join("schema.tsv"),
            region: dir.join("region.asc"),
            coast_dist: dir.join("coast.asc"),
            landcover: dir.join("landcover.asc"),
            crosswalk: dir.join("crosswalk.tsv"),
            rasters,
        };
        write_plots(&self.plots, &paths.plots)?;
        std::fs::write(&paths.schema, self.schema.to_tsv()).map_err(|e| Error::io(&paths.schema, e))?;
        for (name, g) in &self.features {
            write_grid(g, &paths.rasters.join(format!("{name}.asc")))?;
        }
        write_grid(&self.region, &paths.region)?;
        write_grid(&self.coast_dist, &paths.coast_dist)?;
        write_grid(&self.landcover, &paths.landcover)?;
        std::fs::write(&paths.crosswalk, self.crosswalk.to_tsv()).map_err(|e| Error::io(&paths.crosswalk, e))?;
        Ok(paths)
    }
}

/// Isotropic Gaussian clusters around `centres`, `n` rows in round-robin class order.
pub fn gaussian_blobs(n: usize, centres: &[Vec<f64>], std: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = centres[0].len();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centres.len();
        for m in &centres[c] {
            x.push(m + std * normal(&mut rng));
        }
        y.push(c);
    }
    Dataset::numeric(x, d, y, centres.len()).expect("consistent blob shapes")
}

/// Two overlapping classes with `minority` share of class 1.
pub fn imbalanced_pair(n: usize, minority: f64, shift: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * 2);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let c = usize::from(rng.gen::<f64>() < minority);
        let m = if c == 1 { shift } else { 0.0 };
        x.push(m + normal(&mut rng));
        x.push(m + normal(&mut rng));
        y.push(c);
    }
    Dataset::numeric(x, 2, y, 2).expect("consistent shapes")
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}
