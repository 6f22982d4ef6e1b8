//! Spatial block cross-validation.
//!
//! Plots are binned into square cells, cells are allocated to folds by
//! iterative stratification over their class histograms, and every plot
//! inherits its cell's fold. If fold sizes (in plots) deviate from the mean
//! by more than the tolerance, the cell size is halved and the allocation
//! restarts.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub col: i64,
    pub row: i64,
}

impl CellKey {
    pub fn of(x: f64, y: f64, origin: (f64, f64), cell_size: f64) -> CellKey {
        CellKey {
            col: ((x - origin.0) / cell_size).floor() as i64,
            row: ((y - origin.1) / cell_size).floor() as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionParams {
    pub cell_size: f64,
    pub k: usize,
    /// Largest tolerated relative deviation of a fold's plot count from the mean.
    pub balance_tol: f64,
    pub max_retries: usize,
    pub seed: u64,
    /// Grid anchor; defaults to the minimum coordinates floored to the cell size.
    pub origin: Option<(f64, f64)>,
}

impl Default for PartitionParams {
    fn default() -> Self {
        PartitionParams {
            cell_size: 100_000.0,
            k: 5,
            balance_tol: 0.1,
            max_retries: 3,
            seed: 0,
            origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialPartition {
    pub k: usize,
    pub cell_size: f64,
    pub origin: (f64, f64),
    pub assignment: BTreeMap<CellKey, usize>,
    pub class_freq: BTreeMap<CellKey, Vec<usize>>,
    pub plot_cells: Vec<CellKey>,
    pub plot_folds: Vec<usize>,
    /// Achieved max relative deviation of fold sizes from the mean.
    pub deviation: f64,
    pub unbalanced: bool,
    /// Number of grid sizes tried.
    pub attempts: usize,
}

impl SpatialPartition {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.plot_folds {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(train, test)` plot indices, one pair per fold.
    pub fn folds(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        (0..self.k)
            .map(|f| {
                let (test, train): (Vec<usize>, Vec<usize>) =
                    (0..self.plot_folds.len()).partition(|&i| self.plot_folds[i] == f);
                (train, test)
            })
            .collect()
    }
}

pub fn folds(partition: &SpatialPartition) -> Vec<(Vec<usize>, Vec<usize>)> {
    partition.folds()
}

fn relative_deviation(sizes: &[usize]) -> f64 {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mean = total as f64 / sizes.len() as f64;
    sizes
        .iter()
        .map(|&s| (s as f64 - mean).abs() / mean)
        .fold(0.0, f64::max)
}

/// Partitions plots at `coords` with class indices `labels` into `k` spatial blocks.
pub fn build_partition(
    coords: &[(f64, f64)],
    labels: &[usize],
    n_classes: usize,
    params: &PartitionParams,
) -> Result<SpatialPartition> {
    if coords.len() != labels.len() {
        return Err(Error::Dimension {
            expected: coords.len(),
            found: labels.len(),
        });
    }
    if params.k == 0 || coords.len() < params.k {
        return Err(Error::invalid(format!(
            "cannot form {} spatial blocks from {} plots",
            params.k,
            coords.len()
        )));
    }
    if params.cell_size.is_nan() || params.cell_size <= 0.0 {
        return Err(Error::invalid("cell size must be > 0"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("class index {bad} out of range")));
    }
    if coords.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("plot coordinates must be finite"));
    }

    let mut best: Option<SpatialPartition> = None;
    let mut cell_size = params.cell_size;
    for attempt in 0..=params.max_retries {
        let origin = params.origin.unwrap_or_else(|| {
            let min_x = coords.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
            let min_y = coords.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
            (
                (min_x / cell_size).floor() * cell_size,
                (min_y / cell_size).floor() * cell_size,
            )
        });
        let plot_cells: Vec<CellKey> = coords
            .iter()
            .map(|&(x, y)| CellKey::of(x, y, origin, cell_size))
            .collect();
        let mut class_freq: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
        for (cell, &label) in plot_cells.iter().zip(labels) {
            class_freq.entry(*cell).or_insert_with(|| vec![0; n_classes])[label] += 1;
        }
        if class_freq.len() < params.k {
            if attempt == 0 {
                return Err(Error::invalid(format!(
                    "cannot form {} spatial blocks: only {} distinct cells",
                    params.k,
                    class_freq.len()
                )));
            }
            break;
        }
        let cells: Vec<(CellKey, Vec<usize>)> = class_freq.iter().map(|(k, v)| (*k, v.clone())).collect();
        let assignment = iterative_stratify(&cells, params.k, params.seed);
        let plot_folds: Vec<usize> = plot_cells.iter().map(|c| assignment[c]).collect();
        let mut sizes = vec![0; params.k];
        for &f in &plot_folds {
            sizes[f] += 1;
        }
        let deviation = relative_deviation(&sizes);
        let candidate = SpatialPartition {
            k: params.k,
            cell_size,
            origin,
            assignment,
            class_freq,
            plot_cells,
            plot_folds,
            deviation,
            unbalanced: deviation > params.balance_tol,
            attempts: attempt + 1,
        };
        log::debug!(
            "spatial partition attempt {} (cell {} m): deviation {:.4}",
            attempt + 1,
            cell_size,
            deviation
        );
        let done = !candidate.unbalanced;
        if best.as_ref().is_none_or(|b| candidate.deviation < b.deviation) {
            best = Some(candidate);
        }
        if done {
            break;
        }
        cell_size /= 2.0;
    }
    let mut best = best.expect("at least one attempt");
    best.attempts = best.attempts.max(1);
    if best.unbalanced {
        log::warn!(
            "spatial folds remain unbalanced after retries (deviation {:.3})",
            best.deviation
        );
    }
    Ok(best)
}

/// Greedy iterative stratification of cells into `k` folds.
///
/// Repeatedly picks the class with the fewest remaining plots among
/// unassigned cells and places each cell holding it (largest count first)
/// into the fold that still desires the most of that class. Ties go to the
/// smallest fold, then to a seeded random draw.
pub fn iterative_stratify(cells: &[(CellKey, Vec<usize>)], k: usize, seed: u64) -> BTreeMap<CellKey, usize> {
    let mut out = BTreeMap::new();
    if k <= 1 {
        for (key, _) in cells {
            out.insert(*key, 0);
        }
        return out;
    }
    let n_classes = cells.iter().map(|(_, h)| h.len()).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = |h: &[usize], c: usize| h.get(c).copied().unwrap_or(0);

    // Desires are kept multiplied by k so they stay integral.
    let mut desire = vec![vec![0i64; n_classes]; k];
    for c in 0..n_classes {
        let total: usize = cells.iter().map(|(_, h)| count(h, c)).sum();
        for d in desire.iter_mut() {
            d[c] = total as i64;
        }
    }
    let mut fold_size = vec![0usize; k];
    let mut assigned = vec![false; cells.len()];
    let mut remaining: Vec<usize> = (0..n_classes)
        .map(|c| cells.iter().map(|(_, h)| count(h, c)).sum())
        .collect();
    let mut left = cells.len();

    let mut place = |i: usize,
                     fold: usize,
                     desire: &mut Vec<Vec<i64>>,
                     fold_size: &mut Vec<usize>,
                     remaining: &mut Vec<usize>,
                     assigned: &mut Vec<bool>| {
        let h = &cells[i].1;
        for (c, &n) in h.iter().enumerate() {
            desire[fold][c] -= (n * k) as i64;
            remaining[c] -= n;
        }
        fold_size[fold] += h.iter().sum::<usize>();
        assigned[i] = true;
        out.insert(cells[i].0, fold);
    };

    while left > 0 {
        let target = (0..n_classes)
            .filter(|&c| remaining[c] > 0)
            .min_by_key(|&c| (remaining[c], c));
        let mut members: Vec<usize> = match target {
            Some(c) => (0..cells.len())
                .filter(|&i| !assigned[i] && count(&cells[i].1, c) > 0)
                .collect(),
            // only empty histograms are left
            None => (0..cells.len()).filter(|&i| !assigned[i]).collect(),
        };
        let c = target.unwrap_or(0);
        members.sort_by(|&a, &b| {
            count(&cells[b].1, c)
                .cmp(&count(&cells[a].1, c))
                .then(cells[a].0.cmp(&cells[b].0))
        });
        for i in members {
            let best_desire = (0..k).map(|f| desire[f].get(c).copied().unwrap_or(0)).max().unwrap();
            let tied: Vec<usize> = (0..k)
                .filter(|&f| desire[f].get(c).copied().unwrap_or(0) == best_desire)
                .collect();
            let smallest = tied.iter().map(|&f| fold_size[f]).min().unwrap();
            let tied: Vec<usize> = tied.into_iter().filter(|&f| fold_size[f] == smallest).collect();
            let fold = if tied.len() == 1 {
                tied[0]
            } else {
                tied[rng.gen_range(0..tied.len())]
            };
            place(i, fold, &mut desire, &mut fold_size, &mut remaining, &mut assigned);
            left -= 1;
        }
    }
    out
}

/// Writes `plot_id,cell_col,cell_row,fold`.
pub fn write_blocks(path: &Path, ids: &[String], partition: &SpatialPartition) -> Result<()> {
    if ids.len() != partition.plot_folds.len() {
        return Err(Error::Dimension {
            expected: partition.plot_folds.len(),
            found: ids.len(),
        });
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["plot_id", "cell_col", "cell_row", "fold"])?;
    for ((id, cell), fold) in ids.iter().zip(&partition.plot_cells).zip(&partition.plot_folds) {
        w.write_record([id.clone(), cell.col.to_string(), cell.row.to_string(), fold.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRow {
    pub plot_id: String,
    pub cell: CellKey,
    pub fold: usize,
}

pub fn read_blocks(path: &Path) -> Result<Vec<BlockRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != 4 {
            return Err(Error::parse(path, line, "expected 4 columns"));
        }
        let num = |i: usize| -> Result<i64> {
            row[i]
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, line, format!("bad integer `{}`", &row[i])))
        };
        let fold = num(3)?;
        if fold < 0 {
            return Err(Error::parse(path, line, "negative fold"));
        }
        out.push(BlockRow {
            plot_id: row[0].to_string(),
            cell: CellKey {
                col: num(1)?,
                row: num(2)?,
            },
            fold: fold as usize,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn key(col: i64) -> CellKey {
        CellKey { col, row: 0 }
    }

    #[test]
    fn exclusive_classes_split_evenly() {
        // Oracle: enumerate all 2-fold assignments of 4 cells and keep the
        // balanced ones (2 cells per fold).
        let mut balanced = Vec::new();
        for mask in 0u32..16 {
            if mask.count_ones() == 2 {
                balanced.push((0..4).map(|i| ((mask >> i) & 1) as usize).collect::<Vec<_>>());
            }
        }
        assert_eq!(balanced.len(), 6); // 3 up to fold relabelling
        for seed in 0..20 {
            for counts in [[3, 3, 3, 3], [1, 2, 3, 4], [5, 1, 1, 5]] {
                let cells: Vec<_> = (0..4)
                    .map(|i| {
                        let mut h = vec![0; 4];
                        h[i] = counts[i];
                        (key(i as i64), h)
                    })
                    .collect();
                let a = iterative_stratify(&cells, 2, seed);
                let got: Vec<usize> = (0..4).map(|i| a[&key(i)]).collect();
                assert!(balanced.contains(&got), "{got:?}");
            }
        }
    }

    #[test]
    fn single_fold_and_single_class() {
        let cells: Vec<_> = (0..10).map(|i| (key(i), vec![7])).collect();
        let a = iterative_stratify(&cells, 1, 3);
        assert!(a.values().all(|&f| f == 0));
        let a = iterative_stratify(&cells, 5, 3);
        let mut per = [0; 5];
        for f in a.values() {
            per[*f] += 1;
        }
        assert_eq!(per, [2; 5]);
    }

    #[test]
    fn one_cell_cannot_split() {
        let coords = vec![(10.0, 10.0), (20.0, 20.0), (30.0, 30.0)];
        let err = build_partition(
            &coords,
            &[0, 1, 0],
            2,
            &PartitionParams {
                k: 2,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("cannot form 2 spatial blocks"), "{err}");
    }

    fn uniform_points(n: usize, extent: f64, classes: usize, seed: u64) -> (Vec<(f64, f64)>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n)
            .map(|_| (rng.gen_range(0.0..extent), rng.gen_range(0.0..extent / 5.0)))
            .collect();
        let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        (coords, labels)
    }

    #[test]
    fn twenty_cells_five_folds() {
        // 20 cells of 100 km: a 2000 km x 400 km strip with 5 x 4... use 10 x 2
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coords: Vec<(f64, f64)> = (0..10_000)
            .map(|_| (rng.gen_range(0.0..1_000_000.0), rng.gen_range(0.0..200_000.0)))
            .collect();
        let labels: Vec<usize> = (0..10_000).map(|_| rng.gen_range(0..6)).collect();
        let p = build_partition(
            &coords,
            &labels,
            6,
            &PartitionParams {
                origin: Some((0.0, 0.0)),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(p.class_freq.len(), 20);
        // brute-force recount
        let mut sizes = [0usize; 5];
        let mut per_class = vec![[0usize; 5]; 6];
        for (i, &(x, y)) in coords.iter().enumerate() {
            let cell = CellKey {
                col: (x / 100_000.0).floor() as i64,
                row: (y / 100_000.0).floor() as i64,
            };
            let f = p.assignment[&cell];
            assert_eq!(p.plot_folds[i], f);
            sizes[f] += 1;
            per_class[labels[i]][f] += 1;
        }
        for s in sizes {
            assert!((s as f64 - 2000.0).abs() <= 200.0, "{sizes:?}");
        }
        assert!(per_class.iter().all(|c| c.iter().all(|&n| n > 0)));
        assert!(!p.unbalanced);
    }

    #[test]
    fn folds_partition_plots() {
        let (coords, labels) = uniform_points(500, 2_000_000.0, 4, 5);
        let p = build_partition(&coords, &labels, 4, &PartitionParams::default()).unwrap();
        let folds = p.folds();
        assert_eq!(folds.len(), 5);
        let mut seen = vec![0; coords.len()];
        for (train, test) in &folds {
            assert_eq!(train.len() + test.len(), coords.len());
            for &i in test {
                seen[i] += 1;
            }
            // no cell on both sides
            let test_cells: std::collections::BTreeSet<_> = test.iter().map(|&i| p.plot_cells[i]).collect();
            assert!(train.iter().all(|&i| !test_cells.contains(&p.plot_cells[i])));
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn deterministic_given_seed() {
        let (coords, labels) = uniform_points(2000, 3_000_000.0, 8, 9);
        let params = PartitionParams {
            seed: 42,
            ..Default::default()
        };
        let a = build_partition(&coords, &labels, 8, &params).unwrap();
        let b = build_partition(&coords, &labels, 8, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regrows_to_finer_cells() {
        // Two dense clusters plus sparse points: at 100 km the cluster cells
        // dominate, forcing refinement.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut coords = Vec::new();
        for _ in 0..3000 {
            coords.push((rng.gen_range(0.0..90_000.0), rng.gen_range(0.0..90_000.0)));
        }
        for _ in 0..2000 {
            coords.push((rng.gen_range(0.0..1_000_000.0), rng.gen_range(0.0..1_000_000.0)));
        }
        let labels: Vec<usize> = (0..coords.len()).map(|i| i % 3).collect();
        let p = build_partition(
            &coords,
            &labels,
            3,
            &PartitionParams {
                max_retries: 4,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(p.attempts > 1);
        assert!(p.cell_size < 100_000.0);
        let sizes = p.fold_sizes();
        assert!((relative_deviation(&sizes) - p.deviation).abs() < 1e-12);
        assert_eq!(p.unbalanced, p.deviation > 0.1);
    }

    #[test]
    fn stratification_quality() {
        for seed in 0..5 {
            let (coords, labels) = uniform_points(3000, 3_000_000.0, 10, 100 + seed);
            let p = build_partition(
                &coords,
                &labels,
                10,
                &PartitionParams {
                    seed,
                    ..Default::default()
                },
            )
            .unwrap();
            for c in 0..10 {
                let n_c = labels.iter().filter(|&&l| l == c).count();
                let expect = n_c as f64 / 5.0;
                for f in 0..5 {
                    let got = (0..labels.len())
                        .filter(|&i| labels[i] == c && p.plot_folds[i] == f)
                        .count();
                    assert!(got >= 1);
                    assert!((got as f64 - expect).abs() <= (2.0 * expect).max(0.1 * expect));
                }
            }
        }
    }

    #[test]
    fn blocks_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blocks.csv");
        let (coords, labels) = uniform_points(100, 2_000_000.0, 3, 1);
        let p = build_partition(&coords, &labels, 3, &PartitionParams::default()).unwrap();
        let ids: Vec<String> = (0..100).map(|i| format!("p{i}")).collect();
        write_blocks(&path, &ids, &p).unwrap();
        let rows = read_blocks(&path).unwrap();
        assert_eq!(rows.len(), 100);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!((r.cell, r.fold), (p.plot_cells[i], p.plot_folds[i]));
        }
    }
}
