//! Benchmark fixtures.

use habmap_core::dataio::{Cube, GridHeader};
use habmap_core::synth::gaussian_blobs;
use habmap_core::{Dataset, HabitatCode};

/// Three well separated blobs in `dims` dimensions.
pub fn blobs(n: usize, dims: usize, seed: u64) -> Dataset {
    let centres: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..dims).map(|d| if d == c % dims { 4.0 } else { 0.0 }).collect())
        .collect();
    gaussian_blobs(n, &centres, 1.0, seed)
}

/// Square probability cube over `k` classes of formation T with smoothly varying layers.
pub fn cube(side: usize, k: usize) -> Cube {
    let header = GridHeader::new(side, side, 0.0, 0.0, 1000.0);
    let classes: Vec<HabitatCode> = (0..k)
        .map(|c| HabitatCode::parse(&format!("T{}", c + 1)).unwrap())
        .collect();
    let raw = |i: usize, c: usize| 1.5 + ((i * (c + 3)) as f64 * 0.01).sin();
    let totals: Vec<f64> = (0..header.len()).map(|i| (0..k).map(|c| raw(i, c)).sum()).collect();
    let layers = (0..k)
        .map(|c| totals.iter().enumerate().map(|(i, t)| raw(i, c) / t).collect())
        .collect();
    Cube::new(header, classes, layers).unwrap()
}

/// Binary mask dropping every third class on alternate pixels.
pub fn mask_for(cube: &Cube) -> Cube {
    let layers = (0..cube.classes.len())
        .map(|c| {
            (0..cube.n_pixels())
                .map(|i| if c % 3 == 0 && i % 2 == 0 { 0.0 } else { 1.0 })
                .collect()
        })
        .collect();
    Cube::new(cube.header, cube.classes.clone(), layers).unwrap()
}

/// Scattered plot coordinates over a square of `extent` metres with `n_classes` labels.
pub fn plots(n: usize, n_classes: usize, extent: f64) -> (Vec<(f64, f64)>, Vec<usize>) {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let coords: Vec<(f64, f64)> = (0..n).map(|_| (next() * extent, next() * extent)).collect();
    let labels = (0..n).map(|_| ((next().powi(2)) * n_classes as f64) as usize).collect();
    (coords, labels)
}
