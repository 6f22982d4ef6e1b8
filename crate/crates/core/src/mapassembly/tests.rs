use super::*;
use crate::dataio::{read_grid, write_cube, write_grid, DEFAULT_NODATA};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ND: f64 = DEFAULT_NODATA;

fn code(s: &str) -> HabitatCode {
    HabitatCode::parse(s).unwrap()
}

fn codes(list: &[&str]) -> Vec<HabitatCode> {
    list.iter().map(|c| code(c)).collect()
}

fn header(ncols: usize, nrows: usize) -> GridHeader {
    GridHeader::new(ncols, nrows, 0.0, 0.0, 1000.0)
}

fn cube(classes: &[&str], pixels: &[&[f64]]) -> Cube {
    let h = header(pixels.len(), 1);
    let layers = (0..classes.len())
        .map(|c| pixels.iter().map(|p| p[c]).collect())
        .collect();
    Cube::new(h, codes(classes), layers).unwrap()
}

fn grid(values: &[f64]) -> Grid {
    Grid::new(header(values.len(), 1), values.to_vec()).unwrap()
}

#[test]
fn association_counts_and_threshold() {
    let g = Grid::new(header(2, 1), vec![2.0, 9.0]).unwrap();
    let mut plots = Vec::new();
    for _ in 0..4 {
        plots.push((500.0, 500.0, code("T17")));
    }
    for _ in 0..6 {
        plots.push((1500.0, 500.0, code("T17")));
    }
    for _ in 0..3 {
        plots.push((1500.0, 500.0, code("R11")));
    }
    let m = association_matrix(&plots, &g, 1).unwrap();
    assert!(m.is_allowed(&code("T17"), 2) && m.is_allowed(&code("T17"), 9));
    assert!(m.is_allowed(&code("R11"), 9));
    let m = association_matrix(&plots[..10], &g, 5).unwrap();
    assert!(!m.is_allowed(&code("T17"), 2) && m.is_allowed(&code("T17"), 9));
    let err = association_matrix(&plots, &g, 5).unwrap_err();
    assert!(err.to_string().contains("R11"), "{err}");
}

#[test]
fn association_nodata_and_outside() {
    let g = Grid::new(header(2, 1), vec![ND, 4.0]).unwrap();
    let plots = vec![
        (500.0, 500.0, code("T17")),
        (1500.0, 500.0, code("T17")),
        (-50.0, 500.0, code("R11")),
    ];
    let m = association_matrix(&plots, &g, 1).unwrap();
    assert_eq!(m.allowed_regions(&code("T17")).unwrap().len(), 1);
    assert!(m.is_allowed(&code("R11"), OUTSIDE_REGION));
    let only_nodata = vec![(500.0, 500.0, code("T17"))];
    assert!(association_matrix(&only_nodata, &g, 1).is_err());
}

fn assoc(pairs: &[(&str, &[i64])]) -> AssociationMatrix {
    let allowed = pairs
        .iter()
        .map(|(c, r)| (code(c), r.iter().copied().collect()))
        .collect();
    AssociationMatrix::from_allowed(allowed, vec![], 1).unwrap()
}

#[test]
fn regional_mask_examples() {
    let a = assoc(&[("N1A", &[1]), ("T17", &[1])]);
    let region = grid(&[1.0, 1.0, 2.0, ND]);
    let coast = grid(&[10_000.0, 100.0, 0.0, 0.0]);
    let p = MaskParams::default();
    let n = regional_mask(&code("N1A"), &a, &region, &coast, &p).unwrap();
    assert_eq!(n.values, vec![0.0, 1.0, 0.0, ND]);
    let t = regional_mask(&code("T17"), &a, &region, &coast, &p).unwrap();
    assert_eq!(t.values, vec![1.0, 1.0, 0.0, ND]);
    let saltmarsh = assoc(&[("MA221", &[1])]);
    let m = regional_mask(&code("MA221"), &saltmarsh, &region, &coast, &p).unwrap();
    assert_eq!(m.values[0], 0.0);
    let bad = Grid::new(header(3, 1), vec![0.0; 3]).unwrap();
    assert!(regional_mask(&code("T17"), &a, &region, &bad, &p).is_err());
}

#[test]
fn apply_masks_examples() {
    let p = cube(
        &["T11", "T12", "T13"],
        &[&[0.5, 0.3, 0.2], &[0.5, 0.3, 0.2], &[0.1, 0.1, 0.8]],
    );
    let m = cube(
        &["T11", "T12", "T13"],
        &[&[0.0, 1.0, 1.0], &[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0]],
    );
    let out = apply_masks(&p, &m).unwrap();
    assert_eq!(out.pixel(0).unwrap(), vec![0.0, 0.6, 0.4]);
    assert_eq!(out.pixel(1).unwrap(), vec![0.5, 0.3, 0.2]);
    assert!(out.pixel(2).is_none());
    let ones: &[f64] = &[1.0, 1.0, 1.0];
    let other = cube(&["T11", "T12", "T14"], &[ones; 3]);
    assert!(apply_masks(&p, &other).is_err());
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k)
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    let s: f64 = v.iter().sum();
    if s == 0.0 {
        let mut v = vec![0.0; k];
        v[0] = 1.0;
        return v;
    }
    v.iter().map(|x| x / s).collect()
}

fn random_cubes(seed: u64, n: usize, k: usize) -> (Cube, Cube, Cube) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<String> = (0..k).map(|i| format!("T{}{}", 1 + i / 9, 1 + i % 9)).collect();
    let names: Vec<&str> = classes.iter().map(String::as_str).collect();
    let probs: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, k)).collect();
    let m1: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..k).map(|_| f64::from(u8::from(rng.gen_bool(0.7)))).collect())
        .collect();
    let m2: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..k).map(|_| f64::from(u8::from(rng.gen_bool(0.7)))).collect())
        .collect();
    let build = |v: &Vec<Vec<f64>>| {
        let refs: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
        cube(&names, &refs)
    };
    (build(&probs), build(&m1), build(&m2))
}

#[test]
fn masking_properties_on_random_cubes() {
    let (p, m1, m2) = random_cubes(5, 2000, 7);
    let once = apply_masks(&p, &m1).unwrap();
    once.check_simplex(1e-12).unwrap();
    let top = top_k(&once, 3);
    for i in 0..p.n_pixels() {
        let mut last = f64::INFINITY;
        for r in 0..3 {
            if let Some((c, conf)) = top.at(r, i) {
                let ci = p.classes.iter().position(|x| x == c).unwrap();
                assert_eq!(m1.layers[ci][i], 1.0);
                assert!(conf > 0.0 && conf <= last);
                last = conf;
            } else {
                // lower ranks are undefined once one is
                for rr in r..3 {
                    assert!(top.at(rr, i).is_none());
                }
                break;
            }
        }
    }
    let both = Cube {
        layers: m1
            .layers
            .iter()
            .zip(&m2.layers)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
            .collect(),
        ..m1.clone()
    };
    let twice = apply_masks(&once, &m2).unwrap();
    let joint = apply_masks(&p, &both).unwrap();
    for i in 0..p.n_pixels() {
        match (twice.pixel(i), joint.pixel(i)) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 4.0 * f64::EPSILON, "{x} vs {y}");
                }
            }
            other => panic!("pixel {i}: {other:?}"),
        }
    }
}

#[test]
fn top_k_examples() {
    let p = cube(
        &["T11", "T12", "T13"],
        &[&[0.6, 0.3, 0.1], &[0.7, 0.3, 0.0], &[0.0, 0.5, 0.5], &[ND, ND, ND]],
    );
    let t = top_k(&p, 3);
    assert_eq!(t.at(0, 0), Some((&code("T11"), 0.6)));
    assert_eq!(t.at(2, 0), Some((&code("T13"), 0.1)));
    assert_eq!(t.at(2, 1), None);
    assert_eq!(t.at(0, 2), Some((&code("T12"), 0.5)));
    assert_eq!(t.at(1, 2), Some((&code("T13"), 0.5)));
    assert_eq!(t.at(0, 3), None);
    // ties follow code order even when layers are stored out of order
    let p = cube(&["T13", "T12"], &[&[0.5, 0.5]]);
    assert_eq!(top_k(&p, 2).at(0, 0).unwrap().0, &code("T12"));
}

#[test]
fn landcover_mask_examples() {
    let cw = crate::dataio::parse_crosswalk(
        Path::new("cw.tsv"),
        "[classes]\n311\tT17\n311\tT18\n411\tQ11\n[priority]\n311\tT\n",
    )
    .unwrap();
    let lc = grid(&[311.0, 411.0, ND, 999.0]);
    let m = landcover_masks(&cw, &lc, &codes(&["T17", "Q11", "S21"]));
    assert_eq!(m.layers[0], vec![1.0, 0.0, ND, 0.0]);
    assert_eq!(m.layers[1], vec![0.0, 1.0, ND, 0.0]);
    assert_eq!(m.layers[2], vec![0.0, 0.0, ND, 0.0]);
    let q = landcover_masks_quiet(&cw, &lc, &codes(&["T17"]));
    assert_eq!(q.unknown.into_iter().collect::<Vec<_>>(), vec![999]);
}

use std::path::Path;

#[test]
fn wall_to_wall_follows_priority_not_confidence() {
    let cw = crate::dataio::parse_crosswalk(
        Path::new("cw.tsv"),
        "[classes]\n1\tQ11\n1\tT17\n[priority]\n1\tQ,T\n2\tT\n",
    )
    .unwrap();
    let q = top_k(
        &cube(&["Q11", "Q12"], &[&[0.4, 0.35], &[ND, ND], &[0.9, 0.1], &[0.9, 0.1]]),
        3,
    );
    let t = top_k(
        &cube(&["T17", "T18"], &[&[0.99, 0.01], &[0.8, 0.2], &[ND, ND], &[0.5, 0.5]]),
        3,
    );
    let lc = grid(&[1.0, 1.0, 2.0, 7.0]);
    let per: BTreeMap<_, _> = [(code("Q"), q), (code("T"), t)].into_iter().collect();
    let w = wall_to_wall(&per, &lc, &cw).unwrap();
    assert_eq!(w.legend, codes(&["Q11", "Q12", "T17", "T18"]));
    assert_eq!(w.class.values, vec![1.0, 3.0, ND, ND]);
    assert_eq!(w.confidence.values, vec![0.4, 0.8, ND, ND]);
    assert_eq!(w.missing_priority, 1);
}

#[test]
fn single_formation_is_its_top1() {
    let (p, _, _) = random_cubes(9, 50, 4);
    let t = top_k(&p, 3);
    let cw = crate::dataio::parse_crosswalk(Path::new("cw.tsv"), "[priority]\n1\tT\n").unwrap();
    let lc = Grid::filled(p.header, 1.0);
    let per: BTreeMap<_, _> = [(code("T"), t.clone())].into_iter().collect();
    let w = wall_to_wall(&per, &lc, &cw).unwrap();
    assert_eq!(w.class, t.class_grids[0]);
    assert_eq!(w.confidence, t.confidence_grids[0]);
}

#[test]
fn tiled_assembly_matches_whole_grid_computation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = GridHeader::new(9, 7, 0.0, 0.0, 1000.0);
    let region = Grid::new(
        h,
        (0..h.len()).map(|i| if i == 5 { ND } else { (i % 3) as f64 }).collect(),
    )
    .unwrap();
    let coast = Grid::new(h, (0..h.len()).map(|i| (i % 9) as f64 * 1000.0).collect()).unwrap();
    let lc = Grid::new(h, (0..h.len()).map(|i| [1.0, 2.0, 3.0][i % 3]).collect()).unwrap();
    write_grid(&region, &root.join("region.asc")).unwrap();
    write_grid(&coast, &root.join("coast.asc")).unwrap();
    write_grid(&lc, &root.join("lc.asc")).unwrap();
    let mut cubes = BTreeMap::new();
    for (f, classes) in [("N", vec!["N11", "N12"]), ("T", vec!["T11", "T12", "T13"])] {
        let layers: Vec<Vec<f64>> = {
            let px: Vec<Vec<f64>> = (0..h.len()).map(|_| random_simplex(&mut rng, classes.len())).collect();
            (0..classes.len()).map(|c| px.iter().map(|p| p[c]).collect()).collect()
        };
        let c = Cube::new(h, codes(&classes), layers).unwrap();
        let p = root.join(f);
        write_cube(&c, &p).unwrap();
        cubes.insert(code(f), p);
    }
    let cw = crate::dataio::parse_crosswalk(
        Path::new("cw.tsv"),
        "[classes]\n1\tN11\n1\tN12\n1\tT11\n2\tT12\n2\tT13\n2\tT11\n[priority]\n1\tN,T\n2\tT\n",
    )
    .unwrap();
    let a = assoc(&[
        ("N11", &[0, 1]),
        ("N12", &[1, 2]),
        ("T11", &[0]),
        ("T12", &[1, 2]),
        ("T13", &[0, 1, 2]),
    ]);
    let mut cfg = AssembleConfig {
        cubes: cubes.clone(),
        region: root.join("region.asc"),
        coast_dist: root.join("coast.asc"),
        landcover: root.join("lc.asc"),
        crosswalk: cw.clone(),
        association: a.clone(),
        mask: MaskParams::default(),
        k: 3,
        tile_rows: 2,
        out_dir: root.join("tiled"),
    };
    let report = assemble(&cfg).unwrap();
    assert_eq!(report.tiles, 4);
    assert!(report.unknown_landcover.contains(&3));
    cfg.tile_rows = 100;
    cfg.out_dir = root.join("whole");
    assemble(&cfg).unwrap();
    for f in [
        "wall_to_wall/class.asc",
        "wall_to_wall/confidence.asc",
        "top3/T/rank2_class.asc",
        "masked/N/N11.asc",
    ] {
        let a = std::fs::read(root.join("tiled").join(f)).unwrap();
        let b = std::fs::read(root.join("whole").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    // coastal classes never mapped farther than the inland depth
    let class = read_grid(&root.join("tiled/wall_to_wall/class.asc")).unwrap();
    for (i, &v) in class.values.iter().enumerate() {
        if v == 1.0 || v == 2.0 {
            assert!(coast.values[i] <= 5000.0);
        }
    }
    assert!(std::fs::read_to_string(root.join("tiled/priority.tsv"))
        .unwrap()
        .contains("1\tN,T"));
}
