//! Per-class raster stacks stored as a directory of grids plus `manifest.tsv`.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::grid::{is_nodata, Grid, GridHeader, GridReader, GridWriter};
use crate::error::{Error, Result};
use crate::taxonomy::HabitatCode;

pub const MANIFEST: &str = "manifest.tsv";

/// Aligned single-band layers, one per class. Used both for probability
/// cubes (layers sum to one per pixel) and for 0/1 mask cubes.
#[derive(Debug, Clone, PartialEq)]
pub struct Cube {
    pub header: GridHeader,
    pub classes: Vec<HabitatCode>,
    pub layers: Vec<Vec<f64>>,
}

pub type ProbabilityCube = Cube;
pub type MaskCube = Cube;

impl Cube {
    pub fn new(header: GridHeader, classes: Vec<HabitatCode>, layers: Vec<Vec<f64>>) -> Result<Self> {
        if classes.len() != layers.len() {
            return Err(Error::Dimension {
                expected: classes.len(),
                found: layers.len(),
            });
        }
        for l in &layers {
            if l.len() != header.len() {
                return Err(Error::Dimension {
                    expected: header.len(),
                    found: l.len(),
                });
            }
        }
        Ok(Cube {
            header,
            classes,
            layers,
        })
    }

    pub fn from_grids(classes: Vec<HabitatCode>, grids: Vec<Grid>) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::invalid("a cube needs at least one layer"))?
            .header;
        for g in &grids[1..] {
            first.ensure_aligned(&g.header)?;
        }
        Cube::new(first, classes, grids.into_iter().map(|g| g.values).collect())
    }

    pub fn n_pixels(&self) -> usize {
        self.header.len()
    }

    pub fn is_nodata_pixel(&self, i: usize) -> bool {
        self.layers.iter().any(|l| is_nodata(l[i], self.header.nodata))
    }

    /// Class values at one pixel, `None` when the pixel is nodata.
    pub fn pixel(&self, i: usize) -> Option<Vec<f64>> {
        if self.is_nodata_pixel(i) {
            None
        } else {
            Some(self.layers.iter().map(|l| l[i]).collect())
        }
    }

    pub fn set_pixel(&mut self, i: usize, values: Option<&[f64]>) {
        let nodata = self.header.nodata;
        for (c, layer) in self.layers.iter_mut().enumerate() {
            layer[i] = values.map_or(nodata, |v| v[c]);
        }
    }

    pub fn layer_grid(&self, c: usize) -> Grid {
        Grid {
            header: self.header,
            values: self.layers[c].clone(),
        }
    }

    pub fn band(&self, first_row: usize, nrows: usize) -> Cube {
        let n = self.header.ncols;
        Cube {
            header: self.header.band(first_row, nrows),
            classes: self.classes.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| l[first_row * n..(first_row + nrows) * n].to_vec())
                .collect(),
        }
    }

    /// Checks the probability-cube invariant at every pixel.
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        for i in 0..self.n_pixels() {
            if let Some(p) = self.pixel(i) {
                let sum: f64 = p.iter().sum();
                if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > tol {
                    return Err(Error::invalid(format!(
                        "pixel {i} is not a probability vector (sum {sum})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_mask(&self) -> Result<()> {
        for (c, l) in self.layers.iter().enumerate() {
            if let Some(v) = l
                .iter()
                .find(|&&v| v != 0.0 && v != 1.0 && !is_nodata(v, self.header.nodata))
            {
                return Err(Error::invalid(format!(
                    "mask layer {} holds non-binary value {v}",
                    self.classes[c]
                )));
            }
        }
        Ok(())
    }
}

fn layer_file(code: &HabitatCode) -> String {
    format!("{code}.asc")
}

fn read_manifest(dir: &Path) -> Result<Vec<(HabitatCode, String)>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (code, file) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(&path, i + 1, "expected `class<TAB>filename`"))?;
        let code = HabitatCode::parse(code.trim()).map_err(|e| Error::parse(&path, i + 1, e.to_string()))?;
        out.push((code, file.trim().to_string()));
    }
    if out.is_empty() {
        return Err(Error::parse(&path, 1, "manifest lists no layers"));
    }
    Ok(out)
}

pub fn read_cube(dir: &Path) -> Result<Cube> {
    let mut reader = CubeReader::open(dir)?;
    let cube = reader.read_band(reader.header.nrows)?;
    Ok(cube)
}

pub fn write_cube(cube: &Cube, dir: &Path) -> Result<()> {
    let mut w = CubeWriter::create(dir, cube.header, cube.classes.clone())?;
    w.write_band(cube)?;
    w.finish()
}

/// Streams a cube directory band by band.
pub struct CubeReader {
    readers: Vec<GridReader>,
    pub header: GridHeader,
    pub classes: Vec<HabitatCode>,
}

impl CubeReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let mut readers = Vec::with_capacity(manifest.len());
        let mut classes = Vec::with_capacity(manifest.len());
        for (code, file) in manifest {
            let r = GridReader::open(&dir.join(&file))?;
            if let Some(first) = readers.first() {
                let first: &GridReader = first;
                first.header.ensure_aligned(&r.header)?;
            }
            readers.push(r);
            classes.push(code);
        }
        let header = readers[0].header;
        Ok(CubeReader {
            readers,
            header,
            classes,
        })
    }

    pub fn rows_remaining(&self) -> usize {
        self.readers[0].rows_remaining()
    }

    pub fn read_band(&mut self, nrows: usize) -> Result<Cube> {
        let first = self.header.nrows - self.rows_remaining();
        let layers = self
            .readers
            .iter_mut()
            .map(|r| r.read_rows(nrows))
            .collect::<Result<Vec<_>>>()?;
        Cube::new(self.header.band(first, nrows), self.classes.clone(), layers)
    }
}

pub struct CubeWriter {
    writers: Vec<GridWriter>,
}

impl CubeWriter {
    pub fn create(dir: &Path, header: GridHeader, classes: Vec<HabitatCode>) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let mut writers = Vec::with_capacity(classes.len());
        for code in &classes {
            let file = layer_file(code);
            let _ = writeln!(manifest, "{code}\t{file}");
            writers.push(GridWriter::create(&dir.join(&file), header)?);
        }
        let mpath = dir.join(MANIFEST);
        std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        Ok(CubeWriter { writers })
    }

    pub fn write_band(&mut self, band: &Cube) -> Result<()> {
        if band.layers.len() != self.writers.len() {
            return Err(Error::Dimension {
                expected: self.writers.len(),
                found: band.layers.len(),
            });
        }
        for (w, l) in self.writers.iter_mut().zip(&band.layers) {
            w.write_rows(l)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        self.writers.into_iter().try_for_each(GridWriter::finish)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codes(list: &[&str]) -> Vec<HabitatCode> {
        list.iter().map(|c| HabitatCode::parse(c).unwrap()).collect()
    }

    #[test]
    fn cube_roundtrip_keeps_class_order() {
        let dir = tempfile::tempdir().unwrap();
        let h = GridHeader::new(2, 1, 0.0, 0.0, 100.0);
        let cube = Cube::new(
            h,
            codes(&["T18", "T12", "T17"]),
            vec![vec![0.2, 0.5], vec![0.3, 0.25], vec![0.5, 0.25]],
        )
        .unwrap();
        write_cube(&cube, dir.path()).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest, "T18\tT18.asc\nT12\tT12.asc\nT17\tT17.asc\n");
        let back = read_cube(dir.path()).unwrap();
        assert_eq!(back, cube);

        // byte-compare a second write of what was read
        let dir2 = tempfile::tempdir().unwrap();
        write_cube(&back, dir2.path()).unwrap();
        for f in ["manifest.tsv", "T18.asc", "T12.asc", "T17.asc"] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn misaligned_layers_name_both_headers() {
        let dir = tempfile::tempdir().unwrap();
        let a = Grid::filled(GridHeader::new(2, 2, 0.0, 0.0, 100.0), 0.5);
        let b = Grid::filled(GridHeader::new(2, 2, 0.0, 100.0, 100.0), 0.5);
        crate::dataio::write_grid(&a, &dir.path().join("a.asc")).unwrap();
        crate::dataio::write_grid(&b, &dir.path().join("b.asc")).unwrap();
        std::fs::write(dir.path().join(MANIFEST), "T17\ta.asc\nT18\tb.asc\n").unwrap();
        let err = read_cube(dir.path()).unwrap_err().to_string();
        assert!(err.contains("yll 0") && err.contains("yll 100"), "{err}");
    }

    #[test]
    fn simplex_and_mask_checks() {
        let h = GridHeader::new(2, 1, 0.0, 0.0, 1.0);
        let good = Cube::new(h, codes(&["T17", "T18"]), vec![vec![0.4, -9999.0], vec![0.6, -9999.0]]).unwrap();
        good.check_simplex(1e-4).unwrap();
        let bad = Cube::new(h, codes(&["T17", "T18"]), vec![vec![0.4, 0.0], vec![0.5, 1.0]]).unwrap();
        assert!(bad.check_simplex(1e-4).is_err());
        assert!(bad.check_mask().is_err());
        let mask = Cube::new(h, codes(&["T17"]), vec![vec![1.0, -9999.0]]).unwrap();
        mask.check_mask().unwrap();
    }
}
