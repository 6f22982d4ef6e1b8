//! Single-band rasters in ESRI ASCII grid format.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// Significant digits used when printing cell values.
pub const PRINT_DIGITS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub ncols: usize,
    pub nrows: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
    pub nodata: f64,
}

impl GridHeader {
    pub fn new(ncols: usize, nrows: usize, xll: f64, yll: f64, cellsize: f64) -> Self {
        GridHeader {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            nodata: DEFAULT_NODATA,
        }
    }

    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row/column of the cell containing a point. Row 0 is the northern edge.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = ((x - self.xll) / self.cellsize).floor();
        let top = self.yll + self.nrows as f64 * self.cellsize;
        let row = ((top - y) / self.cellsize).floor();
        if col < 0.0 || row < 0.0 || col >= self.ncols as f64 || row >= self.nrows as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// Header of the horizontal band `rows` (top row first).
    pub fn band(&self, first_row: usize, nrows: usize) -> GridHeader {
        let below = self.nrows - first_row - nrows;
        GridHeader {
            nrows,
            yll: self.yll + below as f64 * self.cellsize,
            ..*self
        }
    }

    pub fn ensure_aligned(&self, other: &GridHeader) -> Result<()> {
        let same_nodata = self.nodata == other.nodata || (self.nodata.is_nan() && other.nodata.is_nan());
        if self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xll == other.xll
            && self.yll == other.yll
            && self.cellsize == other.cellsize
            && same_nodata
        {
            Ok(())
        } else {
            Err(Error::HeaderMismatch {
                left: self.describe(),
                right: other.describe(),
            })
        }
    }

    fn describe(&self) -> String {
        format!(
            "[ncols {} nrows {} xll {} yll {} cellsize {} nodata {}]",
            self.ncols, self.nrows, self.xll, self.yll, self.cellsize, self.nodata
        )
    }

    fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "ncols {}", self.ncols)?;
        writeln!(out, "nrows {}", self.nrows)?;
        writeln!(out, "xllcorner {}", self.xll)?;
        writeln!(out, "yllcorner {}", self.yll)?;
        writeln!(out, "cellsize {}", self.cellsize)?;
        writeln!(out, "NODATA_value {}", self.nodata)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub header: GridHeader,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(header: GridHeader, values: Vec<f64>) -> Result<Self> {
        if values.len() != header.len() {
            return Err(Error::Dimension {
                expected: header.len(),
                found: values.len(),
            });
        }
        Ok(Grid { header, values })
    }

    pub fn filled(header: GridHeader, value: f64) -> Self {
        Grid {
            header,
            values: vec![value; header.len()],
        }
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        is_nodata(v, self.header.nodata)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.header.ncols + col]
    }

    /// Value at a map coordinate, `None` outside the extent or on nodata.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (r, c) = self.header.cell_at(x, y)?;
        let v = self.get(r, c);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn band(&self, first_row: usize, nrows: usize) -> Grid {
        let n = self.header.ncols;
        Grid {
            header: self.header.band(first_row, nrows),
            values: self.values[first_row * n..(first_row + nrows) * n].to_vec(),
        }
    }
}

pub(crate) fn is_nodata(v: f64, nodata: f64) -> bool {
    v == nodata || (nodata.is_nan() && v.is_nan())
}

/// Rounds to [`PRINT_DIGITS`] significant digits.
pub fn quantize(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{:.*e}", PRINT_DIGITS - 1, v).parse().unwrap()
}

fn push_value(line: &mut String, v: f64) {
    let _ = write!(line, "{}", quantize(v));
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let mut reader = GridReader::open(path)?;
    let header = reader.header;
    let values = reader.read_rows(header.nrows)?;
    reader.finish()?;
    Ok(Grid { header, values })
}

pub fn write_grid(grid: &Grid, path: &Path) -> Result<()> {
    let mut w = GridWriter::create(path, grid.header)?;
    w.write_rows(&grid.values)?;
    w.finish()
}

/// Streaming reader yielding rows top to bottom.
pub struct GridReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    rows_read: usize,
    pub header: GridHeader,
}

impl GridReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let keys = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value"];
        let mut vals = [0.0f64; 6];
        for (i, key) in keys.iter().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(path, i + 1, format!("missing header `{key}`")))?
                .map_err(|e| Error::io(path, e))?;
            let mut toks = line.split_whitespace();
            let name = toks.next().unwrap_or("");
            if !name.eq_ignore_ascii_case(key) {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("expected header `{key}`, found `{name}`"),
                ));
            }
            vals[i] = toks
                .next()
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| Error::parse(path, i + 1, format!("bad value for `{key}`")))?;
        }
        let dim = |v: f64, line: usize, key: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::parse(path, line, format!("`{key}` must be a positive integer")))
            }
        };
        let header = GridHeader {
            ncols: dim(vals[0], 1, "ncols")?,
            nrows: dim(vals[1], 2, "nrows")?,
            xll: vals[2],
            yll: vals[3],
            cellsize: vals[4],
            nodata: vals[5],
        };
        if header.cellsize.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::parse(path, 5, "cellsize must be > 0"));
        }
        Ok(GridReader {
            path: path.to_path_buf(),
            lines,
            line_no: 6,
            rows_read: 0,
            header,
        })
    }

    pub fn rows_remaining(&self) -> usize {
        self.header.nrows - self.rows_read
    }

    pub fn read_rows(&mut self, n: usize) -> Result<Vec<f64>> {
        let ncols = self.header.ncols;
        let mut out = Vec::with_capacity(n * ncols);
        for _ in 0..n {
            let line = loop {
                match self.lines.next() {
                    Some(l) => {
                        self.line_no += 1;
                        let l = l.map_err(|e| Error::io(&self.path, e))?;
                        if !l.trim().is_empty() {
                            break l;
                        }
                    }
                    None => {
                        return Err(Error::parse(
                            &self.path,
                            self.line_no,
                            format!(
                                "value count mismatch: expected {} values, found {}",
                                self.header.len(),
                                self.rows_read * ncols + out.len() % ncols.max(1)
                            ),
                        ))
                    }
                }
            };
            let start = out.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(&self.path, self.line_no, format!("bad cell value `{tok}`")))?;
                if !v.is_finite() && !is_nodata(v, self.header.nodata) {
                    return Err(Error::parse(&self.path, self.line_no, "non-finite cell value"));
                }
                out.push(v);
            }
            let found = out.len() - start;
            if found != ncols {
                return Err(Error::parse(
                    &self.path,
                    self.line_no,
                    format!("value count mismatch: expected {ncols} values in row, found {found}"),
                ));
            }
            self.rows_read += 1;
        }
        Ok(out)
    }

    /// Fails if any non-blank content follows the last row.
    pub fn finish(mut self) -> Result<()> {
        for l in self.lines.by_ref() {
            self.line_no += 1;
            let l = l.map_err(|e| Error::io(&self.path, e))?;
            if !l.trim().is_empty() {
                let extra = l.split_whitespace().count();
                return Err(Error::parse(
                    &self.path,
                    self.line_no,
                    format!(
                        "value count mismatch: expected {} values, found at least {}",
                        self.header.len(),
                        self.header.len() + extra
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Streaming writer; rows must be supplied top to bottom.
pub struct GridWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: GridHeader,
    rows_written: usize,
}

impl GridWriter {
    pub fn create(path: &Path, header: GridHeader) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        header.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(GridWriter {
            path: path.to_path_buf(),
            out,
            header,
            rows_written: 0,
        })
    }

    pub fn write_rows(&mut self, values: &[f64]) -> Result<()> {
        let ncols = self.header.ncols;
        if !values.len().is_multiple_of(ncols) || self.rows_written + values.len() / ncols > self.header.nrows {
            return Err(Error::Dimension {
                expected: (self.header.nrows - self.rows_written) * ncols,
                found: values.len(),
            });
        }
        let mut line = String::new();
        for row in values.chunks(ncols) {
            line.clear();
            for (i, &v) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                push_value(&mut line, v);
            }
            line.push('\n');
            self.out
                .write_all(line.as_bytes())
                .map_err(|e| Error::io(&self.path, e))?;
            self.rows_written += 1;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.rows_written != self.header.nrows {
            return Err(Error::Dimension {
                expected: self.header.len(),
                found: self.rows_written * self.header.ncols,
            });
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_grid_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.asc");
        let g = Grid::new(GridHeader::new(2, 2, 0.0, 0.0, 100.0), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_grid(&g, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 100\nNODATA_value -9999\n"));
        assert!(text.ends_with("1 2\n3 4\n"));
        assert_eq!(read_grid(&p).unwrap(), g);
    }

    #[test]
    fn nodata_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.asc");
        let g = Grid::new(GridHeader::new(3, 1, 10.0, 20.0, 5.0), vec![-9999.0, 0.5, -9999.0]).unwrap();
        write_grid(&g, &p).unwrap();
        let back = read_grid(&p).unwrap();
        assert_eq!(back, g);
        assert!(back.is_nodata(back.values[0]));
    }

    #[test]
    fn value_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.asc");
        std::fs::write(
            &p,
            "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3\n",
        )
        .unwrap();
        let err = read_grid(&p).unwrap_err().to_string();
        assert!(err.contains("expected 2") && err.contains("found 1"), "{err}");
        std::fs::write(
            &p,
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 4\n",
        )
        .unwrap();
        let err = read_grid(&p).unwrap_err().to_string();
        assert!(err.contains("expected 2 values"), "{err}");
        std::fs::write(&p, "nrows 2\nncols 2\n").unwrap();
        assert!(read_grid(&p).is_err());
    }

    #[test]
    fn cell_lookup() {
        let h = GridHeader::new(4, 2, 0.0, 0.0, 10.0);
        assert_eq!(h.cell_at(5.0, 15.0), Some((0, 0)));
        assert_eq!(h.cell_at(35.0, 5.0), Some((1, 3)));
        assert_eq!(h.cell_at(45.0, 5.0), None);
        let b = h.band(1, 1);
        assert_eq!((b.nrows, b.yll), (1, 0.0));
        assert_eq!(h.band(0, 1).yll, 10.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_at_print_precision(
            ncols in 1usize..6,
            nrows in 1usize..6,
            seed in prop::collection::vec(-1e6f64..1e6, 36),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("g.asc");
            let values: Vec<f64> = seed[..ncols * nrows].to_vec();
            let g = Grid::new(GridHeader::new(ncols, nrows, 3e6, 2e6, 100.0), values).unwrap();
            write_grid(&g, &p).unwrap();
            let back = read_grid(&p).unwrap();
            let expected: Vec<f64> = g.values.iter().map(|&v| quantize(v)).collect();
            prop_assert_eq!(&back.values, &expected);
            for (a, b) in back.values.iter().zip(&g.values) {
                prop_assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-300));
            }
            // a second pass is exact
            write_grid(&back, &p).unwrap();
            prop_assert_eq!(read_grid(&p).unwrap(), back);
        }
    }
}
