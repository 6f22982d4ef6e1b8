//! Crosswalk and association-matrix TSV files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mapassembly::AssociationMatrix;
use crate::taxonomy::HabitatCode;

/// Land-cover code as stored in the land-cover raster.
pub type LandCover = i64;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrosswalkTable {
    pub lc_to_classes: BTreeMap<LandCover, BTreeSet<HabitatCode>>,
    pub lc_priority: BTreeMap<LandCover, Vec<HabitatCode>>,
}

impl CrosswalkTable {
    pub fn allows(&self, lc: LandCover, class: &HabitatCode) -> bool {
        self.lc_to_classes.get(&lc).is_some_and(|s| s.contains(class))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("[classes]\n");
        for (lc, set) in &self.lc_to_classes {
            for c in set {
                let _ = writeln!(out, "{lc}\t{c}");
            }
        }
        out.push_str("[priority]\n");
        for (lc, list) in &self.lc_priority {
            let joined: Vec<&str> = list.iter().map(HabitatCode::as_str).collect();
            let _ = writeln!(out, "{lc}\t{}", joined.join(","));
        }
        out
    }
}

fn parse_lc(path: &Path, line: usize, tok: &str) -> Result<LandCover> {
    tok.trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("bad land-cover code `{tok}`")))
}

fn fields(line: &str) -> Vec<&str> {
    line.split(['\t', ' '])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn read_crosswalk(path: &Path) -> Result<CrosswalkTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_crosswalk(path, &text)
}

pub fn parse_crosswalk(path: &Path, text: &str) -> Result<CrosswalkTable> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Classes,
        Priority,
    }
    let mut section = Section::None;
    let mut table = CrosswalkTable::default();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "[classes]" => {
                section = Section::Classes;
                continue;
            }
            "[priority]" => {
                section = Section::Priority;
                continue;
            }
            _ => {}
        }
        let f = fields(line);
        if f.len() != 2 {
            return Err(Error::parse(path, ln, "expected two columns"));
        }
        let lc = parse_lc(path, ln, f[0])?;
        match section {
            Section::None => return Err(Error::parse(path, ln, "row outside a section")),
            Section::Classes => {
                let code = HabitatCode::parse(f[1]).map_err(|e| Error::parse(path, ln, e.to_string()))?;
                if code.level() != 3 {
                    return Err(Error::parse(path, ln, format!("`{code}` is not a level-3 code")));
                }
                table.lc_to_classes.entry(lc).or_default().insert(code);
            }
            Section::Priority => {
                let mut list: Vec<HabitatCode> = Vec::new();
                for tok in f[1].split(',') {
                    let code = HabitatCode::parse(tok.trim())
                        .ok()
                        .filter(|c| c.level() == 1)
                        .ok_or_else(|| Error::parse(path, ln, format!("unknown formation `{tok}`")))?;
                    if list.contains(&code) {
                        return Err(Error::parse(path, ln, format!("duplicate formation `{code}`")));
                    }
                    list.push(code);
                }
                if table.lc_priority.insert(lc, list).is_some() {
                    return Err(Error::parse(path, ln, format!("duplicate priority row for {lc}")));
                }
            }
        }
    }
    Ok(table)
}

pub fn write_crosswalk(table: &CrosswalkTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_tsv()).map_err(|e| Error::io(path, e))
}

pub fn read_association(path: &Path) -> Result<AssociationMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut allowed: BTreeMap<HabitatCode, BTreeSet<i64>> = BTreeMap::new();
    let mut regions = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f = fields(line);
        if f.len() != 3 {
            return Err(Error::parse(path, ln, "expected `class<TAB>region<TAB>0|1`"));
        }
        let code = HabitatCode::parse(f[0]).map_err(|e| Error::parse(path, ln, e.to_string()))?;
        let region = parse_lc(path, ln, f[1])?;
        regions.insert(region);
        let set = allowed.entry(code).or_default();
        match f[2] {
            "1" => {
                set.insert(region);
            }
            "0" => {}
            other => return Err(Error::parse(path, ln, format!("entry must be 0 or 1, found `{other}`"))),
        }
    }
    AssociationMatrix::from_allowed(allowed, regions.into_iter().collect(), 1)
}

pub fn write_association(m: &AssociationMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, m.to_tsv()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(s: &str) -> HabitatCode {
        HabitatCode::parse(s).unwrap()
    }

    #[test]
    fn parses_sections() {
        let text = "# fixture\n[classes]\n311\tT17\n311\tT18\n411\tQ11\n[priority]\n411\tQ,S,T\n311\tT\n";
        let t = parse_crosswalk(Path::new("cw.tsv"), text).unwrap();
        assert!(t.allows(311, &code("T17")));
        assert!(!t.allows(411, &code("T17")));
        assert_eq!(t.lc_priority[&411], vec![code("Q"), code("S"), code("T")]);
        let again = parse_crosswalk(Path::new("cw.tsv"), &t.to_tsv()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn empty_classes_section() {
        let t = parse_crosswalk(Path::new("cw.tsv"), "[classes]\n[priority]\n1\tT\n").unwrap();
        assert!(t.lc_to_classes.is_empty());
        assert_eq!(t.lc_priority.len(), 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_crosswalk(Path::new("cw.tsv"), "[classes]\n311\tT1\n").unwrap_err();
        assert!(err.to_string().contains("cw.tsv:2:"), "{err}");
        let err = parse_crosswalk(Path::new("cw.tsv"), "[priority]\n411\tQ,X\n").unwrap_err();
        assert!(
            err.to_string().contains(":2:") && err.to_string().contains("X"),
            "{err}"
        );
        let err = parse_crosswalk(Path::new("cw.tsv"), "[priority]\n411\tQ,Q\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let err = parse_crosswalk(Path::new("cw.tsv"), "[priority]\n411\tT17\n").unwrap_err();
        assert!(err.to_string().contains("unknown formation"), "{err}");
    }

    #[test]
    fn association_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("assoc.tsv");
        std::fs::write(&p, "T17\t1\t1\nT17\t2\t0\nN1A\t2\t1\n").unwrap();
        let m = read_association(&p).unwrap();
        assert!(m.is_allowed(&code("T17"), 1));
        assert!(!m.is_allowed(&code("T17"), 2));
        write_association(&m, &p).unwrap();
        assert_eq!(read_association(&p).unwrap(), m);
        std::fs::write(&p, "T17\t1\t0\n").unwrap();
        assert!(read_association(&p).unwrap_err().to_string().contains("T17"));
    }
}
