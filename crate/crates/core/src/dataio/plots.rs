//! Labelled plot tables (`id,x,y,habitat,<features...>` CSV).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{FeatureKind, FeatureSchema};
use crate::taxonomy::HabitatCode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureValue {
    Number(f64),
    Category(String),
    Missing,
}

impl FeatureValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    fn to_field(&self) -> String {
        match self {
            FeatureValue::Number(v) => format!("{v}"),
            FeatureValue::Category(c) => c.clone(),
            FeatureValue::Missing => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotRecord {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub habitat: HabitatCode,
    pub features: Vec<FeatureValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub schema: FeatureSchema,
    pub records: Vec<PlotRecord>,
}

impl PlotTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn formation_counts(&self) -> BTreeMap<HabitatCode, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.habitat.formation()).or_insert(0) += 1;
        }
        out
    }

    pub fn class_counts(&self) -> BTreeMap<HabitatCode, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.habitat.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn filter_formation(&self, formation: &HabitatCode) -> PlotTable {
        self.filter(|r| &r.habitat.formation() == formation)
    }

    pub fn filter(&self, keep: impl Fn(&PlotRecord) -> bool) -> PlotTable {
        PlotTable {
            schema: self.schema.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> PlotTable {
        PlotTable {
            schema: self.schema.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Removes classes with fewer than `min_count` plots; returns the dropped classes.
    pub fn drop_rare_classes(&mut self, min_count: usize) -> Vec<HabitatCode> {
        let counts = self.class_counts();
        let dropped: Vec<HabitatCode> = counts
            .iter()
            .filter(|(_, &n)| n < min_count)
            .map(|(c, _)| c.clone())
            .collect();
        if !dropped.is_empty() {
            self.records.retain(|r| counts[&r.habitat] >= min_count);
        }
        dropped
    }
}

const FIXED: [&str; 4] = ["id", "x", "y", "habitat"];

/// Reads a plot CSV. Feature columns are looked up by schema name; other
/// columns are ignored.
pub fn read_plots(path: &Path, schema: &FeatureSchema) -> Result<PlotTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::parse(path, 1, format!("missing column `{name}`")))
    };
    let fixed: Vec<usize> = FIXED.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let feat_cols: Vec<usize> = schema.features.iter().map(|f| col(&f.name)).collect::<Result<_>>()?;

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let coord = |i: usize, what: &str| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, line, format!("unparseable {what} `{}`", field(i))))
        };
        let x = coord(fixed[1], "x coordinate")?;
        let y = coord(fixed[2], "y coordinate")?;
        let habitat = HabitatCode::parse(field(fixed[3])).map_err(|e| Error::parse(path, line, e.to_string()))?;
        if habitat.level() != 3 {
            return Err(Error::parse(
                path,
                line,
                format!("habitat `{habitat}` is not a level-3 code"),
            ));
        }
        let mut features = Vec::with_capacity(feat_cols.len());
        for (spec, &c) in schema.features.iter().zip(&feat_cols) {
            let raw = field(c);
            let value = match (&spec.kind, raw.is_empty()) {
                (FeatureKind::Categorical { .. }, true) => FeatureValue::Missing,
                (FeatureKind::Categorical { .. }, false) => FeatureValue::Category(raw.to_string()),
                (_, true) => {
                    return Err(Error::parse(
                        path,
                        line,
                        format!("missing value for numeric feature `{}`", spec.name),
                    ))
                }
                (_, false) => FeatureValue::Number(
                    raw.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::parse(path, line, format!("bad number `{raw}` for `{}`", spec.name)))?,
                ),
            };
            features.push(value);
        }
        records.push(PlotRecord {
            id: field(fixed[0]).to_string(),
            x,
            y,
            habitat,
            features,
        });
    }
    log::debug!("read {} plots from {}", records.len(), path.display());
    Ok(PlotTable {
        schema: schema.clone(),
        records,
    })
}

pub fn write_plots(table: &PlotTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header: Vec<&str> = FIXED.to_vec();
    header.extend(table.schema.features.iter().map(|f| f.name.as_str()));
    w.write_record(&header)?;
    for r in &table.records {
        let mut row = vec![
            r.id.clone(),
            format!("{}", r.x),
            format!("{}", r.y),
            r.habitat.to_string(),
        ];
        row.extend(r.features.iter().map(FeatureValue::to_field));
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::FeatureSpec;

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureSpec::new("t_mean", FeatureKind::Continuous),
            FeatureSpec::new("aspect", FeatureKind::Cyclical { period: 360.0 }),
        ])
        .unwrap()
    }

    #[test]
    fn reads_small_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        std::fs::write(
            &p,
            "id,x,y,habitat,t_mean,aspect\na,1,2,T17,5.5,90\nb,3,4,N1A,6,0\nc,5,6,MA221,-1,270\n",
        )
        .unwrap();
        let t = read_plots(&p, &schema()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.records[2].habitat.formation().as_str(), "MA2");
        assert_eq!(t.records[0].features[1], FeatureValue::Number(90.0));
    }

    #[test]
    fn rejects_level2_habitat_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        std::fs::write(&p, "id,x,y,habitat,t_mean,aspect\na,1,2,T17,5,9\nb,1,2,T1,5,9\n").unwrap();
        let err = read_plots(&p, &schema()).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("level-3"), "{err}");
    }

    #[test]
    fn rejects_missing_column_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        std::fs::write(&p, "id,x,y,habitat,t_mean\na,1,2,T17,5\n").unwrap();
        assert!(read_plots(&p, &schema()).unwrap_err().to_string().contains("aspect"));
        std::fs::write(&p, "id,x,y,habitat,t_mean,aspect\na,east,2,T17,5,1\n").unwrap();
        assert!(read_plots(&p, &schema()).unwrap_err().to_string().contains(":2:"));
        std::fs::write(&p, "id,x,y,habitat,t_mean,aspect\na,1,2,T17,,1\n").unwrap();
        assert!(read_plots(&p, &schema())
            .unwrap_err()
            .to_string()
            .contains("missing value"));
    }

    #[test]
    fn missing_categorical_is_legal() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let s = FeatureSchema::new(vec![FeatureSpec::new(
            "landform",
            FeatureKind::Categorical {
                categories: vec!["ridge".into(), "valley".into()],
            },
        )])
        .unwrap();
        std::fs::write(&p, "id,x,y,habitat,landform\na,1,2,T17,\nb,1,2,T17,ridge\n").unwrap();
        let t = read_plots(&p, &s).unwrap();
        assert_eq!(t.records[0].features[0], FeatureValue::Missing);
    }

    #[test]
    fn formation_counts_single_formation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let mut text = String::from("id,x,y,habitat\n");
        for i in 0..6552 {
            let cls = ["MA221", "MA222", "MA223"][i % 3];
            text.push_str(&format!("p{i},{},{},{cls}\n", i * 10, i * 7));
        }
        std::fs::write(&p, text).unwrap();
        let t = read_plots(&p, &FeatureSchema::default()).unwrap();
        let counts = t.formation_counts();
        assert_eq!(counts.len(), 1);
        assert_eq!(counts[&HabitatCode::parse("MA2").unwrap()], 6552);
    }

    #[test]
    fn write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let t = PlotTable {
            schema: schema(),
            records: vec![PlotRecord {
                id: "x1".into(),
                x: 4_321_000.5,
                y: 3_000_000.25,
                habitat: HabitatCode::parse("Q11").unwrap(),
                features: vec![FeatureValue::Number(0.1), FeatureValue::Number(359.9)],
            }],
        };
        write_plots(&t, &p).unwrap();
        assert_eq!(read_plots(&p, &schema()).unwrap(), t);
    }

    #[test]
    fn drop_rare() {
        let rec = |c: &str| PlotRecord {
            id: c.into(),
            x: 0.0,
            y: 0.0,
            habitat: HabitatCode::parse(c).unwrap(),
            features: vec![],
        };
        let mut t = PlotTable {
            schema: FeatureSchema::default(),
            records: vec![rec("T17"), rec("T17"), rec("T18")],
        };
        let dropped = t.drop_rare_classes(2);
        assert_eq!(dropped, vec![HabitatCode::parse("T18").unwrap()]);
        assert_eq!(t.len(), 2);
    }
}
