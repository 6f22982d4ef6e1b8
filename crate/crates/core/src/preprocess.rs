//! Per-family feature encoding pipelines.
//!
//! | kind        | bagging          | boosting        | neural             |
//! |-------------|------------------|-----------------|--------------------|
//! | continuous  | passthrough      | passthrough     | center-scale       |
//! | ordinal     | min-max          | min-max         | min-max            |
//! | cyclical    | (cos, sin)       | (cos, sin)      | (cos, sin)         |
//! | categorical | one-hot + other  | integer code    | embedding index    |
//! | day count   | / 365            | / 365           | / 365              |
//! | frequency   | / total          | / total         | / total            |

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureValue, PlotTable};
use crate::error::{Error, Result};
use crate::learners::Family;

/// Category token standing for an empty categorical cell.
pub const MISSING_CATEGORY: &str = "__missing__";

/// Largest embedding width used for categorical features.
pub const MAX_EMBEDDING_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Ordinal,
    Cyclical { period: f64 },
    Categorical { categories: Vec<String> },
    DayCount,
    Frequency { total: f64 },
}

impl FeatureKind {
    pub fn is_categorical(&self) -> bool {
        matches!(self, FeatureKind::Categorical { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, kind: FeatureKind) -> Self {
        FeatureSpec {
            name: name.into(),
            kind,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("feature `{}`: {m}", self.name)));
        match &self.kind {
            FeatureKind::Cyclical { period } if !(*period > 0.0 && period.is_finite()) => bad("period must be > 0"),
            FeatureKind::Frequency { total } if !(*total > 0.0 && total.is_finite()) => bad("total must be > 0"),
            FeatureKind::Categorical { categories } => {
                let uniq: BTreeSet<_> = categories.iter().collect();
                if categories.is_empty() {
                    bad("categories must be non-empty")
                } else if uniq.len() != categories.len() {
                    bad("categories must be unique")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for f in &features {
            f.validate()?;
            if !names.insert(f.name.as_str()) {
                return Err(Error::invalid(format!("duplicate feature `{}`", f.name)));
            }
        }
        Ok(FeatureSchema { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for f in &self.features {
            let (kind, params) = match &f.kind {
                FeatureKind::Continuous => ("continuous", String::new()),
                FeatureKind::Ordinal => ("ordinal", String::new()),
                FeatureKind::Cyclical { period } => ("cyclical", format!("period={period}")),
                FeatureKind::Categorical { categories } => {
                    ("categorical", format!("categories={}", categories.join("|")))
                }
                FeatureKind::DayCount => ("day_count", String::new()),
                FeatureKind::Frequency { total } => ("frequency", format!("total={total}")),
            };
            out.push_str(&format!("{}\t{kind}\t{params}\n", f.name));
        }
        out
    }
}

/// Reads a schema TSV: `name<TAB>kind<TAB>params` where params are
/// `key=value` pairs separated by `;` (categories separated by `|`).
pub fn read_schema(path: &Path) -> Result<FeatureSchema> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut features = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("");
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() < 2 {
            return Err(Error::parse(path, ln, "expected `name<TAB>kind<TAB>params`"));
        }
        let params = cols.get(2).copied().unwrap_or("");
        let param = |key: &str| -> Option<&str> {
            params
                .split(';')
                .filter_map(|kv| kv.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
        };
        let number = |key: &str| -> Result<f64> {
            param(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(path, ln, format!("missing numeric parameter `{key}`")))
        };
        let kind = match cols[1] {
            "continuous" => FeatureKind::Continuous,
            "ordinal" => FeatureKind::Ordinal,
            "cyclical" => FeatureKind::Cyclical {
                period: number("period")?,
            },
            "categorical" => FeatureKind::Categorical {
                categories: param("categories")
                    .ok_or_else(|| Error::parse(path, ln, "missing parameter `categories`"))?
                    .split('|')
                    .map(|s| s.trim().to_string())
                    .collect(),
            },
            "day_count" => FeatureKind::DayCount,
            "frequency" => FeatureKind::Frequency {
                total: number("total")?,
            },
            other => return Err(Error::parse(path, ln, format!("unknown feature kind `{other}`"))),
        };
        let spec = FeatureSpec::new(cols[0], kind);
        spec.validate().map_err(|e| Error::parse(path, ln, e.to_string()))?;
        features.push(spec);
    }
    FeatureSchema::new(features).map_err(|e| Error::parse(path, 0, e.to_string()))
}

/// Raster cells carry categories as numeric codes; integral values are
/// formatted without a fractional part so they match CSV tokens.
pub fn raster_value(kind: &FeatureKind, v: f64) -> FeatureValue {
    if kind.is_categorical() {
        if v.fract() == 0.0 && v.abs() < 1e15 {
            FeatureValue::Category(format!("{}", v as i64))
        } else {
            FeatureValue::Category(format!("{v}"))
        }
    } else {
        FeatureValue::Number(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    /// Integer index into an embedding table of the given size (0 = unseen).
    Embedding {
        cardinality: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    fn numeric(name: String) -> Self {
        Column {
            name,
            kind: ColumnKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Encoder {
    Identity,
    Standardize { mean: f64, std: f64 },
    MinMax { min: f64, scale: f64 },
    Cyclical { period: f64 },
    Divide { by: f64 },
    OneHot { categories: Vec<String> },
    OrdinalCode { categories: Vec<String> },
    EmbeddingIndex { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPipeline {
    pub family: Family,
    pub schema: FeatureSchema,
    encoders: Vec<Encoder>,
    pub layout: Vec<Column>,
}

fn numeric(v: &FeatureValue, name: &str) -> Result<f64> {
    v.as_number()
        .ok_or_else(|| Error::invalid(format!("feature `{name}` expects a number, found {v:?}")))
}

fn category(v: &FeatureValue, name: &str) -> Result<String> {
    match v {
        FeatureValue::Category(c) => Ok(c.clone()),
        FeatureValue::Missing => Ok(MISSING_CATEGORY.to_string()),
        FeatureValue::Number(n) => Err(Error::invalid(format!(
            "feature `{name}` expects a category, found number {n}"
        ))),
    }
}

pub fn fit(schema: &FeatureSchema, table: &PlotTable, family: Family) -> Result<FittedPipeline> {
    if table.schema.features.len() != schema.features.len() {
        return Err(Error::Dimension {
            expected: schema.len(),
            found: table.schema.len(),
        });
    }
    for r in &table.records {
        if r.features.len() != schema.len() {
            return Err(Error::invalid(format!(
                "plot {} has {} features, schema declares {}",
                r.id,
                r.features.len(),
                schema.len()
            )));
        }
    }
    let mut encoders = Vec::with_capacity(schema.len());
    let mut layout = Vec::new();
    for (j, spec) in schema.features.iter().enumerate() {
        let name = &spec.name;
        let column = || table.records.iter().map(move |r| &r.features[j]);
        let enc = match &spec.kind {
            FeatureKind::Continuous => {
                if family == Family::Neural {
                    let vals: Vec<f64> = column().map(|v| numeric(v, name)).collect::<Result<_>>()?;
                    let n = vals.len().max(1) as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let mut std = var.sqrt();
                    if std.is_nan() || std <= 0.0 {
                        log::warn!("feature `{name}` has zero variance; scaling by 1");
                        std = 1.0;
                    }
                    Encoder::Standardize { mean, std }
                } else {
                    for v in column() {
                        numeric(v, name)?;
                    }
                    Encoder::Identity
                }
            }
            FeatureKind::Ordinal => {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for v in column() {
                    let x = numeric(v, name)?;
                    min = min.min(x);
                    max = max.max(x);
                }
                if !min.is_finite() {
                    min = 0.0;
                    max = 1.0;
                }
                let range = max - min;
                Encoder::MinMax {
                    min,
                    scale: if range > 0.0 { range } else { 1.0 },
                }
            }
            FeatureKind::Cyclical { period } => Encoder::Cyclical { period: *period },
            FeatureKind::DayCount => Encoder::Divide { by: 365.0 },
            FeatureKind::Frequency { total } => Encoder::Divide { by: *total },
            FeatureKind::Categorical { categories } => {
                let seen: BTreeSet<String> = column().map(|v| category(v, name)).collect::<Result<_>>()?;
                let mut fitted: Vec<String> = categories.iter().filter(|c| seen.contains(*c)).cloned().collect();
                if seen.contains(MISSING_CATEGORY) {
                    fitted.push(MISSING_CATEGORY.to_string());
                }
                match family {
                    Family::Bagging => Encoder::OneHot { categories: fitted },
                    Family::Boosting => Encoder::OrdinalCode { categories: fitted },
                    Family::Neural => Encoder::EmbeddingIndex { categories: fitted },
                }
            }
        };
        match &enc {
            Encoder::Cyclical { .. } => {
                layout.push(Column::numeric(format!("{name}_cos")));
                layout.push(Column::numeric(format!("{name}_sin")));
            }
            Encoder::OneHot { categories } => {
                for c in categories {
                    layout.push(Column::numeric(format!("{name}={c}")));
                }
                layout.push(Column::numeric(format!("{name}=other")));
            }
            Encoder::EmbeddingIndex { categories } => layout.push(Column {
                name: name.clone(),
                kind: ColumnKind::Embedding {
                    cardinality: categories.len() + 1,
                },
            }),
            _ => layout.push(Column::numeric(name.clone())),
        }
        encoders.push(enc);
    }
    Ok(FittedPipeline {
        family,
        schema: schema.clone(),
        encoders,
        layout,
    })
}

/// Embedding width for a categorical feature with `cardinality` slots.
pub fn embedding_dim(cardinality: usize) -> usize {
    ((cardinality as f64).sqrt().ceil() as usize).clamp(1, MAX_EMBEDDING_DIM)
}

impl FittedPipeline {
    pub fn width(&self) -> usize {
        self.layout.len()
    }

    pub fn transform(&self, features: &[FeatureValue]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.width());
        self.transform_into(features, &mut out)?;
        Ok(out)
    }

    pub fn transform_into(&self, features: &[FeatureValue], out: &mut Vec<f64>) -> Result<()> {
        if features.len() != self.encoders.len() {
            return Err(Error::Dimension {
                expected: self.encoders.len(),
                found: features.len(),
            });
        }
        for ((enc, spec), v) in self.encoders.iter().zip(&self.schema.features).zip(features) {
            let name = &spec.name;
            match enc {
                Encoder::Identity => out.push(numeric(v, name)?),
                Encoder::Standardize { mean, std } => out.push((numeric(v, name)? - mean) / std),
                Encoder::MinMax { min, scale } => out.push((numeric(v, name)? - min) / scale),
                Encoder::Cyclical { period } => {
                    let angle = TAU * numeric(v, name)? / period;
                    out.push(angle.cos());
                    out.push(angle.sin());
                }
                Encoder::Divide { by } => out.push(numeric(v, name)? / by),
                Encoder::OneHot { categories } => {
                    let c = category(v, name)?;
                    let hit = categories.iter().position(|k| *k == c);
                    for i in 0..categories.len() {
                        out.push(if hit == Some(i) { 1.0 } else { 0.0 });
                    }
                    out.push(if hit.is_none() { 1.0 } else { 0.0 });
                }
                Encoder::OrdinalCode { categories } => {
                    let c = category(v, name)?;
                    let code = categories.iter().position(|k| *k == c).unwrap_or(categories.len());
                    out.push(code as f64);
                }
                Encoder::EmbeddingIndex { categories } => {
                    let c = category(v, name)?;
                    let idx = categories.iter().position(|k| *k == c).map_or(0, |i| i + 1);
                    out.push(idx as f64);
                }
            }
        }
        Ok(())
    }

    /// Encodes every record into a row-major matrix.
    pub fn transform_table(&self, table: &PlotTable) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(table.len() * self.width());
        for r in &table.records {
            self.transform_into(&r.features, &mut out)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::PlotRecord;
    use crate::taxonomy::HabitatCode;
    use proptest::prelude::*;

    fn table(schema: &FeatureSchema, rows: Vec<Vec<FeatureValue>>) -> PlotTable {
        PlotTable {
            schema: schema.clone(),
            records: rows
                .into_iter()
                .enumerate()
                .map(|(i, features)| PlotRecord {
                    id: format!("p{i}"),
                    x: 0.0,
                    y: 0.0,
                    habitat: HabitatCode::parse("T17").unwrap(),
                    features,
                })
                .collect(),
        }
    }

    fn one(kind: FeatureKind) -> FeatureSchema {
        FeatureSchema::new(vec![FeatureSpec::new("f", kind)]).unwrap()
    }

    use FeatureValue::{Category as C, Number as N};

    #[test]
    fn ordinal_minmax() {
        let s = one(FeatureKind::Ordinal);
        let p = fit(&s, &table(&s, vec![vec![N(0.0)], vec![N(12.0)]]), Family::Bagging).unwrap();
        assert_eq!(p.transform(&[N(6.0)]).unwrap(), vec![0.5]);
        // out-of-range values are not clipped
        assert_eq!(p.transform(&[N(24.0)]).unwrap(), vec![2.0]);
    }

    #[test]
    fn continuous_per_family() {
        let s = one(FeatureKind::Continuous);
        let t = table(&s, vec![vec![N(1.0)], vec![N(3.0)]]);
        let bag = fit(&s, &t, Family::Bagging).unwrap();
        assert_eq!(bag.transform(&[N(17.25)]).unwrap(), vec![17.25]);
        let nn = fit(&s, &t, Family::Neural).unwrap();
        assert_eq!(nn.transform(&[N(3.0)]).unwrap(), vec![1.0]);
        let flat = table(&s, vec![vec![N(2.0)], vec![N(2.0)]]);
        let nn = fit(&s, &flat, Family::Neural).unwrap();
        assert_eq!(nn.transform(&[N(5.0)]).unwrap(), vec![3.0]);
    }

    #[test]
    fn scalings() {
        let s = one(FeatureKind::DayCount);
        let p = fit(&s, &table(&s, vec![]), Family::Boosting).unwrap();
        assert_eq!(p.transform(&[N(365.0)]).unwrap(), vec![1.0]);
        let s = one(FeatureKind::Frequency { total: 100.0 });
        let p = fit(&s, &table(&s, vec![]), Family::Neural).unwrap();
        assert_eq!(p.transform(&[N(40.0)]).unwrap(), vec![0.4]);
    }

    #[test]
    fn cyclical_pairs() {
        let s = one(FeatureKind::Cyclical { period: 360.0 });
        let p = fit(&s, &table(&s, vec![]), Family::Bagging).unwrap();
        let q = p.transform(&[N(90.0)]).unwrap();
        assert!(q[0].abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12);
        assert_eq!(p.transform(&[N(0.0)]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(p.layout.len(), 2);
    }

    fn cat_schema() -> FeatureSchema {
        one(FeatureKind::Categorical {
            categories: vec!["ridge".into(), "slope".into(), "valley".into()],
        })
    }

    #[test]
    fn categorical_per_family() {
        let s = cat_schema();
        let t = table(
            &s,
            vec![
                vec![C("valley".into())],
                vec![C("ridge".into())],
                vec![FeatureValue::Missing],
            ],
        );
        let bag = fit(&s, &t, Family::Bagging).unwrap();
        assert_eq!(bag.width(), 4); // ridge, valley, missing, other
        assert_eq!(bag.transform(&[C("valley".into())]).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(bag.transform(&[C("slope".into())]).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            bag.transform(&[FeatureValue::Missing]).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0]
        );

        let boost = fit(&s, &t, Family::Boosting).unwrap();
        assert_eq!(boost.transform(&[C("ridge".into())]).unwrap(), vec![0.0]);
        assert_eq!(boost.transform(&[C("dune".into())]).unwrap(), vec![3.0]);

        let nn = fit(&s, &t, Family::Neural).unwrap();
        assert_eq!(nn.layout[0].kind, ColumnKind::Embedding { cardinality: 4 });
        assert_eq!(nn.transform(&[C("ridge".into())]).unwrap(), vec![1.0]);
        assert_eq!(nn.transform(&[C("dune".into())]).unwrap(), vec![0.0]);
        assert_eq!(embedding_dim(4), 2);
        assert_eq!(embedding_dim(1000), MAX_EMBEDDING_DIM);
    }

    #[test]
    fn type_mismatch_is_an_error() {
        let s = cat_schema();
        assert!(fit(&s, &table(&s, vec![vec![N(1.0)]]), Family::Bagging).is_err());
        let s = one(FeatureKind::Continuous);
        assert!(fit(&s, &table(&s, vec![vec![C("x".into())]]), Family::Bagging).is_err());
    }

    #[test]
    fn schema_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("schema.tsv");
        std::fs::write(
            &p,
            "aspect\tcyclical\tperiod=360\nlandform\tcategorical\tcategories=a|b\nlc_tree\tfrequency\ttotal=100\nt\tcontinuous\t\n",
        )
        .unwrap();
        let s = read_schema(&p).unwrap();
        assert_eq!(s.len(), 4);
        std::fs::write(&p, s.to_tsv()).unwrap();
        assert_eq!(read_schema(&p).unwrap(), s);
        std::fs::write(&p, "aspect\tcyclical\tperiod=0\n").unwrap();
        assert!(read_schema(&p).is_err());
        std::fs::write(&p, "aspect\tspline\t\n").unwrap();
        assert!(read_schema(&p).unwrap_err().to_string().contains("spline"));
    }

    proptest! {
        #[test]
        fn cyclical_unit_circle(v in -1e6f64..1e6, period in 0.1f64..1000.0) {
            let s = one(FeatureKind::Cyclical { period });
            let p = fit(&s, &table(&s, vec![]), Family::Neural).unwrap();
            let q = p.transform(&[N(v)]).unwrap();
            prop_assert!((q[0] * q[0] + q[1] * q[1] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn one_hot_rows_sum_to_one(picks in prop::collection::vec(0usize..5, 1..30), probe in 0usize..5) {
            let tokens = ["ridge", "slope", "valley", "dune", ""];
            let value = |i: usize| if tokens[i].is_empty() { FeatureValue::Missing } else { C(tokens[i].into()) };
            let s = cat_schema();
            let t = table(&s, picks.iter().map(|&i| vec![value(i)]).collect());
            let p = fit(&s, &t, Family::Bagging).unwrap();
            let row = p.transform(&[value(probe)]).unwrap();
            prop_assert_eq!(row.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(row.len(), p.width());
        }

        #[test]
        fn minmax_training_rows_in_unit_interval(vals in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let s = one(FeatureKind::Ordinal);
            let t = table(&s, vals.iter().map(|&v| vec![N(v)]).collect());
            let p = fit(&s, &t, Family::Boosting).unwrap();
            for r in &t.records {
                let x = p.transform(&r.features).unwrap()[0];
                prop_assert!((0.0..=1.0).contains(&x) && x.is_finite());
            }
        }
    }
}
