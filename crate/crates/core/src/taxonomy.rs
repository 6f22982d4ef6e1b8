//! EUNIS habitat codes and their three-level hierarchy.
//!
//! A code is a formation prefix followed by up to two further characters,
//! one per level. The saltmarsh formation uses the three-character prefix
//! `MA2`, so its level-3 codes are five characters long (`MA221`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Level-1 prefixes accepted by the parser, longest first.
pub const FORMATION_PREFIXES: [&str; 9] = ["MA2", "N", "P", "Q", "R", "S", "T", "U", "V"];

/// Formations that are coastal by definition.
pub const COASTAL_FORMATIONS: [&str; 2] = ["N", "MA2"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HabitatCode {
    code: String,
    level: u8,
    prefix_len: u8,
}

impl HabitatCode {
    pub fn parse(text: &str) -> Result<Self> {
        let err = |reason: &str| Error::Code {
            text: text.to_string(),
            reason: reason.to_string(),
        };
        if text.is_empty() {
            return Err(err("empty code"));
        }
        let bytes = text.as_bytes();
        if !bytes[0].is_ascii_uppercase() {
            return Err(err("must start with an uppercase letter"));
        }
        if !bytes.iter().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit()) {
            return Err(err("only uppercase letters and digits are allowed"));
        }
        let prefix = FORMATION_PREFIXES
            .iter()
            .find(|p| text.starts_with(*p))
            .ok_or_else(|| err("unknown formation prefix"))?;
        let rest = text.len() - prefix.len();
        if rest > 2 {
            return Err(err("codes deeper than level 3 are not supported"));
        }
        Ok(HabitatCode {
            code: text.to_string(),
            level: rest as u8 + 1,
            prefix_len: prefix.len() as u8,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.code
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    /// The level-1 ancestor (identity on formations).
    pub fn formation(&self) -> HabitatCode {
        HabitatCode {
            code: self.code[..self.prefix_len as usize].to_string(),
            level: 1,
            prefix_len: self.prefix_len,
        }
    }

    /// The level-2 parent of a level-3 code; a level-2 code maps to itself.
    pub fn level2(&self) -> Result<HabitatCode> {
        match self.level {
            1 => Err(Error::Code {
                text: self.code.clone(),
                reason: "level-1 code has no level-2 ancestor".into(),
            }),
            2 => Ok(self.clone()),
            _ => Ok(HabitatCode {
                code: self.code[..self.code.len() - 1].to_string(),
                level: 2,
                prefix_len: self.prefix_len,
            }),
        }
    }

    pub fn is_coastal(&self) -> bool {
        COASTAL_FORMATIONS.contains(&self.formation().as_str())
    }
}

pub fn parse_code(text: &str) -> Result<HabitatCode> {
    HabitatCode::parse(text)
}

pub fn formation_of(code: &HabitatCode) -> HabitatCode {
    code.formation()
}

pub fn level2_of(code: &HabitatCode) -> Result<HabitatCode> {
    code.level2()
}

impl fmt::Display for HabitatCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code)
    }
}

impl FromStr for HabitatCode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        HabitatCode::parse(s)
    }
}

impl Serialize for HabitatCode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.code)
    }
}

impl<'de> Deserialize<'de> for HabitatCode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        HabitatCode::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// The legal set of level-3 classes, grouped by formation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Taxonomy {
    by_formation: BTreeMap<HabitatCode, BTreeSet<HabitatCode>>,
}

impl Taxonomy {
    pub fn from_codes<I: IntoIterator<Item = HabitatCode>>(codes: I) -> Result<Self> {
        let mut tax = Taxonomy::default();
        for code in codes {
            tax.insert(code)?;
        }
        Ok(tax)
    }

    fn insert(&mut self, code: HabitatCode) -> Result<()> {
        if code.level() != 3 {
            return Err(Error::Code {
                text: code.to_string(),
                reason: "taxonomy entries must be level-3 codes".into(),
            });
        }
        let set = self.by_formation.entry(code.formation()).or_default();
        if !set.insert(code.clone()) {
            return Err(Error::Code {
                text: code.to_string(),
                reason: "duplicate code".into(),
            });
        }
        Ok(())
    }

    /// Reads one level-3 code per line. `#` starts a comment. Codes whose
    /// formation is listed in `excluded` are rejected.
    pub fn load(path: &Path, excluded: &[&str]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tax = Taxonomy::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let code = HabitatCode::parse(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if excluded.contains(&code.formation().as_str()) {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("formation {} is excluded", code.formation()),
                ));
            }
            tax.insert(code).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        Ok(tax)
    }

    pub fn contains(&self, code: &HabitatCode) -> bool {
        self.by_formation
            .get(&code.formation())
            .is_some_and(|s| s.contains(code))
    }

    pub fn validate(&self, code: &HabitatCode) -> Result<()> {
        if self.contains(code) {
            Ok(())
        } else {
            Err(Error::Code {
                text: code.to_string(),
                reason: "not declared in the taxonomy".into(),
            })
        }
    }

    pub fn formations(&self) -> impl Iterator<Item = &HabitatCode> {
        self.by_formation.keys()
    }

    pub fn classes_of(&self, formation: &HabitatCode) -> Vec<HabitatCode> {
        self.by_formation
            .get(formation)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn classes(&self) -> impl Iterator<Item = &HabitatCode> {
        self.by_formation.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_formation.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(s: &str) -> HabitatCode {
        HabitatCode::parse(s).unwrap()
    }

    #[test]
    fn parse_levels_and_formations() {
        let t17 = code("T17");
        assert_eq!((t17.level(), t17.formation().as_str()), (3, "T"));
        let ma = code("MA221");
        assert_eq!((ma.level(), ma.formation().as_str()), (3, "MA2"));
        assert_eq!(code("T").level(), 1);
        assert_eq!(code("R1A").formation().as_str(), "R");
        assert_eq!(code("MA2").level(), 1);
        assert_eq!(code("MA22").level(), 2);
    }

    #[test]
    fn parse_rejects_malformed() {
        for bad in ["", "t17", "X12", "T1234", "T-1", "MA1", "7T"] {
            let err = HabitatCode::parse(bad).unwrap_err();
            assert!(err.to_string().contains(&format!("{bad:?}")), "{err}");
        }
    }

    #[test]
    fn formation_and_level2() {
        assert_eq!(code("N1A").formation().as_str(), "N");
        assert_eq!(code("MA211").formation().as_str(), "MA2");
        assert_eq!(code("T").formation().as_str(), "T");
        assert_eq!(code("S22").level2().unwrap().as_str(), "S2");
        assert_eq!(code("MA221").level2().unwrap().as_str(), "MA22");
        assert_eq!(code("Q11").level2().unwrap().as_str(), "Q1");
        assert!(code("T").level2().is_err());
    }

    #[test]
    fn taxonomy_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tax.txt");
        std::fs::write(&p, "# forests\nT17\nT18 # beech\n\nN1A\n").unwrap();
        let tax = Taxonomy::load(&p, &[]).unwrap();
        assert_eq!(tax.len(), 3);
        assert!(tax.contains(&code("T18")));
        assert!(tax.validate(&code("T19")).is_err());
        assert_eq!(tax.classes_of(&code("T")).len(), 2);

        std::fs::write(&p, "T17\nT17\n").unwrap();
        assert!(Taxonomy::load(&p, &[]).is_err());
        std::fs::write(&p, "T17\nP11\n").unwrap();
        let err = Taxonomy::load(&p, &["P"]).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    fn arb_code() -> impl Strategy<Value = String> {
        (prop::sample::select(FORMATION_PREFIXES.to_vec()), "[0-9A-Z]{0,2}").prop_map(|(p, rest)| format!("{p}{rest}"))
    }

    proptest! {
        #[test]
        fn roundtrip_and_hierarchy(text in arb_code()) {
            let c = HabitatCode::parse(&text).unwrap();
            prop_assert_eq!(HabitatCode::parse(&c.to_string()).unwrap(), c.clone());
            let f = c.formation();
            prop_assert_eq!(f.formation(), f.clone());
            if c.level() == 3 {
                prop_assert_eq!(c.level2().unwrap().formation(), f);
            }
        }
    }
}
