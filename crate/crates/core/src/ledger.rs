//! Named constants with provenance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How a ledger value came about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Chosen by design or configuration.
    Assumed,
    /// Estimated from samples (fit or shrink-until-pass sweep).
    Fitted,
    /// Chosen, then checked by a verifier that passed.
    Verified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub value: f64,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// Every empirically chosen constant of the pipeline, keyed by ASCII name
/// (`delta0`, `theta1`, `M6`, `eta3`, `kappa`, `lambda`, ...).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantsLedger {
    pub entries: BTreeMap<String, LedgerEntry>,
}

impl ConstantsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: &str, value: f64, provenance: Provenance, note: impl Into<String>) {
        self.entries.insert(name.to_string(), LedgerEntry { value, provenance, note: note.into() });
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        self.entries.get(name).map(|e| e.value).ok_or_else(|| Error::MissingConstant(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<f64> {
        self.entries.get(name).map(|e| e.value)
    }

    pub fn provenance(&self, name: &str) -> Option<Provenance> {
        self.entries.get(name).map(|e| e.provenance)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Copies every entry of `other` over `self`.
    pub fn merge(&mut self, other: &ConstantsLedger) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Checks the structural relation `δ₁ = M₁δ₀/2` when all three are present.
    pub fn check_invariants(&self) -> Result<()> {
        if let (Some(d0), Some(d1), Some(m1)) = (self.try_get("delta0"), self.try_get("delta1"), self.try_get("M1")) {
            let want = 0.5 * m1 * d0;
            if (d1 - want).abs() > 1e-12 * want.abs().max(1.0) {
                return Err(Error::PropertyViolation {
                    property: "delta1 = M1*delta0/2".into(),
                    detail: format!("delta1 = {d1}, M1*delta0/2 = {want}"),
                });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json_atomic(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_constant_is_an_error() {
        let l = ConstantsLedger::new();
        assert!(matches!(l.get("theta1"), Err(Error::MissingConstant(_))));
    }

    #[test]
    fn delta1_relation() {
        let mut l = ConstantsLedger::new();
        l.set("delta0", 1.0, Provenance::Assumed, "");
        l.set("M1", 0.8, Provenance::Fitted, "");
        l.set("delta1", 0.4, Provenance::Fitted, "");
        l.check_invariants().unwrap();
        l.set("delta1", 0.5, Provenance::Fitted, "");
        assert!(l.check_invariants().is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut l = ConstantsLedger::new();
        l.set("theta0", 1.0471975511965976, Provenance::Verified, "cone probe");
        let s = crate::io::to_json_string(&l).unwrap();
        let back: ConstantsLedger = serde_json::from_str(&s).unwrap();
        assert_eq!(back, l);
    }
}
