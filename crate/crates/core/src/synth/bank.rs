use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Magnification;

/// Which magnification a term is typically described at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Affinity {
    X40,
    X20,
    Both,
}

impl Affinity {
    pub fn matches(&self, mag: Magnification) -> bool {
        matches!(
            (self, mag),
            (Affinity::Both, _)
                | (Affinity::X40, Magnification::X40)
                | (Affinity::X20, Magnification::X20)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Jittered regular grid.
    Grid,
    /// Nuclei rimming round open spaces.
    Lumens,
    /// Haphazard placement with gaps.
    Disordered,
    /// Parallel rows of aligned cells.
    Cords,
}

/// Partial override of the cell style inside a rendered region. Unset fields
/// keep the value from the style they are applied to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualParams {
    /// Nucleus radius relative to the magnification's base radius.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nucleus_scale: Option<f64>,
    /// Major/minor axis ratio.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elongation: Option<f64>,
    /// Cell spacing relative to the base spacing (< 1 is crowded).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spacing_scale: Option<f64>,
    /// Nuclear stain intensity in [0, 1].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stain: Option<f64>,
    /// Relative spread of nucleus sizes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pleomorphism: Option<f64>,
    /// Shift from pink (-1) to blue (+1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
}

impl VisualParams {
    /// Names of the attributes this block sets.
    pub fn attributes(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.nucleus_scale.is_some() {
            out.push("nucleus_scale");
        }
        if self.elongation.is_some() {
            out.push("elongation");
        }
        if self.spacing_scale.is_some() {
            out.push("spacing_scale");
        }
        if self.stain.is_some() {
            out.push("stain");
        }
        if self.pleomorphism.is_some() {
            out.push("pleomorphism");
        }
        if self.hue.is_some() {
            out.push("hue");
        }
        if self.layout.is_some() {
            out.push("layout");
        }
        out
    }

    /// Overlays `other` on top of `self`.
    pub fn merged(&self, other: &VisualParams) -> VisualParams {
        VisualParams {
            nucleus_scale: other.nucleus_scale.or(self.nucleus_scale),
            elongation: other.elongation.or(self.elongation),
            spacing_scale: other.spacing_scale.or(self.spacing_scale),
            stain: other.stain.or(self.stain),
            pleomorphism: other.pleomorphism.or(self.pleomorphism),
            hue: other.hue.or(self.hue),
            layout: other.layout.or(self.layout),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermEntry {
    pub term: String,
    pub magnification_affinity: Affinity,
    pub visual_params: VisualParams,
    pub glossary_entry: String,
}

/// Pathological vocabulary driving both the renderer and the glossary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermBank {
    pub terms: Vec<TermEntry>,
}

impl TermBank {
    pub fn new(terms: Vec<TermEntry>) -> Result<Self> {
        let bank = Self { terms };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for entry in &self.terms {
            let key = entry.term.trim().to_lowercase();
            if key.is_empty() {
                return Err(Error::InvalidTermBank("empty term".into()));
            }
            if !seen.insert(key) {
                return Err(Error::InvalidTermBank(format!(
                    "duplicate term {:?}",
                    entry.term
                )));
            }
            if entry.glossary_entry.trim().is_empty() {
                return Err(Error::InvalidTermBank(format!(
                    "term {:?} has no glossary entry",
                    entry.term
                )));
            }
        }
        Ok(())
    }

    /// Generation additionally needs enough vocabulary per magnification.
    pub fn validate_for_generation(&self) -> Result<()> {
        self.validate()?;
        for affinity in [Affinity::X40, Affinity::X20, Affinity::Both] {
            let n = self
                .terms
                .iter()
                .filter(|t| t.magnification_affinity == affinity)
                .count();
            if n < 4 {
                return Err(Error::InvalidTermBank(format!(
                    "need at least 4 terms with affinity {affinity:?}, found {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, term: &str) -> Option<&TermEntry> {
        self.terms.iter().find(|t| t.term.eq_ignore_ascii_case(term))
    }

    pub fn contains(&self, term: &str) -> bool {
        self.get(term).is_some()
    }

    /// `(term, explanation)` pairs, the flat glossary form.
    pub fn glossary(&self) -> Vec<(String, String)> {
        self.terms
            .iter()
            .map(|t| (t.term.clone(), t.glossary_entry.clone()))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bank: TermBank = serde_json::from_str(&text)?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

impl Default for TermBank {
    fn default() -> Self {
        default_bank()
    }
}

fn entry(term: &str, affinity: Affinity, visual_params: VisualParams, glossary: &str) -> TermEntry {
    TermEntry {
        term: term.to_string(),
        magnification_affinity: affinity,
        visual_params,
        glossary_entry: glossary.to_string(),
    }
}

fn default_bank() -> TermBank {
    use Affinity::*;
    let p = VisualParams::default;
    let terms = vec![
        // Cell structure and growth, read at high magnification.
        entry(
            "papillary structures",
            X40,
            VisualParams { layout: Some(Layout::Cords), elongation: Some(2.0), ..p() },
            "finger-like fronds lined by elongated nuclei arranged in rows",
        ),
        entry(
            "alveolar spaces",
            X40,
            VisualParams { layout: Some(Layout::Lumens), ..p() },
            "round open spaces each surrounded by a rim of nuclei",
        ),
        entry(
            "glandular formation",
            X40,
            VisualParams { layout: Some(Layout::Lumens), spacing_scale: Some(0.8), ..p() },
            "round open lumens encircled by crowded nuclei",
        ),
        entry(
            "irregular nuclei",
            X40,
            VisualParams { pleomorphism: Some(0.45), ..p() },
            "nuclei of markedly varying size and shape",
        ),
        entry(
            "enlarged nuclei",
            X40,
            VisualParams { nucleus_scale: Some(1.75), ..p() },
            "nuclei much larger than those of the surrounding cells",
        ),
        entry(
            "hyperchromatic nuclei",
            X40,
            VisualParams { stain: Some(1.0), ..p() },
            "very dark, densely stained nuclei",
        ),
        entry(
            "vesicular chromatin",
            X40,
            VisualParams { stain: Some(0.6), nucleus_scale: Some(1.35), ..p() },
            "pale, lightly stained nuclei that are slightly larger than normal",
        ),
        entry(
            "spindle-shaped nuclei",
            X40,
            VisualParams { elongation: Some(2.6), ..p() },
            "long, thin elongated nuclei",
        ),
        // Arrangement and interaction with neighbours, read at low magnification.
        entry(
            "infiltrative growth",
            X20,
            VisualParams { layout: Some(Layout::Disordered), spacing_scale: Some(1.3), ..p() },
            "loose cells spreading haphazardly into the surrounding tissue",
        ),
        entry(
            "crowded arrangement",
            X20,
            VisualParams { spacing_scale: Some(0.6), ..p() },
            "tightly packed, crowded cells with little space between them",
        ),
        entry(
            "sheet-like arrangement",
            X20,
            VisualParams { spacing_scale: Some(0.7), pleomorphism: Some(0.02), ..p() },
            "broad uniform sheets of crowded cells of equal size",
        ),
        entry(
            "cribriform pattern",
            X20,
            VisualParams { layout: Some(Layout::Lumens), spacing_scale: Some(0.75), ..p() },
            "crowded cells punctuated by many round open spaces",
        ),
        entry(
            "trabecular pattern",
            X20,
            VisualParams { layout: Some(Layout::Cords), ..p() },
            "cells lined up in narrow cords and rows",
        ),
        entry(
            "scattered single cells",
            X20,
            VisualParams { spacing_scale: Some(1.6), layout: Some(Layout::Disordered), ..p() },
            "sparse isolated cells separated by wide gaps",
        ),
        entry(
            "solid nests",
            X20,
            VisualParams { spacing_scale: Some(0.65), hue: Some(0.7), ..p() },
            "compact clusters of crowded blue-staining cells",
        ),
        entry(
            "disorganized arrangement",
            X20,
            VisualParams { layout: Some(Layout::Disordered), ..p() },
            "cells placed haphazardly without a regular pattern",
        ),
        // Seen at either magnification.
        entry(
            "pleomorphic cells",
            Both,
            VisualParams { pleomorphism: Some(0.4), ..p() },
            "cells of markedly varying size and shape",
        ),
        entry(
            "high nuclear-cytoplasmic ratio",
            Both,
            VisualParams { nucleus_scale: Some(1.5), ..p() },
            "nuclei filling most of each cell, much larger than normal",
        ),
        entry(
            "basophilic cytoplasm",
            Both,
            VisualParams { hue: Some(0.8), ..p() },
            "strongly blue-staining cells",
        ),
        entry(
            "eosinophilic cytoplasm",
            Both,
            VisualParams { hue: Some(-0.8), ..p() },
            "pink-red staining cells",
        ),
    ];
    TermBank { terms }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bank_is_valid_for_generation() {
        let bank = TermBank::default();
        bank.validate_for_generation().unwrap();
        assert!(bank.contains("Papillary Structures"));
    }

    #[test]
    fn duplicate_terms_rejected() {
        let mut bank = TermBank::default();
        let dup = bank.terms[0].clone();
        bank.terms.push(dup);
        assert!(matches!(bank.validate(), Err(Error::InvalidTermBank(_))));
    }

    #[test]
    fn missing_glossary_rejected() {
        let mut bank = TermBank::default();
        bank.terms[3].glossary_entry = "  ".into();
        assert!(bank.validate().is_err());
    }

    #[test]
    fn thin_bank_rejected_for_generation() {
        let mut bank = TermBank::default();
        bank.terms.retain(|t| t.magnification_affinity != Affinity::Both);
        assert!(bank.validate().is_ok());
        assert!(bank.validate_for_generation().is_err());
    }

    #[test]
    fn merge_prefers_overlay() {
        let a = VisualParams { stain: Some(0.2), hue: Some(0.1), ..Default::default() };
        let b = VisualParams { stain: Some(0.9), ..Default::default() };
        let m = a.merged(&b);
        assert_eq!(m.stain, Some(0.9));
        assert_eq!(m.hue, Some(0.1));
        assert_eq!(m.attributes(), vec!["stain", "hue"]);
    }
}
