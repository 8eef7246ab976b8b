//! Deterministic procedural corpus mirroring the layout of a multi-magnification
//! pathology grounding dataset: textured crops, templated referring
//! expressions, one ground-truth box per sample and a magnification tag.

mod bank;
mod corpus;
mod render;
mod stats;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;

pub use bank::{Affinity, Layout, TermBank, TermEntry, VisualParams};
pub use corpus::{
    generate_corpus, load_annotations, load_corpus, write_annotations, AnnotationRecord,
    CorpusManifest, Counts, SplitCounts, ANNOTATIONS_FILE, GENERATOR_VERSION, MANIFEST_FILE,
    TERM_BANK_FILE,
};
pub use render::{render_sample, RenderedSample};
pub use stats::{corpus_stats, tokenize_words, CorpusStats, SubsetCount};

/// Visual-branch stride; image sides must be multiples of this.
pub const IMAGE_STRIDE: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Magnification {
    X40,
    X20,
}

impl Magnification {
    pub const ALL: [Magnification; 2] = [Magnification::X40, Magnification::X20];

    pub fn as_str(&self) -> &'static str {
        match self {
            Magnification::X40 => "x40",
            Magnification::X20 => "x20",
        }
    }
}

impl fmt::Display for Magnification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Magnification {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "x40" => Ok(Magnification::X40),
            "x20" => Ok(Magnification::X20),
            other => Err(format!("unknown magnification {other:?} (expected x40 or x20)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

/// One image + expression + box record.
#[derive(Debug, Clone)]
pub struct GroundingSample {
    pub image_id: String,
    pub image: RgbImage,
    pub expression: String,
    pub knowledge: Option<String>,
    pub box_: BoundingBox,
    pub magnification: Magnification,
    pub split: Split,
    /// Bank terms the expression was built from.
    pub terms: Vec<String>,
    /// Distractor region, when one was rendered.
    pub decoy_box: Option<BoundingBox>,
}

impl GroundingSample {
    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }
}
