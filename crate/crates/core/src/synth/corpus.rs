use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::synth::render::render_sample;
use crate::synth::{GroundingSample, Magnification, Split, TermBank, IMAGE_STRIDE};

pub const GENERATOR_VERSION: &str = "pathground-synth/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const TERM_BANK_FILE: &str = "term_bank.json";
const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub x40: usize,
    pub x20: usize,
}

impl SplitCounts {
    pub fn get(&self, mag: Magnification) -> usize {
        match mag {
            Magnification::X40 => self.x40,
            Magnification::X20 => self.x20,
        }
    }

    pub fn total(&self) -> usize {
        self.x40 + self.x20
    }

    /// Splits `n` between the magnifications, the odd sample going to x40.
    pub fn even(n: usize) -> Self {
        Self {
            x40: n - n / 2,
            x20: n / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: SplitCounts,
    pub test: SplitCounts,
}

impl Counts {
    pub fn get(&self, split: Split) -> SplitCounts {
        match split {
            Split::Train => self.train,
            Split::Test => self.test,
        }
    }
}

/// Everything needed to regenerate a corpus byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub counts: Counts,
    /// Side length of the square crops, a multiple of 32.
    pub image_size: u32,
    pub generator_version: String,
    pub decoy_fraction: f64,
}

impl CorpusManifest {
    pub fn new(seed: u64, train_n: usize, test_n: usize, image_size: u32, decoy_fraction: f64) -> Self {
        Self {
            seed,
            counts: Counts {
                train: SplitCounts::even(train_n),
                test: SplitCounts::even(test_n),
            },
            image_size,
            generator_version: GENERATOR_VERSION.to_string(),
            decoy_fraction,
        }
    }

    /// 512 train / 128 test crops of 256 pixels, half of them with a decoy.
    pub fn desk_default(seed: u64) -> Self {
        Self::new(seed, 512, 128, 256, 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % IMAGE_STRIDE != 0 {
            return Err(Error::InvalidManifest(format!(
                "image size {} is not a positive multiple of {IMAGE_STRIDE}",
                self.image_size
            )));
        }
        if self.image_size < 64 {
            return Err(Error::InvalidManifest(format!(
                "image size {} is below the 64-pixel minimum",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.decoy_fraction) {
            return Err(Error::InvalidManifest(format!(
                "decoy fraction {} outside [0, 1]",
                self.decoy_fraction
            )));
        }
        if self.generator_version != GENERATOR_VERSION {
            return Err(Error::InvalidManifest(format!(
                "generator version {:?} cannot be reproduced by {GENERATOR_VERSION:?}",
                self.generator_version
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.train.total() + self.counts.test.total()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn sample_specs(&self) -> Vec<(String, Split, Magnification)> {
        let mut specs = Vec::with_capacity(self.total());
        for split in Split::ALL {
            for mag in Magnification::ALL {
                for i in 0..self.counts.get(split).get(mag) {
                    specs.push((format!("{split}-{mag}-{i:05}"), split, mag));
                }
            }
        }
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        specs
    }
}

/// Per-sample seed derived from the corpus seed and the image id.
pub(crate) fn sample_seed(seed: u64, image_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(image_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub image_file: String,
    pub expression: String,
    pub knowledge: Option<String>,
    #[serde(rename = "box")]
    pub box_: BoundingBox,
    pub magnification: Magnification,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoy_box: Option<BoundingBox>,
}

/// Renders every sample of `manifest` into `out`: PNG images, the JSONL
/// annotations, the term bank used, and finally the manifest itself.
pub fn generate_corpus(out: &Path, manifest: &CorpusManifest, bank: &TermBank) -> Result<Vec<AnnotationRecord>> {
    manifest.validate()?;
    bank.validate_for_generation()?;
    let image_dir = out.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let size = manifest.image_size;
    let records = manifest
        .sample_specs()
        .into_par_iter()
        .map(|(image_id, split, mag)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(manifest.seed, &image_id));
            let with_decoy = rng.random::<f64>() < manifest.decoy_fraction;
            let rendered = render_sample(bank, mag, size, size, with_decoy, &mut rng);
            let image_file = format!("{IMAGE_DIR}/{image_id}.png");
            let path = out.join(&image_file);
            rendered.image.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Ok(AnnotationRecord {
                image_id,
                image_file,
                expression: rendered.expression,
                knowledge: None,
                box_: rendered.box_,
                magnification: mag,
                split,
                terms: rendered.terms,
                decoy_box: rendered.decoy_box,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    write_annotations(&out.join(ANNOTATIONS_FILE), &records)?;
    bank.save(&out.join(TERM_BANK_FILE))?;
    manifest.save(out)?;
    Ok(records)
}

/// Writes the records to `path` through a temporary sibling file, so an
/// interrupted write never leaves a truncated annotation file behind.
pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("annotations")
    ));
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            file: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        let id = value
            .get("image_id")
            .and_then(|v| v.as_str())
            .unwrap_or("<unnamed>")
            .to_string();
        let record: AnnotationRecord =
            serde_json::from_value(value).map_err(|e| schema(format!("record {id}: {e}")))?;
        out.push(record);
    }
    Ok(out)
}

fn validate_record(record: &AnnotationRecord, bank: &TermBank) -> Result<()> {
    let fail = |message: String| Error::InvalidRecord {
        image_id: record.image_id.clone(),
        message,
    };
    if record.expression.trim().is_empty() {
        return Err(fail("empty expression".into()));
    }
    if !record.box_.is_inside_unit_square() {
        return Err(fail(format!("box {:?} extends outside the image", record.box_)));
    }
    let expression = record.expression.to_lowercase();
    for term in &record.terms {
        if !bank.contains(term) {
            return Err(fail(format!("term {term:?} is not in the term bank")));
        }
        if !expression.contains(&term.to_lowercase()) {
            return Err(fail(format!("term {term:?} does not occur in the expression")));
        }
    }
    Ok(())
}

fn load_image(root: &Path, record: &AnnotationRecord) -> Result<image::RgbImage> {
    let path: PathBuf = root.join(&record.image_file);
    if !path.is_file() {
        return Err(Error::Image {
            path,
            message: format!("missing image for record {}", record.image_id),
        });
    }
    let img = image::open(&path)
        .map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w % IMAGE_STRIDE != 0 || h % IMAGE_STRIDE != 0 {
        return Err(Error::Image {
            path,
            message: format!("{w}x{h} is not divisible by {IMAGE_STRIDE}"),
        });
    }
    Ok(img)
}

/// Loads and validates a corpus directory, sorted by `image_id`.
pub fn load_corpus(dir: &Path) -> Result<Vec<GroundingSample>> {
    CorpusManifest::load(dir)?;
    let bank_path = dir.join(TERM_BANK_FILE);
    let bank = if bank_path.is_file() {
        TermBank::load(&bank_path)?
    } else {
        TermBank::default()
    };
    let mut records = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.image_id.as_str()) {
            return Err(Error::InvalidRecord {
                image_id: r.image_id.clone(),
                message: "duplicate image_id".into(),
            });
        }
        validate_record(r, &bank)?;
    }
    records
        .into_par_iter()
        .map(|r| {
            let image = load_image(dir, &r)?;
            Ok(GroundingSample {
                image_id: r.image_id,
                image,
                expression: r.expression,
                knowledge: r.knowledge,
                box_: r.box_,
                magnification: r.magnification,
                split: r.split,
                terms: r.terms,
                decoy_box: r.decoy_box,
            })
        })
        .collect()
}
