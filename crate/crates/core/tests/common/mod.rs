//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use pathground::geometry::{loss, BoundingBox, LossConfig};
use rand::Rng;

pub const RASTER: usize = 2048;
const LANES: usize = RASTER / 64;

/// Covered pixel rows and per-row column bitset: a pixel belongs to the
/// box when its center lies inside the corner form.
fn rasterize(b: &BoundingBox) -> (std::ops::Range<usize>, [u64; LANES]) {
    let c = b.to_corners();
    let inside = |i: usize, lo: f64, hi: f64| {
        let p = (i as f64 + 0.5) / RASTER as f64;
        p >= lo && p < hi
    };
    let mut row = [0u64; LANES];
    for x in 0..RASTER {
        if inside(x, c.x0, c.x1) {
            row[x / 64] |= 1 << (x % 64);
        }
    }
    let ys: Vec<usize> = (0..RASTER).filter(|&y| inside(y, c.y0, c.y1)).collect();
    let rows = match (ys.first(), ys.last()) {
        (Some(&a), Some(&b)) => a..b + 1,
        _ => 0..0,
    };
    (rows, row)
}

/// IoU by counting pixels on a 2048² grid.
pub fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ra, ma) = rasterize(a);
    let (rb, mb) = rasterize(b);
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..RASTER {
        let ia = ra.contains(&y);
        let ib = rb.contains(&y);
        for w in 0..LANES {
            let x = if ia { ma[w] } else { 0 };
            let z = if ib { mb[w] } else { 0 };
            inter += (x & z).count_ones() as u64;
            union += (x | z).count_ones() as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A valid box whose corner form stays inside the unit square, with sides
/// of at least `min_side`.
pub fn random_box<R: Rng>(rng: &mut R, min_side: f64) -> BoundingBox {
    let w = rng.random_range(min_side..=1.0);
    let h = rng.random_range(min_side..=1.0);
    let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
    let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
    BoundingBox::new(cx, cy, w, h).expect("valid box")
}

/// Central finite differences of `loss().total` in (cx, cy, w, h).
pub fn numeric_gradient(pred: &BoundingBox, gt: &BoundingBox, cfg: &LossConfig, step: f64) -> [f64; 4] {
    let base = pred.to_array();
    let mut g = [0.0; 4];
    for (i, gi) in g.iter_mut().enumerate() {
        let mut hi = base;
        let mut lo = base;
        hi[i] += step;
        lo[i] -= step;
        let f = |v: [f64; 4]| loss(&BoundingBox::new(v[0], v[1], v[2], v[3]).expect("valid"), gt, cfg).total;
        *gi = (f(hi) - f(lo)) / (2.0 * step);
    }
    g
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// A sample with a blank 32×32 image, for metric tests.
pub fn blank_sample(id: &str, mag: pathground::Magnification, b: BoundingBox) -> pathground::GroundingSample {
    pathground::GroundingSample {
        image_id: id.to_string(),
        image: image::RgbImage::new(32, 32),
        expression: "tumor cells".into(),
        knowledge: None,
        box_: b,
        magnification: mag,
        split: pathground::Split::Test,
        terms: Vec::new(),
        decoy_box: None,
    }
}

pub fn prediction(id: &str, b: BoundingBox) -> pathground::eval::Prediction {
    pathground::eval::Prediction {
        image_id: id.to_string(),
        annotation_index: 0,
        box_: b,
    }
}

/// Minimal HTTP endpoint answering `{"prompt": p}` with
/// `{"text": "knowledge for <p>"}`, or always failing with `status`.
pub struct StubServer {
    pub url: String,
    pub requests: std::sync::Arc<std::sync::atomic::AtomicUsize>,
}

impl StubServer {
    pub fn start(status: u16) -> Self {
        use std::io::{BufRead, BufReader, Read, Write};
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;

        let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let counter = requests.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some(v) = l.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; len];
                if reader.read_exact(&mut body).is_err() {
                    continue;
                }
                counter.fetch_add(1, Ordering::SeqCst);
                let payload = if status == 200 {
                    let req: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
                    let prompt = req["prompt"].as_str().unwrap_or_default();
                    serde_json::json!({ "text": format!("knowledge for {prompt}") }).to_string()
                } else {
                    "{}".to_string()
                };
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        Self { url, requests }
    }

    pub fn count(&self) -> usize {
        self.requests.load(std::sync::atomic::Ordering::SeqCst)
    }
}

pub const WORDS: [&str; 16] = [
    "tumor", "cells", "with", "enlarged", "nuclei", "pale", "round", "dense", "glandular", "lumens", "spindle",
    "cords", "crowded", "dark", "stroma", "atypical",
];

/// `n` words drawn from [`WORDS`].
pub fn random_text<R: Rng>(rng: &mut R, n: usize) -> String {
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn word_vocab() -> pathground::model::Vocab {
    pathground::model::Vocab::build([WORDS.join(" ").as_str()])
}

/// A small random architecture; dimensions are multiples of the head count.
pub fn random_config<R: Rng>(rng: &mut R, mode: pathground::model::AblationMode) -> pathground::model::ModelConfig {
    let heads = [1usize, 2, 4][rng.random_range(0..3)];
    let dim = |rng: &mut R| heads * [4usize, 8][rng.random_range(0..2)];
    pathground::model::ModelConfig {
        c_v: dim(rng),
        c_e: dim(rng),
        c_p: dim(rng),
        heads,
        ffn_dim: rng.random_range(8..=32),
        visual_layers: rng.random_range(1..=2),
        text_layers: rng.random_range(1..=2),
        cfm_layers: rng.random_range(1..=2),
        head_layers: rng.random_range(1..=3),
        segment_embedding: rng.random::<bool>(),
        dropout: 0.0,
        ablation_mode: mode,
        ..Default::default()
    }
}

/// Generates a corpus with glossary knowledge into `dir` and loads it.
pub fn knowledge_corpus(
    dir: &std::path::Path,
    manifest: &pathground::synth::CorpusManifest,
) -> Vec<pathground::GroundingSample> {
    use pathground::knowledge::{expand_corpus, Glossary, KnowledgeProvider};
    use pathground::synth::{generate_corpus, load_corpus, TermBank};
    let bank = TermBank::default();
    generate_corpus(dir, manifest, &bank).expect("generate");
    expand_corpus(&KnowledgeProvider::Glossary(Glossary::from_bank(&bank)), dir, None, false).expect("expand");
    load_corpus(dir).expect("load")
}

pub fn tiny_model(mode: pathground::model::AblationMode) -> pathground::model::ModelConfig {
    pathground::model::ModelConfig {
        c_v: 16,
        c_e: 16,
        c_p: 16,
        heads: 2,
        ffn_dim: 32,
        visual_layers: 1,
        text_layers: 1,
        cfm_layers: 1,
        ablation_mode: mode,
        ..Default::default()
    }
}
