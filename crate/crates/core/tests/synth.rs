use std::path::Path;

use image::RgbImage;
use pathground::geometry::{iou, BoundingBox};
use pathground::synth::{
    corpus_stats, generate_corpus, load_corpus, Affinity, CorpusManifest, Counts, SplitCounts, TermBank,
};
use pathground::{GroundingSample, Magnification, Split};

fn seed7(image_size: u32, decoy_fraction: f64) -> CorpusManifest {
    CorpusManifest {
        counts: Counts {
            train: SplitCounts { x40: 8, x20: 8 },
            test: SplitCounts { x40: 4, x20: 4 },
        },
        ..CorpusManifest::new(7, 0, 0, image_size, decoy_fraction)
    }
}

/// Every file under `dir`, relative path → bytes.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn seed7_corpus_is_byte_identical_on_regeneration() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let records = generate_corpus(a.path(), &seed7(64, 0.5), &TermBank::default()).unwrap();
    assert_eq!(records.len(), 24);
    let manifest = CorpusManifest::load(a.path()).unwrap();
    generate_corpus(b.path(), &manifest, &TermBank::load(&a.path().join("term_bank.json")).unwrap()).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.len(), 24 + 3);
    assert!(sa == sb, "regenerated corpus differs");
    let lines = std::fs::read_to_string(a.path().join("annotations.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 24);

    let corpus = load_corpus(a.path()).unwrap();
    assert_eq!(corpus.len(), 24);
    assert!(corpus.windows(2).all(|w| w[0].image_id < w[1].image_id));
    let stats = corpus_stats(&corpus, 10);
    assert_eq!(stats.count(Split::Train, Magnification::X40), 8);
    assert_eq!(stats.count(Split::Train, Magnification::X20), 8);
    assert_eq!(stats.count(Split::Test, Magnification::X40), 4);
    assert_eq!(stats.count(Split::Test, Magnification::X20), 4);
}

#[test]
fn different_seeds_differ() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(a.path(), &seed7(64, 0.5), &TermBank::default()).unwrap();
    let other = CorpusManifest { seed: 8, ..seed7(64, 0.5) };
    generate_corpus(b.path(), &other, &TermBank::default()).unwrap();
    assert!(snapshot(a.path()) != snapshot(b.path()));
}

#[test]
fn expressions_carry_an_affinity_term() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(dir.path(), &seed7(64, 0.5), &TermBank::default()).unwrap();
    let bank = TermBank::default();
    for s in load_corpus(dir.path()).unwrap() {
        let want = match s.magnification {
            Magnification::X40 => Affinity::X40,
            Magnification::X20 => Affinity::X20,
        };
        assert!(!s.terms.is_empty());
        assert!(
            s.terms.iter().any(|t| bank.get(t).unwrap().magnification_affinity == want),
            "{}: {:?}",
            s.image_id,
            s.terms
        );
        for t in &s.terms {
            assert!(s.expression.contains(t.as_str()));
        }
        let c = s.box_.to_corners();
        assert!(c.x0 >= 0.0 && c.y0 >= 0.0 && c.x1 <= 1.0 && c.y1 <= 1.0);
    }
}

#[test]
fn decoy_fraction_zero_renders_only_targets() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(dir.path(), &seed7(64, 0.0), &TermBank::default()).unwrap();
    assert!(load_corpus(dir.path()).unwrap().iter().all(|s| s.decoy_box.is_none()));
    let one = tempfile::tempdir().unwrap();
    generate_corpus(one.path(), &seed7(64, 1.0), &TermBank::default()).unwrap();
    for s in load_corpus(one.path()).unwrap() {
        let d = s.decoy_box.expect("decoy rendered");
        assert_eq!(iou(&d, &s.box_), 0.0);
    }
}

/// Brute-force texture detector: 8-pixel cells are summarised by mean
/// color and gray-level variance over a 3×3 neighborhood; cells whose
/// features sit far from the image median (in MAD units) are flagged, and
/// and 4-connected flagged components larger than `min_cells` are returned as
/// boxes, largest first.
fn texture_regions(img: &RgbImage, min_cells: usize) -> Vec<BoundingBox> {
    const CELL: u32 = 8;
    let (w, h) = img.dimensions();
    let (gw, gh) = ((w / CELL) as usize, (h / CELL) as usize);
    let mut raw = vec![[0f64; 4]; gw * gh];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut sum = [0f64; 3];
            let (mut g1, mut g2) = (0f64, 0f64);
            for y in 0..CELL {
                for x in 0..CELL {
                    let p = img.get_pixel(gx as u32 * CELL + x, gy as u32 * CELL + y).0;
                    for c in 0..3 {
                        sum[c] += p[c] as f64;
                    }
                    let g = (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0;
                    g1 += g;
                    g2 += g * g;
                }
            }
            let n = (CELL * CELL) as f64;
            raw[gy * gw + gx] = [sum[0] / n, sum[1] / n, sum[2] / n, g2 / n - (g1 / n).powi(2)];
        }
    }
    let mut feat = vec![[0f64; 4]; gw * gh];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut acc = [0f64; 4];
            let mut k = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (x, y) = (gx as i64 + dx, gy as i64 + dy);
                    if x >= 0 && y >= 0 && (x as usize) < gw && (y as usize) < gh {
                        let r = raw[y as usize * gw + x as usize];
                        for f in 0..4 {
                            acc[f] += r[f];
                        }
                        k += 1.0;
                    }
                }
            }
            feat[gy * gw + gx] = acc.map(|v| v / k);
        }
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut score = vec![0f64; gw * gh];
    for f in 0..4 {
        let col: Vec<f64> = feat.iter().map(|x| x[f]).collect();
        let med = median(col.clone());
        let mad = median(col.iter().map(|v| (v - med).abs()).collect()).max(1e-6);
        for (s, v) in score.iter_mut().zip(&col) {
            *s = s.max((v - med).abs() / mad);
        }
    }
    let flagged: Vec<bool> = score.iter().map(|&s| s > 4.0).collect();
    let mut seen = vec![false; gw * gh];
    let mut regions = Vec::new();
    for start in 0..gw * gh {
        if !flagged[start] || seen[start] {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut stack = vec![start];
        seen[start] = true;
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % gw, i / gw);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut push = |j: usize| {
                if flagged[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < gw {
                push(i + 1);
            }
            if y > 0 {
                push(i - gw);
            }
            if y + 1 < gh {
                push(i + gw);
            }
        }
        if size >= min_cells {
            let fx = |v: usize| v as f64 / gw as f64;
            let fy = |v: usize| v as f64 / gh as f64;
            let c = pathground::CornerBox { x0: fx(x0), y0: fy(y0), x1: fx(x1 + 1), y1: fy(y1 + 1) };
            regions.push((size, BoundingBox::from_corners(c).unwrap()));
        }
    }
    regions.sort_by(|a, b| b.0.cmp(&a.0));
    regions.into_iter().map(|(_, b)| b).collect()
}

fn default_scale_corpus(decoy_fraction: f64, n: usize) -> Vec<GroundingSample> {
    let dir = tempfile::tempdir().unwrap();
    let manifest = CorpusManifest::new(3, n, 0, 256, decoy_fraction);
    generate_corpus(dir.path(), &manifest, &TermBank::default()).unwrap();
    load_corpus(dir.path()).unwrap()
}

#[test]
fn decoy_free_targets_are_recoverable_by_texture_statistics() {
    let corpus = default_scale_corpus(0.0, 100);
    let found = corpus
        .iter()
        .filter(|s| texture_regions(&s.image, 6).first().is_some_and(|b| iou(b, &s.box_) >= 0.5))
        .count();
    assert!(found * 100 >= 95 * corpus.len(), "{found}/{} recovered", corpus.len());
}

#[test]
fn decoy_samples_show_two_candidate_regions() {
    let corpus = default_scale_corpus(1.0, 100);
    let ambiguous = corpus.iter().filter(|s| texture_regions(&s.image, 6).len() >= 2).count();
    assert!(ambiguous * 100 >= 95 * corpus.len(), "{ambiguous}/{} ambiguous", corpus.len());
}
