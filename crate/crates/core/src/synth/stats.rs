use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::synth::{GroundingSample, Magnification, Split};

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "the", "of", "with", "in", "on", "at", "by", "to", "for", "from", "into",
    "is", "are", "each", "that", "than", "between", "its", "their", "most", "much", "without",
];

const HISTOGRAM_BINS: usize = 10;

/// Lowercased alphanumeric runs; everything else separates words.
pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetCount {
    pub split: Split,
    pub magnification: Magnification,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub total: usize,
    pub subsets: Vec<SubsetCount>,
    pub with_knowledge: usize,
    pub with_decoy: usize,
    /// Ten equal-width bins over `(0, 1]` of box width and height.
    pub width_histogram: Vec<usize>,
    pub height_histogram: Vec<usize>,
    pub top_words: Vec<(String, usize)>,
    pub top_terms: Vec<(String, usize)>,
}

impl CorpusStats {
    pub fn count(&self, split: Split, mag: Magnification) -> usize {
        self.subsets
            .iter()
            .find(|s| s.split == split && s.magnification == mag)
            .map_or(0, |s| s.count)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("| split | x40 | x20 | total |\n|---|---|---|---|\n");
        for split in Split::ALL {
            let a = self.count(split, Magnification::X40);
            let b = self.count(split, Magnification::X20);
            out.push_str(&format!("| {split} | {a} | {b} | {} |\n", a + b));
        }
        out.push_str(&format!(
            "\nsamples: {}, with knowledge: {}, with decoy: {}\n",
            self.total, self.with_knowledge, self.with_decoy
        ));
        out.push_str("\nbox width histogram (0.1 bins): ");
        out.push_str(&format!("{:?}\n", self.width_histogram));
        out.push_str("box height histogram (0.1 bins): ");
        out.push_str(&format!("{:?}\n", self.height_histogram));
        out.push_str("\n| word | count |\n|---|---|\n");
        for (w, c) in &self.top_words {
            out.push_str(&format!("| {w} | {c} |\n"));
        }
        if !self.top_terms.is_empty() {
            out.push_str("\n| term | count |\n|---|---|\n");
            for (t, c) in &self.top_terms {
                out.push_str(&format!("| {t} | {c} |\n"));
            }
        }
        out
    }
}

fn bin(v: f64) -> usize {
    ((v * HISTOGRAM_BINS as f64).ceil() as usize).clamp(1, HISTOGRAM_BINS) - 1
}

fn ranked(counts: HashMap<String, usize>, top_k: usize) -> Vec<(String, usize)> {
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(top_k);
    v
}

/// Counts per split and magnification, box-size histograms and the `top_k`
/// most frequent expression words (stopwords excluded) and bank terms.
pub fn corpus_stats(samples: &[GroundingSample], top_k: usize) -> CorpusStats {
    let mut subsets: BTreeMap<(Split, Magnification), usize> = BTreeMap::new();
    for split in Split::ALL {
        for mag in Magnification::ALL {
            subsets.insert((split, mag), 0);
        }
    }
    let mut stats = CorpusStats {
        total: samples.len(),
        width_histogram: vec![0; HISTOGRAM_BINS],
        height_histogram: vec![0; HISTOGRAM_BINS],
        ..Default::default()
    };
    let mut words: HashMap<String, usize> = HashMap::new();
    let mut terms: HashMap<String, usize> = HashMap::new();
    for s in samples {
        *subsets.entry((s.split, s.magnification)).or_default() += 1;
        stats.width_histogram[bin(s.box_.w())] += 1;
        stats.height_histogram[bin(s.box_.h())] += 1;
        stats.with_knowledge += usize::from(s.knowledge.as_deref().is_some_and(|k| !k.is_empty()));
        stats.with_decoy += usize::from(s.decoy_box.is_some());
        for w in tokenize_words(&s.expression) {
            if !STOPWORDS.contains(&w.as_str()) {
                *words.entry(w).or_default() += 1;
            }
        }
        for t in &s.terms {
            *terms.entry(t.clone()).or_default() += 1;
        }
    }
    stats.subsets = subsets
        .into_iter()
        .map(|((split, magnification), count)| SubsetCount {
            split,
            magnification,
            count,
        })
        .collect();
    stats.top_words = ranked(words, top_k);
    stats.top_terms = ranked(terms, top_k);
    stats
}
