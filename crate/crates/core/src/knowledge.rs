//! Knowledge expansion: turns pathological terms in an expression into
//! explicit descriptions of what they look like.
//!
//! Two providers share one interface. [`Glossary`] is an offline longest-match
//! dictionary; [`RemoteProvider`] sends an instantiated prompt to an HTTP
//! endpoint and caches every answer by expression.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{load_annotations, write_annotations, AnnotationRecord, TermBank, ANNOTATIONS_FILE};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Explain the visual appearance, in histology images, of each pathological term in the following description, one sentence per term: {expression}";

pub const ENDPOINT_ENV: &str = "PATHGROUND_KNOWLEDGE_ENDPOINT";
pub const TOKEN_ENV: &str = "PATHGROUND_KNOWLEDGE_TOKEN";

const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);
const RETRIES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeSource {
    Glossary,
    Remote,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeText {
    pub text: String,
    pub source: KnowledgeSource,
    pub matched_terms: Vec<String>,
}

/// Term → explanation dictionary with case-insensitive longest-match lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Glossary {
    /// Keyed by lowercased term; value is (term as written, explanation).
    entries: BTreeMap<String, (String, String)>,
    longest_key: usize,
}

impl Glossary {
    pub fn new<I, K, V>(entries: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut g = Glossary::default();
        for (k, v) in entries {
            let term: String = k.into();
            let key = term.trim().to_lowercase();
            if key.is_empty() {
                continue;
            }
            g.longest_key = g.longest_key.max(key.len());
            g.entries.insert(key, (term, v.into()));
        }
        g
    }

    pub fn from_bank(bank: &TermBank) -> Self {
        Self::new(bank.glossary())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads a flat JSON object of `term → explanation`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&text)?;
        Ok(Self::new(map))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, &str> = self
            .entries
            .values()
            .map(|(t, e)| (t.as_str(), e.as_str()))
            .collect();
        let text = serde_json::to_string_pretty(&map)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Glossary terms in `expression`, left to right, each reported once.
    /// At every word start the longest matching term wins.
    pub fn matches(&self, expression: &str) -> Vec<&str> {
        let lower = expression.to_lowercase();
        let is_word = |i: usize| -> bool {
            lower[i..]
                .chars()
                .next()
                .is_some_and(|c| c.is_alphanumeric())
        };
        let mut found: Vec<&str> = Vec::new();
        let mut i = 0;
        while i < lower.len() {
            let at_word_start = i == 0 || !lower[..i].chars().next_back().is_some_and(|c| c.is_alphanumeric());
            if at_word_start && is_word(i) {
                let mut hit = None;
                let max_end = (i + self.longest_key).min(lower.len());
                for end in (i + 1..=max_end).rev() {
                    if !lower.is_char_boundary(end) {
                        continue;
                    }
                    let ends_in_word = lower[..end].chars().next_back().is_some_and(|c| c.is_alphanumeric());
                    if end < lower.len() && is_word(end) && ends_in_word {
                        continue;
                    }
                    if let Some((term, _)) = self.entries.get(&lower[i..end]) {
                        hit = Some((term.as_str(), end));
                        break;
                    }
                }
                if let Some((term, end)) = hit {
                    if !found.contains(&term) {
                        found.push(term);
                    }
                    i = end;
                    continue;
                }
            }
            i += lower[i..].chars().next().map_or(1, |c| c.len_utf8());
        }
        found
    }

    pub fn expand(&self, expression: &str) -> KnowledgeText {
        let matched = self.matches(expression);
        let text = matched
            .iter()
            .map(|t| self.entries[&t.to_lowercase()].1.as_str())
            .collect::<Vec<_>>()
            .join(". ");
        KnowledgeText {
            text,
            source: KnowledgeSource::Glossary,
            matched_terms: matched.into_iter().map(str::to_string).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_template")]
    pub prompt_template: String,
    #[serde(default)]
    pub token: Option<String>,
    #[serde(default)]
    pub cache_file: Option<PathBuf>,
}

fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_string()
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: None,
            prompt_template: default_template(),
            token: None,
            cache_file: None,
        }
    }

    /// Endpoint and token from the environment, if an endpoint is set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty())?;
        let mut cfg = Self::new(endpoint);
        cfg.token = std::env::var(TOKEN_ENV).ok().filter(|s| !s.is_empty());
        Some(cfg)
    }

    pub fn prompt(&self, expression: &str) -> String {
        self.prompt_template.replace("{expression}", expression)
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
}

#[derive(Deserialize)]
struct RemoteResponse {
    text: String,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    expression: String,
    text: String,
}

/// LLM endpoint behind a per-expression cache. Requests are serialized.
pub struct RemoteProvider {
    config: RemoteConfig,
    agent: ureq::Agent,
    cache: RwLock<HashMap<String, String>>,
    queue: Mutex<()>,
    calls: AtomicUsize,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("endpoint", &self.config.endpoint)
            .field("calls", &self.calls.load(Ordering::Relaxed))
            .finish()
    }
}

impl RemoteProvider {
    pub fn new(config: RemoteConfig) -> Result<Self> {
        let mut cache = HashMap::new();
        if let Some(path) = &config.cache_file {
            if path.is_file() {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let entry: CacheLine = serde_json::from_str(line).map_err(|e| Error::Schema {
                        file: path.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                    cache.insert(entry.expression, entry.text);
                }
            }
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(REQUEST_TIMEOUT))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            config,
            agent,
            cache: RwLock::new(cache),
            queue: Mutex::new(()),
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn cached(&self, expression: &str) -> Option<String> {
        self.cache
            .read()
            .expect("cache lock poisoned")
            .get(expression)
            .cloned()
    }

    fn request_once(&self, prompt: &str) -> std::result::Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = RemoteRequest {
            prompt,
            model: self.config.model.as_deref(),
        };
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.config.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("endpoint returned status {}", status.as_u16()));
        }
        let parsed: RemoteResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| format!("malformed response: {e}"))?;
        if parsed.text.trim().is_empty() {
            return Err("empty response".into());
        }
        Ok(parsed.text)
    }

    pub fn expand(&self, expression: &str) -> Result<KnowledgeText> {
        if let Some(text) = self.cached(expression) {
            return Ok(KnowledgeText {
                text,
                source: KnowledgeSource::Cache,
                matched_terms: Vec::new(),
            });
        }
        let _turn = self.queue.lock().expect("request queue poisoned");
        // Another caller may have answered this expression while we waited.
        if let Some(text) = self.cached(expression) {
            return Ok(KnowledgeText {
                text,
                source: KnowledgeSource::Cache,
                matched_terms: Vec::new(),
            });
        }
        let prompt = self.config.prompt(expression);
        let mut last_err = String::new();
        for _ in 0..=RETRIES {
            match self.request_once(&prompt) {
                Ok(text) => {
                    self.remember(expression, &text)?;
                    return Ok(KnowledgeText {
                        text,
                        source: KnowledgeSource::Remote,
                        matched_terms: Vec::new(),
                    });
                }
                Err(e) => last_err = e,
            }
        }
        Err(Error::Provider(format!(
            "{} after {} attempts: {last_err}",
            self.config.endpoint,
            RETRIES + 1
        )))
    }

    fn remember(&self, expression: &str, text: &str) -> Result<()> {
        self.cache
            .write()
            .expect("cache lock poisoned")
            .insert(expression.to_string(), text.to_string());
        if let Some(path) = &self.config.cache_file {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&CacheLine {
                expression: expression.to_string(),
                text: text.to_string(),
            })?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum KnowledgeProvider {
    Glossary(Glossary),
    Remote(RemoteProvider),
}

impl KnowledgeProvider {
    pub fn expand(&self, expression: &str) -> Result<KnowledgeText> {
        if expression.trim().is_empty() {
            return Err(Error::EmptyInput("expression".into()));
        }
        match self {
            KnowledgeProvider::Glossary(g) => Ok(g.expand(expression)),
            KnowledgeProvider::Remote(r) => r.expand(expression),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExpansionSummary {
    pub expanded: usize,
    pub skipped: usize,
}

/// Fills the `knowledge` field of every record. Records that already carry
/// knowledge are kept unless `force` is set. On failure no record is changed
/// and the error lists the offending id and every id still pending.
pub fn expand_records(
    provider: &KnowledgeProvider,
    records: &mut [AnnotationRecord],
    force: bool,
) -> Result<ExpansionSummary> {
    let todo: Vec<usize> = (0..records.len())
        .filter(|&i| force || records[i].knowledge.is_none())
        .collect();
    let mut texts = Vec::with_capacity(todo.len());
    for (pos, &i) in todo.iter().enumerate() {
        match provider.expand(&records[i].expression) {
            Ok(k) => texts.push(k.text),
            Err(e) => {
                return Err(Error::Expansion {
                    image_id: records[i].image_id.clone(),
                    message: e.to_string(),
                    pending: todo[pos..].iter().map(|&j| records[j].image_id.clone()).collect(),
                })
            }
        }
    }
    for (&i, text) in todo.iter().zip(texts) {
        records[i].knowledge = Some(text);
    }
    Ok(ExpansionSummary {
        expanded: todo.len(),
        skipped: records.len() - todo.len(),
    })
}

/// [`expand_records`] over a corpus directory's annotation file, writing the
/// result to `out` (default: the same file). Nothing is written when no
/// record needed expansion or when expansion fails.
pub fn expand_corpus(
    provider: &KnowledgeProvider,
    corpus_dir: &Path,
    out: Option<&Path>,
    force: bool,
) -> Result<ExpansionSummary> {
    let src = corpus_dir.join(ANNOTATIONS_FILE);
    let mut records = load_annotations(&src)?;
    let summary = expand_records(provider, &mut records, force)?;
    let dest = out.map(Path::to_path_buf).unwrap_or(src.clone());
    if summary.expanded > 0 || dest != src {
        write_annotations(&dest, &records)?;
    }
    Ok(summary)
}
