//! Embedding-similarity scoring: average cosine similarity between gold spans
//! and their paired predictions, and accuracy above similarity thresholds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Cell, GoldAnnotation};
use crate::eval_ner::words;
use crate::extraction::{with_retry, BackendConfig, BackendError, ConfigError, RetryPolicy};
use crate::postprocess::SubtypedConcept;

pub const DEFAULT_EMBEDDING_MODEL: &str = "all-MiniLM-L6-v2";
pub const STUB_DIMENSION: usize = 64;
const BATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding provider failed after {attempts} attempt(s): {source}")]
    Provider {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error("provider returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding cache {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Scales `values` to unit L2 norm.
    pub fn normalized(values: Vec<f64>) -> Result<Self, EmbedError> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(EmbeddingVector {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// Source of raw (not necessarily normalized) sentence embeddings.
pub trait EmbeddingProvider: Send + Sync {
    /// Identifies the model; part of the cache key.
    fn model_id(&self) -> &str;
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Deterministic hash-projection embedder for tests and offline runs.
///
/// Each case-folded word maps to a pseudo-random vector in [-1, 1]^dim drawn
/// from SHA-256(seed || block || word); a text embeds as the normalized sum
/// of its word vectors. Texts with no words hash as a single word. Shared
/// words give positive similarity, so `White` and `white` embed identically.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    seed: u64,
    dimension: usize,
    model_id: String,
}

impl StubEmbedder {
    pub fn new(seed: u64) -> Self {
        StubEmbedder {
            seed,
            dimension: STUB_DIMENSION,
            model_id: format!("stub-hash-{seed}"),
        }
    }

    fn word_vector(&self, word: &str, out: &mut [f64]) {
        for (block, chunk) in out.chunks_mut(4).enumerate() {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update((block as u32).to_le_bytes());
            h.update(word.as_bytes());
            let digest = h.finalize();
            for (k, slot) in chunk.iter_mut().enumerate() {
                let bytes: [u8; 8] = digest[k * 8..k * 8 + 8].try_into().expect("8 bytes");
                *slot += u64::from_le_bytes(bytes) as f64 / u64::MAX as f64 * 2.0 - 1.0;
            }
        }
    }

    pub fn raw_vector(&self, text: &str) -> Vec<f64> {
        let mut tokens: Vec<String> = words(text).collect();
        if tokens.is_empty() {
            tokens.push(text.trim().to_lowercase());
        }
        let mut v = vec![0.0; self.dimension];
        for t in &tokens {
            self.word_vector(t, &mut v);
        }
        v
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.raw_vector(t)).collect())
    }
}

/// Client for endpoints that take `{model, input: [..]}` and answer
/// `{data: [{embedding: [..]}, ..]}`.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    endpoint_url: String,
    api_key: String,
    model_id: String,
    retry: RetryPolicy,
}

impl HttpEmbedder {
    pub fn new(config: &BackendConfig, model_id: impl Into<String>) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(HttpEmbedder {
            client: config.http_client()?,
            endpoint_url: config.endpoint_url.clone(),
            api_key: config.api_key()?,
            model_id: model_id.into(),
            retry: config.retry_policy(),
        })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, BackendError> {
        let resp = self
            .client
            .post(&self.endpoint_url)
            .bearer_auth(&self.api_key)
            .json(&json!({"model": self.model_id, "input": texts}))
            .send()
            .map_err(BackendError::from_reqwest)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(BackendError::from_reqwest)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::from_status(
                status,
                crate::extraction::truncate(&body, 512),
            ));
        }
        parse_embeddings_response(&body).map_err(BackendError::BadResponse)
    }
}

pub fn parse_embeddings_response(body: &str) -> Result<Vec<Vec<f64>>, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| e.to_string())?;
    let data = v
        .get("data")
        .and_then(Value::as_array)
        .ok_or("missing data array")?;
    let mut items: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let idx = item
            .get("index")
            .and_then(Value::as_u64)
            .unwrap_or(pos as u64);
        let vec = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or("missing embedding")?
            .iter()
            .map(|x| x.as_f64().ok_or("non-numeric embedding value"))
            .collect::<Result<Vec<_>, _>>()?;
        items.push((idx, vec));
    }
    items.sort_by_key(|(i, _)| *i);
    Ok(items.into_iter().map(|(_, v)| v).collect())
}

impl EmbeddingProvider for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let (res, attempts) = with_retry(&self.retry, || self.request(texts));
        res.map_err(|source| EmbedError::Provider { attempts, source })
    }
}

/// Embeds one text and normalizes the result.
pub fn embed(text: &str, provider: &dyn EmbeddingProvider) -> Result<EmbeddingVector, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut out = provider.embed_batch(&[text])?;
    if out.len() != 1 {
        return Err(EmbedError::CountMismatch {
            expected: 1,
            got: out.len(),
        });
    }
    EmbeddingVector::normalized(out.remove(0))
}

/// Dot product of unit vectors, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch(a.dimension(), b.dimension()));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

pub fn cache_key(model_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(model_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    model_id: String,
    vector: Vec<f64>,
}

/// Provider wrapper with a shared cache keyed by (model, text).
pub struct CachedEmbedder<'a> {
    provider: &'a dyn EmbeddingProvider,
    cache: RwLock<HashMap<String, Arc<EmbeddingVector>>>,
}

impl<'a> CachedEmbedder<'a> {
    pub fn new(provider: &'a dyn EmbeddingProvider) -> Self {
        CachedEmbedder {
            provider,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn model_id(&self) -> &str {
        self.provider.model_id()
    }

    pub fn len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, text: &str) -> Result<Arc<EmbeddingVector>, EmbedError> {
        let key = cache_key(self.model_id(), text);
        if let Some(v) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(v.clone());
        }
        let v = Arc::new(embed(text, self.provider)?);
        self.cache
            .write()
            .expect("cache lock")
            .insert(key, v.clone());
        Ok(v)
    }

    /// Fills the cache for all texts not yet present, in batches.
    pub fn prefetch(&self, texts: &[&str]) -> Result<(), EmbedError> {
        let model = self.model_id().to_string();
        let missing: Vec<&str> = {
            let cache = self.cache.read().expect("cache lock");
            let mut seen = BTreeSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(&cache_key(&model, t)) && seen.insert(*t))
                .collect()
        };
        for chunk in missing.chunks(BATCH_SIZE) {
            if chunk.iter().any(|t| t.trim().is_empty()) {
                return Err(EmbedError::EmptyText);
            }
            let vectors = self.provider.embed_batch(chunk)?;
            if vectors.len() != chunk.len() {
                return Err(EmbedError::CountMismatch {
                    expected: chunk.len(),
                    got: vectors.len(),
                });
            }
            let mut cache = self.cache.write().expect("cache lock");
            for (text, v) in chunk.iter().zip(vectors) {
                cache.insert(
                    cache_key(&model, text),
                    Arc::new(EmbeddingVector::normalized(v)?),
                );
            }
        }
        Ok(())
    }

    /// Loads cached vectors for this provider's model. A missing file is an
    /// empty cache.
    pub fn load(&self, path: &Path) -> Result<usize, EmbedError> {
        let content = match fs::read_to_string(path) {
            Ok(c) => c,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(cache_err(path, e)),
        };
        let mut cache = self.cache.write().expect("cache lock");
        let mut n = 0;
        for line in content.lines().filter(|l| !l.trim().is_empty()) {
            let entry: CacheEntry = serde_json::from_str(line).map_err(|e| cache_err(path, e))?;
            if entry.model_id == self.provider.model_id() {
                // Stored vectors were normalized before saving; keep them
                // bit-identical rather than re-normalizing.
                if entry.vector.is_empty() || entry.vector.iter().any(|x| !x.is_finite()) {
                    return Err(cache_err(path, format!("bad vector for key {}", entry.key)));
                }
                cache.insert(
                    entry.key,
                    Arc::new(EmbeddingVector {
                        values: entry.vector,
                    }),
                );
                n += 1;
            }
        }
        Ok(n)
    }

    /// Writes the cache sorted by key, so identical contents give identical bytes.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let cache = self.cache.read().expect("cache lock");
        let sorted: BTreeMap<&String, &Arc<EmbeddingVector>> = cache.iter().collect();
        let mut out = String::new();
        for (key, v) in sorted {
            let entry = CacheEntry {
                key: key.clone(),
                model_id: self.model_id().to_string(),
                vector: v.values.clone(),
            };
            out.push_str(&serde_json::to_string(&entry).map_err(|e| cache_err(path, e))?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| cache_err(path, e))
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> EmbedError {
    EmbedError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub gold_text: String,
    pub predicted_text: Option<String>,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// One record per gold item, in gold order.
    pub records: Vec<SimilarityRecord>,
    /// Predictions left unpaired.
    pub spurious: usize,
}

/// Greedy maximum-similarity pairing. `similarity[i][j]` scores gold `i`
/// against prediction `j`. Repeatedly takes the best unpaired pair (ties go
/// to the lowest gold index, then the lowest prediction index) until one
/// side runs out. Unpaired gold items score 0.
pub fn align(gold: &[String], predicted: &[String], similarity: &[Vec<f64>]) -> Alignment {
    let mut pairs: Vec<(usize, usize)> = (0..gold.len())
        .flat_map(|i| (0..predicted.len()).map(move |j| (i, j)))
        .collect();
    pairs.sort_by(|&(i1, j1), &(i2, j2)| {
        similarity[i2][j2]
            .total_cmp(&similarity[i1][j1])
            .then(i1.cmp(&i2))
            .then(j1.cmp(&j2))
    });

    let mut gold_match: Vec<Option<usize>> = vec![None; gold.len()];
    let mut pred_used = vec![false; predicted.len()];
    let mut matched = 0;
    for (i, j) in pairs {
        if matched == gold.len().min(predicted.len()) {
            break;
        }
        if gold_match[i].is_none() && !pred_used[j] {
            gold_match[i] = Some(j);
            pred_used[j] = true;
            matched += 1;
        }
    }

    let records = gold
        .iter()
        .zip(&gold_match)
        .enumerate()
        .map(|(i, (g, m))| match m {
            Some(j) => SimilarityRecord {
                gold_text: g.clone(),
                predicted_text: Some(predicted[*j].clone()),
                s: similarity[i][*j],
            },
            None => SimilarityRecord {
                gold_text: g.clone(),
                predicted_text: None,
                s: 0.0,
            },
        })
        .collect();
    Alignment {
        records,
        spurious: predicted.len() - matched,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// Pair individual gold spans with individual predictions.
    #[default]
    PerSpan,
    /// Join each note's spans (and predictions) for a cell into one text.
    WholeCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticEvalConfig {
    pub thresholds: Vec<f64>,
    pub model_id: String,
    pub mode: PairingMode,
}

impl Default for SemanticEvalConfig {
    fn default() -> Self {
        SemanticEvalConfig {
            thresholds: vec![0.8, 0.9],
            model_id: DEFAULT_EMBEDDING_MODEL.to_string(),
            mode: PairingMode::PerSpan,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("thresholds must be strictly increasing values in (0, 1]: {0}")]
pub struct ThresholdError(pub String);

impl SemanticEvalConfig {
    pub fn validate(&self) -> Result<(), ThresholdError> {
        let ok = !self.thresholds.is_empty()
            && self.thresholds.iter().all(|t| *t > 0.0 && *t <= 1.0)
            && self.thresholds.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(ThresholdError(format!("{:?}", self.thresholds)))
        }
    }
}

/// Parses `0.8,0.9`.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>, ThresholdError> {
    let values = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| ThresholdError(s.to_string()))?;
    let cfg = SemanticEvalConfig {
        thresholds: values,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg.thresholds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAccuracy {
    pub theta: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticScores {
    pub avg_s: f64,
    pub acc_at: Vec<ThresholdAccuracy>,
    pub records: usize,
    pub spurious: usize,
}

impl SemanticScores {
    pub fn accuracy_at(&self, theta: f64) -> Option<f64> {
        self.acc_at
            .iter()
            .find(|a| a.theta == theta)
            .map(|a| a.accuracy)
    }
}

/// Mean similarity and, per threshold, the fraction of records with s > θ
/// (a tie at θ is a miss).
pub fn score_records(records: &[SimilarityRecord], thresholds: &[f64]) -> SemanticScores {
    let n = records.len();
    let mean = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let avg_s = if n == 0 {
        0.0
    } else {
        records.iter().map(|r| r.s).sum::<f64>() / n as f64
    };
    SemanticScores {
        avg_s,
        acc_at: thresholds
            .iter()
            .map(|&theta| ThresholdAccuracy {
                theta,
                accuracy: mean(records.iter().filter(|r| r.s > theta).count()),
            })
            .collect(),
        records: n,
        spurious: 0,
    }
}

#[derive(Default)]
struct NoteItems {
    gold: Vec<String>,
    predicted: Vec<String>,
}

fn cell_items<'g>(
    gold: &'g [GoldAnnotation],
    concepts: &'g [SubtypedConcept],
) -> BTreeMap<Cell, BTreeMap<&'g str, NoteItems>> {
    let gold_cells: BTreeSet<Cell> = gold.iter().map(GoldAnnotation::cell).collect();
    let mut items: BTreeMap<Cell, BTreeMap<&str, NoteItems>> = BTreeMap::new();
    for g in gold {
        items
            .entry(g.cell())
            .or_default()
            .entry(&g.note_id)
            .or_default()
            .gold
            .push(g.span_text.clone());
    }
    for c in concepts {
        for cell in c.cells().into_iter().filter(|c| gold_cells.contains(c)) {
            items
                .entry(cell)
                .or_default()
                .entry(&c.note_id)
                .or_default()
                .predicted
                .push(c.text.clone());
        }
    }
    items
}

pub fn evaluate_semantic(
    gold: &[GoldAnnotation],
    concepts: &[SubtypedConcept],
    config: &SemanticEvalConfig,
    embedder: &CachedEmbedder<'_>,
) -> Result<BTreeMap<Cell, SemanticScores>, EmbedError> {
    Ok(evaluate_semantic_records(gold, concepts, config, embedder)?
        .into_iter()
        .map(|(cell, (scores, _))| (cell, scores))
        .collect())
}

/// Like [`evaluate_semantic`], also returning the similarity records behind
/// each cell's scores.
pub fn evaluate_semantic_records(
    gold: &[GoldAnnotation],
    concepts: &[SubtypedConcept],
    config: &SemanticEvalConfig,
    embedder: &CachedEmbedder<'_>,
) -> Result<BTreeMap<Cell, (SemanticScores, Vec<SimilarityRecord>)>, EmbedError> {
    let mut items = cell_items(gold, concepts);
    if config.mode == PairingMode::WholeCell {
        for notes in items.values_mut() {
            for ni in notes.values_mut() {
                for side in [&mut ni.gold, &mut ni.predicted] {
                    if !side.is_empty() {
                        *side = vec![side.join("; ")];
                    }
                }
            }
        }
    }

    let texts: Vec<&str> = items
        .values()
        .flat_map(|notes| notes.values())
        .flat_map(|ni| ni.gold.iter().chain(&ni.predicted))
        .map(String::as_str)
        .collect();
    embedder.prefetch(&texts)?;

    let mut out = BTreeMap::new();
    for (cell, notes) in &items {
        let mut records = Vec::new();
        let mut spurious = 0;
        for ni in notes.values() {
            let gold_vecs = ni
                .gold
                .iter()
                .map(|t| embedder.get(t))
                .collect::<Result<Vec<_>, _>>()?;
            let pred_vecs = ni
                .predicted
                .iter()
                .map(|t| embedder.get(t))
                .collect::<Result<Vec<_>, _>>()?;
            let sim = gold_vecs
                .iter()
                .map(|g| pred_vecs.iter().map(|p| cosine(g, p)).collect())
                .collect::<Result<Vec<Vec<f64>>, _>>()?;
            let a = align(&ni.gold, &ni.predicted, &sim);
            spurious += a.spurious;
            records.extend(a.records);
        }
        let mut scores = score_records(&records, &config.thresholds);
        scores.spurious = spurious;
        out.insert(*cell, (scores, records));
    }
    Ok(out)
}
