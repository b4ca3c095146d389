//! Partitioned knowledge store with exact maximum-inner-product retrieval.
//!
//! Chunks belong to one of three partitions: physical laws (`phy`),
//! operational protocols (`prot`, the only ones allowed to carry alert
//! threshold rules) and historical analogues (`hist`).
//!
//! Corpus files hold one chunk each. An optional front-matter block delimited
//! by `---` lines sets `key: value` pairs:
//!
//! ```text
//! ---
//! id: prot-wave-height
//! variable: wave_height
//! op: >
//! value: 5.0
//! unit: m
//! directive: suspend flight routes
//! ---
//! Body text that gets embedded.
//! ```
//!
//! `id` defaults to the file stem. A threshold rule needs all of `variable`,
//! `op` (`>` or `<`), `value`, `unit` and `directive`.

mod embed;

pub use embed::{tokenize, Embedder, HashingEmbedder, RemoteEmbedder, DEFAULT_DIM};

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::remote::RemoteError;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("malformed front-matter in {file}: {reason}")]
    FrontMatter { file: String, reason: String },
    #[error("duplicate chunk id `{0}`")]
    DuplicateId(String),
    #[error("embedding dimension {actual} does not match store dimension {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("non-finite embedding for chunk `{0}`")]
    NonFinite(String),
    #[error("threshold rule on chunk `{id}` outside the prot partition ({partition})")]
    RuleOutsideProtocols { id: String, partition: Partition },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unknown partition `{0}` (expected phy, prot or hist)")]
    UnknownPartition(String),
    #[error("unknown comparator `{0}` (expected > or <)")]
    UnknownComparator(String),
    #[error("store file corrupt: {0}")]
    Corrupt(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

pub type Result<T> = std::result::Result<T, KnowledgeError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KnowledgeError + '_ {
    move |source| KnowledgeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Phy,
    Prot,
    Hist,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Phy, Partition::Prot, Partition::Hist];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Phy => "phy",
            Partition::Prot => "prot",
            Partition::Hist => "hist",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "phy" => Ok(Partition::Phy),
            "prot" => Ok(Partition::Prot),
            "hist" => Ok(Partition::Hist),
            other => Err(KnowledgeError::UnknownPartition(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Greater,
    #[serde(rename = "<")]
    Less,
}

impl Comparator {
    /// Strict comparison: a value equal to the threshold never triggers.
    pub fn triggers(&self, observed: f64, threshold: f64) -> bool {
        match self {
            Comparator::Greater => observed > threshold,
            Comparator::Less => observed < threshold,
        }
    }

    pub fn symbol(&self) -> &'static str {
        match self {
            Comparator::Greater => ">",
            Comparator::Less => "<",
        }
    }
}

impl FromStr for Comparator {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            ">" => Ok(Comparator::Greater),
            "<" => Ok(Comparator::Less),
            other => Err(KnowledgeError::UnknownComparator(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub variable: String,
    pub op: Comparator,
    pub value: f64,
    pub unit: String,
    pub directive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeChunk {
    pub id: String,
    pub partition: Partition,
    pub text: String,
    #[serde(skip)]
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<ThresholdRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub partition: Partition,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub partition: Option<Partition>,
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.id.as_str()).collect()
    }
}

/// Parsed corpus file before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedChunk {
    pub id: Option<String>,
    pub text: String,
    pub rule: Option<ThresholdRule>,
}

/// Splits optional front-matter from the body. `file` only labels errors.
pub fn parse_chunk(source: &str, file: &str) -> Result<ParsedChunk> {
    let malformed = |reason: String| KnowledgeError::FrontMatter {
        file: file.to_string(),
        reason,
    };
    let mut lines = source.lines();
    let mut first = lines.next();
    while matches!(first, Some(l) if l.trim().is_empty()) {
        first = lines.next();
    }
    if first.map(str::trim) != Some("---") {
        return Ok(ParsedChunk {
            id: None,
            text: source.trim().to_string(),
            rule: None,
        });
    }
    let mut id = None;
    let mut fields: [Option<String>; 5] = Default::default();
    const RULE_KEYS: [&str; 5] = ["variable", "op", "value", "unit", "directive"];
    let mut closed = false;
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "---" {
            closed = true;
            break;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| malformed(format!("expected `key: value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim().to_string());
        if key == "id" {
            id = Some(value);
        } else if let Some(slot) = RULE_KEYS.iter().position(|k| *k == key) {
            fields[slot] = Some(value);
        } else {
            return Err(malformed(format!("unknown key `{key}`")));
        }
    }
    if !closed {
        return Err(malformed("front-matter is not closed by `---`".into()));
    }
    let text = lines.collect::<Vec<_>>().join("\n").trim().to_string();
    let present = fields.iter().filter(|f| f.is_some()).count();
    let rule = match present {
        0 => None,
        5 => {
            let [variable, op, value, unit, directive] = fields.map(Option::unwrap);
            let op = op.parse::<Comparator>().map_err(|e| malformed(e.to_string()))?;
            let value: f64 = value
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| malformed(format!("value `{value}` is not a finite number")))?;
            Some(ThresholdRule {
                variable,
                op,
                value,
                unit,
                directive,
            })
        }
        _ => {
            let missing: Vec<_> = RULE_KEYS
                .iter()
                .zip(&fields)
                .filter(|(_, f)| f.is_none())
                .map(|(k, _)| *k)
                .collect();
            return Err(malformed(format!("incomplete threshold rule, missing {}", missing.join(", "))));
        }
    };
    if matches!(&id, Some(s) if s.is_empty()) {
        return Err(malformed("empty id".into()));
    }
    Ok(ParsedChunk { id, text, rule })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    embedder: String,
    payload_sha256: String,
    chunks: Vec<KnowledgeChunk>,
}

/// In-memory chunk store; retrieval is an exact full scan.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeStore {
    dim: usize,
    embedder: String,
    chunks: Vec<KnowledgeChunk>,
    ids: BTreeSet<String>,
}

impl KnowledgeStore {
    pub fn new(dim: usize, embedder: impl Into<String>) -> Self {
        Self {
            dim,
            embedder: embedder.into(),
            chunks: Vec::new(),
            ids: BTreeSet::new(),
        }
    }

    pub fn for_embedder(e: &dyn Embedder) -> Self {
        Self::new(e.dim(), e.id())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunks(&self) -> &[KnowledgeChunk] {
        &self.chunks
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeChunk> {
        self.chunks.iter().find(|c| c.id == id)
    }

    pub fn insert(&mut self, chunk: KnowledgeChunk) -> Result<()> {
        if chunk.embedding.len() != self.dim {
            return Err(KnowledgeError::Dimension {
                expected: self.dim,
                actual: chunk.embedding.len(),
            });
        }
        if chunk.embedding.iter().any(|x| !x.is_finite()) {
            return Err(KnowledgeError::NonFinite(chunk.id));
        }
        if chunk.rule.is_some() && chunk.partition != Partition::Prot {
            return Err(KnowledgeError::RuleOutsideProtocols {
                id: chunk.id,
                partition: chunk.partition,
            });
        }
        if !self.ids.insert(chunk.id.clone()) {
            return Err(KnowledgeError::DuplicateId(chunk.id));
        }
        self.chunks.push(chunk);
        Ok(())
    }

    /// Parses and embeds one corpus document.
    pub fn add_text(
        &mut self,
        source: &str,
        default_id: &str,
        partition: Partition,
        embedder: &dyn Embedder,
    ) -> Result<()> {
        let parsed = parse_chunk(source, default_id)?;
        let embedding = embedder.embed(&parsed.text)?;
        self.insert(KnowledgeChunk {
            id: parsed.id.unwrap_or_else(|| default_id.to_string()),
            partition,
            text: parsed.text,
            embedding,
            rule: parsed.rule,
        })
    }

    /// Ingests every `.md`/`.txt` file in `dir` (sorted by name) as one chunk.
    /// Nothing is inserted if any file fails.
    pub fn ingest(&mut self, dir: &Path, partition: Partition, embedder: &dyn Embedder) -> Result<usize> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && matches!(p.extension().and_then(|e| e.to_str()), Some("md") | Some("txt"))
            })
            .collect();
        files.sort();
        let mut staged = self.clone();
        for path in &files {
            let source = std::fs::read_to_string(path).map_err(io_err(path))?;
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let label = path.display().to_string();
            let parsed = parse_chunk(&source, &label)?;
            let embedding = embedder.embed(&parsed.text)?;
            staged.insert(KnowledgeChunk {
                id: parsed.id.unwrap_or(stem),
                partition,
                text: parsed.text,
                embedding,
                rule: parsed.rule,
            })?;
        }
        *self = staged;
        Ok(files.len())
    }

    /// Exact top-`k` by inner product over the optional partition; ties are
    /// broken by ascending id.
    pub fn mips_topk(&self, query: &[f64], k: usize, partition: Option<Partition>) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(KnowledgeError::InvalidK);
        }
        if query.len() != self.dim {
            return Err(KnowledgeError::Dimension {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut hits: Vec<Hit> = self
            .chunks
            .iter()
            .filter(|c| partition.is_none_or(|p| c.partition == p))
            .map(|c| Hit {
                id: c.id.clone(),
                partition: c.partition,
                score: c.embedding.iter().zip(query).map(|(a, b)| a * b).sum(),
            })
            .collect();
        hits.sort_by(rank);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn retrieve(
        &self,
        query: &str,
        embedder: &dyn Embedder,
        k: usize,
        partition: Option<Partition>,
    ) -> Result<RetrievalResult> {
        let e = embedder.embed(query)?;
        Ok(RetrievalResult {
            query: query.to_string(),
            partition,
            hits: self.mips_topk(&e, k, partition)?,
        })
    }

    pub fn rules(&self) -> impl Iterator<Item = (&str, &ThresholdRule)> {
        self.chunks
            .iter()
            .filter_map(|c| c.rule.as_ref().map(|r| (c.id.as_str(), r)))
    }

    /// Writes `<path>` (little-endian f64 embeddings, chunk order) and
    /// `<path>.json` (manifest with chunk text and metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        let payload: Vec<u8> = self
            .chunks
            .iter()
            .flat_map(|c| c.embedding.iter().flat_map(|x| x.to_le_bytes()))
            .collect();
        std::fs::write(path, &payload).map_err(io_err(path))?;
        let manifest = Manifest {
            dim: self.dim,
            embedder: self.embedder.clone(),
            payload_sha256: hex_digest(&payload),
            chunks: self.chunks.clone(),
        };
        let mpath = manifest_path(path);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, text + "\n").map_err(io_err(&mpath))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| KnowledgeError::Corrupt(e.to_string()))?;
        let payload = std::fs::read(path).map_err(io_err(path))?;
        if hex_digest(&payload) != manifest.payload_sha256 {
            return Err(KnowledgeError::Corrupt("payload checksum mismatch".into()));
        }
        let expected = manifest.dim * manifest.chunks.len() * 8;
        if payload.len() != expected {
            return Err(KnowledgeError::Corrupt(format!(
                "payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let mut store = Self::new(manifest.dim, manifest.embedder);
        let row = manifest.dim * 8;
        for (i, mut chunk) in manifest.chunks.into_iter().enumerate() {
            chunk.embedding = payload[i * row..(i + 1) * row]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(chunk)?;
        }
        Ok(store)
    }

    /// Store holding the bundled reference corpus.
    pub fn builtin(embedder: &dyn Embedder) -> Result<Self> {
        let mut store = Self::for_embedder(embedder);
        for (partition, name, source) in BUILTIN_CORPUS {
            store.add_text(source, name, *partition, embedder)?;
        }
        Ok(store)
    }
}

fn rank(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

macro_rules! corpus {
    ($($part:ident / $name:literal),* $(,)?) => {
        &[$((Partition::$part, $name, include_str!(concat!("corpus/", $name, ".md")))),*]
    };
}

const BUILTIN_CORPUS: &[(Partition, &str, &str)] = corpus![
    Phy / "phy-mass-conservation",
    Phy / "phy-enstrophy-decay",
    Phy / "phy-vortex-dynamics",
    Phy / "phy-shear-instability",
    Phy / "phy-pressure-wind",
    Prot / "prot-wave-height",
    Prot / "prot-low-pressure",
    Prot / "prot-vortex-intensity",
    Prot / "prot-calm-sea",
    Hist / "hist-kolmogorov-flow",
    Hist / "hist-vortex-merger",
    Hist / "hist-storm-surge",
];

#[cfg(test)]
mod tests;
