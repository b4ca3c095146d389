//! Visual-symbolic projection of flow states.
//!
//! A state is cut into non-overlapping `p x p` patches which a fixed seeded
//! linear map embeds into `d_v` dimensions. A bank of `N` learned queries then
//! pools the patches by cross-attention,
//!
//! ```text
//! H = softmax(Q (V W_K)^T / sqrt(d)) (V W_V)
//! ```
//!
//! and the resulting tokens are aligned to text embeddings with a
//! cosine-similarity InfoNCE loss at temperature `tau_c`. [`extract_topology`]
//! separately turns the state into discrete descriptors rendered as text.

mod topology;
mod train;

pub use topology::{extract_topology, render_descriptors, DescriptorKind, Thresholds, TopologicalDescriptor};
pub use train::{synthetic_dataset, train_projector, Sample, TrainConfig, TrainReport, CLASS_DESCRIPTIONS};

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{velocity_from_vorticity, FieldError, FlowState};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("patch size {patch} does not tile a {height}x{width} grid")]
    Patch {
        patch: usize,
        height: usize,
        width: usize,
    },
    #[error("zero-norm {what} vector at row {row}: cosine similarity undefined")]
    ZeroNorm { what: &'static str, row: usize },
    #[error("need at least two candidate text embeddings, got {0}")]
    TooFewCandidates(usize),
    #[error("positive index {index} out of range for {candidates} candidates")]
    PositiveIndex { index: usize, candidates: usize },
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ProjectorError>;

fn shape_err(what: &'static str, expected: impl ToString, actual: impl ToString) -> ProjectorError {
    ProjectorError::Shape {
        what,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// Channels fed to the patch embedder, in order.
pub const PATCH_CHANNELS: [&str; 3] = ["u", "v", "vorticity"];

/// Fixed random linear patch embedder standing in for a pretrained vision
/// encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedder {
    pub patch: usize,
    pub d_v: usize,
    pub seed: u64,
    weights: Array2<f64>,
}

impl PatchEmbedder {
    pub fn new(patch: usize, d_v: usize, seed: u64) -> Self {
        let fan_in = patch * patch * PATCH_CHANNELS.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            patch,
            d_v,
            seed,
            weights: gaussian_matrix(fan_in, d_v, 1.0 / (fan_in as f64).sqrt(), &mut rng),
        }
    }

    /// Patch vectors of `x` in row-major patch order.
    pub fn encode(&self, x: &FlowState) -> Result<PatchEncoding> {
        let g = x.grid;
        let p = self.patch;
        if p == 0 || !g.height.is_multiple_of(p) || !g.width.is_multiple_of(p) {
            return Err(ProjectorError::Patch {
                patch: p,
                height: g.height,
                width: g.width,
            });
        }
        let omega = x.vorticity_field()?;
        let vel = match x.velocity() {
            Some(v) => v,
            None => velocity_from_vorticity(&omega)?,
        };
        let channels: [&[f64]; 3] = [&vel.u, &vel.v, omega.values()];
        let (ph, pw) = (g.height / p, g.width / p);
        let fan_in = p * p * channels.len();
        let mut raw = Array2::zeros((ph * pw, fan_in));
        for bi in 0..ph {
            for bj in 0..pw {
                let mut row = raw.row_mut(bi * pw + bj);
                let mut k = 0;
                for c in channels {
                    for di in 0..p {
                        for dj in 0..p {
                            row[k] = c[(bi * p + di) * g.width + bj * p + dj];
                            k += 1;
                        }
                    }
                }
            }
        }
        let patches = raw.dot(&self.weights);
        if patches.iter().any(|v| !v.is_finite()) {
            return Err(ProjectorError::NonFinite("patch encoding"));
        }
        Ok(PatchEncoding { patches })
    }
}

/// `P x d_v` patch matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoding {
    pub patches: Array2<f64>,
}

impl PatchEncoding {
    pub fn new(patches: Array2<f64>) -> Result<Self> {
        if patches.nrows() == 0 {
            return Err(shape_err("patch encoding", "at least one patch", 0));
        }
        if patches.iter().any(|v| !v.is_finite()) {
            return Err(ProjectorError::NonFinite("patch encoding"));
        }
        Ok(Self { patches })
    }

    pub fn len(&self) -> usize {
        self.patches.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    /// `N x d` query bank.
    pub queries: Array2<f64>,
    /// `d_v x d`.
    pub w_k: Array2<f64>,
    /// `d_v x d`.
    pub w_v: Array2<f64>,
    pub temperature: f64,
}

impl ProjectorParams {
    pub fn init(n: usize, d: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = gaussian_matrix(n, d, 1.0, &mut rng);
        let scale = 1.0 / (d_v as f64).sqrt();
        let w_k = gaussian_matrix(d_v, d, scale, &mut rng);
        let w_v = gaussian_matrix(d_v, d, scale, &mut rng);
        Self {
            queries,
            w_k,
            w_v,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.queries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.queries.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.w_k.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.queries.dim();
        if n == 0 || d == 0 {
            return Err(shape_err("queries", "N >= 1, d >= 1", format!("{n}x{d}")));
        }
        if self.w_k.ncols() != d || self.w_v.dim() != self.w_k.dim() {
            return Err(shape_err(
                "projections",
                format!("d_v x {d}"),
                format!("W_K {:?}, W_V {:?}", self.w_k.dim(), self.w_v.dim()),
            ));
        }
        check_temperature(self.temperature)?;
        let finite = |m: &Array2<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&self.queries) && finite(&self.w_k) && finite(&self.w_v)) {
            return Err(ProjectorError::NonFinite("projector parameters"));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(ProjectorError::Temperature(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTokenSequence {
    /// `N x d` pooled tokens.
    pub h_vis: Array2<f64>,
    /// `N x P` attention weights; rows sum to one.
    pub attention: Array2<f64>,
    pub rendered_text: String,
}

fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut a = s.clone();
    for mut row in a.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    a
}

struct Forward {
    keys: Array2<f64>,
    values: Array2<f64>,
    attention: Array2<f64>,
    tokens: Array2<f64>,
}

fn forward(params: &ProjectorParams, v: &PatchEncoding) -> Result<Forward> {
    params.validate()?;
    if v.dim() != params.d_v() {
        return Err(shape_err("patch dimension", params.d_v(), v.dim()));
    }
    if v.is_empty() {
        return Err(shape_err("patch encoding", "at least one patch", 0));
    }
    let keys = v.patches.dot(&params.w_k);
    let values = v.patches.dot(&params.w_v);
    let scores = params.queries.dot(&keys.t()) / (params.dim() as f64).sqrt();
    let attention = softmax_rows(&scores);
    let tokens = attention.dot(&values);
    Ok(Forward {
        keys,
        values,
        attention,
        tokens,
    })
}

pub fn cross_attend(params: &ProjectorParams, v: &PatchEncoding) -> Result<SemanticTokenSequence> {
    let f = forward(params, v)?;
    Ok(SemanticTokenSequence {
        h_vis: f.tokens,
        attention: f.attention,
        rendered_text: String::new(),
    })
}

fn unit_rows(m: &Array2<f64>, what: &'static str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    for (row, &n) in norms.iter().enumerate() {
        if !n.is_finite() {
            return Err(ProjectorError::NonFinite(what));
        }
        if n == 0.0 {
            return Err(ProjectorError::ZeroNorm { what, row });
        }
    }
    let unit = m / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

fn check_loss_inputs(h: &Array2<f64>, text: &Array2<f64>, pos: &[usize], tau: f64) -> Result<()> {
    check_temperature(tau)?;
    let m = text.nrows();
    if m < 2 {
        return Err(ProjectorError::TooFewCandidates(m));
    }
    if text.ncols() != h.ncols() {
        return Err(shape_err("text embedding dimension", h.ncols(), text.ncols()));
    }
    if pos.len() != h.nrows() {
        return Err(shape_err("positive indices", h.nrows(), pos.len()));
    }
    if let Some(&index) = pos.iter().find(|&&p| p >= m) {
        return Err(ProjectorError::PositiveIndex {
            index,
            candidates: m,
        });
    }
    Ok(())
}

/// Per-token loss terms and `dL/ds` for each similarity.
fn loss_core(sim: &Array2<f64>, pos: &[usize], tau: f64) -> (f64, Array2<f64>) {
    let mut loss = 0.0;
    let mut dsim = Array2::zeros(sim.dim());
    for (i, row) in sim.rows().into_iter().enumerate() {
        let logits = row.mapv(|s| s / tau);
        let top = (0..logits.len())
            .reduce(|a, b| if logits[b] > logits[a] { b } else { a })
            .expect("at least two candidates");
        let max = logits[top];
        let exps = logits.mapv(|l| (l - max).exp());
        let rest: f64 = exps.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, e)| e).sum();
        let z = 1.0 + rest;
        loss += (max - logits[pos[i]]) + rest.ln_1p();
        for j in 0..row.len() {
            let onehot = if j == pos[i] { 1.0 } else { 0.0 };
            dsim[[i, j]] = (exps[j] / z - onehot) / tau;
        }
    }
    (loss, dsim)
}

/// Contrastive alignment loss of `N` tokens against `M` candidate text
/// embeddings; token `i` should match candidate `pos[i]`.
pub fn alignment_loss(h_vis: &Array2<f64>, text: &Array2<f64>, pos: &[usize], tau: f64) -> Result<f64> {
    check_loss_inputs(h_vis, text, pos, tau)?;
    let (h, _) = unit_rows(h_vis, "token")?;
    let (t, _) = unit_rows(text, "text embedding")?;
    Ok(loss_core(&h.dot(&t.t()), pos, tau).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub queries: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &ProjectorParams) -> Self {
        Self {
            queries: Array2::zeros(p.queries.dim()),
            w_k: Array2::zeros(p.w_k.dim()),
            w_v: Array2::zeros(p.w_v.dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        self.queries.scaled_add(c, &other.queries);
        self.w_k.scaled_add(c, &other.w_k);
        self.w_v.scaled_add(c, &other.w_v);
    }

    pub fn norm(&self) -> f64 {
        [&self.queries, &self.w_k, &self.w_v]
            .iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Loss and its analytic gradients with respect to `Q`, `W_K` and `W_V`.
pub fn alignment_grad(
    params: &ProjectorParams,
    v: &PatchEncoding,
    text: &Array2<f64>,
    pos: &[usize],
    tau: f64,
) -> Result<(f64, Gradients)> {
    let f = forward(params, v)?;
    check_loss_inputs(&f.tokens, text, pos, tau)?;
    let (h, hnorm) = unit_rows(&f.tokens, "token")?;
    let (t, _) = unit_rows(text, "text embedding")?;
    let (loss, dsim) = loss_core(&h.dot(&t.t()), pos, tau);

    // Through the row normalisation: dh = (I - h h^T) g / |h|.
    let g = dsim.dot(&t);
    let radial = (&g * &h).sum_axis(Axis(1)).insert_axis(Axis(1));
    let dtokens = (&g - &(&h * &radial)) / hnorm.view().insert_axis(Axis(1));

    let dattn = dtokens.dot(&f.values.t());
    let dvalues = f.attention.t().dot(&dtokens);
    let inner = (&dattn * &f.attention).sum_axis(Axis(1)).insert_axis(Axis(1));
    let dscores = &f.attention * &(&dattn - &inner);
    let scale = 1.0 / (params.dim() as f64).sqrt();
    let dq = dscores.dot(&f.keys) * scale;
    let dkeys = dscores.t().dot(&params.queries) * scale;
    Ok((
        loss,
        Gradients {
            queries: dq,
            w_k: v.patches.t().dot(&dkeys),
            w_v: v.patches.t().dot(&dvalues),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    pub d_v: usize,
    pub p: usize,
    pub seed: u64,
    pub temperature: f64,
}

fn header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ProjectorError + '_ {
    move |source| ProjectorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `Q`, `W_K`, `W_V` row-major as little-endian f64 to `path` and the
/// header next to it with a `.json` extension.
pub fn save_checkpoint(path: &Path, params: &ProjectorParams, patch: usize, seed: u64) -> Result<()> {
    params.validate()?;
    let header = CheckpointHeader {
        n: params.n_queries(),
        d: params.dim(),
        d_v: params.d_v(),
        p: patch,
        seed,
        temperature: params.temperature,
    };
    let bytes: Vec<u8> = [&params.queries, &params.w_k, &params.w_v]
        .iter()
        .flat_map(|m| m.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
        .collect();
    std::fs::write(path, bytes).map_err(io_err(path))?;
    let hp = header_path(path);
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(&hp, text + "\n").map_err(io_err(&hp))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ProjectorParams)> {
    let hp = header_path(path);
    let text = std::fs::read_to_string(&hp).map_err(io_err(&hp))?;
    let header: CheckpointHeader =
        serde_json::from_str(&text).map_err(|e| ProjectorError::Checkpoint(e.to_string()))?;
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (n, d, dv) = (header.n, header.d, header.d_v);
    let total = n * d + 2 * dv * d;
    if bytes.len() != total * 8 {
        return Err(ProjectorError::Checkpoint(format!(
            "payload has {} bytes, header implies {}",
            bytes.len(),
            total * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let take = |start: usize, rows: usize| {
        Array2::from_shape_vec((rows, d), values[start..start + rows * d].to_vec()).expect("sized slice")
    };
    let params = ProjectorParams {
        queries: take(0, n),
        w_k: take(n * d, dv),
        w_v: take(n * d + dv * d, dv),
        temperature: header.temperature,
    };
    params.validate()?;
    Ok((header, params))
}
