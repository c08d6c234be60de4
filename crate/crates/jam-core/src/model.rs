//! The translation model: project users, queries, and per-modality item
//! embeddings into a shared d-dimensional space, aggregate the item
//! modalities with one of three mixers, and score with dot(u + q, t_hat).

use serde::{Deserialize, Serialize};

use crate::data::Catalog;
use crate::error::{JamError, Result};
use crate::linalg::{add, dot64, matvec, softmax, DenseMatrix, DenseVector, SeededRng};

/// Item-modality aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MixerKind {
    Avg,
    Cross,
    Moe { k: usize, noise_enabled: bool },
}

impl MixerKind {
    pub fn name(&self) -> &'static str {
        match self {
            MixerKind::Avg => "avg",
            MixerKind::Cross => "cross",
            MixerKind::Moe { .. } => "moe",
        }
    }
}

/// Per-modality projected item latents for one item.
pub type ItemLatents = Vec<DenseVector>;

/// Mixer diagnostics: convex weights over modalities, and for MoE the
/// pre-mask gate values and the kept expert set.
#[derive(Debug, Clone)]
pub struct MixWeights {
    pub alpha: DenseVector,
    pub gate_logits: Option<DenseVector>,
    pub kept: Option<Vec<usize>>,
}

/// Optional projection biases (ablation flag; off by default).
#[derive(Debug, Clone)]
pub struct ProjectionBias {
    pub user: DenseVector,
    pub query: DenseVector,
    pub item: Vec<DenseVector>,
}

/// Cross-attention parameters: one key projection per modality plus a
/// shared query projection, all mapping raw embeddings to d.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub key: Vec<DenseMatrix>,
    pub query: DenseMatrix,
}

/// Noisy top-k gate parameters. Gate and noise branches each pair a
/// per-modality item projection with a query projection.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub gate_item: Vec<DenseMatrix>,
    pub gate_query: DenseMatrix,
    pub noise_item: Vec<DenseMatrix>,
    pub noise_query: DenseMatrix,
}

/// All trainable state of the model.
#[derive(Debug, Clone)]
pub struct JamParams {
    pub d: usize,
    pub mixer: MixerKind,
    pub w_user: DenseMatrix,
    pub w_query: DenseMatrix,
    pub w_item: Vec<DenseMatrix>,
    pub bias: Option<ProjectionBias>,
    pub attention: Option<AttentionParams>,
    pub gates: Option<GateParams>,
}

/// Input widths the model is built over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub user_dim: usize,
    pub query_dim: usize,
    pub modality_dims: Vec<usize>,
}

impl ModelDims {
    pub fn n_mod(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn from_tables(
        users: &crate::data::EmbeddingTable,
        queries: &crate::data::EmbeddingTable,
        catalog: &Catalog,
    ) -> Self {
        Self {
            user_dim: users.dim(),
            query_dim: queries.dim(),
            modality_dims: catalog.modality_dims(),
        }
    }
}

impl JamParams {
    /// Fresh parameters with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init.
    /// Only the matrices the mixer needs are populated.
    pub fn init(
        dims: &ModelDims,
        d: usize,
        mixer: MixerKind,
        use_bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let n_mod = dims.n_mod();
        if n_mod == 0 {
            return Err(JamError::Config("need at least one modality".into()));
        }
        if let MixerKind::Moe { k, .. } = mixer {
            if k < 1 || k > n_mod {
                return Err(JamError::Config(format!(
                    "moe k={k} must be in 1..={n_mod}"
                )));
            }
        }
        let w_user = DenseMatrix::uniform_init(d, dims.user_dim, rng);
        let w_query = DenseMatrix::uniform_init(d, dims.query_dim, rng);
        let w_item: Vec<DenseMatrix> = dims
            .modality_dims
            .iter()
            .map(|&m| DenseMatrix::uniform_init(d, m, rng))
            .collect();
        let bias = use_bias.then(|| ProjectionBias {
            user: DenseVector::zeros(d),
            query: DenseVector::zeros(d),
            item: vec![DenseVector::zeros(d); n_mod],
        });
        let attention = matches!(mixer, MixerKind::Cross).then(|| AttentionParams {
            key: dims
                .modality_dims
                .iter()
                .map(|&m| DenseMatrix::uniform_init(d, m, rng))
                .collect(),
            query: DenseMatrix::uniform_init(d, dims.query_dim, rng),
        });
        let gates = matches!(mixer, MixerKind::Moe { .. }).then(|| GateParams {
            gate_item: dims
                .modality_dims
                .iter()
                .map(|&m| DenseMatrix::uniform_init(d, m, rng))
                .collect(),
            gate_query: DenseMatrix::uniform_init(d, dims.query_dim, rng),
            noise_item: dims
                .modality_dims
                .iter()
                .map(|&m| DenseMatrix::uniform_init(d, m, rng))
                .collect(),
            noise_query: DenseMatrix::uniform_init(d, dims.query_dim, rng),
        });
        Ok(Self { d, mixer, w_user, w_query, w_item, bias, attention, gates })
    }

    pub fn n_mod(&self) -> usize {
        self.w_item.len()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            user_dim: self.w_user.cols(),
            query_dim: self.w_query.cols(),
            modality_dims: self.w_item.iter().map(DenseMatrix::cols).collect(),
        }
    }
}

fn project(w: &DenseMatrix, bias: Option<&DenseVector>, x: &[f32]) -> Result<DenseVector> {
    let mut out = matvec(w, x)?;
    if let Some(b) = bias {
        for (o, &bv) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
            *o += bv;
        }
    }
    Ok(out)
}

pub fn project_user(p: &JamParams, raw_user: &[f32]) -> Result<DenseVector> {
    project(&p.w_user, p.bias.as_ref().map(|b| &b.user), raw_user)
}

pub fn project_query(p: &JamParams, raw_query: &[f32]) -> Result<DenseVector> {
    project(&p.w_query, p.bias.as_ref().map(|b| &b.query), raw_query)
}

pub fn project_item(p: &JamParams, modality: usize, raw_item: &[f32]) -> Result<DenseVector> {
    project(
        &p.w_item[modality],
        p.bias.as_ref().map(|b| &b.item[modality]),
        raw_item,
    )
}

/// Project all modalities of one item.
pub fn project_item_all(p: &JamParams, raw_item: &[&[f32]]) -> Result<ItemLatents> {
    raw_item
        .iter()
        .enumerate()
        .map(|(m, raw)| project_item(p, m, raw))
        .collect()
}

fn convex_combination(alpha: &DenseVector, items: &ItemLatents) -> DenseVector {
    let d = items[0].dim();
    let mut out = vec![0.0f32; d];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (m, t) in items.iter().enumerate() {
            acc += alpha[m] as f64 * t[i] as f64;
        }
        *o = acc as f32;
    }
    DenseVector::from_vec(out)
}

/// Uniform average of the modality latents.
pub fn mix_avg(items: &ItemLatents) -> (DenseVector, MixWeights) {
    let n = items.len();
    let alpha = DenseVector::from_vec(vec![1.0 / n as f32; n]);
    let t_hat = convex_combination(&alpha, items);
    (t_hat, MixWeights { alpha, gate_logits: None, kept: None })
}

/// Cross-attention logits over the raw inputs:
/// (key_m raw_item_m) . (query_proj raw_query) / sqrt(d).
pub fn cross_logits(p: &JamParams, raw_items: &[&[f32]], raw_query: &[f32]) -> Result<DenseVector> {
    let attn = p
        .attention
        .as_ref()
        .ok_or_else(|| JamError::Config("cross mixer without attention params".into()))?;
    let b = matvec(&attn.query, raw_query)?;
    let scale = 1.0 / (p.d as f64).sqrt();
    let mut logits = Vec::with_capacity(raw_items.len());
    for (m, raw) in raw_items.iter().enumerate() {
        let a = matvec(&attn.key[m], raw)?;
        logits.push((dot64(a.as_slice(), b.as_slice()) * scale) as f32);
    }
    Ok(DenseVector::from_vec(logits))
}

pub fn mix_cross(
    p: &JamParams,
    raw_items: &[&[f32]],
    raw_query: &[f32],
    items: &ItemLatents,
) -> Result<(DenseVector, MixWeights)> {
    let logits = cross_logits(p, raw_items, raw_query)?;
    let alpha = softmax(&logits)?;
    let t_hat = convex_combination(&alpha, items);
    Ok((t_hat, MixWeights { alpha, gate_logits: Some(logits), kept: None }))
}

/// Gate values before masking. With noise enabled and an rng supplied,
/// H_m = x_gate_m + eps_m * softplus(x_noise_m); otherwise H_m = x_gate_m.
pub fn moe_gate_values(
    p: &JamParams,
    raw_items: &[&[f32]],
    raw_query: &[f32],
    noise_rng: Option<&mut SeededRng>,
) -> Result<DenseVector> {
    let gates = p
        .gates
        .as_ref()
        .ok_or_else(|| JamError::Config("moe mixer without gate params".into()))?;
    let noise_enabled = matches!(p.mixer, MixerKind::Moe { noise_enabled: true, .. });
    let gq = matvec(&gates.gate_query, raw_query)?;
    let mut h = Vec::with_capacity(raw_items.len());
    for (m, raw) in raw_items.iter().enumerate() {
        let gi = matvec(&gates.gate_item[m], raw)?;
        h.push(dot64(gi.as_slice(), gq.as_slice()));
    }
    if noise_enabled {
        if let Some(rng) = noise_rng {
            let nq = matvec(&gates.noise_query, raw_query)?;
            for (m, raw) in raw_items.iter().enumerate() {
                let ni = matvec(&gates.noise_item[m], raw)?;
                let x_noise = dot64(ni.as_slice(), nq.as_slice());
                h[m] += rng.normal() * crate::linalg::softplus(x_noise);
            }
        }
    }
    Ok(DenseVector::from_vec(h.into_iter().map(|x| x as f32).collect()))
}

/// Indices of the k largest gate values, ties broken by ascending modality
/// index. Returned sorted ascending.
pub fn top_k_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = idx.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

pub fn mix_moe(
    p: &JamParams,
    raw_items: &[&[f32]],
    raw_query: &[f32],
    items: &ItemLatents,
    noise_rng: Option<&mut SeededRng>,
) -> Result<(DenseVector, MixWeights)> {
    let MixerKind::Moe { k, .. } = p.mixer else {
        return Err(JamError::Config("mix_moe called with a non-moe mixer".into()));
    };
    let n_mod = raw_items.len();
    if k < 1 || k > n_mod {
        return Err(JamError::Config(format!("moe k={k} must be in 1..={n_mod}")));
    }
    let h = moe_gate_values(p, raw_items, raw_query, noise_rng)?;
    let kept = top_k_indices(h.as_slice(), k);
    let mut masked = vec![f32::NEG_INFINITY; n_mod];
    for &m in &kept {
        masked[m] = h[m];
    }
    let alpha = softmax(&DenseVector::from_vec(masked))?;
    let t_hat = convex_combination(&alpha, items);
    Ok((t_hat, MixWeights { alpha, gate_logits: Some(h), kept: Some(kept) }))
}

/// Mix with the active strategy. MoE noise fires only when a noise rng is
/// passed (training); ranking and serving pass None.
pub fn mix(
    p: &JamParams,
    raw_items: &[&[f32]],
    raw_query: &[f32],
    items: &ItemLatents,
    noise_rng: Option<&mut SeededRng>,
) -> Result<(DenseVector, MixWeights)> {
    match p.mixer {
        MixerKind::Avg => Ok(mix_avg(items)),
        MixerKind::Cross => mix_cross(p, raw_items, raw_query, items),
        MixerKind::Moe { .. } => mix_moe(p, raw_items, raw_query, items, noise_rng),
    }
}

/// dot(u + q, t_hat), accumulated in f64.
pub fn score(u: &DenseVector, q: &DenseVector, t_hat: &DenseVector) -> Result<f32> {
    if u.dim() != q.dim() || u.dim() != t_hat.dim() {
        return Err(JamError::DimMismatch(format!(
            "score: dims {} / {} / {}",
            u.dim(),
            q.dim(),
            t_hat.dim()
        )));
    }
    let v = add(u.as_slice(), q.as_slice());
    Ok(dot64(v.as_slice(), t_hat.as_slice()) as f32)
}

/// Sort (index, score) pairs by score descending, ties by ascending index,
/// and truncate to k.
pub fn top_k_ranked(mut scored: Vec<(usize, f32)>, k: usize) -> Vec<(usize, f32)> {
    scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Catalog-wide scorer with query-independent work hoisted out: projected
/// modality latents for every item, plus attention keys / gate keys when
/// the mixer needs them. Layout is one flat n_items x d buffer per modality.
/// Owns a copy of the parameters so it can outlive the caller's borrow.
pub struct PreparedJam {
    params: JamParams,
    n_items: usize,
    /// [modality][item*d..]
    latents: Vec<Vec<f32>>,
    /// [modality][item*d..], attn key projections of raw items.
    attn_keys: Option<Vec<Vec<f32>>>,
    /// [modality][item*d..], gate projections of raw items.
    gate_keys: Option<Vec<Vec<f32>>>,
}

impl PreparedJam {
    pub fn new(params: &JamParams, catalog: &Catalog) -> Result<Self> {
        let n_items = catalog.n_items();
        if n_items == 0 {
            return Err(JamError::Data("empty catalog".into()));
        }
        let n_mod = params.n_mod();
        if n_mod != catalog.n_modalities() {
            return Err(JamError::DimMismatch(format!(
                "model has {n_mod} modalities, catalog has {}",
                catalog.n_modalities()
            )));
        }
        let project_all = |ws: &[DenseMatrix], biases: Option<&Vec<DenseVector>>| -> Result<Vec<Vec<f32>>> {
            let mut per_mod = Vec::with_capacity(n_mod);
            for m in 0..n_mod {
                let mut buf = Vec::with_capacity(n_items * params.d);
                for j in 0..n_items {
                    let v = project(
                        &ws[m],
                        biases.map(|b| &b[m]),
                        catalog.item_row(m, j),
                    )?;
                    buf.extend_from_slice(v.as_slice());
                }
                per_mod.push(buf);
            }
            Ok(per_mod)
        };
        let latents = project_all(&params.w_item, params.bias.as_ref().map(|b| &b.item))?;
        let attn_keys = match (&params.mixer, &params.attention) {
            (MixerKind::Cross, Some(attn)) => Some(project_all(&attn.key, None)?),
            (MixerKind::Cross, None) => {
                return Err(JamError::Config("cross mixer without attention params".into()))
            }
            _ => None,
        };
        let gate_keys = match (&params.mixer, &params.gates) {
            (MixerKind::Moe { .. }, Some(g)) => Some(project_all(&g.gate_item, None)?),
            (MixerKind::Moe { .. }, None) => {
                return Err(JamError::Config("moe mixer without gate params".into()))
            }
            _ => None,
        };
        Ok(Self { params: params.clone(), n_items, latents, attn_keys, gate_keys })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn params(&self) -> &JamParams {
        &self.params
    }

    fn latent(&self, m: usize, item: usize) -> &[f32] {
        let d = self.params.d;
        &self.latents[m][item * d..(item + 1) * d]
    }

    /// Scores for every catalog item. MoE runs with deterministic gates.
    pub fn score_all(&self, raw_user: &[f32], raw_query: &[f32]) -> Result<Vec<f32>> {
        let p = &self.params;
        let u = project_user(p, raw_user)?;
        let q = project_query(p, raw_query)?;
        let v = add(u.as_slice(), q.as_slice());
        let d = p.d;
        let n_mod = p.n_mod();
        let mut scores = Vec::with_capacity(self.n_items);
        match p.mixer {
            MixerKind::Avg => {
                for j in 0..self.n_items {
                    let mut acc = 0.0f64;
                    for m in 0..n_mod {
                        acc += dot64(v.as_slice(), self.latent(m, j));
                    }
                    scores.push((acc / n_mod as f64) as f32);
                }
            }
            MixerKind::Cross => {
                let attn = p.attention.as_ref().unwrap();
                let keys = self.attn_keys.as_ref().unwrap();
                let b = matvec(&attn.query, raw_query)?;
                let scale = 1.0 / (d as f64).sqrt();
                let mut logits = vec![0.0f32; n_mod];
                for j in 0..self.n_items {
                    for (m, l) in logits.iter_mut().enumerate() {
                        let key = &keys[m][j * d..(j + 1) * d];
                        *l = (dot64(key, b.as_slice()) * scale) as f32;
                    }
                    let alpha = softmax(&DenseVector::from_vec(logits.clone()))?;
                    let mut acc = 0.0f64;
                    for m in 0..n_mod {
                        acc += alpha[m] as f64 * dot64(v.as_slice(), self.latent(m, j));
                    }
                    scores.push(acc as f32);
                }
            }
            MixerKind::Moe { k, .. } => {
                let gates = p.gates.as_ref().unwrap();
                let gkeys = self.gate_keys.as_ref().unwrap();
                let gq = matvec(&gates.gate_query, raw_query)?;
                let mut h = vec![0.0f32; n_mod];
                for j in 0..self.n_items {
                    for (m, hv) in h.iter_mut().enumerate() {
                        let key = &gkeys[m][j * d..(j + 1) * d];
                        *hv = dot64(key, gq.as_slice()) as f32;
                    }
                    let kept = top_k_indices(&h, k);
                    let mut masked = vec![f32::NEG_INFINITY; n_mod];
                    for &m in &kept {
                        masked[m] = h[m];
                    }
                    let alpha = softmax(&DenseVector::from_vec(masked))?;
                    let mut acc = 0.0f64;
                    for &m in &kept {
                        acc += alpha[m] as f64 * dot64(v.as_slice(), self.latent(m, j));
                    }
                    scores.push(acc as f32);
                }
            }
        }
        Ok(scores)
    }

    pub fn rank(&self, raw_user: &[f32], raw_query: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
        let scores = self.score_all(raw_user, raw_query)?;
        Ok(top_k_ranked(scores.into_iter().enumerate().collect(), k))
    }
}

/// Score every catalog item and return the top-k, ties broken by ascending
/// item index. MoE gates run without noise here regardless of the flag.
pub fn rank_catalog(
    p: &JamParams,
    catalog: &Catalog,
    raw_user: &[f32],
    raw_query: &[f32],
    k: usize,
) -> Result<Vec<(usize, f32)>> {
    if k < 1 {
        return Err(JamError::Config("rank_catalog: k must be >= 1".into()));
    }
    PreparedJam::new(p, catalog)?.rank(raw_user, raw_query, k)
}
