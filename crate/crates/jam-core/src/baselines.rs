//! Comparison systems: random ranking, popularity, a two-tower model with
//! no query input, and a pairwise-contrastive retriever that treats the
//! query as an extra modality and ignores the user.

use crate::data::{Catalog, TripletDataset};
use crate::error::{JamError, Result};
use crate::linalg::{dot64, matvec, matvec64, DenseMatrix, DenseVector, SeededRng};
use crate::model::{top_k_ranked, ModelDims};

/// Uniform random permutation prefix over the catalog.
pub fn random_rank(rng: &mut SeededRng, n_items: usize, k: usize) -> Result<Vec<usize>> {
    if k > n_items {
        return Err(JamError::Config(format!("random_rank: k={k} > n_items={n_items}")));
    }
    let mut idx: Vec<usize> = (0..n_items).collect();
    // Partial Fisher-Yates: only the first k slots are needed.
    for i in 0..k {
        let j = i + rng.uniform_usize(n_items - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    Ok(idx)
}

/// Per-item play counts accumulated from train-split records. Each item in
/// a record's relevant set counts once per record.
#[derive(Debug, Clone)]
pub struct PopModel {
    counts: Vec<u64>,
}

impl PopModel {
    pub fn from_train(train: &TripletDataset, n_items: usize) -> Self {
        let mut counts = vec![0u64; n_items];
        for rec in &train.records {
            for &item in &rec.relevant_items {
                counts[item] += 1;
            }
        }
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Items sorted by count descending, ties by ascending index.
pub fn pop_rank(pm: &PopModel, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pm.counts.len()).collect();
    idx.sort_by(|&a, &b| pm.counts[b].cmp(&pm.counts[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Two affine layers with a ReLU between, for each tower. The item tower
/// consumes the concatenation of all modality embeddings; the user tower
/// consumes the raw user embedding. No query input anywhere.
#[derive(Debug, Clone)]
pub struct TwoTowerParams {
    pub d: usize,
    pub hidden: usize,
    pub user_w1: DenseMatrix,
    pub user_b1: DenseVector,
    pub user_w2: DenseMatrix,
    pub user_b2: DenseVector,
    pub item_w1: DenseMatrix,
    pub item_b1: DenseVector,
    pub item_w2: DenseMatrix,
    pub item_b2: DenseVector,
}

impl TwoTowerParams {
    pub fn init(dims: &ModelDims, d: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let item_in: usize = dims.modality_dims.iter().sum();
        Self {
            d,
            hidden,
            user_w1: DenseMatrix::uniform_init(hidden, dims.user_dim, rng),
            user_b1: DenseVector::zeros(hidden),
            user_w2: DenseMatrix::uniform_init(d, hidden, rng),
            user_b2: DenseVector::zeros(d),
            item_w1: DenseMatrix::uniform_init(hidden, item_in, rng),
            item_b1: DenseVector::zeros(hidden),
            item_w2: DenseMatrix::uniform_init(d, hidden, rng),
            item_b2: DenseVector::zeros(d),
        }
    }

    pub fn item_input_dim(&self) -> usize {
        self.item_w1.cols()
    }
}

fn affine(w: &DenseMatrix, b: &DenseVector, x: &[f32]) -> Result<DenseVector> {
    let mut out = matvec(w, x)?;
    for (o, &bv) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o += bv;
    }
    Ok(out)
}

fn tower(w1: &DenseMatrix, b1: &DenseVector, w2: &DenseMatrix, b2: &DenseVector, x: &[f32]) -> Result<DenseVector> {
    let mut h = affine(w1, b1, x)?;
    for v in h.as_mut_slice() {
        *v = v.max(0.0);
    }
    affine(w2, b2, h.as_slice())
}

pub fn twotower_user(p: &TwoTowerParams, raw_user: &[f32]) -> Result<DenseVector> {
    tower(&p.user_w1, &p.user_b1, &p.user_w2, &p.user_b2, raw_user)
}

pub fn twotower_item(p: &TwoTowerParams, concat_item: &[f32]) -> Result<DenseVector> {
    tower(&p.item_w1, &p.item_b1, &p.item_w2, &p.item_b2, concat_item)
}

pub fn twotower_score(p: &TwoTowerParams, raw_user: &[f32], concat_item: &[f32]) -> Result<f32> {
    let u = twotower_user(p, raw_user)?;
    let t = twotower_item(p, concat_item)?;
    Ok(dot64(u.as_slice(), t.as_slice()) as f32)
}

/// Concatenate all modality embeddings of one item, in modality order.
pub fn concat_item(catalog: &Catalog, item: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for m in 0..catalog.n_modalities() {
        out.extend_from_slice(catalog.item_row(m, item));
    }
    out
}

/// Per-modality projections plus a query projection into a shared space,
/// trained contrastively; the user is not modeled.
#[derive(Debug, Clone)]
pub struct TalkRecParams {
    pub d: usize,
    pub tau: f64,
    pub proj: Vec<DenseMatrix>,
    pub query_proj: DenseMatrix,
}

impl TalkRecParams {
    pub fn init(dims: &ModelDims, d: usize, tau: f64, rng: &mut SeededRng) -> Result<Self> {
        if tau <= 0.0 {
            return Err(JamError::Config("talkrec temperature must be > 0".into()));
        }
        Ok(Self {
            d,
            tau,
            proj: dims
                .modality_dims
                .iter()
                .map(|&m| DenseMatrix::uniform_init(d, m, rng))
                .collect(),
            query_proj: DenseMatrix::uniform_init(d, dims.query_dim, rng),
        })
    }

    pub fn n_mod(&self) -> usize {
        self.proj.len()
    }
}

pub fn talkrec_query_vec(p: &TalkRecParams, raw_query: &[f32]) -> Result<DenseVector> {
    matvec(&p.query_proj, raw_query)
}

/// Item vector at inference: mean over modalities of the projected raw
/// embeddings. The training objective does not pin an inference-time
/// aggregate; the mean keeps every modality in play.
pub fn talkrec_item_vec(p: &TalkRecParams, raw_item: &[&[f32]]) -> Result<DenseVector> {
    let d = p.d;
    let mut acc = vec![0.0f64; d];
    for (m, raw) in raw_item.iter().enumerate() {
        let z = matvec(&p.proj[m], raw)?;
        for (a, &v) in acc.iter_mut().zip(z.as_slice()) {
            *a += v as f64;
        }
    }
    let n = raw_item.len() as f64;
    Ok(DenseVector::from_vec(acc.into_iter().map(|a| (a / n) as f32).collect()))
}

/// dot(query projection, mean-of-modality projections) over the catalog,
/// top-k with the global tie rule.
pub fn talkrec_rank(
    p: &TalkRecParams,
    catalog: &Catalog,
    raw_query: &[f32],
    k: usize,
) -> Result<Vec<(usize, f32)>> {
    let q = talkrec_query_vec(p, raw_query)?;
    let mut scored = Vec::with_capacity(catalog.n_items());
    for j in 0..catalog.n_items() {
        let raws: Vec<&[f32]> = (0..catalog.n_modalities())
            .map(|m| catalog.item_row(m, j))
            .collect();
        let iv = talkrec_item_vec(p, &raws)?;
        scored.push((j, dot64(q.as_slice(), iv.as_slice()) as f32));
    }
    Ok(top_k_ranked(scored, k))
}

/// One training example for the contrastive objective: the raw query and
/// the raw modality embeddings of one positive item.
#[derive(Debug, Clone)]
pub struct TalkRecExample<'a> {
    pub raw_query: &'a [f32],
    pub raw_item: Vec<&'a [f32]>,
}

/// Project all views of a batch: one row set per "modality", where view
/// n_mod is the query. Kept in f64 so the loss and its gradients agree.
pub(crate) fn talkrec_views(
    p: &TalkRecParams,
    batch: &[TalkRecExample<'_>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_mod = p.n_mod();
    let mut views: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_mod + 1);
    for m in 0..n_mod {
        let mut rows = Vec::with_capacity(batch.len());
        for ex in batch {
            rows.push(matvec64(&p.proj[m], ex.raw_item[m])?);
        }
        views.push(rows);
    }
    let mut rows = Vec::with_capacity(batch.len());
    for ex in batch {
        rows.push(matvec64(&p.query_proj, ex.raw_query)?);
    }
    views.push(rows);
    Ok(views)
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Symmetric in-batch InfoNCE summed over all unordered pairs of views
/// (the item modalities plus the query), averaged over pairs, directions,
/// and batch.
pub fn talkrec_loss(p: &TalkRecParams, batch: &[TalkRecExample<'_>]) -> Result<f64> {
    if batch.len() < 2 {
        return Err(JamError::Config(
            "talkrec batch must have >= 2 examples for in-batch negatives".into(),
        ));
    }
    let views = talkrec_views(p, batch)?;
    let n_views = views.len();
    let b = batch.len();
    let mut total = 0.0f64;
    let mut n_pairs = 0usize;
    for v1 in 0..n_views {
        for v2 in (v1 + 1)..n_views {
            // logits[i][j] = dot(view1_i, view2_j) / tau
            let mut logits = vec![vec![0.0f64; b]; b];
            for i in 0..b {
                for j in 0..b {
                    let dot: f64 = views[v1][i].iter().zip(&views[v2][j]).map(|(a, c)| a * c).sum();
                    logits[i][j] = dot / p.tau;
                }
            }
            let mut pair_loss = 0.0f64;
            for i in 0..b {
                pair_loss += logsumexp(&logits[i]) - logits[i][i];
                let col: Vec<f64> = (0..b).map(|r| logits[r][i]).collect();
                pair_loss += logsumexp(&col) - logits[i][i];
            }
            total += pair_loss / (2.0 * b as f64);
            n_pairs += 1;
        }
    }
    Ok(total / n_pairs as f64)
}
