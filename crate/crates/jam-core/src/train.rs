//! Pairwise-ranking training: triplet expansion, uniform negative
//! sampling, the BPR objective, hand-derived gradients for every model
//! (validated against central finite differences), AdamW with decoupled
//! weight decay, cosine annealing, and early stopping on validation
//! NDCG@10.
//!
//! Parameters are stored in f32; every forward/backward here recomputes in
//! f64 so the analytic gradients can be checked tightly against a 64-bit
//! finite-difference oracle.

use serde::Serialize;

use crate::baselines::{concat_item, TalkRecParams, TwoTowerParams};
use crate::data::{Catalog, EmbeddingTable, TripletDataset, TripletRecord};
use crate::error::{JamError, Result};
use crate::eval::{evaluate, JamRanker, Ranker, TalkRecRanker, TwoTowerRanker};
use crate::linalg::{log_sigmoid, sigmoid, softplus, DenseMatrix, DenseVector, SeededRng};
use crate::model::{JamParams, MixerKind, ModelDims};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub n_negatives: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub d: usize,
    pub use_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 512,
            n_negatives: 4,
            lr_max: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-2,
            patience: 10,
            seed: 42,
            d: 128,
            use_bias: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.n_negatives < 1 || self.patience < 1 {
            return Err(JamError::Config("train counts must be >= 1".into()));
        }
        if self.d < 1 {
            return Err(JamError::Config("latent dim must be >= 1".into()));
        }
        if !(self.lr_max > self.lr_min && self.lr_min >= 0.0) {
            return Err(JamError::Config("need lr_max > lr_min >= 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(JamError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Immutable handles to the tables a training run reads from.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub catalog: &'a Catalog,
    pub users: &'a EmbeddingTable,
    pub queries: &'a EmbeddingTable,
}

/// One (record, relevant item) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpandedTriplet {
    pub record_idx: usize,
    pub user_idx: usize,
    pub query_idx: usize,
    pub pos_item: usize,
}

/// A training example with its sampled negatives.
#[derive(Debug, Clone)]
pub struct BatchTriplet {
    pub user_idx: usize,
    pub query_idx: usize,
    pub pos_item: usize,
    pub neg_items: Vec<usize>,
}

/// Deterministic expansion: record order, then ascending item index
/// (relevant sets are stored sorted).
pub fn expand_triplets(records: &[TripletRecord]) -> Vec<ExpandedTriplet> {
    let mut out = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        for &item in &rec.relevant_items {
            out.push(ExpandedTriplet {
                record_idx: ri,
                user_idx: rec.user_idx,
                query_idx: rec.query_idx,
                pos_item: item,
            });
        }
    }
    out
}

/// n distinct items drawn uniformly from the catalog minus `exclude`
/// (sorted). Switches to complement materialization when the request is a
/// large fraction of the candidates.
pub fn sample_negatives(
    rng: &mut SeededRng,
    n_items: usize,
    exclude: &[usize],
    n: usize,
) -> Result<Vec<usize>> {
    let avail = n_items - exclude.len();
    if n > avail {
        return Err(JamError::Config(format!(
            "cannot sample {n} negatives from {avail} candidates"
        )));
    }
    if n * 2 >= avail {
        let mut comp: Vec<usize> =
            (0..n_items).filter(|i| exclude.binary_search(i).is_err()).collect();
        for i in 0..n {
            let j = i + rng.uniform_usize(comp.len() - i);
            comp.swap(i, j);
        }
        comp.truncate(n);
        Ok(comp)
    } else {
        let mut out: Vec<usize> = Vec::with_capacity(n);
        while out.len() < n {
            let c = rng.uniform_usize(n_items);
            if exclude.binary_search(&c).is_err() && !out.contains(&c) {
                out.push(c);
            }
        }
        Ok(out)
    }
}

/// Per-triplet BPR loss: sum over negatives of -log sigmoid(pos - neg).
pub fn bpr_loss(pos_score: f64, neg_scores: &[f64]) -> f64 {
    neg_scores.iter().map(|&n| -log_sigmoid(pos_score - n)).sum()
}

/// Gradients for one flat tensor per trainable parameter, in the model's
/// canonical parameter order.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub tensors: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros(shapes: &[usize]) -> Self {
        Self { tensors: shapes.iter().map(|&n| vec![0.0; n]).collect() }
    }
}

// ---------------------------------------------------------------------------
// f64 primitives over f32 storage
// ---------------------------------------------------------------------------

fn mv64(w: &DenseMatrix, x: &[f32]) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(cols, x.len());
    let mut out = vec![0.0f64; rows];
    let data = w.data();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &data[i * cols..(i + 1) * cols];
        *o = row.iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum();
    }
    out
}

fn mv64_bias(w: &DenseMatrix, b: Option<&DenseVector>, x: &[f32]) -> Vec<f64> {
    let mut out = mv64(w, x);
    if let Some(b) = b {
        for (o, &bv) in out.iter_mut().zip(b.as_slice()) {
            *o += bv as f64;
        }
    }
    out
}

/// wᵀ·y, for backprop through an affine layer.
fn mv64_t(w: &DenseMatrix, y: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(rows, y.len());
    let mut out = vec![0.0f64; cols];
    let data = w.data();
    for i in 0..rows {
        let row = &data[i * cols..(i + 1) * cols];
        let yi = y[i];
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a as f64 * yi;
        }
    }
    out
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// grad[i, j] += scale * rows_vec[i] * cols_vec[j]
fn add_outer(grad: &mut [f64], cols: usize, scale: f64, rows_vec: &[f64], cols_vec: &[f32]) {
    for (i, &r) in rows_vec.iter().enumerate() {
        let s = scale * r;
        if s == 0.0 {
            continue;
        }
        let row = &mut grad[i * cols..(i + 1) * cols];
        for (g, &c) in row.iter_mut().zip(cols_vec) {
            *g += s * c as f64;
        }
    }
}

fn add_vec(grad: &mut [f64], scale: f64, v: &[f64]) {
    for (g, &x) in grad.iter_mut().zip(v) {
        *g += scale * x;
    }
}

fn softmax64(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn topk64(h: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..h.len()).collect();
    idx.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = idx.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

// ---------------------------------------------------------------------------
// Trainable models
// ---------------------------------------------------------------------------

/// Flat-tensor access plus batch gradients and a ranker for validation.
pub trait Trainable: Clone {
    fn model_name(&self) -> &'static str;
    fn param_names(&self) -> Vec<String>;
    fn param_slices(&self) -> Vec<&[f32]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f32]>;
    /// Smallest batch the loss is defined for.
    fn min_batch(&self) -> usize {
        1
    }
    /// Mean batch loss and its gradients. The rng feeds gate noise where
    /// the model uses it; other models leave it untouched.
    fn batch_grads(
        &self,
        data: &TrainData,
        batch: &[BatchTriplet],
        rng: &mut SeededRng,
    ) -> Result<(f64, GradientSet)>;
    fn make_ranker(&self, catalog: &Catalog) -> Result<Box<dyn Ranker>>;
}

/// Canonical parameter-tensor order for the translation model.
struct JamLayout {
    n_mod: usize,
    bias: bool,
    attention: bool,
    gates: bool,
}

impl JamLayout {
    fn of(p: &JamParams) -> Self {
        Self {
            n_mod: p.n_mod(),
            bias: p.bias.is_some(),
            attention: p.attention.is_some(),
            gates: p.gates.is_some(),
        }
    }

    fn w_user(&self) -> usize {
        0
    }

    fn w_query(&self) -> usize {
        1
    }

    fn w_item(&self, m: usize) -> usize {
        2 + m
    }

    fn bias_base(&self) -> usize {
        2 + self.n_mod
    }

    fn b_user(&self) -> usize {
        self.bias_base()
    }

    fn b_query(&self) -> usize {
        self.bias_base() + 1
    }

    fn b_item(&self, m: usize) -> usize {
        self.bias_base() + 2 + m
    }

    fn attn_base(&self) -> usize {
        self.bias_base() + if self.bias { 2 + self.n_mod } else { 0 }
    }

    fn attn_key(&self, m: usize) -> usize {
        self.attn_base() + m
    }

    fn attn_query(&self) -> usize {
        self.attn_base() + self.n_mod
    }

    fn gate_base(&self) -> usize {
        self.attn_base() + if self.attention { self.n_mod + 1 } else { 0 }
    }

    fn gate_item(&self, m: usize) -> usize {
        self.gate_base() + m
    }

    fn gate_query(&self) -> usize {
        self.gate_base() + self.n_mod
    }

    fn noise_item(&self, m: usize) -> usize {
        self.gate_base() + self.n_mod + 1 + m
    }

    fn noise_query(&self) -> usize {
        self.gate_base() + 2 * self.n_mod + 1
    }
}

impl Trainable for JamParams {
    fn model_name(&self) -> &'static str {
        "jam"
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["w_user".to_string(), "w_query".to_string()];
        let n = self.n_mod();
        names.extend((0..n).map(|m| format!("w_item.{m}")));
        if self.bias.is_some() {
            names.push("b_user".into());
            names.push("b_query".into());
            names.extend((0..n).map(|m| format!("b_item.{m}")));
        }
        if self.attention.is_some() {
            names.extend((0..n).map(|m| format!("attn_key.{m}")));
            names.push("attn_query".into());
        }
        if self.gates.is_some() {
            names.extend((0..n).map(|m| format!("gate_item.{m}")));
            names.push("gate_query".into());
            names.extend((0..n).map(|m| format!("noise_item.{m}")));
            names.push("noise_query".into());
        }
        names
    }

    fn param_slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![self.w_user.data(), self.w_query.data()];
        out.extend(self.w_item.iter().map(DenseMatrix::data));
        if let Some(b) = &self.bias {
            out.push(b.user.as_slice());
            out.push(b.query.as_slice());
            out.extend(b.item.iter().map(DenseVector::as_slice));
        }
        if let Some(a) = &self.attention {
            out.extend(a.key.iter().map(DenseMatrix::data));
            out.push(a.query.data());
        }
        if let Some(g) = &self.gates {
            out.extend(g.gate_item.iter().map(DenseMatrix::data));
            out.push(g.gate_query.data());
            out.extend(g.noise_item.iter().map(DenseMatrix::data));
            out.push(g.noise_query.data());
        }
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![self.w_user.data_mut(), self.w_query.data_mut()];
        out.extend(self.w_item.iter_mut().map(DenseMatrix::data_mut));
        if let Some(b) = &mut self.bias {
            out.push(b.user.as_mut_slice());
            out.push(b.query.as_mut_slice());
            out.extend(b.item.iter_mut().map(DenseVector::as_mut_slice));
        }
        if let Some(a) = &mut self.attention {
            out.extend(a.key.iter_mut().map(DenseMatrix::data_mut));
            out.push(a.query.data_mut());
        }
        if let Some(g) = &mut self.gates {
            out.extend(g.gate_item.iter_mut().map(DenseMatrix::data_mut));
            out.push(g.gate_query.data_mut());
            out.extend(g.noise_item.iter_mut().map(DenseMatrix::data_mut));
            out.push(g.noise_query.data_mut());
        }
        out
    }

    fn batch_grads(
        &self,
        data: &TrainData,
        batch: &[BatchTriplet],
        rng: &mut SeededRng,
    ) -> Result<(f64, GradientSet)> {
        jam_batch_grads(self, data, batch, rng)
    }

    fn make_ranker(&self, catalog: &Catalog) -> Result<Box<dyn Ranker>> {
        Ok(Box::new(JamRanker::new(self, catalog)?))
    }
}

/// Forward cache for one scored item.
struct ItemFwd {
    item: usize,
    /// Projected latents per modality.
    t: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    t_hat: Vec<f64>,
    score: f64,
    /// Cross: key projections of the raw modality embeddings.
    cross_a: Option<Vec<Vec<f64>>>,
    moe: Option<MoeFwd>,
}

struct MoeFwd {
    kept: Vec<usize>,
    /// Gate projections of the raw modality embeddings.
    c: Vec<Vec<f64>>,
    x_noise: Vec<f64>,
    eps: Vec<f64>,
    /// Noise projections of the raw modality embeddings.
    f: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn jam_forward_item(
    p: &JamParams,
    catalog: &Catalog,
    item: usize,
    v: &[f64],
    b_vec: Option<&[f64]>,
    e_vec: Option<&[f64]>,
    hq_vec: Option<&[f64]>,
    rng: &mut SeededRng,
) -> Result<ItemFwd> {
    let n_mod = p.n_mod();
    let d = p.d;
    let mut t = Vec::with_capacity(n_mod);
    for m in 0..n_mod {
        t.push(mv64_bias(
            &p.w_item[m],
            p.bias.as_ref().map(|b| &b.item[m]),
            catalog.item_row(m, item),
        ));
    }
    let mut cross_a = None;
    let mut moe = None;
    let alpha: Vec<f64> = match p.mixer {
        MixerKind::Avg => vec![1.0 / n_mod as f64; n_mod],
        MixerKind::Cross => {
            let attn = p.attention.as_ref().unwrap();
            let b = b_vec.expect("cross mixer requires the projected query");
            let scale = 1.0 / (d as f64).sqrt();
            let mut a = Vec::with_capacity(n_mod);
            let mut logits = Vec::with_capacity(n_mod);
            for m in 0..n_mod {
                let am = mv64(&attn.key[m], catalog.item_row(m, item));
                logits.push(dotf(&am, b) * scale);
                a.push(am);
            }
            cross_a = Some(a);
            softmax64(&logits)
        }
        MixerKind::Moe { k, noise_enabled } => {
            let gates = p.gates.as_ref().unwrap();
            if k < 1 || k > n_mod {
                return Err(JamError::Config(format!("moe k={k} must be in 1..={n_mod}")));
            }
            let e = e_vec.expect("moe mixer requires the projected gate query");
            let mut c = Vec::with_capacity(n_mod);
            let mut h = Vec::with_capacity(n_mod);
            for m in 0..n_mod {
                let cm = mv64(&gates.gate_item[m], catalog.item_row(m, item));
                h.push(dotf(&cm, e));
                c.push(cm);
            }
            let mut x_noise = vec![0.0f64; n_mod];
            let mut eps = vec![0.0f64; n_mod];
            let mut f = Vec::with_capacity(n_mod);
            if noise_enabled {
                let hq = hq_vec.expect("noisy gate requires the projected noise query");
                for (m, h_m) in h.iter_mut().enumerate() {
                    let fm = mv64(&gates.noise_item[m], catalog.item_row(m, item));
                    x_noise[m] = dotf(&fm, hq);
                    eps[m] = rng.normal();
                    *h_m += eps[m] * softplus(x_noise[m]);
                    f.push(fm);
                }
            }
            let kept = topk64(&h, k);
            let kept_vals: Vec<f64> = kept.iter().map(|&m| h[m]).collect();
            let sm = softmax64(&kept_vals);
            let mut alpha = vec![0.0f64; n_mod];
            for (i, &m) in kept.iter().enumerate() {
                alpha[m] = sm[i];
            }
            moe = Some(MoeFwd { kept, c, x_noise, eps, f });
            alpha
        }
    };
    let mut t_hat = vec![0.0f64; d];
    for m in 0..n_mod {
        if alpha[m] != 0.0 {
            add_vec(&mut t_hat, alpha[m], &t[m]);
        }
    }
    let score = dotf(v, &t_hat);
    Ok(ItemFwd { item, t, alpha, t_hat, score, cross_a, moe })
}

/// Mean BPR loss of the batch and exact gradients. The MoE top-k mask is
/// fixed from this forward pass; gate noise is treated as data.
pub fn jam_batch_grads(
    p: &JamParams,
    data: &TrainData,
    batch: &[BatchTriplet],
    rng: &mut SeededRng,
) -> Result<(f64, GradientSet)> {
    let layout = JamLayout::of(p);
    let shapes: Vec<usize> = p.param_slices().iter().map(|s| s.len()).collect();
    let mut g = GradientSet::zeros(&shapes);
    let n_mod = p.n_mod();
    let d = p.d;
    let inv_b = 1.0 / batch.len() as f64;
    let scale_d = 1.0 / (d as f64).sqrt();
    let noise_on = matches!(p.mixer, MixerKind::Moe { noise_enabled: true, .. });
    let mut total_loss = 0.0f64;

    for trip in batch {
        let ru = data.users.row(trip.user_idx);
        let rq = data.queries.row(trip.query_idx);
        let u = mv64_bias(&p.w_user, p.bias.as_ref().map(|b| &b.user), ru);
        let q = mv64_bias(&p.w_query, p.bias.as_ref().map(|b| &b.query), rq);
        let v: Vec<f64> = u.iter().zip(&q).map(|(a, b)| a + b).collect();

        let b_vec = match (&p.mixer, &p.attention) {
            (MixerKind::Cross, Some(attn)) => Some(mv64(&attn.query, rq)),
            _ => None,
        };
        let (e_vec, hq_vec) = match (&p.mixer, &p.gates) {
            (MixerKind::Moe { .. }, Some(gates)) => (
                Some(mv64(&gates.gate_query, rq)),
                noise_on.then(|| mv64(&gates.noise_query, rq)),
            ),
            _ => (None, None),
        };

        let mut fwd = Vec::with_capacity(1 + trip.neg_items.len());
        fwd.push(jam_forward_item(
            p, data.catalog, trip.pos_item, &v,
            b_vec.as_deref(), e_vec.as_deref(), hq_vec.as_deref(), rng,
        )?);
        for &neg in &trip.neg_items {
            fwd.push(jam_forward_item(
                p, data.catalog, neg, &v,
                b_vec.as_deref(), e_vec.as_deref(), hq_vec.as_deref(), rng,
            )?);
        }

        let pos_score = fwd[0].score;
        let mut gscore = vec![0.0f64; fwd.len()];
        for j in 1..fwd.len() {
            let margin = pos_score - fwd[j].score;
            total_loss += -log_sigmoid(margin);
            let w = sigmoid(-margin);
            gscore[0] -= w;
            gscore[j] += w;
        }

        let mut gv = vec![0.0f64; d];
        // Accumulators for the query-side mixer projections.
        let mut db_acc = vec![0.0f64; d];
        let mut de_acc = vec![0.0f64; d];
        let mut dhq_acc = vec![0.0f64; d];

        for (j, item) in fwd.iter().enumerate() {
            let gs = gscore[j] * inv_b;
            add_vec(&mut gv, gs, &item.t_hat);
            for m in 0..n_mod {
                let am = item.alpha[m];
                if am != 0.0 {
                    let raw = data.catalog.item_row(m, item.item);
                    let scaled: Vec<f64> = v.iter().map(|&x| gs * am * x).collect();
                    add_outer(
                        &mut g.tensors[layout.w_item(m)],
                        p.w_item[m].cols(),
                        1.0,
                        &scaled,
                        raw,
                    );
                    if layout.bias {
                        add_vec(&mut g.tensors[layout.b_item(m)], 1.0, &scaled);
                    }
                }
            }
            match p.mixer {
                MixerKind::Avg => {}
                MixerKind::Cross => {
                    let a = item.cross_a.as_ref().unwrap();
                    let b = b_vec.as_deref().unwrap();
                    let galpha: Vec<f64> =
                        (0..n_mod).map(|m| gs * dotf(&v, &item.t[m])).collect();
                    let inner: f64 =
                        (0..n_mod).map(|m| item.alpha[m] * galpha[m]).sum();
                    for m in 0..n_mod {
                        let gl = item.alpha[m] * (galpha[m] - inner) * scale_d;
                        if gl == 0.0 {
                            continue;
                        }
                        let raw = data.catalog.item_row(m, item.item);
                        add_outer(
                            &mut g.tensors[layout.attn_key(m)],
                            p.attention.as_ref().unwrap().key[m].cols(),
                            gl,
                            b,
                            raw,
                        );
                        add_vec(&mut db_acc, gl, &a[m]);
                    }
                }
                MixerKind::Moe { .. } => {
                    let moe = item.moe.as_ref().unwrap();
                    let e = e_vec.as_deref().unwrap();
                    let galpha: Vec<f64> = moe
                        .kept
                        .iter()
                        .map(|&m| gs * dotf(&v, &item.t[m]))
                        .collect();
                    let inner: f64 = moe
                        .kept
                        .iter()
                        .zip(&galpha)
                        .map(|(&m, &ga)| item.alpha[m] * ga)
                        .sum();
                    for (i, &m) in moe.kept.iter().enumerate() {
                        let gh = item.alpha[m] * (galpha[i] - inner);
                        if gh == 0.0 {
                            continue;
                        }
                        let raw = data.catalog.item_row(m, item.item);
                        add_outer(
                            &mut g.tensors[layout.gate_item(m)],
                            p.gates.as_ref().unwrap().gate_item[m].cols(),
                            gh,
                            e,
                            raw,
                        );
                        add_vec(&mut de_acc, gh, &moe.c[m]);
                        if noise_on {
                            let gxn = gh * moe.eps[m] * sigmoid(moe.x_noise[m]);
                            let hq = hq_vec.as_deref().unwrap();
                            add_outer(
                                &mut g.tensors[layout.noise_item(m)],
                                p.gates.as_ref().unwrap().noise_item[m].cols(),
                                gxn,
                                hq,
                                raw,
                            );
                            add_vec(&mut dhq_acc, gxn, &moe.f[m]);
                        }
                    }
                }
            }
        }

        add_outer(&mut g.tensors[layout.w_user()], p.w_user.cols(), 1.0, &gv, ru);
        add_outer(&mut g.tensors[layout.w_query()], p.w_query.cols(), 1.0, &gv, rq);
        if layout.bias {
            add_vec(&mut g.tensors[layout.b_user()], 1.0, &gv);
            add_vec(&mut g.tensors[layout.b_query()], 1.0, &gv);
        }
        if layout.attention {
            add_outer(
                &mut g.tensors[layout.attn_query()],
                p.attention.as_ref().unwrap().query.cols(),
                1.0,
                &db_acc,
                rq,
            );
        }
        if layout.gates {
            add_outer(
                &mut g.tensors[layout.gate_query()],
                p.gates.as_ref().unwrap().gate_query.cols(),
                1.0,
                &de_acc,
                rq,
            );
            if noise_on {
                add_outer(
                    &mut g.tensors[layout.noise_query()],
                    p.gates.as_ref().unwrap().noise_query.cols(),
                    1.0,
                    &dhq_acc,
                    rq,
                );
            }
        }
    }

    Ok((total_loss * inv_b, g))
}

// ---------------------------------------------------------------------------
// Two-tower gradients
// ---------------------------------------------------------------------------

impl Trainable for TwoTowerParams {
    fn model_name(&self) -> &'static str {
        "twotower"
    }

    fn param_names(&self) -> Vec<String> {
        ["user_w1", "user_b1", "user_w2", "user_b2", "item_w1", "item_b1", "item_w2", "item_b2"]
            .iter()
            .map(|s| (*s).to_string())
            .collect()
    }

    fn param_slices(&self) -> Vec<&[f32]> {
        vec![
            self.user_w1.data(),
            self.user_b1.as_slice(),
            self.user_w2.data(),
            self.user_b2.as_slice(),
            self.item_w1.data(),
            self.item_b1.as_slice(),
            self.item_w2.data(),
            self.item_b2.as_slice(),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.user_w1.data_mut(),
            self.user_b1.as_mut_slice(),
            self.user_w2.data_mut(),
            self.user_b2.as_mut_slice(),
            self.item_w1.data_mut(),
            self.item_b1.as_mut_slice(),
            self.item_w2.data_mut(),
            self.item_b2.as_mut_slice(),
        ]
    }

    fn batch_grads(
        &self,
        data: &TrainData,
        batch: &[BatchTriplet],
        _rng: &mut SeededRng,
    ) -> Result<(f64, GradientSet)> {
        twotower_batch_grads(self, data, batch)
    }

    fn make_ranker(&self, catalog: &Catalog) -> Result<Box<dyn Ranker>> {
        Ok(Box::new(TwoTowerRanker::new(self, catalog)?))
    }
}

struct TowerFwd {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

fn tower_fwd(w1: &DenseMatrix, b1: &DenseVector, w2: &DenseMatrix, b2: &DenseVector, x: &[f32]) -> TowerFwd {
    let pre = mv64_bias(w1, Some(b1), x);
    let hidden: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
    let mut out = vec![0.0f64; w2.rows()];
    let cols = w2.cols();
    let data = w2.data();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &data[i * cols..(i + 1) * cols];
        *o = row.iter().zip(&hidden).map(|(&a, &h)| a as f64 * h).sum::<f64>()
            + b2.as_slice()[i] as f64;
    }
    TowerFwd { pre, hidden, out }
}

/// grad[i, j] += scale * rows_vec[i] * cols_vec[j], f64 column vector.
fn add_outer64(grad: &mut [f64], cols: usize, scale: f64, rows_vec: &[f64], cols_vec: &[f64]) {
    for (i, &r) in rows_vec.iter().enumerate() {
        let s = scale * r;
        if s == 0.0 {
            continue;
        }
        let row = &mut grad[i * cols..(i + 1) * cols];
        for (g, &c) in row.iter_mut().zip(cols_vec) {
            *g += s * c;
        }
    }
}

/// Backprop one tower into grads[0..4] = (w1, b1, w2, b2).
fn tower_backward(
    fwd: &TowerFwd,
    w2: &DenseMatrix,
    x: &[f32],
    d_out: &[f64],
    grads: &mut [Vec<f64>],
    w1_cols: usize,
) {
    add_outer64(&mut grads[2], w2.cols(), 1.0, d_out, &fwd.hidden);
    add_vec(&mut grads[3], 1.0, d_out);
    let mut d_hidden = mv64_t(w2, d_out);
    for (dh, &pre) in d_hidden.iter_mut().zip(&fwd.pre) {
        if pre <= 0.0 {
            *dh = 0.0;
        }
    }
    add_outer(&mut grads[0], w1_cols, 1.0, &d_hidden, x);
    add_vec(&mut grads[1], 1.0, &d_hidden);
}

pub fn twotower_batch_grads(
    p: &TwoTowerParams,
    data: &TrainData,
    batch: &[BatchTriplet],
) -> Result<(f64, GradientSet)> {
    let shapes: Vec<usize> = p.param_slices().iter().map(|s| s.len()).collect();
    let mut g = GradientSet::zeros(&shapes);
    let inv_b = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0f64;

    for trip in batch {
        let ru = data.users.row(trip.user_idx);
        let user_fwd = tower_fwd(&p.user_w1, &p.user_b1, &p.user_w2, &p.user_b2, ru);

        let items: Vec<usize> =
            std::iter::once(trip.pos_item).chain(trip.neg_items.iter().copied()).collect();
        let mut item_inputs = Vec::with_capacity(items.len());
        let mut item_fwds = Vec::with_capacity(items.len());
        let mut scores = Vec::with_capacity(items.len());
        for &item in &items {
            let x = concat_item(data.catalog, item);
            let f = tower_fwd(&p.item_w1, &p.item_b1, &p.item_w2, &p.item_b2, &x);
            scores.push(dotf(&user_fwd.out, &f.out));
            item_inputs.push(x);
            item_fwds.push(f);
        }

        let mut gscore = vec![0.0f64; items.len()];
        for j in 1..items.len() {
            let margin = scores[0] - scores[j];
            total_loss += -log_sigmoid(margin);
            let w = sigmoid(-margin);
            gscore[0] -= w;
            gscore[j] += w;
        }

        let mut d_user_out = vec![0.0f64; p.d];
        for j in 0..items.len() {
            let gs = gscore[j] * inv_b;
            add_vec(&mut d_user_out, gs, &item_fwds[j].out);
            let d_item_out: Vec<f64> = user_fwd.out.iter().map(|&x| gs * x).collect();
            // Tensors 4..8 are (item_w1, item_b1, item_w2, item_b2).
            tower_backward(
                &item_fwds[j],
                &p.item_w2,
                &item_inputs[j],
                &d_item_out,
                &mut g.tensors[4..8],
                p.item_w1.cols(),
            );
        }
        // Tensors 0..4 are (user_w1, user_b1, user_w2, user_b2).
        tower_backward(
            &user_fwd,
            &p.user_w2,
            ru,
            &d_user_out,
            &mut g.tensors[0..4],
            p.user_w1.cols(),
        );
    }
    Ok((total_loss * inv_b, g))
}

// ---------------------------------------------------------------------------
// Pairwise-contrastive gradients
// ---------------------------------------------------------------------------

impl Trainable for TalkRecParams {
    fn model_name(&self) -> &'static str {
        "talkrec"
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.n_mod()).map(|m| format!("proj.{m}")).collect();
        names.push("query_proj".into());
        names
    }

    fn param_slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = self.proj.iter().map(DenseMatrix::data).collect();
        out.push(self.query_proj.data());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = self.proj.iter_mut().map(DenseMatrix::data_mut).collect();
        out.push(self.query_proj.data_mut());
        out
    }

    fn min_batch(&self) -> usize {
        2
    }

    fn batch_grads(
        &self,
        data: &TrainData,
        batch: &[BatchTriplet],
        _rng: &mut SeededRng,
    ) -> Result<(f64, GradientSet)> {
        talkrec_batch_grads(self, data, batch)
    }

    fn make_ranker(&self, catalog: &Catalog) -> Result<Box<dyn Ranker>> {
        Ok(Box::new(TalkRecRanker::new(self, catalog)?))
    }
}

/// Symmetric in-batch InfoNCE over all unordered view pairs (modalities
/// plus query), with exact gradients. Positives are the batch diagonal.
pub fn talkrec_batch_grads(
    p: &TalkRecParams,
    data: &TrainData,
    batch: &[BatchTriplet],
) -> Result<(f64, GradientSet)> {
    let b = batch.len();
    if b < 2 {
        return Err(JamError::Config(
            "talkrec batch must have >= 2 examples for in-batch negatives".into(),
        ));
    }
    let n_mod = p.n_mod();
    let n_views = n_mod + 1;
    let d = p.d;
    let shapes: Vec<usize> = p.param_slices().iter().map(|s| s.len()).collect();
    let mut g = GradientSet::zeros(&shapes);

    // Raw inputs per view.
    let raw_of = |view: usize, ex: usize| -> &[f32] {
        if view < n_mod {
            data.catalog.item_row(view, batch[ex].pos_item)
        } else {
            data.queries.row(batch[ex].query_idx)
        }
    };
    // Projected views, f64.
    let mut z: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_views);
    for view in 0..n_views {
        let w = if view < n_mod { &p.proj[view] } else { &p.query_proj };
        z.push((0..b).map(|ex| mv64(w, raw_of(view, ex))).collect());
    }
    let mut dz: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; d]; b]; n_views];

    let n_pairs = (n_views * (n_views - 1) / 2) as f64;
    let norm = 1.0 / (n_pairs * 2.0 * b as f64);
    let mut total = 0.0f64;

    for v1 in 0..n_views {
        for v2 in (v1 + 1)..n_views {
            let mut logits = vec![vec![0.0f64; b]; b];
            for i in 0..b {
                for j in 0..b {
                    logits[i][j] = dotf(&z[v1][i], &z[v2][j]) / p.tau;
                }
            }
            // Row direction: CE over logits[i][.] with target i.
            // Column direction: CE over logits[.][j] with target j.
            let mut dm = vec![vec![0.0f64; b]; b];
            for i in 0..b {
                let row_sm = softmax64(&logits[i]);
                let mx = logits[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + logits[i].iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
                total += (lse - logits[i][i]) * norm;
                for j in 0..b {
                    dm[i][j] += row_sm[j];
                }
                dm[i][i] -= 1.0;
            }
            for j in 0..b {
                let col: Vec<f64> = (0..b).map(|r| logits[r][j]).collect();
                let col_sm = softmax64(&col);
                let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + col.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
                total += (lse - logits[j][j]) * norm;
                for r in 0..b {
                    dm[r][j] += col_sm[r];
                }
                dm[j][j] -= 1.0;
            }
            for i in 0..b {
                for j in 0..b {
                    let w = dm[i][j] * norm / p.tau;
                    if w == 0.0 {
                        continue;
                    }
                    add_vec(&mut dz[v1][i], w, &z[v2][j]);
                    add_vec(&mut dz[v2][j], w, &z[v1][i]);
                }
            }
        }
    }

    for view in 0..n_views {
        let (idx, cols) = if view < n_mod {
            (view, p.proj[view].cols())
        } else {
            (n_mod, p.query_proj.cols())
        };
        for ex in 0..b {
            add_outer(&mut g.tensors[idx], cols, 1.0, &dz[view][ex], raw_of(view, ex));
        }
    }

    // `total` accumulated per-term already normalized by pairs and batch.
    Ok((total, g))
}

// ---------------------------------------------------------------------------
// AdamW and the schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamWState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update: decoupled weight decay applied to the incoming
/// parameter value, then the bias-corrected adaptive step.
pub fn adamw_step(
    params: &mut [&mut [f32]],
    grads: &GradientSet,
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) {
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (ti, slot) in params.iter_mut().enumerate() {
        let gt = &grads.tensors[ti];
        let mt = &mut state.m[ti];
        let vt = &mut state.v[ti];
        for j in 0..slot.len() {
            let gj = gt[j];
            let mut pj = slot[j] as f64;
            pj -= lr * weight_decay * pj;
            mt[j] = ADAM_BETA1 * mt[j] + (1.0 - ADAM_BETA1) * gj;
            vt[j] = ADAM_BETA2 * vt[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = mt[j] / bc1;
            let v_hat = vt[j] / bc2;
            pj -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            slot[j] = pj as f32;
        }
    }
}

/// Cosine annealing without restarts. Endpoints are exact by construction.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t == 0 || total == 0 {
        return lr_max;
    }
    if t >= total {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_ndcg10: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

fn batch_ranges(n: usize, batch_size: usize, min_batch: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    if let [.., prev, last] = out.as_mut_slice() {
        if last.1 - last.0 < min_batch {
            prev.1 = last.1;
            out.pop();
        }
    }
    if let Some(&(s, e)) = out.first() {
        if e - s < min_batch {
            return Err(JamError::Config(format!(
                "training set too small: {} triplets, model needs batches of >= {min_batch}",
                e - s
            )));
        }
    }
    Ok(out)
}

/// Run the full protocol on an already-initialized model, drawing shuffle
/// order, negatives, and gate noise from `rng`. Returns the history; the
/// model is left at the best-validation epoch.
pub fn train_model<M: Trainable>(
    model: &mut M,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
    train_ds: &TripletDataset,
    val_ds: &TripletDataset,
    data: &TrainData,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if val_ds.is_empty() {
        return Err(JamError::Data("train: empty validation split".into()));
    }
    let expanded = expand_triplets(&train_ds.records);
    if expanded.is_empty() {
        return Err(JamError::Data("train: empty training split".into()));
    }
    let n_items = data.catalog.n_items();
    let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut opt = AdamWState::new(&shapes);

    let mut history = Vec::new();
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot: Option<M> = None;
    let mut stale = 0usize;

    let mut order: Vec<usize> = (0..expanded.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for (s, e) in batch_ranges(order.len(), cfg.batch_size, model.min_batch())? {
            let mut batch = Vec::with_capacity(e - s);
            for &oi in &order[s..e] {
                let t = &expanded[oi];
                let exclude = &train_ds.records[t.record_idx].relevant_items;
                let negs = sample_negatives(rng, n_items, exclude, cfg.n_negatives)?;
                batch.push(BatchTriplet {
                    user_idx: t.user_idx,
                    query_idx: t.query_idx,
                    pos_item: t.pos_item,
                    neg_items: negs,
                });
            }
            let (loss, grads) = model.batch_grads(data, &batch, rng)?;
            epoch_loss += loss * batch.len() as f64;
            let mut slots = model.param_slices_mut();
            adamw_step(&mut slots, &grads, &mut opt, lr, cfg.weight_decay);
        }
        epoch_loss /= expanded.len() as f64;

        let val_ndcg10 = {
            let ranker = model.make_ranker(data.catalog)?;
            evaluate(&*ranker, val_ds, data.users, data.queries, &[10], false)?.ndcg[0]
        };
        history.push(EpochStats { epoch, loss: epoch_loss, val_ndcg10, lr });

        if val_ndcg10 > best_ndcg {
            best_ndcg = val_ndcg10;
            best_epoch = epoch;
            best_snapshot = Some(model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(best) = best_snapshot {
        *model = best;
    }
    Ok(TrainHistory { epochs: history, best_epoch })
}

/// Initialize and train the translation model with the full protocol.
pub fn train_jam(
    cfg: &TrainConfig,
    mixer: MixerKind,
    train_ds: &TripletDataset,
    val_ds: &TripletDataset,
    data: &TrainData,
) -> Result<(JamParams, TrainHistory)> {
    let mut rng = SeededRng::new(cfg.seed);
    let dims = ModelDims::from_tables(data.users, data.queries, data.catalog);
    let mut params = JamParams::init(&dims, cfg.d, mixer, cfg.use_bias, &mut rng)?;
    let history = train_model(&mut params, cfg, &mut rng, train_ds, val_ds, data)?;
    Ok((params, history))
}

pub fn train_twotower(
    cfg: &TrainConfig,
    hidden: usize,
    train_ds: &TripletDataset,
    val_ds: &TripletDataset,
    data: &TrainData,
) -> Result<(TwoTowerParams, TrainHistory)> {
    let mut rng = SeededRng::new(cfg.seed);
    let dims = ModelDims::from_tables(data.users, data.queries, data.catalog);
    let mut params = TwoTowerParams::init(&dims, cfg.d, hidden, &mut rng);
    let history = train_model(&mut params, cfg, &mut rng, train_ds, val_ds, data)?;
    Ok((params, history))
}

pub fn train_talkrec(
    cfg: &TrainConfig,
    tau: f64,
    train_ds: &TripletDataset,
    val_ds: &TripletDataset,
    data: &TrainData,
) -> Result<(TalkRecParams, TrainHistory)> {
    let mut rng = SeededRng::new(cfg.seed);
    let dims = ModelDims::from_tables(data.users, data.queries, data.catalog);
    let mut params = TalkRecParams::init(&dims, cfg.d, tau, &mut rng)?;
    let history = train_model(&mut params, cfg, &mut rng, train_ds, val_ds, data)?;
    Ok((params, history))
}

// ---------------------------------------------------------------------------
// Hyperparameter grid search
// ---------------------------------------------------------------------------

/// Default search grids for the latent dimension and peak learning rate.
pub const GRID_D: [usize; 3] = [64, 128, 256];
pub const GRID_LR: [f64; 3] = [1e-4, 3e-4, 1e-3];

#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub d: usize,
    pub lr_max: f64,
    pub best_val_ndcg10: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridReport {
    pub points: Vec<GridPoint>,
    /// Index into `points` of the selected combination (best validation
    /// NDCG@10, first on ties).
    pub chosen: usize,
}

/// Train one model per (d, lr_max) combination and keep the one with the
/// best validation NDCG@10. `train_fn` runs the full protocol for one
/// configuration.
pub fn grid_search<M, F>(
    base: &TrainConfig,
    grid_d: &[usize],
    grid_lr: &[f64],
    mut train_fn: F,
) -> Result<(M, TrainHistory, GridReport)>
where
    F: FnMut(&TrainConfig) -> Result<(M, TrainHistory)>,
{
    let mut best: Option<(M, TrainHistory, f64)> = None;
    let mut points = Vec::new();
    let mut chosen = 0usize;
    for &d in grid_d {
        for &lr in grid_lr {
            let mut tc = base.clone();
            tc.d = d;
            tc.lr_max = lr;
            tc.validate()?;
            let (model, history) = train_fn(&tc)?;
            let score = history.epochs[history.best_epoch].val_ndcg10;
            points.push(GridPoint {
                d,
                lr_max: lr,
                best_val_ndcg10: score,
                best_epoch: history.best_epoch,
                epochs_run: history.epochs.len(),
            });
            if best.as_ref().is_none_or(|(_, _, s)| score > *s) {
                chosen = points.len() - 1;
                best = Some((model, history, score));
            }
        }
    }
    let (model, history, _) =
        best.ok_or_else(|| JamError::Config("grid search over an empty grid".into()))?;
    Ok((model, history, GridReport { points, chosen }))
}

// ---------------------------------------------------------------------------
// Gradient checking against a naive f64 reference
// ---------------------------------------------------------------------------

/// Naive f64 recomputation of the batch BPR loss, written with index loops
/// and kept independent of the gradient path. For MoE, `fixed_masks`
/// replays the kept sets captured at the unperturbed point (one per
/// (triplet, item)); without it the masks are recomputed and returned.
pub fn ref_jam_loss(
    p: &JamParams,
    data: &TrainData,
    batch: &[BatchTriplet],
    fixed_masks: Option<&[Vec<Vec<usize>>]>,
) -> Result<(f64, Vec<Vec<Vec<usize>>>)> {
    let n_mod = p.n_mod();
    let d = p.d;
    let mut total = 0.0f64;
    let mut masks_out: Vec<Vec<Vec<usize>>> = Vec::with_capacity(batch.len());

    let mat_apply = |w: &DenseMatrix, bias: Option<&DenseVector>, x: &[f32]| -> Vec<f64> {
        let mut out = vec![0.0f64; w.rows()];
        for i in 0..w.rows() {
            let mut acc = 0.0f64;
            for j in 0..w.cols() {
                acc += w.at(i, j) as f64 * x[j] as f64;
            }
            if let Some(b) = bias {
                acc += b[i] as f64;
            }
            out[i] = acc;
        }
        out
    };

    for (ti, trip) in batch.iter().enumerate() {
        let ru = data.users.row(trip.user_idx);
        let rq = data.queries.row(trip.query_idx);
        let u = mat_apply(&p.w_user, p.bias.as_ref().map(|b| &b.user), ru);
        let q = mat_apply(&p.w_query, p.bias.as_ref().map(|b| &b.query), rq);
        let mut v = vec![0.0f64; d];
        for i in 0..d {
            v[i] = u[i] + q[i];
        }
        let items: Vec<usize> =
            std::iter::once(trip.pos_item).chain(trip.neg_items.iter().copied()).collect();
        let mut scores = Vec::with_capacity(items.len());
        let mut item_masks = Vec::with_capacity(items.len());
        for (ii, &item) in items.iter().enumerate() {
            let mut t = Vec::with_capacity(n_mod);
            for m in 0..n_mod {
                t.push(mat_apply(
                    &p.w_item[m],
                    p.bias.as_ref().map(|b| &b.item[m]),
                    data.catalog.item_row(m, item),
                ));
            }
            let alpha: Vec<f64> = match p.mixer {
                MixerKind::Avg => {
                    item_masks.push(Vec::new());
                    vec![1.0 / n_mod as f64; n_mod]
                }
                MixerKind::Cross => {
                    item_masks.push(Vec::new());
                    let attn = p.attention.as_ref().unwrap();
                    let bq = mat_apply(&attn.query, None, rq);
                    let mut logits = vec![0.0f64; n_mod];
                    for m in 0..n_mod {
                        let a = mat_apply(&attn.key[m], None, data.catalog.item_row(m, item));
                        let mut acc = 0.0f64;
                        for i in 0..d {
                            acc += a[i] * bq[i];
                        }
                        logits[m] = acc / (d as f64).sqrt();
                    }
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
                    let s: f64 = exps.iter().sum();
                    exps.into_iter().map(|e| e / s).collect()
                }
                MixerKind::Moe { k, .. } => {
                    let gates = p.gates.as_ref().unwrap();
                    let e = mat_apply(&gates.gate_query, None, rq);
                    let mut h = vec![0.0f64; n_mod];
                    for m in 0..n_mod {
                        let c = mat_apply(&gates.gate_item[m], None, data.catalog.item_row(m, item));
                        let mut acc = 0.0f64;
                        for i in 0..e.len() {
                            acc += c[i] * e[i];
                        }
                        h[m] = acc;
                    }
                    let kept: Vec<usize> = if let Some(masks) = fixed_masks {
                        masks[ti][ii].clone()
                    } else {
                        let mut idx: Vec<usize> = (0..n_mod).collect();
                        idx.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
                        let mut kk: Vec<usize> = idx.into_iter().take(k).collect();
                        kk.sort_unstable();
                        kk
                    };
                    item_masks.push(kept.clone());
                    let mx = kept.iter().map(|&m| h[m]).fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = kept.iter().map(|&m| (h[m] - mx).exp()).sum();
                    let mut alpha = vec![0.0f64; n_mod];
                    for &m in &kept {
                        alpha[m] = (h[m] - mx).exp() / denom;
                    }
                    alpha
                }
            };
            let mut score = 0.0f64;
            for m in 0..n_mod {
                if alpha[m] != 0.0 {
                    for i in 0..d {
                        score += v[i] * alpha[m] * t[m][i];
                    }
                }
            }
            scores.push(score);
        }
        masks_out.push(item_masks);
        for j in 1..scores.len() {
            let margin = scores[0] - scores[j];
            // -ln sigmoid(margin), naive but f64-safe for |margin| < ~700.
            total += (1.0 + (-margin).exp()).ln();
        }
    }
    Ok((total / batch.len() as f64, masks_out))
}

/// Small random world for gradient checking.
fn grad_check_fixture(
    n_mod: usize,
    seed: u64,
) -> (Catalog, EmbeddingTable, EmbeddingTable, Vec<BatchTriplet>) {
    let mut rng = SeededRng::new(seed);
    let n_items = 10;
    let item_ids: Vec<String> = (0..n_items).map(|i| format!("i{i}")).collect();
    let mut tables = Vec::new();
    for m in 0..n_mod {
        let dim = 4 + m;
        let rows: Vec<Vec<f32>> = (0..n_items)
            .map(|_| (0..dim).map(|_| (rng.uniform_f64() * 2.0 - 1.0) as f32).collect())
            .collect();
        tables.push(
            EmbeddingTable::new(item_ids.clone(), DenseMatrix::from_rows(&rows).unwrap()).unwrap(),
        );
    }
    let catalog = Catalog::new(
        (0..n_mod).map(|m| format!("m{m}")).collect(),
        tables,
    )
    .unwrap();
    let mk_table = |n: usize, dim: usize, rng: &mut SeededRng| {
        let ids: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| (rng.uniform_f64() * 2.0 - 1.0) as f32).collect())
            .collect();
        EmbeddingTable::new(ids, DenseMatrix::from_rows(&rows).unwrap()).unwrap()
    };
    let users = mk_table(3, 5, &mut rng);
    let queries = mk_table(3, 6, &mut rng);
    let mut batch = Vec::new();
    for _ in 0..4 {
        let pos = rng.uniform_usize(n_items);
        let mut negs = Vec::new();
        while negs.len() < 2 {
            let c = rng.uniform_usize(n_items);
            if c != pos && !negs.contains(&c) {
                negs.push(c);
            }
        }
        batch.push(BatchTriplet {
            user_idx: rng.uniform_usize(3),
            query_idx: rng.uniform_usize(3),
            pos_item: pos,
            neg_items: negs,
        });
    }
    (catalog, users, queries, batch)
}

/// Compare analytic gradients with central finite differences of the f64
/// reference loss over random instances; returns the worst relative error.
/// The denominator is floored at 1e-3 so structurally tiny gradients do
/// not dominate the report. MoE is checked noise-off with the top-k mask
/// frozen at the center point.
pub fn grad_check(
    mixer: MixerKind,
    d: usize,
    n_mod: usize,
    trials: usize,
    eps: f64,
    use_bias: bool,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let (catalog, users, queries, batch) = grad_check_fixture(n_mod, 0xC0FFEE + trial as u64);
        let data = TrainData { catalog: &catalog, users: &users, queries: &queries };
        let mut rng = SeededRng::new(7_000 + trial as u64);
        let dims = ModelDims::from_tables(&users, &queries, &catalog);
        let params = JamParams::init(&dims, d, mixer, use_bias, &mut rng)?;

        let mut noise_rng = SeededRng::new(0);
        let (_, analytic) = jam_batch_grads(&params, &data, &batch, &mut noise_rng)?;
        let (_, masks) = ref_jam_loss(&params, &data, &batch, None)?;

        let mut pp = params.clone();
        let n_tensors = analytic.tensors.len();
        for tidx in 0..n_tensors {
            for j in 0..analytic.tensors[tidx].len() {
                let orig = pp.param_slices()[tidx][j];
                let plus = (orig as f64 + eps) as f32;
                let minus = (orig as f64 - eps) as f32;

                pp.param_slices_mut()[tidx][j] = plus;
                let (lp, _) = ref_jam_loss(&pp, &data, &batch, Some(&masks))?;
                pp.param_slices_mut()[tidx][j] = minus;
                let (lm, _) = ref_jam_loss(&pp, &data, &batch, Some(&masks))?;
                pp.param_slices_mut()[tidx][j] = orig;

                let fd = (lp - lm) / (plus as f64 - minus as f64);
                let a = analytic.tensors[tidx][j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                if rel > worst {
                    worst = rel;
                }
            }
        }
    }
    Ok(worst)
}
