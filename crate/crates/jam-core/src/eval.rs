//! Full-catalog ranking evaluation: Recall@K and NDCG@K with binary
//! relevance, per-record averaging, coverage stats, and cross-seed
//! aggregation in the mean-with-std-subscript reporting format.

use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashSet;

use crate::baselines::{concat_item, random_rank, twotower_user, PopModel, TalkRecParams, TwoTowerParams};
use crate::data::{Catalog, EmbeddingTable, TripletDataset};
use crate::error::{JamError, Result};
use crate::linalg::{dot64, matvec, SeededRng};
use crate::model::{top_k_ranked, JamParams, PreparedJam};

/// Fraction of the record's relevant items appearing in the top k. The
/// denominator is the full relevant-set size, never min(|relevant|, k).
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(JamError::Data("recall: empty relevant set".into()));
    }
    let top = &ranked[..k.min(ranked.len())];
    let hits = top.iter().filter(|i| relevant.binary_search(i).is_ok()).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG. DCG sums 1/log2(rank+1) over relevant hits in
/// the top k; IDCG places min(|relevant|, k) hits at the top, so 1.0 is
/// attainable.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(JamError::Data("ndcg: empty relevant set".into()));
    }
    let top = &ranked[..k.min(ranked.len())];
    let mut dcg = 0.0f64;
    for (pos, item) in top.iter().enumerate() {
        if relevant.binary_search(item).is_ok() {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal = relevant.len().min(k);
    let mut idcg = 0.0f64;
    for pos in 0..ideal {
        idcg += 1.0 / ((pos + 2) as f64).log2();
    }
    Ok(dcg / idcg)
}

/// Brute-force reference for both metrics, kept deliberately naive and
/// separate from the production path; for tests and the acceptance gate.
pub fn oracle_metrics(ranked: &[usize], relevant: &[usize], k: usize) -> (f64, f64) {
    let rel: HashSet<usize> = relevant.iter().copied().collect();
    let ln2 = std::f64::consts::LN_2;
    let mut hits = 0usize;
    let mut dcg = 0.0f64;
    for rank in 1..=ranked.len().min(k) {
        if rel.contains(&ranked[rank - 1]) {
            hits += 1;
            dcg += ln2 / ((rank + 1) as f64).ln();
        }
    }
    let mut idcg = 0.0f64;
    for rank in 1..=rel.len().min(k) {
        idcg += ln2 / ((rank + 1) as f64).ln();
    }
    (hits as f64 / rel.len() as f64, dcg / idcg)
}

/// Anything that can rank the catalog for a test record. `record_idx`
/// keeps randomized rankers deterministic under parallel evaluation.
pub trait Ranker: Sync {
    fn rank(
        &self,
        record_idx: usize,
        raw_user: &[f32],
        raw_query: &[f32],
        k: usize,
    ) -> Result<Vec<(usize, f32)>>;
}

pub struct JamRanker {
    prepared: PreparedJam,
}

impl JamRanker {
    pub fn new(params: &JamParams, catalog: &Catalog) -> Result<Self> {
        Ok(Self { prepared: PreparedJam::new(params, catalog)? })
    }

    pub fn prepared(&self) -> &PreparedJam {
        &self.prepared
    }
}

impl Ranker for JamRanker {
    fn rank(&self, _r: usize, raw_user: &[f32], raw_query: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
        self.prepared.rank(raw_user, raw_query, k)
    }
}

/// Item tower outputs are query- and user-independent, so they are
/// computed once up front.
pub struct TwoTowerRanker {
    params: TwoTowerParams,
    item_vecs: Vec<f32>,
    n_items: usize,
}

impl TwoTowerRanker {
    pub fn new(params: &TwoTowerParams, catalog: &Catalog) -> Result<Self> {
        let n_items = catalog.n_items();
        let mut item_vecs = Vec::with_capacity(n_items * params.d);
        for j in 0..n_items {
            let v = crate::baselines::twotower_item(params, &concat_item(catalog, j))?;
            item_vecs.extend_from_slice(v.as_slice());
        }
        Ok(Self { params: params.clone(), item_vecs, n_items })
    }
}

impl Ranker for TwoTowerRanker {
    fn rank(&self, _r: usize, raw_user: &[f32], _raw_query: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
        let u = twotower_user(&self.params, raw_user)?;
        let d = self.params.d;
        let scored = (0..self.n_items)
            .map(|j| (j, dot64(u.as_slice(), &self.item_vecs[j * d..(j + 1) * d]) as f32))
            .collect();
        Ok(top_k_ranked(scored, k))
    }
}

pub struct TalkRecRanker {
    params: TalkRecParams,
    item_vecs: Vec<f32>,
    n_items: usize,
}

impl TalkRecRanker {
    pub fn new(params: &TalkRecParams, catalog: &Catalog) -> Result<Self> {
        let n_items = catalog.n_items();
        let mut item_vecs = Vec::with_capacity(n_items * params.d);
        for j in 0..n_items {
            let raws: Vec<&[f32]> = (0..catalog.n_modalities())
                .map(|m| catalog.item_row(m, j))
                .collect();
            let v = crate::baselines::talkrec_item_vec(params, &raws)?;
            item_vecs.extend_from_slice(v.as_slice());
        }
        Ok(Self { params: params.clone(), item_vecs, n_items })
    }
}

impl Ranker for TalkRecRanker {
    fn rank(&self, _r: usize, _raw_user: &[f32], raw_query: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
        let q = matvec(&self.params.query_proj, raw_query)?;
        let d = self.params.d;
        let scored = (0..self.n_items)
            .map(|j| (j, dot64(q.as_slice(), &self.item_vecs[j * d..(j + 1) * d]) as f32))
            .collect();
        Ok(top_k_ranked(scored, k))
    }
}

pub struct PopRanker {
    order: Vec<(usize, f32)>,
}

impl PopRanker {
    pub fn new(pm: &PopModel) -> Self {
        let order = crate::baselines::pop_rank(pm, pm.counts().len())
            .into_iter()
            .map(|i| (i, pm.counts()[i] as f32))
            .collect();
        Self { order }
    }
}

impl Ranker for PopRanker {
    fn rank(&self, _r: usize, _u: &[f32], _q: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
        Ok(self.order.iter().take(k).copied().collect())
    }
}

/// Fresh uniform ranking per record, derived from (seed, record index) so
/// parallel and sequential evaluation agree.
pub struct RandomRanker {
    seed: u64,
    n_items: usize,
}

impl RandomRanker {
    pub fn new(seed: u64, n_items: usize) -> Self {
        Self { seed, n_items }
    }
}

impl Ranker for RandomRanker {
    fn rank(&self, record_idx: usize, _u: &[f32], _q: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
        let mut rng = SeededRng::new(self.seed).derive(record_idx as u64 + 1);
        let k = k.min(self.n_items);
        let idx = random_rank(&mut rng, self.n_items, k)?;
        Ok(idx
            .into_iter()
            .enumerate()
            .map(|(pos, i)| (i, (self.n_items - pos) as f32))
            .collect())
    }
}

/// Per-seed metric values, one entry per cutoff.
#[derive(Debug, Clone, Serialize)]
pub struct SeedMetrics {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub n_records: usize,
}

impl SeedMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }
}

/// Rank the full catalog for every test record and average the metrics
/// per record. No filtering of train items. With `parallel`, records are
/// scored across threads and reduced in fixed order, so results are
/// identical to the sequential path.
pub fn evaluate(
    ranker: &dyn Ranker,
    test: &TripletDataset,
    users: &EmbeddingTable,
    queries: &EmbeddingTable,
    ks: &[usize],
    parallel: bool,
) -> Result<SeedMetrics> {
    if test.is_empty() {
        return Err(JamError::Data("evaluate: empty test split".into()));
    }
    let max_k = ks.iter().copied().max().unwrap_or(10);
    let per_record = |i: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let rec = &test.records[i];
        let ranked = ranker.rank(i, users.row(rec.user_idx), queries.row(rec.query_idx), max_k)?;
        let idxs: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        let mut recalls = Vec::with_capacity(ks.len());
        let mut ndcgs = Vec::with_capacity(ks.len());
        for &k in ks {
            recalls.push(recall_at_k(&idxs, &rec.relevant_items, k)?);
            ndcgs.push(ndcg_at_k(&idxs, &rec.relevant_items, k)?);
        }
        Ok((recalls, ndcgs))
    };

    let rows: Vec<(Vec<f64>, Vec<f64>)> = if parallel {
        (0..test.len())
            .into_par_iter()
            .map(per_record)
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..test.len()).map(per_record).collect::<Result<Vec<_>>>()?
    };

    let n = rows.len() as f64;
    let mut recall = vec![0.0f64; ks.len()];
    let mut ndcg = vec![0.0f64; ks.len()];
    for (r, d) in &rows {
        for i in 0..ks.len() {
            recall[i] += r[i];
            ndcg[i] += d[i];
        }
    }
    for i in 0..ks.len() {
        recall[i] /= n;
        ndcg[i] /= n;
    }
    Ok(SeedMetrics { ks: ks.to_vec(), recall, ndcg, n_records: rows.len() })
}

/// Share of test-record users / test relevant items also present in the
/// train split.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CoverageStats {
    pub test_users_seen_in_train: f64,
    pub test_items_seen_in_train: f64,
}

pub fn coverage_stats(train: &TripletDataset, test: &TripletDataset) -> CoverageStats {
    let train_users: HashSet<usize> = train.records.iter().map(|r| r.user_idx).collect();
    let train_items: HashSet<usize> =
        train.records.iter().flat_map(|r| r.relevant_items.iter().copied()).collect();
    let n_users = test.len().max(1) as f64;
    let users_seen = test.records.iter().filter(|r| train_users.contains(&r.user_idx)).count();
    let mut items_total = 0usize;
    let mut items_seen = 0usize;
    for rec in &test.records {
        for item in &rec.relevant_items {
            items_total += 1;
            if train_items.contains(item) {
                items_seen += 1;
            }
        }
    }
    CoverageStats {
        test_users_seen_in_train: users_seen as f64 / n_users,
        test_items_seen_in_train: items_seen as f64 / items_total.max(1) as f64,
    }
}

/// Cross-seed report for one method.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub method: String,
    pub query_used: bool,
    pub user_used: bool,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    /// Per-k cross-seed means and population standard deviations.
    pub mean_recall: Vec<f64>,
    pub std_recall: Vec<f64>,
    pub mean_ndcg: Vec<f64>,
    pub std_ndcg: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageStats>,
    /// Metrics are averaged per record (one mean per test record, then the
    /// mean over records), not per query group.
    pub averaging: String,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate_seeds(
    method: &str,
    query_used: bool,
    user_used: bool,
    seeds: &[u64],
    per_seed: Vec<SeedMetrics>,
    coverage: Option<CoverageStats>,
) -> Result<MetricsReport> {
    if per_seed.is_empty() {
        return Err(JamError::Data("aggregate_seeds: no seed metrics".into()));
    }
    let ks = per_seed[0].ks.clone();
    for s in &per_seed {
        if s.ks != ks {
            return Err(JamError::Data("aggregate_seeds: inconsistent cutoffs".into()));
        }
    }
    let mut mean_recall = Vec::new();
    let mut std_recall = Vec::new();
    let mut mean_ndcg = Vec::new();
    let mut std_ndcg = Vec::new();
    for i in 0..ks.len() {
        let (m, s) = mean_std(&per_seed.iter().map(|x| x.recall[i]).collect::<Vec<_>>());
        mean_recall.push(m);
        std_recall.push(s);
        let (m, s) = mean_std(&per_seed.iter().map(|x| x.ndcg[i]).collect::<Vec<_>>());
        mean_ndcg.push(m);
        std_ndcg.push(s);
    }
    Ok(MetricsReport {
        method: method.to_string(),
        query_used,
        user_used,
        ks,
        seeds: seeds.to_vec(),
        per_seed,
        mean_recall,
        std_recall,
        mean_ndcg,
        std_ndcg,
        coverage,
        averaging: "per-record".to_string(),
    })
}

fn fmt3(x: f64) -> String {
    let s = format!("{x:.3}");
    s.strip_prefix('0').map_or(s.clone(), str::to_string)
}

/// Mean with the std as a subscript, e.g. `.086_{.002}`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{}_{{{}}}", fmt3(mean), fmt3(std))
}

/// Aligned text table: method, q/u usage, then Recall and NDCG at each
/// cutoff with std subscripts.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let ks: &[usize] = reports.first().map_or(&[], |r| &r.ks);
    let mut header = format!("{:<18} {:>2} {:>2}", "method", "q", "u");
    for &k in ks {
        header.push_str(&format!(" {:>13}", format!("Recall@{k}")));
    }
    for &k in ks {
        header.push_str(&format!(" {:>13}", format!("NDCG@{k}")));
    }
    let mut out = header;
    out.push('\n');
    for r in reports {
        let mut line = format!(
            "{:<18} {:>2} {:>2}",
            r.method,
            if r.query_used { "y" } else { "x" },
            if r.user_used { "y" } else { "x" }
        );
        for i in 0..r.ks.len() {
            line.push_str(&format!(" {:>13}", format_mean_std(r.mean_recall[i], r.std_recall[i])));
        }
        for i in 0..r.ks.len() {
            line.push_str(&format!(" {:>13}", format_mean_std(r.mean_ndcg[i], r.std_ndcg[i])));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}
