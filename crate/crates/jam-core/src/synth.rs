//! Planted-structure synthetic worlds.
//!
//! Relevance is constructed in a hidden generating space: each record's
//! target item latent is the normalized sum of the record's user and query
//! latents, so the translation geometry holds exactly there. Raw user,
//! query, and per-modality item embeddings are images of those latents
//! under random orthonormal-column maps (plus optional noise), so a model
//! has to recover the maps rather than fit an identity.

use std::path::Path;

use crate::data::{
    save_catalog_manifest, save_embedding_table, save_raw_triplets, Catalog, EmbeddingTable,
    RawTriplet, SplitTag, TripletDataset, TripletRecord,
};
use crate::error::{JamError, Result};
use crate::linalg::{DenseMatrix, SeededRng};

/// Distractor latents are scaled below the planted norm so the planted item
/// wins the generating-space dot product outright.
const DISTRACTOR_NORM: f64 = 0.8;

/// First synthetic day, expressed in days since the Unix epoch.
const BASE_DAY: i64 = 20_000;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_queries: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    pub n_mod: usize,
    pub noise_sigma: f64,
    /// In [0, 1]. Zero makes every modality a clean image of the item
    /// latent. Above zero, each record's query marks one modality as
    /// informative; all other modality contents (and every distractor
    /// modality) are blended with the latent of another planted item, so
    /// modalities overlap across items and only query-aware weighting can
    /// fully separate them.
    pub distractor_overlap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_queries: 40,
            n_items: 800,
            latent_dim: 16,
            n_mod: 3,
            noise_sigma: 0.05,
            distractor_overlap: 0.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users < 1 || self.n_queries < 1 || self.n_items < 1 || self.n_mod < 1 {
            return Err(JamError::Config("synth counts must be >= 1".into()));
        }
        if self.latent_dim < 2 {
            return Err(JamError::Config("latent_dim must be >= 2".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(JamError::Config("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_overlap) {
            return Err(JamError::Config("distractor_overlap must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// Ground truth kept alongside the observable tables, for oracle tests.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Unit user latents, one row per user.
    pub user_latents: DenseMatrix,
    /// Unit query latents, one row per query.
    pub query_latents: DenseMatrix,
    /// Item latents in catalog order (planted rows are normalized u*+q*).
    pub item_latents: DenseMatrix,
    /// Orthonormal-column map from user latent to raw user embedding.
    pub user_map: DenseMatrix,
    pub query_map: DenseMatrix,
    /// One map per modality.
    pub modality_maps: Vec<DenseMatrix>,
    /// Planted item index per record.
    pub planted_items: Vec<usize>,
    /// Informative modality per record (derived from the query latent).
    pub informative_modality: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub catalog: Catalog,
    pub users: EmbeddingTable,
    pub queries: EmbeddingTable,
    pub dataset: TripletDataset,
    pub truth: SynthTruth,
}

fn random_unit(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random matrix with orthonormal columns (Gram-Schmidt on Gaussian draws).
fn orthonormal_map(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    assert!(cols <= rows, "orthonormal map needs rows >= cols");
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while columns.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        for u in &columns {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, &u_i) in v.iter_mut().zip(u) {
                *x -= proj * u_i;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        columns.push(v.into_iter().map(|x| x / norm).collect());
    }
    let mut m = DenseMatrix::zeros(rows, cols);
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v as f32);
        }
    }
    m
}

fn apply_map(map: &DenseMatrix, latent: &[f64]) -> Vec<f32> {
    let mut out = vec![0.0f32; map.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for (j, &z) in latent.iter().enumerate() {
            acc += map.at(i, j) as f64 * z;
        }
        *o = acc as f32;
    }
    out
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DenseMatrix {
    let cols = rows.first().map_or(0, Vec::len);
    let mut m = DenseMatrix::zeros(rows.len(), cols);
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            m.set(i, j, v as f32);
        }
    }
    m
}

/// Informative modality of a query: argmax of the leading n_mod latent
/// coordinates, so it is decodable from the raw query embedding.
fn informative_modality(latent: &[f64], n_mod: usize) -> usize {
    let take = n_mod.min(latent.len());
    let mut best = 0;
    for i in 1..take {
        if latent[i] > latent[best] {
            best = i;
        }
    }
    best
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let ld = cfg.latent_dim;
    // Distinct (user, query) pairs keep planted latents distinct, which
    // the unique-argmax construction needs.
    let n_records = (cfg.n_items / 2).max(1).min(cfg.n_users * cfg.n_queries);

    let user_latents: Vec<Vec<f64>> = (0..cfg.n_users).map(|_| random_unit(ld, &mut rng)).collect();
    let query_latents: Vec<Vec<f64>> =
        (0..cfg.n_queries).map(|_| random_unit(ld, &mut rng)).collect();

    let user_dim = ld + 4;
    let query_dim = ld + 6;
    let modality_dims: Vec<usize> = (0..cfg.n_mod).map(|m| ld + 2 + 3 * m).collect();
    let user_map = orthonormal_map(user_dim, ld, &mut rng);
    let query_map = orthonormal_map(query_dim, ld, &mut rng);
    let modality_maps: Vec<DenseMatrix> = modality_dims
        .iter()
        .map(|&d| orthonormal_map(d, ld, &mut rng))
        .collect();

    // Records: queries round-robin (distinct while n_records <= n_queries),
    // users drawn uniformly subject to (user, query) pairs being distinct.
    let record_queries: Vec<usize> = (0..n_records).map(|r| r % cfg.n_queries).collect();
    let mut used_pairs = std::collections::HashSet::new();
    let record_users: Vec<usize> = record_queries
        .iter()
        .map(|&q| loop {
            let u = rng.uniform_usize(cfg.n_users);
            if used_pairs.insert((u, q)) {
                break u;
            }
        })
        .collect();

    // Shuffled item slots: the first n_records slots of the permutation are
    // the planted items, the rest are distractors.
    let mut perm: Vec<usize> = (0..cfg.n_items).collect();
    rng.shuffle(&mut perm);
    let planted_items: Vec<usize> = perm[..n_records].to_vec();

    // Base latent per item.
    let mut item_latents: Vec<Vec<f64>> = vec![vec![0.0; ld]; cfg.n_items];
    for r in 0..n_records {
        let u = &user_latents[record_users[r]];
        let q = &query_latents[record_queries[r]];
        let mut z: Vec<f64> = u.iter().zip(q).map(|(a, b)| a + b).collect();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            for x in &mut z {
                *x /= norm;
            }
        } else {
            z = u.clone();
        }
        item_latents[planted_items[r]] = z;
    }
    for &slot in &perm[n_records..] {
        let unit = random_unit(ld, &mut rng);
        item_latents[slot] = unit.into_iter().map(|x| x * DISTRACTOR_NORM).collect();
    }

    // Informative modality and planted flag per item slot.
    let informative: Vec<usize> = record_queries
        .iter()
        .map(|&q| informative_modality(&query_latents[q], cfg.n_mod))
        .collect();
    let mut item_informative: Vec<Option<usize>> = vec![None; cfg.n_items];
    for r in 0..n_records {
        item_informative[planted_items[r]] = Some(informative[r]);
    }

    // Modality contents, then raw embeddings.
    let rho = cfg.distractor_overlap;
    let mut modality_rows: Vec<Vec<Vec<f32>>> =
        (0..cfg.n_mod).map(|_| vec![Vec::new(); cfg.n_items]).collect();
    for j in 0..cfg.n_items {
        for m in 0..cfg.n_mod {
            let clean = rho == 0.0 || item_informative[j] == Some(m);
            let content: Vec<f64> = if clean {
                item_latents[j].clone()
            } else {
                // Blend with the latent of another planted item so modality
                // clouds overlap across items.
                let conf = &item_latents[planted_items[rng.uniform_usize(n_records)]];
                item_latents[j]
                    .iter()
                    .zip(conf)
                    .map(|(&z, &c)| (1.0 - rho) * z + rho * c)
                    .collect()
            };
            let mut raw = apply_map(&modality_maps[m], &content);
            if cfg.noise_sigma > 0.0 {
                for v in &mut raw {
                    *v += (cfg.noise_sigma * rng.normal()) as f32;
                }
            }
            modality_rows[m][j] = raw;
        }
    }

    let item_ids: Vec<String> = (0..cfg.n_items).map(|j| format!("item_{j:05}")).collect();
    let user_ids: Vec<String> = (0..cfg.n_users).map(|j| format!("user_{j:05}")).collect();
    let query_ids: Vec<String> = (0..cfg.n_queries).map(|j| format!("query_{j:05}")).collect();

    let users = EmbeddingTable::new(
        user_ids,
        DenseMatrix::from_rows(
            &user_latents.iter().map(|z| apply_map(&user_map, z)).collect::<Vec<_>>(),
        )?,
    )?;
    let queries = EmbeddingTable::new(
        query_ids,
        DenseMatrix::from_rows(
            &query_latents.iter().map(|z| apply_map(&query_map, z)).collect::<Vec<_>>(),
        )?,
    )?;

    let modality_names: Vec<String> = default_modality_names(cfg.n_mod);
    let mut tables = Vec::with_capacity(cfg.n_mod);
    for rows in &modality_rows {
        tables.push(EmbeddingTable::new(item_ids.clone(), DenseMatrix::from_rows(rows)?)?);
    }
    let catalog = Catalog::new(modality_names, tables)?;

    // Timestamps span min(n_records, 10) synthetic days (>= 7 once there
    // are at least 7 records), so the chronological split applies.
    let n_days = n_records.clamp(1, 10) as i64;
    let records: Vec<TripletRecord> = (0..n_records)
        .map(|r| {
            let day = (r as i64 * n_days) / n_records as i64;
            let offset = (r as i64 * 9973) % SECONDS_PER_DAY;
            TripletRecord {
                user_idx: record_users[r],
                query_idx: record_queries[r],
                relevant_items: vec![planted_items[r]],
                timestamp: (BASE_DAY + day) * SECONDS_PER_DAY + offset,
            }
        })
        .collect();

    Ok(SynthWorld {
        catalog,
        users,
        queries,
        dataset: TripletDataset { records, split_tag: SplitTag::Full },
        truth: SynthTruth {
            user_latents: rows_to_matrix(&user_latents),
            query_latents: rows_to_matrix(&query_latents),
            item_latents: rows_to_matrix(&item_latents),
            user_map,
            query_map,
            modality_maps,
            planted_items,
            informative_modality: informative,
        },
    })
}

pub fn default_modality_names(n_mod: usize) -> Vec<String> {
    let standard = ["audio", "lyrics", "cf"];
    (0..n_mod)
        .map(|m| {
            standard
                .get(m)
                .map_or_else(|| format!("mod{m}"), |s| (*s).to_string())
        })
        .collect()
}

/// Write a generated world to a directory in the documented file formats.
/// Returns the catalog manifest path.
pub fn save_world(world: &SynthWorld, dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    save_embedding_table(&world.users, &dir.join("users.jamb"), &dir.join("users.ids"))?;
    save_embedding_table(&world.queries, &dir.join("queries.jamb"), &dir.join("queries.ids"))?;
    crate::data::save_ids(&dir.join("items.ids"), world.catalog.item_ids())?;
    let mut manifest_mods = Vec::new();
    for (m, name) in world.catalog.modality_names().iter().enumerate() {
        let file = format!("items_{name}.jamb");
        crate::data::save_matrix(&dir.join(&file), world.catalog.modality(m).matrix())?;
        manifest_mods.push((name.clone(), file));
    }
    let manifest = dir.join("catalog.json");
    save_catalog_manifest(&manifest, "items.ids", &manifest_mods)?;

    let raw: Vec<RawTriplet> = world
        .dataset
        .records
        .iter()
        .map(|r| RawTriplet {
            user_id: world.users.id(r.user_idx).to_string(),
            query_id: world.queries.id(r.query_idx).to_string(),
            item_ids: r
                .relevant_items
                .iter()
                .map(|&i| world.catalog.item_id(i).to_string())
                .collect(),
            timestamp: r.timestamp,
            query_text: None,
        })
        .collect();
    save_raw_triplets(&dir.join("triplets.jsonl"), &raw)?;
    Ok(manifest)
}
