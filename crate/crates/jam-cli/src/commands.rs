//! Command implementations: thin orchestration over the core library.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use jam_core::baselines::PopModel;
use jam_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointModel};
use jam_core::data::{
    day_partition, load_catalog, load_embedding_table, load_raw_triplets, resolve_triplets,
    save_raw_triplets, Catalog, EmbeddingTable, RawTriplet, SplitTag, TripletDataset,
};
use jam_core::eval::{
    aggregate_seeds, coverage_stats, evaluate, render_table, JamRanker, MetricsReport, PopRanker,
    RandomRanker, SeedMetrics,
};
use jam_core::linalg::DenseVector;
use jam_core::model::{mix_avg, project_item_all, project_query, project_user, JamParams};
use jam_core::synth::{synth_generate, SynthConfig};
use jam_core::train::{train_jam, train_talkrec, train_twotower, TrainData, TrainHistory};

use crate::config::AppConfig;
use crate::cli::{EvaluateArgs, ExportArgs, RecommendArgs, SynthArgs, TrainArgs};
use crate::CliError;

pub struct LoadedWorld {
    pub catalog: Catalog,
    pub users: EmbeddingTable,
    pub queries: EmbeddingTable,
}

pub fn load_world(cfg: &AppConfig) -> Result<LoadedWorld, CliError> {
    let catalog = load_catalog(cfg.require_path(&cfg.catalog, "catalog")?)?;
    let users = load_embedding_table(
        cfg.require_path(&cfg.users_matrix, "users_matrix")?,
        cfg.require_path(&cfg.users_ids, "users_ids")?,
    )?;
    let queries = load_embedding_table(
        cfg.require_path(&cfg.queries_matrix, "queries_matrix")?,
        cfg.require_path(&cfg.queries_ids, "queries_ids")?,
    )?;
    Ok(LoadedWorld { catalog, users, queries })
}

fn load_triplets(
    cfg: &AppConfig,
    world: &LoadedWorld,
) -> Result<(Vec<RawTriplet>, TripletDataset), CliError> {
    let raw = load_raw_triplets(cfg.require_path(&cfg.triplets, "triplets")?)?;
    let ds = resolve_triplets(&raw, &world.users, &world.queries, &world.catalog)?;
    Ok((raw, ds))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        n_users: a.n_users,
        n_queries: a.n_queries,
        n_items: a.n_items,
        latent_dim: a.latent_dim,
        n_mod: a.n_mod,
        noise_sigma: a.noise_sigma,
        distractor_overlap: a.distractor_overlap,
        seed: a.seed,
    };
    let world = synth_generate(&cfg)?;
    let manifest = jam_core::synth::save_world(&world, &a.out)?;
    // A ready-to-use config pointing at the generated files.
    let conf = a.out.join("jam.conf");
    std::fs::write(
        &conf,
        "catalog = catalog.json\nusers_matrix = users.jamb\nusers_ids = users.ids\n\
         queries_matrix = queries.jamb\nqueries_ids = queries.ids\ntriplets = triplets.jsonl\n",
    )
    .map_err(jam_core::JamError::from)?;
    println!(
        "wrote world: {} items, {} users, {} queries, {} records -> {}",
        world.catalog.n_items(),
        world.users.len(),
        world.queries.len(),
        world.dataset.len(),
        manifest.display()
    );
    println!("config: {}", conf.display());
    Ok(())
}

pub fn cmd_split(cfg: &AppConfig) -> Result<(), CliError> {
    let world = load_world(cfg)?;
    let (raw, _resolved) = load_triplets(cfg, &world)?;
    let stamps: Vec<i64> = raw.iter().map(|t| t.timestamp).collect();
    let tags = day_partition(&stamps)?;
    let out_dir = cfg.require_path(&cfg.out_dir, "out_dir")?;
    std::fs::create_dir_all(out_dir).map_err(jam_core::JamError::from)?;
    for (tag, name) in [
        (SplitTag::Train, "train.jsonl"),
        (SplitTag::Val, "val.jsonl"),
        (SplitTag::Test, "test.jsonl"),
    ] {
        let part: Vec<RawTriplet> = raw
            .iter()
            .zip(&tags)
            .filter(|(_, &t)| t == tag)
            .map(|(r, _)| r.clone())
            .collect();
        save_raw_triplets(&out_dir.join(name), &part)?;
        println!("{name}: {} records", part.len());
    }
    Ok(())
}

fn parse_seeds(spec: Option<&str>, fallback: u64) -> Result<Vec<u64>, CliError> {
    match spec {
        None => Ok(vec![fallback]),
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad seed {t:?} in --seeds")))
            })
            .collect(),
    }
}

fn write_train_log(path: &Path, history: &TrainHistory) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(jam_core::JamError::from)?);
    for e in &history.epochs {
        serde_json::to_writer(&mut w, e).map_err(jam_core::JamError::from)?;
        writeln!(w).map_err(jam_core::JamError::from)?;
    }
    w.flush().map_err(jam_core::JamError::from)?;
    Ok(())
}

fn write_reports(path: &Path, reports: &[MetricsReport]) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(reports).map_err(jam_core::JamError::from)?;
    std::fs::write(path, json).map_err(jam_core::JamError::from)?;
    Ok(())
}

pub fn ranker_for(
    model: &CheckpointModel,
    catalog: &Catalog,
) -> Result<Box<dyn jam_core::eval::Ranker>, CliError> {
    Ok(match model {
        CheckpointModel::Jam(p) => Box::new(JamRanker::new(p, catalog)?),
        CheckpointModel::TwoTower(p) => Box::new(jam_core::eval::TwoTowerRanker::new(p, catalog)?),
        CheckpointModel::TalkRec(p) => Box::new(jam_core::eval::TalkRecRanker::new(p, catalog)?),
    })
}

pub fn cmd_train(mut cfg: AppConfig, a: &TrainArgs) -> Result<(), CliError> {
    if a.model.is_some() {
        cfg.model.clone_from(&a.model);
    }
    if a.mixer.is_some() {
        cfg.mixer.clone_from(&a.mixer);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = Some(v);
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = Some(v);
    }
    if let Some(v) = a.n_negatives {
        cfg.n_negatives = Some(v);
    }
    if let Some(v) = a.lr_max {
        cfg.lr_max = Some(v);
    }
    if let Some(v) = a.patience {
        cfg.patience = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = Some(v);
    }
    if let Some(v) = a.d {
        cfg.d = Some(v);
    }
    if let Some(v) = a.moe_k {
        cfg.moe_k = Some(v);
    }
    if let Some(v) = a.moe_noise {
        cfg.moe_noise = Some(v);
    }

    let world = load_world(&cfg)?;
    let (_, ds) = load_triplets(&cfg, &world)?;
    let (train_ds, val_ds, test_ds) = jam_core::data::chronological_split(&ds)?;
    let data = TrainData { catalog: &world.catalog, users: &world.users, queries: &world.queries };
    let out_dir = cfg.require_path(&cfg.out_dir, "out_dir")?.to_path_buf();
    std::fs::create_dir_all(&out_dir).map_err(jam_core::JamError::from)?;

    let model_kind = cfg.model.as_deref().unwrap_or("jam").to_string();
    let mut base_tc = cfg.train_config();
    let seeds = parse_seeds(a.seeds.as_deref(), base_tc.seed)?;
    let modality_names = world.catalog.modality_names().to_vec();

    let (method, query_used, user_used) = match model_kind.as_str() {
        "jam" => (format!("jam-{}", cfg.mixer.as_deref().unwrap_or("avg")), true, true),
        "twotower" => ("twotower".to_string(), false, true),
        "talkrec" => ("talkrec".to_string(), true, false),
        other => return Err(CliError::Usage(format!("unknown model {other:?}"))),
    };

    if a.grid_search {
        use jam_core::train::{grid_search, GRID_D, GRID_LR};
        let report = match model_kind.as_str() {
            "jam" => {
                let mixer = cfg.mixer_kind()?;
                let (_, _, rep) = grid_search(&base_tc, &GRID_D, &GRID_LR, |tc| {
                    train_jam(tc, mixer, &train_ds, &val_ds, &data)
                })?;
                rep
            }
            "twotower" => {
                let hidden = cfg.hidden.unwrap_or(256);
                let (_, _, rep) = grid_search(&base_tc, &GRID_D, &GRID_LR, |tc| {
                    train_twotower(tc, hidden, &train_ds, &val_ds, &data)
                })?;
                rep
            }
            "talkrec" => {
                let tau = cfg.tau.unwrap_or(0.07);
                let (_, _, rep) = grid_search(&base_tc, &GRID_D, &GRID_LR, |tc| {
                    train_talkrec(tc, tau, &train_ds, &val_ds, &data)
                })?;
                rep
            }
            _ => unreachable!(),
        };
        let chosen = &report.points[report.chosen];
        println!(
            "grid search: chose d={} lr_max={} (val NDCG@10 {:.4})",
            chosen.d, chosen.lr_max, chosen.best_val_ndcg10
        );
        base_tc.d = chosen.d;
        base_tc.lr_max = chosen.lr_max;
        let json = serde_json::to_string_pretty(&report).map_err(jam_core::JamError::from)?;
        std::fs::write(out_dir.join("grid_report.json"), json)
            .map_err(jam_core::JamError::from)?;
    }

    let mut per_seed: Vec<SeedMetrics> = Vec::new();
    for &seed in &seeds {
        let mut tc = base_tc.clone();
        tc.seed = seed;
        let (ckpt_model, history): (CheckpointModel, TrainHistory) = match model_kind.as_str() {
            "jam" => {
                let mixer = cfg.mixer_kind()?;
                let (params, history) = train_jam(&tc, mixer, &train_ds, &val_ds, &data)?;
                (CheckpointModel::Jam(params), history)
            }
            "twotower" => {
                let hidden = cfg.hidden.unwrap_or(256);
                let (params, history) = train_twotower(&tc, hidden, &train_ds, &val_ds, &data)?;
                (CheckpointModel::TwoTower(params), history)
            }
            "talkrec" => {
                let tau = cfg.tau.unwrap_or(0.07);
                let (params, history) = train_talkrec(&tc, tau, &train_ds, &val_ds, &data)?;
                (CheckpointModel::TalkRec(params), history)
            }
            _ => unreachable!(),
        };
        let ckpt_path = out_dir.join(format!("{method}_seed{seed}.ckpt"));
        save_checkpoint(&ckpt_path, &ckpt_model, &modality_names)?;
        write_train_log(&out_dir.join(format!("train_log_{method}_seed{seed}.jsonl")), &history)?;
        println!(
            "seed {seed}: {} epochs, best epoch {}, checkpoint {}",
            history.epochs.len(),
            history.best_epoch,
            ckpt_path.display()
        );

        let ranker = ranker_for(&ckpt_model, &world.catalog)?;
        per_seed.push(evaluate(
            &*ranker,
            &test_ds,
            &world.users,
            &world.queries,
            &[10, 100],
            true,
        )?);
    }

    let coverage = coverage_stats(&train_ds, &test_ds);
    let report = aggregate_seeds(&method, query_used, user_used, &seeds, per_seed, Some(coverage))?;
    let report_path = out_dir.join("metrics_report.json");
    write_reports(&report_path, std::slice::from_ref(&report))?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    println!("report: {}", report_path.display());
    Ok(())
}

pub fn cmd_evaluate(cfg: &AppConfig, a: &EvaluateArgs) -> Result<(), CliError> {
    let world = load_world(cfg)?;
    let (_, ds) = load_triplets(cfg, &world)?;
    let (train_ds, _val_ds, test_ds) = jam_core::data::chronological_split(&ds)?;
    let coverage = coverage_stats(&train_ds, &test_ds);
    let ks = [10usize, 100];
    let mut reports: Vec<MetricsReport> = Vec::new();

    let ckpt_list: Vec<std::path::PathBuf> = match (&a.checkpoints, &cfg.checkpoint) {
        (Some(s), _) => s.split(',').map(|t| t.trim().into()).collect(),
        (None, Some(p)) => vec![p.clone()],
        (None, None) => vec![],
    };
    if !ckpt_list.is_empty() {
        let mut per_seed = Vec::new();
        let mut method = String::new();
        let mut q_used = true;
        let mut u_used = true;
        for path in &ckpt_list {
            let (model, meta) = load_checkpoint(path)?;
            method = match &model {
                CheckpointModel::Jam(p) => format!("jam-{}", p.mixer.name()),
                CheckpointModel::TwoTower(_) => "twotower".into(),
                CheckpointModel::TalkRec(_) => "talkrec".into(),
            };
            q_used = meta.model_kind != "twotower";
            u_used = meta.model_kind != "talkrec";
            let ranker = ranker_for(&model, &world.catalog)?;
            per_seed.push(evaluate(&*ranker, &test_ds, &world.users, &world.queries, &ks, true)?);
        }
        let seeds: Vec<u64> = (0..ckpt_list.len() as u64).collect();
        reports.push(aggregate_seeds(&method, q_used, u_used, &seeds, per_seed, Some(coverage))?);
    }

    if let Some(b) = &a.baselines {
        let seed = cfg.seed.unwrap_or(42);
        for name in b.split(',').map(str::trim) {
            match name {
                "pop" => {
                    let pm = PopModel::from_train(&train_ds, world.catalog.n_items());
                    let ranker = PopRanker::new(&pm);
                    let m =
                        evaluate(&ranker, &test_ds, &world.users, &world.queries, &ks, true)?;
                    reports.push(aggregate_seeds("pop", false, false, &[seed], vec![m], Some(coverage))?);
                }
                "random" => {
                    let ranker = RandomRanker::new(seed, world.catalog.n_items());
                    let m =
                        evaluate(&ranker, &test_ds, &world.users, &world.queries, &ks, true)?;
                    reports
                        .push(aggregate_seeds("random", false, false, &[seed], vec![m], Some(coverage))?);
                }
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown baseline {other:?} (expected pop or random)"
                    )))
                }
            }
        }
    }
    if reports.is_empty() {
        return Err(CliError::Usage(
            "nothing to evaluate: pass --checkpoints, a checkpoint setting, or --baselines".into(),
        ));
    }

    print!("{}", render_table(&reports));
    let out = match (&a.out, &cfg.out_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("metrics_report.json"),
        (None, None) => {
            return Err(CliError::Usage("missing --out (or out_dir) for the report".into()))
        }
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(jam_core::JamError::from)?;
    }
    write_reports(&out, &reports)?;
    println!("report: {}", out.display());
    Ok(())
}

fn load_jam_checkpoint(cfg: &AppConfig) -> Result<(JamParams, String), CliError> {
    let path = cfg.require_path(&cfg.checkpoint, "checkpoint")?;
    let (model, _meta) = load_checkpoint(path)?;
    let name = path
        .file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    match model {
        CheckpointModel::Jam(p) => Ok((p, name)),
        other => Err(CliError::Data(format!(
            "checkpoint is a {} model; this command needs a jam checkpoint",
            other.kind()
        ))),
    }
}

/// Resolve the raw query vector: either a known query id or text sent to
/// the external embedding provider.
fn resolve_query_vector(
    cfg: &AppConfig,
    world: &LoadedWorld,
    query_id: Option<&str>,
    query_text: Option<&str>,
) -> Result<Vec<f32>, CliError> {
    match (query_id, query_text) {
        (Some(id), None) => {
            let idx = world
                .queries
                .lookup(id)
                .ok_or_else(|| CliError::Data(format!("unknown query_id {id:?}")))?;
            Ok(world.queries.row(idx).to_vec())
        }
        (None, Some(text)) => {
            let url = cfg.embed_url.as_deref().ok_or_else(|| {
                CliError::Usage(
                    "query_text needs an embedding provider (embed_url or JAM_EMBED_URL)".into(),
                )
            })?;
            let rt = tokio::runtime::Builder::new_current_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::Provider(e.to_string()))?;
            let v = rt.block_on(crate::serve::embed_query(url, text))?;
            if v.len() != world.queries.dim() {
                return Err(CliError::Data(format!(
                    "provider returned dim {}, query table has dim {}",
                    v.len(),
                    world.queries.dim()
                )));
            }
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(CliError::Data(format!("provider returned non-finite value {bad}")));
            }
            Ok(v)
        }
        (Some(_), Some(_)) => {
            Err(CliError::Usage("pass exactly one of --query-id / --query-text, not both".into()))
        }
        (None, None) => Err(CliError::Usage("pass one of --query-id / --query-text".into())),
    }
}

pub fn cmd_recommend(cfg: &AppConfig, a: &RecommendArgs) -> Result<(), CliError> {
    let world = load_world(cfg)?;
    let (params, ckpt_name) = load_jam_checkpoint(cfg)?;
    let raw_user: Vec<f32> = if a.anonymous {
        if a.user_id.is_some() {
            return Err(CliError::Usage("--anonymous and --user-id are mutually exclusive".into()));
        }
        vec![0.0; world.users.dim()]
    } else {
        let id = a
            .user_id
            .as_deref()
            .ok_or_else(|| CliError::Usage("pass --user-id or --anonymous".into()))?;
        let idx = world
            .users
            .lookup(id)
            .ok_or_else(|| CliError::Data(format!("unknown user_id {id:?}")))?;
        world.users.row(idx).to_vec()
    };
    let raw_query =
        resolve_query_vector(cfg, &world, a.query_id.as_deref(), a.query_text.as_deref())?;
    let k = a.k.or(cfg.k).unwrap_or(10);
    if k < 1 {
        return Err(CliError::Usage("k must be >= 1".into()));
    }
    let ranked = jam_core::model::rank_catalog(&params, &world.catalog, &raw_user, &raw_query, k)?;
    println!("# checkpoint: {ckpt_name}  mixer: {}", params.mixer.name());
    for (rank, (idx, score)) in ranked.iter().enumerate() {
        println!("{}\t{}\t{}", rank + 1, world.catalog.item_id(*idx), score);
    }
    Ok(())
}

pub fn cmd_export_latents(cfg: &AppConfig, a: &ExportArgs) -> Result<(), CliError> {
    let world = load_world(cfg)?;
    let (params, _) = load_jam_checkpoint(cfg)?;
    let d = params.d;
    let mut w = BufWriter::new(File::create(&a.out).map_err(jam_core::JamError::from)?);
    let header: Vec<String> = (0..d).map(|i| format!("v{i}")).collect();
    writeln!(w, "kind,id,{}", header.join(",")).map_err(jam_core::JamError::from)?;

    let write_row = |w: &mut BufWriter<File>, kind: &str, id: &str, v: &[f32]| -> Result<(), CliError> {
        let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{kind},{id},{}", vals.join(",")).map_err(jam_core::JamError::from)?;
        Ok(())
    };

    // Item rows: the query-free item point, i.e. the uniform average of
    // the projected modality latents.
    for j in 0..world.catalog.n_items() {
        let raws: Vec<&[f32]> = (0..world.catalog.n_modalities())
            .map(|m| world.catalog.item_row(m, j))
            .collect();
        let latents = project_item_all(&params, &raws)?;
        let (t_hat, _) = mix_avg(&latents);
        write_row(&mut w, "item", world.catalog.item_id(j), t_hat.as_slice())?;
    }

    let user_latent = |id: &str| -> Result<DenseVector, CliError> {
        let idx = world
            .users
            .lookup(id)
            .ok_or_else(|| CliError::Data(format!("unknown user_id {id:?}")))?;
        Ok(project_user(&params, world.users.row(idx))?)
    };
    if let Some(users) = &a.users {
        for id in users.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let u = user_latent(id)?;
            write_row(&mut w, "user", id, u.as_slice())?;
        }
    }
    if let Some(pairs) = &a.pairs {
        for pair in pairs.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let Some((uid, qid)) = pair.split_once(':') else {
                return Err(CliError::Usage(format!("bad pair {pair:?}, expected user:query")));
            };
            let u = user_latent(uid)?;
            let qidx = world
                .queries
                .lookup(qid)
                .ok_or_else(|| CliError::Data(format!("unknown query_id {qid:?}")))?;
            let q = project_query(&params, world.queries.row(qidx))?;
            let sum: Vec<f32> =
                u.as_slice().iter().zip(q.as_slice()).map(|(a, b)| a + b).collect();
            write_row(&mut w, "user_plus_query", &format!("{uid}:{qid}"), &sum)?;
        }
    }
    w.flush().map_err(jam_core::JamError::from)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
