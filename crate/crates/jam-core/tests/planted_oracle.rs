//! Generator-construction oracles: with projections assembled from the
//! synthetic world's own ground-truth maps (orthonormal columns, so the
//! transpose inverts them), the model must place every planted item at
//! rank 1 in the noiseless world. Also ranker-level independence checks
//! for the baselines.

use jam_core::baselines::{talkrec_rank, TalkRecParams, TwoTowerParams};
use jam_core::eval::{Ranker, TalkRecRanker, TwoTowerRanker};
use jam_core::linalg::{DenseMatrix, SeededRng};
use jam_core::model::{rank_catalog, JamParams, MixerKind, ModelDims};
use jam_core::synth::{synth_generate, SynthConfig};

fn transpose(m: &DenseMatrix) -> DenseMatrix {
    let mut t = DenseMatrix::zeros(m.cols(), m.rows());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            t.set(j, i, m.at(i, j));
        }
    }
    t
}

#[test]
fn oracle_projections_rank_planted_items_first() {
    let cfg = SynthConfig {
        n_users: 25,
        n_queries: 60,
        n_items: 100,
        latent_dim: 16,
        n_mod: 3,
        noise_sigma: 0.0,
        distractor_overlap: 0.0,
        seed: 17,
    };
    let world = synth_generate(&cfg).unwrap();
    // Invert the generating maps: orthonormal columns make the transpose
    // a left inverse, so the model's latent space IS the generating space.
    let params = JamParams {
        d: cfg.latent_dim,
        mixer: MixerKind::Avg,
        w_user: transpose(&world.truth.user_map),
        w_query: transpose(&world.truth.query_map),
        w_item: world.truth.modality_maps.iter().map(transpose).collect(),
        bias: None,
        attention: None,
        gates: None,
    };
    for (r, rec) in world.dataset.records.iter().enumerate() {
        let ranked = rank_catalog(
            &params,
            &world.catalog,
            world.users.row(rec.user_idx),
            world.queries.row(rec.query_idx),
            1,
        )
        .unwrap();
        assert_eq!(
            ranked[0].0, world.truth.planted_items[r],
            "record {r}: planted item not at rank 1"
        );
    }
    println!("[PASS] oracle projections: planted item at rank 1 for all {} records", world.dataset.len());
}

#[test]
fn talkrec_oracle_projections_rank_planted_items_first() {
    // One record per query (records <= queries) so query-only scoring can
    // disambiguate; a wider latent keeps random alignments small.
    let cfg = SynthConfig {
        n_users: 30,
        n_queries: 64,
        n_items: 40,
        latent_dim: 32,
        n_mod: 2,
        noise_sigma: 0.0,
        distractor_overlap: 0.0,
        seed: 23,
    };
    let world = synth_generate(&cfg).unwrap();
    let params = TalkRecParams {
        d: cfg.latent_dim,
        tau: 0.07,
        proj: world.truth.modality_maps.iter().map(transpose).collect(),
        query_proj: transpose(&world.truth.query_map),
    };
    for (r, rec) in world.dataset.records.iter().enumerate() {
        let ranked =
            talkrec_rank(&params, &world.catalog, world.queries.row(rec.query_idx), 1).unwrap();
        assert_eq!(
            ranked[0].0, world.truth.planted_items[r],
            "record {r}: planted item not at rank 1"
        );
    }
    println!("[PASS] talkrec oracle projections: planted item at rank 1 for all records");
}

#[test]
fn twotower_ranking_ignores_the_query() {
    let cfg = SynthConfig { n_items: 50, n_users: 8, n_queries: 8, ..Default::default() };
    let world = synth_generate(&cfg).unwrap();
    let mut rng = SeededRng::new(9);
    let dims = ModelDims {
        user_dim: world.users.dim(),
        query_dim: world.queries.dim(),
        modality_dims: world.catalog.modality_dims(),
    };
    let params = TwoTowerParams::init(&dims, 6, 10, &mut rng);
    let ranker = TwoTowerRanker::new(&params, &world.catalog).unwrap();
    let u = world.users.row(0);
    let a = ranker.rank(0, u, world.queries.row(1), 10).unwrap();
    let b = ranker.rank(0, u, world.queries.row(5), 10).unwrap();
    assert_eq!(a, b, "two-tower ranking changed when only the query changed");
    println!("[PASS] two-tower ranking is independent of the query");
}

#[test]
fn talkrec_ranking_ignores_the_user() {
    let cfg = SynthConfig { n_items: 50, n_users: 8, n_queries: 8, ..Default::default() };
    let world = synth_generate(&cfg).unwrap();
    let mut rng = SeededRng::new(9);
    let dims = ModelDims {
        user_dim: world.users.dim(),
        query_dim: world.queries.dim(),
        modality_dims: world.catalog.modality_dims(),
    };
    let params = TalkRecParams::init(&dims, 6, 0.07, &mut rng).unwrap();
    let ranker = TalkRecRanker::new(&params, &world.catalog).unwrap();
    let q = world.queries.row(2);
    let a = ranker.rank(0, world.users.row(0), q, 10).unwrap();
    let b = ranker.rank(0, world.users.row(7), q, 10).unwrap();
    assert_eq!(a, b, "talkrec ranking changed when only the user changed");
    println!("[PASS] talkrec ranking is independent of the user");
}
