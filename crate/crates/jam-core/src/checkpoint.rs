//! Model container file: one JSON header line declaring the model kind,
//! dimensions, and matrix list, followed by the declared matrices as
//! consecutive JAMB blocks. Baselines reuse the same container with their
//! own kind tag. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{TalkRecParams, TwoTowerParams};
use crate::data::{read_matrix, write_matrix};
use crate::error::{JamError, Result};
use crate::linalg::{DenseMatrix, DenseVector};
use crate::model::{AttentionParams, GateParams, JamParams, MixerKind, ProjectionBias};

const FORMAT: &str = "jam-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixDecl {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub model_kind: String,
    pub d: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixer: Option<MixerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub user_dim: usize,
    pub query_dim: usize,
    pub modality_names: Vec<String>,
    pub modality_dims: Vec<usize>,
    pub matrices: Vec<MatrixDecl>,
}

#[derive(Debug, Clone)]
pub enum CheckpointModel {
    Jam(JamParams),
    TwoTower(TwoTowerParams),
    TalkRec(TalkRecParams),
}

impl CheckpointModel {
    pub fn kind(&self) -> &'static str {
        match self {
            CheckpointModel::Jam(_) => "jam",
            CheckpointModel::TwoTower(_) => "twotower",
            CheckpointModel::TalkRec(_) => "talkrec",
        }
    }
}

fn vec_as_matrix(v: &DenseVector) -> DenseMatrix {
    DenseMatrix::from_vec(1, v.dim(), v.as_slice().to_vec()).expect("1 x n")
}

fn matrix_as_vec(m: &DenseMatrix, what: &str) -> Result<DenseVector> {
    if m.rows() != 1 {
        return Err(JamError::Format(format!("{what}: expected a 1-row block")));
    }
    Ok(DenseVector::from_vec(m.data().to_vec()))
}

/// Named matrix blocks in serialization order.
fn blocks_of(model: &CheckpointModel) -> Vec<(String, DenseMatrix)> {
    let mut out: Vec<(String, DenseMatrix)> = Vec::new();
    match model {
        CheckpointModel::Jam(p) => {
            out.push(("w_user".into(), p.w_user.clone()));
            out.push(("w_query".into(), p.w_query.clone()));
            for (m, w) in p.w_item.iter().enumerate() {
                out.push((format!("w_item.{m}"), w.clone()));
            }
            if let Some(b) = &p.bias {
                out.push(("b_user".into(), vec_as_matrix(&b.user)));
                out.push(("b_query".into(), vec_as_matrix(&b.query)));
                for (m, v) in b.item.iter().enumerate() {
                    out.push((format!("b_item.{m}"), vec_as_matrix(v)));
                }
            }
            if let Some(a) = &p.attention {
                for (m, w) in a.key.iter().enumerate() {
                    out.push((format!("attn_key.{m}"), w.clone()));
                }
                out.push(("attn_query".into(), a.query.clone()));
            }
            if let Some(g) = &p.gates {
                for (m, w) in g.gate_item.iter().enumerate() {
                    out.push((format!("gate_item.{m}"), w.clone()));
                }
                out.push(("gate_query".into(), g.gate_query.clone()));
                for (m, w) in g.noise_item.iter().enumerate() {
                    out.push((format!("noise_item.{m}"), w.clone()));
                }
                out.push(("noise_query".into(), g.noise_query.clone()));
            }
        }
        CheckpointModel::TwoTower(p) => {
            out.push(("user_w1".into(), p.user_w1.clone()));
            out.push(("user_b1".into(), vec_as_matrix(&p.user_b1)));
            out.push(("user_w2".into(), p.user_w2.clone()));
            out.push(("user_b2".into(), vec_as_matrix(&p.user_b2)));
            out.push(("item_w1".into(), p.item_w1.clone()));
            out.push(("item_b1".into(), vec_as_matrix(&p.item_b1)));
            out.push(("item_w2".into(), p.item_w2.clone()));
            out.push(("item_b2".into(), vec_as_matrix(&p.item_b2)));
        }
        CheckpointModel::TalkRec(p) => {
            for (m, w) in p.proj.iter().enumerate() {
                out.push((format!("proj.{m}"), w.clone()));
            }
            out.push(("query_proj".into(), p.query_proj.clone()));
        }
    }
    out
}

pub fn save_checkpoint(
    path: &Path,
    model: &CheckpointModel,
    modality_names: &[String],
) -> Result<()> {
    let blocks = blocks_of(model);
    let (d, mixer, hidden, tau, user_dim, query_dim, modality_dims) = match model {
        CheckpointModel::Jam(p) => {
            let dims = p.dims();
            (p.d, Some(p.mixer), None, None, dims.user_dim, dims.query_dim, dims.modality_dims)
        }
        CheckpointModel::TwoTower(p) => (
            p.d,
            None,
            Some(p.hidden),
            None,
            p.user_w1.cols(),
            0,
            vec![p.item_input_dim()],
        ),
        CheckpointModel::TalkRec(p) => (
            p.d,
            None,
            None,
            Some(p.tau),
            0,
            p.query_proj.cols(),
            p.proj.iter().map(DenseMatrix::cols).collect(),
        ),
    };
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        version: VERSION,
        model_kind: model.kind().into(),
        d,
        mixer,
        hidden,
        tau,
        user_dim,
        query_dim,
        modality_names: modality_names.to_vec(),
        modality_dims,
        matrices: blocks
            .iter()
            .map(|(name, m)| MatrixDecl { name: name.clone(), rows: m.rows(), cols: m.cols() })
            .collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &meta)?;
    w.write_all(b"\n")?;
    for (_, m) in &blocks {
        write_matrix(&mut w, m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointModel, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_str(header.trim_end())
        .map_err(|e| JamError::Format(format!("{}: bad header: {e}", path.display())))?;
    if meta.format != FORMAT {
        return Err(JamError::Format(format!("{}: not a checkpoint file", path.display())));
    }
    if meta.version != VERSION {
        return Err(JamError::Format(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            meta.version
        )));
    }
    let mut by_name = std::collections::HashMap::new();
    for decl in &meta.matrices {
        let m = read_matrix(&mut r, &decl.name)?;
        if m.rows() != decl.rows || m.cols() != decl.cols {
            return Err(JamError::Format(format!(
                "{}: block {} is {}x{}, header declares {}x{}",
                path.display(),
                decl.name,
                m.rows(),
                m.cols(),
                decl.rows,
                decl.cols
            )));
        }
        by_name.insert(decl.name.clone(), m);
    }
    let has_bias = by_name.contains_key("b_user");
    let mut take = |name: &str| -> Result<DenseMatrix> {
        by_name
            .remove(name)
            .ok_or_else(|| JamError::Format(format!("checkpoint missing block {name:?}")))
    };
    let n_mod = meta.modality_dims.len();
    let model = match meta.model_kind.as_str() {
        "jam" => {
            let mixer = meta
                .mixer
                .ok_or_else(|| JamError::Format("jam checkpoint without mixer".into()))?;
            let w_user = take("w_user")?;
            let w_query = take("w_query")?;
            let w_item: Vec<DenseMatrix> = (0..n_mod)
                .map(|m| take(&format!("w_item.{m}")))
                .collect::<Result<_>>()?;
            let bias = if has_bias {
                Some(ProjectionBias {
                    user: matrix_as_vec(&take("b_user")?, "b_user")?,
                    query: matrix_as_vec(&take("b_query")?, "b_query")?,
                    item: (0..n_mod)
                        .map(|m| matrix_as_vec(&take(&format!("b_item.{m}"))?, "b_item"))
                        .collect::<Result<_>>()?,
                })
            } else {
                None
            };
            let attention = if matches!(mixer, MixerKind::Cross) {
                Some(AttentionParams {
                    key: (0..n_mod)
                        .map(|m| take(&format!("attn_key.{m}")))
                        .collect::<Result<_>>()?,
                    query: take("attn_query")?,
                })
            } else {
                None
            };
            let gates = if matches!(mixer, MixerKind::Moe { .. }) {
                Some(GateParams {
                    gate_item: (0..n_mod)
                        .map(|m| take(&format!("gate_item.{m}")))
                        .collect::<Result<_>>()?,
                    gate_query: take("gate_query")?,
                    noise_item: (0..n_mod)
                        .map(|m| take(&format!("noise_item.{m}")))
                        .collect::<Result<_>>()?,
                    noise_query: take("noise_query")?,
                })
            } else {
                None
            };
            CheckpointModel::Jam(JamParams {
                d: meta.d,
                mixer,
                w_user,
                w_query,
                w_item,
                bias,
                attention,
                gates,
            })
        }
        "twotower" => {
            let hidden = meta
                .hidden
                .ok_or_else(|| JamError::Format("twotower checkpoint without hidden".into()))?;
            CheckpointModel::TwoTower(TwoTowerParams {
                d: meta.d,
                hidden,
                user_w1: take("user_w1")?,
                user_b1: matrix_as_vec(&take("user_b1")?, "user_b1")?,
                user_w2: take("user_w2")?,
                user_b2: matrix_as_vec(&take("user_b2")?, "user_b2")?,
                item_w1: take("item_w1")?,
                item_b1: matrix_as_vec(&take("item_b1")?, "item_b1")?,
                item_w2: take("item_w2")?,
                item_b2: matrix_as_vec(&take("item_b2")?, "item_b2")?,
            })
        }
        "talkrec" => {
            let tau = meta
                .tau
                .ok_or_else(|| JamError::Format("talkrec checkpoint without tau".into()))?;
            CheckpointModel::TalkRec(TalkRecParams {
                d: meta.d,
                tau,
                proj: (0..n_mod).map(|m| take(&format!("proj.{m}"))).collect::<Result<_>>()?,
                query_proj: take("query_proj")?,
            })
        }
        other => {
            return Err(JamError::Format(format!("unknown model kind {other:?}")));
        }
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use crate::model::ModelDims;

    fn dims() -> ModelDims {
        ModelDims { user_dim: 5, query_dim: 6, modality_dims: vec![3, 4, 5] }
    }

    fn names() -> Vec<String> {
        vec!["audio".into(), "lyrics".into(), "cf".into()]
    }

    fn assert_same_params(a: &[&[f32]], b: &[&[f32]]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn jam_checkpoint_round_trip_bit_exact() {
        use crate::train::Trainable;
        let dir = tempfile::tempdir().unwrap();
        for (i, mixer) in [
            MixerKind::Avg,
            MixerKind::Cross,
            MixerKind::Moe { k: 2, noise_enabled: true },
        ]
        .into_iter()
        .enumerate()
        {
            for use_bias in [false, true] {
                let mut rng = SeededRng::new(42 + i as u64);
                let p = JamParams::init(&dims(), 7, mixer, use_bias, &mut rng).unwrap();
                let path = dir.path().join(format!("m{i}_{use_bias}.ckpt"));
                save_checkpoint(&path, &CheckpointModel::Jam(p.clone()), &names()).unwrap();
                let (loaded, meta) = load_checkpoint(&path).unwrap();
                assert_eq!(meta.model_kind, "jam");
                assert_eq!(meta.mixer, Some(mixer));
                assert_eq!(meta.modality_names, names());
                let CheckpointModel::Jam(q) = loaded else { panic!("wrong kind") };
                assert_eq!(q.mixer, mixer);
                assert_same_params(&p.param_slices(), &q.param_slices());
            }
        }
    }

    #[test]
    fn baseline_checkpoints_round_trip() {
        use crate::train::Trainable;
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(1);

        let tt = crate::baselines::TwoTowerParams::init(&dims(), 7, 9, &mut rng);
        let path = dir.path().join("tt.ckpt");
        save_checkpoint(&path, &CheckpointModel::TwoTower(tt.clone()), &names()).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.model_kind, "twotower");
        assert_eq!(meta.hidden, Some(9));
        let CheckpointModel::TwoTower(q) = loaded else { panic!("wrong kind") };
        assert_same_params(&tt.param_slices(), &q.param_slices());

        let tr = crate::baselines::TalkRecParams::init(&dims(), 7, 0.07, &mut rng).unwrap();
        let path = dir.path().join("tr.ckpt");
        save_checkpoint(&path, &CheckpointModel::TalkRec(tr.clone()), &names()).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.model_kind, "talkrec");
        assert_eq!(meta.tau, Some(0.07));
        let CheckpointModel::TalkRec(q) = loaded else { panic!("wrong kind") };
        assert_same_params(&tr.param_slices(), &q.param_slices());
    }

    #[test]
    fn corrupt_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"{\"format\":\"nope\"}\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(JamError::Format(_))));
    }
}
