//! Flat key=value configuration with CLI-flag overrides. Precedence:
//! environment (JAM_EMBED_URL only) > CLI flags > config file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct AppConfig {
    pub catalog: Option<PathBuf>,
    pub users_matrix: Option<PathBuf>,
    pub users_ids: Option<PathBuf>,
    pub queries_matrix: Option<PathBuf>,
    pub queries_ids: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,

    pub model: Option<String>,
    pub mixer: Option<String>,
    pub moe_k: Option<usize>,
    pub moe_noise: Option<bool>,
    pub hidden: Option<usize>,
    pub tau: Option<f64>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub n_negatives: Option<usize>,
    pub lr_max: Option<f64>,
    pub lr_min: Option<f64>,
    pub weight_decay: Option<f64>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub d: Option<usize>,
    pub use_bias: Option<bool>,

    pub port: Option<u16>,
    pub embed_url: Option<String>,
    pub k: Option<usize>,
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("config key {key}: expected a bool, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {v:?}")))
}

impl AppConfig {
    /// Parse `key = value` lines; `#` starts a comment; unknown keys are
    /// usage errors. Relative paths resolve against the config file's dir.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut map = HashMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    no + 1
                )));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = AppConfig::default();
        let resolve = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        for (k, v) in map {
            match k.as_str() {
                "catalog" => cfg.catalog = Some(resolve(&v)),
                "users_matrix" => cfg.users_matrix = Some(resolve(&v)),
                "users_ids" => cfg.users_ids = Some(resolve(&v)),
                "queries_matrix" => cfg.queries_matrix = Some(resolve(&v)),
                "queries_ids" => cfg.queries_ids = Some(resolve(&v)),
                "triplets" => cfg.triplets = Some(resolve(&v)),
                "checkpoint" => cfg.checkpoint = Some(resolve(&v)),
                "out_dir" => cfg.out_dir = Some(resolve(&v)),
                "model" => cfg.model = Some(v),
                "mixer" => cfg.mixer = Some(v),
                "moe_k" => cfg.moe_k = Some(parse_num(&k, &v)?),
                "moe_noise" => cfg.moe_noise = Some(parse_bool(&k, &v)?),
                "hidden" => cfg.hidden = Some(parse_num(&k, &v)?),
                "tau" => cfg.tau = Some(parse_num(&k, &v)?),
                "epochs" => cfg.epochs = Some(parse_num(&k, &v)?),
                "batch_size" => cfg.batch_size = Some(parse_num(&k, &v)?),
                "n_negatives" => cfg.n_negatives = Some(parse_num(&k, &v)?),
                "lr_max" => cfg.lr_max = Some(parse_num(&k, &v)?),
                "lr_min" => cfg.lr_min = Some(parse_num(&k, &v)?),
                "weight_decay" => cfg.weight_decay = Some(parse_num(&k, &v)?),
                "patience" => cfg.patience = Some(parse_num(&k, &v)?),
                "seed" => cfg.seed = Some(parse_num(&k, &v)?),
                "d" => cfg.d = Some(parse_num(&k, &v)?),
                "use_bias" => cfg.use_bias = Some(parse_bool(&k, &v)?),
                "port" => cfg.port = Some(parse_num(&k, &v)?),
                "embed_url" => cfg.embed_url = Some(v),
                "k" => cfg.k = Some(parse_num(&k, &v)?),
                other => {
                    return Err(CliError::Usage(format!("unknown config key {other:?}")));
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        if let Ok(url) = std::env::var("JAM_EMBED_URL") {
            if !url.is_empty() {
                cfg.embed_url = Some(url);
            }
        }
        Ok(cfg)
    }

    pub fn require_path<'a>(
        &self,
        field: &'a Option<PathBuf>,
        name: &str,
    ) -> Result<&'a Path, CliError> {
        field
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("missing required setting {name}")))
    }

    pub fn train_config(&self) -> jam_core::train::TrainConfig {
        let mut tc = jam_core::train::TrainConfig::default();
        if let Some(v) = self.epochs {
            tc.epochs = v;
        }
        if let Some(v) = self.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = self.n_negatives {
            tc.n_negatives = v;
        }
        if let Some(v) = self.lr_max {
            tc.lr_max = v;
        }
        if let Some(v) = self.lr_min {
            tc.lr_min = v;
        }
        if let Some(v) = self.weight_decay {
            tc.weight_decay = v;
        }
        if let Some(v) = self.patience {
            tc.patience = v;
        }
        if let Some(v) = self.seed {
            tc.seed = v;
        }
        if let Some(v) = self.d {
            tc.d = v;
        }
        if let Some(v) = self.use_bias {
            tc.use_bias = v;
        }
        tc
    }

    pub fn mixer_kind(&self) -> Result<jam_core::model::MixerKind, CliError> {
        use jam_core::model::MixerKind;
        match self.mixer.as_deref().unwrap_or("avg") {
            "avg" => Ok(MixerKind::Avg),
            "cross" => Ok(MixerKind::Cross),
            "moe" => Ok(MixerKind::Moe {
                k: self.moe_k.unwrap_or(2),
                noise_enabled: self.moe_noise.unwrap_or(true),
            }),
            other => Err(CliError::Usage(format!(
                "unknown mixer {other:?} (expected avg, cross, or moe)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_keys_and_rejects_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("jam.conf");
        std::fs::write(
            &path,
            "# comment\ncatalog = world/catalog.json\nepochs = 7\nlr_max = 0.002\nmoe_noise = false\nmixer=moe\n",
        )
        .unwrap();
        let cfg = AppConfig::from_file(&path).unwrap();
        assert_eq!(cfg.catalog.as_deref(), Some(dir.path().join("world/catalog.json").as_path()));
        assert_eq!(cfg.epochs, Some(7));
        assert_eq!(cfg.lr_max, Some(0.002));
        assert_eq!(cfg.moe_noise, Some(false));
        assert!(matches!(
            cfg.mixer_kind().unwrap(),
            jam_core::model::MixerKind::Moe { k: 2, noise_enabled: false }
        ));

        std::fs::write(&path, "no_such_key = 1\n").unwrap();
        assert!(matches!(AppConfig::from_file(&path), Err(CliError::Usage(_))));
    }
}
