//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key must be known and may
//! appear once.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fxmm_tensor::Reduction;

use crate::model::ModelConfig;
use crate::moe::{MoeConfig, Placement, Site};
use crate::{Error, Result};

/// Parsed key/value pairs with their line numbers. Values are consumed by
/// the typed getters; [`finish`](Self::finish) rejects whatever is left.
#[derive(Debug, Clone)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }

    pub fn take_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// `auto` or missing gives `None`.
    pub fn take_auto(&mut self, key: &str) -> Result<Option<usize>> {
        match self.entries.get(key) {
            Some((_, v)) if v == "auto" => {
                self.entries.remove(key);
                Ok(None)
            }
            _ => self.take(key),
        }
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::Parse {
                line,
                message: format!("unknown key `{key}`"),
            }),
        }
    }
}

/// Named model variants for the ablation runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoMultiEmbedding,
    Ensemble,
    NoMoe,
    QMoe,
    KMoe,
    VMoe,
    UMoe,
    NoAttentionMoe,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoMultiEmbedding,
        Variant::Ensemble,
        Variant::NoMoe,
        Variant::QMoe,
        Variant::KMoe,
        Variant::VMoe,
        Variant::UMoe,
        Variant::NoAttentionMoe,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMultiEmbedding => "no-multi-embedding",
            Variant::Ensemble => "ensemble",
            Variant::NoMoe => "no-moe",
            Variant::QMoe => "qmoe",
            Variant::KMoe => "kmoe",
            Variant::VMoe => "vmoe",
            Variant::UMoe => "umoe",
            Variant::NoAttentionMoe => "no-attention-moe",
        }
    }

    /// Rewrites the parts of `cfg` the variant pins down.
    pub fn apply(self, cfg: &mut ModelConfig) {
        let ffn = Placement::dense().with(Site::Ffn);
        match self {
            Variant::Full | Variant::UMoe => cfg.moe.placement = Placement::standard(),
            Variant::NoMultiEmbedding => {
                cfg.moe.placement = Placement::standard();
                cfg.streams = 1;
            }
            Variant::Ensemble => {
                cfg.moe.placement = Placement::standard();
                cfg.ensemble = true;
            }
            Variant::NoMoe => cfg.moe.placement = Placement::dense(),
            Variant::QMoe => cfg.moe.placement = ffn.with(Site::Q),
            Variant::KMoe => cfg.moe.placement = ffn.with(Site::K),
            Variant::VMoe => cfg.moe.placement = ffn.with(Site::V),
            Variant::NoAttentionMoe => cfg.moe.placement = ffn,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

fn parse_reduction(s: &str) -> Result<Reduction> {
    match s {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        _ => Err(Error::config(format!("unknown reduction `{s}`"))),
    }
}

fn reduction_tag(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::Sum => "sum",
    }
}

fn auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

/// Reads the model keys from `kv`, starting from the defaults.
pub fn take_model(kv: &mut KeyValues) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let placement = match kv.take_str("placement") {
        Some(p) => Placement::parse(&p)?,
        None => d.moe.placement.clone(),
    };
    let reduction = match kv.take_str("reduction") {
        Some(r) => parse_reduction(&r)?,
        None => d.reduction,
    };
    Ok(ModelConfig {
        num_items: kv.take_or("num_items", d.num_items)?,
        dim: kv.take_or("dim", d.dim)?,
        streams: kv.take_or("streams", d.streams)?,
        layers: kv.take_or("layers", d.layers)?,
        heads: kv.take_or("heads", d.heads)?,
        head_dim: kv.take_auto("head_dim")?,
        ffn_dim: kv.take_auto("ffn_dim")?,
        time_buckets: kv.take_or("time_buckets", d.time_buckets)?,
        max_len: kv.take_or("max_len", d.max_len)?,
        moe: MoeConfig {
            experts: kv.take_or("experts", d.moe.experts)?,
            top_k: kv.take_or("top_k", d.moe.top_k)?,
            placement,
            noise: kv.take_or("gate_noise", d.moe.noise)?,
        },
        temperature: kv.take_or("temperature", d.temperature)?,
        reduction,
        ensemble: kv.take_or("ensemble", d.ensemble)?,
    })
}

/// Canonical text form; parses back to the same config.
pub fn model_to_text(cfg: &ModelConfig) -> String {
    let lines = [
        format!("num_items = {}", cfg.num_items),
        format!("dim = {}", cfg.dim),
        format!("streams = {}", cfg.streams),
        format!("layers = {}", cfg.layers),
        format!("heads = {}", cfg.heads),
        format!("head_dim = {}", auto(cfg.head_dim)),
        format!("ffn_dim = {}", auto(cfg.ffn_dim)),
        format!("time_buckets = {}", cfg.time_buckets),
        format!("max_len = {}", cfg.max_len),
        format!("experts = {}", cfg.moe.experts),
        format!("top_k = {}", cfg.moe.top_k),
        format!("placement = {}", cfg.moe.placement),
        format!("gate_noise = {}", cfg.moe.noise),
        format!("temperature = {:?}", cfg.temperature),
        format!("reduction = {}", reduction_tag(cfg.reduction)),
        format!("ensemble = {}", cfg.ensemble),
    ];
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut kv = KeyValues::parse(text)?;
    let cfg = take_model(&mut kv)?;
    kv.finish()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub deterministic: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_user_len: usize,
    pub min_item_count: usize,
    pub filter_seen: bool,
    pub eval_batch: usize,
    pub variant: Option<Variant>,
    /// `num_items` is filled in from the data.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            out: PathBuf::from("fxmm-run"),
            cache_dir: None,
            seed: 0,
            deterministic: false,
            lr: 1e-3,
            batch_size: 256,
            negatives: 128,
            max_epochs: 100,
            patience: 10,
            min_user_len: 3,
            min_item_count: 1,
            filter_seen: false,
            eval_batch: 256,
            variant: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parses config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let d = TrainConfig::default();
        let mut kv = KeyValues::parse(text)?;
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        let data = kv
            .take_str("data")
            .map(resolve)
            .ok_or_else(|| Error::config("missing required key `data`"))?;
        let out = resolve(kv.take_str("out").unwrap_or_else(|| d.out.display().to_string()));
        let cache_dir = kv.take_str("cache_dir").map(resolve);
        let variant = match kv.take_str("variant") {
            Some(v) => Some(v.parse()?),
            None => None,
        };
        let cfg = Self {
            data,
            out,
            cache_dir,
            seed: kv.take_or("seed", d.seed)?,
            deterministic: kv.take_or("deterministic", d.deterministic)?,
            lr: kv.take_or("lr", d.lr)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            negatives: kv.take_or("negatives", d.negatives)?,
            max_epochs: kv.take_or("max_epochs", d.max_epochs)?,
            patience: kv.take_or("patience", d.patience)?,
            min_user_len: kv.take_or("min_user_len", d.min_user_len)?,
            min_item_count: kv.take_or("min_item_count", d.min_item_count)?,
            filter_seen: kv.take_or("filter_seen", d.filter_seen)?,
            eval_batch: kv.take_or("eval_batch", d.eval_batch)?,
            variant,
            model: take_model(&mut kv)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if self.negatives == 0 {
            return Err(Error::config("negatives must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.min_user_len < 3 {
            return Err(Error::config("min_user_len below 3 breaks the leave-one-out split"));
        }
        Ok(())
    }

    /// Model config after the variant override, for `num_items` items.
    pub fn resolved_model(&self, num_items: usize) -> ModelConfig {
        let mut m = self.model.clone();
        m.num_items = num_items;
        if let Some(v) = self.variant {
            v.apply(&mut m);
        }
        m
    }

    /// Canonical text of everything that affects training.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "data = {}\nseed = {}\ndeterministic = {}\nlr = {:?}\nbatch_size = {}\nnegatives = {}\n\
             max_epochs = {}\npatience = {}\nmin_user_len = {}\nmin_item_count = {}\n\
             filter_seen = {}\neval_batch = {}\n",
            self.data.display(),
            self.seed,
            self.deterministic,
            self.lr,
            self.batch_size,
            self.negatives,
            self.max_epochs,
            self.patience,
            self.min_user_len,
            self.min_item_count,
            self.filter_seen,
            self.eval_batch,
        );
        if let Some(v) = self.variant {
            out.push_str(&format!("variant = {v}\n"));
        }
        out.push_str(&model_to_text(&self.model));
        out
    }
}
