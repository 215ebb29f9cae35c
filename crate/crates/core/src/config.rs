//! Flat JSON run configuration.
//!
//! A run config is one JSON object whose keys cover both the training setup
//! and the dataset. Every key is optional, though `task` must come from either
//! the file or the caller. Unknown keys are rejected.
//!
//! ```json
//! {"task": "sne", "divergence": "TV", "epochs": 500, "lr": 0.05,
//!  "generator": "gaussian_blobs", "n": 300, "d": 10, "classes": 3, "separation": 8}
//! ```
//!
//! The config hash is 64-bit FNV-1a over the canonical text: the compact JSON
//! serialization of the parsed config, every key present in a fixed order.
//! Whitespace and key order in the file do not affect it. Absent keys
//! serialize as `null`, so omitting a key and spelling out its default are
//! different configs.

use std::hash::Hasher;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{DatasetSpec, Generator};
use crate::divergence::Divergence;
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::model::EncoderKind;
use crate::trainers::{default_scale, LossConfig, SneMode, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub divergence: Option<Divergence>,
    #[serde(default)]
    pub kernel: Option<KernelFamily>,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub perplexity: Option<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub clusters: Option<usize>,
    #[serde(default)]
    pub out_dim: Option<usize>,
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub encoder: Option<EncoderKind>,
    #[serde(default)]
    pub mode: Option<SneMode>,
    #[serde(default)]
    pub init_std: Option<f64>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub metric_every: Option<usize>,
    #[serde(default)]
    pub knn_k: Option<usize>,
    #[serde(default)]
    pub collapse_low: Option<f64>,
    #[serde(default)]
    pub collapse_high: Option<f64>,
    #[serde(default)]
    pub collapse_window: Option<usize>,
    #[serde(default)]
    pub generator: Option<Generator>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub separation: Option<f64>,
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn config_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(config_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }

    /// Copy with `key` set to `value`. The value is read as JSON when it
    /// parses as such, and as a string otherwise, so `lr=0.1` and
    /// `divergence=KL` both work.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut obj: Map<String, Value> = match serde_json::to_value(self).map_err(config_err)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if !obj.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let v = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        obj.insert(key.to_string(), v);
        serde_json::from_value(Value::Object(obj))
            .map_err(|e| Error::Config(format!("{key}={value}: {e}")))
    }

    pub fn task(&self) -> Result<Task> {
        self.task
            .ok_or_else(|| Error::Config("no task given (sne, cluster or supcon)".into()))
    }

    /// Training configuration with defaults filled in, validated.
    pub fn loss_config(&self) -> Result<LossConfig> {
        let task = self.task()?;
        let mut c = LossConfig::new(task, self.divergence.unwrap_or(Divergence::Kl));
        if let Some(family) = self.kernel {
            c = c.with_kernel(family);
        }
        c.kernel = KernelSpec {
            family: c.kernel.family,
            scale: self
                .scale
                .unwrap_or_else(|| default_scale(task, c.kernel.family)),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            batch_size, epochs, lr, seed, perplexity, k, clusters, out_dim, hidden, encoder,
            mode, init_std, metric_every, knn_k, collapse_low, collapse_high, collapse_window
        );
        c.clip_norm = self.clip_norm;
        c.validate()?;
        Ok(c)
    }

    /// Dataset specification with defaults filled in, validated.
    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let spec = DatasetSpec {
            generator: self.generator.unwrap_or(if self.path.is_some() {
                Generator::File
            } else {
                Generator::GaussianBlobs
            }),
            n: self.n.unwrap_or(300),
            d: self.d.unwrap_or(10),
            classes: self.classes.unwrap_or(3),
            separation: self.separation.unwrap_or(8.0),
            seed: self.data_seed.unwrap_or(0),
            path: self.path.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// One point of a sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Sub-directory name, e.g. `divergence-KL` or `divergence-KL_lr-0.1`.
    pub name: String,
    pub config: RunConfig,
}

/// Parses `key=v1,v2,...`.
pub fn parse_sweep_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep {spec:?} is not of the form key=v1,v2")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if key.trim().is_empty() || values.iter().any(String::is_empty) {
        return Err(Error::Config(format!("sweep {spec:?} has an empty key or value")));
    }
    Ok((key.trim().to_string(), values))
}

/// Cartesian product of the sweep axes in declaration order (the last axis
/// varies fastest). Grid point `g` gets seed `base seed + g`, unless `seed`
/// is itself swept.
pub fn expand_sweep(base: &RunConfig, axes: &[(String, Vec<String>)]) -> Result<Vec<SweepPoint>> {
    let mut points = vec![(Vec::<String>::new(), base.clone())];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for (names, cfg) in &points {
            for v in values {
                let mut names = names.clone();
                names.push(format!("{key}-{v}"));
                next.push((names, cfg.with_override(key, v)?));
            }
        }
        points = next;
    }
    let seed_swept = axes.iter().any(|(k, _)| k == "seed");
    let base_seed = base.seed.unwrap_or(0);
    Ok(points
        .into_iter()
        .enumerate()
        .map(|(g, (names, mut config))| {
            if !seed_swept && !axes.is_empty() {
                config.seed = Some(base_seed.wrapping_add(g as u64));
            }
            SweepPoint {
                name: names.join("_"),
                config,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse(r#"{"task":"sne","epoch":3}"#).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("epoch")), "{err}");
        let no_task = RunConfig::parse(r#"{"divergence":"KL"}"#).unwrap();
        assert!(no_task.loss_config().is_err());
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = RunConfig::parse(r#"{"task":"sne","lr":0.5,"divergence":"TV"}"#).unwrap();
        let b = RunConfig::parse("{\n  \"divergence\": \"TV\",\n  \"task\": \"sne\", \"lr\": 5e-1\n}")
            .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = a.with_override("lr", "0.25").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn defaults_and_validation() {
        let c = RunConfig::parse(r#"{"task":"supcon","kernel":"distance"}"#).unwrap();
        let lc = c.loss_config().unwrap();
        assert_eq!(lc.kernel, KernelSpec::distance(1.0));
        assert_eq!(lc.divergence, Divergence::Kl);
        let bad = RunConfig::parse(r#"{"task":"cluster","batch_size":2}"#).unwrap();
        let msg = bad.loss_config().unwrap_err().to_string();
        assert!(msg.contains("batch_size must be >= 4"), "{msg}");
        let spec = RunConfig::parse(r#"{"task":"sne","path":"x.csv"}"#)
            .unwrap()
            .dataset_spec()
            .unwrap();
        assert_eq!(spec.generator, Generator::File);
    }

    #[test]
    fn sweep_expansion_order_and_seeds() {
        let base = RunConfig::parse(r#"{"task":"sne","seed":10}"#).unwrap();
        let axes = vec![
            parse_sweep_axis("divergence=KL,TV").unwrap(),
            parse_sweep_axis("lr=0.1,0.2").unwrap(),
        ];
        let pts = expand_sweep(&base, &axes).unwrap();
        let names: Vec<&str> = pts.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            ["divergence-KL_lr-0.1", "divergence-KL_lr-0.2", "divergence-TV_lr-0.1", "divergence-TV_lr-0.2"]
        );
        assert_eq!(pts[3].config.divergence, Some(Divergence::Tv));
        assert_eq!(pts[3].config.lr, Some(0.2));
        assert_eq!(pts.iter().map(|p| p.config.seed.unwrap()).collect::<Vec<_>>(), [10, 11, 12, 13]);
        assert!(expand_sweep(&base, &[parse_sweep_axis("nope=1").unwrap()]).is_err());
        assert!(expand_sweep(&base, &[parse_sweep_axis("divergence=XX").unwrap()]).is_err());
        assert!(parse_sweep_axis("divergence").is_err());
    }
}
