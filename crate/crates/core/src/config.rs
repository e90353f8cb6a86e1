//! Flat JSON run configuration.
//!
//! Every key is optional and falls back to the defaults of
//! [`FederationConfig::default`]. Unknown keys, wrong types and out-of-range
//! values are rejected with an error naming the key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::aggregate::{Strategy, Variant};
use crate::error::{FlError, Result};
use crate::federation::{DataSource, FederationConfig, PartitionScheme};
use crate::model::{Activation, ModelKind};

pub const DEFAULT_CONCENTRATION: f64 = 0.5;

pub const KEYS: &[&str] = &[
    "activation",
    "adp_alpha",
    "batch_size",
    "beta1",
    "beta2",
    "checkpoint_every",
    "concentration",
    "data_source",
    "epsilon",
    "global_step_scale",
    "hidden_dim",
    "images_path",
    "labels_path",
    "local_epochs",
    "lr",
    "max_samples",
    "model_kind",
    "momentum",
    "num_clients",
    "partition",
    "rounds",
    "seed",
    "server_lr",
    "strategy",
    "synth_classes",
    "synth_dim",
    "synth_per_class",
    "synth_spread",
    "variant",
];

struct Fields {
    map: Map<String, Value>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key).filter(|v| !v.is_null())
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take(key)
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| FlError::config(key, format!("expected a non-negative integer, got {v}")))
            })
            .transpose()
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|x| x as usize))
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key)
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| FlError::config(key, format!("expected a number, got {v}")))
            })
            .transpose()
    }

    fn string(&mut self, key: &str) -> Result<Option<String>> {
        self.take(key)
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(FlError::config(key, format!("expected a string, got {other}"))),
            })
            .transpose()
    }

    fn parsed<T>(&mut self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Option<T>> {
        self.string(key)?
            .map(|s| parse(&s).ok_or_else(|| FlError::config(key, format!("unrecognized value `{s}`"))))
            .transpose()
    }
}

fn model_kind(s: &str) -> Option<ModelKind> {
    match s {
        "mlp" => Some(ModelKind::Mlp),
        "softmax_regression" => Some(ModelKind::SoftmaxRegression),
        _ => None,
    }
}

fn model_kind_name(k: ModelKind) -> &'static str {
    match k {
        ModelKind::Mlp => "mlp",
        ModelKind::SoftmaxRegression => "softmax_regression",
    }
}

fn activation(s: &str) -> Option<Activation> {
    match s {
        "relu" => Some(Activation::Relu),
        "sigmoid" => Some(Activation::Sigmoid),
        _ => None,
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Sigmoid => "sigmoid",
    }
}

/// Parses a config document from text.
pub fn parse_config_str(text: &str) -> Result<FederationConfig> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| FlError::config("<document>", format!("invalid JSON: {e}")))?;
    let Value::Object(map) = value else {
        return Err(FlError::config("<document>", "top level must be a JSON object"));
    };
    if let Some(unknown) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(FlError::config(unknown.as_str(), "unknown key"));
    }
    if let Some((key, _)) = map.iter().find(|(_, v)| v.is_object() || v.is_array()) {
        return Err(FlError::config(key.as_str(), "nested values are not allowed"));
    }
    let mut f = Fields { map };
    let mut cfg = FederationConfig::default();

    if let Some(x) = f.usize("num_clients")? {
        cfg.num_clients = x;
    }
    if let Some(x) = f.usize("rounds")? {
        cfg.rounds = x;
    }
    if let Some(x) = f.u64("seed")? {
        cfg.seed = x;
    }
    if let Some(x) = f.f64("global_step_scale")? {
        cfg.global_step_scale = x;
    }
    cfg.max_samples = f.usize("max_samples")?;
    cfg.checkpoint_every = f.usize("checkpoint_every")?;

    if let Some(k) = f.parsed("model_kind", model_kind)? {
        cfg.model.kind = k;
    }
    if let Some(x) = f.usize("hidden_dim")? {
        cfg.model.hidden_dim = x;
    }
    if let Some(a) = f.parsed("activation", activation)? {
        cfg.model.activation = a;
    }

    if let Some(x) = f.f64("lr")? {
        cfg.local.lr = x;
    }
    if let Some(x) = f.f64("momentum")? {
        cfg.local.momentum = x;
    }
    if let Some(x) = f.usize("batch_size")? {
        cfg.local.batch_size = x;
    }
    if let Some(x) = f.usize("local_epochs")? {
        cfg.local.local_epochs = x;
    }

    let agg = &mut cfg.aggregator;
    if let Some(s) = f.parsed("strategy", |s| s.parse::<Strategy>().ok())? {
        agg.strategy = s;
    }
    if let Some(v) = f.parsed("variant", |s| s.parse::<Variant>().ok())? {
        agg.variant = v;
    }
    for (key, slot) in [
        ("server_lr", &mut agg.server_lr),
        ("beta1", &mut agg.beta1),
        ("beta2", &mut agg.beta2),
        ("epsilon", &mut agg.epsilon),
        ("adp_alpha", &mut agg.adp_alpha),
    ] {
        if let Some(x) = f.f64(key)? {
            *slot = x;
        }
    }

    let concentration = f.f64("concentration")?.unwrap_or(DEFAULT_CONCENTRATION);
    cfg.partition = match f.string("partition")?.as_deref() {
        None | Some("iid") => PartitionScheme::Iid,
        Some("label_skew") => PartitionScheme::LabelSkew { concentration },
        Some(other) => return Err(FlError::config("partition", format!("unrecognized value `{other}`"))),
    };

    let images = f.string("images_path")?;
    let labels = f.string("labels_path")?;
    let DataSource::Synth {
        mut num_classes,
        mut per_class,
        mut dim,
        mut spread,
    } = DataSource::default()
    else {
        unreachable!("default data source is synthetic")
    };
    if let Some(x) = f.usize("synth_classes")? {
        num_classes = x;
    }
    if let Some(x) = f.usize("synth_per_class")? {
        per_class = x;
    }
    if let Some(x) = f.usize("synth_dim")? {
        dim = x;
    }
    if let Some(x) = f.f64("synth_spread")? {
        spread = x;
    }
    cfg.data_source = match f.string("data_source")?.as_deref() {
        None | Some("synth") => DataSource::Synth {
            num_classes,
            per_class,
            dim,
            spread,
        },
        Some("idx") => DataSource::Idx {
            images: PathBuf::from(images.ok_or_else(|| FlError::config("images_path", "required for idx data"))?),
            labels: PathBuf::from(labels.ok_or_else(|| FlError::config("labels_path", "required for idx data"))?),
        },
        Some(other) => return Err(FlError::config("data_source", format!("unrecognized value `{other}`"))),
    };

    debug_assert!(f.map.values().all(Value::is_null), "unconsumed keys: {:?}", f.map);
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<FederationConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| FlError::io(path, e))?;
    parse_config_str(&text)
}

/// Key-sorted map holding every setting that affects the run.
pub fn config_to_map(cfg: &FederationConfig) -> BTreeMap<&'static str, Value> {
    let mut m = BTreeMap::new();
    m.insert("num_clients", json!(cfg.num_clients));
    m.insert("rounds", json!(cfg.rounds));
    m.insert("seed", json!(cfg.seed));
    m.insert("global_step_scale", json!(cfg.global_step_scale));
    if let Some(k) = cfg.max_samples {
        m.insert("max_samples", json!(k));
    }
    if let Some(k) = cfg.checkpoint_every {
        m.insert("checkpoint_every", json!(k));
    }
    m.insert("model_kind", json!(model_kind_name(cfg.model.kind)));
    m.insert("hidden_dim", json!(cfg.model.hidden_dim));
    m.insert("activation", json!(activation_name(cfg.model.activation)));
    m.insert("lr", json!(cfg.local.lr));
    m.insert("momentum", json!(cfg.local.momentum));
    m.insert("batch_size", json!(cfg.local.batch_size));
    m.insert("local_epochs", json!(cfg.local.local_epochs));
    let a = &cfg.aggregator;
    m.insert("strategy", json!(a.strategy.as_str()));
    m.insert("variant", json!(a.variant.as_str()));
    m.insert("server_lr", json!(a.server_lr));
    m.insert("beta1", json!(a.beta1));
    m.insert("beta2", json!(a.beta2));
    m.insert("epsilon", json!(a.epsilon));
    m.insert("adp_alpha", json!(a.adp_alpha));
    match cfg.partition {
        PartitionScheme::Iid => {
            m.insert("partition", json!("iid"));
        }
        PartitionScheme::LabelSkew { concentration } => {
            m.insert("partition", json!("label_skew"));
            m.insert("concentration", json!(concentration));
        }
    }
    match &cfg.data_source {
        DataSource::Idx { images, labels } => {
            m.insert("data_source", json!("idx"));
            m.insert("images_path", json!(images.to_string_lossy()));
            m.insert("labels_path", json!(labels.to_string_lossy()));
        }
        DataSource::Synth {
            num_classes,
            per_class,
            dim,
            spread,
        } => {
            m.insert("data_source", json!("synth"));
            m.insert("synth_classes", json!(num_classes));
            m.insert("synth_per_class", json!(per_class));
            m.insert("synth_dim", json!(dim));
            m.insert("synth_spread", json!(spread));
        }
    }
    m
}

/// Canonical text: compact JSON with sorted keys.
pub fn canonical_config(cfg: &FederationConfig) -> String {
    serde_json::to_string(&config_to_map(cfg)).expect("config map serializes")
}

/// Human-friendly canonical form, used when writing configs to disk.
pub fn config_to_pretty_json(cfg: &FederationConfig) -> String {
    serde_json::to_string_pretty(&config_to_map(cfg)).expect("config map serializes")
}

/// Hex SHA-256 of the canonical config text.
pub fn config_hash(cfg: &FederationConfig) -> String {
    hex::encode(Sha256::digest(canonical_config(cfg).as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = parse_config_str("{}").unwrap();
        assert_eq!(cfg, FederationConfig::default());
        assert_eq!(cfg.num_clients, 3);
        assert_eq!(
            (cfg.local.lr, cfg.local.momentum, cfg.local.batch_size),
            (0.01, 0.9, 64)
        );
        assert_eq!(cfg.aggregator.server_lr, 1.0);
        assert_eq!((cfg.aggregator.beta1, cfg.aggregator.beta2), (0.9, 0.999));
    }

    fn key_of(err: FlError) -> String {
        match err {
            FlError::Config { key, .. } => key,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(parse_config_str(r#"{"rounds": 0}"#).unwrap_err()), "rounds");
        assert_eq!(key_of(parse_config_str(r#"{"roundz": 5}"#).unwrap_err()), "roundz");
        assert_eq!(key_of(parse_config_str(r#"{"lr": "fast"}"#).unwrap_err()), "lr");
        assert_eq!(
            key_of(parse_config_str(r#"{"batch_size": -1}"#).unwrap_err()),
            "batch_size"
        );
        assert_eq!(key_of(parse_config_str(r#"{"beta2": 1.0}"#).unwrap_err()), "beta2");
        assert_eq!(
            key_of(parse_config_str(r#"{"strategy": "fedsgd"}"#).unwrap_err()),
            "strategy"
        );
        assert_eq!(
            key_of(parse_config_str(r#"{"momentum": {"a": 1}}"#).unwrap_err()),
            "momentum"
        );
        assert_eq!(
            key_of(parse_config_str(r#"{"data_source": "idx"}"#).unwrap_err()),
            "images_path"
        );
        assert!(parse_config_str("[1]").unwrap_err().is_config());
    }

    #[test]
    fn parses_non_default_values() {
        let cfg = parse_config_str(
            r#"{"strategy": "fedopt", "variant": "yogi", "partition": "label_skew",
                "concentration": 0.3, "rounds": 7, "model_kind": "softmax_regression",
                "data_source": "idx", "images_path": "a.idx", "labels_path": "b.idx",
                "max_samples": 6000, "seed": 18446744073709551615}"#,
        )
        .unwrap();
        assert_eq!(cfg.aggregator.strategy, Strategy::FedOpt);
        assert_eq!(cfg.aggregator.variant, Variant::Yogi);
        assert_eq!(cfg.partition, PartitionScheme::LabelSkew { concentration: 0.3 });
        assert_eq!(cfg.rounds, 7);
        assert_eq!(cfg.max_samples, Some(6000));
        assert_eq!(cfg.seed, u64::MAX);
        assert!(matches!(cfg.data_source, DataSource::Idx { .. }));
    }

    #[test]
    fn roundtrip_is_identity() {
        for text in [
            "{}",
            r#"{"strategy": "fedadp", "adp_alpha": 3.5, "lr": 0.0123456789012345}"#,
            r#"{"partition": "label_skew", "concentration": 0.1, "checkpoint_every": 5}"#,
            r#"{"data_source": "idx", "images_path": "x", "labels_path": "y", "activation": "sigmoid"}"#,
        ] {
            let cfg = parse_config_str(text).unwrap();
            let again = parse_config_str(&canonical_config(&cfg)).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(canonical_config(&cfg), canonical_config(&again));
            assert_eq!(parse_config_str(&config_to_pretty_json(&cfg)).unwrap(), cfg);
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = parse_config_str("{}").unwrap();
        let b = parse_config_str(r#"{"num_clients": 3}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        let c = parse_config_str(r#"{"seed": 1}"#).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
