//! Plain-text `key = value` run configuration.
//!
//! One or more `key=value` pairs per line, `#` starts a comment, hyphens in
//! keys are read as underscores. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{io_err, Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Keys mapping onto [`ModelConfig`], with a short description.
pub const MODEL_KEYS: &[(&str, &str)] = &[
    ("backbone", "plain | residual | dense"),
    (
        "aggregator",
        "edgeconv | mrgcn | graphsage | graphsage-normalized | gin",
    ),
    ("depth", "number of GCN layers"),
    ("width", "filters per GCN layer"),
    ("k", "neighbors per vertex"),
    ("dilation", "on | off: linearly growing dilation"),
    ("d_max", "dilation cap"),
    ("epsilon", "stochastic dilation probability"),
    ("stochastic", "on | off; off forces epsilon = 0"),
    (
        "dynamic",
        "on | off: recompute k-NN in feature space per layer",
    ),
    ("num_classes", "number of segmentation classes"),
    ("dropout", "dropout rate in the prediction block"),
    ("aux_dim", "per-point input features beyond xyz"),
    ("fusion_width", "width of the fusion 1x1 convolution"),
    ("head_width1", "width of the first prediction layer"),
    ("head_width2", "width of the second prediction layer"),
    ("mlp_depth", "units in each GCN update MLP"),
];

/// Keys mapping onto [`TrainConfig`].
pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("lr", "Adam base learning rate"),
    (
        "decay_steps",
        "optimizer steps between learning-rate decays",
    ),
    ("decay_factor", "learning-rate multiplier per decay"),
    ("batch_size", "blocks per optimizer step"),
    ("epochs", "passes over the training set"),
    ("seed", "initialization / shuffling seed"),
];

/// Keys that must be present in a training config.
pub const REQUIRED_TRAIN_KEYS: &[&str] = &["backbone", "depth", "width", "k"];

/// Keys mapping onto [`SynthSpec`].
pub const SYNTH_KEYS: &[(&str, &str)] = &[
    ("blocks", "number of blocks"),
    ("points", "points per block"),
    ("classes", "number of classes"),
    (
        "shape_mix",
        "cluster,plane,bar weights (normalized to sum 1)",
    ),
    ("noise", "Gaussian coordinate noise sigma"),
    ("seed", "generator seed"),
];

/// Parsed key/value pairs with keys normalized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

/// Removes whitespace on either side of every `=`.
fn tighten(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.trim().chars().peekable();
    while let Some(c) = chars.next() {
        if c == '=' {
            while out.ends_with(char::is_whitespace) {
                out.pop();
            }
            out.push('=');
            while chars.peek().is_some_and(|c| c.is_whitespace()) {
                chars.next();
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("");
            for token in tighten(line).split_whitespace() {
                let Some((k, v)) = token.split_once('=') else {
                    return Err(Error::Config(format!(
                        "line {}: expected key=value, got {token:?}",
                        i + 1
                    )));
                };
                if k.is_empty() || v.is_empty() {
                    return Err(Error::Config(format!(
                        "line {}: malformed pair {token:?}",
                        i + 1
                    )));
                }
                cfg.set(k, v);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(normalize_key(key), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(&normalize_key(key)).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on the first key outside `allowed`.
    pub fn reject_unknown(&self, allowed: &[&[(&str, &str)]]) -> Result<()> {
        for key in self.keys() {
            if !allowed.iter().any(|set| set.iter().any(|(k, _)| *k == key)) {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
        }
        Ok(())
    }

    pub fn require(&self, keys: &[&str]) -> Result<()> {
        match keys.iter().find(|k| !self.contains(k)) {
            Some(k) => Err(Error::Config(format!("missing required key {k:?}"))),
            None => Ok(()),
        }
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn apply_bool(&self, key: &str, slot: &mut bool) -> Result<()> {
        if let Some(v) = self.get(key) {
            *slot = parse_bool(key, v)?;
        }
        Ok(())
    }

    /// Overlays the model keys present on `base` and validates the result.
    pub fn model_config(&self, base: ModelConfig) -> Result<ModelConfig> {
        let mut m = base;
        if let Some(v) = self.get("backbone") {
            m.backbone = v.parse()?;
        }
        if let Some(v) = self.get("aggregator") {
            m.aggregator = v.parse()?;
        }
        self.apply("depth", &mut m.depth)?;
        self.apply("width", &mut m.width)?;
        self.apply("k", &mut m.k)?;
        self.apply_bool("dilation", &mut m.dilation)?;
        self.apply("d_max", &mut m.d_max)?;
        self.apply("epsilon", &mut m.epsilon)?;
        if let Some(v) = self.get("stochastic") {
            if !parse_bool("stochastic", v)? {
                m.epsilon = 0.0;
            }
        }
        self.apply_bool("dynamic", &mut m.dynamic_edges)?;
        self.apply("num_classes", &mut m.num_classes)?;
        self.apply("dropout", &mut m.dropout)?;
        self.apply("aux_dim", &mut m.aux_dim)?;
        self.apply("fusion_width", &mut m.fusion_width)?;
        self.apply("head_width1", &mut m.head_widths[0])?;
        self.apply("head_width2", &mut m.head_widths[1])?;
        self.apply("mlp_depth", &mut m.mlp_depth)?;
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut t = base;
        self.apply("lr", &mut t.lr)?;
        self.apply("decay_steps", &mut t.decay_steps)?;
        self.apply("decay_factor", &mut t.decay_factor)?;
        self.apply("batch_size", &mut t.batch_size)?;
        self.apply("epochs", &mut t.epochs)?;
        self.apply("seed", &mut t.seed)?;
        t.validate()?;
        Ok(t)
    }

    pub fn synth_spec(&self, base: SynthSpec) -> Result<SynthSpec> {
        let mut s = base;
        self.apply("blocks", &mut s.num_blocks)?;
        self.apply("points", &mut s.points_per_block)?;
        self.apply("classes", &mut s.num_classes)?;
        self.apply("noise", &mut s.noise_sigma)?;
        self.apply("seed", &mut s.seed)?;
        if let Some(v) = self.get("shape_mix") {
            let parts: Vec<f64> = v
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("shape_mix: cannot parse {v:?}")))?;
            let mix: [f64; 3] = parts
                .try_into()
                .map_err(|_| Error::Config("shape_mix needs three weights".into()))?;
            let total: f64 = mix.iter().sum();
            s.shape_mix = if total > 0.0 {
                mix.map(|w| w / total)
            } else {
                mix
            };
        }
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(s)
    }
}

/// Serializes every model key, one `key = value` per line.
pub fn model_config_string(m: &ModelConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
    put("backbone", m.backbone.to_string());
    put("aggregator", m.aggregator.to_string());
    put("depth", m.depth.to_string());
    put("width", m.width.to_string());
    put("k", m.k.to_string());
    put("dilation", on_off(m.dilation).into());
    put("d_max", m.d_max.to_string());
    put("epsilon", format!("{:?}", m.epsilon));
    put("dynamic", on_off(m.dynamic_edges).into());
    put("num_classes", m.num_classes.to_string());
    put("dropout", format!("{:?}", m.dropout));
    put("aux_dim", m.aux_dim.to_string());
    put("fusion_width", m.fusion_width.to_string());
    put("head_width1", m.head_widths[0].to_string());
    put("head_width2", m.head_widths[1].to_string());
    put("mlp_depth", m.mlp_depth.to_string());
    out
}

/// Reads a file written by [`model_config_string`]; every model key is required.
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let rc = RunConfig::parse(text)?;
    rc.reject_unknown(&[MODEL_KEYS])?;
    let all: Vec<&str> = MODEL_KEYS
        .iter()
        .map(|(k, _)| *k)
        .filter(|k| *k != "stochastic")
        .collect();
    rc.require(&all)?;
    rc.model_config(ModelConfig::default())
}

/// Help text listing `keys` with their descriptions.
pub fn describe_keys(title: &str, keys: &[(&str, &str)]) -> String {
    let mut out = format!("{title}:\n");
    for (k, d) in keys {
        writeln!(out, "  {k:<14} {d}").unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::AggregatorKind;
    use crate::model::Backbone;

    #[test]
    fn inline_and_spaced_forms() {
        let a = RunConfig::parse("backbone=residual depth=28 width=64 k=16 epsilon=0.2").unwrap();
        let b = RunConfig::parse("# reference\nbackbone = residual\ndepth = 28 # layers\nwidth=64\nk = 16\nepsilon= 0.2\n")
            .unwrap();
        assert_eq!(a, b);
        let m = a.model_config(ModelConfig::default()).unwrap();
        assert_eq!(
            (m.backbone, m.depth, m.width, m.k),
            (Backbone::Residual, 28, 64, 16)
        );
    }

    #[test]
    fn hyphenated_keys() {
        let rc = RunConfig::parse("d-max=4 num-classes=5 decay-steps=10").unwrap();
        assert_eq!(rc.get("d_max"), Some("4"));
        assert_eq!(
            rc.model_config(ModelConfig::default()).unwrap().num_classes,
            5
        );
        assert_eq!(
            rc.train_config(TrainConfig::default()).unwrap().decay_steps,
            10
        );
    }

    #[test]
    fn plain_without_dilation() {
        let rc = RunConfig::parse("depth=28 backbone=plain dilation=off stochastic=off").unwrap();
        let m = rc.model_config(ModelConfig::default()).unwrap();
        assert_eq!(m.backbone, Backbone::Plain);
        assert!(!m.dilation);
        assert_eq!(m.epsilon, 0.0);
    }

    #[test]
    fn missing_and_unknown_keys() {
        let rc = RunConfig::parse("backbone=plain depth=3 k=4").unwrap();
        let err = rc.require(REQUIRED_TRAIN_KEYS).unwrap_err();
        assert!(err.to_string().contains("width"));
        let rc = RunConfig::parse("colour=red").unwrap();
        assert!(rc.reject_unknown(&[MODEL_KEYS, TRAIN_KEYS]).is_err());
        assert!(RunConfig::parse("depth").is_err());
        assert!(RunConfig::parse("depth=x")
            .unwrap()
            .model_config(ModelConfig::default())
            .is_err());
    }

    #[test]
    fn model_config_round_trip() {
        let m = ModelConfig {
            backbone: Backbone::Dense,
            aggregator: AggregatorKind::GraphSageNormalized,
            epsilon: 0.1 + 0.2,
            dynamic_edges: false,
            ..ModelConfig::default()
        };
        assert_eq!(parse_model_config(&model_config_string(&m)).unwrap(), m);
    }

    #[test]
    fn synth_keys() {
        let rc = RunConfig::parse("blocks=3 points=64 classes=2 shape_mix=1,0,1 seed=4").unwrap();
        let s = rc.synth_spec(SynthSpec::default()).unwrap();
        assert_eq!(
            (s.num_blocks, s.points_per_block, s.num_classes, s.seed),
            (3, 64, 2, 4)
        );
        assert_eq!(s.shape_mix, [0.5, 0.0, 0.5]);
    }
}
