//! Flat `key = value` run configuration with `#` comments.
//!
//! ```text
//! preset = tiny          # optional, applied before every other key
//! depths = 2, 2
//! steps = 300
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::encoder_decoder::UpsampleMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sspp::FusionMode;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(format!("expected f32 or f64, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub precision: Precision,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Metrics table path; defaults to `<out>/metrics.csv`.
    pub metrics: Option<PathBuf>,
    pub hd_percentile: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_model(ModelConfig::default())
    }
}

impl RunConfig {
    pub fn with_model(model: ModelConfig) -> Self {
        let train = TrainConfig {
            seed: model.seed,
            ..TrainConfig::default()
        };
        Self {
            model,
            train,
            dataset: None,
            out: PathBuf::from("runs"),
            precision: Precision::F32,
            checkpoint_every: 0,
            metrics: None,
            hd_percentile: None,
        }
    }

    pub fn tiny() -> Self {
        Self::with_model(ModelConfig::tiny())
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut cfg = match entries.iter().find(|e| e.key == "preset") {
            None => Self::default(),
            Some(e) => match e.value.as_str() {
                "tiny" => Self::tiny(),
                "reference" => Self::default(),
                v => return Err(e.err(format!("unknown preset {v:?} (expected tiny or reference)"))),
            },
        };
        for e in entries.iter().filter(|e| e.key != "preset") {
            cfg.apply(e)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, e: &Entry) -> Result<()> {
        let v = e.value.as_str();
        if apply_model_key(&mut self.model, &e.key, v).map_err(|m| e.err(m))? {
            if e.key == "seed" {
                self.train.seed = self.model.seed;
            }
            return Ok(());
        }
        let t = &mut self.train;
        let r: std::result::Result<(), String> = match e.key.as_str() {
            "steps" => num(v).map(|x| t.steps = x),
            "batch_size" => num(v).map(|x| t.batch_size = x),
            "base_lr" => num(v).map(|x| t.base_lr = x),
            "momentum" => num(v).map(|x| t.momentum = x),
            "weight_decay" => num(v).map(|x| t.weight_decay = x),
            "lr_power" => num(v).map(|x| t.lr_power = x),
            "dice_weight" => num(v).map(|x| t.loss.dice = x),
            "ce_weight" => num(v).map(|x| t.loss.ce = x),
            "augment" => num(v).map(|x| t.augment = x),
            "dataset" => {
                self.dataset = none_or(v).map(PathBuf::from);
                Ok(())
            }
            "out" => {
                self.out = PathBuf::from(v);
                Ok(())
            }
            "precision" => v.parse().map(|x| self.precision = x),
            "checkpoint_every" => num(v).map(|x| self.checkpoint_every = x),
            "metrics" => {
                self.metrics = none_or(v).map(PathBuf::from);
                Ok(())
            }
            "hd_percentile" => match none_or(v) {
                None => {
                    self.hd_percentile = None;
                    Ok(())
                }
                Some(s) => num::<f64>(s).and_then(|p| {
                    if (0.0..=100.0).contains(&p) {
                        self.hd_percentile = Some(p);
                        Ok(())
                    } else {
                        Err(format!("percentile {p} is outside 0..=100"))
                    }
                }),
            },
            _ => Err("unknown key".into()),
        };
        r.map_err(|m| e.err(m))
    }

    pub fn to_text(&self) -> String {
        let mut s = model_to_text(&self.model);
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "base_lr = {}", t.base_lr);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "lr_power = {}", t.lr_power);
        let _ = writeln!(s, "dice_weight = {}", t.loss.dice);
        let _ = writeln!(s, "ce_weight = {}", t.loss.ce);
        let _ = writeln!(s, "augment = {}", t.augment);
        let _ = writeln!(s, "dataset = {}", path(&self.dataset));
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "metrics = {}", path(&self.metrics));
        let _ = writeln!(
            s,
            "hd_percentile = {}",
            self.hd_percentile.map_or("none".to_string(), |p| p.to_string())
        );
        s
    }
}

fn none_or(v: &str) -> Option<&str> {
    (v != "none").then_some(v)
}

fn num<N: FromStr>(v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Sets one model key. `Ok(false)` for keys that are not model keys.
fn apply_model_key(m: &mut ModelConfig, key: &str, v: &str) -> std::result::Result<bool, String> {
    match key {
        "img_size" => m.img_size = num(v)?,
        "in_channels" => m.in_channels = num(v)?,
        "num_classes" => m.num_classes = num(v)?,
        "embed_dim" => m.embed_dim = num(v)?,
        "depths" => m.depths = list(v)?,
        "num_heads" => m.num_heads = list(v)?,
        "window_size" => m.window_size = num(v)?,
        "mlp_ratio" => m.mlp_ratio = num(v)?,
        "sspp_level" => m.sspp_level = num(v)?,
        "sspp_window_sizes" => m.sspp_window_sizes = if v == "auto" { None } else { Some(list(v)?) },
        "fusion" => {
            m.fusion = match v {
                "cross_attention" => FusionMode::CrossAttention,
                "basic" => FusionMode::Basic,
                _ => return Err(format!("expected cross_attention or basic, got {v:?}")),
            }
        }
        "fusion_reduction" => m.fusion_reduction = num(v)?,
        "decoder_depth" => m.decoder_depth = num(v)?,
        "upsample" => {
            m.upsample = match v {
                "patch_expand" => UpsampleMode::PatchExpand,
                "bilinear" => UpsampleMode::Bilinear,
                _ => return Err(format!("expected patch_expand or bilinear, got {v:?}")),
            }
        }
        "seed" => m.seed = num(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn model_to_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "img_size = {}", m.img_size);
    let _ = writeln!(s, "in_channels = {}", m.in_channels);
    let _ = writeln!(s, "num_classes = {}", m.num_classes);
    let _ = writeln!(s, "embed_dim = {}", m.embed_dim);
    let _ = writeln!(s, "depths = {}", join(&m.depths));
    let _ = writeln!(s, "num_heads = {}", join(&m.num_heads));
    let _ = writeln!(s, "window_size = {}", m.window_size);
    let _ = writeln!(s, "mlp_ratio = {}", m.mlp_ratio);
    let _ = writeln!(s, "sspp_level = {}", m.sspp_level);
    let _ = writeln!(
        s,
        "sspp_window_sizes = {}",
        m.sspp_window_sizes.as_deref().map_or("auto".to_string(), join)
    );
    let fusion = match m.fusion {
        FusionMode::CrossAttention => "cross_attention",
        FusionMode::Basic => "basic",
    };
    let _ = writeln!(s, "fusion = {fusion}");
    let _ = writeln!(s, "fusion_reduction = {}", m.fusion_reduction);
    let _ = writeln!(s, "decoder_depth = {}", m.decoder_depth);
    let upsample = match m.upsample {
        UpsampleMode::PatchExpand => "patch_expand",
        UpsampleMode::Bilinear => "bilinear",
    };
    let _ = writeln!(s, "upsample = {upsample}");
    let _ = writeln!(s, "seed = {}", m.seed);
    s
}

/// Parses a model-only key list; every key must be a model key.
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for e in parse_entries(text)? {
        if !apply_model_key(&mut m, &e.key, &e.value).map_err(|msg| e.err(msg))? {
            return Err(e.err("unknown key".into()));
        }
    }
    Ok(m)
}

struct Entry {
    key: String,
    value: String,
    line: usize,
}

impl Entry {
    fn err(&self, msg: String) -> Error {
        Error::Config(format!("line {}: key `{}`: {msg}", self.line, self.key))
    }
}

fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got {line:?}",
                i + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value in {line:?}", i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == k) {
            return Err(Error::Config(format!(
                "line {}: key `{k}` already set on line {}",
                i + 1,
                prev.line
            )));
        }
        out.push(Entry {
            key: k.to_string(),
            value: v.to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn preset_and_overrides() {
        let c =
            RunConfig::parse("# tiny run\nsteps = 20\npreset = tiny\nseed = 7 # trailing\nprecision = f64\n").unwrap();
        assert_eq!(c.model.img_size, 32);
        assert_eq!(c.train.steps, 20);
        assert_eq!((c.model.seed, c.train.seed), (7, 7));
        assert_eq!(c.precision, Precision::F64);
    }

    #[test]
    fn diagnostics_name_line_and_key() {
        let e = RunConfig::parse("steps = 3\nwindow_size = seven\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2") && e.contains("window_size"), "{e}");
        let e = RunConfig::parse("\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        let e = RunConfig::parse("steps 3\n").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        let e = RunConfig::parse("steps = 1\nsteps = 2\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("line 1"), "{e}");
        assert!(RunConfig::parse("preset = huge\n").is_err());
        assert!(RunConfig::parse("hd_percentile = 120\n").is_err());
    }

    #[test]
    fn model_text_roundtrip() {
        let m = ModelConfig {
            sspp_window_sizes: Some(vec![1, 3]),
            fusion: FusionMode::Basic,
            upsample: UpsampleMode::Bilinear,
            ..ModelConfig::tiny()
        };
        assert_eq!(model_from_text(&model_to_text(&m)).unwrap(), m);
        assert!(model_from_text("steps = 3\n").is_err());
    }

    proptest! {
        #[test]
        fn run_config_roundtrip(
            seed in any::<u64>(),
            steps in 0usize..100_000,
            lr in 1e-6f64..1.0,
            wd in 0.0f64..0.1,
            level in 1usize..=4,
            tiny in any::<bool>(),
            augment in any::<bool>(),
            hd in proptest::option::of(0.0f64..=100.0),
            dataset in proptest::option::of("[a-z][a-z0-9_/]{0,12}"),
        ) {
            let mut c = if tiny { RunConfig::tiny() } else { RunConfig::default() };
            c.set_seed(seed);
            c.train.steps = steps;
            c.train.base_lr = lr;
            c.train.weight_decay = wd;
            c.train.augment = augment;
            c.model.sspp_level = level;
            c.hd_percentile = hd;
            c.dataset = dataset.map(PathBuf::from);
            let back = RunConfig::parse(&c.to_text()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), c.to_text());
        }
    }
}
