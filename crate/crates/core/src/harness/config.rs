//! Plain `key = value` experiment configuration. Blank lines and lines
//! starting with `#` are ignored; later assignments win.

use std::path::{Path, PathBuf};

use super::model::{Architecture, ModelSpec, Variant};
use super::train::TrainConfig;
use crate::dad::CropMode;
use crate::error::{Error, Result};
use crate::optical_layer::{OpticalLayerSpec, SiluPosition};

pub const KEYS: &[&str] = &[
    "arch",
    "variant",
    "width_div",
    "stages_removed",
    "optical.channels",
    "optical.kernel",
    "optical.branch_sizes",
    "optical.crop_mode",
    "optical.silu_position",
    "optical.use_bn",
    "batch_size",
    "epochs",
    "lr0",
    "momentum",
    "weight_decay",
    "schedule",
    "augment",
    "seed",
    "subset",
    "test_subset",
    "eval_batch",
    "data_dir",
    "out_dir",
    "threads",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub variant: Variant,
    pub width_div: usize,
    /// Removal tokens applied to co-design models; `None` selects the
    /// reference tokens for the architecture.
    pub stages_removed: Option<Vec<String>>,
    pub optical: OpticalLayerSpec,
    pub train: TrainConfig,
    pub test_subset: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            architecture: Architecture::Vgg13,
            variant: Variant::Electronic,
            width_div: 1,
            stages_removed: None,
            optical: OpticalLayerSpec::default(),
            train: TrainConfig::default(),
            test_subset: None,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            threads: None,
        }
    }
}

/// Splits config text into `(key, value)` pairs with line-numbered errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (k, v) in parse_pairs(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bad = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("{key}: {m}")),
            other => other,
        };
        match key {
            "arch" => self.architecture = v.parse()?,
            "variant" => self.variant = v.parse()?,
            "width_div" => self.width_div = num(key, v)?,
            "stages_removed" => self.stages_removed = Some(list(v)),
            "optical.channels" => self.optical.channels = num(key, v)?,
            "optical.kernel" => self.optical.kernel = num(key, v)?,
            "optical.branch_sizes" => {
                self.optical.branch_sizes = list(v).iter().map(|s| num(key, s)).collect::<Result<_>>()?
            }
            "optical.crop_mode" => self.optical.crop_mode = v.parse::<CropMode>().map_err(bad)?,
            "optical.silu_position" => self.optical.silu_position = v.parse::<SiluPosition>().map_err(bad)?,
            "optical.use_bn" => self.optical.use_bn_after_expand = flag(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "lr0" => self.train.lr0 = num(key, v)?,
            "momentum" => self.train.momentum = num(key, v)?,
            "weight_decay" => self.train.weight_decay = num(key, v)?,
            "schedule" => self.train.schedule = v.parse()?,
            "augment" => self.train.augment = flag(key, v)?,
            "seed" => self.train.seed = num(key, v)?,
            "subset" => self.train.subset_size = optional(key, v)?,
            "test_subset" => self.test_subset = optional(key, v)?,
            "eval_batch" => self.train.eval_batch = num(key, v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "threads" => self.threads = optional(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn removal_tokens(&self) -> Vec<String> {
        self.stages_removed
            .clone()
            .unwrap_or_else(|| ModelSpec::reference_codesign(self.architecture).stages_removed)
    }

    /// Model for `variant`; removal tokens apply to co-design models only.
    pub fn model_spec(&self, variant: Variant) -> ModelSpec {
        let mut spec = ModelSpec::new(self.architecture, variant).with_width_div(self.width_div);
        let expand_to = spec.optical.expand_to;
        spec.optical = OpticalLayerSpec {
            expand_to,
            ..self.optical.clone()
        };
        if variant == Variant::Codesign {
            spec.stages_removed = self.removal_tokens();
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_spec(self.variant).validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, in `KEYS` order.
    pub fn resolved(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let o = &self.optical;
        let t = &self.train;
        let values = [
            self.architecture.to_string(),
            self.variant.to_string(),
            self.width_div.to_string(),
            self.removal_tokens().join(","),
            o.channels.to_string(),
            o.kernel.to_string(),
            o.branch_sizes.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
            match o.crop_mode {
                CropMode::Same => "same".into(),
                CropMode::Full => "full".into(),
            },
            match o.silu_position {
                SiluPosition::Pre1x1 => "pre_1x1".into(),
                SiluPosition::Post1x1 => "post_1x1".into(),
            },
            o.use_bn_after_expand.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.lr0.to_string(),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
            format!("{:?}", t.schedule).to_lowercase(),
            t.augment.to_string(),
            t.seed.to_string(),
            opt(t.subset_size),
            opt(self.test_subset),
            t.eval_batch.to_string(),
            self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            self.out_dir.display().to_string(),
            opt(self.threads),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
