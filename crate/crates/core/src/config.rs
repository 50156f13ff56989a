//! Run configuration: a flat text file of `key = value` lines grouped under
//! `[section]` headers. Every field has a default from the chosen preset;
//! unknown sections and keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::{GlobalBranchConfig, LocalBranchConfig};
use crate::data::synth::{SyntheticConfig, Transitions};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::{KeyTap, ModelConfig};
use crate::objectives::{NoiseConfig, SmoothingConfig};
use crate::trainer::TrainConfig;

/// A scalar or list that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("expected {}, got {s:?}", stringify!($t)))
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, bool, String);

impl ConfigValue for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
}

impl ConfigValue for Vec<usize> {
    fn render(&self) -> String {
        let items: Vec<String> = self.iter().map(ToString::to_string).collect();
        items.join(",")
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.trim_matches(|c| c == '[' || c == ']')
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse()
                    .map_err(|_| format!("expected integer list, got {s:?}"))
            })
            .collect()
    }
}

impl ConfigValue for Option<usize> {
    fn render(&self) -> String {
        match self {
            Some(v) => v.to_string(),
            None => "none".into(),
        }
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some)
        }
    }
}

impl ConfigValue for KeyTap {
    fn render(&self) -> String {
        self.name().into()
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        KeyTap::parse(s).ok_or_else(|| format!("expected shallow or deep, got {s:?}"))
    }
}

/// `uniform`, or matrix rows separated by `;` with whitespace-separated entries.
impl ConfigValue for Transitions {
    fn render(&self) -> String {
        match self {
            Transitions::Uniform => "uniform".into(),
            Transitions::Matrix(m) => {
                let rows: Vec<String> = m
                    .iter()
                    .map(|r| {
                        r.iter()
                            .map(|p| p.to_string())
                            .collect::<Vec<_>>()
                            .join(" ")
                    })
                    .collect();
                rows.join("; ")
            }
        }
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "uniform" {
            return Ok(Transitions::Uniform);
        }
        s.split(';')
            .map(|row| {
                row.split_whitespace()
                    .map(|p| {
                        p.parse::<f64>()
                            .map_err(|_| format!("bad transition entry {p:?}"))
                    })
                    .collect()
            })
            .collect::<std::result::Result<Vec<Vec<f64>>, String>>()
            .map(Transitions::Matrix)
    }
}

/// One `[section]` worth of fields.
pub trait Section {
    const NAME: &'static str;
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
}

macro_rules! section {
    ($ty:ty, $name:literal { $($key:literal => $($field:ident).+),* $(,)? }) => {
        impl Section for $ty {
            const NAME: &'static str = $name;

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::render(&self.$($field).+))),*]
            }

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .map_err(|m| Error::Config(format!("{}.{key}: {m}", $name)))?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {}.{key}", $name))),
                }
                Ok(())
            }
        }
    };
}

section!(ModelConfig, "model" {
    "feature_dim" => feature_dim,
    "embed_dim" => embed_dim,
    "patch_kernel" => patch_kernel,
    "patch_stride" => patch_stride,
    "stem_kernel" => stem_kernel,
    "stem_dilations" => stem_dilations,
    "num_local_global" => num_local_global,
    "num_classes" => num_classes,
    "max_transcript_len" => max_transcript_len,
    "num_reasoning_selfattn" => num_reasoning_selfattn,
    "reasoning_head_dim" => reasoning_head_dim,
    "reasoning_hidden" => reasoning_hidden,
    "reasoning_keys" => reasoning_keys,
    "dropout" => dropout,
    "min_segment_frames" => min_segment_frames,
});

section!(LocalBranchConfig, "local" {
    "num_heads" => num_heads,
    "head_dim" => head_dim,
    "window" => window,
    "dilations" => dilations,
    "hidden_dim" => hidden_dim,
});

section!(GlobalBranchConfig, "global" {
    "num_heads" => num_heads,
    "head_dim" => head_dim,
    "pool_rates" => pool_rates,
    "hidden_dim" => hidden_dim,
});

section!(TrainConfig, "train" {
    "epochs_phase1" => epochs_phase1,
    "epochs_phase2" => epochs_phase2,
    "lr" => lr,
    "adam_beta1" => adam_beta1,
    "adam_beta2" => adam_beta2,
    "adam_eps" => adam_eps,
    "batch_size" => batch_size,
    "loss_weight_identification" => loss_weight_identification,
    "loss_weight_reasoning" => loss_weight_reasoning,
    "warmup_epochs" => warmup_epochs,
    "seed" => seed,
    "eval_every" => eval_every,
    "patience" => patience,
});

section!(SmoothingConfig, "smoothing" {
    "tls_eps" => tls_eps,
    "cls_alpha_i" => cls_alpha_i,
    "cls_alpha_t" => cls_alpha_t,
});

section!(NoiseConfig, "noise" {
    "weight_phase1" => weight_phase1,
    "weight_phase2" => weight_phase2,
});

section!(SyntheticConfig, "synth" {
    "num_classes" => num_classes,
    "feature_dim" => feature_dim,
    "num_videos" => num_videos,
    "val_videos" => val_videos,
    "len_min" => len_min,
    "len_max" => len_max,
    "seg_mean" => seg_mean,
    "seg_std" => seg_std,
    "seg_min" => seg_min,
    "proto_sigma" => proto_sigma,
    "obs_sigma" => obs_sigma,
    "transitions" => transitions,
    "seed" => seed,
});

section!(DataConfig, "data" {
    "root" => root,
    "strict_lengths" => strict_lengths,
    "ignore_class" => ignore_class,
});

/// Parsed `[section] key = value` lines, in file order, with line numbers.
pub fn parse_entries(text: &str, path: &Path) -> Result<Vec<(String, String, usize)>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated section header".into()))?;
            section = Some(name.trim().to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`".into()))?;
        let sec = section
            .as_ref()
            .ok_or_else(|| err("key outside any [section]".into()))?;
        out.push((
            format!("{sec}.{}", key.trim()),
            value.trim().to_string(),
            i + 1,
        ));
    }
    Ok(out)
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub smoothing: SmoothingConfig,
    pub noise: NoiseConfig,
    pub synth: SyntheticConfig,
    pub data: DataConfig,
    /// Keys set explicitly by a file or override, as `section.key`.
    pub explicit: BTreeSet<String>,
}

pub const PRESETS: [&str; 3] = ["small", "long", "synthetic"];

impl RunConfig {
    /// * `small`: short-video hyperparameters at full width.
    /// * `long`: long-video hyperparameters at full width.
    /// * `synthetic`: the short-video column at desk-scale width, matched to
    ///   the default synthetic dataset.
    pub fn preset(name: &str) -> Result<Self> {
        let synth = SyntheticConfig::default();
        let (model, smoothing, train) = match name {
            "small" => (
                ModelConfig::small(11),
                SmoothingConfig::default(),
                TrainConfig::default(),
            ),
            "long" => (
                ModelConfig::long(48),
                SmoothingConfig::long(),
                TrainConfig::default(),
            ),
            "synthetic" => (
                ModelConfig::synthetic(synth.feature_dim, synth.num_classes),
                SmoothingConfig::default(),
                TrainConfig::synthetic(),
            ),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            model,
            train,
            smoothing,
            noise: NoiseConfig::default(),
            synth,
            data: DataConfig::default(),
            explicit: BTreeSet::new(),
        })
    }

    /// Sets `section.key` from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("expected section.key, got {key:?}")))?;
        match section {
            "model" => self.model.set(field, value),
            "local" => self.model.local.set(field, value),
            "global" => self.model.global.set(field, value),
            "train" => self.train.set(field, value),
            "smoothing" => self.smoothing.set(field, value),
            "noise" => self.noise.set(field, value),
            "synth" => self.synth.set(field, value),
            "data" => self.data.set(field, value),
            _ => Err(Error::Config(format!("unknown section [{section}]"))),
        }?;
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies a `--set key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (key, value, line) in parse_entries(text, path)? {
            self.set(&key, &value)
                .map_err(|e| Error::Config(format!("{}:{line}: {e}", path.display())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    pub fn was_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// All fields as `(section, key, value)`.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        fn push<S: Section>(out: &mut Vec<(&'static str, &'static str, String)>, s: &S) {
            out.extend(s.entries().into_iter().map(|(k, v)| (S::NAME, k, v)));
        }
        let mut out = Vec::new();
        push(&mut out, &self.model);
        push(&mut out, &self.model.local);
        push(&mut out, &self.model.global);
        push(&mut out, &self.train);
        push(&mut out, &self.smoothing);
        push(&mut out, &self.noise);
        push(&mut out, &self.synth);
        push(&mut out, &self.data);
        out
    }

    /// The fully resolved configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "[{section}]");
                current = section;
            }
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.smoothing.validate()?;
        self.noise.validate()?;
        self.synth.validate()
    }
}

/// The model's sections only, as written into checkpoint manifests.
pub fn model_entries(model: &ModelConfig) -> Vec<(String, String)> {
    fn push<S: Section>(out: &mut Vec<(String, String)>, s: &S) {
        out.extend(
            s.entries()
                .into_iter()
                .map(|(k, v)| (format!("{}.{k}", S::NAME), v)),
        );
    }
    let mut out = Vec::new();
    push(&mut out, model);
    push(&mut out, &model.local);
    push(&mut out, &model.global);
    out
}

/// Rebuilds a model configuration from [`model_entries`] output.
pub fn model_from_entries(entries: &[(String, String)]) -> Result<ModelConfig> {
    let mut run = RunConfig::preset("small")?;
    for (k, v) in entries {
        if !(k.starts_with("model.") || k.starts_with("local.") || k.starts_with("global.")) {
            return Err(Error::Config(format!("{k} is not a model key")));
        }
        run.set(k, v)?;
    }
    Ok(run.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::preset("synthetic").unwrap();
        c.set("global.pool_rates", "15,30,45").unwrap();
        c.set("synth.transitions", "0 1; 1 0").unwrap();
        c.set("data.ignore_class", "3").unwrap();
        let text = c.to_text();
        let mut back = RunConfig::preset("long").unwrap();
        back.apply_text(&text, Path::new("x.conf")).unwrap();
        back.explicit = c.explicit.clone();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_with_line() {
        let mut c = RunConfig::preset("small").unwrap();
        let text = "[model]\nembed_dim = 64\n\n[train]\nepochs = 3\n";
        let err = c
            .apply_text(text, Path::new("run.conf"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("run.conf:5"), "{err}");
        assert!(err.contains("train.epochs"), "{err}");
        assert!(c.apply_text("[nope]\na = 1\n", Path::new("r")).is_err());
        assert!(c.apply_text("a = 1\n", Path::new("r")).is_err());
        assert!(c.set("model.embed_dim", "wide").is_err());
    }

    #[test]
    fn presets_differ_in_table_columns() {
        let s = RunConfig::preset("small").unwrap();
        let l = RunConfig::preset("long").unwrap();
        assert_eq!((s.model.local.window, l.model.local.window), (7, 51));
        assert_eq!((s.smoothing.tls_eps, l.smoothing.tls_eps), (4, 10));
        assert!(RunConfig::preset("huge").is_err());
        for p in PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn model_entries_round_trip() {
        let m = ModelConfig::synthetic(16, 5);
        assert_eq!(model_from_entries(&model_entries(&m)).unwrap(), m);
    }
}
