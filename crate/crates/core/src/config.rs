//! Run configuration files.
//!
//! The format is line oriented:
//!
//! ```text
//! # comment
//! [model]
//! arch = el_bottleneck_tiny
//! row = baseline
//! [train]
//! epochs = 40
//! decay_epochs = 20, 32
//! [data]
//! dataset = cifar10_bin
//! path = data/cifar-10
//! ```
//!
//! Keys are collected first and resolved afterwards, so their order inside
//! the file does not matter: `arch` picks the family defaults, `row` replaces
//! the toggles with an ablation row, and individual keys override both.
//! Overrides (`section.key=value`, or a bare `key=value` since key names are
//! unique across sections) win over the file. Unknown sections or keys are
//! errors.
//!
//! [`RunConfig::manifest`] writes every resolved value back out, and parsing
//! a manifest yields the same [`RunConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::elastic_link::SqueezeGrouping;
use crate::error::{config_err, Result};
use crate::model::{ArchSpec, Family, Toggles};
use crate::train::{DatasetId, LrSchedule, TrainConfig};

const MODEL_KEYS: &[&str] = &[
    "arch",
    "row",
    "width",
    "depth",
    "input_size",
    "in_channels",
    "classes",
    "el_s",
    "el_i",
    "el_e",
    "residual",
    "gamma_learnable",
    "k_s",
    "k_i",
    "k_e",
    "alpha",
    "squeeze_grouping",
    "fp_shortcut",
];
const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "eval_batch_size",
    "lr",
    "decay_epochs",
    "decay_factor",
    "seed",
    "checkpoint_every",
    "augment",
];
const DATA_KEYS: &[&str] = &["dataset", "path", "train_limit", "test_limit"];

const SECTIONS: [(&str, &[&str]); 3] = [
    ("model", MODEL_KEYS),
    ("train", TRAIN_KEYS),
    ("data", DATA_KEYS),
];

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DataConfig {
    pub dataset: Option<DatasetId>,
    pub path: Option<PathBuf>,
    /// Keep only the first N samples of each split; 0 keeps everything.
    pub train_limit: usize,
    pub test_limit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchSpec::tiny(Family::ElBottleneckTiny),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Raw `(section, key) -> value` pairs, validated against the key tables.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<(String, String), String>,
}

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS
        .iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(s, _)| *s)
}

impl ConfigMap {
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let keys = SECTIONS
            .iter()
            .find(|(s, _)| *s == section)
            .map(|(_, k)| *k)
            .ok_or_else(|| config_err(format!("unknown section `[{section}]`")))?;
        if !keys.contains(&key) {
            return Err(config_err(format!(
                "unknown key `{key}` in section `[{section}]`"
            )));
        }
        self.entries.insert(
            (section.to_string(), key.to_string()),
            value.trim().to_string(),
        );
        Ok(())
    }

    /// Parses a whole file and merges it in.
    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| config_err(format!("line {}: {msg}", i + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("malformed section header `{line}`")))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let section = section
                .as_deref()
                .ok_or_else(|| at("key outside of any section".into()))?;
            self.set(section, key.trim(), value)
                .map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    /// Applies `section.key=value` or `key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| config_err(format!("override `{spec}` is not `key=value`")))?;
        let path = path.trim();
        match path.split_once('.') {
            Some((section, key)) => self.set(section, key, value),
            None => {
                let section =
                    section_of(path).ok_or_else(|| config_err(format!("unknown key `{path}`")))?;
                self.set(section, path, value)
            }
        }
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        self.get(section, key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| config_err(format!("`{section}.{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.get("model", key)
            .map(|v| parse_bool(key, v))
            .transpose()
    }

    /// Resolves the map on top of the defaults.
    pub fn resolve(&self) -> Result<RunConfig> {
        let family = match self.get("model", "arch") {
            Some(a) => a.parse::<Family>()?,
            None => Family::ElBottleneckTiny,
        };
        let mut arch = ArchSpec::for_family(family);
        if let Some(row) = self.get("model", "row") {
            let fp_shortcut = arch.toggles.fp_shortcut;
            arch.toggles = Toggles::ablation_row(row)?;
            arch.toggles.fp_shortcut = fp_shortcut;
        }
        let t = &mut arch.toggles;
        for (key, slot) in [
            ("el_s", &mut t.el_s),
            ("el_i", &mut t.el_i),
            ("el_e", &mut t.el_e),
            ("residual", &mut t.residual),
            ("gamma_learnable", &mut t.gamma_learnable),
            ("k_s", &mut t.k_s),
            ("k_i", &mut t.k_i),
            ("k_e", &mut t.k_e),
            ("alpha", &mut t.alpha),
            ("fp_shortcut", &mut t.fp_shortcut),
        ] {
            if let Some(v) = self.flag(key)? {
                *slot = v;
            }
        }
        if let Some(g) = self.get("model", "squeeze_grouping") {
            t.grouping = SqueezeGrouping::parse(g)?;
        }

        let mut data = DataConfig::default();
        if let Some(d) = self.get("data", "dataset") {
            data.dataset = match d {
                "" | "none" => None,
                other => Some(other.parse::<DatasetId>()?),
            };
        }
        data.path = self
            .get("data", "path")
            .filter(|p| !p.is_empty())
            .map(PathBuf::from);
        data.train_limit = self.parsed("data", "train_limit")?.unwrap_or(0);
        data.test_limit = self.parsed("data", "test_limit")?.unwrap_or(0);

        // image geometry follows the dataset unless given explicitly
        if let Some(id) = data.dataset {
            let (c, h, _) = id.image_dims();
            arch.in_channels = c;
            arch.input_size = h;
            arch.classes = 10;
        }
        if let Some(v) = self.parsed("model", "width")? {
            arch.width = v;
        }
        if let Some(v) = self.parsed("model", "depth")? {
            arch.depth = v;
        }
        if let Some(v) = self.parsed("model", "input_size")? {
            arch.input_size = v;
        }
        if let Some(v) = self.parsed("model", "in_channels")? {
            arch.in_channels = v;
        }
        if let Some(v) = self.parsed("model", "classes")? {
            arch.classes = v;
        }
        arch.validate()?;

        let mut train = TrainConfig::default();
        if let Some(e) = self.parsed("train", "epochs")? {
            train.epochs = e;
            train.schedule = LrSchedule::scaled(e);
        }
        for (key, slot) in [
            ("batch_size", &mut train.batch_size),
            ("eval_batch_size", &mut train.eval_batch_size),
            ("checkpoint_every", &mut train.checkpoint_every),
        ] {
            if let Some(v) = self.parsed("train", key)? {
                *slot = v;
            }
        }
        if let Some(v) = self.parsed("train", "seed")? {
            train.seed = v;
        }
        if let Some(v) = self.get("train", "augment") {
            train.augment = parse_bool("augment", v)?;
        }
        if let Some(v) = self.parsed("train", "lr")? {
            train.schedule.base = v;
        }
        if let Some(v) = self.parsed("train", "decay_factor")? {
            train.schedule.factor = v;
        }
        if let Some(v) = self.get("train", "decay_epochs") {
            train.schedule.decay_epochs = parse_list(v)?;
        }
        train.validate()?;
        Ok(RunConfig { arch, train, data })
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(config_err(format!("`{key}` expects true/false, got `{v}`"))),
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| config_err(format!("bad epoch `{s}` in decay_epochs")))
        })
        .collect()
}

impl RunConfig {
    /// Parses a file body plus overrides on top of the defaults.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let mut map = ConfigMap::default();
        map.parse_text(text)?;
        for o in overrides {
            map.apply_override(o)?;
        }
        map.resolve()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::load(text, &[])
    }

    /// Every resolved value, in a form [`RunConfig::parse`] reads back to an
    /// equal config.
    pub fn manifest(&self) -> String {
        let a = &self.arch;
        let t = &a.toggles;
        let s = &self.train.schedule;
        let mut out = String::new();
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "arch = {}", a.family);
        for (k, v) in [
            ("width", a.width),
            ("depth", a.depth),
            ("input_size", a.input_size),
            ("in_channels", a.in_channels),
            ("classes", a.classes),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (k, v) in [
            ("el_s", t.el_s),
            ("el_i", t.el_i),
            ("el_e", t.el_e),
            ("residual", t.residual),
            ("gamma_learnable", t.gamma_learnable),
            ("k_s", t.k_s),
            ("k_i", t.k_i),
            ("k_e", t.k_e),
            ("alpha", t.alpha),
            ("fp_shortcut", t.fp_shortcut),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "squeeze_grouping = {}", t.grouping.as_str());
        let _ = writeln!(out, "\n[train]");
        let tr = &self.train;
        for (k, v) in [
            ("epochs", tr.epochs),
            ("batch_size", tr.batch_size),
            ("eval_batch_size", tr.eval_batch_size),
            ("checkpoint_every", tr.checkpoint_every),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "seed = {}", tr.seed);
        let _ = writeln!(out, "augment = {}", tr.augment);
        let _ = writeln!(out, "lr = {:?}", s.base);
        let _ = writeln!(out, "decay_factor = {:?}", s.factor);
        let decays: Vec<String> = s.decay_epochs.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "decay_epochs = {}", decays.join(", "));
        let _ = writeln!(out, "\n[data]");
        let d = &self.data;
        let _ = writeln!(
            out,
            "dataset = {}",
            d.dataset.map_or("none", |id| id.as_str())
        );
        let _ = writeln!(
            out,
            "path = {}",
            d.path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
        let _ = writeln!(out, "train_limit = {}", d.train_limit);
        let _ = writeln!(out, "test_limit = {}", d.test_limit);
        out
    }
}
