//! Flat key=value configuration with dotted namespaces.
//!
//! A config file is a list of `key = value` lines; `#` starts a comment.
//! Unknown keys are errors. Missing keys keep their defaults.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::ModelDims;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: String,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub aux3d_scenes: usize,
    pub image_size: usize,
    pub points: usize,
    pub focal: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainParams {
    pub batch_size: usize,
    pub total_iters: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub weights: LossWeights,
    pub eval_every: usize,
    pub sum_reduction: bool,
    pub adv_vectors_per_class: usize,
    pub adv_alternation: usize,
    pub d_lr0: f64,
    pub partition_checks: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pretrain3dParams {
    pub iters: usize,
    pub batch_scenes: usize,
    pub lr0: f64,
    pub poly_power: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeParams {
    pub iters: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub poly_power: f64,
}

/// All knobs of the framework with the desk-scale defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectConfig {
    pub data: DataConfig,
    pub dims: ModelDims,
    pub train: TrainParams,
    pub pretrain3d: Pretrain3dParams,
    pub probe: ProbeParams,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            data: DataConfig {
                root: "data".into(),
                train_scenes: 200,
                val_scenes: 50,
                aux3d_scenes: 200,
                image_size: 64,
                points: 8192,
                focal: 48.0,
            },
            dims: ModelDims::default(),
            train: TrainParams {
                batch_size: 8,
                total_iters: 2000,
                lr0: 0.01,
                poly_power: 0.9,
                weights: LossWeights::default(),
                eval_every: 200,
                sum_reduction: false,
                adv_vectors_per_class: 32,
                adv_alternation: 1,
                d_lr0: 0.0005,
                partition_checks: false,
            },
            pretrain3d: Pretrain3dParams {
                iters: 2000,
                batch_scenes: 2,
                lr0: 0.01,
                poly_power: 0.9,
            },
            probe: ProbeParams {
                iters: 400,
                batch_size: 8,
                lr0: 0.02,
                poly_power: 0.9,
            },
        }
    }
}

impl ProjectConfig {
    pub fn from_file(path: &Path) -> Result<ProjectConfig> {
        Self::from_str_strict(&std::fs::read_to_string(path)?)
    }

    pub fn from_str_strict(text: &str) -> Result<ProjectConfig> {
        let mut cfg = ProjectConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "data.root" => self.data.root = value.to_string(),
            "data.train_scenes" => self.data.train_scenes = parse(key, value)?,
            "data.val_scenes" => self.data.val_scenes = parse(key, value)?,
            "data.aux3d_scenes" => self.data.aux3d_scenes = parse(key, value)?,
            "data.image_size" => self.data.image_size = parse(key, value)?,
            "data.points" => self.data.points = parse(key, value)?,
            "data.focal" => self.data.focal = parse(key, value)?,
            "model.c2d" => self.dims.c2d = parse(key, value)?,
            "model.c3d" => self.dims.c3d = parse(key, value)?,
            "model.num_classes" => self.dims.num_classes = parse(key, value)?,
            "model.knn" => self.dims.knn = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.total_iters" => self.train.total_iters = parse(key, value)?,
            "train.lr0" => self.train.lr0 = parse(key, value)?,
            "train.poly_power" => self.train.poly_power = parse(key, value)?,
            "train.w_s" => self.train.weights.w_s = parse(key, value)?,
            "train.w_p" => self.train.weights.w_p = parse(key, value)?,
            "train.w_adv" => self.train.weights.w_adv = parse(key, value)?,
            "train.eval_every" => self.train.eval_every = parse(key, value)?,
            "train.reduction" => {
                self.train.sum_reduction = match value {
                    "mean" => false,
                    "sum" => true,
                    other => {
                        return Err(Error::Config(format!(
                            "train.reduction must be mean or sum, got {other:?}"
                        )))
                    }
                }
            }
            "train.adv_vectors_per_class" => self.train.adv_vectors_per_class = parse(key, value)?,
            "train.adv_alternation" => self.train.adv_alternation = parse(key, value)?,
            "train.d_lr0" => self.train.d_lr0 = parse(key, value)?,
            "train.partition_checks" => self.train.partition_checks = parse(key, value)?,
            "pretrain3d.iters" => self.pretrain3d.iters = parse(key, value)?,
            "pretrain3d.batch_scenes" => self.pretrain3d.batch_scenes = parse(key, value)?,
            "pretrain3d.lr0" => self.pretrain3d.lr0 = parse(key, value)?,
            "pretrain3d.poly_power" => self.pretrain3d.poly_power = parse(key, value)?,
            "probe.iters" => self.probe.iters = parse(key, value)?,
            "probe.batch_size" => self.probe.batch_size = parse(key, value)?,
            "probe.lr0" => self.probe.lr0 = parse(key, value)?,
            "probe.poly_power" => self.probe.poly_power = parse(key, value)?,
            unknown => return Err(Error::Config(format!("unknown key {unknown:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.lr0 <= 0.0 || self.train.poly_power <= 0.0 || self.train.total_iters == 0 {
            return Err(Error::Config(
                "train.lr0, train.poly_power and train.total_iters must be positive".into(),
            ));
        }
        if self.dims.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be at least 2".into()));
        }
        if self.data.image_size % 8 != 0 || self.data.image_size == 0 {
            return Err(Error::Config("data.image_size must be a positive multiple of 8".into()));
        }
        self.train.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical snapshot: every key, sorted, one per line.
    pub fn snapshot(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("data.root", self.data.root.clone());
        map.insert("data.train_scenes", self.data.train_scenes.to_string());
        map.insert("data.val_scenes", self.data.val_scenes.to_string());
        map.insert("data.aux3d_scenes", self.data.aux3d_scenes.to_string());
        map.insert("data.image_size", self.data.image_size.to_string());
        map.insert("data.points", self.data.points.to_string());
        map.insert("data.focal", format!("{}", self.data.focal));
        map.insert("model.c2d", self.dims.c2d.to_string());
        map.insert("model.c3d", self.dims.c3d.to_string());
        map.insert("model.num_classes", self.dims.num_classes.to_string());
        map.insert("model.knn", self.dims.knn.to_string());
        map.insert("train.batch_size", self.train.batch_size.to_string());
        map.insert("train.total_iters", self.train.total_iters.to_string());
        map.insert("train.lr0", format!("{}", self.train.lr0));
        map.insert("train.poly_power", format!("{}", self.train.poly_power));
        map.insert("train.w_s", format!("{}", self.train.weights.w_s));
        map.insert("train.w_p", format!("{}", self.train.weights.w_p));
        map.insert("train.w_adv", format!("{}", self.train.weights.w_adv));
        map.insert("train.eval_every", self.train.eval_every.to_string());
        map.insert(
            "train.reduction",
            if self.train.sum_reduction { "sum" } else { "mean" }.to_string(),
        );
        map.insert(
            "train.adv_vectors_per_class",
            self.train.adv_vectors_per_class.to_string(),
        );
        map.insert("train.adv_alternation", self.train.adv_alternation.to_string());
        map.insert("train.d_lr0", format!("{}", self.train.d_lr0));
        map.insert(
            "train.partition_checks",
            self.train.partition_checks.to_string(),
        );
        map.insert("pretrain3d.iters", self.pretrain3d.iters.to_string());
        map.insert(
            "pretrain3d.batch_scenes",
            self.pretrain3d.batch_scenes.to_string(),
        );
        map.insert("pretrain3d.lr0", format!("{}", self.pretrain3d.lr0));
        map.insert(
            "pretrain3d.poly_power",
            format!("{}", self.pretrain3d.poly_power),
        );
        map.insert("probe.iters", self.probe.iters.to_string());
        map.insert("probe.batch_size", self.probe.batch_size.to_string());
        map.insert("probe.lr0", format!("{}", self.probe.lr0));
        map.insert("probe.poly_power", format!("{}", self.probe.poly_power));
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Data root, honoring the `XMD_DATA_ROOT` override.
    pub fn data_root(&self) -> std::path::PathBuf {
        match std::env::var("XMD_DATA_ROOT") {
            Ok(v) if !v.is_empty() => v.into(),
            _ => self.data.root.clone().into(),
        }
    }
}
