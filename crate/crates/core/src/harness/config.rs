//! Run configuration and its flat `key = value` file format.
//!
//! Keys carry a section prefix (`model.`, `optim.`, `train.`, `data.`).
//! `model.preset` seeds every model field; other `model.*` keys override it
//! regardless of where they appear in the file. Unknown or repeated keys are
//! errors. [`RunConfig::to_text`] writes every key, so parsing its output
//! reproduces the configuration exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::{AdamWConfig, CosineSchedule};
use crate::deform::BiasLookup;
use crate::error::{Error, Result};
use crate::harness::data::DatasetKind;
use crate::model::{ModelConfig, Preset, NUM_STAGES};
use crate::ssm::Discretization;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub label_smoothing: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 50,
            label_smoothing: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self, total_steps: usize) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.lr,
            min_lr: self.min_lr.min(self.lr),
            warmup_steps: self.warmup_steps,
            total_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 32,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DatasetKind::Shapes8,
            train_size: 800,
            eval_size: 200,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::nano(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn parse_stages(key: &str, v: &str) -> Result<[usize; NUM_STAGES]> {
    let items = v
        .split(',')
        .map(|s| parse::<usize>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    items.try_into().map_err(|_| {
        Error::config(format!(
            "{key}: expected {NUM_STAGES} comma-separated values, got {v:?}"
        ))
    })
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.data.train_size == 0 || self.data.eval_size == 0 {
            return Err(Error::config("dataset sizes must be at least 1"));
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.min_lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return Err(Error::config(
                "learning rates and weight decay must be non-negative, eps positive",
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer betas must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.label_smoothing) {
            return Err(Error::config("label smoothing must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("model.preset", m.preset.to_string());
        kv("model.depths", list(&m.depths));
        kv("model.widths", list(&m.widths));
        kv("model.offset_kernels", list(&m.offset_kernels));
        kv("model.ssm_ratio", m.ssm_ratio.to_string());
        kv("model.state_size", m.state_size.to_string());
        kv("model.ffn_ratio", m.ffn_ratio.to_string());
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.image_size", m.image_size.to_string());
        kv("model.local_window", m.local_window.to_string());
        kv("model.fb_bb", m.branches.fb_bb.to_string());
        kv("model.cb", m.branches.cb.to_string());
        kv("model.lb", m.branches.lb.to_string());
        kv("model.db", m.branches.db.to_string());
        kv("model.gate", m.branches.gate.to_string());
        kv("model.dp", m.deform.dp.to_string());
        kv("model.dt", m.deform.dt.to_string());
        kv("model.ob", m.deform.ob.to_string());
        kv("model.ca", m.deform.ca.to_string());
        kv("model.bias_lookup", m.bias_lookup.to_string());
        kv("model.discretization", m.discretization.to_string());
        kv(
            "model.scan_chunk",
            m.scan_chunk
                .map_or_else(|| "sequential".to_string(), |c| c.to_string()),
        );
        kv("optim.lr", format!("{:?}", o.lr));
        kv("optim.min_lr", format!("{:?}", o.min_lr));
        kv("optim.weight_decay", format!("{:?}", o.weight_decay));
        kv("optim.beta1", format!("{:?}", o.beta1));
        kv("optim.beta2", format!("{:?}", o.beta2));
        kv("optim.eps", format!("{:?}", o.eps));
        kv("optim.warmup_steps", o.warmup_steps.to_string());
        kv("optim.label_smoothing", format!("{:?}", o.label_smoothing));
        kv("train.steps", t.steps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.out_dir", t.out_dir.display().to_string());
        kv("data.kind", d.kind.to_string());
        kv("data.train_size", d.train_size.to_string());
        kv("data.eval_size", d.eval_size.to_string());
        kv("data.seed", d.seed.to_string());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config(format!(
                    "line {}: duplicate key {k}",
                    lineno + 1
                )));
            }
        }
        let mut cfg = RunConfig::default();
        if let Some(p) = entries.remove("model.preset") {
            cfg.model = ModelConfig::preset(p.parse::<Preset>()?);
        }
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, k: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match k {
            "model.depths" => m.depths = parse_stages(k, v)?,
            "model.widths" => m.widths = parse_stages(k, v)?,
            "model.offset_kernels" => m.offset_kernels = parse_stages(k, v)?,
            "model.ssm_ratio" => m.ssm_ratio = parse(k, v)?,
            "model.state_size" => m.state_size = parse(k, v)?,
            "model.ffn_ratio" => m.ffn_ratio = parse(k, v)?,
            "model.num_classes" => m.num_classes = parse(k, v)?,
            "model.image_size" => m.image_size = parse(k, v)?,
            "model.local_window" => m.local_window = parse(k, v)?,
            "model.fb_bb" => m.branches.fb_bb = parse_bool(k, v)?,
            "model.cb" => m.branches.cb = parse_bool(k, v)?,
            "model.lb" => m.branches.lb = parse_bool(k, v)?,
            "model.db" => m.branches.db = parse_bool(k, v)?,
            "model.gate" => m.branches.gate = parse_bool(k, v)?,
            "model.dp" => m.deform.dp = parse_bool(k, v)?,
            "model.dt" => m.deform.dt = parse_bool(k, v)?,
            "model.ob" => m.deform.ob = parse_bool(k, v)?,
            "model.ca" => m.deform.ca = parse_bool(k, v)?,
            "model.bias_lookup" => m.bias_lookup = v.parse::<BiasLookup>()?,
            "model.discretization" => m.discretization = v.parse::<Discretization>()?,
            "model.scan_chunk" => {
                m.scan_chunk = match v {
                    "sequential" => None,
                    _ => Some(parse(k, v)?),
                }
            }
            "optim.lr" => self.optim.lr = parse(k, v)?,
            "optim.min_lr" => self.optim.min_lr = parse(k, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(k, v)?,
            "optim.beta1" => self.optim.beta1 = parse(k, v)?,
            "optim.beta2" => self.optim.beta2 = parse(k, v)?,
            "optim.eps" => self.optim.eps = parse(k, v)?,
            "optim.warmup_steps" => self.optim.warmup_steps = parse(k, v)?,
            "optim.label_smoothing" => self.optim.label_smoothing = parse(k, v)?,
            "train.steps" => self.train.steps = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,
            "train.out_dir" => self.train.out_dir = PathBuf::from(v),
            "data.kind" => self.data.kind = v.parse()?,
            "data.train_size" => self.data.train_size = parse(k, v)?,
            "data.eval_size" => self.data.eval_size = parse(k, v)?,
            "data.seed" => self.data.seed = parse(k, v)?,
            _ => return Err(Error::config(format!("unknown key {k}"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn preset_then_overrides_in_any_order() {
        let a = RunConfig::from_text("model.widths = 8,16,32,64\nmodel.preset = nano\n").unwrap();
        let b = RunConfig::from_text("model.preset = nano\nmodel.widths = 8,16,32,64\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.widths, [8, 16, 32, 64]);
        assert_eq!(a.model.depths, [1, 1, 2, 1]);
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::from_text("# hi\n\noptim.lr = 0.5 # trailing\n").unwrap();
        assert_eq!(c.optim.lr, 0.5);
        for bad in [
            "optim.lrr = 1",
            "optim.lr = fast",
            "model.dp = yes",
            "model.depths = 1,2",
            "optim.lr = 1\noptim.lr = 2",
            "train.steps",
        ] {
            assert!(
                matches!(RunConfig::from_text(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }
}
