//! Flat `section.key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment, blank lines are ignored and
//! string values may be double-quoted (so files also read as TOML). Unknown
//! keys are rejected. Relative paths resolve against the config file's
//! directory.

use std::path::{Path, PathBuf};

use rcdgcn::model::{Hyper, Variant};
use rcdgcn::synth::{FeatureSchema, ScenarioParams};
use rcdgcn::tab::AttentionMode;
use rcdgcn::train::TrainConfig;
use rcdgcn::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    pub percentile: f64,
    /// Hop ring used for significant links; `None` sums rings `1..=Γ`.
    pub ring: Option<usize>,
    /// Steps of context around each incident case.
    pub margin: usize,
    /// 1-based forecast step used for case series.
    pub horizon_step: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            percentile: 95.0,
            ring: Some(1),
            margin: 12,
            horizon_step: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data_dir: PathBuf,
    pub split: (f64, f64, f64),
    pub scenario: ScenarioParams,
    pub variant: Variant,
    /// Shape fields (`n_nodes`, `feature_width`, `seed`) are filled in from
    /// the dataset and run seed at train time.
    pub hyper: Hyper,
    pub train: TrainConfig,
    pub eval_stride: usize,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data_dir: PathBuf::from("data"),
            split: (0.7, 0.1, 0.2),
            scenario: ScenarioParams::default(),
            variant: Variant::Rcdgcn,
            hyper: Hyper::default(),
            train: TrainConfig::default(),
            eval_stride: 1,
            analysis: AnalysisConfig::default(),
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(line, format!("{key} = {v:?} is not a valid value")))
}

fn list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    v.trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|s| num(line, key, s.trim()))
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.out = base.join(&c.out);
        c.data_dir = base.join(&c.data_dir);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| bad(line, "expected `key = value`"))?;
            let key = key.trim();
            let v = value.trim().trim_matches('"');
            c.set(line, key, v, base)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, line: usize, key: &str, v: &str, base: &Path) -> Result<()> {
        let h = &mut self.hyper;
        let t = &mut self.train;
        let s = &mut self.scenario;
        let a = &mut self.analysis;
        match key {
            "run.seed" => self.seed = num(line, key, v)?,
            "run.out" => self.out = base.join(v),
            "data.dir" => self.data_dir = base.join(v),
            "data.split" => {
                let parts: Vec<f64> = v
                    .trim_matches(|c| c == '[' || c == ']')
                    .split(',')
                    .map(|p| num(line, key, p.trim()))
                    .collect::<Result<_>>()?;
                match parts[..] {
                    [x, y, z] => self.split = (x, y, z),
                    _ => return Err(bad(line, "data.split needs three ratios")),
                }
            }
            "scenario.nodes" => s.nodes = num(line, key, v)?,
            "scenario.days" => s.days = num(line, key, v)?,
            "scenario.incidents" => s.incidents = num(line, key, v)?,
            "scenario.noise_sigma" => s.noise_sigma = num(line, key, v)?,
            "scenario.flat_profile" => s.flat_profile = num(line, key, v)?,
            "scenario.merge_prob" => s.merge_prob = num(line, key, v)?,
            "scenario.reach" => s.reach = num(line, key, v)?,
            "scenario.schema" => {
                s.schema = match v {
                    "icm495" => FeatureSchema::Icm495,
                    "manhattan" => FeatureSchema::Manhattan,
                    _ => return Err(bad(line, format!("unknown schema {v:?} (icm495 | manhattan)"))),
                }
            }
            "model.variant" => {
                self.variant = Variant::parse(v).ok_or_else(|| bad(line, format!("unknown variant {v:?} (rcdgcn | rcdgcn_r | fcn)")))?
            }
            "model.q" => h.q = num(line, key, v)?,
            "model.horizon" => h.horizon = num(line, key, v)?,
            "model.hops" => h.hops = num(line, key, v)?,
            "model.embed_width" => h.embed_width = num(line, key, v)?,
            "model.width" => h.width = num(line, key, v)?,
            "model.dilations" => h.dilations = list(line, key, v)?,
            "model.taps" => h.taps = num(line, key, v)?,
            "model.blocks" => h.blocks = num(line, key, v)?,
            "model.fcn_hidden" => h.fcn_hidden = num(line, key, v)?,
            "model.attention" => {
                h.attention = AttentionMode::parse(v).ok_or_else(|| bad(line, format!("unknown attention mode {v:?} (per_ring | shared)")))?
            }
            "model.per_step_attention" => h.per_step_attention = num(line, key, v)?,
            "train.lr" => t.lr = num(line, key, v)?,
            "train.weight_decay" => t.weight_decay = num(line, key, v)?,
            "train.batch_size" => t.batch_size = num(line, key, v)?,
            "train.epochs" => t.epochs = num(line, key, v)?,
            "train.patience" => t.early_stop_patience = num(line, key, v)?,
            "train.rmsprop_alpha" => t.rmsprop_alpha = num(line, key, v)?,
            "train.rmsprop_eps" => t.rmsprop_eps = num(line, key, v)?,
            "train.stride" => t.train_stride = num(line, key, v)?,
            "train.val_stride" => t.val_stride = num(line, key, v)?,
            "eval.stride" => self.eval_stride = num(line, key, v)?,
            "analysis.percentile" => a.percentile = num(line, key, v)?,
            "analysis.ring" => a.ring = if v == "all" { None } else { Some(num(line, key, v)?) },
            "analysis.margin" => a.margin = num(line, key, v)?,
            "analysis.horizon_step" => a.horizon_step = num(line, key, v)?,
            _ => return Err(bad(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval_stride == 0 {
            return Err(Error::Config("eval.stride must be ≥ 1".into()));
        }
        if self.analysis.horizon_step == 0 || self.analysis.horizon_step > self.hyper.horizon {
            return Err(Error::Config("analysis.horizon_step must be within 1..=model.horizon".into()));
        }
        if !(0.0..100.0).contains(&self.analysis.percentile) {
            return Err(Error::Config("analysis.percentile must be in [0, 100)".into()));
        }
        if self.scenario.nodes == 0 || self.scenario.days == 0 {
            return Err(Error::Config("scenario needs at least one node and one day".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_resolves_paths() {
        let c = RunConfig::parse(
            "# comment\nrun.seed = 7\ndata.dir = \"d\"  # trailing\nmodel.dilations = [1, 2, 4]\nmodel.variant = fcn\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.data_dir, PathBuf::from("/base/d"));
        assert_eq!(c.hyper.dilations, vec![1, 2, 4]);
        assert_eq!(c.variant, Variant::Fcn);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = RunConfig::parse("model.colour = red\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(RunConfig::parse("train.lr = fast\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("train.lr = 0\n", Path::new(".")).is_err());
    }
}
