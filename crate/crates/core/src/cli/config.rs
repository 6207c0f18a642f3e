use std::path::{Path, PathBuf};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::ModelConfig;
use crate::numerics::OptimConfig;
use crate::training::{LossConfig, LossKind, SustainSchedule, TrainConfig};

const SECTIONS: &[&str] = &["model.", "train.", "loss.", "sustain.", "paths.", "synth."];
const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "seed",
    "shuffle",
    "keep_best",
    "learning_rate",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
];
const LOSS_KEYS: &[&str] = &["kind", "epsilon"];
const SUSTAIN_KEYS: &[&str] = &["schedule", "later_epochs"];
const PATH_KEYS: &[&str] = &["train_manifest", "dev_manifest", "checkpoint", "out_dir"];

/// File locations named by a run config. Relative entries resolve against
/// the directory holding the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a command needs, read from one `key=value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub sustain: Option<SustainSchedule>,
    pub synth: SynthConfig,
    pub paths: Paths,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            sustain: None,
            synth: SynthConfig::default(),
            paths: Paths::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn read_clip(kv: &KvMap, default: Option<f64>) -> Result<Option<f64>> {
    match kv.get_str("train.clip_norm") {
        None => Ok(default),
        Some("none") => Ok(None),
        Some(_) => Ok(Some(kv.get("train.clip_norm")?.expect("present"))),
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KvMap, base_dir: impl Into<PathBuf>) -> Result<Self> {
        if let Some(k) = kv
            .keys()
            .find(|k| !SECTIONS.iter().any(|s| k.starts_with(s)))
        {
            return Err(Error::config(format!("unknown key {k}")));
        }
        kv.check_known("train.", TRAIN_KEYS)?;
        kv.check_known("loss.", LOSS_KEYS)?;
        kv.check_known("sustain.", SUSTAIN_KEYS)?;
        kv.check_known("paths.", PATH_KEYS)?;

        let model = ModelConfig::from_kv(kv)?;
        let dt = TrainConfig::default();
        let dopt = OptimConfig::default();
        let train = TrainConfig {
            batch_size: kv.get_or("train.batch_size", dt.batch_size)?,
            epochs: kv.get_or("train.epochs", dt.epochs)?,
            seed: kv.get_or("train.seed", dt.seed)?,
            shuffle: kv.get_or("train.shuffle", dt.shuffle)?,
            keep_best: kv.get_or("train.keep_best", dt.keep_best)?,
            optim: OptimConfig {
                learning_rate: kv.get_or("train.learning_rate", dopt.learning_rate)?,
                weight_decay: kv.get_or("train.weight_decay", dopt.weight_decay)?,
                beta1: kv.get_or("train.beta1", dopt.beta1)?,
                beta2: kv.get_or("train.beta2", dopt.beta2)?,
                eps: kv.get_or("train.eps", dopt.eps)?,
                clip_norm: read_clip(kv, dopt.clip_norm)?,
            },
        };
        train.validate()?;
        let dl = LossConfig::default();
        let loss = LossConfig {
            kind: kv.get_or::<LossKind>("loss.kind", dl.kind)?,
            epsilon: kv.get_or("loss.epsilon", dl.epsilon)?,
        };
        loss.validate()?;
        let sustain = match kv.get_str("sustain.schedule") {
            Some(text) => {
                let mut s = SustainSchedule::parse(text)?;
                s.later_epochs = kv.get("sustain.later_epochs")?;
                Some(s)
            }
            None if kv.get_str("sustain.later_epochs").is_some() => {
                return Err(Error::config(
                    "sustain.later_epochs given without sustain.schedule",
                ))
            }
            None => None,
        };
        let path = |k: &str| kv.get_str(k).map(PathBuf::from);
        Ok(Self {
            model,
            train,
            loss,
            sustain,
            synth: SynthConfig::from_kv(kv)?,
            paths: Paths {
                train_manifest: path("paths.train_manifest"),
                dev_manifest: path("paths.dev_manifest"),
                checkpoint: path("paths.checkpoint"),
                out_dir: path("paths.out_dir"),
            },
            base_dir: base_dir.into(),
        })
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        Self::from_kv(&KvMap::parse(text)?, base_dir)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.model.to_kv();
        let t = &self.train;
        kv.insert("train.batch_size", t.batch_size);
        kv.insert("train.epochs", t.epochs);
        kv.insert("train.seed", t.seed);
        kv.insert("train.shuffle", t.shuffle);
        kv.insert("train.keep_best", t.keep_best);
        kv.insert("train.learning_rate", t.optim.learning_rate);
        kv.insert("train.weight_decay", t.optim.weight_decay);
        kv.insert("train.beta1", t.optim.beta1);
        kv.insert("train.beta2", t.optim.beta2);
        kv.insert("train.eps", t.optim.eps);
        match t.optim.clip_norm {
            Some(c) => kv.insert("train.clip_norm", c),
            None => kv.insert("train.clip_norm", "none"),
        }
        kv.insert("loss.kind", self.loss.kind);
        kv.insert("loss.epsilon", self.loss.epsilon);
        if let Some(s) = &self.sustain {
            kv.insert("sustain.schedule", s.to_text());
            if let Some(e) = s.later_epochs {
                kv.insert("sustain.later_epochs", e);
            }
        }
        kv.extend(self.synth.to_kv());
        let p = &self.paths;
        for (k, v) in [
            ("paths.train_manifest", &p.train_manifest),
            ("paths.dev_manifest", &p.dev_manifest),
            ("paths.checkpoint", &p.checkpoint),
            ("paths.out_dir", &p.out_dir),
        ] {
            if let Some(v) = v {
                kv.insert(k, v.display());
            }
        }
        kv
    }

    /// Canonical text; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_empty_text() {
        let c = RunConfig::parse("", ".").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn text_roundtrip() {
        let text = "model.duration_s=1.28\nmodel.embed_dim=8\nmodel.context_sizes=10,4,4\n\
                    model.pool_kernels=5,2\nmodel.global_layers=2\ntrain.epochs=3\ntrain.clip_norm=none\n\
                    loss.kind=ours\nsustain.schedule=1|0.4,0.6\nsustain.later_epochs=2\n\
                    paths.train_manifest=data/train.csv\nsynth.seed=4\n";
        let c = RunConfig::parse(text, "/cfg").unwrap();
        assert_eq!(c.train.optim.clip_norm, None);
        assert_eq!(c.loss.kind, LossKind::Ours);
        assert_eq!(c.sustain.as_ref().unwrap().later_epochs, Some(2));
        assert_eq!(c.synth.seed, 4);
        assert_eq!(
            c.resolve(c.paths.train_manifest.as_ref().unwrap()),
            PathBuf::from("/cfg/data/train.csv")
        );
        let again = RunConfig::parse(&c.to_text(), "/cfg").unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), c.to_text());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("trian.epochs=3\n", ".").is_err());
        assert!(RunConfig::parse("train.epoch=3\n", ".").is_err());
        assert!(RunConfig::parse("train.batch_size=0\n", ".").is_err());
        assert!(RunConfig::parse("sustain.schedule=1|0.5,0.6\n", ".").is_err());
    }
}
