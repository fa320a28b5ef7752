//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::ToyDistribution;
use crate::distill_cm::CmConfig;
use crate::dmd::DmdConfig;
use crate::error::{Error, Result};
use crate::networks::{ArchSpec, PointNetSpec};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    TrainTeacher,
    DistillCm,
    DistillDmd,
    Sample,
    Eval,
    PackDemo,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::TrainTeacher => "train-teacher",
            Task::DistillCm => "distill-cm",
            Task::DistillDmd => "distill-dmd",
            Task::Sample => "sample",
            Task::Eval => "eval",
            Task::PackDemo => "pack-demo",
        }
    }
}

/// Training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Toy {
        distribution: ToyDistribution,
    },
    Composition {
        k_min: usize,
        k_max: usize,
        samples: usize,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Toy {
            distribution: ToyDistribution::TwoMoons { noise: 0.05 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMethod {
    Euler,
    Consistency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub method: SampleMethod,
    pub steps: usize,
    pub count: usize,
    pub cfg_scale: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            method: SampleMethod::Consistency,
            steps: 8,
            count: 1000,
            cfg_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per set.
    pub count: usize,
    pub projections: usize,
    /// Independent set pairs averaged per distance.
    pub replicates: usize,
    pub euler_steps: usize,
    pub consistency_steps: usize,
    /// Teacher guidance for reference samples.
    pub cfg_scale: f64,
    pub mmd_bandwidth: f64,
    pub speedup: bool,
    pub speedup_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            projections: 128,
            replicates: 8,
            euler_steps: 100,
            consistency_steps: 8,
            cfg_scale: 1.0,
            mmd_bandwidth: 0.5,
            speedup: false,
            speedup_repeats: 3,
        }
    }
}

/// Everything a run needs. `seed` is mandatory; every other section has
/// defaults. Checkpoint paths are relative to the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default = "default_net")]
    pub net: ArchSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub cm: CmConfig,
    #[serde(default)]
    pub dmd: DmdConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Teacher checkpoint for distillation, sampling and evaluation.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    /// Student checkpoint for DMD, sampling and evaluation.
    #[serde(default)]
    pub student: Option<PathBuf>,
}

fn default_net() -> ArchSpec {
    ArchSpec::Point(PointNetSpec::default())
}

impl RunConfig {
    /// A config with all defaults.
    pub fn new(task: Task, seed: u64) -> Self {
        Self {
            task: Some(task),
            seed,
            out_dir: None,
            dataset: DatasetSpec::default(),
            net: default_net(),
            train: TrainConfig::default(),
            cm: CmConfig::default(),
            dmd: DmdConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            teacher: None,
            student: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `path`; relative checkpoint paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.teacher, &mut cfg.student].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.cm.validate()?;
        self.dmd.validate()?;
        if self.sample.steps == 0 || self.sample.count == 0 || self.sample.cfg_scale < 1.0 {
            return Err(Error::Config("sample: steps and count must be ≥ 1, cfg_scale ≥ 1".into()));
        }
        let e = &self.eval;
        if e.count < 2 || e.projections == 0 || e.replicates == 0 || e.euler_steps == 0 || e.consistency_steps == 0 {
            return Err(Error::Config("eval: counts must be positive (count ≥ 2)".into()));
        }
        if let DatasetSpec::Toy { distribution } = &self.dataset {
            distribution.validate().map_err(|err| Error::Config(format!("dataset: {err}")))?;
            if let ArchSpec::Point(p) = &self.net {
                if p.dim != distribution.dim() {
                    return Err(Error::Config(format!(
                        "net.dim = {} but the dataset has dimension {}",
                        p.dim,
                        distribution.dim()
                    )));
                }
            }
        }
        match (&self.dataset, &self.net) {
            (DatasetSpec::Toy { .. }, ArchSpec::Seq(_)) | (DatasetSpec::Composition { .. }, ArchSpec::Point(_)) => {
                Err(Error::Config("net kind does not match the dataset (toy → point, composition → seq)".into()))
            }
            _ => Ok(()),
        }
    }

    /// Checks that the checkpoints `task` reads exist.
    pub fn check_paths(&self, task: Task) -> Result<()> {
        let need = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                None => Err(Error::Config(format!("{} needs `{what}`", task.name()))),
                Some(p) if !p.exists() => Err(Error::Config(format!("{what} checkpoint {} does not exist", p.display()))),
                Some(_) => Ok(()),
            }
        };
        match task {
            Task::DistillCm => need(&self.teacher, "teacher"),
            Task::DistillDmd => need(&self.teacher, "teacher").and(need(&self.student, "student")),
            Task::Sample => match (&self.student, &self.teacher) {
                (None, None) => Err(Error::Config("sample needs `student` or `teacher`".into())),
                _ => self.student.as_ref().or(self.teacher.as_ref()).map_or(Ok(()), |p| {
                    if p.exists() { Ok(()) } else { Err(Error::Config(format!("checkpoint {} does not exist", p.display()))) }
                }),
            },
            Task::Eval => need(&self.teacher, "teacher").and(need(&self.student, "student")),
            Task::TrainTeacher | Task::PackDemo => Ok(()),
        }
    }

    /// CRC32 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        format!("{:08x}", crc32fast::hash(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let c = RunConfig::parse("seed = 3\n").unwrap();
        let o = c.train.optim;
        assert_eq!((o.beta1, o.beta2, o.eps, o.weight_decay), (0.9, 0.95, 1e-8, 0.05));
        assert_eq!(c.dmd.cfg_scale, 6.0);
        assert_eq!(c.cm.fd.epsilon, 5e-3);
        assert_eq!(c.dmd.ratio, 5);
        assert_eq!(c.eval.euler_steps, 100);
        assert_eq!(c.eval.consistency_steps, 8);
    }

    #[test]
    fn unknown_keys_are_named() {
        for (text, key) in [
            ("seed = 1\nlearning_rate = 3\n", "learning_rate"),
            ("seed = 1\n[train]\nbatchsize = 3\n", "batchsize"),
            ("seed = 1\n[train.optim]\nbeta3 = 0.1\n", "beta3"),
            ("seed = 1\n[dataset]\nkind = \"toy\"\ndistribution = { kind = \"two-moons\", noise = 0.1, extra = 1 }\n", "extra"),
        ] {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::parse("task = \"sample\"\n").unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("seed = 1\n[dmd]\ncfg_scale = 0.5\n").is_err());
        assert!(RunConfig::parse("seed = 1\n[cm]\nt_min = 0.001\n").is_err());
        assert!(RunConfig::parse("seed = 1\n[net]\nkind = \"point\"\ndim = 3\n").is_err());
        assert!(RunConfig::parse("seed = 1\n[train.optim]\nlr = -1.0\n").is_err());
    }

    #[test]
    fn full_config_parses() {
        let text = r#"
task = "train-teacher"
seed = 42
[dataset]
kind = "toy"
distribution = { kind = "gaussian-mixture", means = [[-1.5], [1.5]], stds = [0.5, 0.5], weights = [0.5, 0.5] }
[net]
kind = "point"
dim = 1
hidden = 32
[train]
steps = 10
batch = 16
"#;
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.task, Some(Task::TrainTeacher));
        assert_eq!(c.train.steps, 10);
        let again = RunConfig::parse(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn hash_ignores_output_directory() {
        let mut a = RunConfig::new(Task::Sample, 1);
        let h = a.hash();
        a.out_dir = Some("elsewhere".into());
        assert_eq!(a.hash(), h);
        a.seed = 2;
        assert_ne!(a.hash(), h);
    }
}
