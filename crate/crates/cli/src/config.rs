//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mixce::corpus::Dataset;
use mixce::trainer::TrainConfig;
use mixce::world::BigramWorld;
use serde::{Deserialize, Serialize};

pub const CONFIG_FORMAT: &str = "mixce-config/1";

/// A training configuration plus the files it reads. Relative paths are
/// resolved against the directory of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format: String,
    pub name: String,
    pub train_data: PathBuf,
    pub valid_data: PathBuf,
    /// Gold world; required by oracle objectives and for metrics.
    #[serde(default)]
    pub world: Option<PathBuf>,
    /// Parent of the run directory; defaults to `runs` next to the config.
    #[serde(default)]
    pub runs_dir: Option<PathBuf>,
    pub training: TrainConfig,
}

pub struct Inputs {
    pub world: Option<BigramWorld>,
    pub train: Dataset,
    pub valid: Dataset,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if config.format != CONFIG_FORMAT {
            bail!("{}: format must be {CONFIG_FORMAT:?}, found {:?}", path.display(), config.format);
        }
        if config.name.is_empty() || config.name.contains(['/', '\\']) {
            bail!("{}: name must be a nonempty plain directory name", path.display());
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        config.train_data = resolve(&config.train_data);
        config.valid_data = resolve(&config.valid_data);
        config.world = config.world.as_deref().map(resolve);
        config.runs_dir = Some(resolve(config.runs_dir.as_deref().unwrap_or(Path::new("runs"))));
        config.training.validate()?;
        Ok(config)
    }

    pub fn run_root(&self) -> PathBuf {
        self.runs_dir.clone().unwrap_or_else(|| PathBuf::from("runs")).join(&self.name)
    }

    pub fn load_inputs(&self) -> Result<Inputs> {
        let world = match &self.world {
            Some(p) => Some(BigramWorld::load(p).with_context(|| format!("loading world {}", p.display()))?),
            None => None,
        };
        let train = Dataset::load(&self.train_data)
            .with_context(|| format!("loading training data {}", self.train_data.display()))?;
        let valid = Dataset::load(&self.valid_data)
            .with_context(|| format!("loading validation data {}", self.valid_data.display()))?;
        Ok(Inputs { world, train, valid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixce::objectives::{ObjectiveKind, ObjectiveSpec};

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("exp.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn relative_paths_follow_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"format": "mixce-config/1", "name": "fwd", "train_data": "d/train.txt",
                "valid_data": "/abs/valid.txt", "world": "w.json",
                "training": {"objective": {"kind": "forward_kl"}}}"#,
        );
        let c = ExperimentConfig::load(&p).unwrap();
        assert_eq!(c.train_data, dir.path().join("d/train.txt"));
        assert_eq!(c.valid_data, PathBuf::from("/abs/valid.txt"));
        assert_eq!(c.world, Some(dir.path().join("w.json")));
        assert_eq!(c.run_root(), dir.path().join("runs").join("fwd"));
        assert_eq!(c.training, TrainConfig::new(ObjectiveSpec::new(ObjectiveKind::ForwardKl, 1.0)));
    }

    #[test]
    fn unknown_keys_and_formats_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = r#""name": "x", "train_data": "t", "valid_data": "v", "training": {"objective": {"kind": "forward_kl"}}"#;
        let p = write(dir.path(), &format!(r#"{{"format": "mixce-config/1", "learning_rte": 1, {base}}}"#));
        assert!(ExperimentConfig::load(&p).is_err());
        let p = write(dir.path(), &format!(r#"{{"format": "mixce-config/2", {base}}}"#));
        assert!(ExperimentConfig::load(&p).is_err());
        let p = write(
            dir.path(),
            r#"{"format": "mixce-config/1", "name": "x", "train_data": "t", "valid_data": "v",
                "training": {"objective": {"kind": "forward_kl"}, "batch_sise": 3}}"#,
        );
        assert!(ExperimentConfig::load(&p).is_err());
    }
}
