//! Run configuration: a TOML file with sections, overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pet_core::pipeline::GenerationPlan;
use pet_core::{DecodingStrategy, TinyTransformerConfig, TrainConfig, WeightMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// Task directory with `task.json`, `patterns/` and `verbalizers.json`.
    pub bundle: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    /// PVP names to use; empty means all.
    pub pvps: Vec<String>,
    pub max_seq_length: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Full labeled pool that `sample` draws from.
    pub pool: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub few_shot: usize,
    pub unlabeled_cap: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            pool: None,
            train: None,
            unlabeled: None,
            test: None,
            few_shot: 32,
            unlabeled_cap: 20_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    /// Pretrained tiny-transformer checkpoint.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// One sentence per line.
    pub corpus: Option<PathBuf>,
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub learning_rate: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            corpus: None,
            steps: 16_000,
            batch_size: 16,
            mask_prob: 0.15,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PetSection {
    pub seeds_per_pvp: usize,
    pub strategy: DecodingStrategy,
    pub weights: WeightMode,
    pub distill: bool,
    /// Concurrent member trainings; 0 picks the number of members capped by
    /// the available cores.
    pub parallelism: usize,
}

impl Default for PetSection {
    fn default() -> Self {
        Self {
            seeds_per_pvp: 3,
            strategy: DecodingStrategy::MaxFirst,
            weights: WeightMode::Accuracy,
            distill: true,
            parallelism: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskSection,
    pub data: DataSection,
    pub backend: BackendSection,
    pub model: TinyTransformerConfig,
    pub pretrain: PretrainSection,
    pub train: TrainConfig,
    pub classifier: TrainConfig,
    pub pet: PetSection,
    pub ipet: GenerationPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            task: TaskSection::default(),
            data: DataSection::default(),
            backend: BackendSection::default(),
            model: TinyTransformerConfig::default(),
            pretrain: PretrainSection::default(),
            train: TrainConfig::default(),
            classifier: TrainConfig::classifier(),
            pet: PetSection::default(),
            ipet: GenerationPlan::default(),
        }
    }
}

fn section<T: DeserializeOwned + Default>(name: &str, table: Option<toml::Value>) -> Result<T> {
    match table {
        Some(v) => T::deserialize(v).with_context(|| format!("in [{name}]")),
        None => Ok(T::default()),
    }
}

/// Fills keys missing from `table` with those of `defaults`; rejects keys
/// `defaults` does not have.
fn merge_section<T: Serialize + DeserializeOwned>(
    name: &str,
    defaults: &T,
    table: Option<toml::Value>,
) -> Result<T> {
    let base = toml::Value::try_from(defaults)?;
    let Some(value) = table else {
        return Ok(T::deserialize(base)?);
    };
    let (toml::Value::Table(mut base), toml::Value::Table(given)) = (base, value) else {
        bail!("[{name}] must be a table");
    };
    for (k, v) in given {
        if !base.contains_key(&k) {
            bail!("unknown key {k:?} in [{name}]");
        }
        base.insert(k, v);
    }
    T::deserialize(toml::Value::Table(base)).with_context(|| format!("in [{name}]"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        let d = Self::default();
        let mut take = |k: &str| table.remove(k);
        let cfg = Self {
            seed: match take("seed") {
                Some(v) => u64::deserialize(v).context("seed")?,
                None => d.seed,
            },
            out_dir: match take("out_dir") {
                Some(v) => PathBuf::deserialize(v).context("out_dir")?,
                None => d.out_dir.clone(),
            },
            task: section("task", take("task"))?,
            data: section("data", take("data"))?,
            backend: section("backend", take("backend"))?,
            model: merge_section("model", &d.model, take("model"))?,
            pretrain: section("pretrain", take("pretrain"))?,
            train: merge_section("train", &d.train, take("train"))?,
            classifier: merge_section("classifier", &d.classifier, take("classifier"))?,
            pet: section("pet", take("pet"))?,
            ipet: merge_section("ipet", &d.ipet, take("ipet"))?,
        };
        if let Some(k) = table.keys().next() {
            bail!("unknown top-level key {k:?}");
        }
        Ok(cfg)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg =
            Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        for p in [
            &mut self.task.bundle,
            &mut self.task.vocab,
            &mut self.data.pool,
            &mut self.data.train,
            &mut self.data.unlabeled,
            &mut self.data.test,
            &mut self.backend.checkpoint,
            &mut self.pretrain.corpus,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate().context("[train]")?;
        self.classifier.validate().context("[classifier]")?;
        self.ipet.validate().context("[ipet]")?;
        if self.pet.seeds_per_pvp == 0 {
            bail!("[pet] seeds_per_pvp must be at least 1");
        }
        if self.pretrain.batch_size == 0 {
            bail!("[pretrain] batch_size must be positive");
        }
        if !(self.pretrain.mask_prob > 0.0 && self.pretrain.mask_prob < 1.0) {
            bail!("[pretrain] mask_prob must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Returns the path or a "missing key" error.
pub fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!("config key {key} is required for this command"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml(
            "seed = 4\n[classifier]\nlearning_rate = 0.5\n[pet]\nstrategy = \"ltr\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.classifier.learning_rate, 0.5);
        assert_eq!(cfg.classifier.max_steps, 5000);
        assert_eq!(cfg.pet.strategy, DecodingStrategy::LeftToRight);
        assert_eq!(cfg.pet.seeds_per_pvp, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nlearning_rat = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"));
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
        assert!(RunConfig::from_toml("[pet]\nstrategy = \"beam\"\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.task.bundle = Some("/x/task".into());
        cfg.pet.distill = false;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg =
            RunConfig::from_toml("out_dir = \"out\"\n[data]\ntrain = \"t.jsonl\"\n").unwrap();
        cfg.resolve(Path::new("/cfg"));
        assert_eq!(cfg.out_dir, Path::new("/cfg/out"));
        assert_eq!(cfg.data.train.as_deref(), Some(Path::new("/cfg/t.jsonl")));
    }
}
