use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, PetError, Result};
use crate::pvp::{unknown_label, LabelId, Pattern, Pvp, Verbalizer};
use crate::vocab::Vocabulary;

fn default_max_seq_length() -> usize {
    256
}

fn default_extra_masks() -> usize {
    3
}

fn default_inference_masks() -> usize {
    1
}

/// Free-form completion settings (the model generates the answer text).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeFormSpec {
    /// Field holding the target text during training.
    pub target_field: String,
    /// Upper bound on padding masks appended to the target during training.
    #[serde(default = "default_extra_masks")]
    pub extra_masks: usize,
    /// Mask count inserted at inference.
    #[serde(default = "default_inference_masks")]
    pub inference_masks: usize,
}

/// Contents of `task.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub labels: Vec<String>,
    pub fields: Vec<String>,
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default = "default_max_seq_length")]
    pub max_seq_length: usize,
    /// Two fields randomly swapped during training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_fields: Option<[String; 2]>,
    /// Randomly permute candidate order during training.
    #[serde(default)]
    pub shuffle_candidates: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_form: Option<FreeFormSpec>,
    /// Positive class for option-level F1 metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_label: Option<String>,
}

impl TaskSpec {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_id(&self, name: &str) -> Result<LabelId> {
        self.labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| unknown_label(name))
    }

    pub fn label_name(&self, id: LabelId) -> &str {
        &self.labels[id]
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() || self.fields.is_empty() {
            return Err(config_err(format!(
                "task {} needs labels and fields",
                self.name
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.labels.iter().all(|l| seen.insert(l)) {
            return Err(config_err(format!(
                "task {} has duplicate labels",
                self.name
            )));
        }
        if let Some([a, b]) = &self.swap_fields {
            for f in [a, b] {
                if !self.fields.contains(f) {
                    return Err(config_err(format!("swap field {f:?} is not a task field")));
                }
            }
        }
        if let Some(p) = &self.positive_label {
            self.label_id(p)?;
        }
        Ok(())
    }
}

/// A task directory: `task.json`, `patterns/*.txt` and `verbalizers.json`.
///
/// `verbalizers.json` is either a single `{label: surface}` object or an
/// object of named verbalizers `{name: {label: surface}}`; every pattern is
/// paired with every verbalizer.
#[derive(Clone, Debug)]
pub struct TaskBundle {
    pub spec: TaskSpec,
    pub patterns: Vec<(String, String)>,
    pub verbalizers: Vec<(String, BTreeMap<String, String>)>,
}

impl TaskBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let spec: TaskSpec =
            serde_json::from_str(&std::fs::read_to_string(dir.join("task.json"))?)?;
        spec.validate()?;
        let mut patterns = Vec::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir.join("patterns"))?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        entries.sort();
        for path in entries {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| config_err(format!("bad pattern file name {}", path.display())))?
                .to_string();
            let text = std::fs::read_to_string(&path)?;
            patterns.push((name, text.trim_end_matches(['\n', '\r']).to_string()));
        }
        if patterns.is_empty() {
            return Err(config_err(format!("no patterns in {}", dir.display())));
        }
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("verbalizers.json"))?)?;
        let verbalizers = parse_verbalizers(&raw)?;
        Ok(Self {
            spec,
            patterns,
            verbalizers,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("patterns"))?;
        std::fs::write(
            dir.join("task.json"),
            serde_json::to_string_pretty(&self.spec)?,
        )?;
        for (name, text) in &self.patterns {
            std::fs::write(
                dir.join("patterns").join(format!("{name}.txt")),
                format!("{text}\n"),
            )?;
        }
        let value = if self.verbalizers.len() == 1 {
            serde_json::to_value(&self.verbalizers[0].1)?
        } else {
            let named: BTreeMap<&str, &BTreeMap<String, String>> = self
                .verbalizers
                .iter()
                .map(|(n, v)| (n.as_str(), v))
                .collect();
            serde_json::to_value(named)?
        };
        std::fs::write(
            dir.join("verbalizers.json"),
            serde_json::to_string_pretty(&value)?,
        )?;
        Ok(())
    }

    /// Compiles every pattern × verbalizer combination against `vocab`.
    pub fn pvps(&self, vocab: &Vocabulary) -> Result<Vec<Pvp>> {
        let mut out = Vec::new();
        for (pname, text) in &self.patterns {
            let pattern = Pattern::parse(text, vocab)?;
            for f in pattern.fields() {
                if !self.spec.fields.iter().any(|tf| tf == f) {
                    return Err(config_err(format!(
                        "pattern {pname} references unknown field {f:?}"
                    )));
                }
            }
            for (vname, surfaces) in &self.verbalizers {
                let mut pairs = Vec::new();
                for (label, surface) in surfaces {
                    pairs.push((self.spec.label_id(label)?, surface.as_str()));
                }
                let verbalizer = Verbalizer::from_surface(pairs, vocab)?;
                let name = if self.verbalizers.len() == 1 {
                    pname.clone()
                } else {
                    format!("{pname}+{vname}")
                };
                out.push(Pvp::new(name, pattern.clone(), verbalizer));
            }
        }
        Ok(out)
    }
}

fn parse_verbalizers(raw: &serde_json::Value) -> Result<Vec<(String, BTreeMap<String, String>)>> {
    let obj = raw.as_object().ok_or_else(|| PetError::Parse {
        location: "verbalizers.json".into(),
        message: "expected an object".into(),
    })?;
    if obj.values().all(|v| v.is_string()) {
        let single: BTreeMap<String, String> = serde_json::from_value(raw.clone())?;
        return Ok(vec![("default".into(), single)]);
    }
    let mut out = Vec::new();
    for (name, v) in obj {
        let map: BTreeMap<String, String> = serde_json::from_value(v.clone())?;
        out.push((name.clone(), map));
    }
    Ok(out)
}
