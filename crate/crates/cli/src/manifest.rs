//! The experiment manifest: one TOML file describing every stage.
//!
//! Relative paths are resolved against the manifest's directory, so an
//! experiment folder can be moved as a unit.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use synthembed::embedder::{EmbedderParams, FeaturizerConfig, InstructionMode};
use synthembed::gateway::GatewayConfig;
use synthembed::influence::{DEFAULT_ALPHA, MAX_FACTORS};
use synthembed::model::Category;
use synthembed::synth::{GenerationSpec, SynthConfig, DEFAULT_TEMPLATE_ID};
use synthembed::trainer::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySection {
    #[serde(flatten)]
    pub config: GatewayConfig,
    /// `planted` for the built-in planted responder, or a path to a JSON
    /// script of mock responses. Unset means a real endpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock: Option<String>,
    /// Fraction of first attempts the planted responder answers with prose.
    pub mock_malformed_rate: f64,
}

impl Default for GatewaySection {
    fn default() -> Self {
        GatewaySection {
            config: GatewayConfig::default(),
            mock: None,
            mock_malformed_rate: 0.0,
        }
    }
}

/// Base encoder: a checkpoint, or a seeded random initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub dim: usize,
    pub init_scale: f64,
    /// Defaults to the manifest seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub featurizer: FeaturizerConfig,
    pub instruction_mode: InstructionMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            checkpoint: None,
            dim: 64,
            init_scale: 1.0,
            seed: None,
            featurizer: FeaturizerConfig::default(),
            instruction_mode: InstructionMode::Prepend,
        }
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_templates() -> String {
    DEFAULT_TEMPLATE_ID.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub gateway: GatewaySection,
    /// Built-in template set id, or a directory of template files.
    #[serde(default = "default_templates")]
    pub templates: String,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub generation: Vec<GenerationSpec>,
    /// Categories whose data comes from `import` rather than `generate`.
    #[serde(default)]
    pub imported_categories: Vec<Category>,
    /// Non-synthetic data mixed into every training run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_data: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub eval_tasks: Vec<PathBuf>,
    #[serde(default)]
    pub influence_categories: Vec<Category>,
}

/// Command-line values that take precedence over the manifest.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub mock: Option<String>,
    pub base_url: Option<String>,
    pub influence_categories: Option<Vec<Category>>,
}

impl ExperimentManifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::invariant(format!("{}: {e}", path.display())))
    }

    /// Reads, resolves relative paths and applies `overrides`; does not check files.
    pub fn load_unchecked(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        let mut m = Self::parse(&text, path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.apply(overrides);
        m.resolve(&root);
        Ok(m)
    }

    /// [`Self::load_unchecked`] plus validation of values and referenced files.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let m = Self::load_unchecked(path, overrides)?;
        m.validate()?;
        m.check_files()?;
        Ok(m)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = &o.mock {
            self.gateway.mock = Some(v.clone());
        }
        if let Some(v) = &o.base_url {
            self.gateway.config.base_url = v.clone();
        }
        if let Some(v) = &o.influence_categories {
            self.influence_categories = v.clone();
        }
        self.train.seed = self.seed;
    }

    fn resolve(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.eval_tasks.iter_mut().for_each(fix);
        if let Some(p) = self.base_data.as_mut() {
            fix(p);
        }
        if let Some(p) = self.model.checkpoint.as_mut() {
            fix(p);
        }
        if let Some(mock) = self.gateway.mock.as_mut() {
            if mock != "planted" && Path::new(mock).is_relative() {
                *mock = root.join(&*mock).to_string_lossy().into_owned();
            }
        }
        if Self::is_template_path(&self.templates) && Path::new(&self.templates).is_relative() {
            self.templates = root.join(&self.templates).to_string_lossy().into_owned();
        }
    }

    fn is_template_path(t: &str) -> bool {
        t.contains('/') || t.contains('\\') || t.starts_with('.')
    }

    pub fn template_dir(&self) -> Option<&Path> {
        Self::is_template_path(&self.templates).then(|| Path::new(&self.templates))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::invariant(format!("manifest `{}`: {m}", self.name)));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} must lie in (0, 1)", self.alpha));
        }
        self.train.validate().map_err(CliError::invariant)?;
        if self.eval_tasks.is_empty() {
            return bad("eval_tasks is empty".into());
        }
        let mut seen = BTreeSet::new();
        for spec in &self.generation {
            if !seen.insert(spec.category) {
                return bad(format!("category `{}` generated twice", spec.category));
            }
            spec.validate(self.synth.budget).map_err(CliError::from)?;
        }
        for c in &self.imported_categories {
            if !seen.insert(*c) {
                return bad(format!("category `{c}` both generated and imported"));
            }
        }
        for c in &self.influence_categories {
            if !seen.contains(c) {
                return bad(format!("influence category `{c}` is neither generated nor imported"));
            }
        }
        if self.influence_categories.len() > MAX_FACTORS {
            return bad(format!("at most {MAX_FACTORS} influence categories"));
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<(), CliError> {
        let mut required: Vec<&Path> = self.eval_tasks.iter().map(PathBuf::as_path).collect();
        required.extend(self.base_data.as_deref());
        required.extend(self.model.checkpoint.as_deref());
        if let Some(m) = self.gateway.mock.as_deref().filter(|m| *m != "planted") {
            required.push(Path::new(m));
        }
        required.extend(self.template_dir());
        match required.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(CliError::file(p, "referenced file does not exist")),
            None => Ok(()),
        }
    }

    /// Every category with data under `data/`.
    pub fn data_categories(&self) -> Vec<Category> {
        let mut v: Vec<Category> = self.generation.iter().map(|s| s.category).collect();
        v.extend(&self.imported_categories);
        v.sort();
        v
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn data_path(&self, c: Category) -> PathBuf {
        self.data_dir().join(format!("{c}.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model").join("checkpoint.json")
    }

    pub fn registry_dir(&self) -> PathBuf {
        self.output_dir.join("registry")
    }

    pub fn influence_dir(&self) -> PathBuf {
        self.output_dir.join("influence")
    }

    /// The base encoder named by the `[model]` section.
    pub fn base_params(&self) -> Result<EmbedderParams, CliError> {
        match &self.model.checkpoint {
            Some(p) => Ok(EmbedderParams::load(p)?),
            None => Ok(EmbedderParams::random(
                self.model.featurizer,
                self.model.dim,
                self.model.init_scale,
                self.model.seed.unwrap_or(self.seed),
            )?
            .with_instruction_mode(self.model.instruction_mode)),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "tiny"
output_dir = "out"
eval_tasks = ["tasks/a.json"]
influence_categories = ["short-long"]

[[generation]]
category = "short-long"
n_tasks = 1
n_instances_per_task = 5
"#;

    #[test]
    fn defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        fs::write(&path, MINIMAL).unwrap();
        let m = ExperimentManifest::load_unchecked(&path, &Overrides::default()).unwrap();
        assert_eq!(m.alpha, DEFAULT_ALPHA);
        assert_eq!(m.output_dir, dir.path().join("out"));
        assert_eq!(m.eval_tasks[0], dir.path().join("tasks/a.json"));
        assert_eq!(m.templates, "v1");
        m.validate().unwrap();
        match m.check_files() {
            Err(CliError::File { path, .. }) => assert!(path.ends_with("tasks/a.json")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_win_and_seed_reaches_training() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        fs::write(&path, MINIMAL).unwrap();
        let o = Overrides {
            seed: Some(9),
            alpha: Some(0.01),
            output_dir: Some("/tmp/elsewhere".into()),
            ..Overrides::default()
        };
        let m = ExperimentManifest::load_unchecked(&path, &o).unwrap();
        assert_eq!((m.seed, m.train.seed, m.alpha), (9, 9, 0.01));
        assert_eq!(m.output_dir, PathBuf::from("/tmp/elsewhere"));
    }

    #[test]
    fn influence_categories_must_have_data() {
        let text = MINIMAL.replace(r#"influence_categories = ["short-long"]"#, r#"influence_categories = ["sts"]"#);
        let m = ExperimentManifest::parse(&text, Path::new("m.toml")).unwrap();
        assert!(matches!(m.validate(), Err(CliError::Invariant(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("bogus = 1\n{MINIMAL}");
        assert!(ExperimentManifest::parse(&text, Path::new("m.toml")).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let m = ExperimentManifest::parse(MINIMAL, Path::new("m.toml")).unwrap();
        let again = ExperimentManifest::parse(&m.to_toml(), Path::new("m.toml")).unwrap();
        assert_eq!(m, again);
    }
}
