//! Experiment configuration files.
//!
//! A config is TOML. A single experiment looks like
//!
//! ```toml
//! name = "fedavg-noniid"
//! strategy = "fedavg"
//! seeds = [0, 1, 2, 3, 4]
//!
//! [cohort.paper_analog]
//! sex_shift_scale = 0.0
//!
//! [[transforms]]
//! kind = "repartition_iid"
//!
//! [federation]
//! rounds = 100
//! client_fraction = 0.5
//! adam = { lr = 0.003 }
//! ```
//!
//! A suite repeats the experiment table under `[[experiment]]` and may
//! carry a `description`. Every table is optional except the strategy;
//! omitted fields take the library defaults.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{CohortConfig, PaperAnalog, Subgroup, NUM_CLASSES};
use crate::federation::FederationConfig;
use crate::incremental::Direction;
use crate::nn::{AdamConfig, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Siloed,
    SiloedPretrained,
    Cds,
    Fedavg,
    FedavgSynthOnly,
    FedavgRealPlusSynth,
    Iil,
    Ciil,
}

/// Which parameter table a strategy reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Training,
    Federation,
    Path,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Siloed,
        Strategy::SiloedPretrained,
        Strategy::Cds,
        Strategy::Fedavg,
        Strategy::FedavgSynthOnly,
        Strategy::FedavgRealPlusSynth,
        Strategy::Iil,
        Strategy::Ciil,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Siloed => "siloed",
            Strategy::SiloedPretrained => "siloed_pretrained",
            Strategy::Cds => "cds",
            Strategy::Fedavg => "fedavg",
            Strategy::FedavgSynthOnly => "fedavg_synth_only",
            Strategy::FedavgRealPlusSynth => "fedavg_real_plus_synth",
            Strategy::Iil => "iil",
            Strategy::Ciil => "ciil",
        }
    }

    pub fn family(self) -> Family {
        match self {
            Strategy::Siloed | Strategy::SiloedPretrained | Strategy::Cds => Family::Training,
            Strategy::Fedavg | Strategy::FedavgSynthOnly | Strategy::FedavgRealPlusSynth => Family::Federation,
            Strategy::Iil | Strategy::Ciil => Family::Path,
        }
    }

    /// Strategies that read the public site's data.
    pub fn needs_public_site(self) -> bool {
        matches!(
            self,
            Strategy::SiloedPretrained | Strategy::FedavgSynthOnly | Strategy::FedavgRealPlusSynth
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CohortSource {
    /// The built-in heterogeneous cohort, drawn anew for every seed.
    PaperAnalog(PaperAnalog),
    /// A full generator config; its `global_seed` is replaced by the run seed.
    Explicit(CohortConfig),
    /// A cohort file written by `export-cohort`; identical for every seed.
    File {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        public_site: Option<String>,
    },
}

impl Default for CohortSource {
    fn default() -> Self {
        CohortSource::PaperAnalog(PaperAnalog::default())
    }
}

impl CohortSource {
    pub fn public_site(&self) -> Option<String> {
        match self {
            CohortSource::PaperAnalog(_) => Some(crate::cohort::PUBLIC_SITE.to_string()),
            CohortSource::Explicit(c) => c.public_site.clone(),
            CohortSource::File { public_site, .. } => public_site.clone(),
        }
    }

    fn input_dim(&self) -> Option<usize> {
        match self {
            CohortSource::PaperAnalog(p) => Some(p.input_dim),
            CohortSource::Explicit(c) => Some(c.input_dim),
            CohortSource::File { .. } => None,
        }
    }

    fn key(&self) -> &'static str {
        match self {
            CohortSource::PaperAnalog(_) => "cohort.paper_analog",
            CohortSource::Explicit(_) => "cohort.explicit",
            CohortSource::File { .. } => "cohort.file",
        }
    }
}

/// Applied to every seed's cohort in the order given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    RepartitionIid,
    SplitKWays { k: usize },
    /// Restricts the training data; reports still cover every holdout.
    FilterSubgroup { group: Subgroup },
    EqualizeClasses,
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::RepartitionIid => "repartition_iid",
            Transform::SplitKWays { .. } => "split_k_ways",
            Transform::FilterSubgroup { .. } => "filter_subgroup",
            Transform::EqualizeClasses => "equalize_classes",
        }
    }
}

/// Settings of siloed, pretrained and centralized training; the path
/// strategies read only the batch size and optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Epochs on the public site before siloed fine-tuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_epochs: Option<usize>,
    /// Whether siloed strategies also train a model on the public site.
    #[serde(default)]
    pub include_public: bool,
}

fn default_batch() -> usize {
    32
}

pub const DEFAULT_EPOCHS: usize = 30;

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            epochs: None,
            batch_size: default_batch(),
            adam: AdamConfig::default(),
            pretrain_epochs: None,
            include_public: false,
        }
    }
}

impl TrainingParams {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(DEFAULT_EPOCHS)
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.epochs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathParams {
    /// Order by training-set size; ascending when neither this nor
    /// `site_ids` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_ids: Option<Vec<String>>,
    /// Passes over the path: 1 for iil, 3 by default for ciil.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds: Option<usize>,
    #[serde(default = "yes")]
    pub include_public: bool,
}

fn yes() -> bool {
    true
}

impl Default for PathParams {
    fn default() -> Self {
        Self {
            order: None,
            site_ids: None,
            rounds: None,
            include_public: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Outputs {
    /// Per sex, age band and sex-by-age cell metrics.
    pub subgroups: bool,
    /// Last-hidden-layer activations of every holdout example.
    pub embeddings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub strategy: Strategy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub outputs: Outputs,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub cohort: CohortSource,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transforms: Vec<Transform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub federation: Option<FederationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathParams>,
}

fn default_name() -> String {
    "experiment".into()
}

pub fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

impl ExperimentConfig {
    pub fn new(name: &str, strategy: Strategy) -> Self {
        Self {
            name: name.into(),
            strategy,
            seeds: default_seeds(),
            output_dir: None,
            outputs: Outputs::default(),
            model: ModelSpec::default(),
            cohort: CohortSource::default(),
            transforms: Vec::new(),
            training: None,
            federation: None,
            path: None,
        }
    }

    pub fn training(&self) -> TrainingParams {
        self.training.clone().unwrap_or_default()
    }

    pub fn federation(&self) -> FederationConfig {
        self.federation.clone().unwrap_or_default()
    }

    pub fn path(&self) -> PathParams {
        self.path.clone().unwrap_or_default()
    }

    pub fn path_rounds(&self) -> usize {
        self.path().rounds.unwrap_or(match self.strategy {
            Strategy::Ciil => 3,
            _ => 1,
        })
    }

    /// Makes a relative cohort file path relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let CohortSource::File { path, .. } = &mut self.cohort {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    /// SHA-256 of the config as JSON with sorted keys.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    /// Every semantic problem, each with a dotted field path.
    pub fn problems(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| out.push(ConfigIssue::at(field, message));

        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            push("name", "name must be non-empty and use only letters, digits, `-`, `_` and `.`".into());
        }
        if self.seeds.is_empty() {
            push("seeds", "at least one seed is required".into());
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            push("seeds", format!("seed {dup} is listed twice"));
        }
        if let Err(e) = self.model.validate() {
            push("model", e.to_string());
        }
        if self.model.num_classes != NUM_CLASSES {
            push("model.num_classes", format!("num_classes must be {NUM_CLASSES}"));
        }
        if let Some(dim) = self.cohort.input_dim() {
            if dim != self.model.input_dim {
                push(
                    "model.input_dim",
                    format!("input_dim is {} but the cohort has {dim} features", self.model.input_dim),
                );
            }
        }
        match &self.cohort {
            CohortSource::PaperAnalog(p) => {
                for (field, message) in p.problems() {
                    push(&format!("cohort.paper_analog.{field}"), message);
                }
            }
            CohortSource::Explicit(c) => {
                if let Err(e) = c.validate() {
                    push("cohort.explicit", e.to_string());
                }
            }
            CohortSource::File { path, .. } => {
                if path.as_os_str().is_empty() {
                    push("cohort.file.path", "path must not be empty".into());
                }
            }
        }
        let public = self.cohort.public_site();
        if public.is_none() {
            let field = format!("{}.public_site", self.cohort.key());
            if self.strategy.needs_public_site() {
                push(&field, format!("strategy `{}` needs a public site", self.strategy));
            }
            if self.transforms.iter().any(|t| matches!(t, Transform::EqualizeClasses)) {
                push(&field, "equalize_classes needs a public site to fit the generator".into());
            }
        }
        for (i, t) in self.transforms.iter().enumerate() {
            if let Transform::SplitKWays { k } = t {
                if *k < 2 {
                    push(&format!("transforms[{i}].k"), "k must be at least 2".into());
                }
            }
        }
        if self.outputs.embeddings && self.model.hidden_dims.is_empty() {
            push("outputs.embeddings", "embeddings need a model with a hidden layer".into());
        }

        let family = self.strategy.family();
        let unused = |table: &str| format!("`{table}` is not used by strategy `{}`", self.strategy);
        if self.federation.is_some() && family != Family::Federation {
            push("federation", unused("federation"));
        }
        if self.path.is_some() && family != Family::Path {
            push("path", unused("path"));
        }
        if self.training.is_some() && family == Family::Federation {
            push("training", format!("{}; use `federation`", unused("training")));
        }
        if let Some(t) = &self.training {
            if t.batch_size == 0 {
                push("training.batch_size", "batch_size must be at least 1".into());
            }
            if let Err(e) = t.adam.validate() {
                push("training.adam", e.to_string().replace("invalid model spec: ", ""));
            }
            match t.epochs {
                Some(0) => push("training.epochs", "epochs must be at least 1".into()),
                Some(_) if family == Family::Path => {
                    push("training.epochs", "path strategies train one epoch per visit".into())
                }
                _ => {}
            }
            match t.pretrain_epochs {
                Some(0) => push("training.pretrain_epochs", "pretrain_epochs must be at least 1".into()),
                Some(_) if self.strategy != Strategy::SiloedPretrained => {
                    push("training.pretrain_epochs", "only siloed_pretrained pretrains".into())
                }
                _ => {}
            }
            if t.include_public && !matches!(self.strategy, Strategy::Siloed | Strategy::SiloedPretrained) {
                push("training.include_public", "only siloed strategies choose whether to include the public site".into());
            }
        }
        if let Some(f) = &self.federation {
            if f.rounds == 0 {
                push("federation.rounds", "rounds must be at least 1".into());
            }
            if f.local_epochs == 0 {
                push("federation.local_epochs", "local_epochs must be at least 1".into());
            }
            if !(f.client_fraction > 0.0 && f.client_fraction <= 1.0) {
                push("federation.client_fraction", "client_fraction must be in (0,1]".into());
            }
            if f.batch_size == 0 {
                push("federation.batch_size", "batch_size must be at least 1".into());
            }
            if let Err(e) = f.adam.validate() {
                push("federation.adam", e.to_string().replace("invalid model spec: ", ""));
            }
        }
        if let Some(p) = &self.path {
            if p.order.is_some() && p.site_ids.is_some() {
                push("path", "give either `order` or `site_ids`, not both".into());
            }
            if let Some(ids) = &p.site_ids {
                if ids.is_empty() {
                    push("path.site_ids", "path is empty".into());
                }
                let mut seen = HashSet::new();
                if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
                    push("path.site_ids", format!("site `{dup}` appears twice"));
                }
            }
            match p.rounds {
                Some(0) => push("path.rounds", "rounds must be at least 1".into()),
                Some(r) if r > 1 && self.strategy == Strategy::Iil => {
                    push("path.rounds", "iil makes a single pass; use ciil for more rounds".into())
                }
                _ => {}
            }
        }
        out
    }
}

/// Several experiments run and compared together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    #[serde(default)]
    pub description: String,
    #[serde(rename = "experiment")]
    pub experiments: Vec<ExperimentConfig>,
}

impl Suite {
    pub fn problems(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if self.experiments.is_empty() {
            out.push(ConfigIssue::at("experiment", "a suite needs at least one experiment".into()));
        }
        let mut names = HashSet::new();
        for (i, e) in self.experiments.iter().enumerate() {
            if !names.insert(e.name.as_str()) {
                out.push(ConfigIssue::at(
                    &format!("experiment[{i}].name"),
                    format!("experiment name `{}` is used twice", e.name),
                ));
            }
            out.extend(e.problems().into_iter().map(|mut p| {
                p.field = format!("experiment[{i}].{}", p.field);
                p
            }));
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("suite serializes to toml")
    }

    pub fn set_seeds(&mut self, seeds: &[u64]) {
        for e in &mut self.experiments {
            e.seeds = seeds.to_vec();
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for e in &mut self.experiments {
            e.resolve_paths(base);
        }
    }
}

/// One problem found in a config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    /// Dotted path of the offending field; empty when unknown.
    pub field: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
}

impl ConfigIssue {
    pub fn at(field: &str, message: String) -> Self {
        Self {
            field: field.into(),
            message,
            line: None,
            column: None,
        }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let (Some(line), Some(col)) = (self.line, self.column) {
            write!(f, "line {line}, column {col}: ")?;
        }
        if !self.field.is_empty() {
            write!(f, "{}: ", self.field)?;
        }
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Parses and checks one experiment, reporting every problem found.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let config: ExperimentConfig = parse(raw)?;
    finish(config.problems(), config)
}

/// Parses a suite, or a single experiment as a suite of one.
pub fn validate_suite(raw: &str) -> Result<Suite, ConfigErrors> {
    let value: toml::Table = parse(raw)?;
    if !value.contains_key("experiment") {
        // a lone experiment keeps its unprefixed field paths
        return validate_config(raw).map(|e| Suite {
            description: String::new(),
            experiments: vec![e],
        });
    }
    let suite: Suite = parse(raw)?;
    finish(suite.problems(), suite)
}

fn finish<T>(problems: Vec<ConfigIssue>, value: T) -> Result<T, ConfigErrors> {
    if problems.is_empty() {
        Ok(value)
    } else {
        Err(ConfigErrors(problems))
    }
}

fn parse<T: serde::de::DeserializeOwned>(raw: &str) -> Result<T, ConfigErrors> {
    toml::from_str(raw).map_err(|e| {
        let (line, column, field) = match e.span() {
            Some(span) => {
                let (line, column) = line_column(raw, span.start);
                (Some(line), Some(column), field_at(raw, line))
            }
            None => (None, None, String::new()),
        };
        ConfigErrors(vec![ConfigIssue {
            field,
            message: e.message().trim().to_string(),
            line,
            column,
        }])
    })
}

/// 1-based line and column of a byte offset.
fn line_column(raw: &str, offset: usize) -> (usize, usize) {
    let before = &raw[..offset.min(raw.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

/// Best-effort dotted path of the key on `line`: the enclosing table
/// header plus the key itself.
fn field_at(raw: &str, line: usize) -> String {
    let lines: Vec<&str> = raw.lines().collect();
    let key = lines
        .get(line - 1)
        .and_then(|l| l.split_once('='))
        .map(|(k, _)| k.trim().to_string())
        .filter(|k| !k.starts_with('['));
    let table = lines[..(line - 1).min(lines.len())]
        .iter()
        .rev()
        .map(|l| l.trim())
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
    match (table, key) {
        (Some(t), Some(k)) => format!("{t}.{k}"),
        (Some(t), None) => t,
        (None, Some(k)) => k,
        (None, None) => String::new(),
    }
}
