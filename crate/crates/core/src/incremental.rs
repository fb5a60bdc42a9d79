//! Institutional incremental learning: a single model walks an ordered
//! site path, one local epoch per visit, carrying both its weights and
//! its Adam state from site to site. The cyclic variant repeats the
//! walk for several rounds. There is no server and no averaging.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::cohort::{self, SiteDataset};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::federation::RoundMetrics;
use crate::nn::{self, AdamConfig, AdamState, LocalTraining, ModelSpec, ParameterVector};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSchedule {
    pub site_ids: Vec<String>,
    pub rounds: usize,
    #[serde(default = "yes")]
    pub include_public: bool,
}

fn yes() -> bool {
    true
}

impl PathSchedule {
    pub fn with_rounds(mut self, rounds: usize) -> Self {
        self.rounds = rounds;
        self
    }

    /// Drops the public site from the path.
    pub fn excluding_public(mut self, public: &str) -> Self {
        self.site_ids.retain(|id| id != public);
        self.include_public = false;
        self
    }

    pub fn validate(&self, sites: &[SiteDataset]) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidPath("rounds must be at least 1".into()));
        }
        if self.site_ids.is_empty() {
            return Err(Error::InvalidPath("path is empty".into()));
        }
        let mut seen = HashSet::new();
        for id in &self.site_ids {
            if !seen.insert(id) {
                return Err(Error::InvalidPath(format!("site `{id}` appears twice")));
            }
            if !sites.iter().any(|s| &s.site_id == id) {
                return Err(Error::UnknownSite(id.clone()));
            }
        }
        Ok(())
    }
}

/// Path over all sites by training-set size; ties go to the
/// lexicographically smaller site id first in both directions.
pub fn order_by_size(sites: &[SiteDataset], direction: Direction) -> PathSchedule {
    let mut order: Vec<(usize, &str)> = sites.iter().map(|s| (s.train.len(), s.site_id.as_str())).collect();
    order.sort_by(|a, b| {
        let by_size = match direction {
            Direction::Ascending => a.0.cmp(&b.0),
            Direction::Descending => b.0.cmp(&a.0),
        };
        by_size.then_with(|| a.1.cmp(b.1))
    });
    PathSchedule {
        site_ids: order.into_iter().map(|(_, id)| id.to_string()).collect(),
        rounds: 1,
        include_public: true,
    }
}

/// Model and optimizer carried along the path.
#[derive(Debug, Clone)]
pub struct TraversalState {
    pub params: ParameterVector,
    pub adam: AdamState,
    pub round: usize,
    pub position: usize,
}

/// Metrics on every holdout after one visit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisitLog {
    pub round: usize,
    pub position: usize,
    pub site_id: String,
    pub adam_step: u64,
    pub local_loss: f64,
    pub per_site: BTreeMap<String, f64>,
    pub metrics: RoundMetrics,
}

#[derive(Debug, Clone)]
pub struct TraversalOutcome {
    pub params: ParameterVector,
    pub visits: Vec<VisitLog>,
    pub total_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraversalSettings {
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TraversalSettings {
    fn default() -> Self {
        Self {
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

pub fn run_iil(
    path: &PathSchedule,
    sites: &[SiteDataset],
    spec: &ModelSpec,
    settings: &TraversalSettings,
    seed: u64,
) -> Result<TraversalOutcome> {
    if path.rounds != 1 {
        return Err(Error::InvalidPath("a single pass requires rounds = 1".into()));
    }
    traverse(path, sites, sites, spec, settings, seed)
}

pub fn run_ciil(
    path: &PathSchedule,
    sites: &[SiteDataset],
    spec: &ModelSpec,
    settings: &TraversalSettings,
    seed: u64,
) -> Result<TraversalOutcome> {
    traverse(path, sites, sites, spec, settings, seed)
}

/// Walks `path.rounds` passes over `path`, evaluating on `eval_sites`
/// after every visit.
pub fn traverse(
    path: &PathSchedule,
    sites: &[SiteDataset],
    eval_sites: &[SiteDataset],
    spec: &ModelSpec,
    settings: &TraversalSettings,
    seed: u64,
) -> Result<TraversalOutcome> {
    path.validate(sites)?;
    let mut data = BTreeMap::new();
    for id in &path.site_ids {
        let site = sites.iter().find(|s| &s.site_id == id).expect("validated");
        if site.train.is_empty() {
            return Err(Error::EmptyTrainingSet(id.clone()));
        }
        data.insert(id.clone(), cohort::to_dataset(&site.train)?);
    }
    let params = nn::init_model(spec, seed)?;
    let adam = AdamState::for_params(&params, settings.adam);
    let mut state = TraversalState {
        params,
        adam,
        round: 0,
        position: 0,
    };
    let mut visits = Vec::with_capacity(path.rounds * path.site_ids.len());
    let mut total_steps = 0;
    for round in 0..path.rounds {
        for (position, id) in path.site_ids.iter().enumerate() {
            let opts = LocalTraining {
                epochs: 1,
                batch_size: settings.batch_size,
                seed: seeding::site_round_seed(seed, id, round),
                first_epoch: 0,
            };
            let out = nn::train_local_epochs(&state.params, &state.adam, spec, &data[id], &opts)?;
            total_steps += out.steps;
            state = TraversalState {
                params: out.params,
                adam: out.state,
                round,
                position,
            };
            let report = evaluation::evaluate_sites(&state.params, spec, eval_sites)?;
            visits.push(VisitLog {
                round,
                position,
                site_id: id.clone(),
                adam_step: state.adam.t,
                local_loss: out.epoch_losses[0],
                metrics: (&report).into(),
                per_site: report.per_site,
            });
        }
    }
    Ok(TraversalOutcome {
        params: state.params,
        visits,
        total_steps,
    })
}
