//! Parameter-server FedAvg plus the centralized and siloed baselines.
//!
//! One reduction round: sample the active sites, let each train `E`
//! local epochs from the broadcast weights with its own Adam state,
//! average the returned weights, broadcast. Only weights cross the
//! site boundary, and they do so through [`encode_weights`]; Adam
//! moments stay resident at their site for the whole run.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{self, SiteDataset};
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricsReport};
use crate::nn::{self, AdamConfig, AdamState, LocalTraining, ModelSpec, ParameterVector, ShapeIndex};
use crate::seeding::{self, Key};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    ByTrainSize,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_fraction: f64,
    pub batch_size: usize,
    /// Run seed; supplied by the caller rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub weighting: Weighting,
    pub adam: AdamConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            local_epochs: 1,
            client_fraction: 1.0,
            batch_size: 32,
            seed: 0,
            weighting: Weighting::ByTrainSize,
            adam: AdamConfig::default(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidFederation(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be at least 1");
        }
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return bad("client_fraction must be in (0,1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Training-only settings shared by the non-federated strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

/// `ceil(C * n)`, at least one and at most `n`.
pub fn active_count(client_fraction: f64, num_sites: usize) -> usize {
    let raw = (client_fraction * num_sites as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(num_sites)
}

/// Active sites for `round`, in input order; depends only on `(seed, round)`.
pub fn sample_active_sites(site_ids: &[String], client_fraction: f64, round: usize, seed: u64) -> Vec<String> {
    let n = site_ids.len();
    let m = active_count(client_fraction, n);
    if m >= n {
        return site_ids.to_vec();
    }
    let mut rng = seeding::derive_rng(seed, &[Key::Str("active"), round.into()]);
    let mut picked = index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| site_ids[i].clone()).collect()
}

thread_local! {
    static AGGREGATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `aggregate_weighted` calls made on the current thread.
pub fn aggregation_calls() -> u64 {
    AGGREGATIONS.with(Cell::get)
}

/// Convex combination `sum w_k theta_k / sum w_k`, accumulated in the
/// given order as `theta_0 + sum lambda_k (theta_k - theta_0)` and
/// clamped to the coordinate range of the inputs.
pub fn aggregate_weighted(models: &[(&ParameterVector, f64)]) -> Result<ParameterVector> {
    AGGREGATIONS.with(|c| c.set(c.get() + 1));
    let (base, _) = models.first().ok_or(Error::NoModels)?;
    if models.iter().any(|(m, _)| m.shape() != base.shape()) {
        return Err(Error::ShapeMismatch);
    }
    if models.iter().any(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidWeights);
    }
    let total: f64 = models.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::InvalidWeights);
    }
    let base_values = base.values();
    let mut out = base_values.to_vec();
    for (model, w) in &models[1..] {
        let lambda = w / total;
        if lambda == 0.0 {
            continue;
        }
        for ((o, &x), &b) in out.iter_mut().zip(model.values()).zip(base_values) {
            *o += lambda * (x - b);
        }
    }
    if models.len() > 1 {
        for (j, o) in out.iter_mut().enumerate() {
            let (lo, hi) = models.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (m, _)| {
                let v = m.values()[j];
                (lo.min(v), hi.max(v))
            });
            *o = o.clamp(lo, hi);
        }
    }
    ParameterVector::new(out, base.shape().clone())
}

/// Wire format of an inter-site message: parameter count then raw
/// little-endian `f64` values. Nothing else is ever sent.
pub fn encode_weights(params: &ParameterVector) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + 8 * params.len());
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_weights(bytes: &[u8], shape: &ShapeIndex) -> Result<ParameterVector> {
    let malformed = |m: &str| Error::Parse {
        line: 0,
        message: m.to_string(),
    };
    if bytes.len() < 8 {
        return Err(malformed("truncated header"));
    }
    let (head, body) = bytes.split_at(8);
    let n = u64::from_le_bytes(head.try_into().expect("8 bytes")) as usize;
    if body.len() != 8 * n {
        return Err(malformed("payload length does not match header"));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ParameterVector::new(values, shape.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub avg: f64,
    pub wavg: f64,
    pub macro_f1: f64,
}

impl From<&MetricsReport> for RoundMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            avg: r.avg,
            wavg: r.wavg,
            macro_f1: r.macro_f1,
        }
    }
}

/// One line of the convergence log. Metrics are taken after broadcast.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    pub active: Vec<String>,
    pub local_losses: BTreeMap<String, f64>,
    pub metrics: RoundMetrics,
}

#[derive(Debug, Clone)]
pub struct FedAvgOutcome {
    pub params: ParameterVector,
    pub logs: Vec<RoundLog>,
    /// Weights held by each site after the final broadcast.
    pub resident: BTreeMap<String, ParameterVector>,
}

#[derive(Debug, Clone, Default)]
pub struct FedAvgOptions<'a> {
    /// Starting weights instead of `init_model(spec, seed)`.
    pub initial: Option<&'a ParameterVector>,
    /// Holdouts used for the per-round metrics; defaults to the training sites.
    pub eval_sites: Option<&'a [SiteDataset]>,
}

pub fn run_fedavg(config: &FederationConfig, sites: &[SiteDataset], spec: &ModelSpec) -> Result<FedAvgOutcome> {
    run_fedavg_with(config, sites, spec, &FedAvgOptions::default())
}

pub fn run_fedavg_with(
    config: &FederationConfig,
    sites: &[SiteDataset],
    spec: &ModelSpec,
    options: &FedAvgOptions<'_>,
) -> Result<FedAvgOutcome> {
    config.validate()?;
    spec.validate()?;
    if sites.is_empty() {
        return Err(Error::InvalidFederation("no sites".into()));
    }
    let mut ordered: Vec<&SiteDataset> = sites.iter().collect();
    ordered.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    for pair in ordered.windows(2) {
        if pair[0].site_id == pair[1].site_id {
            return Err(Error::InvalidCohort(format!("duplicate site `{}`", pair[0].site_id)));
        }
    }
    let mut data = BTreeMap::new();
    for site in &ordered {
        if site.train.is_empty() {
            return Err(Error::EmptyTrainingSet(site.site_id.clone()));
        }
        data.insert(site.site_id.clone(), cohort::to_dataset(&site.train)?);
    }
    let ids: Vec<String> = data.keys().cloned().collect();
    let eval_sites = options.eval_sites.unwrap_or(sites);

    let global = match options.initial {
        Some(p) => p.clone(),
        None => nn::init_model(spec, config.seed)?,
    };
    let shape = global.shape().clone();
    // every site starts from an exact copy of the initial weights
    let initial_message = encode_weights(&global);
    let mut resident: BTreeMap<String, ParameterVector> = ids
        .iter()
        .map(|id| Ok((id.clone(), decode_weights(&initial_message, &shape)?)))
        .collect::<Result<_>>()?;
    let mut optimizers: BTreeMap<String, AdamState> = ids
        .iter()
        .map(|id| (id.clone(), AdamState::for_params(&global, config.adam)))
        .collect();

    let mut global = global;
    let mut logs = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let active = sample_active_sites(&ids, config.client_fraction, round, config.seed);
        let jobs: Vec<(&String, &ParameterVector, &AdamState, &nn::Dataset)> = active
            .iter()
            .map(|id| (id, &resident[id], &optimizers[id], &data[id]))
            .collect();
        let results = jobs
            .into_par_iter()
            .map(|(id, start, adam, dataset)| {
                let opts = LocalTraining {
                    epochs: config.local_epochs,
                    batch_size: config.batch_size,
                    seed: seeding::site_round_seed(config.seed, id, round),
                    first_epoch: 0,
                };
                nn::train_local_epochs(start, adam, spec, dataset, &opts)
                    .map_err(|e| match e {
                        Error::EmptyTrainingSet(_) => Error::EmptyTrainingSet(id.clone()),
                        other => other,
                    })
                    .map(|out| (id.clone(), out))
            })
            .collect::<Result<Vec<_>>>()?;

        // upload: weights only; Adam state is kept where it was produced
        let mut uploads = Vec::with_capacity(results.len());
        let mut local_losses = BTreeMap::new();
        for (id, out) in results {
            let received = decode_weights(&encode_weights(&out.params), &shape)?;
            let weight = match config.weighting {
                Weighting::ByTrainSize => data[&id].len() as f64,
                Weighting::Uniform => 1.0,
            };
            local_losses.insert(id.clone(), *out.epoch_losses.last().expect("epochs >= 1"));
            optimizers.insert(id.clone(), out.state);
            uploads.push((received, weight));
        }
        let refs: Vec<(&ParameterVector, f64)> = uploads.iter().map(|(p, w)| (p, *w)).collect();
        global = aggregate_weighted(&refs)?;

        let message = encode_weights(&global);
        for params in resident.values_mut() {
            *params = decode_weights(&message, &shape)?;
        }
        let report = evaluation::evaluate_sites(&global, spec, eval_sites)?;
        logs.push(RoundLog {
            round,
            active,
            local_losses,
            metrics: (&report).into(),
        });
    }
    Ok(FedAvgOutcome {
        params: global,
        logs,
        resident,
    })
}

/// Trains one model per site on that site alone.
pub fn run_siloed(
    sites: &[SiteDataset],
    spec: &ModelSpec,
    settings: &TrainSettings,
    seed: u64,
    pretrain_from: Option<&ParameterVector>,
) -> Result<BTreeMap<String, ParameterVector>> {
    if sites.is_empty() {
        return Err(Error::InvalidFederation("no sites".into()));
    }
    let start = match pretrain_from {
        Some(p) => p.clone(),
        None => nn::init_model(spec, seed)?,
    };
    let trained = sites
        .par_iter()
        .map(|site| {
            train_single(&start, spec, &site.train, &site.site_id, settings, seed).map(|p| (site.site_id.clone(), p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(trained.into_iter().collect())
}

/// Local training of one model from `start` on one example set, using
/// the round-0 stream of `stream_id`.
pub fn train_single(
    start: &ParameterVector,
    spec: &ModelSpec,
    examples: &[cohort::Example],
    stream_id: &str,
    settings: &TrainSettings,
    seed: u64,
) -> Result<ParameterVector> {
    if examples.is_empty() {
        return Err(Error::EmptyTrainingSet(stream_id.to_string()));
    }
    let data = cohort::to_dataset(examples)?;
    let opts = LocalTraining {
        epochs: settings.epochs,
        batch_size: settings.batch_size,
        seed: seeding::site_round_seed(seed, stream_id, 0),
        first_epoch: 0,
    };
    let adam = AdamState::for_params(start, settings.adam);
    Ok(nn::train_local_epochs(start, &adam, spec, &data, &opts)?.params)
}

/// Stream id of a pooled dataset: the member ids joined by `+`, so a
/// single-site pool trains exactly like that site.
pub fn pooled_stream_id(sites: &[SiteDataset]) -> String {
    sites.iter().map(|s| s.site_id.as_str()).collect::<Vec<_>>().join("+")
}

/// Centralized baseline: one model on the union of all training sets.
pub fn run_cds(sites: &[SiteDataset], spec: &ModelSpec, settings: &TrainSettings, seed: u64) -> Result<ParameterVector> {
    let pooled: Vec<cohort::Example> = sites.iter().flat_map(|s| s.train.iter().cloned()).collect();
    let start = nn::init_model(spec, seed)?;
    train_single(&start, spec, &pooled, &pooled_stream_id(sites), settings, seed)
}
