//! Browser demo over the default cohort. The plain functions do the
//! work and are what the native tests call; the `wasm_*` exports only
//! convert errors for JavaScript.

use serde_json::json;
use wasm_bindgen::prelude::*;

use cohortfl::cohort::{self, PaperAnalog, SiteDataset, PUBLIC_SITE};
use cohortfl::federation::{self, FederationConfig};
use cohortfl::incremental::{self, Direction, TraversalSettings};
use cohortfl::nn::{AdamConfig, ModelSpec};

const LR: f64 = 0.003;

fn sites(seed: u64, iid: bool) -> cohortfl::Result<Vec<SiteDataset>> {
    let sites = cohort::generate_cohort(&PaperAnalog::default().build(seed))?;
    Ok(if iid { cohort::repartition_iid(&sites, seed) } else { sites })
}

/// Per-site sizes, class counts and female share, as JSON.
pub fn cohort_summary(seed: u64) -> cohortfl::Result<String> {
    let rows: Vec<serde_json::Value> = sites(seed, false)?
        .iter()
        .map(|s| {
            let female = s.train.iter().filter(|e| e.sex == cohort::Sex::F).count();
            json!({
                "site_id": s.site_id,
                "train": s.train.len(),
                "holdout": s.holdout.len(),
                "class_counts": s.class_counts(),
                "female_share": female as f64 / s.train.len().max(1) as f64,
                "public": s.site_id == PUBLIC_SITE,
            })
        })
        .collect();
    Ok(serde_json::to_string(&rows)?)
}

/// WAVG after every FedAvg round.
pub fn fedavg_curve(seed: u64, rounds: usize, local_epochs: usize, client_fraction: f64, iid: bool) -> cohortfl::Result<Vec<f64>> {
    let config = FederationConfig {
        rounds,
        local_epochs,
        client_fraction,
        seed,
        adam: AdamConfig {
            lr: LR,
            ..AdamConfig::default()
        },
        ..FederationConfig::default()
    };
    let out = federation::run_fedavg(&config, &sites(seed, iid)?, &ModelSpec::default())?;
    Ok(out.logs.iter().map(|l| l.metrics.wavg).collect())
}

/// WAVG after every visit of a size-ordered incremental path; more
/// than one round makes it cyclic.
pub fn path_curve(seed: u64, ascending: bool, include_public: bool, rounds: usize, iid: bool) -> cohortfl::Result<Vec<f64>> {
    let sites = sites(seed, iid)?;
    let direction = if ascending { Direction::Ascending } else { Direction::Descending };
    let mut path = incremental::order_by_size(&sites, direction).with_rounds(rounds);
    if !include_public {
        path = path.excluding_public(PUBLIC_SITE);
    }
    let settings = TraversalSettings {
        batch_size: 32,
        adam: AdamConfig {
            lr: LR,
            ..AdamConfig::default()
        },
    };
    let out = incremental::traverse(&path, &sites, &sites, &ModelSpec::default(), &settings, seed)?;
    Ok(out.visits.iter().map(|v| v.metrics.wavg).collect())
}

fn js(e: cohortfl::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = cohortSummary)]
pub fn wasm_cohort_summary(seed: u32) -> Result<String, JsError> {
    cohort_summary(seed.into()).map_err(js)
}

#[wasm_bindgen(js_name = fedavgCurve)]
pub fn wasm_fedavg_curve(seed: u32, rounds: u32, local_epochs: u32, client_fraction: f64, iid: bool) -> Result<Vec<f64>, JsError> {
    fedavg_curve(seed.into(), rounds as usize, local_epochs as usize, client_fraction, iid).map_err(js)
}

#[wasm_bindgen(js_name = pathCurve)]
pub fn wasm_path_curve(seed: u32, ascending: bool, include_public: bool, rounds: u32, iid: bool) -> Result<Vec<f64>, JsError> {
    path_curve(seed.into(), ascending, include_public, rounds as usize, iid).map_err(js)
}
