//! Runs experiment configs and writes their artifacts.
//!
//! Layout under the experiment's output directory:
//!
//! ```text
//! seed-<s>/report.csv            model_id, one column per holdout site, avg, wavg, macro_f1
//! seed-<s>/log.jsonl             round or visit logs (federated and path strategies)
//! seed-<s>/cross_matrix.csv      siloed strategies only
//! seed-<s>/subgroups.csv         when outputs.subgroups is set
//! seed-<s>/embeddings.csv        when outputs.embeddings is set, with embedding_spread.csv
//! seed-<s>/models/<id>.json      final weights
//! seed-<s>/manifest.json
//! summary.txt                    mean and sample std over seeds, read back from the reports
//! ```
//!
//! Everything except the manifests (which record wall-clock time) is a
//! pure function of the config and seed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, GeneratorModel};
use crate::cohort::{self, SiteDataset};
use crate::config::{CohortSource, ExperimentConfig, Strategy, Suite, Transform};
use crate::error::{Error, Result};
use crate::evaluation::{self, csv_err, CrossMatrix, MetricsReport};
use crate::federation::{self, FedAvgOptions, TrainSettings};
use crate::incremental::{self, Direction, PathSchedule, TraversalSettings};
use crate::io;
use crate::nn::{self, ModelSpec, ParameterVector};
use crate::seeding::{self, Key};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's `output_dir`.
    pub out_dir: Option<PathBuf>,
    /// Overrides the config's seeds.
    pub seeds: Option<Vec<u64>>,
    /// Seeds run concurrently; 0 uses every core.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub models: Vec<String>,
    pub logs: Vec<String>,
    pub reports: Vec<String>,
}

/// Record of one seed's run; artifact paths are relative to the
/// experiment's output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub strategy: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Artifacts,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub wavg: f64,
    pub avg: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub model_id: String,
    pub metrics: Metrics,
}

/// Cross-seed statistics. For strategies with several models per seed
/// the row with the highest WAVG represents that seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub strategy: String,
    pub rows: Vec<SeedRow>,
    pub mean: Metrics,
    /// Sample standard deviation; 0 for a single seed.
    pub std: Metrics,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub manifests: Vec<RunManifest>,
    pub summary: Summary,
}

pub fn default_out_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(&config.name))
}

fn check(config: &ExperimentConfig) -> Result<()> {
    let problems = config.problems();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(crate::config::ConfigErrors(problems).into())
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentOutcome> {
    let mut config = config.clone();
    if let Some(seeds) = &options.seeds {
        config.seeds = seeds.clone();
    }
    check(&config)?;
    let out_dir = options.out_dir.clone().unwrap_or_else(|| default_out_dir(&config));
    fs::create_dir_all(&out_dir)?;
    info!("experiment `{}` ({}) -> {}", config.name, config.strategy, out_dir.display());
    let manifests = with_pool(options.jobs, || {
        config
            .seeds
            .par_iter()
            .map(|&seed| run_seed(&config, seed, &out_dir))
            .collect::<Result<Vec<_>>>()
    })??;
    let summary = summarize_from_disk(&config, &out_dir)?;
    fs::write(out_dir.join("summary.txt"), summary_text(&summary))?;
    Ok(ExperimentOutcome {
        out_dir,
        manifests,
        summary,
    })
}

/// Runs every experiment of a suite into `<out>/<experiment name>` and
/// writes a comparison table of their summaries.
pub fn run_suite(suite: &Suite, out_dir: &Path, options: &RunOptions) -> Result<Vec<ExperimentOutcome>> {
    let problems = suite.problems();
    if !problems.is_empty() {
        return Err(crate::config::ConfigErrors(problems).into());
    }
    fs::create_dir_all(out_dir)?;
    let mut outcomes = Vec::with_capacity(suite.experiments.len());
    for e in &suite.experiments {
        let opts = RunOptions {
            out_dir: Some(out_dir.join(&e.name)),
            ..options.clone()
        };
        outcomes.push(run_experiment(e, &opts)?);
    }
    let summaries: Vec<&Summary> = outcomes.iter().map(|o| &o.summary).collect();
    write_comparison(&summaries, File::create(out_dir.join("comparison.csv"))?)?;
    fs::write(out_dir.join("comparison.txt"), comparison_text(&suite.description, &summaries))?;
    Ok(outcomes)
}

/// Cohort for one seed and the id of its public site, if any.
pub fn load_cohort(source: &CohortSource, seed: u64) -> Result<(Vec<SiteDataset>, Option<String>)> {
    let sites = match source {
        CohortSource::PaperAnalog(p) => cohort::generate_cohort(&p.build(seed))?,
        CohortSource::Explicit(c) => {
            let mut c = c.clone();
            c.global_seed = seed;
            cohort::generate_cohort(&c)?
        }
        CohortSource::File { path, .. } => {
            let file = File::open(path)
                .map_err(|e| Error::Config(format!("cannot open cohort file {}: {e}", path.display())))?;
            io::read_cohort(std::io::BufReader::new(file))?
        }
    };
    let public = source.public_site();
    if let Some(p) = &public {
        if !sites.iter().any(|s| &s.site_id == p) {
            return Err(Error::UnknownSite(p.clone()));
        }
    }
    Ok((sites, public))
}

/// Whether `id` is the public site or one of its split children.
fn is_public(id: &str, public: Option<&str>) -> bool {
    match public {
        Some(p) => id == p || id.strip_prefix(p).and_then(|r| r.strip_prefix('-')).is_some_and(|r| r.parse::<usize>().is_ok()),
        None => false,
    }
}

struct Prepared {
    train: Vec<SiteDataset>,
    eval: Vec<SiteDataset>,
    public: Option<String>,
    generator: Option<GeneratorModel>,
}

fn generator_for(raw: &[SiteDataset], public: Option<&str>) -> Result<GeneratorModel> {
    let id = public.ok_or_else(|| Error::Config("a public site is required to fit the generator".into()))?;
    let site = raw.iter().find(|s| s.site_id == id).ok_or_else(|| Error::UnknownSite(id.into()))?;
    augment::fit_generator(site)
}

fn apply_transforms(
    mut sites: Vec<SiteDataset>,
    transforms: &[Transform],
    generator: Option<&GeneratorModel>,
    seed: u64,
    keep_all_subgroups: bool,
) -> Result<Vec<SiteDataset>> {
    // each transform keys its own streams off the run seed
    for t in transforms {
        sites = match t {
            Transform::RepartitionIid => cohort::repartition_iid(&sites, seed),
            Transform::SplitKWays { k } => cohort::split_sites_k_ways(&sites, *k, seed)?,
            Transform::FilterSubgroup { .. } if keep_all_subgroups => sites,
            Transform::FilterSubgroup { group } => cohort::filter_subgroup(&sites, *group)?,
            Transform::EqualizeClasses => {
                let generator = generator.expect("generator fitted when equalizing");
                sites
                    .iter()
                    .map(|site| augment::equalize_classes(site, generator, seed))
                    .collect::<Result<_>>()?
            }
        };
    }
    Ok(sites)
}

/// Cohort after transforms, plus the holdouts reports are computed on.
/// Subgroup filters restrict training only, so the evaluation sites are
/// the same pipeline with those filters skipped.
fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let (raw, public) = load_cohort(&config.cohort, seed)?;
    let needs_generator = config.strategy.needs_public_site() && config.strategy != Strategy::SiloedPretrained
        || config.transforms.iter().any(|t| matches!(t, Transform::EqualizeClasses));
    let generator = if needs_generator {
        Some(generator_for(&raw, public.as_deref())?)
    } else {
        None
    };
    let train = apply_transforms(raw.clone(), &config.transforms, generator.as_ref(), seed, false)?;
    let filters = config.transforms.iter().any(|t| matches!(t, Transform::FilterSubgroup { .. }));
    let eval = if filters {
        apply_transforms(raw, &config.transforms, generator.as_ref(), seed, true)?
    } else {
        train.clone()
    };
    let eval = eval.into_iter().filter(|s| !s.holdout.is_empty()).collect();
    Ok(Prepared {
        train,
        eval,
        public,
        generator,
    })
}

/// Prepared training and evaluation sites of one seed, as the runner sees them.
pub fn prepared_sites(config: &ExperimentConfig, seed: u64) -> Result<(Vec<SiteDataset>, Vec<SiteDataset>)> {
    let p = prepare(config, seed)?;
    Ok((p.train, p.eval))
}

struct Trained {
    models: BTreeMap<String, ParameterVector>,
    log: Vec<serde_json::Value>,
    cross: bool,
}

fn train_settings(config: &ExperimentConfig) -> TrainSettings {
    let t = config.training();
    TrainSettings {
        epochs: t.epochs(),
        batch_size: t.batch_size,
        adam: t.adam,
    }
}

fn to_values<T: Serialize>(items: &[T]) -> Result<Vec<serde_json::Value>> {
    items.iter().map(|i| Ok(serde_json::to_value(i)?)).collect()
}

fn fedavg(config: &ExperimentConfig, sites: &[SiteDataset], eval: &[SiteDataset], seed: u64) -> Result<Trained> {
    let mut fed = config.federation();
    fed.seed = seed;
    let options = FedAvgOptions {
        initial: None,
        eval_sites: Some(eval),
    };
    let out = federation::run_fedavg_with(&fed, sites, &config.model, &options)?;
    Ok(Trained {
        models: BTreeMap::from([(config.strategy.name().to_string(), out.params)]),
        log: to_values(&out.logs)?,
        cross: false,
    })
}

fn dispatch(config: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<Trained> {
    let spec = &config.model;
    let public = prepared.public.as_deref();
    let sites = &prepared.train;
    let single = |params: ParameterVector| Trained {
        models: BTreeMap::from([(config.strategy.name().to_string(), params)]),
        log: Vec::new(),
        cross: false,
    };
    match config.strategy {
        Strategy::Siloed | Strategy::SiloedPretrained => {
            let settings = train_settings(config);
            let include_public = config.training().include_public;
            let members: Vec<SiteDataset> = sites
                .iter()
                .filter(|s| include_public || !is_public(&s.site_id, public))
                .cloned()
                .collect();
            let pretrained = if config.strategy == Strategy::SiloedPretrained {
                let id = public.expect("validated");
                let site = sites
                    .iter()
                    .find(|s| s.site_id == id)
                    .ok_or_else(|| Error::Config(format!("public site `{id}` is not present after the transforms")))?;
                let pre = TrainSettings {
                    epochs: config.training().pretrain_epochs(),
                    ..settings
                };
                let start = nn::init_model(spec, seed)?;
                Some(federation::train_single(&start, spec, &site.train, "pretrain", &pre, seed)?)
            } else {
                None
            };
            let models = federation::run_siloed(&members, spec, &settings, seed, pretrained.as_ref())?;
            Ok(Trained {
                models,
                log: Vec::new(),
                cross: true,
            })
        }
        Strategy::Cds => Ok(single(federation::run_cds(sites, spec, &train_settings(config), seed)?)),
        Strategy::Fedavg => fedavg(config, sites, &prepared.eval, seed),
        Strategy::FedavgSynthOnly | Strategy::FedavgRealPlusSynth => {
            let generator = prepared.generator.as_ref().expect("fitted for synthetic strategies");
            let s = seeding::derive_seed(seed, &[Key::Str("synthetic")]);
            let augmented = sites
                .iter()
                .map(|site| {
                    if is_public(&site.site_id, public) {
                        Ok(site.clone())
                    } else if config.strategy == Strategy::FedavgSynthOnly {
                        augment::synthetic_only(site, generator, s)
                    } else {
                        augment::equalize_classes(site, generator, s)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            fedavg(config, &augmented, &prepared.eval, seed)
        }
        Strategy::Iil | Strategy::Ciil => {
            let params = config.path();
            let mut path = match &params.site_ids {
                Some(ids) => PathSchedule {
                    site_ids: ids.clone(),
                    rounds: 1,
                    include_public: true,
                },
                None => incremental::order_by_size(sites, params.order.unwrap_or(Direction::Ascending)),
            };
            path.rounds = config.path_rounds();
            if !params.include_public {
                path.site_ids.retain(|id| !is_public(id, public));
                path.include_public = false;
            }
            let t = config.training();
            let settings = TraversalSettings {
                batch_size: t.batch_size,
                adam: t.adam,
            };
            let out = incremental::traverse(&path, sites, &prepared.eval, spec, &settings, seed)?;
            Ok(Trained {
                models: BTreeMap::from([(config.strategy.name().to_string(), out.params)]),
                log: to_values(&out.visits)?,
                cross: false,
            })
        }
    }
}

#[derive(Serialize)]
struct SavedModel<'a> {
    spec: &'a ModelSpec,
    values: &'a [f64],
}

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn write_report<W: Write>(reports: &BTreeMap<String, MetricsReport>, site_ids: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model_id".to_string()];
    header.extend(site_ids.iter().cloned());
    header.extend(["avg", "wavg", "macro_f1"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;
    for (id, r) in reports {
        let mut rec = vec![id.clone()];
        rec.extend(site_ids.iter().map(|s| fmt6(r.per_site[s])));
        rec.extend([r.avg, r.wavg, r.macro_f1].map(fmt6));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_subgroups<W: Write>(cells: &BTreeMap<evaluation::Cell, MetricsReport>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "n_holdout", "avg", "wavg", "macro_f1"]).map_err(csv_err)?;
    for (cell, r) in cells {
        let n: usize = r.site_sizes.values().sum();
        w.write_record([cell.name(), n.to_string(), fmt6(r.avg), fmt6(r.wavg), fmt6(r.macro_f1)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Model with the highest WAVG; ties go to the smaller id.
fn best_model(reports: &BTreeMap<String, MetricsReport>) -> &str {
    let mut best: Option<(&str, f64)> = None;
    for (id, r) in reports {
        if best.is_none_or(|(_, w)| r.wavg > w) {
            best = Some((id, r.wavg));
        }
    }
    best.expect("at least one model").0
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run_seed(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let rel = PathBuf::from(format!("seed-{seed}"));
    let dir = out_dir.join(&rel);
    fs::create_dir_all(dir.join("models"))?;
    let name = |file: &str| rel.join(file).to_string_lossy().replace('\\', "/");
    let mut artifacts = Artifacts {
        models: Vec::new(),
        logs: Vec::new(),
        reports: Vec::new(),
    };

    let prepared = prepare(config, seed)?;
    let trained = dispatch(config, &prepared, seed)?;
    let spec = &config.model;
    let reports = trained
        .models
        .par_iter()
        .map(|(id, params)| Ok((id.clone(), evaluation::evaluate_sites(params, spec, &prepared.eval)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let site_ids: Vec<String> = prepared.eval.iter().map(|s| s.site_id.clone()).collect();

    write_report(&reports, &site_ids, create(&dir.join("report.csv"))?)?;
    artifacts.reports.push(name("report.csv"));
    if trained.cross {
        let cross = CrossMatrix {
            model_ids: reports.keys().cloned().collect(),
            site_ids: site_ids.clone(),
            cells: reports.values().map(|r| site_ids.iter().map(|s| r.per_site[s]).collect()).collect(),
        };
        cross.write_csv(create(&dir.join("cross_matrix.csv"))?)?;
        artifacts.reports.push(name("cross_matrix.csv"));
    }
    if !trained.log.is_empty() {
        io::write_jsonl(&trained.log, create(&dir.join("log.jsonl"))?)?;
        artifacts.logs.push(name("log.jsonl"));
    }
    let best = best_model(&reports);
    let best_params = &trained.models[best];
    if config.outputs.subgroups {
        let cells = evaluation::subgroup_report(best_params, spec, &prepared.eval)?;
        write_subgroups(&cells, create(&dir.join("subgroups.csv"))?)?;
        artifacts.reports.push(name("subgroups.csv"));
    }
    if config.outputs.embeddings {
        let holdout: Vec<cohort::Example> = prepared.eval.iter().flat_map(|s| s.holdout.iter().cloned()).collect();
        let table = evaluation::export_embeddings(best_params, spec, &holdout)?;
        table.write_csv(create(&dir.join("embeddings.csv"))?)?;
        table.write_spread_csv(create(&dir.join("embedding_spread.csv"))?)?;
        artifacts.reports.push(name("embeddings.csv"));
        artifacts.reports.push(name("embedding_spread.csv"));
    }
    for (id, params) in &trained.models {
        let file = format!("models/{id}.json");
        let saved = SavedModel {
            spec,
            values: params.values(),
        };
        let mut w = create(&dir.join(&file))?;
        serde_json::to_writer(&mut w, &saved)?;
        w.flush()?;
        artifacts.models.push(name(&file));
    }

    let manifest = RunManifest {
        experiment: config.name.clone(),
        strategy: config.strategy.name().into(),
        config_hash: config.hash(),
        seed,
        artifacts,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    let mut w = create(&dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    info!("seed {seed}: best {best} wavg {:.4} in {:.1}s", reports[best].wavg, manifest.duration_secs);
    Ok(manifest)
}

/// Reads `seed-<s>/report.csv` back and returns the best row by WAVG.
pub fn read_report_best(path: &Path) -> Result<(String, Metrics)> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("{}: missing column `{name}`", path.display()),
            })
    };
    let (ia, iw, if1) = (col("avg")?, col("wavg")?, col("macro_f1")?);
    let mut best: Option<(String, Metrics)> = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |j: usize| {
            rec[j].parse::<f64>().map_err(|_| Error::Parse {
                line: i + 2,
                message: format!("{}: `{}` is not a number", path.display(), &rec[j]),
            })
        };
        let m = Metrics {
            wavg: num(iw)?,
            avg: num(ia)?,
            macro_f1: num(if1)?,
        };
        if best.as_ref().is_none_or(|(_, b)| m.wavg > b.wavg) {
            best = Some((rec[0].to_string(), m));
        }
    }
    best.ok_or_else(|| Error::Parse {
        line: 2,
        message: format!("{}: no rows", path.display()),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize_from_disk(config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    let rows = config
        .seeds
        .iter()
        .map(|&seed| {
            let (model_id, metrics) = read_report_best(&out_dir.join(format!("seed-{seed}")).join("report.csv"))?;
            Ok(SeedRow { seed, model_id, metrics })
        })
        .collect::<Result<Vec<_>>>()?;
    let stat = |f: fn(&Metrics) -> f64| mean_std(&rows.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    let (w, a, f) = (stat(|m| m.wavg), stat(|m| m.avg), stat(|m| m.macro_f1));
    Ok(Summary {
        experiment: config.name.clone(),
        strategy: config.strategy.name().into(),
        mean: Metrics {
            wavg: w.0,
            avg: a.0,
            macro_f1: f.0,
        },
        std: Metrics {
            wavg: w.1,
            avg: a.1,
            macro_f1: f.1,
        },
        rows,
    })
}

pub fn summary_text(s: &Summary) -> String {
    let mut out = String::new();
    out += &format!("experiment  {}\nstrategy    {}\nseeds       {}\n\n", s.experiment, s.strategy, s.rows.len());
    out += &format!("{:<8} {:>10} {:>10}\n", "metric", "mean", "std");
    for (name, m, sd) in [
        ("WAVG", s.mean.wavg, s.std.wavg),
        ("AVG", s.mean.avg, s.std.avg),
        ("AVG F1", s.mean.macro_f1, s.std.macro_f1),
    ] {
        out += &format!("{name:<8} {m:>10.4} {sd:>10.4}\n");
    }
    out += &format!("\n{:<6} {:<24} {:>8} {:>8} {:>8}\n", "seed", "model", "WAVG", "AVG", "AVG F1");
    for r in &s.rows {
        out += &format!(
            "{:<6} {:<24} {:>8.4} {:>8.4} {:>8.4}\n",
            r.seed, r.model_id, r.metrics.wavg, r.metrics.avg, r.metrics.macro_f1
        );
    }
    out
}

fn write_comparison<W: Write>(summaries: &[&Summary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "experiment", "strategy", "seeds", "wavg_mean", "wavg_std", "avg_mean", "avg_std", "f1_mean", "f1_std",
    ])
    .map_err(csv_err)?;
    for s in summaries {
        w.write_record([
            s.experiment.clone(),
            s.strategy.clone(),
            s.rows.len().to_string(),
            fmt6(s.mean.wavg),
            fmt6(s.std.wavg),
            fmt6(s.mean.avg),
            fmt6(s.std.avg),
            fmt6(s.mean.macro_f1),
            fmt6(s.std.macro_f1),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn comparison_text(description: &str, summaries: &[&Summary]) -> String {
    let mut out = String::new();
    if !description.is_empty() {
        out += description.trim();
        out += "\n\n";
    }
    out += &format!("{:<28} {:>17} {:>17} {:>17}\n", "experiment", "WAVG", "AVG", "AVG F1");
    for s in summaries {
        let cell = |m: f64, sd: f64| format!("{m:.4} ± {sd:.4}");
        out += &format!(
            "{:<28} {:>17} {:>17} {:>17}\n",
            s.experiment,
            cell(s.mean.wavg, s.std.wavg),
            cell(s.mean.avg, s.std.avg),
            cell(s.mean.macro_f1, s.std.macro_f1)
        );
    }
    out
}
