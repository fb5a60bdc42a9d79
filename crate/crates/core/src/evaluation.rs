//! Holdout metrics: confusion matrices, per-site accuracy, AVG / WAVG /
//! macro-F1, model-by-site cross matrices, subgroup breakdowns and
//! penultimate-layer exports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::cohort::{Example, Sex, SiteDataset, Subgroup, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{self, Matrix, ModelSpec, ParameterVector};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        let mut m = Self::new(k);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), k, "confusion matrix must be square");
            m.counts[i * k..(i + 1) * k].copy_from_slice(r);
        }
        m
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.num_classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.num_classes).map(|k| self.get(k, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// F1 per class; a class absent from both truth and predictions scores 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                let tp = self.get(k, k) as f64;
                let actual: u64 = (0..self.num_classes).map(|j| self.get(k, j)).sum();
                let predicted: u64 = (0..self.num_classes).map(|i| self.get(i, k)).sum();
                let denom = (actual + predicted) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * tp / denom
                }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let f1 = self.per_class_f1();
        f1.iter().sum::<f64>() / f1.len() as f64
    }
}

/// Argmax with ties going to the lowest class index.
pub fn predict_row(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

pub fn predict(params: &ParameterVector, spec: &ModelSpec, examples: &[Example]) -> Result<Vec<usize>> {
    let data = crate::cohort::to_dataset(examples)?;
    let logits = nn::forward(params, spec, &data.features)?;
    Ok((0..logits.rows()).map(|i| predict_row(logits.row(i))).collect())
}

pub fn evaluate(params: &ParameterVector, spec: &ModelSpec, holdout: &[Example]) -> Result<(f64, ConfusionMatrix)> {
    if holdout.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    let predictions = predict(params, spec, holdout)?;
    let mut confusion = ConfusionMatrix::new(spec.num_classes);
    for (e, &p) in holdout.iter().zip(&predictions) {
        if e.label >= spec.num_classes {
            return Err(Error::LabelOutOfRange {
                label: e.label,
                num_classes: spec.num_classes,
            });
        }
        confusion.add(e.label, p);
    }
    Ok((confusion.accuracy(), confusion))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_site: BTreeMap<String, f64>,
    pub site_sizes: BTreeMap<String, usize>,
    pub avg: f64,
    pub wavg: f64,
    pub macro_f1: f64,
    pub pooled: ConfusionMatrix,
}

/// AVG, size-weighted WAVG and macro-F1 of the pooled confusion.
pub fn summarize(
    accuracies: &BTreeMap<String, f64>,
    site_sizes: &BTreeMap<String, usize>,
    confusions: &BTreeMap<String, ConfusionMatrix>,
) -> Result<MetricsReport> {
    if !accuracies.keys().eq(site_sizes.keys()) {
        return Err(Error::KeyMismatch("site sizes"));
    }
    if !accuracies.keys().eq(confusions.keys()) {
        return Err(Error::KeyMismatch("confusion matrices"));
    }
    if accuracies.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    let avg = accuracies.values().sum::<f64>() / accuracies.len() as f64;
    let total: usize = site_sizes.values().sum();
    let wavg = if total == 0 {
        avg
    } else {
        accuracies
            .iter()
            .map(|(site, acc)| site_sizes[site] as f64 * acc)
            .sum::<f64>()
            / total as f64
    };
    let k = confusions.values().next().map_or(NUM_CLASSES, |c| c.num_classes());
    let mut pooled = ConfusionMatrix::new(k);
    for c in confusions.values() {
        pooled.merge(c);
    }
    Ok(MetricsReport {
        per_site: accuracies.clone(),
        site_sizes: site_sizes.clone(),
        avg,
        wavg,
        macro_f1: pooled.macro_f1(),
        pooled,
    })
}

/// Evaluates on every site's holdout; sites without holdout data are skipped.
pub fn evaluate_sites(params: &ParameterVector, spec: &ModelSpec, sites: &[SiteDataset]) -> Result<MetricsReport> {
    let mut accuracies = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    let mut confusions = BTreeMap::new();
    for site in sites.iter().filter(|s| !s.holdout.is_empty()) {
        let (acc, confusion) = evaluate(params, spec, &site.holdout)?;
        accuracies.insert(site.site_id.clone(), acc);
        sizes.insert(site.site_id.clone(), site.holdout.len());
        confusions.insert(site.site_id.clone(), confusion);
    }
    summarize(&accuracies, &sizes, &confusions)
}

/// Holdout accuracy of each model (rows) on each site (columns).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossMatrix {
    pub model_ids: Vec<String>,
    pub site_ids: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl CrossMatrix {
    pub fn cell(&self, model: &str, site: &str) -> Option<f64> {
        let i = self.model_ids.iter().position(|m| m == model)?;
        let j = self.site_ids.iter().position(|s| s == site)?;
        Some(self.cells[i][j])
    }

    /// Holdout-size-weighted mean of each row.
    pub fn row_wavg(&self, sizes: &BTreeMap<String, usize>) -> Vec<f64> {
        let total: usize = self.site_ids.iter().map(|s| sizes[s]).sum();
        self.cells
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.site_ids)
                    .map(|(a, s)| a * sizes[s] as f64)
                    .sum::<f64>()
                    / total as f64
            })
            .collect()
    }

    pub fn column_mean(&self, site: &str) -> Option<f64> {
        let j = self.site_ids.iter().position(|s| s == site)?;
        Some(self.cells.iter().map(|r| r[j]).sum::<f64>() / self.cells.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["model_id".to_string()];
        header.extend(self.site_ids.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (id, row) in self.model_ids.iter().zip(&self.cells) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

pub fn cross_evaluate(
    models: &BTreeMap<String, ParameterVector>,
    spec: &ModelSpec,
    sites: &[SiteDataset],
) -> Result<CrossMatrix> {
    use rayon::prelude::*;
    if models.is_empty() || sites.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    let cells = models
        .par_iter()
        .map(|(_, params)| {
            sites
                .iter()
                .map(|s| evaluate(params, spec, &s.holdout).map(|(a, _)| a))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossMatrix {
        model_ids: models.keys().cloned().collect(),
        site_ids: sites.iter().map(|s| s.site_id.clone()).collect(),
        cells,
    })
}

/// Named holdout subgroup used in breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Cell {
    Sex(Sex),
    Age(bool),
    SexAge(Sex, bool),
}

impl Cell {
    pub fn all() -> Vec<Cell> {
        let mut v = vec![Cell::Sex(Sex::F), Cell::Sex(Sex::M), Cell::Age(false), Cell::Age(true)];
        for sex in [Sex::F, Sex::M] {
            for older in [false, true] {
                v.push(Cell::SexAge(sex, older));
            }
        }
        v
    }

    pub fn contains(self, e: &Example) -> bool {
        match self {
            Cell::Sex(s) => e.sex == s,
            Cell::Age(older) => e.is_older() == older,
            Cell::SexAge(s, older) => e.sex == s && e.is_older() == older,
        }
    }

    pub fn name(self) -> String {
        let age = |older: bool| if older { ">=55" } else { "<55" };
        match self {
            Cell::Sex(s) => s.as_str().to_string(),
            Cell::Age(o) => age(o).to_string(),
            Cell::SexAge(s, o) => format!("{}{}", s.as_str(), age(o)),
        }
    }
}

impl From<Subgroup> for Cell {
    fn from(g: Subgroup) -> Self {
        match g {
            Subgroup::Female => Cell::Sex(Sex::F),
            Subgroup::Male => Cell::Sex(Sex::M),
            Subgroup::Younger => Cell::Age(false),
            Subgroup::Older => Cell::Age(true),
        }
    }
}

/// Metrics restricted to each sex, age band and sex-by-age cell.
/// Cells with no holdout examples are absent.
pub fn subgroup_report(
    params: &ParameterVector,
    spec: &ModelSpec,
    holdouts: &[SiteDataset],
) -> Result<BTreeMap<Cell, MetricsReport>> {
    let mut out = BTreeMap::new();
    for cell in Cell::all() {
        let restricted: Vec<SiteDataset> = holdouts
            .iter()
            .map(|s| SiteDataset {
                site_id: s.site_id.clone(),
                train: Vec::new(),
                holdout: s.holdout.iter().filter(|e| cell.contains(e)).cloned().collect(),
            })
            .filter(|s| !s.holdout.is_empty())
            .collect();
        if restricted.is_empty() {
            continue;
        }
        out.insert(cell, evaluate_sites(params, spec, &restricted)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingRow {
    pub site_id: String,
    pub sex: Sex,
    pub age: u32,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub activations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbeddingRow>,
}

/// Last-hidden-layer activations for every example.
pub fn export_embeddings(params: &ParameterVector, spec: &ModelSpec, examples: &[Example]) -> Result<EmbeddingTable> {
    if spec.hidden_dims.is_empty() {
        return Err(Error::NoHiddenLayer);
    }
    if examples.is_empty() {
        return Ok(EmbeddingTable { rows: Vec::new() });
    }
    let data = crate::cohort::to_dataset(examples)?;
    let hidden: Matrix = nn::penultimate(params, spec, &data.features)?;
    let logits = nn::forward(params, spec, &data.features)?;
    let rows = examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let predicted = predict_row(logits.row(i));
            EmbeddingRow {
                site_id: e.site_id.clone(),
                sex: e.sex,
                age: e.age,
                label: e.label,
                predicted,
                correct: predicted == e.label,
                activations: hidden.row(i).to_vec(),
            }
        })
        .collect();
    Ok(EmbeddingTable { rows })
}

impl EmbeddingTable {
    /// Population std-dev of each activation dimension, averaged over
    /// dimensions, for the correctly classified rows of each sex-by-age
    /// cell. `None` when a cell has fewer than two such rows.
    pub fn spread_by_group(&self) -> BTreeMap<Cell, Option<f64>> {
        let mut out = BTreeMap::new();
        for cell in Cell::all() {
            let rows: Vec<&EmbeddingRow> = self
                .rows
                .iter()
                .filter(|r| r.correct && cell_contains_row(cell, r))
                .collect();
            out.insert(cell, mean_std(&rows));
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.rows.first().map_or(0, |r| r.activations.len());
        let mut header: Vec<String> = ["site_id", "sex", "age", "label", "predicted", "correct"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..dim).map(|j| format!("h{j}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.site_id.clone(),
                r.sex.as_str().to_string(),
                r.age.to_string(),
                r.label.to_string(),
                r.predicted.to_string(),
                u8::from(r.correct).to_string(),
            ];
            rec.extend(r.activations.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_spread_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group", "mean_activation_std"]).map_err(csv_err)?;
        for (cell, spread) in self.spread_by_group() {
            let value = spread.map_or_else(String::new, |v| format!("{v:.6}"));
            w.write_record([cell.name(), value]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn cell_contains_row(cell: Cell, r: &EmbeddingRow) -> bool {
    let older = r.age >= crate::cohort::AGE_THRESHOLD;
    match cell {
        Cell::Sex(s) => r.sex == s,
        Cell::Age(o) => older == o,
        Cell::SexAge(s, o) => r.sex == s && older == o,
    }
}

fn mean_std(rows: &[&EmbeddingRow]) -> Option<f64> {
    if rows.len() < 2 {
        return None;
    }
    let dim = rows[0].activations.len();
    let n = rows.len() as f64;
    let total: f64 = (0..dim)
        .map(|j| {
            let mean = rows.iter().map(|r| r.activations[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r.activations[j] - mean).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .sum();
    Some(total / dim.max(1) as f64)
}
