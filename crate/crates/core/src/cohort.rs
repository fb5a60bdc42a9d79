//! Synthetic multi-site cohorts and the partition transforms applied to
//! them.
//!
//! A site draws each example as
//! `anchor[label] * severity + style_offset + sex_effect + noise`,
//! where `sex_effect` is only present for male examples and may be
//! attenuated for the older age group. Every site is split once into a
//! training half (rounded up) and a holdout half; transforms never move
//! examples between the two.

use std::collections::HashSet;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dataset, Matrix};
use crate::seeding::{self, Key};

pub const NUM_CLASSES: usize = 3;
pub const NORMAL: usize = 0;
pub const PNA: usize = 1;
pub const COVID: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["normal", "pna", "covid"];

/// First age (in years) of the older subgroup.
pub const AGE_THRESHOLD: u32 = 55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::F => "F",
            Sex::M => "M",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub sex: Sex,
    pub age: u32,
    pub site_id: String,
    pub synthetic: bool,
}

impl Example {
    pub fn is_older(&self) -> bool {
        self.age >= AGE_THRESHOLD
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteProfile {
    pub site_id: String,
    pub n_patients: usize,
    /// Proportions of (normal, PNA, COVID); zeros mark missing classes.
    pub class_mix: [f64; NUM_CLASSES],
    pub style_offset: Vec<f64>,
    pub noise_scale: f64,
    pub sex_ratio_f: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    /// Added to the features of male examples. Empty means no shift.
    #[serde(default)]
    pub sex_shift: Vec<f64>,
    pub severity_scale: f64,
    /// Per class, the probability that an example falls in the positive
    /// sub-mode.
    #[serde(default = "halves")]
    pub mode_mix: [f64; NUM_CLASSES],
}

fn halves() -> [f64; NUM_CLASSES] {
    [0.5; NUM_CLASSES]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub sites: Vec<SiteProfile>,
    pub input_dim: usize,
    pub class_anchors: Vec<Vec<f64>>,
    pub global_seed: u64,
    /// Site whose data is public: pretraining and generator fitting use it.
    #[serde(default)]
    pub public_site: Option<String>,
    /// Multiplier on the sex shift for examples in the older group.
    #[serde(default = "one")]
    pub older_sex_shift_factor: f64,
    /// Relative per-example spread of the sex shift magnitude.
    #[serde(default)]
    pub sex_shift_spread: f64,
    /// Per-class sub-mode axis: examples sit at anchor ± axis. Empty means
    /// every class is unimodal.
    #[serde(default)]
    pub class_mode_axes: Vec<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCohort(m));
        if self.sites.len() < 2 {
            return bad("at least 2 sites are required".into());
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if self.class_anchors.len() != NUM_CLASSES {
            return bad(format!("expected {NUM_CLASSES} class anchors"));
        }
        if self.class_anchors.iter().any(|a| a.len() != self.input_dim) {
            return bad("class anchors must have input_dim entries".into());
        }
        if !self.class_mode_axes.is_empty()
            && (self.class_mode_axes.len() != NUM_CLASSES || self.class_mode_axes.iter().any(|a| a.len() != self.input_dim))
        {
            return bad(format!("class_mode_axes must be empty or {NUM_CLASSES} vectors of input_dim entries"));
        }
        if !(self.older_sex_shift_factor.is_finite() && self.sex_shift_spread >= 0.0) {
            return bad("sex shift modifiers must be finite and non-negative".into());
        }
        let mut seen = HashSet::new();
        for p in &self.sites {
            let ctx = |m: &str| Error::InvalidCohort(format!("site `{}`: {m}", p.site_id));
            if !seen.insert(p.site_id.as_str()) {
                return Err(ctx("duplicate site id"));
            }
            if p.site_id.is_empty() || p.site_id.contains([',', '\n', '"']) {
                return Err(ctx("site id must be non-empty and free of commas, quotes and newlines"));
            }
            if p.n_patients < 2 {
                return Err(ctx("n_patients must be at least 2"));
            }
            if p.class_mix.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
                return Err(ctx("class_mix entries must be non-negative"));
            }
            let total: f64 = p.class_mix.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(ctx("class_mix must sum to 1"));
            }
            if p.style_offset.len() != self.input_dim {
                return Err(ctx("style_offset must have input_dim entries"));
            }
            if !p.sex_shift.is_empty() && p.sex_shift.len() != self.input_dim {
                return Err(ctx("sex_shift must be empty or have input_dim entries"));
            }
            if !(p.noise_scale >= 0.0 && p.noise_scale.is_finite()) {
                return Err(ctx("noise_scale must be non-negative"));
            }
            if !(p.severity_scale > 0.0 && p.severity_scale.is_finite()) {
                return Err(ctx("severity_scale must be positive"));
            }
            if !(0.0..=1.0).contains(&p.sex_ratio_f) {
                return Err(ctx("sex_ratio_f must be in [0, 1]"));
            }
            if !(p.age_sd >= 0.0 && p.age_mean.is_finite()) {
                return Err(ctx("age_sd must be non-negative"));
            }
            if !p.mode_mix.iter().all(|m| (0.0..=1.0).contains(m)) {
                return Err(ctx("mode_mix must be in [0, 1]"));
            }
        }
        if let Some(public) = &self.public_site {
            if !seen.contains(public.as_str()) {
                return Err(Error::UnknownSite(public.clone()));
            }
        }
        Ok(())
    }
}

/// One site's examples with a frozen train/holdout split.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteDataset {
    pub site_id: String,
    pub train: Vec<Example>,
    pub holdout: Vec<Example>,
}

impl SiteDataset {
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        class_counts(&self.train)
    }

    pub fn train_dataset(&self) -> Result<Dataset> {
        to_dataset(&self.train)
    }

    pub fn holdout_dataset(&self) -> Result<Dataset> {
        to_dataset(&self.holdout)
    }
}

pub fn class_counts(examples: &[Example]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for e in examples {
        counts[e.label] += 1;
    }
    counts
}

pub fn to_dataset(examples: &[Example]) -> Result<Dataset> {
    let dim = examples.first().map_or(0, |e| e.features.len());
    let mut data = Vec::with_capacity(examples.len() * dim);
    for e in examples {
        if e.features.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: e.features.len(),
            });
        }
        data.extend_from_slice(&e.features);
    }
    Dataset::new(
        Matrix::from_vec(examples.len(), dim, data)?,
        examples.iter().map(|e| e.label).collect(),
    )
}

fn draw_label<R: Rng>(mix: &[f64; NUM_CLASSES], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &w) in mix.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // rounding slack: fall back to the last class with mass
    mix.iter().rposition(|&w| w > 0.0).unwrap_or(NUM_CLASSES - 1)
}

fn generate_site(config: &CohortConfig, profile: &SiteProfile) -> SiteDataset {
    let mut rng = seeding::derive_rng(config.global_seed, &[Key::Str("site"), Key::Str(&profile.site_id)]);
    let age_dist = Normal::new(profile.age_mean, profile.age_sd).expect("validated age_sd");
    let mut examples = Vec::with_capacity(profile.n_patients);
    for _ in 0..profile.n_patients {
        let label = draw_label(&profile.class_mix, &mut rng);
        let sex = if rng.random_bool(profile.sex_ratio_f) {
            Sex::F
        } else {
            Sex::M
        };
        let age = age_dist.sample(&mut rng).round().max(0.0) as u32;
        let spread: f64 = StandardNormal.sample(&mut rng);
        let mut sex_weight = 0.0;
        if sex == Sex::M && !profile.sex_shift.is_empty() {
            sex_weight = 1.0 + config.sex_shift_spread * spread;
            if age >= AGE_THRESHOLD {
                sex_weight *= config.older_sex_shift_factor;
            }
        }
        let mode = match config.class_mode_axes.get(label) {
            Some(axis) => (if rng.random_bool(profile.mode_mix[label]) { 1.0 } else { -1.0 }, axis.as_slice()),
            None => (0.0, &[][..]),
        };
        let anchor = &config.class_anchors[label];
        let features = (0..config.input_dim)
            .map(|j| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let shift = profile.sex_shift.get(j).map_or(0.0, |s| s * sex_weight);
                let sub = mode.1.get(j).map_or(0.0, |a| a * mode.0);
                anchor[j] * profile.severity_scale + sub + profile.style_offset[j] + shift + noise * profile.noise_scale
            })
            .collect();
        examples.push(Example {
            features,
            label,
            sex,
            age,
            site_id: profile.site_id.clone(),
            synthetic: false,
        });
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut split_rng = seeding::derive_rng(config.global_seed, &[Key::Str("split"), Key::Str(&profile.site_id)]);
    order.shuffle(&mut split_rng);
    let n_train = examples.len().div_ceil(2);
    let mut slots: Vec<Option<Example>> = examples.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("each index once");
    let train = order[..n_train].iter().map(&mut take).collect();
    let holdout = order[n_train..].iter().map(&mut take).collect();
    SiteDataset {
        site_id: profile.site_id.clone(),
        train,
        holdout,
    }
}

/// Draws every site of the cohort; bit-stable for a fixed config.
pub fn generate_cohort(config: &CohortConfig) -> Result<Vec<SiteDataset>> {
    config.validate()?;
    Ok(config.sites.iter().map(|p| generate_site(config, p)).collect())
}

/// Pools all training data and deals it back into `sites.len()`
/// near-equal partitions. Partition `i` inherits site `i`'s id and holdout.
pub fn repartition_iid(sites: &[SiteDataset], seed: u64) -> Vec<SiteDataset> {
    let mut pooled: Vec<Example> = sites.iter().flat_map(|s| s.train.iter().cloned()).collect();
    let mut rng = seeding::derive_rng(seed, &[Key::Str("iid")]);
    pooled.shuffle(&mut rng);
    let sizes = near_equal_sizes(pooled.len(), sites.len());
    let mut rest = pooled.into_iter();
    sites
        .iter()
        .zip(sizes)
        .map(|(site, size)| {
            let train = rest
                .by_ref()
                .take(size)
                .map(|mut e| {
                    e.site_id = site.site_id.clone();
                    e
                })
                .collect();
            SiteDataset {
                site_id: site.site_id.clone(),
                train,
                holdout: site.holdout.clone(),
            }
        })
        .collect()
}

/// `n` split into `k` parts whose sizes differ by at most one, larger first.
pub fn near_equal_sizes(n: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

pub fn child_site_id(parent: &str, index: usize) -> String {
    format!("{parent}-{}", index + 1)
}

/// Splits each site's training data into `k` disjoint child sites.
/// The parent holdout goes to the first child; the others get none.
pub fn split_sites_k_ways(sites: &[SiteDataset], k: usize, seed: u64) -> Result<Vec<SiteDataset>> {
    if k < 2 {
        return Err(Error::InvalidCohort("split factor must be at least 2".into()));
    }
    let mut out = Vec::with_capacity(sites.len() * k);
    for site in sites {
        if site.train.len() < k {
            return Err(Error::SiteTooSmall {
                site: site.site_id.clone(),
                size: site.train.len(),
                k,
            });
        }
        let mut train = site.train.clone();
        let mut rng = seeding::derive_rng(seed, &[Key::Str("split-k"), Key::Str(&site.site_id)]);
        train.shuffle(&mut rng);
        let mut rest = train.into_iter();
        for (j, size) in near_equal_sizes(site.train.len(), k).into_iter().enumerate() {
            let id = child_site_id(&site.site_id, j);
            let child_train = rest
                .by_ref()
                .take(size)
                .map(|mut e| {
                    e.site_id = id.clone();
                    e
                })
                .collect();
            out.push(SiteDataset {
                site_id: id,
                train: child_train,
                holdout: if j == 0 { site.holdout.clone() } else { Vec::new() },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subgroup {
    Female,
    Male,
    /// age < 55
    Younger,
    /// age >= 55
    Older,
}

impl Subgroup {
    pub fn contains(self, e: &Example) -> bool {
        match self {
            Subgroup::Female => e.sex == Sex::F,
            Subgroup::Male => e.sex == Sex::M,
            Subgroup::Younger => e.age < AGE_THRESHOLD,
            Subgroup::Older => e.age >= AGE_THRESHOLD,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subgroup::Female => "female",
            Subgroup::Male => "male",
            Subgroup::Younger => "younger",
            Subgroup::Older => "older",
        }
    }
}

/// Keeps only examples in the subgroup, in both splits. Sites left with
/// no training data are dropped.
pub fn filter_subgroup(sites: &[SiteDataset], group: Subgroup) -> Result<Vec<SiteDataset>> {
    let mut out = Vec::with_capacity(sites.len());
    for site in sites {
        let train: Vec<Example> = site.train.iter().filter(|e| group.contains(e)).cloned().collect();
        if train.is_empty() {
            warn!("site `{}` has no `{}` training data; dropped", site.site_id, group.name());
            continue;
        }
        let holdout = site.holdout.iter().filter(|e| group.contains(e)).cloned().collect();
        out.push(SiteDataset {
            site_id: site.site_id.clone(),
            train,
            holdout,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptySubgroup(group.name().into()));
    }
    Ok(out)
}

/// Knobs of the built-in heterogeneous cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaperAnalog {
    pub input_dim: usize,
    /// Norm of the class anchors.
    pub anchor_scale: f64,
    /// Typical norm of a regular site's style offset.
    pub style_scale: f64,
    /// Style norm of the outlier site, in units of `style_scale`.
    pub outlier_style_factor: f64,
    /// Norm of the male feature shift; 0 disables it.
    pub sex_shift_scale: f64,
    pub older_sex_shift_factor: f64,
    pub sex_shift_spread: f64,
    /// Share of the male shift along the normal-to-COVID axis, in [0, 1].
    pub sex_shift_alignment: f64,
    /// Norm of the per-class sub-mode axes; 0 makes classes unimodal.
    pub mode_scale: f64,
    /// How far site sub-mode mixes stray from one half, in [0, 1].
    pub mode_skew: f64,
    pub noise_scale: f64,
}

impl Default for PaperAnalog {
    fn default() -> Self {
        Self {
            input_dim: 16,
            anchor_scale: 1.75,
            style_scale: 5.0,
            outlier_style_factor: 3.0,
            sex_shift_scale: 2.0,
            older_sex_shift_factor: 0.25,
            sex_shift_spread: 0.5,
            sex_shift_alignment: 1.0,
            mode_scale: 3.0,
            mode_skew: 0.9,
            noise_scale: 1.0,
        }
    }
}

pub const PUBLIC_SITE: &str = "site01";
pub const OUTLIER_SITE: &str = "site02";

// (id, patients, [normal, pna, covid], severity, female ratio, age mean)
const PAPER_ANALOG_SITES: [(&str, usize, [f64; 3], f64, f64, f64); 16] = [
    ("site01", 2700, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1.0, 0.50, 52.0),
    ("site02", 420, [0.50, 0.35, 0.15], 1.0, 0.45, 55.0),
    ("site03", 1200, [0.15, 0.00, 0.85], 1.1, 0.51, 60.0),
    ("site04", 350, [0.55, 0.45, 0.00], 0.9, 0.42, 53.0),
    ("site05", 260, [0.00, 0.40, 0.60], 1.0, 0.45, 56.0),
    ("site06", 1510, [0.12, 0.00, 0.88], 1.2, 0.40, 54.0),
    ("site07", 180, [0.35, 0.15, 0.50], 0.9, 0.52, 51.0),
    ("site08", 640, [0.25, 0.00, 0.75], 1.0, 0.44, 57.0),
    ("site09", 95, [0.45, 0.00, 0.55], 0.8, 0.48, 50.0),
    ("site10", 300, [0.30, 0.00, 0.70], 1.3, 0.40, 58.0),
    ("site11", 900, [0.15, 0.00, 0.85], 1.1, 0.38, 57.0),
    ("site12", 140, [0.50, 0.00, 0.50], 0.9, 0.45, 55.0),
    ("site13", 220, [0.00, 0.45, 0.55], 1.2, 0.44, 49.0),
    ("site14", 51, [0.20, 0.30, 0.50], 1.6, 0.40, 59.0),
    ("site15", 75, [0.00, 0.00, 1.00], 1.0, 0.42, 62.0),
    ("site16", 480, [0.00, 0.35, 0.65], 1.0, 0.46, 48.0),
];

fn random_direction<R: Rng>(dim: usize, norm: f64, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    scaled(&v, norm)
}

fn sex_shift_direction<R: Rng>(anchors: &[Vec<f64>], norm: f64, alignment: f64, rng: &mut R) -> Vec<f64> {
    let axis: Vec<f64> = anchors[COVID].iter().zip(&anchors[NORMAL]).map(|(c, n)| c - n).collect();
    let axis = scaled(&axis, 1.0);
    let noise = random_direction(axis.len(), 1.0, rng);
    let mixed: Vec<f64> = axis
        .iter()
        .zip(&noise)
        .map(|(a, r)| alignment * a + (1.0 - alignment) * r)
        .collect();
    scaled(&mixed, norm)
}

fn scaled(v: &[f64], norm: f64) -> Vec<f64> {
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter().map(|x| x * norm / len).collect()
}

impl PaperAnalog {
    /// Every out-of-range knob, as `(field, message)` pairs.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.input_dim == 0 {
            out.push(("input_dim", "input_dim must be positive".to_string()));
        }
        let non_negative = [
            ("anchor_scale", self.anchor_scale),
            ("style_scale", self.style_scale),
            ("outlier_style_factor", self.outlier_style_factor),
            ("sex_shift_scale", self.sex_shift_scale),
            ("older_sex_shift_factor", self.older_sex_shift_factor),
            ("sex_shift_spread", self.sex_shift_spread),
            ("mode_scale", self.mode_scale),
            ("noise_scale", self.noise_scale),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                out.push((name, format!("{name} must be finite and non-negative")));
            }
        }
        for (name, v) in [("sex_shift_alignment", self.sex_shift_alignment), ("mode_skew", self.mode_skew)] {
            if !(0.0..=1.0).contains(&v) {
                out.push((name, format!("{name} must be in [0,1]")));
            }
        }
        out
    }

    /// Sixteen sites: a balanced public site of 2700 patients and fifteen
    /// others spanning 51 to 1510, with missing classes, one outlier style,
    /// two sub-modes per class mixed differently at each site, and a
    /// sex-conditional shift that fades in the older group.
    pub fn build(&self, global_seed: u64) -> CohortConfig {
        // Geometry is fixed; only the sample draws follow `global_seed`.
        let mut geo = seeding::derive_rng(0x5eed_c0de, &[Key::Str("paper-analog")]);
        let dim = self.input_dim;
        let class_anchors: Vec<Vec<f64>> = (0..NUM_CLASSES)
            .map(|_| random_direction(dim, self.anchor_scale, &mut geo))
            .collect();
        let sex_shift_dir = sex_shift_direction(&class_anchors, self.sex_shift_scale, self.sex_shift_alignment, &mut geo);
        let mode_axes: Vec<Vec<f64>> = (0..NUM_CLASSES)
            .map(|_| random_direction(dim, self.mode_scale, &mut geo))
            .collect();
        let sites = PAPER_ANALOG_SITES
            .iter()
            .map(|&(id, n, mix, severity, female, age_mean)| {
                let style_norm = if id == PUBLIC_SITE {
                    0.0
                } else if id == OUTLIER_SITE {
                    self.style_scale * self.outlier_style_factor
                } else {
                    self.style_scale * (0.5 + geo.random::<f64>())
                };
                let mode_mix = std::array::from_fn(|_| {
                    let skewed = 0.5 + self.mode_skew * (geo.random::<f64>() - 0.5);
                    if id == PUBLIC_SITE {
                        0.5
                    } else {
                        skewed
                    }
                });
                SiteProfile {
                    site_id: id.to_string(),
                    n_patients: n,
                    class_mix: mix,
                    style_offset: random_direction(dim, style_norm, &mut geo),
                    noise_scale: self.noise_scale,
                    sex_ratio_f: female,
                    age_mean,
                    age_sd: 16.0,
                    sex_shift: if self.sex_shift_scale > 0.0 {
                        sex_shift_dir.clone()
                    } else {
                        Vec::new()
                    },
                    severity_scale: severity,
                    mode_mix,
                }
            })
            .collect();
        CohortConfig {
            sites,
            input_dim: dim,
            class_anchors,
            global_seed,
            public_site: Some(PUBLIC_SITE.to_string()),
            older_sex_shift_factor: self.older_sex_shift_factor,
            sex_shift_spread: self.sex_shift_spread,
            class_mode_axes: if self.mode_scale > 0.0 { mode_axes } else { Vec::new() },
        }
    }
}
