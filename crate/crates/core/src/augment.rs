//! Class-equalizing augmentation.
//!
//! A class-conditional moment model is fit on the public site's training
//! split only. Synthesis takes a real example from the site of interest,
//! keeps its offset from its own class mean (the site "style"), moves it
//! onto the target class mean and adds a little Gaussian noise.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{class_counts, Example, SiteDataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::seeding::{self, Key};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_NOISE_VARIANCE_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    pub fitted_on: String,
    pub means: Vec<Vec<f64>>,
    /// Diagonal covariance per class, floored at [`VARIANCE_FLOOR`].
    pub variances: Vec<Vec<f64>>,
    /// Synthesis noise covariance as a fraction of the class covariance.
    pub noise_variance_scale: f64,
}

pub fn fit_generator(public_site: &SiteDataset) -> Result<GeneratorModel> {
    fit_generator_with(public_site, DEFAULT_NOISE_VARIANCE_SCALE)
}

pub fn fit_generator_with(public_site: &SiteDataset, noise_variance_scale: f64) -> Result<GeneratorModel> {
    let train = &public_site.train;
    let counts = class_counts(train);
    if let Some(k) = counts.iter().position(|&c| c < 2) {
        return Err(Error::MissingClass(k));
    }
    let dim = train[0].features.len();
    let mut means = vec![vec![0.0; dim]; NUM_CLASSES];
    for e in train {
        for (m, x) in means[e.label].iter_mut().zip(&e.features) {
            *m += x;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    let mut variances = vec![vec![0.0; dim]; NUM_CLASSES];
    for e in train {
        for ((v, x), m) in variances[e.label].iter_mut().zip(&e.features).zip(&means[e.label]) {
            *v += (x - m).powi(2);
        }
    }
    for (v, &c) in variances.iter_mut().zip(&counts) {
        v.iter_mut()
            .for_each(|s| *s = (*s / (c - 1) as f64).max(VARIANCE_FLOOR));
    }
    Ok(GeneratorModel {
        fitted_on: public_site.site_id.clone(),
        means,
        variances,
        noise_variance_scale,
    })
}

/// A synthetic example of `target_class` in the style of `style_source`.
pub fn synthesize(gen: &GeneratorModel, style_source: &Example, target_class: usize, seed: u64) -> Result<Example> {
    if target_class >= gen.means.len() {
        return Err(Error::LabelOutOfRange {
            label: target_class,
            num_classes: gen.means.len(),
        });
    }
    let source_mean = gen.means.get(style_source.label).ok_or(Error::LabelOutOfRange {
        label: style_source.label,
        num_classes: gen.means.len(),
    })?;
    let target_mean = &gen.means[target_class];
    let variances = &gen.variances[target_class];
    let mut rng = seeding::derive_rng(seed, &[Key::Str("synth")]);
    let features = style_source
        .features
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let noise = z * (gen.noise_variance_scale * variances[j]).sqrt();
            x + (target_mean[j] - source_mean[j]) + noise
        })
        .collect();
    Ok(Example {
        features,
        label: target_class,
        sex: style_source.sex,
        age: style_source.age,
        site_id: style_source.site_id.clone(),
        synthetic: true,
    })
}

/// Synthesizes `count` examples of `class`, taking style sources
/// round-robin from `sources` starting at `*cursor`.
fn synthesize_class(
    gen: &GeneratorModel,
    sources: &[Example],
    class: usize,
    count: usize,
    cursor: &mut usize,
    site_id: &str,
    seed: u64,
) -> Result<Vec<Example>> {
    (0..count)
        .map(|i| {
            let source = &sources[*cursor % sources.len()];
            *cursor += 1;
            let s = seeding::derive_seed(seed, &[Key::Str(site_id), class.into(), i.into()]);
            synthesize(gen, source, class, s)
        })
        .collect()
}

/// Raises every class to the largest class count with synthetic
/// examples. Real examples and the holdout are left as they are.
pub fn equalize_classes(site: &SiteDataset, gen: &GeneratorModel, seed: u64) -> Result<SiteDataset> {
    let real: Vec<Example> = site.train.iter().filter(|e| !e.synthetic).cloned().collect();
    if real.is_empty() {
        return Err(Error::EmptyTrainingSet(site.site_id.clone()));
    }
    let counts = class_counts(&site.train);
    let target = *counts.iter().max().expect("classes");
    let mut train = site.train.clone();
    let mut cursor = 0;
    for (class, &have) in counts.iter().enumerate() {
        if have < target {
            train.extend(synthesize_class(gen, &real, class, target - have, &mut cursor, &site.site_id, seed)?);
        }
    }
    Ok(SiteDataset {
        site_id: site.site_id.clone(),
        train,
        holdout: site.holdout.clone(),
    })
}

/// Replaces the training set with synthetic examples only: the largest
/// real class count of every class, styled after the site's real data.
pub fn synthetic_only(site: &SiteDataset, gen: &GeneratorModel, seed: u64) -> Result<SiteDataset> {
    if site.train.is_empty() {
        return Err(Error::EmptyTrainingSet(site.site_id.clone()));
    }
    let target = *class_counts(&site.train).iter().max().expect("classes");
    let mut train = Vec::with_capacity(target * NUM_CLASSES);
    let mut cursor = 0;
    for class in 0..NUM_CLASSES {
        train.extend(synthesize_class(gen, &site.train, class, target, &mut cursor, &site.site_id, seed)?);
    }
    Ok(SiteDataset {
        site_id: site.site_id.clone(),
        train,
        holdout: site.holdout.clone(),
    })
}
