use cohortfl::cohort::{generate_cohort, PaperAnalog, SiteDataset, OUTLIER_SITE, PUBLIC_SITE};
use cohortfl::evaluation::cross_evaluate;
use cohortfl::federation::{self, FederationConfig, TrainSettings, Weighting};
use cohortfl::incremental::{self, order_by_size, Direction, PathSchedule, TraversalSettings};
use cohortfl::nn::{self, AdamConfig, ModelSpec};

fn default_cohort(seed: u64) -> Vec<SiteDataset> {
    generate_cohort(&PaperAnalog::default().build(seed)).unwrap()
}

fn site(sites: &[SiteDataset], id: &str) -> SiteDataset {
    sites.iter().find(|s| s.site_id == id).unwrap().clone()
}

fn bits(p: &nn::ParameterVector) -> Vec<u64> {
    p.values().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn identical_sites_federate_to_the_siloed_model() {
    // full batches, so the per-site shuffle streams cannot matter
    let sites = default_cohort(1);
    let a = site(&sites, "site07");
    let mut b = a.clone();
    b.site_id = "twin".into();
    let spec = ModelSpec::default();
    let adam = AdamConfig::default();
    let config = FederationConfig {
        rounds: 5,
        local_epochs: 1,
        client_fraction: 1.0,
        batch_size: 10_000,
        seed: 1,
        weighting: Weighting::ByTrainSize,
        adam,
    };
    let fed = federation::run_fedavg(&config, &[a.clone(), b], &spec).unwrap();
    let settings = TrainSettings {
        epochs: 5,
        batch_size: 10_000,
        adam,
    };
    let silo = federation::run_siloed(&[a], &spec, &settings, 1, None).unwrap();
    for (x, y) in fed.params.values().iter().zip(silo["site07"].values()) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}

#[test]
fn identical_sites_give_identical_siloed_models() {
    let sites = default_cohort(2);
    let a = site(&sites, "site09");
    let mut b = a.clone();
    b.site_id = "twin".into();
    let settings = TrainSettings {
        epochs: 3,
        batch_size: 10_000,
        adam: AdamConfig::default(),
    };
    let models = federation::run_siloed(&[a, b], &ModelSpec::default(), &settings, 2, None).unwrap();
    for (x, y) in models["site09"].values().iter().zip(models["twin"].values()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn pooling_one_site_is_siloed_training() {
    let sites = vec![site(&default_cohort(0), "site12")];
    let spec = ModelSpec::default();
    let settings = TrainSettings {
        epochs: 4,
        ..TrainSettings::default()
    };
    let cds = federation::run_cds(&sites, &spec, &settings, 9).unwrap();
    let silo = federation::run_siloed(&sites, &spec, &settings, 9, None).unwrap();
    assert_eq!(bits(&cds), bits(&silo["site12"]));
}

#[test]
fn fine_tuning_a_converged_model_does_not_raise_its_loss() {
    let s = site(&default_cohort(0), "site04");
    let spec = ModelSpec::default();
    let adam = AdamConfig {
        lr: 0.003,
        ..AdamConfig::default()
    };
    let long = TrainSettings {
        epochs: 300,
        batch_size: 32,
        adam,
    };
    let converged = federation::run_siloed(std::slice::from_ref(&s), &spec, &long, 0, None).unwrap();
    let converged = &converged["site04"];
    let data = s.train_dataset().unwrap();
    let before = nn::mean_loss(converged, &spec, &data).unwrap();
    let one = TrainSettings { epochs: 1, ..long };
    let tuned = federation::run_siloed(std::slice::from_ref(&s), &spec, &one, 5, Some(converged)).unwrap();
    let after = nn::mean_loss(&tuned["site04"], &spec, &data).unwrap();
    assert!(after <= before + 1e-3, "{before} -> {after}");
}

#[test]
fn siloed_models_do_worst_on_the_outlier_site() {
    let sites = default_cohort(0);
    let spec = ModelSpec::default();
    let settings = TrainSettings {
        epochs: 30,
        batch_size: 32,
        adam: AdamConfig {
            lr: 0.003,
            ..AdamConfig::default()
        },
    };
    let train: Vec<SiteDataset> = sites.iter().filter(|s| s.site_id != PUBLIC_SITE).cloned().collect();
    let models = federation::run_siloed(&train, &spec, &settings, 0, None).unwrap();
    let matrix = cross_evaluate(&models, &spec, &sites).unwrap();
    let outlier = matrix.column_mean(OUTLIER_SITE).unwrap();
    for id in &matrix.site_ids {
        if id != OUTLIER_SITE {
            assert!(matrix.column_mean(id).unwrap() > outlier, "{id} scored below the outlier");
        }
    }
}

#[test]
fn single_site_path_is_one_siloed_epoch() {
    let sites = vec![site(&default_cohort(0), "site10")];
    let spec = ModelSpec::default();
    let path = order_by_size(&sites, Direction::Ascending);
    let walked = incremental::run_iil(&path, &sites, &spec, &TraversalSettings::default(), 4).unwrap();
    let settings = TrainSettings {
        epochs: 1,
        ..TrainSettings::default()
    };
    let silo = federation::run_siloed(&sites, &spec, &settings, 4, None).unwrap();
    assert_eq!(bits(&walked.params), bits(&silo["site10"]));
}

#[test]
fn one_round_cycle_equals_a_single_pass() {
    let sites = default_cohort(3);
    let spec = ModelSpec::default();
    let settings = TraversalSettings::default();
    let path = order_by_size(&sites, Direction::Descending);
    let iil = incremental::run_iil(&path, &sites, &spec, &settings, 3).unwrap();
    let ciil = incremental::run_ciil(&path, &sites, &spec, &settings, 3).unwrap();
    assert_eq!(bits(&iil.params), bits(&ciil.params));
    assert_eq!(iil.visits, ciil.visits);
    assert_eq!(iil.visits.len(), sites.len());

    let three = incremental::run_ciil(&path.with_rounds(3), &sites, &spec, &settings, 3).unwrap();
    assert_eq!(three.visits.len(), 3 * sites.len());
    assert_eq!(three.visits[sites.len()].round, 1);
}

#[test]
fn size_order_of_three_sites() {
    let mk = |id: &str, n: usize| {
        let proto = site(&default_cohort(0), "site06");
        SiteDataset {
            site_id: id.into(),
            train: proto.train[..n].to_vec(),
            holdout: Vec::new(),
        }
    };
    let sites = [mk("A", 51), mk("B", 700), mk("C", 300)];
    let asc = order_by_size(&sites, Direction::Ascending);
    assert_eq!(asc.site_ids, ["A", "C", "B"]);
    let mut desc = order_by_size(&sites, Direction::Descending).site_ids;
    desc.reverse();
    assert_eq!(desc, asc.site_ids);
}

#[test]
fn explicit_path_must_name_known_sites() {
    let sites = default_cohort(0);
    let path = PathSchedule {
        site_ids: vec!["site03".into(), "site99".into()],
        rounds: 1,
        include_public: true,
    };
    let err = incremental::run_iil(&path, &sites, &ModelSpec::default(), &TraversalSettings::default(), 0);
    assert!(matches!(err, Err(cohortfl::Error::UnknownSite(id)) if id == "site99"));
}

#[test]
fn federation_reruns_are_bit_identical() {
    let sites = default_cohort(5);
    let config = FederationConfig {
        rounds: 4,
        client_fraction: 0.5,
        seed: 5,
        ..FederationConfig::default()
    };
    let a = federation::run_fedavg(&config, &sites, &ModelSpec::default()).unwrap();
    let b = federation::run_fedavg(&config, &sites, &ModelSpec::default()).unwrap();
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.logs.iter().map(|l| l.active.len()).collect::<Vec<_>>(), [8; 4]);
}
