use nalgebra::DVector;

use weightscrub::data::{default_cluster_specs, gen_clusters, make_split, ClusterSpec, Dataset, ForgetSplit, Partition, SplitRule};
use weightscrub::infobound::{
    fit_gaussian, forgetting_lagrangian, local_bound, population_kl, readout, scrub_pairs, train_pairs, Populations,
};
use weightscrub::linalgx::{gaussian_kl, Covariance, SymMatrix};
use weightscrub::models::ModelSpec;
use weightscrub::parallel::Parallelism;
use weightscrub::scrub::{variational_scrub, NoiseExponent, ScrubConfig, VariationalConfig};
use weightscrub::training::{train_retain, Init, TrainConfig};

fn two_cluster_setup() -> (ModelSpec, ForgetSplit, TrainConfig) {
    let data = gen_clusters(&default_cluster_specs(), 0).unwrap();
    let split = make_split(&data, SplitRule::CountFromClass { class: 0, count: 100 }).unwrap();
    let train = TrainConfig {
        seed: 0,
        learning_rate: 0.1,
        batch_size: 10,
        epochs: 10,
        init: Init::Uniform { scale: 1.0 },
        early_stop_epochs: None,
    };
    (ModelSpec::logistic(2, 2, 0.01).unwrap(), split, train)
}

fn three_classes() -> Dataset {
    gen_clusters(
        &[
            ClusterSpec {
                mean: vec![-3.0, 0.0],
                stddev: 0.3,
                count: 20,
                label: 0,
            },
            ClusterSpec {
                mean: vec![3.0, 0.0],
                stddev: 0.3,
                count: 20,
                label: 1,
            },
            ClusterSpec {
                mean: vec![0.0, 3.0],
                stddev: 0.3,
                count: 20,
                label: 2,
            },
        ],
        0,
    )
    .unwrap()
}

fn retrained(spec: &ModelSpec, split: &ForgetSplit, train: &TrainConfig, seeds: std::ops::Range<u64>) -> Vec<DVector<f64>> {
    seeds
        .map(|s| train_retain(spec, split, &train.with_seed(s)).unwrap().final_weights.values)
        .collect()
}

/// KL between Gaussian fits of two independent retain-trained populations.
fn noise_floor(spec: &ModelSpec, split: &ForgetSplit, train: &TrainConfig) -> f64 {
    let a = fit_gaussian(&retrained(spec, split, train, 0..100)).unwrap();
    let b = fit_gaussian(&retrained(spec, split, train, 100..200)).unwrap();
    gaussian_kl(&a, &b).unwrap()
}

#[test]
fn bound_vanishes_when_the_training_problems_coincide() {
    // a quadratic loss ignores the data, so forgetting a sample changes nothing
    let spec = ModelSpec::quadratic(
        SymMatrix::from_diagonal(&[1.0, 0.5]).unwrap(),
        DVector::from_vec(vec![1.0, -1.0]),
        0.0,
    )
    .unwrap();
    let data = three_classes();
    let split = make_split(&data, SplitRule::ExplicitIndices { indices: vec![0, 1, 2] }).unwrap();
    let train = TrainConfig {
        seed: 0,
        learning_rate: 0.1,
        batch_size: 10,
        epochs: 20,
        init: Init::Gaussian { stddev: 1.0 },
        early_stop_epochs: None,
    };
    let scrub = ScrubConfig::Newton {
        lambda: 1e-3,
        sigma_h: 1.0,
    };
    let report = local_bound(&spec, &split, &train, &scrub, &[0, 1, 2, 3], Parallelism::Auto).unwrap();
    assert!(report.per_seed_nats.iter().all(|&v| v.abs() <= 1e-12), "{:?}", report.per_seed_nats);
}

#[test]
fn reported_nats_are_nonnegative() {
    let data = three_classes();
    let split = make_split(&data, SplitRule::WholeClass { class: 2 }).unwrap();
    let spec = ModelSpec::mlp(2, vec![4], 3, 0.01).unwrap();
    let train = TrainConfig {
        seed: 0,
        learning_rate: 0.1,
        batch_size: 10,
        epochs: 5,
        init: Init::Uniform { scale: 0.5 },
        early_stop_epochs: None,
    };
    for scrub in [
        ScrubConfig::Fisher {
            lambda: 1e-4,
            sigma_h: 1.0,
            exponent: NoiseExponent::FourthRoot,
            floor: 1e-8,
        },
        ScrubConfig::Variational {
            lambda: 1e-4,
            optimizer: VariationalConfig {
                steps: 50,
                ..VariationalConfig::default()
            },
        },
    ] {
        let report = local_bound(&spec, &split, &train, &scrub, &[0, 1, 2], Parallelism::Auto).unwrap();
        assert!(report.per_seed_nats.iter().all(|&v| v >= 0.0));
        let mean = report.per_seed_nats.iter().sum::<f64>() / 3.0;
        assert!((report.mean_nats - mean).abs() <= 1e-12 * mean.max(1.0));
    }
}

#[test]
fn population_estimator_noise_floor_is_small() {
    let (spec, split, train) = two_cluster_setup();
    assert!(noise_floor(&spec, &split, &train) < 0.5);
}

#[test]
fn identity_scrub_leaves_weight_kl_unchanged() {
    let (spec, split, train) = two_cluster_setup();
    let seeds: Vec<u64> = (0..40).collect();
    let pairs = train_pairs(&spec, &split, &train, &seeds, Parallelism::Auto).unwrap();
    let scrubbed = scrub_pairs(&spec, &split, &ScrubConfig::Identity, &pairs, Parallelism::Auto).unwrap();
    let kl = population_kl(&Populations::new(&pairs, &scrubbed)).unwrap();
    assert!(kl.kl_before > 1.0);
    assert_eq!(kl.kl_before, kl.kl_after);
}

#[test]
fn seed_marginal_kl_is_below_the_local_bound() {
    let (spec, split, train) = two_cluster_setup();
    let seeds: Vec<u64> = (0..100).collect();
    let scrub = ScrubConfig::Robust {
        lambda: 1e-3,
        sigma_h: 1.0,
        t: None,
        stabilize: true,
    };
    let pairs = train_pairs(&spec, &split, &train, &seeds, Parallelism::Auto).unwrap();
    let scrubbed = scrub_pairs(&spec, &split, &scrub, &pairs, Parallelism::Auto).unwrap();
    let marginal = population_kl(&Populations::new(&pairs, &scrubbed)).unwrap().kl_after;
    let bound = weightscrub::infobound::bound_from_pairs(&spec, &scrub, &seeds, &scrubbed).unwrap();
    let floor = noise_floor(&spec, &split, &train);
    assert!(
        marginal <= bound.mean_nats + floor,
        "marginal {marginal}, bound {}, floor {floor}",
        bound.mean_nats
    );
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

#[test]
fn coarse_readout_reveals_no_more_than_the_weights() {
    let (spec, split, train) = two_cluster_setup();
    let test = gen_clusters(&default_cluster_specs(), 1).unwrap();
    let seeds: Vec<u64> = (0..100).collect();
    let scrub = ScrubConfig::Robust {
        lambda: 1e-3,
        sigma_h: 1.0,
        t: None,
        stabilize: true,
    };
    let pairs = train_pairs(&spec, &split, &train, &seeds, Parallelism::Auto).unwrap();
    let scrubbed = scrub_pairs(&spec, &split, &scrub, &pairs, Parallelism::Auto).unwrap();
    let pops = Populations::new(&pairs, &scrubbed);
    let weight_kl = population_kl(&pops).unwrap().kl_after;

    // readout: does the test error exceed the reference population's median
    let err = |w: &DVector<f64>| spec.error_rate(w, &test, &test.all_indices(), None).unwrap();
    let mut reference_err: Vec<f64> = pops.reference.iter().map(err).collect();
    reference_err.sort_by(f64::total_cmp);
    let threshold = reference_err[reference_err.len() / 2];
    // add-one smoothing keeps both distributions strictly positive
    let rate = |ws: &[DVector<f64>]| (ws.iter().filter(|w| err(w) > threshold).count() as f64 + 1.0) / (ws.len() as f64 + 2.0);
    let readout_kl = bernoulli_kl(rate(&pops.scrubbed), rate(&pops.reference));
    let floor = noise_floor(&spec, &split, &train);
    assert!(
        readout_kl <= weight_kl + floor,
        "readout {readout_kl}, weights {weight_kl}, floor {floor}"
    );
}

#[test]
fn lagrangian_first_term_matches_closed_form() {
    let b = [1.0, 2.0, 0.5];
    let spec = ModelSpec::quadratic(SymMatrix::from_diagonal(&b).unwrap(), DVector::zeros(3), 0.0).unwrap();
    let data = three_classes();
    let part = Partition::retain_all(&data);
    let w = DVector::from_vec(vec![0.3, -0.2, 0.1]);
    let result = variational_scrub(
        &spec,
        &w,
        &part,
        1e-3,
        &VariationalConfig {
            steps: 100,
            ..VariationalConfig::default()
        },
        0,
    )
    .unwrap();
    let Some(Covariance::Diagonal(var)) = &result.noise_cov else {
        panic!()
    };
    let draws = 20_000;
    let estimate = forgetting_lagrangian(&spec, &part, &result, 0.0, 0.0, draws, 7).unwrap();
    let loss = spec.loss(&w, &data).unwrap();
    let closed = loss + 0.5 * b.iter().zip(var.iter()).map(|(bi, v)| bi * v).sum::<f64>();
    // standard error of one draw of g.n + n^T B n / 2
    let g = spec.grad(&w, &data).unwrap();
    let per_draw_var: f64 = (0..3).map(|i| g[i] * g[i] * var[i] + 0.5 * b[i] * b[i] * var[i] * var[i]).sum();
    assert!((estimate - closed).abs() <= 4.0 * (per_draw_var / draws as f64).sqrt());
}

#[test]
fn noiseless_lagrangian_is_the_retain_loss() {
    let data = three_classes();
    let split = make_split(&data, SplitRule::WholeClass { class: 2 }).unwrap();
    let spec = ModelSpec::logistic(2, 3, 0.01).unwrap();
    let w = DVector::from_fn(spec.param_count(), |i, _| 0.1 * i as f64);
    let result = ScrubConfig::Identity.apply(&spec, &w, &split, 1.0, 0).unwrap();
    let retain = Partition::retain_only(&data, split.retain_indices());
    let value = forgetting_lagrangian(&spec, &retain, &result, 0.0, 5.0, 3, 0).unwrap();
    let direct = spec
        .loss_on(&w, &data, split.retain_indices(), weightscrub::models::Decay::Include)
        .unwrap();
    assert_eq!(value, direct);
}

#[test]
fn hiding_and_retraining_miss_the_whole_forgotten_class() {
    let data = three_classes();
    let split = make_split(&data, SplitRule::WholeClass { class: 2 }).unwrap();
    let spec = ModelSpec::logistic(2, 3, 0.01).unwrap();
    // near-zero init: the retrained class-2 row only ever sees downward pushes
    let train = TrainConfig {
        seed: 0,
        learning_rate: 0.1,
        batch_size: 10,
        epochs: 20,
        init: Init::Uniform { scale: 1e-3 },
        early_stop_epochs: None,
    };
    let pairs = train_pairs(&spec, &split, &train, &[0], Parallelism::Sequential).unwrap();

    let original = ScrubConfig::Identity.apply(&spec, &pairs.original[0], &split, 1.0, 0).unwrap();
    let report = readout(&spec, &original, &split, None, None).unwrap();
    assert_eq!(report.err_retain, 0.0);
    assert_eq!(report.err_forget, 0.0);

    let hidden = ScrubConfig::Hiding.apply(&spec, &pairs.original[0], &split, 1.0, 0).unwrap();
    assert_eq!(readout(&spec, &hidden, &split, None, None).unwrap().err_forget, 100.0);

    let retrained = ScrubConfig::Identity.apply(&spec, &pairs.retrained[0], &split, 1.0, 0).unwrap();
    let report = readout(&spec, &retrained, &split, Some(&data), None).unwrap();
    assert_eq!(report.err_forget, 100.0);
    let total: usize = report.entropy_histograms.forget.iter().sum();
    assert_eq!(total, split.forget_indices().len());
}
