use std::sync::OnceLock;

use proptest::prelude::*;

use irc_core::inference::{fisher_information, mle_fit, Likelihood, MleOptions, ObservedDataset};
use irc_core::learner::{load_model, rollout, save_model, train_discrete_q, EnsemblePolicy, FqiHyper, Trajectory, TrainingHyper};
use irc_core::params::{ParamPoint, ParamSpace};
use irc_core::rng::{derive_seed, rng_from_seed};
use irc_core::task::TaskConfig;

fn hyper() -> FqiHyper {
    FqiHyper { n_phi: 64, n_psi: 16, rounds: 2, thetas_per_round: 8, fqi_iters: 8, seed: 5, ..FqiHyper::default() }
}

fn policy() -> &'static EnsemblePolicy {
    static P: OnceLock<EnsemblePolicy> = OnceLock::new();
    P.get_or_init(|| {
        let (q, _) = train_discrete_q(&ParamSpace::firefly_1d(), &TaskConfig::firefly_1d(), &hyper()).unwrap();
        EnsemblePolicy::Discrete(q)
    })
}

fn truth() -> ParamPoint {
    ParamPoint(vec![1.2, 0.2])
}

fn dataset() -> &'static ObservedDataset {
    static D: OnceLock<ObservedDataset> = OnceLock::new();
    D.get_or_init(|| {
        let p = policy();
        let cfg = TaskConfig::firefly_1d();
        let trajs: Vec<Trajectory> = (0..60)
            .map(|i| {
                let s = derive_seed(17, i);
                rollout(p, &truth(), p.space(), &cfg, &mut rng_from_seed(s), s, false).unwrap().0
            })
            .collect();
        ObservedDataset::from_trajectories(&cfg, &trajs).unwrap()
    })
}

#[test]
fn likelihood_is_additive_over_trajectories() {
    let data = dataset();
    let n = data.trajectories.len();
    let halves = [data.subset(0..n / 2), data.subset(n / 2..n)];
    let u = policy().space().to_coords(&truth());
    let whole = Likelihood::new(policy(), data).unwrap();
    let parts: Vec<Likelihood> = halves.iter().map(|d| Likelihood::new(policy(), d).unwrap()).collect();

    let v: f64 = parts.iter().map(|l| l.value(&u).unwrap()).sum();
    assert!((whole.value(&u).unwrap() - v).abs() < 1e-9 * v.abs());

    let f = fisher_information(&whole, &u).unwrap().matrix;
    let g = fisher_information(&parts[0], &u).unwrap().matrix + fisher_information(&parts[1], &u).unwrap().matrix;
    assert!((&f - &g).norm() < 1e-6 * f.norm(), "{f} vs {g}");
}

#[test]
fn ascent_from_the_truth_never_loses_likelihood() {
    let lik = Likelihood::new(policy(), dataset()).unwrap();
    let at_truth = lik.value(&policy().space().to_coords(&truth())).unwrap();
    let fit = mle_fit(&lik, &truth(), &MleOptions::default()).unwrap();
    assert!(fit.log_likelihood >= at_truth - 1e-9);
    assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    assert!(policy().space().contains(&fit.theta_hat));
}

#[test]
fn saved_model_reproduces_the_likelihood() {
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path(), policy(), &TaskConfig::firefly_1d(), &TrainingHyper::FittedQ(hyper()), 5).unwrap();
    let (_, loaded) = load_model(dir.path()).unwrap();
    let u = policy().space().to_coords(&truth());
    let a = Likelihood::new(policy(), dataset()).unwrap().value(&u).unwrap();
    let b = Likelihood::new(&loaded, dataset()).unwrap().value(&u).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn likelihood_and_gradient_are_finite_over_the_box(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let space = policy().space();
        let u: Vec<f64> = [a, b].iter().zip(&space.dims).map(|(t, d)| {
            let (lo, hi) = d.coord_bounds();
            lo + t * (hi - lo)
        }).collect();
        let lik = Likelihood::new(policy(), dataset()).unwrap();
        let (v, g) = lik.gradient(&u).unwrap();
        prop_assert!(v.is_finite());
        prop_assert!(g.iter().all(|x| x.is_finite()));
    }
}
