use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::Sentence;
use crate::model::FhmmParams;
use crate::oracle::{exact_infer, exact_kl};

fn random_sentence(rng: &mut ChaCha8Rng, t_len: usize, v: usize) -> Sentence {
    Sentence::new((0..t_len).map(|_| rng.gen_range(0..v as u32)).collect()).unwrap()
}

fn random_marginals(rng: &mut ChaCha8Rng, t_len: usize, m: usize, k: usize) -> Array3<f64> {
    let mut mu = Array3::from_shape_fn((t_len, m, k), |_| rng.gen_range(0.05..1.0));
    for mut row in mu.lanes_mut(Axis(2)) {
        let total: f64 = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    mu
}

/// `Σ_k μ[t][m][k]·exp θ[y][m][k]`, straight from the definition.
fn naive_factor(p: &FhmmParams, mu: &Array3<f64>, t: usize, y: usize, m: usize) -> f64 {
    (0..p.states())
        .map(|k| mu[[t, m, k]] * p.observation_logits()[[y, m, k]].exp())
        .sum()
}

fn naive_phi(p: &FhmmParams, mu: &Array3<f64>) -> Vec<f64> {
    (0..mu.dim().0)
        .map(|t| {
            let mut a = 0.0;
            for y in 0..p.vocab_size() {
                let mut prod = 1.0;
                for m in 0..p.layers() {
                    prod *= naive_factor(p, mu, t, y, m);
                }
                a += prod;
            }
            1.0 / a
        })
        .collect()
}

fn naive_potentials(p: &FhmmParams, s: &Sentence, mu: &Array3<f64>, phi: &[f64]) -> Array3<f64> {
    let (t_len, m_len, k_len) = mu.dim();
    let mut out = Array3::zeros((t_len, m_len, k_len));
    for t in 0..t_len {
        for m in 0..m_len {
            for k in 0..k_len {
                let mut sum = 0.0;
                for y in 0..p.vocab_size() {
                    let mut others = 1.0;
                    for n in 0..m_len {
                        if n != m {
                            others *= naive_factor(p, mu, t, y, n);
                        }
                    }
                    sum += others * p.observation_logits()[[y, m, k]].exp();
                }
                out[[t, m, k]] = p.observation_logits()[[s.ids()[t] as usize, m, k]] - phi[t] * sum;
            }
        }
    }
    out
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn optimized_updates_match_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, k, v, t_len) in [(2, 2, 3, 2), (3, 2, 4, 3), (1, 3, 5, 2), (4, 3, 6, 2)] {
        let p = FhmmParams::random(m, k, v, rng.gen(), 1.0).unwrap();
        let s = random_sentence(&mut rng, t_len, v);
        let mu = random_marginals(&mut rng, t_len, m, k);
        let phi = compute_phi_aux(mu.view(), &p).unwrap();
        let naive = naive_phi(&p, &mu);
        assert!(max_abs_diff(&phi, &naive) < 1e-10);
        let pots = update_obs_potentials(&s, mu.view(), &phi, &p).unwrap();
        assert!(max_abs_diff(pots.iter(), naive_potentials(&p, &s, &mu, &phi).iter()) < 1e-10);
    }
}

#[test]
fn single_layer_update_uses_empty_product() {
    let p = FhmmParams::random(1, 3, 4, 2, 1.0).unwrap();
    let s = Sentence::new(vec![2, 0]).unwrap();
    let mu = uniform_marginals(2, 1, 3);
    let phi = compute_phi_aux(mu.view(), &p).unwrap();
    let pots = update_obs_potentials(&s, mu.view(), &phi, &p).unwrap();
    for t in 0..2 {
        for k in 0..3 {
            let col: f64 = (0..4).map(|y| p.observation_logits()[[y, 0, k]].exp()).sum();
            let expected = p.observation_logits()[[s.ids()[t] as usize, 0, k]] - phi[t] * col;
            assert!((pots[[t, 0, k]] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_logits_give_reciprocal_vocab_and_constant_potentials() {
    let p = FhmmParams::uniform(3, 2, 5).unwrap();
    let mu = uniform_marginals(4, 3, 2);
    let phi = compute_phi_aux(mu.view(), &p).unwrap();
    assert!(phi.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    let s = Sentence::new(vec![0, 1, 2, 3]).unwrap();
    let pots = update_obs_potentials(&s, mu.view(), &phi, &p).unwrap();
    assert!(pots.iter().all(|&x| (x + 1.0).abs() < 1e-12));

    let p1 = FhmmParams::uniform(1, 2, 1).unwrap();
    assert_eq!(
        compute_phi_aux(uniform_marginals(1, 1, 2).view(), &p1).unwrap(),
        vec![1.0]
    );
}

#[test]
fn saturated_logits_are_reported() {
    let mut p = FhmmParams::uniform(1, 1, 2).unwrap();
    p.set_observation_logits(Array3::from_elem((2, 1, 1), -800.0)).unwrap();
    let err = compute_phi_aux(uniform_marginals(1, 1, 1).view(), &p).unwrap_err();
    assert!(matches!(err, crate::FhmmError::DegenerateObservation { position: 0 }));
}

#[test]
fn uniform_model_converges_in_one_sweep() {
    let p = FhmmParams::uniform(2, 3, 4).unwrap();
    let s = Sentence::new(vec![0, 3, 1]).unwrap();
    let (state, marg) = fit_variational(&s, &p, &VariationalOptions::default(), &WarmStart::default()).unwrap();
    assert!(state.converged);
    assert_eq!(state.iterations_used, 1);
    assert!(marg.unary.iter().all(|&u| (u - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn iterates_stay_normalized_and_surrogate_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let (m, k, v) = (rng.gen_range(1..4), rng.gen_range(2..4), rng.gen_range(2..6));
        let p = FhmmParams::random(m, k, v, rng.gen(), 2.0).unwrap();
        let len = rng.gen_range(1..6);
        let s = random_sentence(&mut rng, len, v);
        let engine = VariationalInference::new(&p);
        let mut trace = Vec::new();
        let mut check = |state: &VariationalState, marg: &PosteriorMarginals| {
            let (t_len, m, k) = marg.unary.dim();
            for t in 0..t_len {
                for layer in 0..m {
                    let row: f64 = (0..k).map(|s| marg.unary[[t, layer, s]]).sum();
                    assert!((row - 1.0).abs() < 1e-9);
                    if t > 0 {
                        for s in 0..k {
                            let col: f64 = (0..k).map(|j| marg.pairwise[[t - 1, layer, j, s]]).sum();
                            assert!((col - marg.unary[[t, layer, s]]).abs() < 1e-9);
                            let row: f64 = (0..k).map(|j| marg.pairwise[[t - 1, layer, s, j]]).sum();
                            assert!((row - marg.unary[[t - 1, layer, s]]).abs() < 1e-9);
                        }
                    }
                }
            }
            assert!(marg.unary.iter().all(|&u| (0.0..=1.0 + 1e-12).contains(&u)));
            trace.push(engine.kl_surrogate(&s, state, marg).unwrap());
        };
        engine
            .fit_observed(
                &s,
                &VariationalOptions::default(),
                &WarmStart::default(),
                Some(&mut check),
            )
            .unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "surrogate increased: {trace:?}");
        }
    }
}

#[test]
fn bound_sandwich_against_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let p = FhmmParams::random(2, 2, 3, rng.gen(), 1.0).unwrap();
        let len = rng.gen_range(1..4);
        let s = random_sentence(&mut rng, len, 3);
        let log_z = exact_infer(&p, &s, 1_000_000).unwrap().log_likelihood;
        let engine = VariationalInference::new(&p);
        let mut check = |state: &VariationalState, marg: &PosteriorMarginals| {
            let kl_bar = engine.kl_surrogate(&s, state, marg).unwrap() + log_z;
            let kl = exact_kl(&p, &s, state.obs_potentials.view(), 1_000_000).unwrap();
            assert!(kl >= -1e-10, "negative KL {kl}");
            assert!(kl <= kl_bar + 1e-8, "KL {kl} above bound {kl_bar}");
        };
        engine
            .fit_observed(
                &s,
                &VariationalOptions::default(),
                &WarmStart::default(),
                Some(&mut check),
            )
            .unwrap();
    }
}

#[test]
fn surrogate_at_optimal_phi_reduces_to_log_total() {
    let p = FhmmParams::random(2, 3, 4, 12, 1.0).unwrap();
    let s = Sentence::new(vec![1, 3, 0]).unwrap();
    let (state, marg) = fit_variational(&s, &p, &VariationalOptions::default(), &WarmStart::default()).unwrap();
    let engine = VariationalInference::new(&p);
    let with_phi = engine.kl_surrogate(&s, &state, &marg).unwrap();
    let mut direct = -state.layer_log_partitions.iter().sum::<f64>();
    for t in 0..3 {
        for m in 0..2 {
            for k in 0..3 {
                direct += marg.unary[[t, m, k]]
                    * (state.obs_potentials[[t, m, k]] - p.observation_logits()[[s.ids()[t] as usize, m, k]]);
            }
        }
        direct += -state.phi_aux[t].ln();
    }
    assert!((with_phi - direct).abs() < 1e-10);
}

#[test]
fn converged_potentials_are_a_joint_fixed_point() {
    let p = FhmmParams::random(3, 2, 5, 4, 1.0).unwrap();
    let s = Sentence::new(vec![4, 0, 2, 2]).unwrap();
    let opts = VariationalOptions {
        max_iters: 500,
        tol: 1e-13,
    };
    let (state, marg) = fit_variational(&s, &p, &opts, &WarmStart::default()).unwrap();
    assert!(state.converged);
    let phi = compute_phi_aux(marg.unary.view(), &p).unwrap();
    let jacobi = update_obs_potentials(&s, marg.unary.view(), &phi, &p).unwrap();
    assert!(max_abs_diff(jacobi.iter(), state.obs_potentials.iter()) < 1e-9);
}

#[test]
fn single_layer_is_exact_when_state_normalizers_agree() {
    // Each state's observation column is a permutation of the others, so
    // Σ_Y exp θ[Y][0][k] is the same for every k and the log bound only
    // shifts all potentials by a constant.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let base: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let obs = Array3::from_shape_fn((4, 1, 3), |(y, _, k)| base[(y + k) % 4]);
    let p = FhmmParams::from_parts(
        ndarray::Array2::from_shape_fn((1, 3), |_| rng.gen_range(-1.0..1.0)),
        Array3::from_shape_fn((1, 3, 3), |_| rng.gen_range(-1.0..1.0)),
        obs,
    )
    .unwrap();
    let s = Sentence::new(vec![0, 3, 1, 1]).unwrap();
    let (state, marg) = fit_variational(&s, &p, &VariationalOptions::default(), &WarmStart::default()).unwrap();
    let exact = exact_infer(&p, &s, 1_000_000).unwrap();
    assert!(max_abs_diff(marg.unary.iter(), exact.unary.iter()) < 1e-9);
    assert!(max_abs_diff(marg.pairwise.iter(), exact.pairwise.iter()) < 1e-9);
    assert_eq!(viterbi_decode(&state, &p), exact.map_path);
}

#[test]
fn single_layer_is_biased_when_state_normalizers_differ() {
    // The log bound is loose whenever Σ_Y exp θ[Y][0][k] varies with k.
    let p = FhmmParams::random(1, 2, 3, 0, 1.0).unwrap();
    let s = Sentence::new(vec![0]).unwrap();
    let opts = VariationalOptions {
        max_iters: 200,
        tol: 1e-14,
    };
    let (_, marg) = fit_variational(&s, &p, &opts, &WarmStart::default()).unwrap();
    let exact = exact_infer(&p, &s, 100).unwrap();
    let dev = max_abs_diff(marg.unary.iter(), exact.unary.iter());
    assert!(dev > 1e-6 && dev < 0.05, "deviation {dev}");
}

#[test]
fn viterbi_degenerate_cases() {
    let p = FhmmParams::random(2, 1, 3, 3, 1.0).unwrap();
    let s = Sentence::new(vec![0, 1, 2]).unwrap();
    let (state, _) = fit_variational(&s, &p, &VariationalOptions::default(), &WarmStart::default()).unwrap();
    assert_eq!(viterbi_decode(&state, &p), vec![vec![0, 0]; 3]);

    let u = FhmmParams::uniform(3, 4, 5).unwrap();
    let (state, _) = fit_variational(&s, &u, &VariationalOptions::default(), &WarmStart::default()).unwrap();
    assert_eq!(viterbi_decode(&state, &u), vec![vec![0, 0, 0]; 3]);
}

#[test]
fn permuting_states_permutes_marginals() {
    let p = FhmmParams::random(2, 3, 4, 8, 1.0).unwrap();
    let perm = [2usize, 0, 1];
    let layer = 1;
    let mut init = p.initial_logits().clone();
    let mut trans = p.transition_logits().clone();
    let mut obs = p.observation_logits().clone();
    for k in 0..3 {
        init[[layer, perm[k]]] = p.initial_logits()[[layer, k]];
        for j in 0..3 {
            trans[[layer, perm[j], perm[k]]] = p.transition_logits()[[layer, j, k]];
        }
        for y in 0..4 {
            obs[[y, layer, perm[k]]] = p.observation_logits()[[y, layer, k]];
        }
    }
    let q = FhmmParams::from_parts(init, trans, obs).unwrap();
    let s = Sentence::new(vec![3, 1, 2, 0]).unwrap();
    let opts = VariationalOptions::default();
    let (_, a) = fit_variational(&s, &p, &opts, &WarmStart::default()).unwrap();
    let (_, b) = fit_variational(&s, &q, &opts, &WarmStart::default()).unwrap();
    for t in 0..4 {
        for (k, &pk) in perm.iter().enumerate() {
            assert!((a.unary[[t, layer, k]] - b.unary[[t, layer, pk]]).abs() < 1e-12);
            assert!((a.unary[[t, 0, k]] - b.unary[[t, 0, k]]).abs() < 1e-12);
        }
    }
}

#[test]
fn marginal_warm_start_does_not_worsen_bound() {
    let p = FhmmParams::random(2, 3, 6, 30, 1.5).unwrap();
    let s = Sentence::new(vec![5, 1, 1, 0, 3]).unwrap();
    let engine = VariationalInference::new(&p);
    let short = VariationalOptions {
        max_iters: 2,
        tol: 1e-6,
    };
    let (st, mg) = engine.fit(&s, &short, &WarmStart::default()).unwrap();
    let before = engine.surrogate_bound(&s, &st, &mg).unwrap();
    let (st2, mg2) = engine
        .fit(
            &s,
            &VariationalOptions::default(),
            &WarmStart::Marginals(mg.unary.clone()),
        )
        .unwrap();
    assert!(engine.surrogate_bound(&s, &st2, &mg2).unwrap() >= before - 1e-10);
}

#[test]
fn warm_start_shape_is_checked() {
    let p = FhmmParams::random(2, 2, 3, 1, 1.0).unwrap();
    let s = Sentence::new(vec![0, 1]).unwrap();
    let bad = WarmStart::Potentials(Array3::zeros((3, 2, 2)));
    assert!(fit_variational(&s, &p, &VariationalOptions::default(), &bad).is_err());
    let zero_iters = VariationalOptions {
        max_iters: 0,
        tol: 1e-6,
    };
    assert!(fit_variational(&s, &p, &zero_iters, &WarmStart::default()).is_err());
}
