mod common;

use common::*;
use hmoe::autodiff::Tape;
use hmoe::model::HmoeModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[test]
fn every_objective_matches_finite_differences() {
    for seed in [3, 11] {
        for obj in ALL_OBJECTIVES {
            let err = worst_gradient_error(seed, obj);
            assert!(err < TOL, "{obj:?} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let data = small_data(3);
    let model = HmoeModel::init(small_spec(3, true), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let probe = Probe::new(&data);
    let grads = probe.analytic(&model, Objective::Total);
    for (i, g) in grads.iter().enumerate() {
        // bias of the last hypernetwork layer aside, every tensor moves
        assert!(g.iter().any(|&x| x != 0.0), "tensor {i} has zero gradient");
    }
}

#[test]
fn adversarial_gradient_is_reversed_on_the_encoder() {
    let data = small_data(5);
    let model = HmoeModel::init(small_spec(3, true), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let probe = Probe::new(&data);
    let with_grl = probe.analytic(&model, Objective::Adversarial);
    let plain = {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(probe.batch.x.clone());
        let v = model.encode(&mut tape, &bound, x).unwrap();
        let logits = model.adversary_logits(&mut tape, &bound, v).unwrap();
        let onehot = probe.batch.targets.clone();
        let rows = tape.soft_cross_entropy_rows(logits, onehot).unwrap();
        let loss = tape.mean(rows).unwrap();
        let g = tape.backward(loss).unwrap();
        bound
            .all()
            .into_iter()
            .map(|p| g.wrt(p).into_data())
            .collect::<Vec<_>>()
    };
    for t in encoder_tensors(&model) {
        for (a, b) in with_grl[t].iter().zip(&plain[t]) {
            assert!((a + LAMBDA_GRL * b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }
    let adv_start = model.params().len() - 1 - model.adversary.as_ref().unwrap().params.len();
    for t in adv_start..model.params().len() - 1 {
        assert_eq!(with_grl[t], plain[t]);
    }
}

#[test]
fn zero_grl_coefficient_cuts_encoder_gradient() {
    let data = small_data(6);
    let model = HmoeModel::init(small_spec(2, true), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut probe = Probe::new(&data);
    probe.sched.lambda_grl = 0.0;
    let g = probe.analytic(&model, Objective::Adversarial);
    for t in encoder_tensors(&model) {
        assert!(g[t].iter().all(|&x| x == 0.0));
    }
}
