//! Helpers shared by the integration tests.

#![allow(dead_code)]

use hmoe::autodiff::Tape;
use hmoe::config::LossWeights;
use hmoe::data::Dataset;
use hmoe::gating::{entropy_loss, kl_balance, ScheduleState};
use hmoe::model::{BoundModel, HmoeModel, ModelSpec};
use hmoe::nn::{Activation, MlpSpec};
use hmoe::training::{
    adversarial_loss, domain_loss, erm_loss, mixup_loss_with_plan, plan_mixup, total_loss, Batch,
    LossMode, MixupPlan,
};
use hmoe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Small classification model: 3 inputs, 3 classes, `k` experts, D = 4.
pub fn small_spec(k: usize, adversary: bool) -> ModelSpec {
    let act = Activation::Silu;
    let classifier = MlpSpec::new(vec![4, 3, 3], act).unwrap();
    ModelSpec {
        featurizer: MlpSpec::new(vec![3, 5, 4], act).unwrap(),
        encoder: MlpSpec::new(vec![3, 5, 4], act).unwrap(),
        hypernetwork: MlpSpec::new(vec![4, 6, classifier.param_count()], act).unwrap(),
        classifier,
        adversary: adversary.then(|| MlpSpec::new(vec![4, 5, 3], Activation::Tanh).unwrap()),
        k,
        eps: 1e-8,
    }
}

/// Eight labeled examples spread over three domains.
pub fn small_data(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    Dataset {
        x: (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect(),
        y: (0..n).map(|i| (i % 3) as f64).collect(),
        d: (0..n).map(|i| (i * 7 + 1) % 3).collect(),
        n_classes: Some(3),
    }
}

pub fn small_batch(data: &Dataset) -> Batch {
    let idx: Vec<usize> = (0..data.len()).collect();
    let visible = vec![true; data.len()];
    Batch::from_dataset(data, &idx, Some(&visible)).unwrap()
}

/// The individual objectives under test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    ErmTarget,
    MixupTarget,
    Entropy,
    Balance,
    Adversarial,
    Domain,
    Total,
}

pub const ALL_OBJECTIVES: [Objective; 7] = [
    Objective::ErmTarget,
    Objective::MixupTarget,
    Objective::Entropy,
    Objective::Balance,
    Objective::Adversarial,
    Objective::Domain,
    Objective::Total,
];

pub const LAMBDA_GRL: f64 = 0.6;

pub struct Probe {
    pub batch: Batch,
    pub plan: MixupPlan,
    pub weights: LossWeights,
    pub sched: ScheduleState,
}

impl Probe {
    pub fn new(data: &Dataset) -> Self {
        let batch = small_batch(data);
        let groups: Vec<usize> = data.d.clone();
        let plan = plan_mixup(&groups, 0.3, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let weights = LossWeights {
            lambda_y: 1.0,
            lambda_en: 0.7,
            lambda_kl: 1.3,
            lambda_ad: 0.1,
            lambda_d: 0.4,
        };
        let mut sched = ScheduleState::at(0.25).unwrap();
        sched.lambda_grl = LAMBDA_GRL;
        Probe {
            batch,
            plan,
            weights,
            sched,
        }
    }

    /// Scalar objective recorded on a fresh tape.
    pub fn record(
        &self,
        tape: &mut Tape,
        model: &HmoeModel,
        bound: &BoundModel,
        obj: Objective,
    ) -> hmoe::autodiff::Var {
        let x = tape.constant(self.batch.x.clone());
        match obj {
            Objective::ErmTarget => {
                let f = model.forward(tape, bound, x).unwrap();
                erm_loss(tape, f.output, &self.batch).unwrap()
            }
            Objective::MixupTarget => {
                mixup_loss_with_plan(tape, model, bound, &self.batch, &self.plan).unwrap()
            }
            Objective::Entropy => {
                let f = model.forward(tape, bound, x).unwrap();
                entropy_loss(tape, f.gate.p).unwrap()
            }
            Objective::Balance => {
                let f = model.forward(tape, bound, x).unwrap();
                kl_balance(tape, f.gate.p).unwrap()
            }
            Objective::Adversarial => {
                let v = model.encode(tape, bound, x).unwrap();
                let labels = self.batch.labels.clone().unwrap();
                adversarial_loss(tape, model, bound, v, &labels, self.sched.lambda_grl).unwrap()
            }
            Objective::Domain => {
                let f = model.forward(tape, bound, x).unwrap();
                let d = self.batch.domains.clone().unwrap();
                domain_loss(tape, f.gate.p, &d, 3).unwrap().unwrap()
            }
            Objective::Total => {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                total_loss(
                    tape,
                    model,
                    bound,
                    &self.batch,
                    &self.weights,
                    &self.sched,
                    LossMode::Erm,
                    0.3,
                    &mut rng,
                )
                .unwrap()
                .total
            }
        }
    }

    pub fn value(&self, model: &HmoeModel, obj: Objective) -> f64 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let v = self.record(&mut tape, model, &bound, obj);
        tape.value(v).data()[0]
    }

    /// Analytic gradient per parameter tensor, in `params()` order.
    pub fn analytic(&self, model: &HmoeModel, obj: Objective) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let v = self.record(&mut tape, model, &bound, obj);
        let grads = tape.backward(v).unwrap();
        bound
            .all()
            .into_iter()
            .map(|p| grads.wrt(p).into_data())
            .collect()
    }
}

/// Central differences of `f` with respect to every parameter entry.
pub fn numeric(model: &HmoeModel, f: impl Fn(&HmoeModel) -> f64) -> Vec<Vec<f64>> {
    let mut work = model.clone();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::new();
    for (t, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (j, slot) in g.iter_mut().enumerate() {
            let orig = work.params()[t].data()[j];
            work.params_mut()[t].data_mut()[j] = orig + FD_STEP;
            let up = f(&work);
            work.params_mut()[t].data_mut()[j] = orig - FD_STEP;
            let down = f(&work);
            work.params_mut()[t].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Which `params()` tensors belong to the encoder.
pub fn encoder_tensors(model: &HmoeModel) -> std::ops::Range<usize> {
    let start = model.featurizer.params.len();
    start..start + model.encoder.params.len()
}

/// Gradient the GRL contract predicts: finite differences of the plain
/// objective, with the adversarial part of encoder gradients scaled by −λ.
pub fn expected_gradient(probe: &Probe, model: &HmoeModel, obj: Objective) -> Vec<Vec<f64>> {
    let enc = encoder_tensors(model);
    let reverse = |g: &mut Vec<Vec<f64>>, scale: f64| {
        for t in enc.clone() {
            g[t].iter_mut().for_each(|x| *x *= scale);
        }
    };
    match obj {
        Objective::Adversarial => {
            let mut g = numeric(model, |m| probe.value(m, Objective::Adversarial));
            reverse(&mut g, -probe.sched.lambda_grl);
            g
        }
        Objective::Total => {
            let w_ad = probe.weights.lambda_ad;
            let mut adv = numeric(model, |m| w_ad * probe.value(m, Objective::Adversarial));
            let total = numeric(model, |m| probe.value(m, Objective::Total));
            // total = rest + adversarial; only the adversarial share is reversed
            let mut rest: Vec<Vec<f64>> = total
                .iter()
                .zip(&adv)
                .map(|(t, a)| t.iter().zip(a).map(|(x, y)| x - y).collect())
                .collect();
            reverse(&mut adv, -probe.sched.lambda_grl);
            for (r, a) in rest.iter_mut().zip(&adv) {
                r.iter_mut().zip(a).for_each(|(x, y)| *x += y);
            }
            rest
        }
        _ => numeric(model, |m| probe.value(m, obj)),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both norms
/// are below `1e-7`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-7 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Worst per-tensor relative error of `obj` on a seeded model.
pub fn worst_gradient_error(seed: u64, obj: Objective) -> f64 {
    let data = small_data(seed);
    let model = HmoeModel::init(small_spec(3, true), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let probe = Probe::new(&data);
    let analytic = probe.analytic(&model, obj);
    let expected = expected_gradient(&probe, &model, obj);
    analytic
        .iter()
        .zip(&expected)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Tensor with standard-normal entries.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}
