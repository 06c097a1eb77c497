//! MIX and OOD prediction.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gating::assign_cluster;
use crate::metrics;
use crate::model::HmoeModel;
use crate::nn::{functional_classifier_apply, hypernetwork_generate, mlp_forward};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictMode {
    /// Gate-weighted sum over the experts.
    #[serde(rename = "MIX")]
    Mix,
    /// One classifier per example, generated from its own embedding.
    #[serde(rename = "OOD")]
    Ood,
}

impl std::str::FromStr for PredictMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MIX" => Ok(PredictMode::Mix),
            "OOD" => Ok(PredictMode::Ood),
            _ => Err(Error::config(
                "mode",
                format!("unknown mode `{s}` (MIX or OOD)"),
            )),
        }
    }
}

impl std::fmt::Display for PredictMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictMode::Mix => "MIX",
            PredictMode::Ood => "OOD",
        })
    }
}

/// Model outputs for a batch. Classification outputs are logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub output: Tensor,
    /// Gate values, `batch×K`; MIX only.
    pub gate: Option<Tensor>,
    pub mode: PredictMode,
}

impl Prediction {
    /// Argmax class per row.
    pub fn classes(&self) -> Result<Vec<usize>> {
        assign_cluster(&self.output)
    }

    /// Argmax expert per row (MIX only).
    pub fn clusters(&self) -> Option<Vec<usize>> {
        self.gate.as_ref().and_then(|g| assign_cluster(g).ok())
    }
}

pub fn predict_mix(model: &HmoeModel, x: &Tensor) -> Result<Prediction> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let x = tape.constant(x.clone());
    let fwd = model.forward(&mut tape, &bound, x)?;
    Ok(Prediction {
        output: tape.value(fwd.output).clone(),
        gate: Some(tape.value(fwd.gate.p).clone()),
        mode: PredictMode::Mix,
    })
}

pub fn predict_ood(model: &HmoeModel, x: &Tensor) -> Result<Prediction> {
    let spec = &model.spec;
    if spec.embedding_dim() != spec.hypernetwork.input() {
        return Err(Error::config(
            "d",
            format!(
                "encoder output {} differs from hypernetwork input {}",
                spec.embedding_dim(),
                spec.hypernetwork.input()
            ),
        ));
    }
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let x = tape.constant(x.clone());
    let z = mlp_forward(&mut tape, &spec.featurizer, &bound.featurizer, x)?;
    let v = model.encode(&mut tape, &bound, x)?;
    let thetas = hypernetwork_generate(
        &mut tape,
        &spec.hypernetwork,
        &bound.hypernetwork,
        v,
        &spec.classifier,
    )?;
    let rows = thetas
        .into_iter()
        .enumerate()
        .map(|(i, theta)| {
            let z_i = tape.gather_rows(z, &[i])?;
            functional_classifier_apply(&mut tape, z_i, theta, &spec.classifier)
        })
        .collect::<Result<Vec<Var>>>()?;
    let output = tape.concat_rows(&rows)?;
    Ok(Prediction {
        output: tape.value(output).clone(),
        gate: None,
        mode: PredictMode::Ood,
    })
}

pub fn predict(model: &HmoeModel, x: &Tensor, mode: PredictMode) -> Result<Prediction> {
    match mode {
        PredictMode::Mix => predict_mix(model, x),
        PredictMode::Ood => predict_ood(model, x),
    }
}

/// Accuracy for class labels, mean squared error for regression targets.
pub fn score(pred: &Prediction, y: &[f64], classification: bool) -> Result<f64> {
    if classification {
        let truth: Vec<usize> = y.iter().map(|&v| v as usize).collect();
        metrics::accuracy(&pred.classes()?, &truth)
    } else {
        metrics::mse(pred.output.data(), y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{aggregate_experts, ModelSpec};
    use crate::nn::{Activation, MlpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(k: usize) -> ModelSpec {
        let act = Activation::Tanh;
        let classifier = MlpSpec::new(vec![3, 4, 2], act).unwrap();
        ModelSpec {
            featurizer: MlpSpec::new(vec![2, 5, 3], act).unwrap(),
            encoder: MlpSpec::new(vec![2, 5, 3], act).unwrap(),
            hypernetwork: MlpSpec::new(vec![3, 6, classifier.param_count()], act).unwrap(),
            classifier,
            adversary: None,
            k,
            eps: 1e-8,
        }
    }

    fn inputs() -> Tensor {
        Tensor::from_rows(&[vec![0.3, -0.2], vec![1.5, 0.7], vec![-0.4, 2.0]]).unwrap()
    }

    /// Expert `k` evaluated directly: hypernetwork on `e_k`, then the classifier.
    fn expert_output(model: &HmoeModel, x: &Tensor, k: usize) -> Tensor {
        let flat = model
            .hypernetwork
            .forward(&Tensor::from_rows(&[model.embeddings.vector(k).to_vec()]).unwrap())
            .unwrap();
        let net = crate::nn::NetworkInstance::unpack(&model.spec.classifier, flat.data()).unwrap();
        net.forward(&model.featurizer.forward(x).unwrap()).unwrap()
    }

    #[test]
    fn single_expert_mix_is_that_expert() {
        let model = HmoeModel::init(spec(1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pred = predict_mix(&model, &inputs()).unwrap();
        let want = expert_output(&model, &inputs(), 0);
        for (a, b) in pred.output.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(pred.gate.unwrap().data().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn hand_set_gates_weight_scalar_experts() {
        let mut tape = Tape::new();
        let experts: Vec<Var> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&c| tape.constant(Tensor::new(vec![1, 1], vec![c]).unwrap()))
            .collect();
        let p = tape.constant(Tensor::new(vec![1, 3], vec![0.5, 0.3, 0.2]).unwrap());
        let y = aggregate_experts(&mut tape, &experts, p).unwrap();
        assert!((tape.value(y).data()[0] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn encoder_output_on_an_embedding_selects_that_expert() {
        let mut model = HmoeModel::init(spec(3), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = inputs();
        let v = model.embed(&x).unwrap();
        // put expert 1 exactly on the first example's embedding
        let row = v.row(0).to_vec();
        let dim = model.embeddings.dim();
        model.embeddings.vectors.data_mut()[dim..2 * dim].copy_from_slice(&row);

        let first = Tensor::from_rows(&[x.row(0).to_vec()]).unwrap();
        let ood = predict_ood(&model, &first).unwrap();
        let expert = expert_output(&model, &first, 1);
        assert_eq!(ood.output.data(), expert.data());

        let mix = predict_mix(&model, &first).unwrap();
        let gate = mix.gate.as_ref().unwrap();
        assert!(gate.data()[1] > 1.0 - 1e-6);
        for (a, b) in mix.output.data().iter().zip(expert.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn ood_is_deterministic_and_per_example() {
        let model = HmoeModel::init(spec(3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = predict_ood(&model, &inputs()).unwrap();
        let b = predict_ood(&model, &inputs()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.output.shape(), &[3, 2]);
        assert!(a.gate.is_none());
        // a batch row equals the same example predicted alone
        let alone = predict_ood(
            &model,
            &Tensor::from_rows(&[inputs().row(2).to_vec()]).unwrap(),
        )
        .unwrap();
        assert_eq!(alone.output.data(), a.output.row(2));
    }

    #[test]
    fn mix_lies_within_expert_range() {
        let model = HmoeModel::init(spec(3), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = inputs();
        let pred = predict_mix(&model, &x).unwrap();
        let experts: Vec<Tensor> = (0..3).map(|k| expert_output(&model, &x, k)).collect();
        for (idx, &y) in pred.output.data().iter().enumerate() {
            let lo = experts
                .iter()
                .map(|e| e.data()[idx])
                .fold(f64::INFINITY, f64::min);
            let hi = experts
                .iter()
                .map(|e| e.data()[idx])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("mix".parse::<PredictMode>().unwrap(), PredictMode::Mix);
        assert_eq!("OOD".parse::<PredictMode>().unwrap(), PredictMode::Ood);
        assert!("both".parse::<PredictMode>().is_err());
    }
}
