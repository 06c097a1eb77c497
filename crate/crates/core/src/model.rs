//! The full mixture: featurizer, D2V encoder, embedding space,
//! hypernetwork, functional classifier and the optional adversary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::gating::{gate_values, EmbeddingSpace, GateDistribution};
use crate::nn::{
    bind, functional_classifier_apply, hypernetwork_generate, init_network, mlp_forward, InitMode,
    MlpSpec, NetworkInstance,
};
use crate::tensor::Tensor;

/// Shapes of every sub-network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `h_z`: input → features.
    pub featurizer: MlpSpec,
    /// `h_v`: input → embedding space.
    pub encoder: MlpSpec,
    /// `f_c`: features → outputs; its parameters come from the hypernetwork.
    pub classifier: MlpSpec,
    /// `f_h`: embedding → flat classifier parameters.
    pub hypernetwork: MlpSpec,
    /// `f_c^ad`: embedding → class logits, only for class-adversarial training.
    pub adversary: Option<MlpSpec>,
    pub k: usize,
    pub eps: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "at least one expert is required"));
        }
        let d = self.encoder.output();
        if self.hypernetwork.input() != d {
            return Err(Error::config(
                "d",
                format!(
                    "hypernetwork input {} differs from encoder output {d}",
                    self.hypernetwork.input()
                ),
            ));
        }
        if self.hypernetwork.output() != self.classifier.param_count() {
            return Err(Error::config(
                "net.hyper_hidden",
                "hypernetwork output must equal the classifier parameter count",
            ));
        }
        if self.featurizer.output() != self.classifier.input() {
            return Err(Error::config(
                "net.feature_dim",
                "featurizer output must equal classifier input",
            ));
        }
        if self.featurizer.input() != self.encoder.input() {
            return Err(Error::config(
                "input_dim",
                "featurizer and encoder inputs differ",
            ));
        }
        if let Some(adv) = &self.adversary {
            if adv.input() != d || adv.output() != self.classifier.output() {
                return Err(Error::config(
                    "net.adversary_hidden",
                    "adversary must map the embedding dimension to the class count",
                ));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.featurizer.input()
    }

    pub fn output_dim(&self) -> usize {
        self.classifier.output()
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmoeModel {
    pub spec: ModelSpec,
    pub featurizer: NetworkInstance,
    pub encoder: NetworkInstance,
    pub hypernetwork: NetworkInstance,
    pub adversary: Option<NetworkInstance>,
    pub embeddings: EmbeddingSpace,
}

/// Tape handles for every parameter of a model, in [`HmoeModel::params`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub featurizer: Vec<Var>,
    pub encoder: Vec<Var>,
    pub hypernetwork: Vec<Var>,
    pub adversary: Option<Vec<Var>>,
    pub embeddings: Var,
}

impl BoundModel {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend(&self.featurizer);
        out.extend(&self.encoder);
        out.extend(&self.hypernetwork);
        if let Some(a) = &self.adversary {
            out.extend(a);
        }
        out.push(self.embeddings);
        out
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub z: Var,
    pub v: Var,
    pub gate: GateDistribution,
    /// One `batch×C` output per expert.
    pub experts: Vec<Var>,
    /// Gate-weighted aggregation, `batch×C`.
    pub output: Var,
}

impl HmoeModel {
    /// Fresh model: He-normal sub-networks, hyperfan hypernetwork and
    /// standard-normal embeddings.
    pub fn init<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let featurizer = init_network(&spec.featurizer, &InitMode::Standard, rng)?;
        let encoder = init_network(&spec.encoder, &InitMode::Standard, rng)?;
        let hypernetwork = init_network(
            &spec.hypernetwork,
            &InitMode::Hyperfan {
                target: spec.classifier.clone(),
            },
            rng,
        )?;
        let adversary = spec
            .adversary
            .as_ref()
            .map(|s| init_network(s, &InitMode::Standard, rng))
            .transpose()?;
        let embeddings = EmbeddingSpace::init(spec.k, spec.embedding_dim(), rng)?;
        Ok(HmoeModel {
            spec,
            featurizer,
            encoder,
            hypernetwork,
            adversary,
            embeddings,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        out.extend(&self.featurizer.params);
        out.extend(&self.encoder.params);
        out.extend(&self.hypernetwork.params);
        if let Some(a) = &self.adversary {
            out.extend(&a.params);
        }
        out.push(&self.embeddings.vectors);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(&mut self.featurizer.params);
        out.extend(&mut self.encoder.params);
        out.extend(&mut self.hypernetwork.params);
        if let Some(a) = &mut self.adversary {
            out.extend(&mut a.params);
        }
        out.push(&mut self.embeddings.vectors);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            featurizer: bind(tape, &self.featurizer),
            encoder: bind(tape, &self.encoder),
            hypernetwork: bind(tape, &self.hypernetwork),
            adversary: self.adversary.as_ref().map(|a| bind(tape, a)),
            embeddings: tape.param(&self.embeddings.vectors),
        }
    }

    /// Records the parameters as constants, for evaluation without gradients.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        let consts = |tape: &mut Tape, net: &NetworkInstance| -> Vec<Var> {
            net.params
                .iter()
                .map(|p| tape.constant(p.clone()))
                .collect()
        };
        BoundModel {
            featurizer: consts(tape, &self.featurizer),
            encoder: consts(tape, &self.encoder),
            hypernetwork: consts(tape, &self.hypernetwork),
            adversary: self.adversary.as_ref().map(|a| consts(tape, a)),
            embeddings: tape.constant(self.embeddings.vectors.clone()),
        }
    }

    /// Copies gradients from `grads` into each parameter's gradient slot,
    /// overwriting whatever was there.
    pub fn store_grads(&mut self, bound: &BoundModel, grads: &Gradients) -> Result<()> {
        let vars = bound.all();
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            p.set_grad(grads.wrt(v).into_data())?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    pub fn encode(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<Var> {
        mlp_forward(tape, &self.spec.encoder, &bound.encoder, x)
    }

    /// Full MIX forward pass on a batch already recorded on the tape.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<ForwardPass> {
        let z = mlp_forward(tape, &self.spec.featurizer, &bound.featurizer, x)?;
        let v = self.encode(tape, bound, x)?;
        let gate = gate_values(tape, v, bound.embeddings, self.spec.eps)?;
        let thetas = hypernetwork_generate(
            tape,
            &self.spec.hypernetwork,
            &bound.hypernetwork,
            bound.embeddings,
            &self.spec.classifier,
        )?;
        let experts = thetas
            .into_iter()
            .map(|theta| functional_classifier_apply(tape, z, theta, &self.spec.classifier))
            .collect::<Result<Vec<_>>>()?;
        let output = aggregate_experts(tape, &experts, gate.p)?;
        Ok(ForwardPass {
            z,
            v,
            gate,
            experts,
            output,
        })
    }

    /// Adversarial classifier logits on a (possibly gradient-reversed) embedding.
    pub fn adversary_logits(&self, tape: &mut Tape, bound: &BoundModel, v: Var) -> Result<Var> {
        let (Some(spec), Some(params)) = (&self.spec.adversary, &bound.adversary) else {
            return Err(Error::config(
                "loss.lambda_ad",
                "model has no adversarial classifier",
            ));
        };
        mlp_forward(tape, spec, params, v)
    }

    /// Encoder outputs as plain values.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }
}

/// `Σ_k p[:, k]·y_k` for expert outputs `y_k` (`batch×C`) and gates `p` (`batch×K`).
pub fn aggregate_experts(tape: &mut Tape, experts: &[Var], p: Var) -> Result<Var> {
    let (_, k) = tape.value(p).dims2()?;
    if experts.len() != k || k == 0 {
        return Err(Error::Dimension(format!(
            "{} experts for {k} gate columns",
            experts.len()
        )));
    }
    let mut output = None;
    for (j, &y) in experts.iter().enumerate() {
        let p_j = tape.column(p, j)?;
        let weighted = tape.mul_col(y, p_j)?;
        output = Some(match output {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    Ok(output.expect("k >= 1"))
}
