//! MLPs, hypernetwork weight generation and the functional classifier.
//!
//! Parameter layout, shared by [`NetworkInstance`] and [`GeneratedWeights`]:
//! for every layer in order, the weight matrix `in×out` in row-major order
//! followed by the bias vector of length `out`. A layer computes `x·W + b`.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.unary(x, Unary::Relu),
            Activation::Silu => tape.unary(x, Unary::Silu),
            Activation::Tanh => tape.unary(x, Unary::Tanh),
        }
    }
}

/// Layer sizes `[input, hidden.., output]` plus the hidden activation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(
                "layer_sizes",
                "an MLP needs at least an input and an output size",
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config("layer_sizes", "sizes must be positive"));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation,
        })
    }

    pub fn input(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| i * o + o).sum()
    }
}

/// Concrete MLP parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkInstance {
    pub spec: MlpSpec,
    /// `[W_0, b_0, W_1, b_1, ...]`
    pub params: Vec<Tensor>,
}

/// Initialization scheme for [`init_network`].
#[derive(Clone, Debug)]
pub enum InitMode {
    /// He-normal weights, zero biases.
    Standard,
    /// Standard hidden layers; the output layer is rescaled so that the
    /// weights it generates for `target` have variance ≈ 2/fan_in of the
    /// corresponding target layer when fed standard-normal inputs.
    Hyperfan { target: MlpSpec },
}

/// Number of standard-normal probes used to estimate the second moment of
/// the last hidden activation during hyperfan initialization.
const HYPERFAN_PROBES: usize = 256;

pub fn init_network<R: Rng + ?Sized>(
    spec: &MlpSpec,
    mode: &InitMode,
    rng: &mut R,
) -> Result<NetworkInstance> {
    let mut params = Vec::with_capacity(2 * spec.n_layers());
    for (fan_in, fan_out) in spec.layers() {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        params.push(Tensor::new(vec![fan_in, fan_out], w)?);
        params.push(Tensor::zeros(&[fan_out]));
    }
    let mut net = NetworkInstance {
        spec: spec.clone(),
        params,
    };

    if let InitMode::Hyperfan { target } = mode {
        if target.param_count() != spec.output() {
            return Err(Error::config(
                "hypernetwork",
                format!(
                    "output size {} does not match target parameter count {}",
                    spec.output(),
                    target.param_count()
                ),
            ));
        }
        rescale_for_hyperfan(&mut net, target, rng)?;
    }
    Ok(net)
}

fn rescale_for_hyperfan<R: Rng + ?Sized>(
    net: &mut NetworkInstance,
    target: &MlpSpec,
    rng: &mut R,
) -> Result<()> {
    let n_layers = net.spec.n_layers();
    let (fan_in, fan_out) = net.spec.layers().last().unwrap();

    // second moment of the input to the output layer
    let probes: Vec<f64> = (0..HYPERFAN_PROBES * net.spec.input())
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let probes = Tensor::new(vec![HYPERFAN_PROBES, net.spec.input()], probes)?;
    let hidden = {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, net);
        let mut h = tape.constant(probes);
        for layer in 0..n_layers - 1 {
            h = affine(&mut tape, h, vars[2 * layer], vars[2 * layer + 1])?;
            h = net.spec.activation.apply(&mut tape, h)?;
        }
        tape.value(h).clone()
    };
    let second_moment = hidden.data().iter().map(|x| x * x).sum::<f64>() / hidden.len() as f64;
    let second_moment = second_moment.max(1e-12);

    let mut col_std = vec![0.0; fan_out];
    let mut offset = 0;
    for (t_in, t_out) in target.layers() {
        let std = (2.0 / (t_in as f64 * fan_in as f64 * second_moment)).sqrt();
        col_std[offset..offset + t_in * t_out].fill(std);
        // bias-generating outputs stay at zero
        offset += t_in * t_out + t_out;
    }

    let w = &mut net.params[2 * (n_layers - 1)];
    for row in w.data_mut().chunks_mut(fan_out) {
        for (x, &std) in row.iter_mut().zip(&col_std) {
            *x = if std == 0.0 {
                0.0
            } else {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            };
        }
    }
    net.params[2 * n_layers - 1] = Tensor::zeros(&[fan_out]);
    Ok(())
}

/// Records every parameter of `net` on `tape` as a trainable leaf.
pub fn bind(tape: &mut Tape, net: &NetworkInstance) -> Vec<Var> {
    net.params.iter().map(|p| tape.param(p)).collect()
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

/// Forward pass through an MLP whose parameters are already on the tape.
pub fn mlp_forward(tape: &mut Tape, spec: &MlpSpec, params: &[Var], x: Var) -> Result<Var> {
    let (_, cols) = tape.value(x).dims2()?;
    if cols != spec.input() {
        return Err(Error::Dimension(format!(
            "network expects {} inputs, got {cols}",
            spec.input()
        )));
    }
    if params.len() != 2 * spec.n_layers() {
        return Err(Error::Dimension(format!(
            "{} parameter tensors for {} layers",
            params.len(),
            spec.n_layers()
        )));
    }
    let mut h = x;
    for layer in 0..spec.n_layers() {
        h = affine(tape, h, params[2 * layer], params[2 * layer + 1])?;
        if layer + 1 < spec.n_layers() {
            h = spec.activation.apply(tape, h)?;
        }
    }
    Ok(h)
}

impl NetworkInstance {
    /// Plain evaluation without keeping the tape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        let x = tape.constant(x.clone());
        let y = mlp_forward(&mut tape, &self.spec, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// Flattens the parameters in the documented layout.
    pub fn pack(&self) -> Tensor {
        let flat: Vec<f64> = self
            .params
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        Tensor::vector(flat)
    }

    /// Inverse of [`pack`](Self::pack).
    pub fn unpack(spec: &MlpSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::config(
                "classifier",
                format!(
                    "{} values for {} parameters",
                    flat.len(),
                    spec.param_count()
                ),
            ));
        }
        let mut params = Vec::new();
        let mut offset = 0;
        for (i, o) in spec.layers() {
            params.push(Tensor::new(
                vec![i, o],
                flat[offset..offset + i * o].to_vec(),
            )?);
            offset += i * o;
            params.push(Tensor::new(vec![o], flat[offset..offset + o].to_vec())?);
            offset += o;
        }
        Ok(NetworkInstance {
            spec: spec.clone(),
            params,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}

/// One flat parameter vector produced by the hypernetwork, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratedWeights {
    pub flat: Var,
}

/// Runs the hypernetwork on each row of `conditioning` (`n×D`) and returns
/// one weight vector per row.
pub fn hypernetwork_generate(
    tape: &mut Tape,
    hyper: &MlpSpec,
    hyper_params: &[Var],
    conditioning: Var,
    classifier: &MlpSpec,
) -> Result<Vec<GeneratedWeights>> {
    if hyper.output() != classifier.param_count() {
        return Err(Error::config(
            "hypernetwork",
            format!(
                "produces {} values but the classifier needs {}",
                hyper.output(),
                classifier.param_count()
            ),
        ));
    }
    let out = mlp_forward(tape, hyper, hyper_params, conditioning)?;
    let (rows, width) = tape.value(out).dims2()?;
    (0..rows)
        .map(|r| {
            let flat = tape.slice(out, r * width, vec![width])?;
            Ok(GeneratedWeights { flat })
        })
        .collect()
}

/// Applies the classifier shape `spec` to `z` using externally supplied
/// parameters; gradients flow into `theta`.
pub fn functional_classifier_apply(
    tape: &mut Tape,
    z: Var,
    theta: GeneratedWeights,
    spec: &MlpSpec,
) -> Result<Var> {
    let len = tape.value(theta.flat).len();
    if len != spec.param_count() {
        return Err(Error::config(
            "classifier",
            format!(
                "{len} generated values for {} parameters",
                spec.param_count()
            ),
        ));
    }
    let mut params = Vec::with_capacity(2 * spec.n_layers());
    let mut offset = 0;
    for (i, o) in spec.layers() {
        params.push(tape.slice(theta.flat, offset, vec![i, o])?);
        offset += i * o;
        params.push(tape.slice(theta.flat, offset, vec![o])?);
        offset += o;
    }
    mlp_forward(tape, spec, &params, z)
}

/// Gradient reversal layer.
pub fn grl(tape: &mut Tape, v: Var, lambda_grl: f64) -> Result<Var> {
    tape.grl(v, lambda_grl)
}
