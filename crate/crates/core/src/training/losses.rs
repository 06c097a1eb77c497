use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Reduce, Tape, Unary, Var};
use crate::config::LossWeights;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gating::{assign_cluster, entropy_loss, kl_balance, ScheduleState, PROB_FLOOR};
use crate::model::{BoundModel, ForwardPass, HmoeModel};
use crate::tensor::Tensor;

use super::mixup::{mixup_loss_with_plan, plan_mixup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Mean squared error on real-valued outputs.
    Regression,
    /// Cross-entropy on logits.
    Classification,
}

/// How the target loss is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Erm,
    Mixup,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Erm => "erm",
            LossMode::Mixup => "mixup",
        })
    }
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    /// Row-major `batch×C` targets: one-hot rows for classes, values for regression.
    pub targets: Vec<f64>,
    pub n_outputs: usize,
    pub kind: TaskKind,
    /// Class indices (classification only).
    pub labels: Option<Vec<usize>>,
    /// Domain indices visible to the domain loss; `None` entries are unlabeled.
    pub domains: Option<Vec<Option<usize>>>,
    /// Number of labeled training domains `M_d`.
    pub n_domains: usize,
}

impl Batch {
    /// Builds a batch from rows `idx` of `data`. `visible` masks which domain
    /// labels are exposed; `None` hides them all.
    pub fn from_dataset(data: &Dataset, idx: &[usize], visible: Option<&[bool]>) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data.x[i].clone()).collect();
        Ok(Batch {
            x: Tensor::from_rows(&rows)?,
            targets: data.dense_targets(idx),
            n_outputs: data.output_dim(),
            kind: if data.n_classes.is_some() {
                TaskKind::Classification
            } else {
                TaskKind::Regression
            },
            labels: data
                .n_classes
                .map(|_| idx.iter().map(|&i| data.y[i] as usize).collect()),
            domains: visible
                .map(|mask| idx.iter().map(|&i| mask[i].then_some(data.d[i])).collect()),
            n_domains: data.n_domains(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Domain labels when every row has one.
    pub fn full_domains(&self) -> Option<Vec<usize>> {
        self.domains.as_ref()?.iter().copied().collect()
    }
}

/// Per-row task loss: squared error averaged over outputs, or cross-entropy
/// of logits against (possibly soft) label rows.
pub fn task_loss_rows(
    tape: &mut Tape,
    output: Var,
    targets: Vec<f64>,
    kind: TaskKind,
) -> Result<Var> {
    match kind {
        TaskKind::Classification => tape.soft_cross_entropy_rows(output, targets),
        TaskKind::Regression => {
            let shape = tape.shape(output).to_vec();
            let t = tape.constant(Tensor::new(shape, targets)?);
            let diff = tape.sub(output, t)?;
            let sq = tape.square(diff)?;
            tape.reduce_axis(sq, Reduce::Mean, 1)
        }
    }
}

/// Empirical risk of the aggregated prediction.
pub fn erm_loss(tape: &mut Tape, output: Var, batch: &Batch) -> Result<Var> {
    let rows = task_loss_rows(tape, output, batch.targets.clone(), batch.kind)?;
    tape.mean(rows)
}

/// Mean `−log p[d]` over rows carrying a domain label, where expert `d`
/// stands for domain `d` of the first `m_d` experts. Returns `None` when no
/// row is labeled.
pub fn domain_loss(
    tape: &mut Tape,
    p: Var,
    domains: &[Option<usize>],
    m_d: usize,
) -> Result<Option<Var>> {
    let (b, k) = tape.value(p).dims2()?;
    if domains.len() != b {
        return Err(Error::Dimension(format!(
            "{} domain labels for {b} rows",
            domains.len()
        )));
    }
    if m_d > k {
        return Err(Error::Data(format!(
            "{m_d} labeled domains but only {k} experts"
        )));
    }
    if let Some(bad) = domains.iter().flatten().find(|&&d| d >= m_d) {
        return Err(Error::Data(format!("domain label {bad} not below {m_d}")));
    }
    let labeled = domains.iter().filter(|d| d.is_some()).count();
    if labeled == 0 {
        return Ok(None);
    }
    let mut pick = vec![0.0; b * k];
    for (i, d) in domains.iter().enumerate() {
        if let Some(d) = d {
            pick[i * k + d] = -1.0 / labeled as f64;
        }
    }
    let logp = tape.unary(p, Unary::LogFloor(PROB_FLOOR))?;
    let pick = tape.constant(Tensor::new(vec![b, k], pick)?);
    let terms = tape.mul(logp, pick)?;
    Ok(Some(tape.sum(terms)?))
}

/// Cross-entropy of the adversary applied to gradient-reversed embeddings.
pub fn adversarial_loss(
    tape: &mut Tape,
    model: &HmoeModel,
    bound: &BoundModel,
    v: Var,
    labels: &[usize],
    lambda_grl: f64,
) -> Result<Var> {
    let reversed = tape.grl(v, lambda_grl)?;
    let logits = model.adversary_logits(tape, bound, reversed)?;
    let (b, c) = tape.value(logits).dims2()?;
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("class {y} outside 0..{c}")));
        }
        onehot[i * c + y] = 1.0;
    }
    let rows = tape.soft_cross_entropy_rows(logits, onehot)?;
    tape.mean(rows)
}

/// Unweighted loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_y: f64,
    pub l_en: f64,
    pub l_kl: f64,
    pub l_ad: f64,
    pub l_d: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [
            self.l_y, self.l_en, self.l_kl, self.l_ad, self.l_d, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Result of [`total_loss`].
pub struct StepLoss {
    pub total: Var,
    pub components: LossComponents,
    pub forward: ForwardPass,
}

/// `λ_y·L_y + λ_en·γ_en·L_en + λ_kl·L_kl + λ_ad·L_ad + λ_d·L_d`.
///
/// Terms whose effective weight is zero are left out of the graph. L_en and
/// L_kl are always evaluated for logging; L_ad needs an adversary and class
/// labels, L_d needs domain labels.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &HmoeModel,
    bound: &BoundModel,
    batch: &Batch,
    weights: &LossWeights,
    sched: &ScheduleState,
    mode: LossMode,
    mixup_alpha: f64,
    rng: &mut R,
) -> Result<StepLoss> {
    let x = tape.constant(batch.x.clone());
    let fwd = model.forward(tape, bound, x)?;
    let mut c = LossComponents::default();
    let mut terms: Vec<(f64, Var)> = Vec::new();

    let l_y = match mode {
        LossMode::Erm => erm_loss(tape, fwd.output, batch)?,
        LossMode::Mixup => {
            let groups = match (weights.lambda_d > 0.0)
                .then(|| batch.full_domains())
                .flatten()
            {
                Some(domains) => domains,
                None => assign_cluster(tape.value(fwd.gate.p))?,
            };
            let plan = plan_mixup(&groups, mixup_alpha, rng)?;
            mixup_loss_with_plan(tape, model, bound, batch, &plan)?
        }
    };
    c.l_y = tape.value(l_y).data()[0];
    terms.push((weights.lambda_y, l_y));

    let l_en = entropy_loss(tape, fwd.gate.p)?;
    c.l_en = tape.value(l_en).data()[0];
    terms.push((weights.lambda_en * sched.gamma_en, l_en));

    let l_kl = kl_balance(tape, fwd.gate.p)?;
    c.l_kl = tape.value(l_kl).data()[0];
    terms.push((weights.lambda_kl, l_kl));

    if weights.lambda_ad > 0.0 {
        let labels = batch.labels.as_ref().ok_or_else(|| {
            Error::config("loss.lambda_ad", "adversarial loss needs class labels")
        })?;
        let l_ad = adversarial_loss(tape, model, bound, fwd.v, labels, sched.lambda_grl)?;
        c.l_ad = tape.value(l_ad).data()[0];
        terms.push((weights.lambda_ad, l_ad));
    }

    if weights.lambda_d > 0.0 {
        if let Some(domains) = &batch.domains {
            if let Some(l_d) = domain_loss(tape, fwd.gate.p, domains, batch.n_domains)? {
                c.l_d = tape.value(l_d).data()[0];
                terms.push((weights.lambda_d, l_d));
            }
        }
    }

    let mut total: Option<Var> = None;
    for (w, v) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { v } else { tape.scale(v, w)? };
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    c.total = tape.value(total).data()[0];
    Ok(StepLoss {
        total,
        components: c,
        forward: fwd,
    })
}
