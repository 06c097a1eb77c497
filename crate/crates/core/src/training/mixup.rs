//! Intra-domain mixup: convex combinations of pairs drawn from the same
//! cluster, with the empirical risk averaged over clusters.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundModel, HmoeModel};
use crate::tensor::Tensor;

use super::losses::{task_loss_rows, Batch};

/// One cluster of a batch: row `rows[i]` is mixed with `partners[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPart {
    pub rows: Vec<usize>,
    pub partners: Vec<usize>,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixupPlan {
    pub parts: Vec<MixPart>,
}

/// Groups rows by `groups[i]` (ascending group id), pairs each row with a
/// shuffled copy of its group and draws one `β ~ Beta(α, α)` per group.
pub fn plan_mixup<R: Rng + ?Sized>(groups: &[usize], alpha: f64, rng: &mut R) -> Result<MixupPlan> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Contract(format!(
            "mixup alpha must be positive, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Contract(e.to_string()))?;
    let n_groups = groups.iter().max().map_or(0, |m| m + 1);
    let mut parts = Vec::new();
    for g in 0..n_groups {
        let rows: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        if rows.is_empty() {
            continue;
        }
        let mut partners = rows.clone();
        partners.shuffle(rng);
        parts.push(MixPart {
            rows,
            partners,
            beta: beta.sample(rng),
        });
    }
    Ok(MixupPlan { parts })
}

/// Mixed inputs and targets in plan order, plus the per-row weight that turns
/// a weighted row sum into the unweighted average of per-part means.
pub fn mixed_inputs(batch: &Batch, plan: &MixupPlan) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, dim) = batch.x.dims2()?;
    let c = batch.n_outputs;
    let n_parts = plan.parts.len();
    if n_parts == 0 {
        return Err(Error::Data("mixup plan has no parts".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut weights = Vec::new();
    for part in &plan.parts {
        if part.rows.len() != part.partners.len() || part.rows.is_empty() {
            return Err(Error::Contract(
                "mixup part rows and partners differ".into(),
            ));
        }
        let b = part.beta;
        let w = 1.0 / (n_parts * part.rows.len()) as f64;
        for (&i, &j) in part.rows.iter().zip(&part.partners) {
            if i >= n || j >= n {
                return Err(Error::Dimension(format!("mixup row outside batch of {n}")));
            }
            let (xi, xj) = (batch.x.row(i), batch.x.row(j));
            xs.extend((0..dim).map(|t| b * xi[t] + (1.0 - b) * xj[t]));
            let (yi, yj) = (
                &batch.targets[i * c..(i + 1) * c],
                &batch.targets[j * c..(j + 1) * c],
            );
            ys.extend((0..c).map(|t| b * yi[t] + (1.0 - b) * yj[t]));
            weights.push(w);
        }
    }
    let rows = weights.len();
    Ok((Tensor::new(vec![rows, dim], xs)?, ys, weights))
}

/// Mixup risk for a fixed plan.
pub fn mixup_loss_with_plan(
    tape: &mut Tape,
    model: &HmoeModel,
    bound: &BoundModel,
    batch: &Batch,
    plan: &MixupPlan,
) -> Result<Var> {
    let (x, y, w) = mixed_inputs(batch, plan)?;
    let x = tape.constant(x);
    let fwd = model.forward(tape, bound, x)?;
    let rows = task_loss_rows(tape, fwd.output, y, batch.kind)?;
    let w = tape.constant(Tensor::vector(w));
    let weighted = tape.mul(rows, w)?;
    tape.sum(weighted)
}

/// Draws a plan over `groups` and evaluates its mixup risk.
pub fn intra_domain_mixup_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &HmoeModel,
    bound: &BoundModel,
    batch: &Batch,
    groups: &[usize],
    alpha: f64,
    rng: &mut R,
) -> Result<Var> {
    if groups.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} group ids for {} rows",
            groups.len(),
            batch.len()
        )));
    }
    let plan = plan_mixup(groups, alpha, rng)?;
    mixup_loss_with_plan(tape, model, bound, batch, &plan)
}
