use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamState, Tape};
use crate::config::{ExperimentConfig, Task, Variant};
use crate::data::{gen_synthetic_domains, gen_toy_regression, split_train_val, Dataset};
use crate::error::{Error, Result};
use crate::gating::{ImportanceVector, ScheduleState};
use crate::inference::{predict_mix, score};
use crate::model::HmoeModel;

use super::losses::{total_loss, Batch, LossComponents, LossMode};

/// Independent random streams derived from one seed.
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub mixup: ChaCha8Rng,
    pub shuffle: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        RngStreams {
            init: stream(1),
            data: stream(2),
            mixup: stream(3),
            shuffle: stream(4),
        }
    }
}

/// One line of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub losses: LossComponents,
    pub mode: LossMode,
    /// Validation accuracy (classification) or MSE (regression), MIX mode.
    pub val_metric: Option<f64>,
}

pub struct TrainOutcome {
    pub model: HmoeModel,
    pub history: Vec<MetricRow>,
    /// Expert importance on the last training batch.
    pub final_importance: Option<ImportanceVector>,
    /// Step after which the target loss became mixup, if it did.
    pub switch_step: Option<usize>,
}

impl TrainOutcome {
    pub fn final_losses(&self) -> Option<LossComponents> {
        self.history.last().map(|r| r.losses)
    }
}

/// Training and validation sets for a config: the generated data of the
/// task (or the CSV at `data.path`), split per domain by `data.train_fraction`.
/// With a fraction of 1 the training set doubles as validation set.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let mut rng = RngStreams::new(cfg.seed).data;
    let all = match &cfg.data.path {
        Some(path) => crate::report::read_dataset_csv(path, cfg.is_classification())?,
        None => generate_dataset(cfg, &mut rng)?,
    };
    all.validate()?;
    let (train, val) = split_train_val(&all, cfg.data.train_fraction, &mut rng)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if val.is_empty() {
        return Ok((train.clone(), train));
    }
    Ok((train, val))
}

/// The task's generated dataset.
pub fn generate_dataset<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<Dataset> {
    Ok(match cfg.task {
        Task::ToyRegression => gen_toy_regression(rng).to_dataset(),
        Task::SyntheticDg => gen_synthetic_domains(&cfg.data.synthetic, rng)?.to_dataset(),
    })
}

/// Initializes a model for `train` and trains it.
pub fn run_training(
    cfg: &ExperimentConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    train.validate()?;
    let spec = cfg.model_spec(train.input_dim(), train.output_dim())?;
    let mut streams = RngStreams::new(cfg.seed);
    let model = HmoeModel::init(spec, &mut streams.init)?;
    run_training_from(cfg, model, train, val)
}

/// Trains an existing model.
pub fn run_training_from(
    cfg: &ExperimentConfig,
    mut model: HmoeModel,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train.validate()?;
    if train.input_dim() != model.spec.input_dim() || train.output_dim() != model.spec.output_dim()
    {
        return Err(Error::config(
            "data",
            "dataset shape does not match the model",
        ));
    }
    let mut streams = RngStreams::new(cfg.seed);
    let n = train.len();
    let visible = domain_label_mask(cfg, n, &mut streams.shuffle);

    let mut adam = AdamState::new(Adam::new(cfg.lr), &model.params());
    let mut mode = LossMode::Erm;
    let mut switch_step = None;
    let mut smoothed_en: Option<f64> = None;
    let mut history = Vec::with_capacity(cfg.steps);
    let mut final_importance = None;
    let full_batch = cfg.batch_size >= n;
    let all_rows: Vec<usize> = (0..n).collect();

    for step in 0..cfg.steps {
        let idx: Vec<usize> = if full_batch {
            all_rows.clone()
        } else {
            (0..cfg.batch_size)
                .map(|_| streams.shuffle.random_range(0..n))
                .collect()
        };
        let batch = Batch::from_dataset(train, &idx, visible.as_deref())?;
        let sched = ScheduleState::for_step(step, cfg.steps);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss = total_loss(
            &mut tape,
            &model,
            &bound,
            &batch,
            &cfg.loss,
            &sched,
            mode,
            cfg.mixup_alpha,
            &mut streams.mixup,
        )
        .map_err(|e| match e {
            // overflow inside the forward pass surfaces as a domain error
            Error::Domain(msg) => Error::NonFinite {
                step,
                snapshot: msg,
            },
            other => other,
        })?;
        if !loss.components.is_finite() {
            return Err(Error::NonFinite {
                step,
                snapshot: format!("{:?}", loss.components),
            });
        }
        let grads = tape.backward(loss.total)?;
        model.store_grads(&bound, &grads)?;
        adam.step(&mut model.params_mut())?;
        if !model.is_finite() {
            return Err(Error::NonFinite {
                step,
                snapshot: format!("parameters after update; losses {:?}", loss.components),
            });
        }
        final_importance = Some(ImportanceVector::from_probs(
            tape.value(loss.forward.gate.p),
        )?);

        let row_mode = mode;
        let l_en = loss.components.l_en;
        let ema = match smoothed_en {
            None => l_en,
            Some(prev) => cfg.switch_momentum * prev + (1.0 - cfg.switch_momentum) * l_en,
        };
        smoothed_en = Some(ema);
        if cfg.variant == Variant::MU && mode == LossMode::Erm && ema < cfg.switch_threshold {
            mode = LossMode::Mixup;
            switch_step = Some(step + 1);
        }

        let val_metric = if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            Some(evaluate_mix(&model, val)?)
        } else {
            None
        };
        history.push(MetricRow {
            step,
            losses: loss.components,
            mode: row_mode,
            val_metric,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        final_importance,
        switch_step,
    })
}

/// Which training examples expose their domain label to the domain loss.
fn domain_label_mask<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    n: usize,
    rng: &mut R,
) -> Option<Vec<bool>> {
    if cfg.loss.lambda_d <= 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let keep = (cfg.data.domain_label_fraction * n as f64).round() as usize;
    let mut mask = vec![false; n];
    for &i in &order[..keep.min(n)] {
        mask[i] = true;
    }
    Some(mask)
}

/// MIX-mode accuracy or MSE on `data`.
pub fn evaluate_mix(model: &HmoeModel, data: &Dataset) -> Result<f64> {
    let pred = predict_mix(model, &data.inputs()?)?;
    score(&pred, &data.y, data.n_classes.is_some())
}
