//! Pretraining, teacher-student finetuning, patch sampling, evaluation and
//! checkpoints.
//!
//! All three modes share one loop, [`run`]: sample aligned crops, record the
//! forward pass and the weighted objective, back-propagate, take an Adam step.
//! Checkpoints are taken at epoch boundaries, and resuming from one replays
//! the remaining epochs bit for bit.

mod adam;
mod checkpoint;
mod config;

use serde::{Deserialize, Serialize};

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointBundle};
pub use config::{lr_schedule, TrainConfig, TrainMode};

use crate::autograd::{GradMode, Graph};
use crate::error::{Error, Result};
use crate::haze::HazeSample;
use crate::losses::{self, PerceptualExtractor};
use crate::metrics::MetricReport;
use crate::network::{FeatureTap, Model, ParameterStore};
use crate::tensor::Tensor;
use crate::util::{Rng, RngState};

/// Counters and RNG position between epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub lr: f64,
    /// Mean total loss of each finished epoch.
    pub epoch_losses: Vec<f64>,
    pub rng: RngState,
}

impl RunState {
    pub fn start(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            step: 0,
            lr: lr_schedule(0, cfg),
            epoch_losses: Vec::new(),
            rng: Rng::seed(cfg.seed).state(),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub fidelity: f64,
    pub perceptual: f64,
    pub itkt: f64,
}

/// A frozen network whose row-0 taps the student mimics.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub model: Model,
    pub params: ParameterStore,
}

impl Teacher {
    pub fn new(model: Model, params: ParameterStore) -> Result<Self> {
        model.check_store(&params)?;
        Ok(Self { model, params })
    }

    pub fn taps(&self, hazy: &Tensor) -> Result<Vec<FeatureTap>> {
        Ok(self.model.forward(&self.params, hazy, true)?.1)
    }
}

/// Per-step callback.
pub type StepHook<'a> = &'a mut dyn FnMut(&StepRecord) -> Result<()>;
/// Per-epoch callback.
pub type EpochHook<'a> = &'a mut dyn FnMut(&CheckpointBundle) -> Result<()>;

/// Callbacks and limits for [`run`].
#[derive(Default)]
pub struct RunHooks<'a> {
    /// Called after every optimizer step.
    pub on_step: Option<StepHook<'a>>,
    /// Called with the bundle at every epoch boundary.
    pub on_epoch: Option<EpochHook<'a>>,
    /// Stop once this many epochs are complete (for interrupted runs).
    pub stop_after_epoch: Option<usize>,
}

/// Aligned random crops from randomly chosen samples.
pub fn sample_patches(
    samples: &[HazeSample],
    patch: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to draw patches from".into()));
    }
    if let Some(s) = samples
        .iter()
        .find(|s| s.hazy.height() < patch || s.hazy.width() < patch)
    {
        return Err(Error::Input(format!(
            "sample {} is {}x{}, smaller than the {patch} px patch",
            s.id,
            s.hazy.height(),
            s.hazy.width()
        )));
    }
    let mut hazy = Vec::with_capacity(batch_size);
    let mut clear = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let s = &samples[rng.below(samples.len())];
        let y = rng.below(s.hazy.height() - patch + 1);
        let x = rng.below(s.hazy.width() - patch + 1);
        hazy.push(s.hazy.crop(y, x, patch, patch)?);
        clear.push(s.clear.crop(y, x, patch, patch)?);
    }
    Ok((Tensor::stack(&hazy)?, Tensor::stack(&clear)?))
}

/// Continues `bundle` until `bundle.train.epochs` epochs are complete.
///
/// Finetuning with distillation needs `teacher`; the other modes refuse one.
pub fn run(
    mut bundle: CheckpointBundle,
    data: &[HazeSample],
    extractor: &PerceptualExtractor,
    teacher: Option<&Teacher>,
    hooks: RunHooks<'_>,
) -> Result<CheckpointBundle> {
    let RunHooks {
        mut on_step,
        mut on_epoch,
        stop_after_epoch,
    } = hooks;
    let cfg = bundle.train.clone();
    cfg.validate()?;
    let model = bundle.model()?;
    match (cfg.mode, teacher) {
        (TrainMode::FinetuneItkt, None) => {
            return Err(Error::Config(
                "distillation finetuning needs a teacher".into(),
            ))
        }
        (TrainMode::FinetuneItkt, Some(t)) => {
            if t.model.config().scale_channels[0] != model.config().scale_channels[0]
                || t.model.config().tap_columns() != model.config().tap_columns()
                || t.model.config().variant == crate::network::VariantSpec::Ednet
                || model.config().variant == crate::network::VariantSpec::Ednet
            {
                return Err(Error::Config(
                    "teacher and student taps do not line up".into(),
                ));
            }
        }
        (_, Some(_)) => return Err(Error::Config(format!("mode {} takes no teacher", cfg.mode))),
        _ => {}
    }
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let weights = match cfg.mode {
        TrainMode::FinetuneItkt => cfg.loss_weights,
        _ => losses::LossWeights {
            lambda_kt: 0.0,
            ..cfg.loss_weights
        },
    };
    let steps = cfg.steps_for(data.len());
    let last_epoch = stop_after_epoch.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    while bundle.state.epoch < last_epoch {
        let epoch = bundle.state.epoch;
        let lr = lr_schedule(epoch, &cfg);
        let mut rng = Rng::restore(&bundle.state.rng);
        let good = bundle.clone();
        let mut sum = 0.0;
        for _ in 0..steps {
            let (hazy, clear) = sample_patches(data, cfg.patch, cfg.batch_size, &mut rng)?;
            let teacher_taps = match (cfg.mode, teacher) {
                (TrainMode::FinetuneItkt, Some(t)) if weights.lambda_kt > 0.0 => {
                    Some(t.taps(&hazy)?)
                }
                _ => None,
            };
            let mut g = Graph::new(GradMode::Train);
            let x = g.constant(hazy);
            let y = g.constant(clear);
            let out = model.forward_graph(&mut g, &bundle.params, x)?;
            let taps = teacher_taps.as_deref().map(|t| (out.taps.as_slice(), t));
            let terms = losses::total(&mut g, &weights, extractor, out.output, y, taps)?;
            let value = |v: Option<crate::autograd::Var>| v.map_or(0.0, |v| g.value(v).to_scalar());
            let record = StepRecord {
                step: bundle.state.step + 1,
                epoch,
                lr,
                total: g.value(terms.total).to_scalar(),
                fidelity: g.value(terms.fidelity).to_scalar(),
                perceptual: value(terms.perceptual),
                itkt: value(terms.itkt),
            };
            if !record.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: record.step,
                    epoch,
                    detail: format!("{record:?}"),
                    last_good: Box::new(good),
                });
            }
            let grads = g.backward(terms.total)?;
            let param_grads = g.param_grads(&grads);
            drop(g);
            bundle.adam.step(&mut bundle.params, &param_grads, lr, &cfg);
            if !bundle.params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    step: record.step,
                    epoch,
                    detail: "parameters became non-finite after the update".into(),
                    last_good: Box::new(good),
                });
            }
            bundle.state.step += 1;
            bundle.state.lr = lr;
            sum += record.total;
            if let Some(f) = on_step.as_mut() {
                f(&record)?;
            }
        }
        bundle.state.epoch_losses.push(sum / steps as f64);
        bundle.state.epoch += 1;
        bundle.state.lr = lr_schedule(bundle.state.epoch, &cfg);
        bundle.state.rng = rng.state();
        if let Some(f) = on_epoch.as_mut() {
            f(&bundle)?;
        }
    }
    Ok(bundle)
}

fn expect_mode(cfg: &TrainConfig, mode: TrainMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::Config(format!(
            "expected a {mode} configuration, got {}",
            cfg.mode
        )));
    }
    Ok(())
}

/// Trains `params` from scratch on synthetic pairs.
pub fn pretrain(
    model: &Model,
    params: ParameterStore,
    data: &[HazeSample],
    cfg: &TrainConfig,
    extractor: &PerceptualExtractor,
    hooks: RunHooks<'_>,
) -> Result<CheckpointBundle> {
    expect_mode(cfg, TrainMode::Pretrain)?;
    model.check_store(&params)?;
    let bundle = CheckpointBundle::fresh(model.config().clone(), cfg.clone(), params);
    run(bundle, data, extractor, None, hooks)
}

/// Finetunes a copy of the teacher on translated pairs while pulling its taps
/// towards the teacher's.
pub fn finetune_itkt(
    teacher: &Teacher,
    data: &[HazeSample],
    cfg: &TrainConfig,
    extractor: &PerceptualExtractor,
    hooks: RunHooks<'_>,
) -> Result<CheckpointBundle> {
    expect_mode(cfg, TrainMode::FinetuneItkt)?;
    let bundle = CheckpointBundle::fresh(
        teacher.model.config().clone(),
        cfg.clone(),
        teacher.params.clone(),
    );
    run(bundle, data, extractor, Some(teacher), hooks)
}

/// Finetunes pretrained weights on translated pairs, no teacher.
pub fn finetune_plain(
    model: &Model,
    pretrained: ParameterStore,
    data: &[HazeSample],
    cfg: &TrainConfig,
    extractor: &PerceptualExtractor,
    hooks: RunHooks<'_>,
) -> Result<CheckpointBundle> {
    expect_mode(cfg, TrainMode::FinetunePlain)?;
    model.check_store(&pretrained)?;
    let bundle = CheckpointBundle::fresh(model.config().clone(), cfg.clone(), pretrained);
    run(bundle, data, extractor, None, hooks)
}

/// Dehazes every sample at full size and scores it against its clear image.
pub fn evaluate(
    model: &Model,
    params: &ParameterStore,
    data: &[HazeSample],
) -> Result<MetricReport> {
    let preds = data
        .iter()
        .map(|s| Ok(model.forward(params, &s.hazy, false)?.0))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = data.iter().map(|s| s.id.to_string()).collect();
    MetricReport::evaluate(
        data.iter()
            .zip(&preds)
            .zip(&ids)
            .map(|((s, p), id)| (id.as_str(), p, &s.clear)),
    )
}

/// Scores the hazy inputs themselves, the "no dehazing" baseline.
pub fn evaluate_hazy(data: &[HazeSample]) -> Result<MetricReport> {
    let ids: Vec<String> = data.iter().map(|s| s.id.to_string()).collect();
    MetricReport::evaluate(
        data.iter()
            .zip(&ids)
            .map(|(s, id)| (id.as_str(), &s.hazy, &s.clear)),
    )
}
