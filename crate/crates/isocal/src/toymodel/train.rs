//! Training loop composing the task loss with a calibration objective.
//!
//! Per step: mean cross-entropy over the batch plus the selected penalty on
//! the output matrix (plus lambda_f times the flow NLL of the contextual
//! vectors in joint mode), one plain gradient-descent update. Per epoch:
//! held-out accuracy and perplexity, I1/I2 of the output matrix, wall-clock
//! seconds. Everything is a deterministic function of (seed, config, data).

use std::time::Instant;

use crate::calibration::{cosreg_grad, cosreg_loss, spectrum_grad_w, spectrum_loss, CosRegConfig, SpectrumConfig};
use crate::error::{Error, Result};
use crate::flow::{FlowGrads, FlowModel, DEFAULT_LAYERS, DEFAULT_S_MAX};
use crate::isotropy::isotropy_report;
use crate::numkit::{derive_seed, svd, EmbeddingMatrix, SeededRng};
use crate::par;
use crate::toymodel::data::{Batch, Dataset};
use crate::toymodel::model::{item_nll, ToyConfig, ToyGrads, ToyModel};

/// Substream tags so all methods on one seed share data and init streams.
const TAG_MODEL: u64 = 1;
const TAG_FLOW: u64 = 2;

pub const EVAL_FRACTION: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct FlowJointConfig {
    pub lambda_f: f64,
    pub layers: usize,
    pub s_max: f64,
}

impl Default for FlowJointConfig {
    fn default() -> Self {
        FlowJointConfig {
            lambda_f: 1.0,
            layers: DEFAULT_LAYERS,
            s_max: DEFAULT_S_MAX,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Calibration {
    None,
    CosReg(CosRegConfig),
    Spectrum(SpectrumConfig),
    FlowJoint(FlowJointConfig),
}

#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub task_loss: f64,
    pub reg_loss: f64,
    pub spectrum_skipped: bool,
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub task_loss: f64,
    pub reg_loss: f64,
    pub accuracy: f64,
    pub perplexity: f64,
    pub i1: f64,
    pub i2: f64,
    pub seconds: f64,
    pub spectrum_skips: usize,
}

pub struct TrainingRun {
    pub seed: u64,
    pub config: ToyConfig,
    pub records: Vec<EpochRecord>,
    pub model: ToyModel,
    pub flow: Option<FlowModel>,
}

#[derive(Clone, Debug)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub perplexity: f64,
    /// True when the model predicted one single class for every example.
    pub constant_prediction: bool,
}

/// Argmax with ties broken toward the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

/// Held-out accuracy and perplexity (= exp of the mean NLL).
pub fn evaluate(model: &ToyModel, data: &Dataset) -> EvalMetrics {
    assert!(!data.is_empty());
    let per: Vec<(usize, f64, bool)> = par::map_range(data.len(), |i| {
        let (ctx, target) = data.example(i);
        let fwd = model.forward_item(ctx);
        let pred = argmax(&fwd.logits);
        (pred, item_nll(&fwd.logits, target), pred == target)
    });
    let n = data.len() as f64;
    let correct = per.iter().filter(|(_, _, ok)| *ok).count() as f64;
    let mean_nll = per.iter().map(|(_, nll, _)| nll).sum::<f64>() / n;
    let first = per[0].0;
    EvalMetrics {
        accuracy: correct / n,
        perplexity: mean_nll.exp(),
        constant_prediction: per.iter().all(|(p, _, _)| *p == first),
    }
}

/// Contextual vectors h of every example, as an embedding matrix.
pub fn contextual_matrix(model: &ToyModel, data: &Dataset) -> Result<EmbeddingMatrix> {
    let rows: Vec<Vec<f64>> = par::map_range(data.len(), |i| {
        let (ctx, _) = data.example(i);
        model.forward_item(ctx).h
    });
    EmbeddingMatrix::from_rows(&rows)
}

fn output_embedding(model: &ToyModel) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(model.output_matrix().clone())
}

/// Task gradients averaged over the batch; in joint mode also the flow
/// gradients and the flow NLL of the batch's contextual vectors.
fn batch_grads(
    model: &ToyModel,
    flow: Option<(&FlowModel, f64)>,
    batch: &Batch,
) -> (f64, f64, ToyGrads, Option<FlowGrads>) {
    let b = batch.len();
    debug_assert!(b > 0);
    let per: Vec<(f64, ToyGrads, Option<(f64, FlowGrads)>)> = par::map_range(b, |i| {
        let ctx = &batch.contexts[i];
        let target = batch.targets[i];
        let fwd = model.forward_item(ctx);
        match flow {
            Some((fm, lambda_f)) => {
                let (fnll, fgrads, gh) = fm.item_nll_grad(&fwd.h);
                let extra: Vec<f64> = gh.iter().map(|g| lambda_f * g).collect();
                let (nll, grads) = model.backward_item(ctx, target, &fwd, Some(&extra));
                (nll, grads, Some((fnll, fgrads)))
            }
            None => {
                let (nll, grads) = model.backward_item(ctx, target, &fwd, None);
                (nll, grads, None)
            }
        }
    });
    let scale = 1.0 / b as f64;
    let mut task_loss = 0.0;
    let mut grads = ToyGrads::zeros(model.vocab(), model.dim());
    let mut flow_nll = 0.0;
    let mut flow_grads = flow.map(|(fm, _)| (fm, FlowGrads::zeros_like(fm)));
    for (nll, g, f) in &per {
        task_loss += nll * scale;
        grads.add_scaled(g, scale);
        if let (Some((fnll, fg)), Some((_, acc))) = (f, flow_grads.as_mut()) {
            flow_nll += fnll * scale;
            acc.add_scaled(fg, scale);
        }
    }
    let flow_grads = flow_grads.map(|(_, g)| g);
    (task_loss, flow_nll, grads, flow_grads)
}

/// One gradient step. A degenerate spectrum aborts only the regularizer part
/// of the step (reported via `spectrum_skipped`); the task update proceeds.
pub fn train_step(
    model: &mut ToyModel,
    flow: Option<&mut FlowModel>,
    batch: &Batch,
    calib: &Calibration,
    step_size: f64,
) -> Result<StepMetrics> {
    let joint = match (&calib, &flow) {
        (Calibration::FlowJoint(cfg), Some(fm)) => Some(((**fm).clone(), cfg.lambda_f)),
        _ => None,
    };
    let (task_loss, flow_nll, mut grads, flow_grads) =
        batch_grads(model, joint.as_ref().map(|(fm, l)| (fm, *l)), batch);
    if !task_loss.is_finite() {
        return Err(Error::Diverged {
            context: "train step".into(),
            last_loss: f64::NAN,
        });
    }

    let mut reg_loss = 0.0;
    let mut spectrum_skipped = false;
    match calib {
        Calibration::None => {}
        Calibration::CosReg(cfg) => {
            let w = output_embedding(model)?;
            reg_loss = cosreg_loss(&w, cfg)?;
            let g = cosreg_grad(&w, cfg)?;
            if model.tied() {
                grads.emb.add_scaled(&g, 1.0);
            } else {
                grads.out.add_scaled(&g, 1.0);
            }
        }
        Calibration::Spectrum(cfg) => {
            let w = output_embedding(model)?;
            reg_loss = spectrum_loss(&svd(&w)?, cfg);
            match spectrum_grad_w(&w, cfg) {
                Ok(g) => {
                    if model.tied() {
                        grads.emb.add_scaled(&g, 1.0);
                    } else {
                        grads.out.add_scaled(&g, 1.0);
                    }
                }
                Err(Error::DegenerateSpectrum { .. }) => spectrum_skipped = true,
                Err(e) => return Err(e),
            }
        }
        Calibration::FlowJoint(cfg) => {
            reg_loss = cfg.lambda_f * flow_nll;
        }
    }

    model.apply_update(&grads, step_size);
    if let (Some(fm), Some(fg), Calibration::FlowJoint(cfg)) = (flow, flow_grads.as_ref(), calib) {
        let mut scaled = FlowGrads::zeros_like(fm);
        scaled.add_scaled(fg, cfg.lambda_f);
        fm.apply_update(&scaled, step_size);
    }
    Ok(StepMetrics {
        task_loss,
        reg_loss,
        spectrum_skipped,
    })
}

/// Total loss at the current parameters, without updating. Used by the
/// finite-difference gradient checks.
pub fn batch_loss(
    model: &ToyModel,
    flow: Option<&FlowModel>,
    batch: &Batch,
    calib: &Calibration,
) -> Result<f64> {
    let (_, logits) = model.forward(&batch.contexts);
    let mut total = super::model::nll_loss(&logits, &batch.targets);
    match calib {
        Calibration::None => {}
        Calibration::CosReg(cfg) => {
            total += cosreg_loss(&output_embedding(model)?, cfg)?;
        }
        Calibration::Spectrum(cfg) => {
            total += spectrum_loss(&svd(&output_embedding(model)?)?, cfg);
        }
        Calibration::FlowJoint(cfg) => {
            let fm = flow.ok_or_else(|| {
                Error::InvalidArg("joint calibration needs a flow model".into())
            })?;
            let (h, _) = model.forward(&batch.contexts);
            total += cfg.lambda_f * fm.nll(&h);
        }
    }
    Ok(total)
}

/// Full training protocol: epochs of shuffled minibatches, per-epoch
/// held-out evaluation and isotropy of the output matrix.
pub fn train(cfg: &ToyConfig, calib: &Calibration, dataset: &Dataset) -> Result<TrainingRun> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArg("dataset is empty".into()));
    }
    if dataset.vocab() != cfg.vocab || dataset.context_len() != cfg.context_len {
        return Err(Error::InvalidArg(
            "dataset shape does not match the model config".into(),
        ));
    }
    let mut rng = SeededRng::new(derive_seed(cfg.seed, TAG_MODEL));
    let mut model = ToyModel::init(cfg, &mut rng);
    let mut flow = match calib {
        Calibration::FlowJoint(fcfg) => {
            let mut frng = SeededRng::new(derive_seed(cfg.seed, TAG_FLOW));
            Some(FlowModel::seeded(cfg.dim, fcfg.layers, fcfg.s_max, &mut frng))
        }
        _ => None,
    };

    let (train_set, eval_set) = dataset.split(EVAL_FRACTION)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut task_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut steps = 0usize;
        let mut skips = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk);
            let metrics = train_step(&mut model, flow.as_mut(), &batch, calib, cfg.step_size)?;
            if !metrics.task_loss.is_finite() {
                return Err(Error::Diverged {
                    context: format!("epoch {epoch}, step {steps}"),
                    last_loss: task_sum / steps.max(1) as f64,
                });
            }
            task_sum += metrics.task_loss;
            reg_sum += metrics.reg_loss;
            if metrics.spectrum_skipped {
                skips += 1;
            }
            steps += 1;
        }
        if !model.is_finite() {
            return Err(Error::Diverged {
                context: format!("epoch {epoch}: non-finite parameters"),
                last_loss: task_sum / steps as f64,
            });
        }
        let eval = evaluate(&model, &eval_set);
        let iso = isotropy_report(&output_embedding(&model)?)?;
        records.push(EpochRecord {
            task_loss: task_sum / steps as f64,
            reg_loss: reg_sum / steps as f64,
            accuracy: eval.accuracy,
            perplexity: eval.perplexity,
            i1: iso.i1,
            i2: iso.i2,
            seconds: started.elapsed().as_secs_f64(),
            spectrum_skips: skips,
        });
    }

    Ok(TrainingRun {
        seed: cfg.seed,
        config: cfg.clone(),
        records,
        model,
        flow,
    })
}

/// Mean pairwise cosine similarity over ordered pairs of distinct rows.
pub fn mean_pairwise_cosine(w: &EmbeddingMatrix) -> Result<f64> {
    let loss = cosreg_loss(w, &CosRegConfig { lambda_c: 1.0 })?;
    let n = w.rows() as f64;
    // cosreg with lambda 1 is sum/(N^2); rescale to the mean over N(N-1) pairs.
    Ok(loss * n * n / (n * (n - 1.0)))
}
