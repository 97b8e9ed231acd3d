//! Plain gradient descent on a single scene.

use std::time::Instant;

use log::info;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::rotated_iou_bev;
use crate::head::{build_targets, decode, detection_loss, Box3D, Detection};
use crate::model::PillarMamba;
use crate::pillar::PointCloud;
use crate::tensor::{Graph, ParamStore, Real};

/// One recorded step; `grad_norm` is `None` after the final update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub heatmap: f64,
    pub regression: f64,
    pub grad_norm: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Real> {
    pub store: ParamStore<T>,
    /// Loss before update `i`; the last entry is evaluated after the final
    /// update, so there are `steps + 1` entries.
    pub losses: Vec<f64>,
    /// Detections decoded from the trained model, best first.
    pub detections: Vec<Detection>,
    /// BEV IoU of the top-scoring detection with its best-matching GT.
    pub top_iou: Option<f64>,
    pub seconds: f64,
}

impl<T: Real> TrainOutcome<T> {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

/// Step size at update `step` of `steps`.
pub fn learning_rate(train: &TrainConfig, step: usize, steps: usize) -> f64 {
    let t = if steps > 1 { step as f64 / (steps - 1) as f64 } else { 0.0 };
    let floor = train.final_lr_fraction;
    train.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Runs `steps` updates `θ ← θ − lr_t·ĝ`, where `ĝ` is the gradient rescaled
/// to at most the configured global norm and `lr_t` is [`learning_rate`]. `on_step(step, loss)` sees every
/// recorded step.
pub fn train_toy<T: Real>(
    model: &PillarMamba,
    mut store: ParamStore<T>,
    cloud: &PointCloud,
    boxes: &[Box3D],
    train: &TrainConfig,
    steps: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    let start = Instant::now();
    let feats = model.prepare(cloud)?;
    let targets = build_targets(boxes, &model.grid, &model.cfg.head)?;
    if targets.num_pos == 0 {
        return Err(Error::contract("train_toy", "scene has no box centered inside the grid"));
    }
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::with_params(&store);
        let raw = model.forward(&mut g, &feats)?;
        let loss = detection_loss(&mut g, raw, &targets, &model.cfg.head)?;
        let value = g.value(loss.total).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::contract("train_toy", format!("loss became {value} at step {step}")));
        }
        losses.push(value);
        let mut rec = StepRecord {
            step,
            loss: value,
            heatmap: g.value(loss.heatmap).data()[0].as_f64(),
            regression: g.value(loss.regression).data()[0].as_f64(),
            grad_norm: None,
        };
        if step == steps {
            on_step(&rec);
            break;
        }
        let grads = g.backward(loss.total)?;
        store.zero_grad();
        store.accumulate(&grads);
        let norm = store.grad_norm().as_f64();
        let scale = match train.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        rec.grad_norm = Some(norm);
        on_step(&rec);
        if train.log_every > 0 && step % train.log_every == 0 {
            info!(
                "step {step}: loss {value:.6} (heatmap {:.6}, regression {:.6}), grad norm {norm:.4e}",
                rec.heatmap, rec.regression
            );
        }
        let step_size = T::c(learning_rate(train, step, steps) * scale);
        for (_, p) in store.iter_mut() {
            let grad = p.grad.data().to_vec();
            for (v, gv) in p.value.data_mut().iter_mut().zip(grad) {
                *v -= step_size * gv;
            }
        }
    }
    let mut g = Graph::with_params(&store);
    let raw = model.forward(&mut g, &feats)?;
    let detections = decode(g.value(raw), &model.grid, model.cfg.head.top_k, model.cfg.head.score_threshold)?;
    let top_iou = detections.first().map(|d| {
        boxes
            .iter()
            .map(|b| rotated_iou_bev(&d.bbox, b))
            .fold(0.0, f64::max)
    });
    Ok(TrainOutcome {
        store,
        losses,
        detections,
        top_iou,
        seconds: start.elapsed().as_secs_f64(),
    })
}
