//! Minibatch SGD on softmax cross-entropy.

use std::fmt::Write as _;

use serde::Serialize;

use super::{argmax, MiniModel, SynthDataset, TrainConfig, TRAIN_STREAM};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    /// Mean batch loss of every step, before that step's update.
    pub losses: Vec<f64>,
    /// Sample-weighted mean of `losses`.
    pub mean_loss: f64,
    /// Fraction of samples classified correctly by the forward passes of the
    /// epoch (stochastic depth active).
    pub accuracy: f64,
}

/// One pass over `data` in an order shuffled by `rng`.
pub fn train_epoch(
    model: &mut MiniModel,
    data: &SynthDataset,
    lr: f64,
    batch: usize,
    rng: &mut Rng,
) -> Result<EpochStats> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("lr must be finite and non-negative, got {lr}")));
    }
    if batch == 0 || data.is_empty() {
        return Err(Error::Config("need a positive batch size and a non-empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let mut losses = Vec::new();
    let mut weighted = 0.0;
    let mut correct = 0usize;
    for (step, idx) in order.chunks(batch).enumerate() {
        let mut terms = Vec::with_capacity(idx.len());
        for &i in idx {
            let (x, label) = &data.samples[i];
            let (logits, _) = model.forward_traced(x, Some(&mut *rng))?;
            if argmax(logits.data()) == *label {
                correct += 1;
            }
            terms.push(logits.cross_entropy(*label)?);
        }
        let loss = Tensor::add_n(&terms)?.scale(1.0 / idx.len() as f64);
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss {value} at step {step}, samples {idx:?}, after {} finite steps",
                losses.len()
            )));
        }
        loss.backward()?;
        for (_, p) in model.params_mut() {
            // Unused in this step (e.g. lambda_o of a stage's first block).
            let Some(g) = p.grad() else { continue };
            let next: Vec<f64> = p.data().iter().zip(&g).map(|(w, g)| w - lr * g).collect();
            *p = Tensor::param(next, p.shape(), p.dtype())?;
        }
        weighted += value * idx.len() as f64;
        losses.push(value);
    }
    Ok(EpochStats {
        losses,
        mean_loss: weighted / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Accuracy without stochastic depth.
pub fn evaluate(model: &MiniModel, data: &SynthDataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, label) in &data.samples {
        if model.predict(x)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Mean cross-entropy without stochastic depth.
pub fn evaluate_loss(model: &MiniModel, data: &SynthDataset) -> Result<f64> {
    no_grad(|| {
        let mut total = 0.0;
        for (x, label) in &data.samples {
            total += model.forward(x)?.cross_entropy(*label)?.item()?;
        }
        Ok(total / data.len().max(1) as f64)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRun {
    pub epochs: Vec<EpochStats>,
    /// Accuracy after each epoch, stochastic depth off.
    pub eval_accuracy: Vec<f64>,
}

impl TrainRun {
    pub fn final_accuracy(&self) -> f64 {
        self.eval_accuracy.last().copied().unwrap_or(0.0)
    }

    /// `epoch,step,loss` rows, one per optimizer step.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for (e, ep) in self.epochs.iter().enumerate() {
            for (i, l) in ep.losses.iter().enumerate() {
                let _ = writeln!(s, "{},{},{:?}", e + 1, i, l);
            }
        }
        s
    }
}

/// `cfg.epochs` epochs with the training stream seeded by `cfg.seed`.
pub fn train(model: &mut MiniModel, data: &SynthDataset, cfg: &TrainConfig) -> Result<TrainRun> {
    let mut rng = Rng::new(cfg.seed ^ TRAIN_STREAM);
    let mut run = TrainRun {
        epochs: Vec::with_capacity(cfg.epochs),
        eval_accuracy: Vec::with_capacity(cfg.epochs),
    };
    for _ in 0..cfg.epochs {
        run.epochs.push(train_epoch(model, data, cfg.lr, cfg.batch, &mut rng)?);
        run.eval_accuracy.push(evaluate(model, data)?);
    }
    Ok(run)
}

/// The dataset a config trains on.
pub fn config_dataset(cfg: &TrainConfig) -> Result<SynthDataset> {
    super::synth_dataset(
        cfg.classes,
        cfg.per_class,
        [cfg.image, cfg.image, cfg.in_channels],
        cfg.separation,
        cfg.seed ^ super::DATA_STREAM,
        cfg.dtype,
    )
}
