//! Minibatch training with Nesterov momentum, plus a synthetic task whose
//! labels can only be read off another agent's features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{clip_loss_value, loss_and_grad, predict, ClassifierShape, ClassifierWeights, ClipSample, ForwardOptions};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::interaction::FocalLossSpec;
use crate::kernel::Dropout;
use crate::tensor::FeatureTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout_rate: f64,
    pub focal: FocalLossSpec,
    pub interaction: bool,
}

impl From<&PipelineConfig> for TrainConfig {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            epochs: c.epochs,
            batch_size: c.batch_size,
            seed: c.train_seed,
            dropout_rate: c.dropout_rate,
            focal: FocalLossSpec {
                gamma: c.focal_gamma,
                alpha: c.focal_alpha,
            },
            interaction: true,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::from(&PipelineConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-clip loss over the training set before any update.
    pub initial_loss: f64,
    /// Mean per-clip loss after each epoch, measured without dropout.
    pub epoch_losses: Vec<f64>,
}

fn mean_loss(w: &ClassifierWeights, data: &[ClipSample], cfg: &TrainConfig) -> Result<f64> {
    let opts = ForwardOptions {
        dropout: Dropout::disabled(),
        seed: 0,
        interaction: cfg.interaction,
    };
    let mut total = 0.0;
    for s in data {
        total += clip_loss_value(w, s, &cfg.focal, &opts)?;
    }
    Ok(total / data.len() as f64)
}

/// Shapes are checked before the first update, so a value error later on
/// means the weights blew up.
fn overflow(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidValue(detail) => Error::Diverged {
            epoch,
            loss: f64::NAN,
            detail,
        },
        other => other,
    }
}

/// SGD with Nesterov momentum and L2 weight decay on the mean clip loss.
pub fn train_toy(
    init: ClassifierWeights,
    data: &[ClipSample],
    cfg: &TrainConfig,
) -> Result<(ClassifierWeights, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let mut w = init;
    let mut params = w.to_flat();
    let mut velocity = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let initial_loss = mean_loss(&w, data, cfg)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let opts = ForwardOptions {
                    dropout: Dropout::from_rate(cfg.dropout_rate),
                    seed: rng.gen(),
                    interaction: cfg.interaction,
                };
                let (loss, g) = loss_and_grad(&w, &data[i], &cfg.focal, &opts).map_err(overflow(epoch))?;
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g.to_flat()) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_loss,
                    detail: format!(
                        "batch of {} clips, lr {}, max |w| {:.3e}",
                        batch.len(),
                        cfg.learning_rate,
                        params.iter().fold(0.0f64, |m, p| m.max(p.abs()))
                    ),
                });
            }
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                let g = g * scale + cfg.weight_decay * *p;
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * (g + cfg.momentum * *v);
            }
            w.set_flat(&params)?;
        }
        let loss = mean_loss(&w, data, cfg).map_err(overflow(epoch))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss,
                detail: "non-finite loss over the training set".into(),
            });
        }
        epoch_losses.push(loss);
    }
    Ok((
        w,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

/// Fraction of agents whose top-scoring class is their (single) target class.
pub fn accuracy(w: &ClassifierWeights, data: &[ClipSample], opts: &ForwardOptions) -> Result<f64> {
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, x)| if *x > b.1 { (i, *x) } else { b })
            .0
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in data {
        for (scores, target) in predict(w, s, opts)?.iter().zip(&s.targets) {
            hits += usize::from(argmax(scores) == argmax(target));
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(hits as f64 / total as f64)
}

pub const TOY_SIZE: usize = 3;

/// Classifier architecture matching [`toy_interaction_dataset`].
pub fn toy_shape() -> ClassifierShape {
    ClassifierShape {
        roi_channels: 4,
        context_channels: 1,
        channels: 4,
        attention_dim: 4,
        depth: 1,
        n_actions: 2,
        out_h: TOY_SIZE,
        out_w: TOY_SIZE,
    }
}

/// Two agents per clip. Channel 0 marks the agent's slot (+1 or -1),
/// channel 1 carries a signed signal, channels 2-3 are noise. Each agent's
/// label is the sign of the *other* agent's signal (class 0 positive,
/// class 1 negative), so its own map says nothing about its label.
pub fn toy_interaction_dataset(n: usize, seed: u64) -> Vec<ClipSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [1, 4, TOY_SIZE, TOY_SIZE];
    (0..n)
        .map(|_| {
            let signals: [f64; 2] = std::array::from_fn(|_| {
                let mag = rng.gen_range(0.5..1.5);
                if rng.gen::<bool>() { mag } else { -mag }
            });
            let rois = (0..2)
                .map(|a| {
                    let role = if a == 0 { 1.0 } else { -1.0 };
                    FeatureTensor::from_fn(dims, |_, c, _, _| match c {
                        0 => role,
                        1 => signals[a] + rng.gen_range(-0.1..0.1),
                        _ => rng.gen_range(-0.5..0.5),
                    })
                })
                .collect();
            let context = FeatureTensor::from_fn([1, 1, TOY_SIZE, TOY_SIZE], |_, _, _, _| rng.gen_range(-0.5..0.5));
            let targets = (0..2)
                .map(|a| {
                    if signals[1 - a] > 0.0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }
                })
                .collect();
            ClipSample { rois, context, targets }
        })
        .collect()
}
