//! Mini-batch training loop.
//!
//! Each sequence gets its own graph, so sequences of different length need
//! no padding. Per-sequence gradients are computed through [`exec::map`] and
//! summed in batch order, which keeps parallel and sequential runs
//! bitwise identical.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assign::{assign_targets, AssignedTargets};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::graph::{Gradients, Graph};
use crate::loss::{total_loss, FocalParams, LossParts};
use crate::model::Model;
use crate::optim::{clip_grad_norm, cosine_schedule, AdamW};

/// Offset mixed into the seed of the shuffling stream so it differs from the
/// initialization stream.
const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Mean per-sequence loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn focal_params(cfg: &TrainConfig) -> FocalParams {
    FocalParams {
        alpha: cfg.focal_alpha,
        gamma: cfg.focal_gamma,
    }
}

/// Loss and gradients of one sequence at the model's current parameters.
pub fn sequence_gradients(
    model: &Model,
    features: &crate::tensor::Tensor,
    targets: &AssignedTargets,
) -> Result<(LossParts, Gradients)> {
    let mut g = Graph::new();
    let lv = model.forward(&mut g, features)?;
    let (loss, parts) = total_loss(&mut g, &lv, targets, focal_params(&model.cfg), None)?;
    let grads = g.backward(loss)?;
    Ok((parts, grads))
}

/// Computes the averaged gradient of a batch into `model.store` and returns
/// the mean loss.
pub fn batch_gradient(
    model: &mut Model,
    data: &Dataset,
    targets: &[AssignedTargets],
    batch: &[usize],
    exec: Execution,
) -> Result<f64> {
    let results = {
        let m: &Model = model;
        exec::map(exec, batch, |&i| {
            sequence_gradients(m, &data.samples[i].features, &targets[i])
        })
    };
    model.store.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for r in results {
        let (parts, grads) = r?;
        grads.accumulate_into(&mut model.store, scale);
        loss += parts.total * scale;
    }
    Ok(loss)
}

/// Trains a fresh model. `on_epoch` sees the epoch index and its mean loss.
pub fn train_with(
    data: &Dataset,
    cfg: &TrainConfig,
    exec: Execution,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if data.samples.is_empty() {
        return Err(Error::Config("training needs at least one sequence".into()));
    }
    cfg.validate()?;
    if data.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the config expects {}",
            data.num_classes, cfg.num_classes
        )));
    }
    let mut model = Model::new(cfg)?;
    let targets = data
        .samples
        .iter()
        .map(|s| {
            assign_targets(
                &s.segments,
                s.features.rows(),
                cfg.levels,
                cfg.center_radius,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    let steps = order.len().div_ceil(cfg.batch_size);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = cosine_schedule(epoch as f64 + step as f64 / steps as f64, cfg);
            let loss = batch_gradient(&mut model, data, &targets, batch, exec)?;
            clip_grad_norm(&mut model.store, cfg.clip_grad_norm);
            opt.step(&mut model.store, lr);
            total += loss * batch.len() as f64;
        }
        let mean = total / order.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric("training loss"));
        }
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}

pub fn train(data: &Dataset, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    train_with(data, cfg, exec, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn tiny_data(videos: usize, seed: u64) -> Dataset {
        generate_synthetic(
            &SynthConfig {
                num_videos: videos,
                len: 64,
                dim: 6,
                num_classes: 2,
                density: 1.5,
                noise_std: 0.5,
                seed,
            },
            Execution::Sequential,
        )
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            bins: 4,
            levels: 3,
            dim: 8,
            input_dim: 6,
            num_classes: 2,
            gn_groups: 2,
            ffn_ratio: 2,
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 2,
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_empty_and_mismatched_data() {
        let empty = Dataset {
            samples: Vec::new(),
            num_classes: 2,
        };
        assert!(matches!(
            train(&empty, &tiny_cfg(), Execution::Sequential),
            Err(Error::Config(_))
        ));
        let cfg = TrainConfig {
            num_classes: 3,
            ..tiny_cfg()
        };
        assert!(matches!(
            train(&tiny_data(2, 0), &cfg, Execution::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let data = tiny_data(5, 1);
        let a = train(&data, &tiny_cfg(), Execution::Sequential).unwrap();
        let b = train(&data, &tiny_cfg(), Execution::Sequential).unwrap();
        let c = train(&data, &tiny_cfg(), Execution::Parallel).unwrap();
        let bytes = a.model.to_checkpoint().to_bytes();
        assert_eq!(bytes, b.model.to_checkpoint().to_bytes());
        assert_eq!(bytes, c.model.to_checkpoint().to_bytes());
        assert_eq!(a.epoch_losses, c.epoch_losses);
        let other = TrainConfig {
            seed: 9,
            ..tiny_cfg()
        };
        let d = train(&data, &other, Execution::Sequential).unwrap();
        assert_ne!(bytes, d.model.to_checkpoint().to_bytes());
    }

    #[test]
    fn single_sequence_overfits() {
        let data = tiny_data(1, 3);
        assert!(!data.samples[0].segments.is_empty());
        let cfg = TrainConfig {
            epochs: 200,
            warmup_epochs: 5,
            batch_size: 1,
            lr: 5e-3,
            weight_decay: 0.0,
            ..tiny_cfg()
        };
        let mut seen = 0;
        let out = train_with(&data, &cfg, Execution::Sequential, |e, _| {
            assert_eq!(e, seen);
            seen += 1;
        })
        .unwrap();
        assert_eq!(out.epoch_losses.len(), 200);
        let last = *out.epoch_losses.last().unwrap();
        assert!(
            last < 0.05,
            "final loss {last}, first {}",
            out.epoch_losses[0]
        );
    }
}
