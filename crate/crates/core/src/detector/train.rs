use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::Adam;
use super::{forward, loss_with_gradient, DetectorConfig, DetectorWeights, LossBreakdown};
use crate::error::{Error, Result};
use crate::scene::{Dataset, MultiviewFrame};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: Option<LossBreakdown>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

fn validation_loss(weights: &DetectorWeights, frames: &[MultiviewFrame]) -> Result<Option<LossBreakdown>> {
    let mut items = Vec::with_capacity(frames.len());
    for f in frames {
        let out = forward(weights, &f.images)?;
        items.push(loss_with_gradient(&out, &f.truth, weights.config.omega, weights.config.loss_form)?.0);
    }
    Ok(LossBreakdown::mean(&items))
}

/// Trains a detector on the training split with Adam over shuffled mini-batches.
/// Validation losses are measured on the test split after every epoch.
pub fn train(dataset: &Dataset, config: &DetectorConfig) -> Result<(DetectorWeights, TrainingLog)> {
    let frames = dataset.train();
    if frames.is_empty() {
        return Err(Error::ConfigInvalid("training set is empty".into()));
    }
    let [h, w] = dataset.config.image_size;
    let mut weights = DetectorWeights::init(config, &dataset.calibs, dataset.grid(), [h, w])?;
    let n = weights.params.len();
    let mut adam = Adam::new(n, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7A41);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut log = TrainingLog::default();
    let mut grads = vec![0.0; n];

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        // Half-cosine learning-rate schedule down to 10% of the base rate.
        let progress = (epoch - 1) as f64 / config.epochs.max(2).saturating_sub(1) as f64;
        adam.lr = config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut epoch_losses = Vec::with_capacity(frames.len());
        for batch in order.chunks(config.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let f = &frames[i];
                let mut breakdown = None;
                weights.param_gradient(&f.images, &mut grads, |out| {
                    let (b, g) = loss_with_gradient(out, &f.truth, config.omega, config.loss_form)?;
                    let total = b.total;
                    breakdown = Some(b);
                    Ok((total, g))
                })?;
                let b = breakdown.expect("objective evaluated");
                if !b.total.is_finite() {
                    return Err(Error::Diverged(format!("non-finite training loss at epoch {epoch}")));
                }
                epoch_losses.push(b);
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= inv);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite parameter gradient at epoch {epoch}")));
            }
            adam.step(&mut weights.params, &grads);
        }
        let train = LossBreakdown::mean(&epoch_losses).expect("non-empty epoch");
        let validation = validation_loss(&weights, dataset.test())?;
        log::info!(
            "{} epoch {epoch}: train {:.4} (ground {:.4}), validation {}",
            config.architecture,
            train.total,
            train.ground,
            validation.as_ref().map_or("-".to_string(), |v| format!("{:.4}", v.total))
        );
        log.epochs.push(EpochRecord { epoch, train, validation });
    }
    let last = log.epochs.last().expect("at least one epoch");
    weights.final_train = Some(last.train.clone());
    weights.final_validation = last.validation.clone();
    Ok((weights, log))
}
