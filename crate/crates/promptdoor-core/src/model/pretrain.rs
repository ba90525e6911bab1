//! Masked-LM pre-training of the micro model on the shadow corpus.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{build_batch, gold_targets, mask_corpus, ModelConfig, ModelParams};
use crate::corpus::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{Stream, StreamRng};
use crate::tensor::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { epochs: 4, batch_size: 16, adam: AdamConfig { lr: 1e-3, ..Default::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub losses: Vec<f32>,
    pub heldout_loss: f32,
}

/// Called at the end of each epoch with (epoch, held-out loss, params);
/// gives callers a hook to persist a last-good checkpoint before a later
/// epoch can diverge.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, f32, &ModelParams);

/// Pre-trains a fresh model. Fails with a training error if the loss goes
/// non-finite; the per-epoch hook will already have seen the last good
/// parameters by then.
pub fn pretrain(
    config: &ModelConfig,
    train: &[TokenSequence],
    heldout: &[TokenSequence],
    vocab: &Vocabulary,
    hyper: &TrainHyper,
    seeds: &StreamRng,
    mut hook: Option<EpochHook<'_>>,
) -> Result<(ModelParams, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::contract("pre-training corpus is empty"));
    }
    let mut model = ModelParams::init(config, seeds)?;
    let mut opt = Adam::new(hyper.adam);
    let mut losses = Vec::new();
    let mut steps = 0usize;

    for epoch in 0..hyper.epochs {
        let epoch_seeds = seeds.derive(&format!("pretrain-epoch/{epoch}"));
        let mut mask_rng = epoch_seeds.stream(Stream::Masking);
        let mut rows = mask_corpus(train, config, vocab, &mut mask_rng);
        let mut shuffle_rng = epoch_seeds.stream(Stream::Shuffling);
        rows.shuffle(&mut shuffle_rng);

        let mut dropout_rng = epoch_seeds.stream(Stream::Dropout);
        for chunk in rows.chunks(hyper.batch_size) {
            let batch = build_batch(chunk.to_vec());
            if batch.total_masks() == 0 {
                continue;
            }
            let targets = gold_targets(&batch);
            let mut fp = model.forward(&batch, Some(&mut dropout_rng))?;
            let logits = fp.mask_logits.expect("batch has masks");
            let loss = fp.graph.cross_entropy(logits, &targets)?;
            let loss_val = fp.graph.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "pre-training diverged (non-finite loss) at step {steps}; \
                     the last-good checkpoint is the epoch {} hook snapshot",
                    epoch.saturating_sub(1)
                )));
            }
            fp.graph.backward(loss)?;
            model.absorb_grads(&fp)?;
            opt.step(model.trainable_params())?;
            losses.push(loss_val);
            steps += 1;
        }

        let heldout_loss = mlm_loss(&model, heldout, vocab, seeds)?;
        if let Some(hook) = hook.as_deref_mut() {
            hook(epoch, heldout_loss, &model);
        }
        log::info!("pretrain epoch {epoch}: held-out MLM loss {heldout_loss:.4}");
    }

    let heldout_loss = mlm_loss(&model, heldout, vocab, seeds)?;
    let bound = (config.vocab_size as f32).ln() * 0.5;
    if heldout_loss > bound {
        return Err(Error::Training(format!(
            "held-out MLM loss {heldout_loss:.4} above the {bound:.4} bound; \
             the model did not clearly beat uniform"
        )));
    }
    Ok((model, PretrainReport { steps, losses, heldout_loss }))
}

/// Held-out MLM loss under a fixed masking draw (eval mode, no dropout).
pub fn mlm_loss(
    model: &ModelParams,
    data: &[TokenSequence],
    vocab: &Vocabulary,
    seeds: &StreamRng,
) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::contract("empty held-out set"));
    }
    let mut rng = seeds.derive("heldout-mask").stream(Stream::Masking);
    let rows = mask_corpus(data, &model.config, vocab, &mut rng);
    let mut total = 0.0f64;
    let mut masks = 0usize;
    for chunk in rows.chunks(32) {
        let batch = build_batch(chunk.to_vec());
        let n = batch.total_masks();
        if n == 0 {
            continue;
        }
        let targets = gold_targets(&batch);
        let mut fp = model.forward(&batch, None)?;
        let loss = fp.graph.cross_entropy(fp.mask_logits.expect("masks"), &targets)?;
        total += fp.graph.data(loss)[0] as f64 * n as f64;
        masks += n;
    }
    Ok((total / masks.max(1) as f64) as f32)
}
