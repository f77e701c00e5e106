use candle_core::DType;
use candle_nn::Optimizer;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{VqVae, VqVaeConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::{nn, seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqLogEntry {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub commit: f64,
    /// Fraction of codebook entries used by this batch.
    pub usage: f64,
    pub val_mse: Option<f64>,
}

/// Trains encoder and decoder with Adam and the codebook with EMA.
///
/// `train` supplies batches; `val` is used for periodic reconstruction MSE
/// (step 0 and every `val_every` steps, plus the final step). The codebook is
/// seeded from encoder outputs of the first batch. `on_checkpoint` runs every
/// `checkpoint_every` steps and after the last one.
pub fn train_vqvae(
    train: &[&Image],
    val: &[&Image],
    cfg: &VqVaeConfig,
    seed: u64,
    mut on_log: impl FnMut(&VqLogEntry),
    mut on_checkpoint: impl FnMut(usize, &VqVae) -> Result<()>,
) -> Result<(VqVae, Vec<VqLogEntry>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = VqVae::new(cfg, DType::F32, seed::derive_named(seed, "vqvae.init"))?;
    let mut opt = nn::adam(&model.vars, cfg.lr)?;
    let mut rng = seed::rng(seed::derive_named(seed, "vqvae.batches"));
    let val: Vec<&Image> = val.iter().take(cfg.val_images).copied().collect();
    let mut log = Vec::new();

    for step in 0..cfg.steps {
        let batch: Vec<&Image> = (0..cfg.batch_size).map(|_| train[rng.random_range(0..train.len())]).collect();
        let x = model.images_tensor(&batch)?;
        let z = model.encode(&x)?;
        if step == 0 {
            let cells = VqVae::cells(&z)?;
            let n = cells.len() / cfg.code_dim;
            for k in 0..cfg.codebook_size {
                let r = rng.random_range(0..n);
                model.codebook.set_entry(k, &cells[r * cfg.code_dim..(r + 1) * cfg.code_dim]);
            }
        }
        let terms = model.loss_terms(&x, &z)?;
        opt.backward_step(&terms.total)?;
        model.codebook.ema_update(&terms.cells, &terms.assign, cfg.gamma)?;

        let last = step + 1 == cfg.steps;
        let val_mse = if !val.is_empty() && (step == 0 || last || (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0)) {
            Some(model.recon_mse(&val)?)
        } else {
            None
        };
        if val_mse.is_some() || last || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            let e = VqLogEntry {
                step,
                total: terms.total.to_dtype(DType::F64)?.to_scalar()?,
                recon: terms.recon.to_dtype(DType::F64)?.to_scalar()?,
                commit: terms.commit.to_dtype(DType::F64)?.to_scalar()?,
                usage: model.codebook.usage(&terms.assign),
                val_mse,
            };
            tracing::info!(step, total = e.total, recon = e.recon, commit = e.commit, usage = e.usage, val_mse = ?e.val_mse, "vqvae");
            on_log(&e);
            log.push(e);
        }
        if last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            on_checkpoint(step + 1, &model)?;
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_is_an_error() {
        let r = train_vqvae(&[], &[], &VqVaeConfig::default(), 0, |_| {}, |_, _| Ok(()));
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }
}
