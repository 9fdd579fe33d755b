//! Shared minibatch training loop and hyperparameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Complex dimension `d`; real views are `2d` wide.
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 0 = full softmax over all candidates.
    pub negatives: usize,
    /// N3 regularisation weight.
    pub reg: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            epochs: 50,
            batch_size: 128,
            lr: 0.01,
            negatives: 0,
            reg: 0.0,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be a positive finite number"));
        }
        if !(self.reg.is_finite() && self.reg >= 0.0) {
            return Err(Error::config("reg", "must be non-negative"));
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return Err(Error::config("init_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// A trained model together with its loss curve. `loss_curve[0]` is the
/// loss of the initial parameters; entry `k` is the mean minibatch loss
/// observed during epoch `k`.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub loss_curve: Vec<f64>,
}

/// Run `cfg.epochs` epochs of Adam over `samples`. `batch_loss` builds the
/// summed loss of one minibatch on the tape. Only `trainable` parameters are
/// updated when given.
pub fn run_epochs<S: Clone>(
    params: &mut ParamStore,
    samples: &[S],
    cfg: &TrainConfig,
    trainable: Option<&[ParamId]>,
    stream: u64,
    batch_loss: impl FnMut(&mut Tape<'_>, &[S]) -> Result<Var>,
) -> Result<Vec<f64>> {
    run_epochs_with(
        params,
        samples,
        cfg,
        trainable,
        stream,
        batch_loss,
        |_, _| Ok(()),
    )
}

/// [`run_epochs`] with `after_epoch(epoch, params)` called once after every
/// epoch, epoch 0 being the initial parameters.
pub fn run_epochs_with<S: Clone>(
    params: &mut ParamStore,
    samples: &[S],
    cfg: &TrainConfig,
    trainable: Option<&[ParamId]>,
    stream: u64,
    mut batch_loss: impl FnMut(&mut Tape<'_>, &[S]) -> Result<Var>,
    mut after_epoch: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no training samples"));
    }
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let mut total = 0.0;
    for (step, batch) in samples.chunks(cfg.batch_size).enumerate() {
        let mut tape = Tape::new(params);
        let l = batch_loss(&mut tape, batch)?;
        let v = tape.scalar(l);
        check_finite(v, 0, step)?;
        total += v;
    }
    curve.push(total / samples.len() as f64);
    after_epoch(0, params)?;

    let mut opt = Adam::new(params, cfg.lr);
    let mut rng = cfg.rng(stream);
    let mut order: Vec<S> = samples.to_vec();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (v, mut grads) = {
                let mut tape = Tape::new(params);
                let l = batch_loss(&mut tape, batch)?;
                (tape.scalar(l), tape.backward(l))
            };
            check_finite(v, epoch, step)?;
            total += v;
            grads.scale(1.0 / batch.len() as f64);
            if let Some(keep) = trainable {
                grads.retain(keep);
            }
            opt.step(params, &grads);
            if !params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
        }
        curve.push(total / samples.len() as f64);
        after_epoch(epoch, params)?;
    }
    Ok(curve)
}

fn check_finite(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence { epoch, step, loss });
    }
    Ok(())
}
