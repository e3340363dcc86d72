//! Minibatch training shared by the recurrent model and the MLP baselines.
//!
//! Each sample gets its own graph; per-sample gradients are computed in
//! parallel and then summed in sample order, so results do not depend on the
//! thread count. Dropout draws come from a ChaCha stream keyed by
//! `(seed, epoch, sample)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{EpochRecord, NamedTensor, StopReason, TrainingLog};
use crate::tensor_nn::{clip_global_norm, AdamState, Graph, SgdMomentum, Tensor, TensorError, Var};

/// Patience-based stopping on a validation loss.
///
/// Only a strict decrease counts as an improvement. Training stops once
/// `patience` consecutive epochs fail to improve, i.e. at `best_epoch + patience`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: usize,
    pub best: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStop {
    Improved,
    Wait,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best_epoch: 0, best: f64::INFINITY }
    }

    pub fn observe(&mut self, epoch: usize, val: f64) -> EarlyStop {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            EarlyStop::Improved
        } else if epoch - self.best_epoch >= self.patience {
            EarlyStop::Stop
        } else {
            EarlyStop::Wait
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Phase {
    Train,
    Val,
}

pub(crate) trait Objective: Sync {
    fn count(&self, phase: Phase) -> usize;

    /// Scalar loss of sample `idx`. `rng` is present only for training
    /// passes, where dropout applies.
    fn loss<'p>(
        &self,
        g: &mut Graph<'p>,
        vars: &[Var],
        phase: Phase,
        idx: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, TensorError>;
}

pub(crate) enum Optimizer {
    Adam(AdamState),
    Sgd(SgdMomentum),
}

impl Optimizer {
    fn update(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) -> Result<(), TensorError> {
        match self {
            Optimizer::Adam(a) => a.update(params, grads),
            Optimizer::Sgd(s) => s.update(params, grads),
        }
    }
}

pub(crate) struct FitOptions {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

pub(crate) fn bind<'p>(g: &mut Graph<'p>, tensors: &'p [NamedTensor], trainable: Option<&[bool]>) -> Vec<Var> {
    tensors
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&t.tensor, trainable.is_some_and(|tr| tr[i])))
        .collect()
}

fn sample_rng(seed: u64, epoch: usize, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | idx as u64);
    rng
}

/// Mean loss over a split, without dropout.
pub(crate) fn mean_loss<O: Objective>(obj: &O, tensors: &[NamedTensor], phase: Phase) -> Result<f64, TensorError> {
    let n = obj.count(phase);
    let losses: Vec<Result<f64, TensorError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::new();
            let vars = bind(&mut g, tensors, None);
            let loss = obj.loss(&mut g, &vars, phase, i, None)?;
            Ok(g.scalar(loss))
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / n.max(1) as f64)
}

type SampleGrad = (f64, Vec<Option<Vec<f64>>>);

/// Mean loss and mean gradient over `batch`. Frozen tensors get `None`.
fn batch_gradients<O: Objective>(
    obj: &O,
    tensors: &[NamedTensor],
    trainable: &[bool],
    batch: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<SampleGrad, TensorError> {
    let per_sample: Vec<Result<SampleGrad, TensorError>> = batch
        .par_iter()
        .map(|&i| {
            let mut rng = sample_rng(seed, epoch, i);
            let mut g = Graph::new();
            let vars = bind(&mut g, tensors, Some(trainable));
            let loss = obj.loss(&mut g, &vars, Phase::Train, i, Some(&mut rng))?;
            let mut grads = g.backward(loss)?;
            let per_param = vars
                .iter()
                .zip(tensors)
                .zip(trainable)
                .map(|((v, t), &tr)| tr.then(|| grads.take(*v).unwrap_or_else(|| vec![0.0; t.tensor.len()])))
                .collect();
            Ok((g.scalar(loss), per_param))
        })
        .collect();

    let mut loss_sum = 0.0;
    let mut sum: Vec<Option<Vec<f64>>> =
        tensors.iter().zip(trainable).map(|(t, &tr)| tr.then(|| vec![0.0; t.tensor.len()])).collect();
    for r in per_sample {
        let (l, grads) = r?;
        loss_sum += l;
        for (acc, g) in sum.iter_mut().zip(grads) {
            if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
    }
    let k = 1.0 / batch.len() as f64;
    for v in sum.iter_mut().flatten().flat_map(|g| g.iter_mut()) {
        *v *= k;
    }
    Ok((loss_sum * k, sum))
}

fn is_divergence(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite(_) | TensorError::NonFiniteGradient(_))
}

/// Trains `tensors` in place and leaves them at the best-validation snapshot.
pub(crate) fn fit<O: Objective>(
    obj: &O,
    tensors: &mut Vec<NamedTensor>,
    trainable: &[bool],
    opts: &FitOptions,
    optimizer: &mut Optimizer,
) -> Result<TrainingLog, TensorError> {
    let n_train = obj.count(Phase::Train);
    let initial_train_loss = mean_loss(obj, tensors, Phase::Train)?;
    let initial_val_loss = mean_loss(obj, tensors, Phase::Val)?;
    let mut stopper = EarlyStopping::new(opts.patience);
    stopper.observe(0, initial_val_loss);
    let mut best = tensors.clone();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for batch in order.chunks(opts.batch_size) {
            let step = batch_gradients(obj, tensors, trainable, batch, opts.seed, epoch).and_then(|(loss, mut grads)| {
                if let Some(c) = opts.clip_norm {
                    clip_global_norm(&mut grads, c);
                }
                let mut flat: Vec<Tensor> = tensors.iter_mut().map(|t| std::mem::take(&mut t.tensor)).collect();
                let res = optimizer.update(&mut flat, &grads);
                for (t, v) in tensors.iter_mut().zip(flat) {
                    t.tensor = v;
                }
                res.map(|()| loss)
            });
            match step {
                Ok(loss) => {
                    loss_sum += loss;
                    batches += 1;
                }
                Err(e) if is_divergence(&e) => {
                    stop = StopReason::Diverged { epoch, reason: e.to_string() };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let val_loss = match mean_loss(obj, tensors, Phase::Val) {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                stop = StopReason::Diverged { epoch, reason: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        };
        epochs.push(EpochRecord { epoch, train_loss: loss_sum / batches.max(1) as f64, val_loss });
        match stopper.observe(epoch, val_loss) {
            EarlyStop::Improved => best.clone_from(tensors),
            EarlyStop::Wait => {}
            EarlyStop::Stop => {
                stop = StopReason::Patience;
                break;
            }
        }
    }
    *tensors = best;
    Ok(TrainingLog {
        initial_train_loss,
        initial_val_loss,
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        stop,
    })
}
