//! Mini-batch training with per-group Adam and best-validation selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{contrastive_loss, LossMode, LossSpec, SignalTargets};
use crate::nn::{DualEncoder, TextBatch};
use crate::perturb::RelationshipLabel;
use crate::query::{BoundDataset, BoundItem};
use crate::rng;
use crate::tensor::{Mode, ParamGroup, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_projection: f64,
    pub lr_signal: f64,
    pub lr_text: f64,
    pub tau: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub signal_targets: SignalTargets,
    /// Experimental soft-target supervised loss.
    pub soft_targets: bool,
    pub freeze_text_encoder: bool,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 30,
            lr_projection: 1e-3,
            lr_signal: 1e-5,
            lr_text: 1e-4,
            tau: 1.0,
            seed: 0,
            loss_mode: LossMode::Supervised,
            signal_targets: SignalTargets::ColumnArgmax,
            soft_targets: false,
            freeze_text_encoder: false,
            grad_clip: 1.0,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if ![self.lr_projection, self.lr_signal, self.lr_text]
            .iter()
            .all(|&l| l > 0.0)
        {
            return bad("learning rates must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return bad("grad_clip and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            mode: self.loss_mode,
            tau: self.tau,
            signal_targets: self.signal_targets,
            soft_targets: self.soft_targets,
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Projection => self.lr_projection,
            ParamGroup::Signal => self.lr_signal,
            ParamGroup::Text => self.lr_text,
        }
    }
}

/// Adam with decoupled weight decay and per-group learning rates.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Frozen parameters, parameters without a gradient and
    /// groups with a zero learning rate are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: impl Fn(ParamGroup) -> f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let eps = T::lit(cfg.adam_eps);
        for (id, p) in params.iter_mut() {
            let Some(g) = grads[id.index()].as_ref() else {
                continue;
            };
            let rate = lr(p.group);
            if p.frozen || rate == 0.0 {
                continue;
            }
            let step_size = T::lit(rate / c1);
            let inv_c2 = T::lit(1.0 / c2);
            let decay = T::lit(rate * cfg.weight_decay);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                let denom = (*vi * inv_c2).sqrt() + eps;
                if cfg.weight_decay > 0.0 {
                    *w -= decay * *w;
                }
                *w -= step_size * *mi / denom;
            }
        }
    }
}

/// Scale gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            g.data()
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_secs: f64,
    pub grad_norm: f64,
    pub improved: bool,
}

/// Result of a training run; the model holds the best parameters afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochMetrics>,
}

fn batch_inputs<'a>(
    items: &[&'a BoundItem],
) -> (
    Vec<&'a [f64]>,
    Vec<&'a [f64]>,
    Vec<RelationshipLabel>,
    Vec<RelationshipLabel>,
) {
    let refs = items.iter().map(|it| it.pair.reference.values()).collect();
    let tgts = items.iter().map(|it| it.pair.target.values()).collect();
    let ys = items.iter().map(|it| it.pair.label).collect();
    let yt = items.iter().map(|it| it.query.label).collect();
    (refs, tgts, yt, ys)
}

/// Loss of one batch on a fresh tape; gradients are returned in training.
fn batch_loss<T: Scalar>(
    model: &DualEncoder<T>,
    items: &[&BoundItem],
    spec: &LossSpec,
    mode: Mode,
    want_grads: bool,
) -> Result<(f64, Option<Vec<Option<Tensor<T>>>>)> {
    let (refs, tgts, yt, ys) = batch_inputs(items);
    let seqs: Vec<Vec<usize>> = items
        .iter()
        .map(|it| model.tokenize(&it.query.text))
        .collect();
    let text = TextBatch::new(&seqs)?;
    let mut g = model.graph(mode);
    let zt = model.text_tower(&mut g, &text)?;
    let zs = model.signal_tower(&mut g, &refs, &tgts)?;
    let loss = contrastive_loss(&mut g, zt, zs, &yt, &ys, spec)?;
    let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        let mut counts = [0usize; 12];
        for y in &ys {
            counts[y.index()] += 1;
        }
        return Err(Error::Numeric(format!(
            "non-finite loss {value} on a batch of {} (signal label counts {counts:?})",
            items.len()
        )));
    }
    let grads = want_grads.then(|| g.backward(loss).into_param_grads());
    Ok((value, grads))
}

/// Mean loss over validation batches in inference mode.
pub fn validate<T: Scalar>(
    model: &DualEncoder<T>,
    val: &BoundDataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    let items: Vec<&BoundItem> = val.items.iter().collect();
    let spec = cfg.loss_spec();
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in items.chunks(cfg.batch_size) {
        let (l, _) = batch_loss(model, chunk, &spec, Mode::Eval, false)?;
        total += l;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Train in place. Each epoch shuffles with the `shuffle` stream; the
/// parameters with the lowest validation loss are restored at the end.
pub fn train<T: Scalar>(
    model: &mut DualEncoder<T>,
    train_set: &BoundDataset,
    val_set: &BoundDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::InvalidInput(
            "training split needs at least two items".into(),
        ));
    }
    if cfg.freeze_text_encoder {
        model.params_mut().set_group_frozen(ParamGroup::Text, true);
    }
    let spec = cfg.loss_spec();
    let mut opt = Adam::new(model.params());
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut r = rng::substream(cfg.seed, "shuffle", epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut last_norm = 0.0;
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let items: Vec<&BoundItem> = idx.iter().map(|&i| &train_set.items[i]).collect();
            let seed = rng::derive_seed(cfg.seed, "dropout", opt.steps());
            let (l, grads) = batch_loss(model, &items, &spec, Mode::Train { seed }, true)?;
            let mut grads = grads.unwrap_or_default();
            last_norm = clip_global_norm(&mut grads, cfg.grad_clip);
            if !last_norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient norm at epoch {epoch}, batch {batches} (loss {l})"
                )));
            }
            opt.step(model.params_mut(), &grads, |g| cfg.lr(g), cfg);
            total += l;
            batches += 1;
        }
        let val_loss = validate(model, val_set, cfg)?;
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, model.params().clone()));
        }
        let m = EpochMetrics {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_loss,
            wall_secs: start.elapsed().as_secs_f64(),
            grad_norm: last_norm,
            improved,
        };
        on_epoch(&m);
        history.push(m);
    }
    let (best_val_loss, best_epoch) = match best {
        Some((loss, epoch, params)) => {
            *model.params_mut() = params;
            (loss, epoch)
        }
        None => (f64::NAN, 0),
    };
    Ok(TrainReport {
        best_epoch,
        best_val_loss,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_group_rate_leaves_group_bit_unchanged() {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng::substream(1, "t", 0);
        let a = store.add_fan_in("a", ParamGroup::Projection, vec![4], 2, &mut r);
        let b = store.add_fan_in("b", ParamGroup::Signal, vec![4], 2, &mut r);
        let before = store.clone();
        let grads = vec![
            Some(Tensor::full(vec![4], 0.5)),
            Some(Tensor::full(vec![4], 0.5)),
        ];
        let mut opt = Adam::new(&store);
        let cfg = TrainConfig::default();
        opt.step(
            &mut store,
            &grads,
            |g| if g == ParamGroup::Signal { 0.0 } else { 1e-3 },
            &cfg,
        );
        assert_eq!(store.value(b), before.value(b));
        assert_ne!(store.value(a), before.value(a));
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add_zeros("a", ParamGroup::Projection, vec![2]);
        let grads = vec![Some(Tensor::from_f64(vec![2], &[3.0, -0.01]))];
        let mut opt = Adam::new(&store);
        opt.step(&mut store, &grads, |_| 0.1, &TrainConfig::default());
        let v = store.value(a).data();
        assert!((v[0] + 0.1).abs() < 1e-6 && (v[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(Tensor::<f64>::from_f64(vec![2], &[3.0, 4.0])), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
