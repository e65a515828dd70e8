//! Softmax classifiers trained with SGD: heads on frozen features (pseudo-label
//! head, linear probe) and a trunk-plus-linear model trained end to end
//! (cross-entropy baseline, semi-supervised fine-tuning).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentSpec, Dataset};
use crate::encoder::{Layer, LrSchedule, MlpParams, SgdState};
use crate::error::{CmsfError, Result};
use crate::numeric::{argmax, softmax, softmax_cross_entropy, Matrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

/// Mini-batch SGD on mean softmax cross-entropy. Each epoch visits the
/// samples in an order drawn from `rng`.
pub fn fit_classifier<F: AsRef<[f64]>>(
    params: &mut MlpParams,
    feats: &[F],
    labels: &[u32],
    cfg: &ClassifierConfig,
    rng: &mut SeededRng,
) -> Result<()> {
    if feats.len() != labels.len() {
        return Err(CmsfError::DimMismatch { expected: feats.len(), got: labels.len() });
    }
    if feats.is_empty() {
        return Err(CmsfError::NoLabeledData);
    }
    if cfg.batch_size == 0 {
        return Err(CmsfError::BadConfig("classifier batch size must be >= 1".into()));
    }
    let classes = params.output_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(CmsfError::BadConfig(format!("label {bad} exceeds classifier width {classes}")));
    }
    let mut sgd = SgdState::new(&[params], cfg.lr, cfg.momentum, cfg.weight_decay, 0, LrSchedule::Constant);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (logits, tape) = params.forward(feats[i].as_ref())?;
                let (_, g) = softmax_cross_entropy(&logits, labels[i] as usize);
                let (gp, _) = params.backward(&tape, &g)?;
                grads.add_scaled(&gp, scale)?;
            }
            sgd.step(&mut [params], &[&grads])?;
        }
    }
    Ok(())
}

/// Fraction of `feats` whose arg-max prediction equals the label.
pub fn classifier_accuracy<F: AsRef<[f64]>>(params: &MlpParams, feats: &[F], labels: &[u32]) -> Result<f64> {
    if feats.is_empty() {
        return Err(CmsfError::EmptySplit);
    }
    let mut hits = 0usize;
    for (f, &l) in feats.iter().zip(labels) {
        if argmax(&params.apply(f.as_ref())?) == l as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / feats.len() as f64)
}

/// Encoder trunk followed by a linear classifier. The trunk output feeds the
/// classifier directly (no activation in between).
#[derive(Clone, Debug, PartialEq)]
pub struct TrunkClassifier {
    pub trunk: MlpParams,
    pub head: MlpParams,
}

impl TrunkClassifier {
    /// Wraps `trunk` with a zero-initialized linear head.
    pub fn new(trunk: MlpParams, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(CmsfError::BadConfig("classifier needs at least one class".into()));
        }
        let dim = trunk.output_dim();
        let head = MlpParams::new(vec![Layer::new(Matrix::zeros(num_classes, dim), vec![0.0; num_classes])?])?;
        Ok(Self { trunk, head })
    }

    pub fn num_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.head.apply(&self.trunk.apply(x)?)
    }

    /// Arg-max class and its softmax probability.
    pub fn predict(&self, x: &[f64]) -> Result<(u32, f64)> {
        let p = softmax(&self.logits(x)?);
        let c = argmax(&p);
        Ok((c as u32, p[c]))
    }

    fn loss_grads(&self, x: &[f64], label: u32) -> Result<(f64, MlpParams, MlpParams)> {
        let (feat, trunk_tape) = self.trunk.forward(x)?;
        let (logits, head_tape) = self.head.forward(&feat)?;
        let (loss, g) = softmax_cross_entropy(&logits, label as usize);
        let (gh, gfeat) = self.head.backward(&head_tape, &g)?;
        let (gt, _) = self.trunk.backward(&trunk_tape, &gfeat)?;
        Ok((loss, gt, gh))
    }

    /// Accuracy over `indices` of `data` against `labels[i]`.
    pub fn accuracy(&self, data: &Dataset, indices: &[usize], labels: &[u32]) -> Result<f64> {
        if indices.is_empty() {
            return Err(CmsfError::EmptySplit);
        }
        let mut hits = 0usize;
        for &i in indices {
            if self.predict(data.sample(i))?.0 == labels[i] {
                hits += 1;
            }
        }
        Ok(hits as f64 / indices.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEndConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub augment: AugmentSpec,
}

/// Trains trunk and head jointly on `(data.sample(i), labels[i])` for `i` in
/// `indices`. Each epoch shuffles with `shuffle_rng`; inputs are augmented
/// with `aug_rng` in visiting order. Returns the mean loss of the last epoch.
pub fn fit_end_to_end(
    model: &mut TrunkClassifier,
    data: &Dataset,
    indices: &[usize],
    labels: &[u32],
    cfg: &EndToEndConfig,
    shuffle_rng: &mut SeededRng,
    aug_rng: &mut SeededRng,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(CmsfError::NoLabeledData);
    }
    if cfg.batch_size == 0 {
        return Err(CmsfError::BadConfig("batch size must be >= 1".into()));
    }
    cfg.augment.validate()?;
    let classes = model.num_classes();
    for &i in indices {
        if labels[i] as usize >= classes {
            return Err(CmsfError::BadConfig(format!("label {} exceeds classifier width {classes}", labels[i])));
        }
    }
    let batches = indices.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * batches) as u64;
    let mut sgd = SgdState::new(&[&model.trunk, &model.head], cfg.lr, cfg.momentum, cfg.weight_decay, total, cfg.schedule);
    let mut order = indices.to_vec();
    let mut last_loss = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut gt = model.trunk.zeros_like();
            let mut gh = model.head.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = augment(data.sample(i), &cfg.augment, aug_rng)?;
                let (loss, t, h) = model.loss_grads(&x, labels[i])?;
                epoch_loss += loss;
                gt.add_scaled(&t, scale)?;
                gh.add_scaled(&h, scale)?;
            }
            let TrunkClassifier { trunk, head } = model;
            sgd.step(&mut [trunk, head], &[&gt, &gh])?;
        }
        last_loss = epoch_loss / order.len() as f64;
    }
    Ok(last_loss)
}
