//! Constraint sets `C` over the memory bank, top-k neighbour selection inside
//! them, and the pseudo-label classifier used by the semi-supervised setting.
//!
//! Every top-k selection in this module orders by similarity, highest first,
//! and breaks exact ties by the lower bank position.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::classifier::{fit_classifier, ClassifierConfig};
use crate::data::Dataset;
use crate::encoder::{Layer, MlpParams};
use crate::error::{CmsfError, Result};
use crate::memory::{AlignedBank, MemoryBank, PseudoLabel};
use crate::numeric::{argmax, cosine_slices, l2_normalize, softmax, Matrix, SeededRng, UnitVec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborCount {
    Top(usize),
    /// `S = C` (the "top-all" variant).
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConstraintMode {
    /// `C = M`: plain mean shift.
    None,
    /// Indices of the `k_prime` nearest neighbours of the previous-epoch
    /// embedding in `M′`.
    SelfAug { k_prime: usize },
    /// Entries sharing the query's label.
    Supervised,
    /// Entries sharing a confident pseudo-label; relaxes to `M` otherwise.
    SemiSupervised { threshold: f64 },
    /// Label constraint for labeled queries, `C = M` for the rest.
    SemiBasic,
    /// Like `SelfAug`, with neighbours taken in a frozen auxiliary space.
    Cross { k_prime: usize },
}

impl ConstraintMode {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintMode::None => "none",
            ConstraintMode::SelfAug { .. } => "self",
            ConstraintMode::Supervised => "sup",
            ConstraintMode::SemiSupervised { .. } => "semi",
            ConstraintMode::SemiBasic => "semi-basic",
            ConstraintMode::Cross { .. } => "cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub mode: ConstraintMode,
    pub k: NeighborCount,
    pub include_target: bool,
}

impl ConstraintSpec {
    pub fn new(mode: ConstraintMode, k: NeighborCount) -> Self {
        Self { mode, k, include_target: true }
    }

    pub fn validate(&self) -> Result<()> {
        if let NeighborCount::Top(k) = self.k {
            if k == 0 {
                return Err(CmsfError::BadConfig("k must be >= 1".into()));
            }
        }
        match self.mode {
            ConstraintMode::SelfAug { k_prime } | ConstraintMode::Cross { k_prime } => match self.k {
                NeighborCount::Top(k) if k_prime >= k => Ok(()),
                NeighborCount::Top(k) => Err(CmsfError::BadConfig(format!("k' = {k_prime} must be >= k = {k}"))),
                NeighborCount::All => Err(CmsfError::BadConfig("top-all needs a label-based constraint".into())),
            },
            ConstraintMode::SemiSupervised { threshold } if !(0.0..=1.0).contains(&threshold) => {
                Err(CmsfError::BadConfig(format!("threshold {threshold} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Bank position; `None` for the query's own target embedding.
    pub position: Option<usize>,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub members: Vec<Neighbor>,
    pub includes_target: bool,
    pub relaxed: bool,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Bank positions of the members, the virtual target excluded.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().filter_map(|m| m.position)
    }

    /// Member embeddings, the target resolved to `u`.
    pub fn embeddings<'a>(&'a self, u: &'a UnitVec, bank: &'a MemoryBank) -> impl Iterator<Item = &'a [f64]> + 'a {
        self.members.iter().map(move |m| match m.position {
            Some(p) => bank.embedding(p),
            None => u.as_slice(),
        })
    }
}

/// Similarity-descending, position-ascending order.
#[inline]
pub(crate) fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `n` best `(position, similarity)` pairs in rank order.
pub(crate) fn top_n(mut scored: Vec<(usize, f64)>, n: usize) -> Vec<(usize, f64)> {
    if n == 0 {
        return Vec::new();
    }
    if n < scored.len() {
        scored.select_nth_unstable_by(n - 1, rank_order);
        scored.truncate(n);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

/// Cosine similarity of `q` to every entry of `bank`, by position.
pub fn bank_similarities(q: &[f64], bank: &MemoryBank) -> Vec<f64> {
    bank.iter().map(|e| cosine_slices(q, e.embedding.as_slice())).collect()
}

fn aligned_similarities(q: &[f64], aux: &AlignedBank) -> Vec<f64> {
    aux.embeddings.iter().map(|e| cosine_slices(q, e.as_slice())).collect()
}

fn nearest_in_aligned(w: &UnitVec, aux: &AlignedBank, k_prime: usize) -> Vec<usize> {
    let scored = aligned_similarities(w.as_slice(), aux).into_iter().enumerate().collect();
    top_n(scored, k_prime).into_iter().map(|(p, _)| p).collect()
}

/// Positions of the `k_prime` entries of `M′` closest to `w`, in rank order.
/// Asking for more than the bank holds returns every position.
pub fn constrain_self(w: &UnitVec, bank: &MemoryBank, aux: &AlignedBank, k_prime: usize) -> Result<Vec<usize>> {
    if bank.is_empty() {
        return Err(CmsfError::EmptyBank);
    }
    if !aux.is_aligned_with(bank) {
        return Err(CmsfError::MisalignedBanks("auxiliary bank does not mirror the memory bank".into()));
    }
    Ok(nearest_in_aligned(w, aux, k_prime))
}

/// Same mechanics as [`constrain_self`] with neighbours found in a frozen
/// auxiliary embedding space.
pub fn constrain_cross(w_frozen: &UnitVec, frozen_bank: &AlignedBank, bank: &MemoryBank, k_prime: usize) -> Result<Vec<usize>> {
    if bank.is_empty() {
        return Err(CmsfError::EmptyBank);
    }
    if !frozen_bank.is_aligned_with(bank) {
        return Err(CmsfError::MisalignedBanks("frozen bank does not mirror the memory bank".into()));
    }
    if frozen_bank.embeddings.first().is_some_and(|e| e.dim() != w_frozen.dim()) {
        return Err(CmsfError::DimMismatch { expected: frozen_bank.embeddings[0].dim(), got: w_frozen.dim() });
    }
    Ok(nearest_in_aligned(w_frozen, frozen_bank, k_prime))
}

/// All positions whose entry carries `query_label`, ascending.
pub fn constrain_sup(query_label: Option<u32>, bank: &MemoryBank) -> Result<Vec<usize>> {
    let label = query_label.ok_or(CmsfError::NoLabel)?;
    Ok(bank.iter().enumerate().filter(|(_, e)| e.label == Some(label)).map(|(p, _)| p).collect())
}

/// Confident queries (`conf ≥ t`) search entries whose true label equals the
/// query's pseudo-label, or whose own pseudo-label matches with `conf ≥ t`.
/// Everything else searches the whole bank and is flagged relaxed.
pub fn constrain_semi(query: Option<PseudoLabel>, threshold: f64, bank: &MemoryBank) -> (Vec<usize>, bool) {
    match query {
        Some(q) if q.conf >= threshold => {
            let c = bank
                .iter()
                .enumerate()
                .filter(|(_, e)| {
                    e.label == Some(q.label) || e.pseudo.is_some_and(|p| p.label == q.label && p.conf >= threshold)
                })
                .map(|(p, _)| p)
                .collect();
            (c, false)
        }
        _ => ((0..bank.len()).collect(), true),
    }
}

/// Label constraint for labeled queries; unlabeled ones search all of `M`.
pub fn constrain_semi_basic(query_label: Option<u32>, bank: &MemoryBank) -> (Vec<usize>, bool) {
    match query_label {
        Some(l) => (bank.iter().enumerate().filter(|(_, e)| e.label == Some(l)).map(|(p, _)| p).collect(), false),
        None => ((0..bank.len()).collect(), true),
    }
}

/// Members drawn from `candidates` using precomputed similarities to `u`
/// (`sims[p]` for bank position `p`).
pub fn select_topk_from_sims(sims: &[f64], candidates: &[usize], k: NeighborCount, include_target: bool) -> NeighborSet {
    let include_target = include_target || candidates.is_empty();
    let wanted = match k {
        NeighborCount::All => candidates.len(),
        NeighborCount::Top(k) => {
            if include_target {
                k - 1
            } else {
                k
            }
        }
    };
    let scored = candidates.iter().map(|&p| (p, sims[p])).collect();
    let mut members = Vec::with_capacity(wanted.min(candidates.len()) + 1);
    if include_target {
        members.push(Neighbor { position: None, similarity: 1.0 });
    }
    members.extend(top_n(scored, wanted).into_iter().map(|(p, s)| Neighbor { position: Some(p), similarity: s }));
    NeighborSet { members, includes_target: include_target, relaxed: false }
}

/// `S`: the top-k members of `C` by cosine to `u`, counting `u` itself as one
/// member when `include_target` is set. An empty `C` yields `{u}`.
pub fn select_topk(u: &UnitVec, bank: &MemoryBank, candidates: &[usize], k: NeighborCount, include_target: bool) -> NeighborSet {
    let mut sims = vec![0.0; bank.len()];
    for &p in candidates {
        sims[p] = cosine_slices(u.as_slice(), bank.embedding(p));
    }
    select_topk_from_sims(&sims, candidates, k, include_target)
}

/// Settings for the pseudo-label head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub train: ClassifierConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            train: ClassifierConfig { epochs: 40, lr: 0.01, momentum: 0.9, weight_decay: 1e-4, batch_size: 32 },
        }
    }
}

/// Two-layer MLP classifier over frozen target features.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoHead {
    pub params: MlpParams,
    pub trained_epoch: u32,
}

impl PseudoHead {
    /// He-initialized hidden layer and a zero output layer, so an untrained
    /// head predicts the uniform distribution.
    pub fn init(feat_dim: usize, num_classes: usize, cfg: &HeadConfig, rng: &mut SeededRng) -> Result<Self> {
        if num_classes == 0 {
            return Err(CmsfError::BadConfig("head needs at least one class".into()));
        }
        let hidden = MlpParams::init(&[feat_dim, cfg.hidden], rng)?.layers()[0].clone();
        let out = Layer::new(Matrix::zeros(num_classes, cfg.hidden), vec![0.0; num_classes])?;
        Ok(Self { params: MlpParams::new(vec![hidden, out])?, trained_epoch: 0 })
    }

    pub fn num_classes(&self) -> usize {
        self.params.output_dim()
    }
}

/// Fits a fresh head on `(feats, labels)` with softmax cross-entropy.
pub fn train_pseudo_head<F: AsRef<[f64]>>(
    feats: &[F],
    labels: &[u32],
    num_classes: usize,
    cfg: &HeadConfig,
    epoch: u32,
    rng: &mut SeededRng,
) -> Result<PseudoHead> {
    if feats.is_empty() {
        return Err(CmsfError::NoLabeledData);
    }
    let dim = feats[0].as_ref().len();
    let mut head = PseudoHead::init(dim, num_classes, cfg, rng)?;
    fit_classifier(&mut head.params, feats, labels, &cfg.train, rng)?;
    head.trained_epoch = epoch;
    Ok(head)
}

/// Arg-max class and its softmax probability.
pub fn pseudo_predict(head: &PseudoHead, feat: &[f64]) -> Result<PseudoLabel> {
    let probs = softmax(&head.params.apply(feat)?);
    let label = argmax(&probs);
    Ok(PseudoLabel { label: label as u32, conf: probs[label] })
}

/// Similarity-weighted k-NN vote over labeled features; confidence is the
/// winning share of the (non-negative) vote mass.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnPseudoClassifier {
    pub feats: Vec<UnitVec>,
    pub labels: Vec<u32>,
    pub k: usize,
    pub num_classes: usize,
}

impl KnnPseudoClassifier {
    pub fn predict(&self, feat: &[f64]) -> Result<PseudoLabel> {
        if self.feats.is_empty() {
            return Err(CmsfError::NoLabeledData);
        }
        if self.feats[0].dim() != feat.len() {
            return Err(CmsfError::DimMismatch { expected: self.feats[0].dim(), got: feat.len() });
        }
        let scored = self.feats.iter().enumerate().map(|(i, f)| (i, cosine_slices(feat, f.as_slice()))).collect();
        let mut votes = vec![0.0; self.num_classes];
        for (i, s) in top_n(scored, self.k) {
            votes[self.labels[i] as usize] += s.max(0.0);
        }
        let total: f64 = votes.iter().sum();
        let label = argmax(&votes);
        let conf = if total > 0.0 { votes[label] / total } else { 1.0 / self.num_classes as f64 };
        Ok(PseudoLabel { label: label as u32, conf })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Mlp,
    Knn { k: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum PseudoClassifier {
    Mlp(PseudoHead),
    Knn(KnnPseudoClassifier),
}

impl PseudoClassifier {
    pub fn fit(kind: HeadKind, feats: &[UnitVec], labels: &[u32], num_classes: usize, cfg: &HeadConfig, epoch: u32, rng: &mut SeededRng) -> Result<Self> {
        match kind {
            HeadKind::Mlp => Ok(PseudoClassifier::Mlp(train_pseudo_head(feats, labels, num_classes, cfg, epoch, rng)?)),
            HeadKind::Knn { k } => {
                if feats.is_empty() {
                    return Err(CmsfError::NoLabeledData);
                }
                Ok(PseudoClassifier::Knn(KnnPseudoClassifier { feats: feats.to_vec(), labels: labels.to_vec(), k, num_classes }))
            }
        }
    }

    pub fn predict(&self, feat: &[f64]) -> Result<PseudoLabel> {
        match self {
            PseudoClassifier::Mlp(h) => pseudo_predict(h, feat),
            PseudoClassifier::Knn(k) => k.predict(feat),
        }
    }

    pub fn mlp_head(&self) -> Option<&PseudoHead> {
        match self {
            PseudoClassifier::Mlp(h) => Some(h),
            PseudoClassifier::Knn(_) => None,
        }
    }
}

/// A second, frozen view of the data: a fixed Gaussian random projection of
/// every sample to `dim` dimensions, L2-normalized.
pub fn frozen_projection(data: &Dataset, dim: usize, rng: &mut SeededRng) -> Result<Vec<UnitVec>> {
    if dim == 0 {
        return Err(CmsfError::BadConfig("projection dimension must be >= 1".into()));
    }
    let scale = 1.0 / (data.dim() as f64).sqrt();
    let proj = Matrix::from_vec(dim, data.dim(), (0..dim * data.dim()).map(|_| scale * rng.gaussian()).collect())?;
    (0..data.len()).map(|i| l2_normalize(&proj.matvec(data.sample(i)))).collect()
}
