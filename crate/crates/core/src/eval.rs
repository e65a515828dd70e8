//! Frozen-feature evaluation (k-NN, linear probe) and neighbour diagnostics:
//! purity and the rank of constrained neighbours in the unconstrained order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{classifier_accuracy, fit_classifier, ClassifierConfig};
use crate::constraint::{
    bank_similarities, constrain_cross, constrain_self, constrain_semi, constrain_semi_basic, constrain_sup, frozen_projection, rank_order, top_n,
    ConstraintMode, ConstraintSpec, PseudoClassifier,
};
use crate::data::{augment, AugmentSpec, Dataset};
use crate::encoder::{Checkpoint, Layer, MlpParams};
use crate::error::{CmsfError, Result};
use crate::memory::{AlignedBank, BankEntry, MemoryBank, PseudoLabel};
use crate::numeric::{argmax, cosine_slices, l2_normalize, Matrix, SeededRng, Stream, UnitVec};

/// Normalized features with their labels and dataset ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub feats: Vec<UnitVec>,
    pub labels: Vec<u32>,
    pub ids: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}

/// `norm(f(x))` for each listed sample, unaugmented.
pub fn embed(params: &MlpParams, data: &Dataset, indices: &[usize]) -> Result<Vec<UnitVec>> {
    indices.par_iter().map(|&i| l2_normalize(&params.apply(data.sample(i))?)).collect()
}

/// Features of `indices` labeled by `labels[i]`.
pub fn feature_set(params: &MlpParams, data: &Dataset, indices: &[usize], labels: &[u32]) -> Result<FeatureSet> {
    Ok(FeatureSet { feats: embed(params, data, indices)?, labels: indices.iter().map(|&i| labels[i]).collect(), ids: indices.to_vec() })
}

fn knn_predict(train: &FeatureSet, q: &[f64], q_id: usize, k: usize, classes: usize) -> u32 {
    let scored = train
        .feats
        .iter()
        .zip(&train.ids)
        .enumerate()
        .filter(|(_, (_, &id))| id != q_id)
        .map(|(j, (f, _))| (j, cosine_slices(q, f.as_slice())))
        .collect();
    let nearest = top_n(scored, k);
    if k == 1 {
        return train.labels[nearest[0].0];
    }
    let mut votes = vec![0.0; classes];
    for (j, s) in nearest {
        votes[train.labels[j] as usize] += s;
    }
    argmax(&votes) as u32
}

/// k-NN accuracy of `test` against `train`. One neighbour takes its label;
/// more vote with weight equal to cosine similarity (ties to the lower class).
/// Train entries sharing a query's dataset id are skipped.
pub fn knn_eval(train: &FeatureSet, test: &FeatureSet, k: usize) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(CmsfError::EmptySplit);
    }
    if k == 0 || k > train.len() {
        return Err(CmsfError::TooFewCandidates { needed: k, available: train.len() });
    }
    if train.feats[0].dim() != test.feats[0].dim() {
        return Err(CmsfError::DimMismatch { expected: train.feats[0].dim(), got: test.feats[0].dim() });
    }
    let classes = train.labels.iter().chain(&test.labels).max().map_or(1, |&m| m as usize + 1);
    let hits: usize = (0..test.len())
        .into_par_iter()
        .map(|t| usize::from(knn_predict(train, test.feats[t].as_slice(), test.ids[t], k, classes) == test.labels[t]))
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train: ClassifierConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { train: ClassifierConfig { epochs: 100, lr: 0.1, momentum: 0.9, weight_decay: 0.0, batch_size: 64 } }
    }
}

/// Test accuracy of a single zero-initialized affine layer trained on frozen
/// `train` features.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, cfg: &ProbeConfig, rng: &mut SeededRng) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(CmsfError::EmptySplit);
    }
    let classes = train.labels.iter().chain(&test.labels).max().map_or(1, |&m| m as usize + 1);
    let dim = train.feats[0].dim();
    let mut params = MlpParams::new(vec![Layer::new(Matrix::zeros(classes, dim), vec![0.0; classes])?])?;
    fit_classifier(&mut params, &train.feats, &train.labels, &cfg.train, rng)?;
    classifier_accuracy(&params, &test.feats, &test.labels)
}

/// Fraction of labeled members carrying `query_label`. Unlabeled members are
/// not counted.
pub fn purity(member_labels: &[Option<u32>], query_label: Option<u32>) -> Result<f64> {
    let q = query_label.ok_or(CmsfError::NoLabels)?;
    let labeled: Vec<u32> = member_labels.iter().flatten().copied().collect();
    if labeled.is_empty() {
        return Err(CmsfError::NoLabels);
    }
    Ok(labeled.iter().filter(|&&l| l == q).count() as f64 / labeled.len() as f64)
}

/// Rank of bank position `p` in the full order of `sims`: one plus the number
/// of entries ordered strictly before it.
pub fn rank_of(sims: &[f64], p: usize) -> usize {
    let s = sims[p];
    1 + sims.iter().enumerate().filter(|&(q, &t)| t > s || (t == s && q < p)).count()
}

/// Rank in `M` of the `j`-th (1-based) member of `C` when `C` is ordered by
/// similarity to the query.
pub fn constrained_rank_from_sims(sims: &[f64], candidates: &[usize], j: usize) -> Result<usize> {
    if j == 0 || candidates.len() < j {
        return Err(CmsfError::TooFewCandidates { needed: j, available: candidates.len() });
    }
    let scored = candidates.iter().map(|&p| (p, sims[p])).collect();
    let (p, _) = top_n(scored, j)[j - 1];
    Ok(rank_of(sims, p))
}

pub fn constrained_rank(u: &UnitVec, bank: &MemoryBank, candidates: &[usize], j: usize) -> Result<usize> {
    constrained_rank_from_sims(&bank_similarities(u.as_slice(), bank), candidates, j)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBin {
    pub rank: usize,
    pub count: u64,
}

/// Sparse unit-width histogram of ranks in `[1, bank_size]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub j: usize,
    pub bank_size: usize,
    pub bins: Vec<RankBin>,
    pub total: u64,
    /// Lower median of the recorded ranks.
    pub median: Option<usize>,
}

impl RankHistogram {
    pub fn from_ranks(j: usize, bank_size: usize, ranks: &[usize]) -> Self {
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        let mut bins: Vec<RankBin> = Vec::new();
        for &r in &sorted {
            match bins.last_mut() {
                Some(b) if b.rank == r => b.count += 1,
                _ => bins.push(RankBin { rank: r, count: 1 }),
            }
        }
        let median = lower_median(&sorted);
        Self { j, bank_size, bins, total: sorted.len() as u64, median }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,count\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{}", b.rank, b.count);
        }
        out
    }
}

/// Lower median of an ascending slice.
pub fn lower_median(sorted: &[usize]) -> Option<usize> {
    if sorted.is_empty() {
        None
    } else {
        Some(sorted[(sorted.len() - 1) / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nn1_acc: f64,
    pub nn20_acc: f64,
    pub linear_acc: Option<f64>,
    pub train_size: usize,
    pub test_size: usize,
}

/// 1-NN, 20-NN and optionally a linear probe on target-encoder features.
pub fn evaluate(
    params: &MlpParams,
    data: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    labels: &[u32],
    probe: Option<(&ProbeConfig, &mut SeededRng)>,
) -> Result<EvalReport> {
    let train = feature_set(params, data, train_idx, labels)?;
    let test = feature_set(params, data, test_idx, labels)?;
    let linear_acc = match probe {
        Some((cfg, rng)) => Some(linear_probe(&train, &test, cfg, rng)?),
        None => None,
    };
    Ok(EvalReport {
        nn1_acc: knn_eval(&train, &test, 1)?,
        nn20_acc: knn_eval(&train, &test, 20.min(train.len()))?,
        linear_acc,
        train_size: train.len(),
        test_size: test.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagConfig {
    pub constraint: ConstraintSpec,
    pub bank_capacity: usize,
    pub probes: usize,
    pub aug_bank: AugmentSpec,
    pub aug_aux: AugmentSpec,
    pub cross_dim: usize,
    pub seed: u64,
}

impl DiagConfig {
    pub fn new(constraint: ConstraintSpec, bank_capacity: usize, seed: u64) -> Self {
        Self {
            constraint,
            bank_capacity,
            probes: 512,
            aug_bank: AugmentSpec::default(),
            aug_aux: AugmentSpec::default(),
            cross_dim: 16,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub mode: String,
    pub k: usize,
    pub probes: usize,
    pub bank_size: usize,
    pub histogram: RankHistogram,
    pub median_rank: Option<usize>,
    /// Purity of the first `k` members of `C` (ordered by similarity to `u`).
    pub constrained_purity: Option<f64>,
    /// Purity of the unconstrained top-`k` of `M`.
    pub unconstrained_purity: Option<f64>,
    /// Purity of the unconstrained top-`m`, `m` the median rank.
    pub unconstrained_top_m_purity: Option<f64>,
    /// Mean `|C|` over probes.
    pub mean_candidates: f64,
}

struct ProbeView {
    sims: Vec<f64>,
    candidates: Vec<usize>,
    label: Option<u32>,
}

fn micro_purity(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Rebuilds a memory bank from the checkpoint's target encoder and probes it.
///
/// A probe set of `cfg.probes` samples is drawn on the probe stream; up to
/// `bank_capacity` of the remaining samples fill `M` with one augmented view
/// each, and `M′` with a second, independent view. Probes use the same two
/// views for `u` and `w`. Purity is measured against `truth`, falling back to
/// the dataset labels.
pub fn diagnostics_sweep(ck: &Checkpoint, data: &Dataset, cfg: &DiagConfig, truth: Option<&[u32]>) -> Result<DiagnosticsReport> {
    cfg.constraint.validate()?;
    let k = match cfg.constraint.k {
        crate::constraint::NeighborCount::Top(k) => k,
        crate::constraint::NeighborCount::All => return Err(CmsfError::BadConfig("diagnostics need a finite k".into())),
    };
    if data.len() < 2 {
        return Err(CmsfError::EmptySplit);
    }
    let truth_of = |i: usize| match truth {
        Some(t) => Some(t[i]),
        None => data.label(i),
    };
    let f = &ck.pair.target;
    let mut probe_rng = SeededRng::for_stream(cfg.seed, Stream::Probe);
    let probe_count = cfg.probes.min(data.len() - 1);
    let mut is_probe = vec![false; data.len()];
    let mut probes: Vec<usize> = index::sample(&mut probe_rng, data.len(), probe_count).into_vec();
    probes.sort_unstable();
    for &p in &probes {
        is_probe[p] = true;
    }
    let mut rest: Vec<usize> = (0..data.len()).filter(|&i| !is_probe[i]).collect();
    rand::seq::SliceRandom::shuffle(rest.as_mut_slice(), &mut probe_rng);
    rest.truncate(cfg.bank_capacity);

    let mut aug_rng = SeededRng::for_stream(cfg.seed, Stream::Augment);
    let mut views = |ids: &[usize]| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        ids.iter().map(|&i| Ok((augment(data.sample(i), &cfg.aug_bank, &mut aug_rng)?, augment(data.sample(i), &cfg.aug_aux, &mut aug_rng)?))).collect()
    };
    let bank_views = views(&rest)?;
    let probe_views = views(&probes)?;
    let encode = |v: &[(Vec<f64>, Vec<f64>)]| -> Result<Vec<(UnitVec, UnitVec)>> {
        v.par_iter().map(|(a, b)| Ok((l2_normalize(&f.apply(a)?)?, l2_normalize(&f.apply(b)?)?))).collect()
    };
    let bank_emb = encode(&bank_views)?;
    let probe_emb = encode(&probe_views)?;

    let head = ck.head.clone().map(PseudoClassifier::Mlp);
    let pseudo_of = |h: &Option<PseudoClassifier>, u: &UnitVec| -> Result<Option<PseudoLabel>> {
        h.as_ref().map(|h| h.predict(u.as_slice())).transpose()
    };
    let mut bank = MemoryBank::new(cfg.bank_capacity.max(1));
    let mut entries = Vec::with_capacity(rest.len());
    for (&i, (u, _)) in rest.iter().zip(&bank_emb) {
        let label = data.label(i);
        let pseudo = if label.is_none() { pseudo_of(&head, u)? } else { None };
        entries.push(BankEntry::new(u.clone(), i).with_label(label).with_pseudo(pseudo));
    }
    bank.push(entries);
    let aux_lookup: Vec<Option<&UnitVec>> = {
        let mut v = vec![None; data.len()];
        for (&i, (_, w)) in rest.iter().zip(&bank_emb) {
            v[i] = Some(w);
        }
        v
    };
    let aux = AlignedBank::build(&bank, |i| aux_lookup[i]);
    let frozen = match cfg.constraint.mode {
        ConstraintMode::Cross { .. } => Some(frozen_projection(data, cfg.cross_dim, &mut SeededRng::for_stream(cfg.seed, Stream::Projection))?),
        _ => None,
    };
    let frozen_bank = frozen.as_ref().map(|fr| AlignedBank::build(&bank, |i| Some(&fr[i])));

    let views: Vec<ProbeView> = probes
        .par_iter()
        .zip(&probe_emb)
        .map(|(&i, (u, w))| -> Result<ProbeView> {
            let sims = bank_similarities(u.as_slice(), &bank);
            let candidates = match cfg.constraint.mode {
                ConstraintMode::None => (0..bank.len()).collect(),
                ConstraintMode::SelfAug { k_prime } => constrain_self(w, &bank, &aux, k_prime)?,
                ConstraintMode::Cross { k_prime } => {
                    let fr = frozen.as_ref().expect("projection built for cross mode");
                    constrain_cross(&fr[i], frozen_bank.as_ref().expect("frozen bank"), &bank, k_prime)?
                }
                ConstraintMode::Supervised => constrain_sup(data.label(i), &bank)?,
                ConstraintMode::SemiSupervised { threshold } => {
                    let q = match data.label(i) {
                        Some(l) => Some(PseudoLabel { label: l, conf: 1.0 }),
                        None => pseudo_of(&head, u)?,
                    };
                    constrain_semi(q, threshold, &bank).0
                }
                ConstraintMode::SemiBasic => constrain_semi_basic(data.label(i), &bank).0,
            };
            Ok(ProbeView { sims, candidates, label: truth_of(i) })
        })
        .collect::<Result<_>>()?;

    let mut ranks = Vec::new();
    let (mut c_hits, mut c_total, mut u_hits, mut u_total) = (0, 0, 0, 0);
    let bank_truth: Vec<Option<u32>> = bank.iter().map(|e| truth_of(e.dataset_idx)).collect();
    let count = |positions: &mut dyn Iterator<Item = usize>, q: Option<u32>, hits: &mut usize, total: &mut usize| {
        let Some(q) = q else { return };
        for p in positions {
            if let Some(l) = bank_truth[p] {
                *total += 1;
                *hits += usize::from(l == q);
            }
        }
    };
    let mut cand_sum = 0usize;
    for v in &views {
        cand_sum += v.candidates.len();
        if v.candidates.len() >= k {
            ranks.push(constrained_rank_from_sims(&v.sims, &v.candidates, k)?);
        }
        let scored = v.candidates.iter().map(|&p| (p, v.sims[p])).collect();
        count(&mut top_n(scored, k).into_iter().map(|(p, _)| p), v.label, &mut c_hits, &mut c_total);
        let all = v.sims.iter().copied().enumerate().collect();
        count(&mut top_n(all, k).into_iter().map(|(p, _)| p), v.label, &mut u_hits, &mut u_total);
    }
    let histogram = RankHistogram::from_ranks(k, bank.len(), &ranks);
    let median = histogram.median;
    let top_m_purity = median.and_then(|m| {
        let (mut hits, mut total) = (0, 0);
        for v in &views {
            let mut order: Vec<(usize, f64)> = v.sims.iter().copied().enumerate().collect();
            order.sort_unstable_by(rank_order);
            count(&mut order.into_iter().take(m).map(|(p, _)| p), v.label, &mut hits, &mut total);
        }
        micro_purity(hits, total)
    });
    Ok(DiagnosticsReport {
        mode: cfg.constraint.mode.name().to_string(),
        k,
        probes: probes.len(),
        bank_size: bank.len(),
        histogram,
        median_rank: median,
        constrained_purity: micro_purity(c_hits, c_total),
        unconstrained_purity: micro_purity(u_hits, u_total),
        unconstrained_top_m_purity: top_m_purity,
        mean_candidates: if views.is_empty() { 0.0 } else { cand_sum as f64 / views.len() as f64 },
    })
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CmsfError::BadConfig(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
