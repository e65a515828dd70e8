//! Mean-shift training with constrained neighbour sets.
//!
//! One step over a mini-batch `B`:
//!
//! 1. For each sample in batch order draw `T1(x)` then `T2(x)` from the
//!    augmentation stream.
//! 2. `u = norm(f(T1 x))`, `v = norm(h(g(T2 x)))`.
//! 3. Build `C` and `S` against the bank as it was before this batch.
//! 4. Per-query loss gradient w.r.t. `v` is scaled by `1/|B|` and
//!    backpropagated through normalization, `h` and `g`; parameter gradients
//!    are summed in batch order starting from zero.
//! 5. SGD step on `g` and `h`, then the EMA update of `f`.
//! 6. Push the `u`'s into the bank in batch order; evictions feed the cache.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{fit_end_to_end, EndToEndConfig, TrunkClassifier};
use crate::constraint::{
    bank_similarities, constrain_cross, constrain_self, constrain_semi, constrain_semi_basic, constrain_sup, frozen_projection,
    select_topk_from_sims, top_n, ConstraintMode, ConstraintSpec, HeadConfig, HeadKind, NeighborCount, NeighborSet, PseudoClassifier,
    PseudoHead,
};
use crate::data::{augment, AugmentSpec, Dataset};
use crate::encoder::{Checkpoint, EncoderPair, EncoderShape, LrSchedule, MlpParams, SgdState, Tape};
use crate::error::{CmsfError, Result};
use crate::eval::{constrained_rank_from_sims, evaluate, lower_median};
use crate::memory::{build_aux_bank, AlignedBank, BankEntry, EpochCache, MemoryBank, PseudoLabel};
use crate::numeric::{l2_normalize, l2_normalize_backward, sq_dist, SeededRng, Stream, UnitVec};

/// `(1/|S|) Σ ||v − z||²` and its gradient `(2/|S|) Σ (v − z)`.
pub fn cmsf_loss(v: &[f64], members: &[&[f64]]) -> Result<(f64, Vec<f64>)> {
    if members.is_empty() {
        return Err(CmsfError::EmptySet);
    }
    let inv = 1.0 / members.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; v.len()];
    for z in members {
        if z.len() != v.len() {
            return Err(CmsfError::DimMismatch { expected: v.len(), got: z.len() });
        }
        loss += sq_dist(v, z);
        for ((g, &a), &b) in grad.iter_mut().zip(v).zip(z.iter()) {
            *g += a - b;
        }
    }
    for g in &mut grad {
        *g *= 2.0 * inv;
    }
    Ok((loss * inv, grad))
}

/// Constrained term plus `w_aux` times the unconstrained (plain mean-shift)
/// term.
pub fn combined_loss(v: &[f64], constrained: &[&[f64]], unconstrained: &[&[f64]], w_aux: f64) -> Result<(f64, Vec<f64>)> {
    let (lc, mut g) = cmsf_loss(v, constrained)?;
    if w_aux == 0.0 {
        return Ok((lc, g));
    }
    let (lu, gu) = cmsf_loss(v, unconstrained)?;
    for (a, b) in g.iter_mut().zip(&gu) {
        *a += w_aux * b;
    }
    Ok((lc + w_aux * lu, g))
}

/// Online branch activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct OnlineForward {
    pub pre_norm: Vec<f64>,
    pub v: UnitVec,
    tape_g: Tape,
    tape_h: Tape,
}

pub fn online_forward(online: &MlpParams, predictor: &MlpParams, x: &[f64]) -> Result<OnlineForward> {
    let (emb, tape_g) = online.forward(x)?;
    let (pre_norm, tape_h) = predictor.forward(&emb)?;
    let v = l2_normalize(&pre_norm)?;
    Ok(OnlineForward { pre_norm, v, tape_g, tape_h })
}

/// Gradients of `grad_v · v` w.r.t. the online encoder and predictor.
pub fn online_backward(online: &MlpParams, predictor: &MlpParams, fwd: &OnlineForward, grad_v: &[f64]) -> Result<(MlpParams, MlpParams)> {
    let g_pre = l2_normalize_backward(&fwd.pre_norm, grad_v)?;
    let (gh, g_emb) = predictor.backward(&fwd.tape_h, &g_pre)?;
    let (gg, _) = online.backward(&fwd.tape_g, &g_emb)?;
    Ok((gg, gh))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    /// EMA coefficient `m` of the target encoder.
    pub ema_momentum: f64,
    pub bank_capacity: usize,
    pub constraint: ConstraintSpec,
    pub aug1: AugmentSpec,
    pub aug2: AugmentSpec,
    /// Multiplies the constrained loss term.
    pub loss_weight: f64,
    /// Weight of the unconstrained mean-shift term.
    pub msf_aux_weight: f64,
    pub head_kind: HeadKind,
    pub head: HeadConfig,
    /// Pseudo-label head refits per epoch (semi mode).
    pub head_per_epoch: usize,
    pub hidden: usize,
    pub embed: usize,
    pub predictor_hidden: usize,
    /// Dimension of the frozen projection used by cross mode.
    pub cross_dim: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults for `mode`: top-5 for self/cross/none, top-10 with
    /// labels; the auxiliary mean-shift term is on only in self mode.
    pub fn for_mode(mode: ConstraintMode) -> Self {
        let k = match mode {
            ConstraintMode::Supervised | ConstraintMode::SemiSupervised { .. } | ConstraintMode::SemiBasic => 10,
            _ => 5,
        };
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: 0.05,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            ema_momentum: 0.99,
            bank_capacity: 4096,
            constraint: ConstraintSpec::new(mode, NeighborCount::Top(k)),
            aug1: AugmentSpec::default(),
            aug2: AugmentSpec::default(),
            loss_weight: 1.0,
            msf_aux_weight: if matches!(mode, ConstraintMode::SelfAug { .. }) { 1.0 } else { 0.0 },
            head_kind: HeadKind::Mlp,
            head: HeadConfig::default(),
            head_per_epoch: 2,
            hidden: 64,
            embed: 32,
            predictor_hidden: 64,
            cross_dim: 16,
            seed: 0,
        }
    }

    pub fn shape(&self, input: usize) -> EncoderShape {
        EncoderShape { input, hidden: self.hidden, embed: self.embed, predictor_hidden: self.predictor_hidden }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CmsfError::BadConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.bank_capacity == 0 {
            return bad("bank_capacity must be >= 1".into());
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad("learning rate must be > 0, weight decay >= 0, momentum in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum {} outside [0, 1]", self.ema_momentum));
        }
        if !(self.loss_weight >= 0.0) || !(self.msf_aux_weight >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if self.hidden == 0 || self.embed == 0 || self.predictor_hidden == 0 || self.cross_dim == 0 {
            return bad("network widths must be >= 1".into());
        }
        if self.msf_aux_weight > 0.0 && self.constraint.k == NeighborCount::All {
            return bad("the auxiliary mean-shift term needs a finite k".into());
        }
        if let HeadKind::Knn { k } = self.head_kind {
            if k == 0 {
                return bad("knn head needs k >= 1".into());
            }
        }
        self.aug1.validate()?;
        self.aug2.validate()?;
        self.constraint.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: u32,
    pub steps: u64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub loss_cmsf: f64,
    pub loss_msf_aux: Option<f64>,
    pub loss_total: f64,
    /// Share of bank members of `S` carrying the query's true class.
    pub constrained_purity: Option<f64>,
    pub min_step_purity: Option<f64>,
    /// Same measure for the unconstrained top-k of `M`.
    pub unconstrained_purity: Option<f64>,
    /// Lower median over queries of the rank in `M` of the k-th member of `C`.
    pub median_rank: Option<usize>,
    pub mean_candidates: f64,
    /// Semi modes: share of unlabeled queries searching all of `M`.
    pub relaxed_fraction: Option<f64>,
    pub confident_fraction: Option<f64>,
    pub pseudo_acc_confident: Option<f64>,
    pub nn1_acc: Option<f64>,
    pub nn20_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryTrace {
    pub dataset_idx: usize,
    pub u: UnitVec,
    pub v: UnitVec,
    /// Weighted total loss of this query.
    pub loss: f64,
    pub set_size: usize,
    pub candidates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub purity: Option<f64>,
    pub queries: Vec<QueryTrace>,
}

/// Held-out evaluation run at the end of scheduled epochs.
#[derive(Clone, Debug)]
pub struct EvalPlan {
    pub data: Dataset,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub labels: Vec<u32>,
    pub every: usize,
}

struct QueryOut {
    trace: QueryTrace,
    loss_c: f64,
    loss_u: Option<f64>,
    grads: (MlpParams, MlpParams),
    c_hits: usize,
    c_total: usize,
    u_hits: usize,
    u_total: usize,
    rank: Option<usize>,
    pseudo: Option<PseudoLabel>,
    relaxed: Option<bool>,
}

#[derive(Default)]
struct EpochStats {
    queries: usize,
    loss_c: f64,
    loss_u: f64,
    loss_total: f64,
    c_hits: usize,
    c_total: usize,
    u_hits: usize,
    u_total: usize,
    min_step_purity: Option<f64>,
    ranks: Vec<usize>,
    candidates: usize,
    unlabeled: usize,
    relaxed: usize,
    confident: usize,
    confident_correct: usize,
    confident_known: usize,
    lr: f64,
}

pub struct Trainer {
    data: Dataset,
    truth: Vec<Option<u32>>,
    cfg: TrainConfig,
    pair: EncoderPair,
    sgd: SgdState,
    bank: MemoryBank,
    cache: EpochCache,
    frozen: Option<Vec<UnitVec>>,
    head: Option<PseudoClassifier>,
    labeled_feats: Vec<Option<UnitVec>>,
    aug_rng: SeededRng,
    shuffle_rng: SeededRng,
    head_rng: SeededRng,
    epoch: u32,
    step: u64,
    steps_per_epoch: usize,
    pool: Option<rayon::ThreadPool>,
    eval: Option<EvalPlan>,
}

impl Trainer {
    pub fn new(data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mode = cfg.constraint.mode;
        let needs_labels = matches!(mode, ConstraintMode::Supervised | ConstraintMode::SemiSupervised { .. } | ConstraintMode::SemiBasic);
        if needs_labels && !data.has_labels() {
            return Err(CmsfError::NoLabeledData);
        }
        if mode == ConstraintMode::Supervised && data.labeled_indices().len() != data.len() {
            return Err(CmsfError::NoLabel);
        }
        let pair = EncoderPair::init(&cfg.shape(data.dim()), cfg.ema_momentum, &mut SeededRng::for_stream(cfg.seed, Stream::Init))?;
        let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
        let total = (steps_per_epoch * cfg.epochs) as u64;
        let sgd = SgdState::new(&[&pair.online, &pair.predictor], cfg.base_lr, cfg.sgd_momentum, cfg.weight_decay, total, LrSchedule::Cosine);
        let frozen = match mode {
            ConstraintMode::Cross { .. } => Some(frozen_projection(data, cfg.cross_dim, &mut SeededRng::for_stream(cfg.seed, Stream::Projection))?),
            _ => None,
        };
        let mut t = Self {
            truth: (0..data.len()).map(|i| data.label(i)).collect(),
            data: data.clone(),
            cfg: cfg.clone(),
            pair,
            sgd,
            bank: MemoryBank::new(cfg.bank_capacity),
            cache: EpochCache::new(data.len()),
            frozen,
            head: None,
            labeled_feats: vec![None; data.len()],
            aug_rng: SeededRng::for_stream(cfg.seed, Stream::Augment),
            shuffle_rng: SeededRng::for_stream(cfg.seed, Stream::Shuffle),
            head_rng: SeededRng::for_stream(cfg.seed, Stream::Head),
            epoch: 0,
            step: 0,
            steps_per_epoch,
            pool: None,
            eval: None,
        };
        if matches!(mode, ConstraintMode::SemiSupervised { .. }) {
            // Seed the pseudo-label head with clean features from the initial
            // target encoder so the first epoch already has predictions.
            for i in t.data.labeled_indices() {
                t.labeled_feats[i] = Some(l2_normalize(&t.pair.target.apply(t.data.sample(i))?)?);
            }
            t.refit_head()?;
        }
        Ok(t)
    }

    /// Ground-truth labels used only for purity and pseudo-label accuracy.
    pub fn with_truth(mut self, labels: &[u32]) -> Result<Self> {
        if labels.len() != self.data.len() {
            return Err(CmsfError::DimMismatch { expected: self.data.len(), got: labels.len() });
        }
        self.truth = labels.iter().map(|&l| Some(l)).collect();
        Ok(self)
    }

    pub fn with_eval(mut self, plan: EvalPlan) -> Self {
        self.eval = Some(plan);
        self
    }

    /// Bounds worker fan-out; `0` uses the global pool. Results do not depend
    /// on the thread count.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = if threads == 0 {
            None
        } else {
            Some(rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| CmsfError::BadConfig(e.to_string()))?)
        };
        Ok(self)
    }

    pub fn pair(&self) -> &EncoderPair {
        &self.pair
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn cache(&self) -> &EpochCache {
        &self.cache
    }

    pub fn head(&self) -> Option<&PseudoClassifier> {
        self.head.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            pair: self.pair.clone(),
            head: self.head.as_ref().and_then(|h| h.mlp_head().cloned()),
            optimizer: Some(self.sgd.clone()),
            step: self.step,
            epoch: self.epoch,
        }
    }

    pub fn into_parts(self) -> (EncoderPair, Option<PseudoClassifier>) {
        (self.pair, self.head)
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    fn refit_head(&mut self) -> Result<()> {
        let (feats, labels): (Vec<UnitVec>, Vec<u32>) = self
            .labeled_feats
            .iter()
            .enumerate()
            .filter_map(|(i, f)| Some((f.clone()?, self.data.label(i)?)))
            .unzip();
        let classes = self.data.num_classes() as usize;
        self.head = Some(PseudoClassifier::fit(self.cfg.head_kind, &feats, &labels, classes, &self.cfg.head, self.epoch, &mut self.head_rng)?);
        Ok(())
    }

    /// One optimization step over `batch` (dataset indices).
    pub fn step(&mut self, batch: &[usize]) -> Result<StepTrace> {
        self.step_inner(batch).map(|(trace, _)| trace)
    }

    fn step_inner(&mut self, batch: &[usize]) -> Result<(StepTrace, Vec<QueryOut>)> {
        if batch.is_empty() {
            return Err(CmsfError::BadConfig("empty mini-batch".into()));
        }
        let mut views = Vec::with_capacity(batch.len());
        for &i in batch {
            let x = self.data.sample(i);
            let x1 = augment(x, &self.cfg.aug1, &mut self.aug_rng)?;
            let x2 = augment(x, &self.cfg.aug2, &mut self.aug_rng)?;
            views.push((i, x1, x2));
        }
        let mode = self.cfg.constraint.mode;
        let aux = matches!(mode, ConstraintMode::SelfAug { .. }).then(|| build_aux_bank(&self.bank, &self.cache));
        let frozen_bank = self.frozen.as_ref().map(|fr| AlignedBank::build(&self.bank, |i| Some(&fr[i])));
        let bank_truth: Vec<Option<u32>> = self.bank.iter().map(|e| self.truth[e.dataset_idx]).collect();
        let scale = 1.0 / batch.len() as f64;
        let ctx = StepCtx { t: self, aux: aux.as_ref(), frozen_bank: frozen_bank.as_ref(), bank_truth: &bank_truth, scale };
        let outs: Vec<QueryOut> = self.install(|| views.par_iter().map(|(i, x1, x2)| ctx.query(*i, x1, x2)).collect::<Result<_>>())?;

        let mut gg = self.pair.online.zeros_like();
        let mut gh = self.pair.predictor.zeros_like();
        for o in &outs {
            gg.add_scaled(&o.grads.0, 1.0)?;
            gh.add_scaled(&o.grads.1, 1.0)?;
        }
        let lr = {
            let EncoderPair { online, predictor, .. } = &mut self.pair;
            self.sgd.step(&mut [online, predictor], &[&gg, &gh])?
        };
        self.pair.momentum_update()?;

        let entries: Vec<BankEntry> = outs
            .iter()
            .map(|o| {
                let i = o.trace.dataset_idx;
                BankEntry::new(o.trace.u.clone(), i).with_label(self.data.label(i)).with_pseudo(o.pseudo)
            })
            .collect();
        let evicted = self.bank.push(entries);
        self.cache.absorb(&evicted);
        if matches!(mode, ConstraintMode::SemiSupervised { .. }) {
            for o in &outs {
                let i = o.trace.dataset_idx;
                if self.data.label(i).is_some() {
                    self.labeled_feats[i] = Some(o.trace.u.clone());
                }
            }
        }
        self.step += 1;

        let (hits, total) = outs.iter().fold((0, 0), |(h, t), o| (h + o.c_hits, t + o.c_total));
        let trace = StepTrace {
            step: self.step,
            lr,
            loss: outs.iter().map(|o| o.trace.loss).sum::<f64>() * scale,
            purity: (total > 0).then(|| hits as f64 / total as f64),
            queries: outs.iter().map(|o| o.trace.clone()).collect(),
        };
        Ok((trace, outs))
    }

    /// Runs one epoch, calling `on_step` after every step.
    pub fn run_epoch_with(&mut self, mut on_step: impl FnMut(&StepTrace)) -> Result<MetricsRecord> {
        self.cache.set_epoch(self.epoch);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let batches: Vec<Vec<usize>> = order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect();
        let nb = batches.len();
        let semi = matches!(self.cfg.constraint.mode, ConstraintMode::SemiSupervised { .. });
        let threshold = match self.cfg.constraint.mode {
            ConstraintMode::SemiSupervised { threshold } => threshold,
            _ => 1.0,
        };
        let mut st = EpochStats::default();
        for (b, batch) in batches.iter().enumerate() {
            let (trace, outs) = self.step_inner(batch)?;
            st.lr = trace.lr;
            if let Some(p) = trace.purity {
                st.min_step_purity = Some(st.min_step_purity.map_or(p, |m: f64| m.min(p)));
            }
            for o in &outs {
                st.queries += 1;
                st.loss_c += o.loss_c;
                st.loss_u += o.loss_u.unwrap_or(0.0);
                st.loss_total += o.trace.loss;
                st.c_hits += o.c_hits;
                st.c_total += o.c_total;
                st.u_hits += o.u_hits;
                st.u_total += o.u_total;
                st.candidates += o.trace.candidates;
                st.ranks.extend(o.rank);
                if let Some(r) = o.relaxed {
                    st.unlabeled += 1;
                    st.relaxed += usize::from(r);
                }
                if let Some(p) = o.pseudo.filter(|p| p.conf >= threshold) {
                    st.confident += 1;
                    if let Some(t) = self.truth[o.trace.dataset_idx] {
                        st.confident_known += 1;
                        st.confident_correct += usize::from(t == p.label);
                    }
                }
            }
            on_step(&trace);
            let h = self.cfg.head_per_epoch;
            if semi && h > 0 && (b + 1) * h / nb > b * h / nb {
                self.refit_head()?;
            }
        }
        self.epoch += 1;
        self.finish_epoch(st)
    }

    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        self.run_epoch_with(|_| {})
    }

    fn finish_epoch(&mut self, mut st: EpochStats) -> Result<MetricsRecord> {
        let n = st.queries.max(1) as f64;
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        st.ranks.sort_unstable();
        let semi_like = matches!(self.cfg.constraint.mode, ConstraintMode::SemiSupervised { .. } | ConstraintMode::SemiBasic);
        let (nn1, nn20) = match &self.eval {
            Some(plan) if plan.every > 0 && (self.epoch as usize).is_multiple_of(plan.every) => {
                let r = evaluate(&self.pair.target, &plan.data, &plan.train_idx, &plan.test_idx, &plan.labels, None)?;
                (Some(r.nn1_acc), Some(r.nn20_acc))
            }
            _ => (None, None),
        };
        Ok(MetricsRecord {
            epoch: self.epoch,
            steps: self.step,
            lr: st.lr,
            loss_cmsf: st.loss_c / n,
            loss_msf_aux: (self.cfg.msf_aux_weight > 0.0).then(|| st.loss_u / n),
            loss_total: st.loss_total / n,
            constrained_purity: ratio(st.c_hits, st.c_total),
            min_step_purity: st.min_step_purity,
            unconstrained_purity: ratio(st.u_hits, st.u_total),
            median_rank: lower_median(&st.ranks),
            mean_candidates: st.candidates as f64 / n,
            relaxed_fraction: if semi_like { ratio(st.relaxed, st.unlabeled) } else { None },
            confident_fraction: if semi_like { ratio(st.confident, st.unlabeled) } else { None },
            pseudo_acc_confident: ratio(st.confident_correct, st.confident_known),
            nn1_acc: nn1,
            nn20_acc: nn20,
        })
    }
}

fn members<'a>(s: &'a NeighborSet, u: &'a UnitVec, bank: &'a MemoryBank) -> Vec<&'a [f64]> {
    s.embeddings(u, bank).collect()
}

struct StepCtx<'a> {
    t: &'a Trainer,
    aux: Option<&'a AlignedBank>,
    frozen_bank: Option<&'a AlignedBank>,
    bank_truth: &'a [Option<u32>],
    scale: f64,
}

impl StepCtx<'_> {
    fn query(&self, i: usize, x1: &[f64], x2: &[f64]) -> Result<QueryOut> {
        let t = self.t;
        let cfg = &t.cfg;
        let bank = &t.bank;
        let u = l2_normalize(&t.pair.target.apply(x1)?)?;
        let fwd = online_forward(&t.pair.online, &t.pair.predictor, x2)?;
        let sims = bank_similarities(u.as_slice(), bank);
        let label = t.data.label(i);

        let mut pseudo = None;
        let mut relaxed = None;
        let candidates: Vec<usize> = match cfg.constraint.mode {
            ConstraintMode::None => (0..bank.len()).collect(),
            ConstraintMode::SelfAug { .. } | ConstraintMode::Cross { .. } if bank.is_empty() => Vec::new(),
            ConstraintMode::SelfAug { k_prime } => {
                let w = t.cache.get(i).unwrap_or(&u);
                constrain_self(w, bank, self.aux.expect("aux bank built in self mode"), k_prime)?
            }
            ConstraintMode::Cross { k_prime } => {
                let fr = t.frozen.as_ref().expect("projection built in cross mode");
                constrain_cross(&fr[i], self.frozen_bank.expect("frozen bank built in cross mode"), bank, k_prime)?
            }
            ConstraintMode::Supervised => constrain_sup(label, bank)?,
            ConstraintMode::SemiSupervised { threshold } => {
                let q = match label {
                    Some(l) => Some(PseudoLabel { label: l, conf: 1.0 }),
                    None => {
                        pseudo = t.head.as_ref().map(|h| h.predict(u.as_slice())).transpose()?;
                        pseudo
                    }
                };
                let (c, r) = constrain_semi(q, threshold, bank);
                if label.is_none() {
                    relaxed = Some(r);
                }
                c
            }
            ConstraintMode::SemiBasic => {
                let (c, r) = constrain_semi_basic(label, bank);
                if label.is_none() {
                    relaxed = Some(r);
                }
                c
            }
        };

        let spec = cfg.constraint;
        let s_c = select_topk_from_sims(&sims, &candidates, spec.k, spec.include_target);
        
        let (loss_c, grad_c) = cmsf_loss(fwd.v.as_slice(), &members(&s_c, &u, bank))?;
        let k_top = match spec.k {
            NeighborCount::Top(k) => k,
            NeighborCount::All => candidates.len().max(1),
        };
        let (loss_u, grad_u) = if cfg.msf_aux_weight > 0.0 {
            let all: Vec<usize> = (0..bank.len()).collect();
            let s_u = select_topk_from_sims(&sims, &all, spec.k, spec.include_target);
            let (l, g) = cmsf_loss(fwd.v.as_slice(), &members(&s_u, &u, bank))?;
            (Some(l), Some(g))
        } else {
            (None, None)
        };
        let mut loss = cfg.loss_weight * loss_c;
        let mut grad_v: Vec<f64> = grad_c.iter().map(|g| cfg.loss_weight * g).collect();
        if let (Some(l), Some(g)) = (loss_u, &grad_u) {
            loss += cfg.msf_aux_weight * l;
            for (a, b) in grad_v.iter_mut().zip(g) {
                *a += cfg.msf_aux_weight * b;
            }
        }
        for g in &mut grad_v {
            *g *= self.scale;
        }
        let grads = online_backward(&t.pair.online, &t.pair.predictor, &fwd, &grad_v)?;

        let q_truth = t.truth[i];
        let count = |positions: &mut dyn Iterator<Item = usize>| -> (usize, usize) {
            let Some(q) = q_truth else { return (0, 0) };
            positions.fold((0, 0), |(h, n), p| match self.bank_truth[p] {
                Some(l) => (h + usize::from(l == q), n + 1),
                None => (h, n),
            })
        };
        let (c_hits, c_total) = count(&mut s_c.positions());
        let top_u = top_n(sims.iter().copied().enumerate().collect(), k_top.min(bank.len()));
        let (u_hits, u_total) = count(&mut top_u.into_iter().map(|(p, _)| p));
        let rank = if matches!(spec.k, NeighborCount::Top(_)) && candidates.len() >= k_top {
            Some(constrained_rank_from_sims(&sims, &candidates, k_top)?)
        } else {
            None
        };
        Ok(QueryOut {
            trace: QueryTrace { dataset_idx: i, u, v: fwd.v.clone(), loss, set_size: s_c.len(), candidates: candidates.len() },
            loss_c,
            loss_u,
            grads,
            c_hits,
            c_total,
            u_hits,
            u_total,
            rank,
            pseudo,
            relaxed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub pair: EncoderPair,
    pub metrics: Vec<MetricsRecord>,
    pub head: Option<PseudoHead>,
}

/// Full training run without evaluation hooks.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(data, cfg)?;
    let metrics = (0..cfg.epochs).map(|_| t.run_epoch()).collect::<Result<Vec<_>>>()?;
    let (pair, head) = t.into_parts();
    Ok(TrainOutcome { pair, metrics, head: head.and_then(|h| h.mlp_head().cloned()) })
}

/// Encoder trunk plus linear classifier trained end to end with softmax
/// cross-entropy on the labeled samples, using the same optimizer, schedule
/// and first augmentation as [`train`].
pub fn train_xent_baseline(data: &Dataset, cfg: &TrainConfig) -> Result<TrunkClassifier> {
    cfg.validate()?;
    let labeled = data.labeled_indices();
    if labeled.is_empty() {
        return Err(CmsfError::NoLabels);
    }
    let trunk = MlpParams::init(&cfg.shape(data.dim()).trunk_dims(), &mut SeededRng::for_stream(cfg.seed, Stream::Init))?;
    let mut model = TrunkClassifier::new(trunk, data.num_classes() as usize)?;
    let fit = EndToEndConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.base_lr,
        momentum: cfg.sgd_momentum,
        weight_decay: cfg.weight_decay,
        schedule: LrSchedule::Cosine,
        augment: cfg.aug1,
    };
    fit_end_to_end(
        &mut model,
        data,
        &labeled,
        data.labels(),
        &fit,
        &mut SeededRng::for_stream(cfg.seed, Stream::Shuffle),
        &mut SeededRng::for_stream(cfg.seed, Stream::Augment),
    )?;
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub stage_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch at which the learning rate is multiplied by `lr_factor`.
    pub milestone_epoch: usize,
    pub lr_factor: f64,
    pub threshold: f64,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            stage_epochs: 20,
            batch_size: 64,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0,
            milestone_epoch: 15,
            lr_factor: 0.1,
            threshold: 0.9,
            augment: AugmentSpec::IDENTITY,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub stage1: TrunkClassifier,
    pub stage2: TrunkClassifier,
    pub pseudo_labeled: usize,
    /// Share of unlabeled samples whose confidence reached the threshold.
    pub pseudo_fraction: f64,
}

/// Two-stage fine-tuning of the target encoder: first on the labeled samples,
/// then (continuing from stage 1) on labeled plus confidently pseudo-labeled
/// samples.
pub fn semi_finetune(pair: &EncoderPair, data: &Dataset, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    let labeled = data.labeled_indices();
    if labeled.is_empty() {
        return Err(CmsfError::NoLabeledData);
    }
    let mut shuffle = SeededRng::for_stream(cfg.seed, Stream::Shuffle);
    let mut aug = SeededRng::for_stream(cfg.seed, Stream::Augment);
    let fit_cfg = |n: usize| EndToEndConfig {
        epochs: cfg.stage_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        schedule: LrSchedule::Step { at_step: (cfg.milestone_epoch * n.div_ceil(cfg.batch_size.max(1))) as u64, factor: cfg.lr_factor },
        augment: cfg.augment,
    };
    let mut model = TrunkClassifier::new(pair.target.clone(), data.num_classes() as usize)?;
    fit_end_to_end(&mut model, data, &labeled, data.labels(), &fit_cfg(labeled.len()), &mut shuffle, &mut aug)?;
    let stage1 = model.clone();

    let unlabeled: Vec<usize> = (0..data.len()).filter(|&i| data.label(i).is_none()).collect();
    let predictions: Vec<(u32, f64)> = unlabeled.par_iter().map(|&i| stage1.predict(data.sample(i))).collect::<Result<_>>()?;
    let mut labels = data.labels().to_vec();
    let mut union = labeled.clone();
    for (&i, &(c, conf)) in unlabeled.iter().zip(&predictions) {
        if conf >= cfg.threshold {
            labels[i] = c;
            union.push(i);
        }
    }
    union.sort_unstable();
    let pseudo_labeled = union.len() - labeled.len();
    fit_end_to_end(&mut model, data, &union, &labels, &fit_cfg(union.len()), &mut shuffle, &mut aug)?;
    Ok(FinetuneOutcome {
        stage1,
        stage2: model,
        pseudo_labeled,
        pseudo_fraction: if unlabeled.is_empty() { 0.0 } else { pseudo_labeled as f64 / unlabeled.len() as f64 },
    })
}
