//! Synthetic datasets, label corruption and embedding-space augmentations.
//!
//! Samples are always stored as f32-representable f64 values so the binary
//! file format (f32 on disk) round-trips bit-exactly.

mod io;

pub use io::{load_csv, load_dataset, save_csv, save_dataset, DATASET_MAGIC, DATASET_VERSION};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{CmsfError, Result};
use crate::numeric::{norm, Matrix, SeededRng, NORM_EPS};

/// Label value marking an unlabeled sample.
pub const UNLABELED: u32 = u32::MAX;

/// Per-coordinate standard deviation of every synthetic cluster.
pub const CLUSTER_STD: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Matrix,
    labels: Vec<u32>,
    coarse_labels: Option<Vec<u32>>,
    num_classes: u32,
    pub name: String,
}

impl PartialEq for Dataset {
    /// Content equality; the display name is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes
            && self.labels == other.labels
            && self.coarse_labels == other.coarse_labels
            && self.samples.shape() == other.samples.shape()
            && self.samples.as_slice().iter().zip(other.samples.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Dataset {
    pub fn new(
        samples: Matrix,
        labels: Vec<u32>,
        coarse_labels: Option<Vec<u32>>,
        num_classes: u32,
        name: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = samples.shape();
        if n == 0 {
            return Err(CmsfError::BadConfig("dataset needs at least one sample".into()));
        }
        if d < 2 {
            return Err(CmsfError::BadConfig(format!("dataset dimension must be >= 2, got {d}")));
        }
        if labels.len() != n {
            return Err(CmsfError::DimMismatch { expected: n, got: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != UNLABELED && l >= num_classes) {
            return Err(CmsfError::BadConfig(format!("label {bad} out of range for {num_classes} classes")));
        }
        if samples.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(CmsfError::BadConfig("non-finite sample value".into()));
        }
        if let Some(coarse) = &coarse_labels {
            if coarse.len() != n {
                return Err(CmsfError::DimMismatch { expected: n, got: coarse.len() });
            }
            // every fine class must map to exactly one superclass
            let mut map: Vec<Option<u32>> = vec![None; num_classes as usize];
            for (&f, &c) in labels.iter().zip(coarse) {
                if f == UNLABELED {
                    continue;
                }
                match map[f as usize] {
                    None => map[f as usize] = Some(c),
                    Some(prev) if prev != c => {
                        return Err(CmsfError::BadConfig(format!(
                            "fine class {f} maps to superclasses {prev} and {c}"
                        )))
                    }
                    _ => {}
                }
            }
        }
        let mut samples = samples;
        for v in samples.as_mut_slice() {
            *v = *v as f32 as f64;
        }
        Ok(Self { samples, labels, coarse_labels, num_classes, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<u32> {
        match self.labels[i] {
            UNLABELED => None,
            l => Some(l),
        }
    }

    pub fn coarse_labels(&self) -> Option<&[u32]> {
        self.coarse_labels.as_deref()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(|&l| l != UNLABELED)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] != UNLABELED).collect()
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let samples = Matrix::from_vec(indices.len(), d, data)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let coarse = self.coarse_labels.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect());
        Dataset::new(samples, labels, coarse, self.num_classes, self.name.clone())
    }

    /// Replaces fine labels with the superclass labels.
    pub fn with_coarse_as_labels(&self) -> Result<Self> {
        let coarse = self.coarse_labels.clone().ok_or(CmsfError::NoLabels)?;
        let num = coarse.iter().copied().max().map_or(0, |m| m + 1);
        Dataset::new(self.samples.clone(), coarse, None, num, format!("{}-coarse", self.name))
    }

    /// Random split into `(train, test)` index lists; `test_fraction` of the
    /// samples (rounded, at least one) go to the test side.
    pub fn split_indices(&self, test_fraction: f64, rng: &mut SeededRng) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(CmsfError::BadConfig(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let n = self.len();
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(usize::from(test_fraction > 0.0), n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let test = order.split_off(n - n_test);
        Ok((order, test))
    }

    /// Keeps labels on a class-stratified `fraction` of samples (at least one
    /// per present class) and marks the rest unlabeled.
    pub fn mask_labels(&self, fraction: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(CmsfError::BadConfig(format!("labeled fraction {fraction} outside [0, 1]")));
        }
        if !self.has_labels() {
            return Err(CmsfError::NoLabels);
        }
        let mut labels = vec![UNLABELED; self.len()];
        for class in 0..self.num_classes {
            let members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            let keep = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
            for j in index::sample(rng, members.len(), keep) {
                labels[members[j]] = class;
            }
        }
        Dataset::new(self.samples.clone(), labels, self.coarse_labels.clone(), self.num_classes, self.name.clone())
    }
}

/// Class means drawn from an isotropic Gaussian and rejected until every pair
/// is at least `cluster_sep` apart.
pub fn sample_separated_means(num_classes: usize, dim: usize, cluster_sep: f64, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    if num_classes == 0 || dim == 0 {
        return Err(CmsfError::BadConfig("class count and dimension must be >= 1".into()));
    }
    if !(cluster_sep > 0.0) || !cluster_sep.is_finite() {
        return Err(CmsfError::BadConfig(format!("cluster separation must be positive, got {cluster_sep}")));
    }
    // expected pairwise distance of N(0, s²I) means is s·sqrt(2·dim)
    let mut scale = 1.3 * cluster_sep / (2.0 * dim as f64).sqrt();
    let mut attempts = 0usize;
    loop {
        let means: Vec<Vec<f64>> =
            (0..num_classes).map(|_| (0..dim).map(|_| scale * rng.gaussian()).collect()).collect();
        let ok = (0..num_classes).all(|a| {
            (a + 1..num_classes).all(|b| crate::numeric::sq_dist(&means[a], &means[b]).sqrt() >= cluster_sep)
        });
        if ok {
            return Ok(means);
        }
        attempts += 1;
        if attempts.is_multiple_of(50) {
            scale *= 1.1;
        }
    }
}

fn draw_cluster(mean: &[f64], count: usize, std: f64, rng: &mut SeededRng, out: &mut Vec<f64>) {
    for _ in 0..count {
        out.extend(mean.iter().map(|m| m + std * rng.gaussian()));
    }
}

/// Flat Gaussian mixture: `per_class` points around each of `num_classes`
/// well-separated means, unit per-coordinate spread.
pub fn gen_mixture(num_classes: usize, per_class: usize, dim: usize, cluster_sep: f64, rng: &mut SeededRng) -> Result<Dataset> {
    if per_class == 0 {
        return Err(CmsfError::BadConfig("per_class must be >= 1".into()));
    }
    if dim < 2 {
        return Err(CmsfError::BadConfig(format!("dimension must be >= 2, got {dim}")));
    }
    let means = sample_separated_means(num_classes, dim, cluster_sep, rng)?;
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        draw_cluster(mean, per_class, CLUSTER_STD, rng, &mut data);
        labels.extend(std::iter::repeat_n(c as u32, per_class));
    }
    let samples = Matrix::from_vec(labels.len(), dim, data)?;
    Dataset::new(samples, labels, None, num_classes as u32, format!("mixture-{num_classes}x{per_class}-d{dim}"))
}

/// Superclass separation used by [`gen_hierarchical`].
pub const SUPER_SEP: f64 = 12.0;
/// Per-coordinate spread of subclass means around their superclass mean,
/// before scaling by `1/sqrt(dim)`.
pub const SUB_SPREAD: f64 = 4.0;

/// Two-level mixture: superclass means, subclass means scattered around them,
/// then points around each subclass mean. Fine labels are
/// `super * sub_per_super + sub`, coarse labels the superclass id.
pub fn gen_hierarchical(
    num_super: usize,
    sub_per_super: usize,
    per_sub: usize,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if sub_per_super == 0 || per_sub == 0 {
        return Err(CmsfError::BadConfig("all counts must be >= 1".into()));
    }
    if dim < 2 {
        return Err(CmsfError::BadConfig(format!("dimension must be >= 2, got {dim}")));
    }
    let supers = sample_separated_means(num_super, dim, SUPER_SEP, rng)?;
    let sub_std = SUB_SPREAD / (dim as f64).sqrt();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut coarse = Vec::new();
    for (s, smean) in supers.iter().enumerate() {
        for j in 0..sub_per_super {
            let sub_mean: Vec<f64> = smean.iter().map(|m| m + sub_std * rng.gaussian()).collect();
            draw_cluster(&sub_mean, per_sub, CLUSTER_STD * 0.5, rng, &mut data);
            let fine = (s * sub_per_super + j) as u32;
            labels.extend(std::iter::repeat_n(fine, per_sub));
            coarse.extend(std::iter::repeat_n(s as u32, per_sub));
        }
    }
    let num_classes = (num_super * sub_per_super) as u32;
    let samples = Matrix::from_vec(labels.len(), dim, data)?;
    Dataset::new(samples, labels, Some(coarse), num_classes, format!("hier-{num_super}x{sub_per_super}x{per_sub}-d{dim}"))
}

/// Corrupts exactly `round(rate · L)` of the `L` labeled samples, each to a
/// uniformly chosen different class. The input is left untouched.
pub fn inject_label_noise(d: &Dataset, rate: f64, rng: &mut SeededRng) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(CmsfError::BadConfig(format!("noise rate {rate} outside [0, 1]")));
    }
    let labeled = d.labeled_indices();
    if labeled.is_empty() {
        return Err(CmsfError::NoLabels);
    }
    let count = (rate * labeled.len() as f64).round() as usize;
    if count > 0 && d.num_classes < 2 {
        return Err(CmsfError::BadConfig("label noise needs at least two classes".into()));
    }
    let mut labels = d.labels.clone();
    for j in index::sample(rng, labeled.len(), count) {
        let i = labeled[j];
        let r = rng.below(d.num_classes as usize - 1) as u32;
        labels[i] = if r >= labels[i] { r + 1 } else { r };
    }
    Dataset::new(d.samples.clone(), labels, d.coarse_labels.clone(), d.num_classes, format!("{}-noisy", d.name))
}

/// Stochastic embedding-space transform: random scaling, additive Gaussian
/// noise and coordinate dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub gaussian_sigma: f64,
    pub dropout_p: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { gaussian_sigma: 0.1, dropout_p: 0.1, scale_lo: 0.8, scale_hi: 1.2 }
    }
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec = AugmentSpec { gaussian_sigma: 0.0, dropout_p: 0.0, scale_lo: 1.0, scale_hi: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(CmsfError::BadConfig(format!("gaussian sigma {} must be >= 0", self.gaussian_sigma)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(CmsfError::BadConfig(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi && self.scale_hi.is_finite()) {
            return Err(CmsfError::BadConfig(format!(
                "scale range ({}, {}) needs 0 < lo <= hi",
                self.scale_lo, self.scale_hi
            )));
        }
        Ok(())
    }
}

/// One augmented view of `x`. Draw order per call: the scale (only when the
/// range is non-degenerate), then per coordinate a Gaussian and a dropout
/// uniform. A near-zero result is redrawn once before giving up.
pub fn augment(x: &[f64], spec: &AugmentSpec, rng: &mut SeededRng) -> Result<Vec<f64>> {
    spec.validate()?;
    for _ in 0..2 {
        let s = rng.uniform_range(spec.scale_lo, spec.scale_hi);
        let out: Vec<f64> = x
            .iter()
            .map(|&v| {
                let noisy = s * v + spec.gaussian_sigma * rng.gaussian();
                if rng.uniform() < spec.dropout_p {
                    0.0
                } else {
                    noisy
                }
            })
            .collect();
        if norm(&out) > NORM_EPS {
            return Ok(out);
        }
    }
    Err(CmsfError::DegenerateOutput)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{sq_dist, Stream};

    fn rng(seed: u64) -> SeededRng {
        SeededRng::for_stream(seed, Stream::Data)
    }

    /// Held-out 1-NN accuracy by exhaustive Euclidean search.
    fn holdout_1nn(d: &Dataset, seed: u64) -> f64 {
        let (train, test) = d.split_indices(0.2, &mut SeededRng::new(seed, 99)).unwrap();
        let hits = test
            .iter()
            .filter(|&&q| {
                let best = train
                    .iter()
                    .min_by(|&&a, &&b| sq_dist(d.sample(q), d.sample(a)).total_cmp(&sq_dist(d.sample(q), d.sample(b))))
                    .unwrap();
                d.labels()[*best] == d.labels()[q]
            })
            .count();
        hits as f64 / test.len() as f64
    }

    #[test]
    fn tiny_mixture_has_separated_means() {
        let d = gen_mixture(2, 1, 2, 10.0, &mut rng(3)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[0, 1]);
        let means = sample_separated_means(2, 2, 10.0, &mut rng(3)).unwrap();
        assert!(sq_dist(&means[0], &means[1]).sqrt() >= 10.0);
    }

    #[test]
    fn mixture_is_separable_by_raw_1nn() {
        let d = gen_mixture(10, 500, 32, 6.0, &mut rng(1)).unwrap();
        assert_eq!((d.len(), d.dim()), (5000, 32));
        let acc = holdout_1nn(&d, 1);
        assert!(acc > 0.95, "1-NN accuracy {acc}");
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_mixture(4, 20, 8, 5.0, &mut rng(7)).unwrap();
        let b = gen_mixture(4, 20, 8, 5.0, &mut rng(7)).unwrap();
        assert_eq!(a, b);
        let c = gen_hierarchical(2, 3, 10, 8, &mut rng(7)).unwrap();
        let e = gen_hierarchical(2, 3, 10, 8, &mut rng(7)).unwrap();
        assert_eq!(c, e);
    }

    #[test]
    fn bad_generator_configs() {
        assert!(gen_mixture(0, 1, 2, 1.0, &mut rng(0)).is_err());
        assert!(gen_mixture(2, 0, 2, 1.0, &mut rng(0)).is_err());
        assert!(gen_mixture(2, 1, 2, 0.0, &mut rng(0)).is_err());
        assert!(gen_hierarchical(1, 0, 1, 4, &mut rng(0)).is_err());
    }

    #[test]
    fn degenerate_hierarchy() {
        let d = gen_hierarchical(1, 1, 5, 4, &mut rng(2)).unwrap();
        assert!(d.labels().iter().all(|&l| l == 0));
        assert!(d.coarse_labels().unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn hierarchy_shape_and_fine_structure() {
        let d = gen_hierarchical(5, 4, 100, 16, &mut rng(5)).unwrap();
        assert_eq!(d.num_classes(), 20);
        let coarse = d.coarse_labels().unwrap();
        let mut supers: Vec<u32> = coarse.to_vec();
        supers.sort_unstable();
        supers.dedup();
        assert_eq!(supers, vec![0, 1, 2, 3, 4]);
        for (&f, &c) in d.labels().iter().zip(coarse) {
            assert_eq!(f / 4, c);
        }
        let acc = holdout_1nn(&d, 5);
        assert!(acc > 0.2, "fine 1-NN accuracy {acc}");
    }

    #[test]
    fn label_noise_counts() {
        let d = gen_mixture(2, 10, 4, 5.0, &mut rng(0)).unwrap();
        let same = inject_label_noise(&d, 0.0, &mut rng(1)).unwrap();
        assert_eq!(same.labels(), d.labels());
        let flipped = inject_label_noise(&d, 1.0, &mut rng(1)).unwrap();
        assert!(flipped.labels().iter().zip(d.labels()).all(|(a, b)| a != b));

        let big = gen_mixture(10, 100, 4, 5.0, &mut rng(0)).unwrap();
        let noisy = inject_label_noise(&big, 0.5, &mut rng(9)).unwrap();
        let diffs = noisy.labels().iter().zip(big.labels()).filter(|(a, b)| a != b).count();
        assert_eq!(diffs, 500);
        // original untouched
        assert_eq!(big.labels()[0], 0);
    }

    #[test]
    fn label_noise_needs_labels() {
        let d = gen_mixture(2, 4, 4, 5.0, &mut rng(0)).unwrap();
        let unl = Dataset::new(d.samples().clone(), vec![UNLABELED; 8], None, 2, "u").unwrap();
        assert!(matches!(inject_label_noise(&unl, 0.5, &mut rng(0)), Err(CmsfError::NoLabels)));
    }

    #[test]
    fn identity_and_scaling_augment() {
        let x = vec![0.3, -1.2, 2.5];
        let mut r = SeededRng::new(1, 2);
        assert_eq!(augment(&x, &AugmentSpec::IDENTITY, &mut r).unwrap(), x);
        let scale2 = AugmentSpec { scale_lo: 2.0, scale_hi: 2.0, ..AugmentSpec::IDENTITY };
        assert_eq!(augment(&[1.0, 0.0], &scale2, &mut r).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn augment_perturbs_on_average() {
        let spec = AugmentSpec { gaussian_sigma: 0.1, dropout_p: 0.1, scale_lo: 0.8, scale_hi: 1.2 };
        let x = crate::numeric::l2_normalize(&[1.0, 2.0, -1.0, 0.5]).unwrap().into_inner();
        let mut r = SeededRng::new(5, 2);
        let mean: f64 = (0..1000).map(|_| sq_dist(&augment(&x, &spec, &mut r).unwrap(), &x).sqrt()).sum::<f64>() / 1000.0;
        assert!(mean > 0.05, "mean displacement {mean}");
    }

    #[test]
    fn augment_rejects_bad_spec_and_degenerate_output() {
        let mut r = SeededRng::new(0, 0);
        let bad = AugmentSpec { dropout_p: 1.0, ..AugmentSpec::IDENTITY };
        assert!(augment(&[1.0, 1.0], &bad, &mut r).is_err());
        assert!(matches!(augment(&[0.0, 0.0], &AugmentSpec::IDENTITY, &mut r), Err(CmsfError::DegenerateOutput)));
    }

    #[test]
    fn mask_labels_keeps_every_class() {
        let d = gen_mixture(5, 40, 4, 5.0, &mut rng(0)).unwrap();
        let m = d.mask_labels(0.1, &mut rng(4)).unwrap();
        assert_eq!(m.labeled_indices().len(), 20);
        for c in 0..5 {
            assert!(m.labels().contains(&c));
        }
    }
}
