//! Aggregated match kernels over visual-word residuals.
//!
//! An image is summarized per visual word `c` by an aggregated vector
//! `Φ(X_c)` and compared as
//!
//! ```text
//! K(X, Y) = γ(X) γ(Y) Σ_c σ(Φ(X_c)ᵀ Φ(Y_c)),   γ(X) = (Σ_c σ(Φ(X_c)ᵀ Φ(X_c)))^(-1/2)
//! ```
//!
//! * VLAD: `Φ = V(X_c) = Σ (x - q(x))`, `σ(u) = u`.
//! * ASMK: `Φ = V / ‖V‖`, `σ(u) = sign(u)|u|^α` for `u > τ`, else 0.
//! * ASMK★: sign-binarized ASMK residuals; the word similarity is
//!   `u = ⟨b_x, b_y⟩ / D = 1 - 2·hamming / D`, then the same `σ`.
//!
//! Sums run in `f64`; stored residuals are `f32` (dense) or packed sign bits.

use crate::codebook::{Codebook, WordPartition};
use crate::error::{Error, Result};
use crate::features::{Descriptor, ImageFeatures};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectivityParams {
    pub alpha: f64,
    pub tau: f64,
}

impl Default for SelectivityParams {
    fn default() -> Self {
        Self { alpha: 3.0, tau: 0.0 }
    }
}

impl SelectivityParams {
    pub fn new(alpha: f64, tau: f64) -> Result<Self> {
        let p = Self { alpha, tau };
        p.validate()?;
        Ok(p)
    }

    /// `alpha >= 1`; `tau < 1` so that a perfect word match is never
    /// suppressed (otherwise γ is undefined).
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 1.0 {
            return Err(Error::Config(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !self.tau.is_finite() || self.tau >= 1.0 {
            return Err(Error::Config(format!("tau must be < 1, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Thresholded polynomial selectivity: `sign(u)|u|^α` if `u > τ`, else 0.
pub fn selectivity(u: f64, params: &SelectivityParams) -> f64 {
    if u > params.tau {
        u.signum() * u.abs().powf(params.alpha)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selectivity {
    Identity,
    Thresholded(SelectivityParams),
}

impl Selectivity {
    #[inline]
    pub fn apply(&self, u: f64) -> f64 {
        match self {
            Selectivity::Identity => u,
            Selectivity::Thresholded(p) => selectivity(u, p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AggregationMode {
    Vlad,
    Asmk,
    AsmkBinary,
}

impl AggregationMode {
    pub fn selectivity(&self, params: &SelectivityParams) -> Selectivity {
        match self {
            AggregationMode::Vlad => Selectivity::Identity,
            _ => Selectivity::Thresholded(*params),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, AggregationMode::AsmkBinary)
    }
}

/// Packed storage of per-word residual vectors, ascending by word.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualData {
    Dense(Vec<f32>),
    /// Sign bits, bit set for `+1`; `ceil(D/64)` blocks per word.
    Binary(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub dim: usize,
    pub words: Vec<u32>,
    pub data: ResidualData,
}

pub fn binary_blocks(dim: usize) -> usize {
    dim.div_ceil(64)
}

impl ResidualSet {
    pub fn new(dim: usize, binary: bool) -> Self {
        let data = if binary {
            ResidualData::Binary(Vec::new())
        } else {
            ResidualData::Dense(Vec::new())
        };
        Self {
            dim,
            words: Vec::new(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.data, ResidualData::Binary(_))
    }

    /// Append a residual for `word` (must exceed the last word pushed).
    /// Binary sets store the sign pattern of `v`.
    pub fn push(&mut self, word: u32, v: &[f64]) {
        debug_assert!(self.words.last().is_none_or(|&w| w < word));
        self.words.push(word);
        match &mut self.data {
            ResidualData::Dense(d) => d.extend(v.iter().map(|&x| x as f32)),
            ResidualData::Binary(b) => b.extend(pack_signs(v)),
        }
    }

    pub fn dense(&self, i: usize) -> &[f32] {
        match &self.data {
            ResidualData::Dense(d) => &d[i * self.dim..(i + 1) * self.dim],
            ResidualData::Binary(_) => panic!("dense access on binary residuals"),
        }
    }

    pub fn bits(&self, i: usize) -> &[u64] {
        let n = binary_blocks(self.dim);
        match &self.data {
            ResidualData::Binary(b) => &b[i * n..(i + 1) * n],
            ResidualData::Dense(_) => panic!("bit access on dense residuals"),
        }
    }

    /// Raw word similarity `u` between entry `i` here and entry `j` of `other`.
    #[inline]
    pub fn word_similarity(&self, i: usize, other: &ResidualSet, j: usize) -> f64 {
        match (&self.data, &other.data) {
            (ResidualData::Dense(_), ResidualData::Dense(_)) => dot(self.dense(i), other.dense(j)),
            (ResidualData::Binary(_), ResidualData::Binary(_)) => {
                binary_similarity(self.bits(i), other.bits(j), self.dim)
            }
            _ => panic!("mixed dense/binary comparison"),
        }
    }

    /// Residual of entry `i` as `f64` (binary entries expand to ±1).
    pub fn expand(&self, i: usize) -> Vec<f64> {
        match &self.data {
            ResidualData::Dense(_) => self.dense(i).iter().map(|&v| v as f64).collect(),
            ResidualData::Binary(_) => {
                let b = self.bits(i);
                (0..self.dim)
                    .map(|k| if b[k / 64] >> (k % 64) & 1 == 1 { 1.0 } else { -1.0 })
                    .collect()
            }
        }
    }

    /// `γ = (Σ_c σ(Φ_cᵀΦ_c))^(-1/2)`, or 0 when the sum vanishes.
    pub fn gamma(&self, sel: &Selectivity) -> f64 {
        let s: f64 = (0..self.len())
            .map(|i| sel.apply(self.word_similarity(i, self, i)))
            .sum();
        if s > 0.0 {
            1.0 / s.sqrt()
        } else {
            0.0
        }
    }

    /// `Σ_c σ(u_c)` over words present in both sets, in ascending word order.
    pub fn selective_sum(&self, other: &ResidualSet, sel: &Selectivity) -> f64 {
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < self.words.len() && j < other.words.len() {
            match self.words[i].cmp(&other.words[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += sel.apply(self.word_similarity(i, other, j));
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `⟨b_x, b_y⟩ / D` for packed sign vectors.
#[inline]
pub fn binary_similarity(a: &[u64], b: &[u64], dim: usize) -> f64 {
    let ham: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
    1.0 - 2.0 * ham as f64 / dim as f64
}

/// `Σ (x - centroid)` over the given descriptors; zero vector when empty.
pub fn vlad_residual(descriptors: &[&[f32]], centroid: &[f32]) -> Result<Vec<f64>> {
    let mut acc = vec![0f64; centroid.len()];
    for d in descriptors {
        if d.len() != centroid.len() {
            return Err(Error::Dimension {
                expected: centroid.len(),
                found: d.len(),
            });
        }
        for ((a, &x), &c) in acc.iter_mut().zip(d.iter()).zip(centroid) {
            *a += x as f64 - c as f64;
        }
    }
    Ok(acc)
}

/// Unit-norm copy of `v`, or `None` for the zero vector (the word is dropped).
pub fn normalize_residual(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        Some(v.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

/// Elementwise `+1` if `x > 0`, `-1` otherwise.
pub fn binarize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { 1.0 } else { -1.0 }).collect()
}

pub fn pack_signs(v: &[f64]) -> Vec<u64> {
    let mut out = vec![0u64; binary_blocks(v.len())];
    for (k, &x) in v.iter().enumerate() {
        if x > 0.0 {
            out[k / 64] |= 1 << (k % 64);
        }
    }
    out
}

/// Per-word aggregated residuals of one image (or one region) plus `γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedRepresentation {
    pub mode: AggregationMode,
    pub residuals: ResidualSet,
    pub gamma: f64,
}

impl AggregatedRepresentation {
    pub fn num_words(&self) -> usize {
        self.residuals.len()
    }
}

/// Aggregate the descriptors listed in `partition`.
pub(crate) fn aggregate_descriptors(
    descriptors: &[Descriptor],
    partition: &WordPartition,
    codebook: &Codebook,
    mode: AggregationMode,
    params: &SelectivityParams,
) -> Result<AggregatedRepresentation> {
    let mut residuals = ResidualSet::new(codebook.dim(), mode.is_binary());
    let mut members: Vec<&[f32]> = Vec::new();
    for (&word, idx) in &partition.words {
        if word as usize >= codebook.num_words() {
            return Err(Error::Validation(format!(
                "word {word} outside codebook of {} words",
                codebook.num_words()
            )));
        }
        members.clear();
        members.extend(idx.iter().map(|&i| descriptors[i].vector.as_slice()));
        let v = vlad_residual(&members, codebook.centroid(word as usize))?;
        match mode {
            AggregationMode::Vlad => {
                if v.iter().any(|&x| x as f32 != 0.0) {
                    residuals.push(word, &v);
                }
            }
            AggregationMode::Asmk | AggregationMode::AsmkBinary => {
                if let Some(n) = normalize_residual(&v) {
                    residuals.push(word, &n);
                }
            }
        }
    }
    let gamma = residuals.gamma(&mode.selectivity(params));
    Ok(AggregatedRepresentation {
        mode,
        residuals,
        gamma,
    })
}

/// Aggregate an image partitioned by `codebook`. An image without
/// descriptors yields an empty map and `γ = 0`.
pub fn aggregate(
    features: &ImageFeatures,
    partition: &WordPartition,
    codebook: &Codebook,
    mode: AggregationMode,
    params: &SelectivityParams,
) -> Result<AggregatedRepresentation> {
    if features.dim != codebook.dim() {
        return Err(Error::Dimension {
            expected: codebook.dim(),
            found: features.dim,
        });
    }
    aggregate_descriptors(&features.descriptors, partition, codebook, mode, params)
}

/// `γ(X)γ(Y) Σ_c σ(Φ(X_c)ᵀΦ(Y_c))`.
pub fn kernel_similarity(
    x: &AggregatedRepresentation,
    y: &AggregatedRepresentation,
    params: &SelectivityParams,
) -> Result<f64> {
    if x.mode != y.mode {
        return Err(Error::ModeMismatch(format!("{:?} vs {:?}", x.mode, y.mode)));
    }
    if x.residuals.dim != y.residuals.dim {
        return Err(Error::Dimension {
            expected: x.residuals.dim,
            found: y.residuals.dim,
        });
    }
    let sum = x.residuals.selective_sum(&y.residuals, &x.mode.selectivity(params));
    Ok((x.gamma * y.gamma) * sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desc(v: &[f32]) -> Descriptor {
        Descriptor {
            vector: v.to_vec(),
            x: 0.0,
            y: 0.0,
            scale: 1.0,
            attention: 0.0,
        }
    }

    fn image(vs: &[&[f32]]) -> ImageFeatures {
        let mut f = ImageFeatures::new("t", 10, 10, vs[0].len());
        f.descriptors = vs.iter().map(|v| desc(v)).collect();
        f
    }

    #[test]
    fn vlad_residual_examples() {
        let a: &[f32] = &[1.0, 2.0];
        let b: &[f32] = &[3.0, 4.0];
        assert_eq!(vlad_residual(&[a, b], &[2.0, 2.0]).unwrap(), vec![0.0, 2.0]);
        assert_eq!(vlad_residual(&[], &[2.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(vlad_residual(&[b], &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
        assert!(vlad_residual(&[&[1.0]], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_residual(&[3.0, 4.0]).unwrap();
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
        let u = normalize_residual(&n).unwrap();
        assert!((u[0] - n[0]).abs() < 1e-15);
        assert!(normalize_residual(&[0.0, 0.0]).is_none());
    }

    #[test]
    fn selectivity_examples() {
        let p = SelectivityParams::default();
        assert_eq!(selectivity(0.5, &p), 0.125);
        assert_eq!(selectivity(-0.3, &p), 0.0);
        assert_eq!(selectivity(0.0, &p), 0.0);
        assert_eq!(selectivity(1.0, &p), 1.0);
        let neg = SelectivityParams::new(3.0, -0.5).unwrap();
        assert_eq!(selectivity(-0.25, &neg), -0.015625);
        assert!(SelectivityParams::new(0.5, 0.0).is_err());
        assert!(SelectivityParams::new(3.0, 1.0).is_err());
    }

    #[test]
    fn binarize_rule() {
        assert_eq!(binarize(&[0.3, -0.1, 0.0]), vec![1.0, -1.0, -1.0]);
        let packed = pack_signs(&[0.3, -0.1, 0.0]);
        assert_eq!(packed, vec![0b001]);
    }

    #[test]
    fn asmk_gamma_counts_words() {
        let cb = Codebook::from_centroids(
            vec![0., 0., 10., 0., 0., 10., 10., 10., 20., 20.],
            2,
        )
        .unwrap();
        let f = image(&[&[1., 0.5], &[11., 0.5], &[0.5, 11.], &[11., 11.5], &[21., 20.5]]);
        let p = cb.partition(&f).unwrap();
        let r = aggregate(&f, &p, &cb, AggregationMode::Asmk, &Default::default()).unwrap();
        assert_eq!(r.num_words(), 5);
        assert!((r.gamma - 1.0 / 5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn vlad_single_word_gamma() {
        let cb = Codebook::from_centroids(vec![0., 0.], 2).unwrap();
        let f = image(&[&[3., 4.]]);
        let p = cb.partition(&f).unwrap();
        let r = aggregate(&f, &p, &cb, AggregationMode::Vlad, &Default::default()).unwrap();
        assert_eq!(r.residuals.dense(0), &[3.0, 4.0]);
        assert!((r.gamma - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_image_has_zero_gamma() {
        let cb = Codebook::from_centroids(vec![0., 0.], 2).unwrap();
        let f = ImageFeatures::new("e", 1, 1, 2);
        let p = cb.partition(&f).unwrap();
        for mode in [AggregationMode::Vlad, AggregationMode::Asmk, AggregationMode::AsmkBinary] {
            let r = aggregate(&f, &p, &cb, mode, &Default::default()).unwrap();
            assert!(r.residuals.is_empty());
            assert_eq!(r.gamma, 0.0);
        }
    }

    #[test]
    fn zero_residual_word_is_dropped() {
        let cb = Codebook::from_centroids(vec![0., 0., 10., 10.], 2).unwrap();
        let f = image(&[&[1., 1.], &[-1., -1.], &[11., 10.]]);
        let p = cb.partition(&f).unwrap();
        let r = aggregate(&f, &p, &cb, AggregationMode::Asmk, &Default::default()).unwrap();
        assert_eq!(r.residuals.words, vec![1]);
    }

    #[test]
    fn disjoint_words_and_mode_mismatch() {
        let cb = Codebook::from_centroids(vec![0., 0., 10., 10.], 2).unwrap();
        let a = image(&[&[1., 0.]]);
        let b = image(&[&[11., 10.]]);
        let params = SelectivityParams::default();
        let ra = aggregate(&a, &cb.partition(&a).unwrap(), &cb, AggregationMode::Asmk, &params).unwrap();
        let rb = aggregate(&b, &cb.partition(&b).unwrap(), &cb, AggregationMode::Asmk, &params).unwrap();
        assert_eq!(kernel_similarity(&ra, &rb, &params).unwrap(), 0.0);
        let vb = aggregate(&b, &cb.partition(&b).unwrap(), &cb, AggregationMode::Vlad, &params).unwrap();
        assert!(matches!(kernel_similarity(&ra, &vb, &params), Err(Error::ModeMismatch(_))));
    }

    proptest! {
        #[test]
        fn binary_similarity_is_hamming_identity(bits in prop::collection::vec(any::<bool>(), 1..150),
                                                 flips in prop::collection::vec(any::<bool>(), 150)) {
            let dim = bits.len();
            let a: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let b: Vec<f64> = a.iter().zip(&flips).map(|(&x, &f)| if f { -x } else { x }).collect();
            let ham = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            let u = binary_similarity(&pack_signs(&a), &pack_signs(&b), dim);
            let inner: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / dim as f64;
            prop_assert!((-1.0..=1.0).contains(&u));
            prop_assert!((u - (1.0 - 2.0 * ham as f64 / dim as f64)).abs() < 1e-12);
            prop_assert!((u - inner).abs() < 1e-12);
        }

        #[test]
        fn binarize_scale_and_sign(v in prop::collection::vec(-10.0f64..10.0, 1..20), eps in 0.001f64..100.0) {
            prop_assume!(v.iter().all(|&x| x != 0.0));
            let b = binarize(&v);
            let scaled: Vec<f64> = b.iter().map(|x| x * eps).collect();
            prop_assert_eq!(binarize(&scaled), b.clone());
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            let nb: Vec<f64> = b.iter().map(|x| -x).collect();
            prop_assert_eq!(binarize(&neg), nb);
        }

        #[test]
        fn selectivity_monotone_above_threshold(a in 0.0f64..1.0, b in 0.0f64..1.0, alpha in 1.0f64..5.0) {
            let p = SelectivityParams { alpha, tau: 0.0 };
            let (hi, lo) = if a > b { (a, b) } else { (b, a) };
            prop_assume!(hi > lo && lo > 0.0);
            prop_assert!(selectivity(hi, &p) > selectivity(lo, &p));
            prop_assert!((0.0..=1.0).contains(&selectivity(hi, &p)));
        }
    }
}
