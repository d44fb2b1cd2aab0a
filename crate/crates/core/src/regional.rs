//! Region selection and regional aggregated match kernels.
//!
//! A database image `Y` with regions `Y^(1..R)` (region 1 is always the whole
//! image) is folded into a single per-word representation
//!
//! ```text
//! V_R(Y_c) = (1/R) Σ_r γ(Y^(r)) Φ(Y^(r)_c)
//! ```
//!
//! where `Φ = V` for R-VLAD and `Φ = V̂` for Naive-R-ASMK. R-ASMK additionally
//! L2-normalizes each word, and R-ASMK★ keeps only the signs. The comparison
//! is `Σ_c σ(Φ_R(X_c)ᵀ Φ_R(Y_c))`; the query side of the asymmetric setting is
//! the same construction with a single whole-image region.
//!
//! Regions without descriptors contribute nothing to the sum but still count
//! in `R`. With a global factor `γ_R = (Σ_c σ(Φ_Rᵀ Φ_R))^(-1/2)` applied to both
//! sides, every regional mode with `R = 1` reproduces its plain counterpart.
//!
//! # RMAC grid
//!
//! Level `l` (1-based) uses square regions of side `s = 2·min(W,H)/(l+1)`.
//! Along an axis of length `A` the region count is the smallest `n` whose
//! uniform placement keeps consecutive overlap at least 40%:
//! `n = 1` if `A <= s`, else `n = 1 + ceil((A - s) / (0.6·s))`; regions start
//! at `i·(A - s)/(n - 1)`. A single region on an axis longer than `s` is
//! centered. Worked examples:
//!
//! | image   | level | side | per axis (x × y) | regions |
//! |---------|-------|------|------------------|---------|
//! | 600×600 | 1     | 600  | 1 × 1            | 1       |
//! | 600×600 | 2     | 400  | 2 × 2            | 4       |
//! | 600×600 | 3     | 300  | 3 × 3            | 9       |
//! | 800×600 | 1     | 600  | 2 × 1            | 2       |
//! | 800×600 | 2     | 400  | 3 × 2            | 6       |
//!
//! Regions are emitted level-ascending, then row-major.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::codebook::{Codebook, WordPartition};
use crate::error::{Error, Result};
use crate::features::{ImageFeatures, RegionBox};
use crate::kernels::{
    aggregate_descriptors, normalize_residual, AggregatedRepresentation, AggregationMode,
    ResidualSet, Selectivity, SelectivityParams,
};

const RMAC_MAX_STEP: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegionStrategy {
    WholeImageOnly,
    /// Ingested boxes with `score >= threshold`.
    DetectorThreshold(f32),
    /// Fixed multi-scale grid with 1..=3 levels.
    RmacGrid(u32),
    /// The `k` highest-scoring ingested boxes.
    TopK(usize),
}

impl fmt::Display for RegionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionStrategy::WholeImageOnly => write!(f, "whole"),
            RegionStrategy::DetectorThreshold(t) => write!(f, "detector:{t}"),
            RegionStrategy::RmacGrid(l) => write!(f, "rmac:{l}"),
            RegionStrategy::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for RegionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown region strategy `{s}`"));
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let strategy = match kind {
            "whole" if arg.is_empty() => RegionStrategy::WholeImageOnly,
            "detector" => RegionStrategy::DetectorThreshold(arg.parse().map_err(|_| bad())?),
            "rmac" => RegionStrategy::RmacGrid(arg.parse().map_err(|_| bad())?),
            "topk" => RegionStrategy::TopK(arg.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl RegionStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RegionStrategy::DetectorThreshold(t) if !(0.0..=1.0).contains(&t) => {
                Err(Error::Config(format!("detector threshold {t} outside [0,1]")))
            }
            RegionStrategy::RmacGrid(l) if !(1..=3).contains(&l) => {
                Err(Error::Config(format!("rmac levels {l} outside 1..=3")))
            }
            _ => Ok(()),
        }
    }
}

/// Ordered regions of one image; index 0 is the whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<RegionBox>,
}

impl RegionSet {
    pub fn whole(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            boxes: vec![RegionBox::whole_image(width, height)],
        }
    }

    /// Whole image followed by `extra` in the given order.
    pub fn with_regions(width: u32, height: u32, extra: impl IntoIterator<Item = RegionBox>) -> Self {
        let mut s = Self::whole(width, height);
        s.boxes.extend(extra);
        s
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

fn axis_placements(length: f64, side: f64) -> Vec<f64> {
    let slack = length - side;
    if slack <= 1e-9 * length {
        return vec![slack.max(0.0) / 2.0];
    }
    let n = 1 + (slack / (RMAC_MAX_STEP * side) - 1e-9).ceil() as usize;
    let step = slack / (n - 1) as f64;
    (0..n).map(|i| i as f64 * step).collect()
}

/// RMAC grid boxes for `levels` levels (without the whole image).
pub fn rmac_grid(width: u32, height: u32, levels: u32) -> Vec<RegionBox> {
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for l in 1..=levels {
        let side = 2.0 * w.min(h) / (l as f64 + 1.0);
        let xs = axis_placements(w, side);
        let ys = axis_placements(h, side);
        for &y in &ys {
            for &x in &xs {
                out.push(RegionBox::new(
                    x as f32,
                    y as f32,
                    (x + side) as f32,
                    (y + side) as f32,
                    1.0,
                ));
            }
        }
    }
    out
}

/// Ingested boxes sorted by descending score, then descending area, then
/// input order.
fn ranked_boxes(features: &ImageFeatures) -> Vec<RegionBox> {
    let mut boxes = features.boxes.clone();
    boxes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| b.area().total_cmp(&a.area()))
    });
    boxes
}

pub fn select_regions(features: &ImageFeatures, strategy: &RegionStrategy) -> Result<RegionSet> {
    strategy.validate()?;
    let (w, h) = (features.width, features.height);
    Ok(match *strategy {
        RegionStrategy::WholeImageOnly => RegionSet::whole(w, h),
        RegionStrategy::DetectorThreshold(t) => RegionSet::with_regions(
            w,
            h,
            ranked_boxes(features).into_iter().filter(|b| b.score >= t),
        ),
        RegionStrategy::TopK(k) => {
            RegionSet::with_regions(w, h, ranked_boxes(features).into_iter().take(k))
        }
        RegionStrategy::RmacGrid(levels) => RegionSet::with_regions(w, h, rmac_grid(w, h, levels)),
    })
}

/// Indices of descriptors whose keypoint lies in `region` (closed min edges,
/// open max edges). A region covering the full image takes every descriptor.
pub fn assign_to_region(features: &ImageFeatures, region: &RegionBox) -> Vec<usize> {
    if region.covers_image(features.width, features.height) {
        return (0..features.descriptors.len()).collect();
    }
    features
        .descriptors
        .iter()
        .enumerate()
        .filter(|(_, d)| region.contains(d.x, d.y))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegionalMode {
    RVlad,
    NaiveRAsmk,
    RAsmk,
    RAsmkBinary,
}

impl RegionalMode {
    /// Kernel used for each region before regional averaging.
    pub fn base(&self) -> AggregationMode {
        match self {
            RegionalMode::RVlad => AggregationMode::Vlad,
            _ => AggregationMode::Asmk,
        }
    }

    pub fn selectivity(&self, params: &SelectivityParams) -> Selectivity {
        match self {
            RegionalMode::RVlad => Selectivity::Identity,
            _ => Selectivity::Thresholded(*params),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, RegionalMode::RAsmkBinary)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionalAggregatedRepresentation {
    pub mode: RegionalMode,
    pub residuals: ResidualSet,
    /// Global factor `γ_R`; applied only when normalization is enabled.
    pub gamma_r: f64,
    pub regions: usize,
}

impl RegionalAggregatedRepresentation {
    fn finish(mode: RegionalMode, dim: usize, averaged: BTreeMap<u32, Vec<f64>>, regions: usize, params: &SelectivityParams) -> Self {
        let mut residuals = ResidualSet::new(dim, mode.is_binary());
        for (word, v) in averaged {
            match mode {
                RegionalMode::RVlad | RegionalMode::NaiveRAsmk => {
                    if v.iter().any(|&x| x as f32 != 0.0) {
                        residuals.push(word, &v);
                    }
                }
                RegionalMode::RAsmk | RegionalMode::RAsmkBinary => {
                    if let Some(n) = normalize_residual(&v) {
                        residuals.push(word, &n);
                    }
                }
            }
        }
        let gamma_r = residuals.gamma(&mode.selectivity(params));
        Self {
            mode,
            residuals,
            gamma_r,
            regions,
        }
    }

    /// Regional form of a plain whole-image representation (the asymmetric
    /// query side): `γ(X)·Φ(X_c)`, renormalized/binarized as the mode requires.
    pub fn from_whole_image(
        repr: &AggregatedRepresentation,
        mode: RegionalMode,
        params: &SelectivityParams,
    ) -> Result<Self> {
        if repr.mode != mode.base() {
            return Err(Error::ModeMismatch(format!(
                "{mode:?} needs a {:?} representation, got {:?}",
                mode.base(),
                repr.mode
            )));
        }
        let mut averaged = BTreeMap::new();
        if repr.gamma > 0.0 {
            for (i, &word) in repr.residuals.words.iter().enumerate() {
                let v: Vec<f64> = repr.residuals.dense(i).iter().map(|&x| repr.gamma * x as f64).collect();
                averaged.insert(word, v);
            }
        }
        Ok(Self::finish(mode, repr.residuals.dim, averaged, 1, params))
    }
}

/// Fold all regions of an image into one regional representation.
pub fn aggregate_regional(
    features: &ImageFeatures,
    regions: &RegionSet,
    codebook: &Codebook,
    mode: RegionalMode,
    params: &SelectivityParams,
) -> Result<RegionalAggregatedRepresentation> {
    if regions.is_empty() {
        return Err(Error::Validation("region set is empty".into()));
    }
    let assignments = codebook.assign(features)?;
    aggregate_regional_assigned(features, &assignments, regions, codebook, mode, params)
}

pub(crate) fn aggregate_regional_assigned(
    features: &ImageFeatures,
    assignments: &[u32],
    regions: &RegionSet,
    codebook: &Codebook,
    mode: RegionalMode,
    params: &SelectivityParams,
) -> Result<RegionalAggregatedRepresentation> {
    let r = regions.len();
    let mut sums: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for region in &regions.boxes {
        let members = assign_to_region(features, region);
        let partition = WordPartition::from_assignments(assignments, members);
        let rep = aggregate_descriptors(&features.descriptors, &partition, codebook, mode.base(), params)?;
        if rep.gamma == 0.0 {
            continue;
        }
        for (i, &word) in rep.residuals.words.iter().enumerate() {
            let acc = sums.entry(word).or_insert_with(|| vec![0.0; codebook.dim()]);
            for (a, &x) in acc.iter_mut().zip(rep.residuals.dense(i)) {
                *a += rep.gamma * x as f64;
            }
        }
    }
    for v in sums.values_mut() {
        for x in v.iter_mut() {
            *x /= r as f64;
        }
    }
    Ok(RegionalAggregatedRepresentation::finish(mode, codebook.dim(), sums, r, params))
}

/// Asymmetric query representation: the query is a single whole-image region.
pub fn regional_query(
    features: &ImageFeatures,
    codebook: &Codebook,
    mode: RegionalMode,
    params: &SelectivityParams,
) -> Result<RegionalAggregatedRepresentation> {
    aggregate_regional(features, &RegionSet::whole(features.width, features.height), codebook, mode, params)
}

/// `Σ_c σ(Φ_R(X_c)ᵀ Φ_R(Y_c))`, scaled by `γ_R(X)γ_R(Y)` when `normalize`.
pub fn regional_similarity(
    x: &RegionalAggregatedRepresentation,
    y: &RegionalAggregatedRepresentation,
    params: &SelectivityParams,
    normalize: bool,
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
    Ok(if normalize {
        (x.gamma_r * y.gamma_r) * sum
    } else {
        sum
    })
}
