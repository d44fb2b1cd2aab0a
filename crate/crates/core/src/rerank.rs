//! Spatial verification: nearest-neighbour correspondences and RANSAC with
//! an affine model, used to re-rank the head of a result list.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::index::{RankedItem, RankedResult};
use crate::rng::DetRng;

/// Default matching radius for unit-norm descriptors.
pub const DEFAULT_MAX_DISTANCE: f32 = 0.8;
pub const DEFAULT_ITERATIONS: usize = 1000;
/// Inlier tolerance as a fraction of the candidate's larger side.
pub const DEFAULT_TOL_FRACTION: f64 = 0.05;
/// Minimal-sample triangle area threshold as a fraction of the query area.
pub const MIN_SAMPLE_AREA_FRACTION: f64 = 1e-6;

/// Pixel coordinates.
pub type Point = (f64, f64);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query: usize,
    pub candidate: usize,
    pub distance: f32,
}

/// `p ↦ A p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineModel {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineModel {
    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (
            self.a[0][0] * p.0 + self.a[0][1] * p.1 + self.t[0],
            self.a[1][0] * p.0 + self.a[1][1] * p.1 + self.t[1],
        )
    }

    pub fn det(&self) -> f64 {
        self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0]
    }

    pub fn reprojection_error(&self, src: (f64, f64), dst: (f64, f64)) -> f64 {
        let (x, y) = self.apply(src);
        ((x - dst.0).powi(2) + (y - dst.1).powi(2)).sqrt()
    }

    fn from_rows(r0: [f64; 3], r1: [f64; 3]) -> Option<Self> {
        let m = Self {
            a: [[r0[0], r0[1]], [r1[0], r1[1]]],
            t: [r0[2], r1[2]],
        };
        (m.det().abs() > 1e-9 && r0.iter().chain(&r1).all(|v| v.is_finite())).then_some(m)
    }
}

/// For every query descriptor, its nearest candidate descriptor (lowest index
/// on ties) when the Euclidean distance is at most `max_distance`.
pub fn match_features(query: &ImageFeatures, candidate: &ImageFeatures, max_distance: f32) -> Result<Vec<Correspondence>> {
    if query.dim != candidate.dim {
        return Err(Error::Dimension {
            expected: query.dim,
            found: candidate.dim,
        });
    }
    let limit = max_distance as f64 * max_distance as f64;
    let found: Vec<Option<Correspondence>> = query
        .descriptors
        .par_iter()
        .enumerate()
        .map(|(qi, qd)| {
            let mut best: Option<(usize, f64)> = None;
            for (ci, cd) in candidate.descriptors.iter().enumerate() {
                let d2: f64 = qd
                    .vector
                    .iter()
                    .zip(&cd.vector)
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum();
                if best.is_none_or(|(_, b)| d2 < b) {
                    best = Some((ci, d2));
                }
            }
            best.filter(|&(_, d2)| d2 <= limit).map(|(ci, d2)| Correspondence {
                query: qi,
                candidate: ci,
                distance: d2.sqrt() as f32,
            })
        })
        .collect();
    Ok(found.into_iter().flatten().collect())
}

/// Keypoint coordinates of matched pairs: (query points, candidate points).
pub fn correspondence_points(
    query: &ImageFeatures,
    candidate: &ImageFeatures,
    matches: &[Correspondence],
) -> (Vec<Point>, Vec<Point>) {
    matches
        .iter()
        .map(|m| {
            let q = &query.descriptors[m.query];
            let c = &candidate.descriptors[m.candidate];
            ((q.x as f64, q.y as f64), (c.x as f64, c.y as f64))
        })
        .unzip()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    pub iterations: usize,
    /// Maximum reprojection error in candidate pixels.
    pub inlier_tol: f64,
    /// Minimal samples whose query-side triangle area is not above this are
    /// rejected as collinear.
    pub min_sample_area: f64,
}

impl RansacParams {
    /// Defaults for a query of `qw × qh` against a candidate of `cw × ch`.
    pub fn for_images(qw: u32, qh: u32, cw: u32, ch: u32) -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            inlier_tol: DEFAULT_TOL_FRACTION * cw.max(ch) as f64,
            min_sample_area: MIN_SAMPLE_AREA_FRACTION * qw as f64 * qh as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub model: Option<AffineModel>,
    /// Indices into the correspondence list, ascending.
    pub inliers: Vec<usize>,
}

fn triangle_area(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1)).abs()
}

fn solve_exact(src: [(f64, f64); 3], dst: [(f64, f64); 3]) -> Option<AffineModel> {
    let m = Matrix3::new(
        src[0].0, src[0].1, 1.0, //
        src[1].0, src[1].1, 1.0, //
        src[2].0, src[2].1, 1.0,
    );
    let lu = m.lu();
    let r0 = lu.solve(&Vector3::new(dst[0].0, dst[1].0, dst[2].0))?;
    let r1 = lu.solve(&Vector3::new(dst[0].1, dst[1].1, dst[2].1))?;
    AffineModel::from_rows([r0[0], r0[1], r0[2]], [r1[0], r1[1], r1[2]])
}

fn fit_least_squares(src: &[(f64, f64)], dst: &[(f64, f64)], idx: &[usize]) -> Option<AffineModel> {
    let n = idx.len();
    let design = DMatrix::from_fn(n, 3, |r, c| match c {
        0 => src[idx[r]].0,
        1 => src[idx[r]].1,
        _ => 1.0,
    });
    let svd = design.svd(true, true);
    let bx = DVector::from_fn(n, |r, _| dst[idx[r]].0);
    let by = DVector::from_fn(n, |r, _| dst[idx[r]].1);
    let r0 = svd.solve(&bx, 1e-12).ok()?;
    let r1 = svd.solve(&by, 1e-12).ok()?;
    AffineModel::from_rows([r0[0], r0[1], r0[2]], [r1[0], r1[1], r1[2]])
}

fn inliers_of(model: &AffineModel, src: &[(f64, f64)], dst: &[(f64, f64)], tol: f64) -> Vec<usize> {
    (0..src.len())
        .filter(|&i| model.reprojection_error(src[i], dst[i]) <= tol)
        .collect()
}

/// RANSAC over `src[i] → dst[i]` with a fresh generator seeded by `seed`.
pub fn ransac_affine(src: &[(f64, f64)], dst: &[(f64, f64)], params: &RansacParams, seed: u64) -> RansacResult {
    ransac_with_rng(src, dst, params, &mut DetRng::new(seed))
}

/// Fixed-iteration RANSAC: best 3-point hypothesis by inlier count (first
/// found wins ties), then a least-squares refit on its inliers, kept only if
/// it does not lose inliers.
pub fn ransac_with_rng(src: &[(f64, f64)], dst: &[(f64, f64)], params: &RansacParams, rng: &mut DetRng) -> RansacResult {
    let none = RansacResult {
        model: None,
        inliers: Vec::new(),
    };
    assert_eq!(src.len(), dst.len());
    if src.len() < 3 || params.inlier_tol <= 0.0 {
        return none;
    }
    let mut best: Option<(AffineModel, Vec<usize>)> = None;
    for _ in 0..params.iterations {
        let s = rng.sample_indices(src.len(), 3);
        let (a, b, c) = (s[0], s[1], s[2]);
        if triangle_area(src[a], src[b], src[c]) <= params.min_sample_area {
            continue;
        }
        let Some(model) = solve_exact([src[a], src[b], src[c]], [dst[a], dst[b], dst[c]]) else {
            continue;
        };
        let inl = inliers_of(&model, src, dst, params.inlier_tol);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((model, inl));
        }
    }
    let Some((mut model, mut inliers)) = best else {
        return none;
    };
    if inliers.len() < 3 {
        return none;
    }
    if let Some(refit) = fit_least_squares(src, dst, &inliers) {
        let refit_inl = inliers_of(&refit, src, dst, params.inlier_tol);
        if refit_inl.len() >= inliers.len() {
            model = refit;
            inliers = refit_inl;
        }
    }
    RansacResult {
        model: Some(model),
        inliers,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankParams {
    pub depth: usize,
    pub max_distance: f32,
    pub iterations: usize,
    /// Pixels; `None` uses a fraction of each candidate's larger side.
    pub inlier_tol: Option<f64>,
    pub seed: u64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            depth: 100,
            max_distance: DEFAULT_MAX_DISTANCE,
            iterations: DEFAULT_ITERATIONS,
            inlier_tol: None,
            seed: 0,
        }
    }
}

/// Inlier count of the verified affine model between two images, using the
/// sub-stream `stream` of `params.seed`.
pub fn verify_pair(query: &ImageFeatures, candidate: &ImageFeatures, params: &RerankParams, stream: u64) -> Result<u32> {
    let matches = match_features(query, candidate, params.max_distance)?;
    let (src, dst) = correspondence_points(query, candidate, &matches);
    let mut rp = RansacParams::for_images(query.width, query.height, candidate.width, candidate.height);
    rp.iterations = params.iterations;
    if let Some(t) = params.inlier_tol {
        rp.inlier_tol = t;
    }
    let r = ransac_with_rng(&src, &dst, &rp, &mut DetRng::split(params.seed, stream));
    Ok(r.inliers.len() as u32)
}

/// Re-order the first `depth` results by (inliers desc, kernel score desc),
/// keeping the rest in place. Scores stay kernel scores; each verified item
/// records its inlier count. A candidate whose features cannot be loaded is
/// kept with zero inliers and noted in `warnings`.
pub fn spatial_rerank<F>(ranked: &RankedResult, query: &ImageFeatures, load: F, params: &RerankParams) -> Result<RankedResult>
where
    F: Fn(&str) -> Result<ImageFeatures> + Sync,
{
    let depth = params.depth.min(ranked.items.len());
    let verified: Vec<(u32, Option<String>)> = ranked.items[..depth]
        .par_iter()
        .enumerate()
        .map(|(pos, item)| match load(&item.image_id) {
            Ok(cand) => verify_pair(query, &cand, params, pos as u64).map(|n| (n, None)),
            Err(e) => Ok((0, Some(format!("candidate `{}` not verified: {e}", item.image_id)))),
        })
        .collect::<Result<_>>()?;
    let mut head: Vec<(usize, u32)> = verified.iter().enumerate().map(|(i, v)| (i, v.0)).collect();
    head.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| ranked.items[b.0].score.total_cmp(&ranked.items[a.0].score))
            .then_with(|| a.0.cmp(&b.0))
    });
    let mut out = RankedResult {
        query_id: ranked.query_id.clone(),
        items: Vec::with_capacity(ranked.items.len()),
        warnings: ranked.warnings.clone(),
    };
    for (i, n) in head {
        out.items.push(RankedItem {
            inliers: Some(n),
            ..ranked.items[i].clone()
        });
    }
    out.items.extend_from_slice(&ranked.items[depth..]);
    for (_, w) in verified {
        if let Some(w) = w {
            log::warn!("{w}");
            out.warnings.push(w);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Descriptor;

    fn image(id: &str, pts: &[(f32, f32, Vec<f32>)]) -> ImageFeatures {
        let mut f = ImageFeatures::new(id, 200, 200, pts.first().map_or(2, |p| p.2.len()));
        f.descriptors = pts
            .iter()
            .map(|(x, y, v)| Descriptor {
                vector: v.clone(),
                x: *x,
                y: *y,
                scale: 1.0,
                attention: 1.0,
            })
            .collect();
        f
    }

    fn unit(rng: &mut DetRng, dim: usize) -> Vec<f32> {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / n) as f32).collect()
    }

    #[test]
    fn identical_sets_match_exactly() {
        let mut rng = DetRng::new(1);
        let pts: Vec<_> = (0..20)
            .map(|_| (rng.uniform_range(0., 199.) as f32, rng.uniform_range(0., 199.) as f32, unit(&mut rng, 8)))
            .collect();
        let f = image("a", &pts);
        let m = match_features(&f, &f, 0.1).unwrap();
        assert_eq!(m.len(), 20);
        assert!(m.iter().all(|c| c.query == c.candidate && c.distance == 0.0));
    }

    #[test]
    fn orthogonal_descriptors_do_not_match() {
        let a = image("a", &[(1., 1., vec![1., 0.])]);
        let b = image("b", &[(1., 1., vec![0., 1.])]);
        assert!(match_features(&a, &b, 0.8).unwrap().is_empty());
    }

    #[test]
    fn exact_affine_recovered() {
        let truth = AffineModel {
            a: [[1.2, 0.1], [-0.2, 0.9]],
            t: [5.0, -3.0],
        };
        let mut rng = DetRng::new(2);
        let src: Vec<_> = (0..25).map(|_| (rng.uniform_range(0., 100.), rng.uniform_range(0., 100.))).collect();
        let dst: Vec<_> = src.iter().map(|&p| truth.apply(p)).collect();
        let params = RansacParams {
            iterations: 50,
            inlier_tol: 1.0,
            min_sample_area: 1e-2,
        };
        let r = ransac_affine(&src, &dst, &params, 7);
        assert_eq!(r.inliers.len(), 25);
        let m = r.model.unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.a[i][j] - truth.a[i][j]).abs() < 1e-6);
            }
            assert!((m.t[i] - truth.t[i]).abs() < 1e-6);
        }
        assert_eq!(ransac_affine(&src, &dst, &params, 7), r);
    }

    #[test]
    fn degenerate_inputs_yield_none() {
        let params = RansacParams {
            iterations: 100,
            inlier_tol: 1.0,
            min_sample_area: 1e-3,
        };
        let p = vec![(0.0, 0.0), (1.0, 1.0)];
        assert_eq!(ransac_affine(&p, &p, &params, 1).model, None);
        let line: Vec<_> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert_eq!(ransac_affine(&line, &line, &params, 1).model, None);
    }

    #[test]
    fn rerank_orders_head_by_inliers() {
        let mut rng = DetRng::new(3);
        let pts: Vec<_> = (0..30)
            .map(|_| (rng.uniform_range(0., 199.) as f32, rng.uniform_range(0., 199.) as f32, unit(&mut rng, 8)))
            .collect();
        let q = image("q", &pts);
        let same = image("same", &pts);
        let other_pts: Vec<_> = (0..30)
            .map(|_| (rng.uniform_range(0., 199.) as f32, rng.uniform_range(0., 199.) as f32, unit(&mut rng, 8)))
            .collect();
        let other = image("other", &other_pts);
        let item = |id: &str, s: f32| RankedItem {
            image_id: id.into(),
            score: s,
            inliers: None,
        };
        let ranked = RankedResult {
            query_id: "q".into(),
            items: vec![item("other", 0.9), item("missing", 0.8), item("same", 0.5), item("tail", 0.1)],
            warnings: vec![],
        };
        let load = |id: &str| match id {
            "same" => Ok(same.clone()),
            "other" => Ok(other.clone()),
            _ => Err(Error::Validation("absent".into())),
        };
        let params = RerankParams {
            depth: 3,
            max_distance: 0.5,
            ..Default::default()
        };
        let out = spatial_rerank(&ranked, &q, load, &params).unwrap();
        let ids: Vec<_> = out.ids();
        assert_eq!(ids, vec!["same", "other", "missing", "tail"]);
        assert_eq!(out.items[0].inliers, Some(30));
        assert_eq!(out.items[3].inliers, None);
        assert_eq!(out.warnings.len(), 1);

        let unchanged = spatial_rerank(&ranked, &q, load, &RerankParams { depth: 0, ..params }).unwrap();
        assert_eq!(unchanged.items, ranked.items);
    }
}
