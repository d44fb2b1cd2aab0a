//! Visual-word codebook: k-means training and the nearest-centroid quantizer.
//!
//! Codebook file (`DTRC`), little-endian:
//!
//! ```text
//! magic b"DTRC" | version u16 (= 1) | C u32 | D u16 | C*D f32 (row-major)
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::rng::DetRng;

pub const DTRC_MAGIC: [u8; 4] = *b"DTRC";
pub const DTRC_VERSION: u16 = 1;
const DTRC_HEADER_BYTES: usize = 12;

/// Relative distortion change below which Lloyd iterations stop.
pub const CONVERGENCE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingStats {
    /// Lloyd update steps performed.
    pub iterations: usize,
    /// Sum of squared distances after each assignment step; the first entry
    /// is measured against the k-means++ seeds.
    pub distortion_trace: Vec<f64>,
}

impl TrainingStats {
    pub fn final_distortion(&self) -> f64 {
        self.distortion_trace.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    num_words: usize,
    dim: usize,
    centroids: Vec<f32>,
    pub stats: Option<TrainingStats>,
}

/// Descriptor indices grouped by their visual word (ascending word order).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordPartition {
    pub words: BTreeMap<u32, Vec<usize>>,
}

impl WordPartition {
    /// Group `indices` by the word each one was assigned to.
    pub fn from_assignments(assignments: &[u32], indices: impl IntoIterator<Item = usize>) -> Self {
        let mut words: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for i in indices {
            words.entry(assignments[i]).or_default().push(i);
        }
        Self { words }
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn total(&self) -> usize {
        self.words.values().map(Vec::len).sum()
    }
}

fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn from_centroids(centroids: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || dim > u16::MAX as usize || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "{} centroid values do not form rows of dimension {dim}",
                centroids.len()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite centroid component".into()));
        }
        Ok(Self {
            num_words: centroids.len() / dim,
            dim,
            centroids,
            stats: None,
        })
    }

    pub fn num_words(&self) -> usize {
        self.num_words
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, word: usize) -> &[f32] {
        &self.centroids[word * self.dim..(word + 1) * self.dim]
    }

    /// Exact nearest centroid and its squared distance; ties go to the lowest
    /// index. Partial sums are monotone, so abandoning a candidate once its
    /// running sum exceeds the best distance never changes the argmin.
    pub(crate) fn nearest(&self, v: &[f32]) -> (u32, f32) {
        let mut best = 0u32;
        let mut best_d = f32::INFINITY;
        for (w, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let mut d = 0f32;
            let mut abandoned = false;
            for (x, y) in v.iter().zip(c) {
                d += (x - y) * (x - y);
                if d > best_d {
                    abandoned = true;
                    break;
                }
            }
            if !abandoned && d < best_d {
                best_d = d;
                best = w as u32;
            }
        }
        (best, best_d)
    }

    pub fn quantize(&self, v: &[f32]) -> Result<u32> {
        if v.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: v.len(),
            });
        }
        Ok(self.nearest(v).0)
    }

    /// Word index of every descriptor, in descriptor order.
    pub fn assign(&self, features: &ImageFeatures) -> Result<Vec<u32>> {
        if features.dim != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: features.dim,
            });
        }
        features
            .descriptors
            .iter()
            .map(|d| self.quantize(&d.vector))
            .collect()
    }

    pub fn partition(&self, features: &ImageFeatures) -> Result<WordPartition> {
        let a = self.assign(features)?;
        Ok(WordPartition::from_assignments(&a, 0..a.len()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(DTRC_HEADER_BYTES + 4 * self.centroids.len());
        out.extend_from_slice(&DTRC_MAGIC);
        out.extend_from_slice(&DTRC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_words as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u16).to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < DTRC_HEADER_BYTES {
            return Err(Error::format(path, "header", "file shorter than 12-byte header"));
        }
        if bytes[0..4] != DTRC_MAGIC {
            return Err(Error::format(path, "magic", "expected \"DTRC\""));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DTRC_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: DTRC_VERSION,
                found: version,
            });
        }
        let c = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let d = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        if c == 0 || d == 0 {
            return Err(Error::format(path, "C/D", "codebook must have C >= 1 and D >= 1"));
        }
        let expected = DTRC_HEADER_BYTES as u128 + 4 * c as u128 * d as u128;
        if bytes.len() as u128 != expected {
            return Err(Error::format(
                path,
                "centroids",
                format!("{} bytes, layout needs {expected}", bytes.len()),
            ));
        }
        let centroids = bytes[DTRC_HEADER_BYTES..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_centroids(centroids, d).map_err(|e| Error::format(path, "centroids", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the serialized codebook.
    pub fn content_hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

fn count_distinct_up_to(data: &[f32], dim: usize, limit: usize) -> usize {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for row in data.chunks_exact(dim) {
        seen.insert(row.iter().map(|v| v.to_bits()).collect());
        if seen.len() >= limit {
            break;
        }
    }
    seen.len()
}

fn assign_all(centroids: &Codebook, data: &[f32], dim: usize) -> Vec<(u32, f32)> {
    data.par_chunks_exact(dim).map(|row| centroids.nearest(row)).collect()
}

/// k-means++ seeding over the rows of `data`.
fn kmeans_pp(data: &[f32], dim: usize, k: usize, rng: &mut DetRng) -> Result<Vec<f32>> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.below(n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = data
        .par_chunks_exact(dim)
        .map(|r| squared_distance(r, row(first)) as f64)
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Training(format!(
                "k-means++ ran out of distinct points after {} seeds",
                centroids.len() / dim
            )));
        }
        let target = rng.uniform() * total;
        let mut acc = 0.0;
        let mut chosen = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            chosen = Some(i);
            if acc > target {
                break;
            }
        }
        let c = chosen.expect("positive total weight");
        let new = row(c).to_vec();
        d2.par_iter_mut()
            .zip(data.par_chunks_exact(dim))
            .for_each(|(best, r)| {
                let d = squared_distance(r, &new) as f64;
                if d < *best {
                    *best = d;
                }
            });
        centroids.extend_from_slice(&new);
    }
    Ok(centroids)
}

/// Lloyd's k-means with k-means++ seeding over `data` (rows of length `dim`).
///
/// Assignment runs in parallel; centroid sums and the distortion are reduced
/// sequentially in row order so the result does not depend on thread count.
/// Training stops after `max_iters` updates, when no assignment changes, or
/// when the relative distortion change drops below [`CONVERGENCE_TOL`].
/// Empty clusters are reseeded with the point farthest from its centroid.
pub fn train_codebook(data: &[f32], dim: usize, num_words: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    if num_words == 0 {
        return Err(Error::Config("codebook size must be >= 1".into()));
    }
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::Dimension {
            expected: dim,
            found: data.len() % dim.max(1),
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite training value".into()));
    }
    let n = data.len() / dim;
    let distinct = count_distinct_up_to(data, dim, num_words);
    if distinct < num_words {
        return Err(Error::Training(format!(
            "{distinct} distinct descriptors ({n} total) cannot seed {num_words} words"
        )));
    }

    let mut rng = DetRng::new(seed);
    let mut book = Codebook::from_centroids(kmeans_pp(data, dim, num_words, &mut rng)?, dim)?;
    let mut assignment = assign_all(&book, data, dim);
    let mut trace = vec![assignment.iter().map(|&(_, d)| d as f64).sum::<f64>()];
    let mut iterations = 0;

    while iterations < max_iters {
        let mut sums = vec![0f64; num_words * dim];
        let mut counts = vec![0usize; num_words];
        for (r, &(w, _)) in data.chunks_exact(dim).zip(&assignment) {
            let w = w as usize;
            counts[w] += 1;
            for (s, v) in sums[w * dim..(w + 1) * dim].iter_mut().zip(r) {
                *s += *v as f64;
            }
        }
        let mut next = vec![0f32; num_words * dim];
        let mut spare: Vec<f32> = assignment.iter().map(|&(_, d)| d).collect();
        for w in 0..num_words {
            let dst = &mut next[w * dim..(w + 1) * dim];
            if counts[w] > 0 {
                let inv = 1.0 / counts[w] as f64;
                for (o, s) in dst.iter_mut().zip(&sums[w * dim..(w + 1) * dim]) {
                    *o = (*s * inv) as f32;
                }
            } else {
                let mut far = 0;
                for (i, &d) in spare.iter().enumerate() {
                    if d > spare[far] {
                        far = i;
                    }
                }
                spare[far] = -1.0;
                dst.copy_from_slice(&data[far * dim..(far + 1) * dim]);
            }
        }
        book = Codebook::from_centroids(next, dim)?;
        let fresh = assign_all(&book, data, dim);
        iterations += 1;
        let unchanged = fresh.iter().zip(&assignment).all(|(a, b)| a.0 == b.0);
        assignment = fresh;
        let d = assignment.iter().map(|&(_, d)| d as f64).sum::<f64>();
        let prev = *trace.last().unwrap();
        trace.push(d);
        let rel = if prev > 0.0 { (prev - d).abs() / prev } else { 0.0 };
        log::debug!("k-means iteration {iterations}: distortion {d:.6e}");
        if unchanged || rel < CONVERGENCE_TOL {
            break;
        }
    }

    book.stats = Some(TrainingStats {
        iterations,
        distortion_trace: trace,
    });
    Ok(book)
}

/// Concatenate descriptors of many images into a training matrix, keeping at
/// most `cap` rows chosen uniformly without replacement.
pub fn training_sample(images: &[ImageFeatures], dim: usize, cap: usize, seed: u64) -> Result<Vec<f32>> {
    let total: usize = images.iter().map(|f| f.descriptors.len()).sum();
    let mut rows: Vec<&[f32]> = Vec::with_capacity(total);
    for f in images {
        if f.dim != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: f.dim,
            });
        }
        rows.extend(f.descriptors.iter().map(|d| d.vector.as_slice()));
    }
    let mut picked: Vec<usize> = if total > cap {
        DetRng::split(seed, 1).sample_indices(total, cap)
    } else {
        (0..total).collect()
    };
    picked.sort_unstable();
    Ok(picked.into_iter().flat_map(|i| rows[i].iter().copied()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Descriptor;

    fn brute_force(book: &Codebook, v: &[f32]) -> u32 {
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for w in 0..book.num_words() {
            let d = squared_distance(v, book.centroid(w));
            if d < best_d {
                best_d = d;
                best = w as u32;
            }
        }
        best
    }

    #[test]
    fn quantize_exact_centroid_and_ties() {
        let book = Codebook::from_centroids(
            vec![0.0, 0.0, 1.0, 0.0, 5.0, 5.0, 7.0, 7.0, -1.0, 0.0],
            2,
        )
        .unwrap();
        assert_eq!(book.quantize(&[7.0, 7.0]).unwrap(), 3);
        // equidistant to words 1 and 4
        assert_eq!(book.quantize(&[0.0, 0.0]).unwrap(), 0);
        let tie = Codebook::from_centroids(vec![9.0, 9.0, 1.0, 0.0, 8.0, 8.0, 7.0, 7.0, -1.0, 0.0], 2).unwrap();
        assert_eq!(tie.quantize(&[0.0, 0.0]).unwrap(), 1);
        assert!(matches!(tie.quantize(&[0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn quantize_matches_linear_scan() {
        let mut rng = DetRng::new(11);
        for &c in &[1usize, 3, 17, 256, 4096] {
            let dim = 8;
            let cents: Vec<f32> = (0..c * dim).map(|_| rng.normal() as f32).collect();
            let book = Codebook::from_centroids(cents, dim).unwrap();
            for _ in 0..50 {
                let v: Vec<f32> = (0..dim).map(|_| rng.normal() as f32).collect();
                assert_eq!(book.quantize(&v).unwrap(), brute_force(&book, &v));
            }
        }
    }

    #[test]
    fn two_clouds_recover_means() {
        let mut rng = DetRng::new(5);
        let mut data = Vec::new();
        let mut means = [[0f64; 2]; 2];
        for (k, center) in [(-10.0, -10.0), (10.0, 10.0)].iter().enumerate() {
            for _ in 0..200 {
                let p = [center.0 + rng.normal(), center.1 + rng.normal()];
                means[k][0] += p[0] / 200.0;
                means[k][1] += p[1] / 200.0;
                data.extend(p.iter().map(|v| *v as f32));
            }
        }
        let book = train_codebook(&data, 2, 2, 50, 1).unwrap();
        for m in means {
            let hit = (0..2).any(|w| {
                let c = book.centroid(w);
                (c[0] as f64 - m[0]).abs() < 1e-3 && (c[1] as f64 - m[1]).abs() < 1e-3
            });
            assert!(hit, "no centroid near {m:?}: {:?}", book.centroids);
        }
    }

    #[test]
    fn single_word_is_global_mean() {
        let data = [1.0f32, 2.0, 3.0, 4.0, 5.0, 9.0];
        let book = train_codebook(&data, 2, 1, 10, 0).unwrap();
        assert!((book.centroid(0)[0] - 3.0).abs() < 1e-6);
        assert!((book.centroid(0)[1] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn distortion_non_increasing_and_deterministic() {
        let mut rng = DetRng::new(9);
        let data: Vec<f32> = (0..3000).map(|_| rng.normal() as f32).collect();
        let a = train_codebook(&data, 3, 16, 40, 42).unwrap();
        let trace = &a.stats.as_ref().unwrap().distortion_trace;
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "distortion rose: {w:?}");
        }
        let b = train_codebook(&data, 3, 16, 40, 42).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn too_few_distinct_points() {
        let data = [1.0f32, 1.0, 1.0, 1.0, 2.0, 2.0];
        assert!(matches!(
            train_codebook(&data, 2, 3, 10, 0),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn partition_counts_and_edge_cases() {
        let book = Codebook::from_centroids(vec![0.0, 0.0, 10.0, 10.0], 2).unwrap();
        let mut f = ImageFeatures::new("x", 10, 10, 2);
        assert!(book.partition(&f).unwrap().is_empty());
        for _ in 0..5 {
            f.descriptors.push(Descriptor {
                vector: vec![9.0, 9.0],
                x: 1.0,
                y: 1.0,
                scale: 1.0,
                attention: 1.0,
            });
        }
        let p = book.partition(&f).unwrap();
        assert_eq!(p.words.len(), 1);
        assert_eq!(p.words[&1], vec![0, 1, 2, 3, 4]);
        assert_eq!(p.total(), 5);
    }

    #[test]
    fn dtrc_round_trip_and_hash() {
        let book = Codebook::from_centroids(vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap();
        let bytes = book.to_bytes();
        assert_eq!(bytes.len(), 12 + 24);
        let back = Codebook::from_bytes(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, book);
        assert_eq!(back.content_hash(), book.content_hash());
        assert!(Codebook::from_bytes(&bytes[..20], Path::new("c")).is_err());
    }
}
