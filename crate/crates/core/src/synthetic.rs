//! Generator for cluttered landmark corpora with planted regions.
//!
//! Each landmark owns a set of archetype descriptors with canonical positions
//! in the unit square. An image of a landmark places a random subset of its
//! archetypes (perturbed) inside a random true box, so any two images of one
//! landmark are related by an axis-aligned affine map. The rest of the image
//! is clutter drawn around clutter modes shared by all images, placed
//! uniformly. Detected boxes are a jittered copy of the true box with a high
//! score, partial sub-boxes with medium scores, and false boxes with low
//! scores. Planted features get higher attention than clutter.
//!
//! Instances with an odd index are harder (noisier, fewer archetypes). Queries
//! are crops of chosen images to their true box; the source image is junk for
//! its query, other easy/hard instances of the landmark are positives.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::{save_ground_truth, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::eval::{GroundTruth, QueryTruth};
use crate::features::{save_image_features, Descriptor, ImageFeatures, RegionBox};
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub name: String,
    pub seed: u64,
    pub landmarks: usize,
    pub images_per_landmark: usize,
    /// Leading instances of each landmark that also serve as queries.
    pub queries_per_landmark: usize,
    pub archetypes: usize,
    /// Landmarks per family; members of a family share some archetypes.
    pub family_size: usize,
    /// Leading archetypes of each landmark taken from its family pool.
    pub shared_archetypes: usize,
    /// Perturbation norm of archetypes around the clutter modes they derive from.
    pub archetype_spread: f64,
    /// Planted descriptors per image.
    pub planted: usize,
    /// Clutter share of all descriptors in an image, in `[0, 1)`.
    pub clutter_fraction: f64,
    pub clutter_modes: usize,
    /// Norm of the perturbation around a clutter mode before renormalizing.
    pub clutter_spread: f64,
    pub dim: usize,
    pub width: u32,
    pub height: u32,
    /// Perturbation norm for planted descriptors of easy instances.
    pub instance_noise: f64,
    /// Perturbation norm for planted descriptors of hard instances.
    pub hard_noise: f64,
    /// Share of archetypes visible in hard instances relative to `planted`.
    pub hard_visible: f64,
    /// Standard deviation of detected-box edges, relative to the box size.
    pub box_noise: f64,
    pub partial_boxes: usize,
    /// Mean number of low-score false boxes; the count per image is uniform
    /// in `[n/2, 3n/2]`.
    pub false_boxes: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            seed: 0,
            landmarks: 20,
            images_per_landmark: 6,
            queries_per_landmark: 2,
            archetypes: 40,
            archetype_spread: 1.0,
            family_size: 2,
            shared_archetypes: 12,
            planted: 30,
            clutter_fraction: 0.8,
            clutter_modes: 32,
            clutter_spread: 0.8,
            dim: 128,
            width: 640,
            height: 480,
            instance_noise: 0.8,
            hard_noise: 1.2,
            hard_visible: 0.7,
            box_noise: 0.05,
            partial_boxes: 2,
            false_boxes: 8,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.landmarks == 0 || self.images_per_landmark < 2 {
            return bad("need at least one landmark and two images per landmark");
        }
        if self.queries_per_landmark > self.images_per_landmark {
            return bad("queries_per_landmark exceeds images_per_landmark");
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return bad("clutter_fraction must lie in [0, 1)");
        }
        if self.dim == 0 || self.dim > u16::MAX as usize {
            return bad("dim must lie in 1..=65535");
        }
        if self.planted == 0 || self.planted > self.archetypes {
            return bad("planted must lie in 1..=archetypes");
        }
        if self.family_size == 0 || self.shared_archetypes > self.archetypes {
            return bad("family_size must be positive and shared_archetypes at most archetypes");
        }
        if self.clutter_modes == 0 || self.width < 16 || self.height < 16 {
            return bad("clutter_modes must be positive and the image at least 16x16");
        }
        if !(0.0..=1.0).contains(&self.hard_visible) {
            return bad("hard_visible must lie in [0, 1]");
        }
        Ok(())
    }

    /// Set one field from its `key:value` name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "name" => self.name = value.to_string(),
            "seed" => self.seed = p(key, value)?,
            "landmarks" => self.landmarks = p(key, value)?,
            "images_per_landmark" => self.images_per_landmark = p(key, value)?,
            "queries_per_landmark" => self.queries_per_landmark = p(key, value)?,
            "archetypes" => self.archetypes = p(key, value)?,
            "archetype_spread" => self.archetype_spread = p(key, value)?,
            "family_size" => self.family_size = p(key, value)?,
            "shared_archetypes" => self.shared_archetypes = p(key, value)?,
            "planted" => self.planted = p(key, value)?,
            "clutter_fraction" => self.clutter_fraction = p(key, value)?,
            "clutter_modes" => self.clutter_modes = p(key, value)?,
            "clutter_spread" => self.clutter_spread = p(key, value)?,
            "dim" => self.dim = p(key, value)?,
            "width" => self.width = p(key, value)?,
            "height" => self.height = p(key, value)?,
            "instance_noise" => self.instance_noise = p(key, value)?,
            "hard_noise" => self.hard_noise = p(key, value)?,
            "hard_visible" => self.hard_visible = p(key, value)?,
            "box_noise" => self.box_noise = p(key, value)?,
            "partial_boxes" => self.partial_boxes = p(key, value)?,
            "false_boxes" => self.false_boxes = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown synthetic parameter `{key}`"))),
        }
        Ok(())
    }

    /// Clutter descriptors per image for the configured fraction.
    pub fn clutter_count(&self) -> usize {
        (self.planted as f64 * self.clutter_fraction / (1.0 - self.clutter_fraction)).round() as usize
    }

    /// `key:value` lines describing the configuration.
    pub fn to_key_values(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut push = |k: &str, val: String| v.push(format!("{k}:{val}"));
        push("name", self.name.clone());
        push("seed", self.seed.to_string());
        push("landmarks", self.landmarks.to_string());
        push("images_per_landmark", self.images_per_landmark.to_string());
        push("queries_per_landmark", self.queries_per_landmark.to_string());
        push("archetypes", self.archetypes.to_string());
        push("archetype_spread", self.archetype_spread.to_string());
        push("family_size", self.family_size.to_string());
        push("shared_archetypes", self.shared_archetypes.to_string());
        push("planted", self.planted.to_string());
        push("clutter_fraction", self.clutter_fraction.to_string());
        push("clutter_modes", self.clutter_modes.to_string());
        push("clutter_spread", self.clutter_spread.to_string());
        push("dim", self.dim.to_string());
        push("width", self.width.to_string());
        push("height", self.height.to_string());
        push("instance_noise", self.instance_noise.to_string());
        push("hard_noise", self.hard_noise.to_string());
        push("hard_visible", self.hard_visible.to_string());
        push("box_noise", self.box_noise.to_string());
        push("partial_boxes", self.partial_boxes.to_string());
        push("false_boxes", self.false_boxes.to_string());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub images: Vec<ImageFeatures>,
    /// Landmark of each image.
    pub landmark_of: Vec<usize>,
    /// Planted region of each image.
    pub true_boxes: Vec<RegionBox>,
    pub queries: Vec<ImageFeatures>,
    pub ground_truth: GroundTruth,
}

fn unit_gaussian(rng: &mut DetRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `normalize(center + noise · g / sqrt(D))` with `g` standard normal.
fn perturb(rng: &mut DetRng, center: &[f64], noise: f64) -> Vec<f32> {
    let s = noise / (center.len() as f64).sqrt();
    loop {
        let v: Vec<f64> = center.iter().map(|&c| c + s * rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| (x / n) as f32).collect();
        }
    }
}

struct Landmark {
    archetypes: Vec<Vec<f64>>,
    positions: Vec<(f64, f64)>,
}

pub fn image_id(landmark: usize, instance: usize) -> String {
    format!("l{landmark:03}_{instance:03}")
}

pub fn query_id(landmark: usize, instance: usize) -> String {
    format!("q_{}", image_id(landmark, instance))
}

fn clip_box(b: RegionBox, w: f64, h: f64) -> RegionBox {
    let c = |v: f32, hi: f64| v.clamp(0.0, hi as f32);
    RegionBox::new(c(b.xmin, w), c(b.ymin, h), c(b.xmax, w), c(b.ymax, h), b.score)
}

impl SyntheticDataset {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let mut global = DetRng::split(cfg.seed, 0);
        let clutter_modes: Vec<Vec<f64>> = (0..cfg.clutter_modes).map(|_| unit_gaussian(&mut global, cfg.dim)).collect();
        let draw_archetype = |rng: &mut DetRng| -> Vec<f64> {
            let mode = &clutter_modes[rng.below(cfg.clutter_modes)];
            perturb(rng, mode, cfg.archetype_spread).into_iter().map(f64::from).collect()
        };
        let families = cfg.landmarks.div_ceil(cfg.family_size);
        let shared: Vec<Vec<Vec<f64>>> = (0..families)
            .map(|_| (0..cfg.shared_archetypes).map(|_| draw_archetype(&mut global)).collect())
            .collect();
        let landmarks: Vec<Landmark> = (0..cfg.landmarks)
            .map(|l| Landmark {
                archetypes: (0..cfg.archetypes)
                    .map(|a| match shared[l / cfg.family_size].get(a) {
                        Some(v) => v.clone(),
                        None => draw_archetype(&mut global),
                    })
                    .collect(),
                positions: (0..cfg.archetypes)
                    .map(|_| (global.uniform_range(0.05, 0.95), global.uniform_range(0.05, 0.95)))
                    .collect(),
            })
            .collect();

        let n_clutter = cfg.clutter_count();
        let mut images = Vec::new();
        let mut landmark_of = Vec::new();
        let mut true_boxes = Vec::new();
        let mut queries = Vec::new();
        let mut ground_truth = GroundTruth::default();
        for (l, lm) in landmarks.iter().enumerate() {
            for k in 0..cfg.images_per_landmark {
                let stream = 1 + (l * cfg.images_per_landmark + k) as u64;
                let mut rng = DetRng::split(cfg.seed, stream);
                let hard = k % 2 == 1;
                let bw = rng.uniform_range(0.35, 0.6) * w;
                let bh = rng.uniform_range(0.35, 0.6) * h;
                let x0 = rng.uniform_range(0.0, w - bw);
                let y0 = rng.uniform_range(0.0, h - bh);
                let truth = RegionBox::new(x0 as f32, y0 as f32, (x0 + bw) as f32, (y0 + bh) as f32, 1.0);

                let mut f = ImageFeatures::new(image_id(l, k), cfg.width, cfg.height, cfg.dim);
                let (noise, visible) = if hard {
                    (cfg.hard_noise, ((cfg.planted as f64 * cfg.hard_visible).round() as usize).max(1))
                } else {
                    (cfg.instance_noise, cfg.planted)
                };
                for a in rng.sample_indices(cfg.archetypes, visible) {
                    let (u, v) = lm.positions[a];
                    let x = (x0 + u * bw + 0.005 * bw * rng.normal()).clamp(0.0, w - 1e-3);
                    let y = (y0 + v * bh + 0.005 * bh * rng.normal()).clamp(0.0, h - 1e-3);
                    f.descriptors.push(Descriptor {
                        vector: perturb(&mut rng, &lm.archetypes[a], noise),
                        x: x as f32,
                        y: y as f32,
                        scale: rng.uniform_range(1.0, 4.0) as f32,
                        attention: rng.uniform().sqrt() as f32,
                    });
                }
                for _ in 0..n_clutter {
                    let mode = &clutter_modes[rng.below(cfg.clutter_modes)];
                    f.descriptors.push(Descriptor {
                        vector: perturb(&mut rng, mode, cfg.clutter_spread),
                        x: rng.uniform_range(0.0, w) as f32,
                        y: rng.uniform_range(0.0, h) as f32,
                        scale: rng.uniform_range(1.0, 4.0) as f32,
                        attention: rng.uniform().powi(2) as f32,
                    });
                }

                let jitter = |rng: &mut DetRng, v: f64, size: f64| (v + cfg.box_noise * size * rng.normal()) as f32;
                let main = RegionBox::new(
                    jitter(&mut rng, x0, bw),
                    jitter(&mut rng, y0, bh),
                    jitter(&mut rng, x0 + bw, bw),
                    jitter(&mut rng, y0 + bh, bh),
                    rng.uniform_range(0.7, 1.0) as f32,
                );
                f.boxes.push(clip_box(main, w, h));
                for _ in 0..cfg.partial_boxes {
                    let pw = rng.uniform_range(0.4, 0.7) * bw;
                    let ph = rng.uniform_range(0.4, 0.7) * bh;
                    let px = x0 + rng.uniform_range(0.0, bw - pw);
                    let py = y0 + rng.uniform_range(0.0, bh - ph);
                    let score = rng.uniform_range(0.3, 0.7) as f32;
                    f.boxes.push(RegionBox::new(px as f32, py as f32, (px + pw) as f32, (py + ph) as f32, score));
                }
                let n_false = cfg.false_boxes / 2 + rng.below(cfg.false_boxes + 1);
                for _ in 0..n_false {
                    let fw = rng.uniform_range(0.08, 0.25) * w;
                    let fh = rng.uniform_range(0.08, 0.25) * h;
                    let fx = rng.uniform_range(0.0, w - fw);
                    let fy = rng.uniform_range(0.0, h - fh);
                    let score = rng.uniform_range(0.01, 0.45) as f32;
                    f.boxes.push(RegionBox::new(fx as f32, fy as f32, (fx + fw) as f32, (fy + fh) as f32, score));
                }
                // drop degenerate boxes produced by heavy jitter
                f.boxes.retain(|b| b.xmax > b.xmin && b.ymax > b.ymin);

                if k < cfg.queries_per_landmark {
                    queries.push(crop(&f, &truth, query_id(l, k)));
                    let ids = |parity: usize| {
                        (0..cfg.images_per_landmark)
                            .filter(|&j| j != k && j % 2 == parity)
                            .map(|j| image_id(l, j))
                            .collect()
                    };
                    ground_truth.insert(
                        &query_id(l, k),
                        QueryTruth {
                            easy: ids(0),
                            hard: ids(1),
                            junk: [image_id(l, k)].into_iter().collect(),
                        },
                    )?;
                }
                images.push(f);
                landmark_of.push(l);
                true_boxes.push(truth);
            }
        }
        Ok(Self {
            config: cfg.clone(),
            images,
            landmark_of,
            true_boxes,
            queries,
            ground_truth,
        })
    }

    /// Pairs of distinct images of the same landmark: each image with the
    /// next instance of its landmark.
    pub fn matched_pairs(&self) -> Vec<(ImageFeatures, ImageFeatures)> {
        let per = self.config.images_per_landmark;
        (0..self.images.len())
            .map(|i| {
                let l = self.landmark_of[i];
                let j = l * per + (i - l * per + 1) % per;
                (self.images[i].clone(), self.images[j].clone())
            })
            .collect()
    }

    /// Write `manifest.txt`, `ground_truth.txt`, `images/` and `queries/`
    /// under `dir`; returns the manifest path. `provenance` lines are added
    /// as comments to both text files.
    pub fn write(&self, dir: &Path, provenance: &[String]) -> Result<PathBuf> {
        for sub in ["images", "queries"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut manifest = DatasetManifest::new(self.config.name.clone(), self.config.dim);
        manifest.base_dir = dir.to_path_buf();
        manifest.comments = provenance.to_vec();
        manifest.ground_truth = Some(PathBuf::from("ground_truth.txt"));
        let write_set = |set: &[ImageFeatures], sub: &str| -> Result<Vec<ManifestEntry>> {
            set.iter()
                .map(|f| {
                    let rel = PathBuf::from(sub).join(format!("{}.dtrf", f.image_id));
                    save_image_features(f, dir.join(&rel))?;
                    Ok(ManifestEntry {
                        id: f.image_id.clone(),
                        path: rel,
                        width: Some(f.width),
                        height: Some(f.height),
                    })
                })
                .collect()
        };
        manifest.images = write_set(&self.images, "images")?;
        manifest.queries = write_set(&self.queries, "queries")?;
        save_ground_truth(&self.ground_truth, provenance, dir.join("ground_truth.txt"))?;
        let path = dir.join("manifest.txt");
        manifest.save(&path)?;
        Ok(path)
    }

    /// One line per image: id, landmark and planted box.
    pub fn layout_summary(&self) -> String {
        let mut s = String::new();
        for ((f, l), b) in self.images.iter().zip(&self.landmark_of).zip(&self.true_boxes) {
            let _ = writeln!(s, "{}\t{l}\t{} {} {} {}", f.image_id, b.xmin, b.ymin, b.xmax, b.ymax);
        }
        s
    }
}

/// Descriptors of `f` inside `region`, re-expressed in crop coordinates.
fn crop(f: &ImageFeatures, region: &RegionBox, id: String) -> ImageFeatures {
    let w = (region.xmax - region.xmin).ceil().max(1.0);
    let h = (region.ymax - region.ymin).ceil().max(1.0);
    let mut q = ImageFeatures::new(id, w as u32, h as u32, f.dim);
    q.descriptors = f
        .descriptors
        .iter()
        .filter(|d| region.contains(d.x, d.y))
        .map(|d| Descriptor {
            x: d.x - region.xmin,
            y: d.y - region.ymin,
            ..d.clone()
        })
        .collect();
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            landmarks: 3,
            images_per_landmark: 4,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_and_counts() {
        let cfg = small();
        let d = SyntheticDataset::generate(&cfg).unwrap();
        assert_eq!(d.images.len(), 12);
        assert_eq!(d.queries.len(), 6);
        assert_eq!(cfg.clutter_count(), 120);
        for (i, f) in d.images.iter().enumerate() {
            f.validate().unwrap();
            let planted = if i % 2 == 1 { 21 } else { 30 };
            assert_eq!(f.len(), planted + 120);
            assert!((1 + 2 + 4..=1 + 2 + 12).contains(&f.boxes.len()));
            for desc in &f.descriptors {
                let n: f64 = desc.vector.iter().map(|&x| (x as f64).powi(2)).sum();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        for q in &d.queries {
            q.validate().unwrap();
            assert!(q.len() >= 21);
        }
        let t = d.ground_truth.get("q_l000_000").unwrap();
        assert_eq!(t.easy.len(), 1);
        assert_eq!(t.hard.len(), 2);
        assert!(t.junk.contains("l000_000"));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = SyntheticDataset::generate(&small()).unwrap();
        let b = SyntheticDataset::generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = SyntheticDataset::generate(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn pairs_share_landmark() {
        let d = SyntheticDataset::generate(&small()).unwrap();
        for (a, b) in d.matched_pairs() {
            assert_ne!(a.image_id, b.image_id);
            assert_eq!(a.image_id[..4], b.image_id[..4]);
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SyntheticConfig { clutter_fraction: 1.0, ..small() }.validate().is_err());
        assert!(SyntheticConfig { planted: 50, ..small() }.validate().is_err());
    }
}
