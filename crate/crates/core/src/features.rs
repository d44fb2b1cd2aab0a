//! Local-feature containers and the `DTRF` binary feature file.
//!
//! ```text
//! offset  size      field
//! 0       4         magic b"DTRF"
//! 4       2         version (u16, = 1)
//! 6       2         D, descriptor dimensionality (u16, >= 1)
//! 8       4         M, descriptor count (u32)
//! 12      4         B, region box count (u32)
//! 16      M*(16+4D) descriptor records: x, y, scale, attention, D x vector (f32)
//! ...     B*20      box records: xmin, ymin, xmax, ymax, score (f32)
//! ```
//!
//! All values little-endian. The file length must equal the layout exactly;
//! trailing bytes are rejected. NaN or infinite values are rejected on both
//! load and save.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DTRF_MAGIC: [u8; 4] = *b"DTRF";
pub const DTRF_VERSION: u16 = 1;
pub const DTRF_HEADER_BYTES: usize = 16;
pub const BOX_RECORD_BYTES: usize = 20;

/// Byte size of one descriptor record for dimensionality `dim`.
pub const fn descriptor_record_bytes(dim: usize) -> usize {
    16 + 4 * dim
}

/// A local descriptor with its keypoint geometry and attention score.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub vector: Vec<f32>,
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    pub attention: f32,
}

/// Axis-aligned region in pixel coordinates with a detector confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionBox {
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
    pub score: f32,
}

impl RegionBox {
    pub fn new(xmin: f32, ymin: f32, xmax: f32, ymax: f32, score: f32) -> Self {
        Self {
            xmin,
            ymin,
            xmax,
            ymax,
            score,
        }
    }

    /// The full image `[0, width] x [0, height]` with score 1.
    pub fn whole_image(width: u32, height: u32) -> Self {
        Self::new(0.0, 0.0, width as f32, height as f32, 1.0)
    }

    pub fn area(&self) -> f64 {
        (self.xmax as f64 - self.xmin as f64) * (self.ymax as f64 - self.ymin as f64)
    }

    /// Closed on the min edges, open on the max edges.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.xmin && x < self.xmax && y >= self.ymin && y < self.ymax
    }

    pub fn covers_image(&self, width: u32, height: u32) -> bool {
        self.xmin <= 0.0
            && self.ymin <= 0.0
            && self.xmax >= width as f32
            && self.ymax >= height as f32
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.xmin, self.ymin, self.xmax, self.ymax, self.score];
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation(format!("non-finite box {self:?}")));
        }
        if self.xmin >= self.xmax || self.ymin >= self.ymax {
            return Err(Error::Validation(format!("degenerate box {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!(
                "box score {} outside [0,1]",
                self.score
            )));
        }
        Ok(())
    }
}

/// All local features of one image plus its candidate region boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub dim: usize,
    pub descriptors: Vec<Descriptor>,
    pub boxes: Vec<RegionBox>,
}

/// Metadata that a manifest can impose on a loaded feature file.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub image_id: Option<String>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub expected_dim: Option<usize>,
    /// Drop descriptors whose attention is below this value.
    pub min_attention: Option<f32>,
}

impl ImageFeatures {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32, dim: usize) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            dim,
            descriptors: Vec::new(),
            boxes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Smallest integer extent enclosing every keypoint and box.
    pub fn inferred_extent(descriptors: &[Descriptor], boxes: &[RegionBox]) -> (u32, u32) {
        let mut w = 1.0f32;
        let mut h = 1.0f32;
        for d in descriptors {
            w = w.max(d.x);
            h = h.max(d.y);
        }
        for b in boxes {
            w = w.max(b.xmax);
            h = h.max(b.ymax);
        }
        (w.ceil() as u32, h.ceil() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > u16::MAX as usize {
            return Err(Error::Validation(format!(
                "dimensionality {} outside 1..=65535",
                self.dim
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation("image extent must be positive".into()));
        }
        for (i, d) in self.descriptors.iter().enumerate() {
            if d.vector.len() != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    found: d.vector.len(),
                });
            }
            let geometry = [d.x, d.y, d.scale, d.attention];
            if geometry.iter().chain(&d.vector).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "descriptor {i} of `{}` has a non-finite value",
                    self.image_id
                )));
            }
            if d.scale <= 0.0 {
                return Err(Error::Validation(format!(
                    "descriptor {i} has non-positive scale {}",
                    d.scale
                )));
            }
            if d.attention < 0.0 {
                return Err(Error::Validation(format!(
                    "descriptor {i} has negative attention {}",
                    d.attention
                )));
            }
            if d.x < 0.0 || d.y < 0.0 || d.x > self.width as f32 || d.y > self.height as f32 {
                return Err(Error::Validation(format!(
                    "descriptor {i} at ({}, {}) outside {}x{} image `{}`",
                    d.x, d.y, self.width, self.height, self.image_id
                )));
            }
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }

    /// Exact serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        DTRF_HEADER_BYTES
            + self.descriptors.len() * descriptor_record_bytes(self.dim)
            + self.boxes.len() * BOX_RECORD_BYTES
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let m = u32::try_from(self.descriptors.len())
            .map_err(|_| Error::Validation("too many descriptors".into()))?;
        let b = u32::try_from(self.boxes.len())
            .map_err(|_| Error::Validation("too many boxes".into()))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&DTRF_MAGIC);
        out.extend_from_slice(&DTRF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u16).to_le_bytes());
        out.extend_from_slice(&m.to_le_bytes());
        out.extend_from_slice(&b.to_le_bytes());
        for d in &self.descriptors {
            for v in [d.x, d.y, d.scale, d.attention].iter().chain(&d.vector) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for r in &self.boxes {
            for v in [r.xmin, r.ymin, r.xmax, r.ymax, r.score] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path, opts: &LoadOptions) -> Result<Self> {
        if bytes.len() < DTRF_HEADER_BYTES {
            return Err(Error::format(path, "header", "file shorter than 16-byte header"));
        }
        if bytes[0..4] != DTRF_MAGIC {
            return Err(Error::format(path, "magic", "expected \"DTRF\""));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DTRF_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: DTRF_VERSION,
                found: version,
            });
        }
        let dim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        if dim == 0 {
            return Err(Error::format(path, "D", "dimensionality must be >= 1"));
        }
        if let Some(expected) = opts.expected_dim {
            if expected != dim {
                return Err(Error::Dimension {
                    expected,
                    found: dim,
                });
            }
        }
        let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let b = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let rec = descriptor_record_bytes(dim);
        let expected_len = (m as u128) * rec as u128
            + (b as u128) * BOX_RECORD_BYTES as u128
            + DTRF_HEADER_BYTES as u128;
        let actual = bytes.len() as u128;
        if actual < expected_len {
            let field = if actual < (DTRF_HEADER_BYTES + m * rec) as u128 {
                "descriptor records"
            } else {
                "box records"
            };
            return Err(Error::format(
                path,
                field,
                format!("truncated: {actual} bytes, layout needs {expected_len}"),
            ));
        }
        if actual > expected_len {
            return Err(Error::format(
                path,
                "trailing bytes",
                format!("{} bytes after declared records", actual - expected_len),
            ));
        }

        let mut floats = bytes[DTRF_HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut descriptors = Vec::with_capacity(m);
        for _ in 0..m {
            let x = floats.next().unwrap();
            let y = floats.next().unwrap();
            let scale = floats.next().unwrap();
            let attention = floats.next().unwrap();
            let vector: Vec<f32> = floats.by_ref().take(dim).collect();
            descriptors.push(Descriptor {
                vector,
                x,
                y,
                scale,
                attention,
            });
        }
        let mut boxes = Vec::with_capacity(b);
        for _ in 0..b {
            let mut v = [0f32; 5];
            for slot in &mut v {
                *slot = floats.next().unwrap();
            }
            boxes.push(RegionBox::new(v[0], v[1], v[2], v[3], v[4]));
        }

        let (iw, ih) = Self::inferred_extent(&descriptors, &boxes);
        let image_id = opts.image_id.clone().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        let mut features = ImageFeatures {
            image_id,
            width: opts.width.unwrap_or(iw),
            height: opts.height.unwrap_or(ih),
            dim,
            descriptors,
            boxes,
        };
        features
            .validate()
            .map_err(|e| Error::format(path, "payload", e.to_string()))?;
        if let Some(t) = opts.min_attention {
            features.descriptors.retain(|d| d.attention >= t);
        }
        Ok(features)
    }
}

/// Load and validate a `DTRF` file.
pub fn load_image_features(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<ImageFeatures> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ImageFeatures::from_bytes(&bytes, path, opts)
}

/// Validate and write a `DTRF` file. Nothing is written when validation fails.
pub fn save_image_features(features: &ImageFeatures, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = features.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(dim: usize) -> ImageFeatures {
        let mut f = ImageFeatures::new("img", 100, 80, dim);
        f.descriptors.push(Descriptor {
            vector: (0..dim).map(|i| i as f32 * 0.5 - 1.0).collect(),
            x: 10.0,
            y: 20.0,
            scale: 2.0,
            attention: 150.0,
        });
        f.boxes.push(RegionBox::new(5.0, 5.0, 50.0, 40.0, 0.8));
        f
    }

    #[test]
    fn one_descriptor_one_box_byte_count() {
        // 16-byte header + (4 geometry + 128 vector) * 4 bytes + 5 * 4 bytes
        let f = sample(128);
        let bytes = f.to_bytes().unwrap();
        assert_eq!(bytes.len(), 16 + 528 + 20);
        assert_eq!(bytes.len(), 564);
    }

    #[test]
    fn empty_image_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.dtrf");
        let f = ImageFeatures::new("e", 1, 1, 8);
        save_image_features(&f, &p).unwrap();
        let g = load_image_features(&p, &LoadOptions::default()).unwrap();
        assert!(g.descriptors.is_empty());
        assert!(g.boxes.is_empty());
        assert_eq!(g.dim, 8);
    }

    #[test]
    fn nan_component_rejected_and_nothing_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.dtrf");
        let mut f = sample(4);
        f.descriptors[0].vector[2] = f32::NAN;
        assert!(matches!(
            save_image_features(&f, &p),
            Err(Error::Validation(_))
        ));
        assert!(!p.exists());
    }

    #[test]
    fn dimension_mismatch_against_manifest() {
        let bytes = sample(128).to_bytes().unwrap();
        let opts = LoadOptions {
            expected_dim: Some(64),
            ..Default::default()
        };
        let err = ImageFeatures::from_bytes(&bytes, Path::new("x"), &opts).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 64,
                found: 128
            }
        ));
    }

    #[test]
    fn malformed_header_names_field() {
        let mut bytes = sample(4).to_bytes().unwrap();
        bytes[0] = b'X';
        let err = ImageFeatures::from_bytes(&bytes, Path::new("x"), &Default::default());
        assert!(matches!(err, Err(Error::Format { ref field, .. }) if field == "magic"));
        let err = ImageFeatures::from_bytes(&bytes[..10], Path::new("x"), &Default::default());
        assert!(matches!(err, Err(Error::Format { ref field, .. }) if field == "header"));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample(4).to_bytes().unwrap();
        bytes.push(0);
        let err = ImageFeatures::from_bytes(&bytes, Path::new("x"), &Default::default());
        assert!(matches!(err, Err(Error::Format { ref field, .. }) if field == "trailing bytes"));
        bytes.truncate(bytes.len() - 3);
        let err = ImageFeatures::from_bytes(&bytes, Path::new("x"), &Default::default());
        assert!(matches!(err, Err(Error::Format { ref field, .. }) if field == "box records"));
    }

    #[test]
    fn attention_filter_is_opt_in() {
        let mut f = sample(4);
        let mut d = f.descriptors[0].clone();
        d.attention = 50.0;
        f.descriptors.push(d);
        let bytes = f.to_bytes().unwrap();
        let all = ImageFeatures::from_bytes(&bytes, Path::new("x"), &Default::default()).unwrap();
        assert_eq!(all.len(), 2);
        let opts = LoadOptions {
            min_attention: Some(100.0),
            ..Default::default()
        };
        let kept = ImageFeatures::from_bytes(&bytes, Path::new("x"), &opts).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn half_open_containment() {
        let b = RegionBox::new(1.0, 2.0, 3.0, 4.0, 0.5);
        assert!(b.contains(1.0, 2.0));
        assert!(!b.contains(3.0, 4.0));
        assert!(!b.contains(3.0, 3.0));
    }

    fn arb_features() -> impl Strategy<Value = ImageFeatures> {
        (1usize..6, 0usize..6, 0usize..4).prop_flat_map(|(dim, m, b)| {
            let desc = (
                prop::collection::vec(-1e3f32..1e3, dim),
                0f32..=64.0,
                0f32..=48.0,
                0.01f32..10.0,
                0f32..500.0,
            )
                .prop_map(|(vector, x, y, scale, attention)| Descriptor {
                    vector,
                    x,
                    y,
                    scale,
                    attention,
                });
            let bx = (0f32..30.0, 0f32..20.0, 1f32..30.0, 1f32..20.0, 0f32..=1.0)
                .prop_map(|(x, y, w, h, s)| RegionBox::new(x, y, x + w, y + h, s));
            (
                prop::collection::vec(desc, m),
                prop::collection::vec(bx, b),
            )
                .prop_map(move |(descriptors, boxes)| ImageFeatures {
                    image_id: "p".into(),
                    width: 64,
                    height: 48,
                    dim,
                    descriptors,
                    boxes,
                })
        })
    }

    proptest! {
        #[test]
        fn save_load_is_byte_stable(f in arb_features()) {
            let bytes = f.to_bytes().unwrap();
            prop_assert_eq!(bytes.len(), f.encoded_len());
            let opts = LoadOptions {
                image_id: Some("p".into()),
                width: Some(64),
                height: Some(48),
                ..Default::default()
            };
            let g = ImageFeatures::from_bytes(&bytes, Path::new("p.dtrf"), &opts).unwrap();
            prop_assert_eq!(&g, &f);
            prop_assert_eq!(g.to_bytes().unwrap(), bytes);
        }
    }
}
