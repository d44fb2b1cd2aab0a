//! Inverted-file index over aggregated residuals.
//!
//! Every database entry (a whole image, one region of an image, or a
//! regional aggregate) stores one residual per visual word it contains. The
//! postings list of word `c` holds `(entry id, residual)` pairs sorted by entry
//! id, with the residual inline (`D × f32` or `ceil(D/64)` sign blocks).
//! Querying walks only the query's words, accumulates `σ(u)` per entry in
//! ascending word order, and scales each entry by `γ(query)·γ(entry)`. This is
//! the same sequence of floating-point operations as the pairwise kernel, so
//! index scores equal exhaustive evaluation.
//!
//! # File layout (`DTRI`, little-endian)
//!
//! ```text
//! "DTRI" | version u16 | mode u8 | flags u8 (bit 0: γ_R normalization)
//! codebook SHA-256 [32]
//! provenance u32 len + UTF-8 | strategy u32 len + UTF-8
//! alpha f64 | tau f64 | D u16 | C u32
//! images u32, then per image: id u16 len + UTF-8 | region count u32
//! entries u32, then per entry: image u32 | region u32 | scale f64
//! C times: postings length u32, entry ids u32 × n, payloads
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::codebook::{Codebook, WordPartition};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::kernels::{
    aggregate, aggregate_descriptors, binary_blocks, binary_similarity, dot, AggregationMode,
    ResidualData, ResidualSet, Selectivity, SelectivityParams,
};
use crate::regional::{
    aggregate_regional_assigned, assign_to_region, regional_query, select_regions, RegionStrategy,
    RegionalMode,
};

pub const DTRI_MAGIC: &[u8; 4] = b"DTRI";
pub const DTRI_VERSION: u16 = 1;
pub const DEFAULT_TOP_N: usize = 100;

const FLAG_NORMALIZE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexMode {
    Vlad,
    Asmk,
    AsmkBinary,
    RVlad,
    NaiveRAsmk,
    RAsmk,
    RAsmkBinary,
}

impl IndexMode {
    pub const ALL: [IndexMode; 7] = [
        IndexMode::Vlad,
        IndexMode::Asmk,
        IndexMode::AsmkBinary,
        IndexMode::RVlad,
        IndexMode::NaiveRAsmk,
        IndexMode::RAsmk,
        IndexMode::RAsmkBinary,
    ];

    fn code(self) -> u8 {
        Self::ALL.iter().position(|&m| m == self).unwrap() as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    /// Regional aggregation mode; `None` for per-entry kernels, which index
    /// one entry per selected region.
    pub fn regional(self) -> Option<RegionalMode> {
        match self {
            IndexMode::RVlad => Some(RegionalMode::RVlad),
            IndexMode::NaiveRAsmk => Some(RegionalMode::NaiveRAsmk),
            IndexMode::RAsmk => Some(RegionalMode::RAsmk),
            IndexMode::RAsmkBinary => Some(RegionalMode::RAsmkBinary),
            _ => None,
        }
    }

    pub fn plain(self) -> Option<AggregationMode> {
        match self {
            IndexMode::Vlad => Some(AggregationMode::Vlad),
            IndexMode::Asmk => Some(AggregationMode::Asmk),
            IndexMode::AsmkBinary => Some(AggregationMode::AsmkBinary),
            _ => None,
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, IndexMode::AsmkBinary | IndexMode::RAsmkBinary)
    }

    pub fn selectivity(self, params: &SelectivityParams) -> Selectivity {
        match (self.plain(), self.regional()) {
            (Some(m), _) => m.selectivity(params),
            (_, Some(r)) => r.selectivity(params),
            _ => unreachable!(),
        }
    }
}

impl fmt::Display for IndexMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IndexMode::Vlad => "vlad",
            IndexMode::Asmk => "asmk",
            IndexMode::AsmkBinary => "asmk-star",
            IndexMode::RVlad => "r-vlad",
            IndexMode::NaiveRAsmk => "naive-r-asmk",
            IndexMode::RAsmk => "r-asmk",
            IndexMode::RAsmkBinary => "r-asmk-star",
        })
    }
}

impl FromStr for IndexMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Avg,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" => Ok(Pooling::Avg),
            _ => Err(Error::Config(format!("unknown pooling `{s}`"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Avg => "avg",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexConfig {
    pub mode: IndexMode,
    pub strategy: RegionStrategy,
    pub params: SelectivityParams,
    /// Apply `γ_R` on both sides in regional aggregation modes.
    pub normalize: bool,
}

impl IndexConfig {
    pub fn new(mode: IndexMode, strategy: RegionStrategy) -> Self {
        Self {
            mode,
            strategy,
            params: SelectivityParams::default(),
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexImage {
    pub id: String,
    /// Entries of this image for per-region modes, regions aggregated otherwise.
    pub regions: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexEntry {
    pub image: u32,
    /// 0 is the whole image.
    pub region: u32,
    /// `γ` of the entry (`γ_R`, or 1 without normalization).
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Postings {
    pub entries: Vec<u32>,
    pub payload: ResidualData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub config: IndexConfig,
    pub dim: usize,
    pub num_words: usize,
    pub codebook_hash: [u8; 32],
    pub provenance: String,
    pub images: Vec<IndexImage>,
    pub entries: Vec<IndexEntry>,
    pub postings: Vec<Postings>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub image_id: String,
    pub score: f32,
    /// Verified inlier count after spatial re-ranking.
    pub inliers: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedResult {
    pub query_id: String,
    pub items: Vec<RankedItem>,
    pub warnings: Vec<String>,
}

impl RankedResult {
    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.image_id.as_str()).collect()
    }

    /// `query:<id>\tranked:<id>=<score>,...[\tinliers:<n>,...]`
    pub fn to_line(&self) -> String {
        let ranked: Vec<String> = self
            .items
            .iter()
            .map(|i| format!("{}={}", i.image_id, i.score))
            .collect();
        let mut line = format!("query:{}\tranked:{}", self.query_id, ranked.join(","));
        if self.items.iter().any(|i| i.inliers.is_some()) {
            let inl: Vec<String> = self
                .items
                .iter()
                .map(|i| i.inliers.map_or_else(|| "-".to_string(), |n| n.to_string()))
                .collect();
            line.push_str("\tinliers:");
            line.push_str(&inl.join(","));
        }
        line
    }

    pub fn parse_line(line: &str, path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::format(path, "results", format!("{detail}: `{line}`"));
        let mut out = RankedResult::default();
        let mut inliers: Option<Vec<Option<u32>>> = None;
        for (i, field) in line.split('\t').enumerate() {
            let (k, v) = field.split_once(':').ok_or_else(|| bad("missing key"))?;
            match (i, k) {
                (0, "query") => out.query_id = v.to_string(),
                (_, "ranked") if !v.is_empty() => {
                    for item in v.split(',') {
                        let (id, s) = item.split_once('=').ok_or_else(|| bad("bad item"))?;
                        let score = s.parse().map_err(|_| bad("bad score"))?;
                        out.items.push(RankedItem {
                            image_id: id.to_string(),
                            score,
                            inliers: None,
                        });
                    }
                }
                (_, "ranked") => {}
                (_, "inliers") => {
                    let parsed: std::result::Result<Vec<Option<u32>>, _> = v
                        .split(',')
                        .map(|n| if n == "-" { Ok(None) } else { n.parse().map(Some) })
                        .collect();
                    inliers = Some(parsed.map_err(|_| bad("bad inliers"))?);
                }
                _ => return Err(bad("unexpected field")),
            }
        }
        if out.query_id.is_empty() {
            return Err(bad("missing query"));
        }
        if let Some(inl) = inliers {
            if inl.len() != out.items.len() {
                return Err(bad("inlier count mismatch"));
            }
            for (item, n) in out.items.iter_mut().zip(inl) {
                item.inliers = n;
            }
        }
        Ok(out)
    }
}

/// Per-entry representations of one image, before merging into postings.
struct ImageEntries {
    id: String,
    regions: u32,
    entries: Vec<(u32, f64, ResidualSet)>,
}

fn image_entries(
    features: &ImageFeatures,
    codebook: &Codebook,
    config: &IndexConfig,
) -> Result<ImageEntries> {
    if features.dim != codebook.dim() {
        return Err(Error::Dimension {
            expected: codebook.dim(),
            found: features.dim,
        });
    }
    let regions = select_regions(features, &config.strategy)?;
    let assignments = codebook.assign(features)?;
    let mut entries = Vec::new();
    if let Some(rmode) = config.mode.regional() {
        let rep = aggregate_regional_assigned(features, &assignments, &regions, codebook, rmode, &config.params)?;
        let scale = if config.normalize { rep.gamma_r } else { 1.0 };
        entries.push((0, scale, rep.residuals));
    } else {
        let mode = config.mode.plain().unwrap();
        for (r, region) in regions.boxes.iter().enumerate() {
            let members = assign_to_region(features, region);
            let partition = WordPartition::from_assignments(&assignments, members);
            let rep = aggregate_descriptors(&features.descriptors, &partition, codebook, mode, &config.params)?;
            entries.push((r as u32, rep.gamma, rep.residuals));
        }
    }
    Ok(ImageEntries {
        id: features.image_id.clone(),
        regions: regions.len() as u32,
        entries,
    })
}

impl RetrievalIndex {
    fn assemble(codebook: &Codebook, config: &IndexConfig, per_image: Vec<ImageEntries>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for img in &per_image {
            if !seen.insert(img.id.as_str()) {
                return Err(Error::Validation(format!("duplicate image id `{}`", img.id)));
            }
        }
        let binary = config.mode.is_binary();
        let mut postings: Vec<Postings> = (0..codebook.num_words())
            .map(|_| Postings {
                entries: Vec::new(),
                payload: if binary {
                    ResidualData::Binary(Vec::new())
                } else {
                    ResidualData::Dense(Vec::new())
                },
            })
            .collect();
        let mut images = Vec::with_capacity(per_image.len());
        let mut entries = Vec::new();
        for (img_idx, img) in per_image.into_iter().enumerate() {
            images.push(IndexImage {
                id: img.id,
                regions: img.regions,
            });
            for (region, scale, residuals) in img.entries {
                let entry_id = entries.len() as u32;
                entries.push(IndexEntry {
                    image: img_idx as u32,
                    region,
                    scale,
                });
                for (i, &word) in residuals.words.iter().enumerate() {
                    let p = &mut postings[word as usize];
                    p.entries.push(entry_id);
                    match &mut p.payload {
                        ResidualData::Dense(d) => d.extend_from_slice(residuals.dense(i)),
                        ResidualData::Binary(b) => b.extend_from_slice(residuals.bits(i)),
                    }
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            dim: codebook.dim(),
            num_words: codebook.num_words(),
            codebook_hash: codebook.content_hash(),
            provenance: String::new(),
            images,
            entries,
            postings,
        })
    }

    /// Index in-memory images (ids must be unique).
    pub fn from_features(images: &[ImageFeatures], codebook: &Codebook, config: &IndexConfig) -> Result<Self> {
        config.params.validate()?;
        let per_image = images
            .par_iter()
            .map(|f| image_entries(f, codebook, config))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(codebook, config, per_image)
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    /// Bytes held by postings (ids plus payloads).
    pub fn postings_bytes(&self) -> usize {
        self.postings
            .iter()
            .map(|p| {
                4 * p.entries.len()
                    + match &p.payload {
                        ResidualData::Dense(d) => 4 * d.len(),
                        ResidualData::Binary(b) => 8 * b.len(),
                    }
            })
            .sum()
    }

    pub fn check_codebook(&self, codebook: &Codebook) -> Result<()> {
        if codebook.content_hash() != self.codebook_hash {
            return Err(Error::Config("codebook does not match the one used to build the index".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(DTRI_MAGIC);
        b.extend_from_slice(&DTRI_VERSION.to_le_bytes());
        b.push(self.config.mode.code());
        b.push(if self.config.normalize { FLAG_NORMALIZE } else { 0 });
        b.extend_from_slice(&self.codebook_hash);
        for s in [&self.provenance, &self.config.strategy.to_string()] {
            b.extend_from_slice(&(s.len() as u32).to_le_bytes());
            b.extend_from_slice(s.as_bytes());
        }
        b.extend_from_slice(&self.config.params.alpha.to_le_bytes());
        b.extend_from_slice(&self.config.params.tau.to_le_bytes());
        b.extend_from_slice(&(self.dim as u16).to_le_bytes());
        b.extend_from_slice(&(self.num_words as u32).to_le_bytes());
        b.extend_from_slice(&(self.images.len() as u32).to_le_bytes());
        for img in &self.images {
            b.extend_from_slice(&(img.id.len() as u16).to_le_bytes());
            b.extend_from_slice(img.id.as_bytes());
            b.extend_from_slice(&img.regions.to_le_bytes());
        }
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            b.extend_from_slice(&e.image.to_le_bytes());
            b.extend_from_slice(&e.region.to_le_bytes());
            b.extend_from_slice(&e.scale.to_le_bytes());
        }
        for p in &self.postings {
            b.extend_from_slice(&(p.entries.len() as u32).to_le_bytes());
            for e in &p.entries {
                b.extend_from_slice(&e.to_le_bytes());
            }
            match &p.payload {
                ResidualData::Dense(d) => d.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                ResidualData::Binary(d) => d.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != DTRI_MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u16()?;
        if version != DTRI_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                expected: DTRI_VERSION,
                found: version,
            });
        }
        let mode = IndexMode::from_code(r.u8()?).ok_or_else(|| r.corrupt("unknown mode"))?;
        let flags = r.u8()?;
        let mut codebook_hash = [0u8; 32];
        codebook_hash.copy_from_slice(r.take(32)?);
        let provenance = r.string32()?;
        let strategy: RegionStrategy = r
            .string32()?
            .parse()
            .map_err(|_| r.corrupt("bad region strategy"))?;
        let alpha = r.f64()?;
        let tau = r.f64()?;
        let params = SelectivityParams::new(alpha, tau).map_err(|_| r.corrupt("bad selectivity"))?;
        let dim = r.u16()? as usize;
        let num_words = r.u32()? as usize;
        if dim == 0 {
            return Err(r.corrupt("zero dimension"));
        }
        let n_images = r.u32()? as usize;
        let mut images = Vec::with_capacity(n_images.min(bytes.len()));
        for _ in 0..n_images {
            let len = r.u16()? as usize;
            let id = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.corrupt("bad image id"))?;
            images.push(IndexImage { id, regions: r.u32()? });
        }
        let n_entries = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_entries.min(bytes.len()));
        for _ in 0..n_entries {
            let e = IndexEntry {
                image: r.u32()?,
                region: r.u32()?,
                scale: r.f64()?,
            };
            if e.image as usize >= images.len() {
                return Err(r.corrupt("entry refers to unknown image"));
            }
            entries.push(e);
        }
        let binary = mode.is_binary();
        let width = if binary { binary_blocks(dim) } else { dim };
        let mut postings = Vec::with_capacity(num_words.min(bytes.len()));
        for _ in 0..num_words {
            let n = r.u32()? as usize;
            let mut ids = Vec::with_capacity(n.min(bytes.len()));
            for _ in 0..n {
                let id = r.u32()?;
                if id as usize >= entries.len() || ids.last().is_some_and(|&l| l >= id) {
                    return Err(r.corrupt("postings not sorted or out of range"));
                }
                ids.push(id);
            }
            let payload = if binary {
                let raw = r.take(8 * n * width)?;
                ResidualData::Binary(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
            } else {
                let raw = r.take(4 * n * width)?;
                ResidualData::Dense(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            };
            postings.push(Postings { entries: ids, payload });
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        Ok(Self {
            config: IndexConfig {
                mode,
                strategy,
                params,
                normalize: flags & FLAG_NORMALIZE != 0,
            },
            dim,
            num_words,
            codebook_hash,
            provenance,
            images,
            entries,
            postings,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: &str) -> Error {
        Error::CorruptIndex {
            path: PathBuf::from(self.path),
            detail: format!("{detail} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.corrupt("invalid UTF-8"))
    }
}

/// Build from a manifest; entries follow manifest order, then region order.
pub fn build_index(manifest: &DatasetManifest, codebook: &Codebook, config: &IndexConfig) -> Result<RetrievalIndex> {
    if manifest.dim != codebook.dim() {
        return Err(Error::Dimension {
            expected: codebook.dim(),
            found: manifest.dim,
        });
    }
    config.params.validate()?;
    let per_image = manifest
        .images
        .par_iter()
        .map(|entry| {
            let f = manifest.load_entry(entry, None)?;
            image_entries(&f, codebook, config)
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::assemble(codebook, config, per_image)
}

/// Query-side representation: residuals and the scale applied to every score.
struct QueryRep {
    residuals: ResidualSet,
    scale: f64,
}

/// An index paired with the codebook it was built from.
pub struct Searcher<'a> {
    index: &'a RetrievalIndex,
    codebook: &'a Codebook,
}

impl<'a> Searcher<'a> {
    pub fn new(index: &'a RetrievalIndex, codebook: &'a Codebook) -> Result<Self> {
        index.check_codebook(codebook)?;
        Ok(Self { index, codebook })
    }

    fn query_rep(&self, features: &ImageFeatures) -> Result<QueryRep> {
        let cfg = &self.index.config;
        if let Some(rmode) = cfg.mode.regional() {
            let rep = regional_query(features, self.codebook, rmode, &cfg.params)?;
            Ok(QueryRep {
                scale: if cfg.normalize { rep.gamma_r } else { 1.0 },
                residuals: rep.residuals,
            })
        } else {
            let mode = cfg.mode.plain().unwrap();
            let part = self.codebook.partition(features)?;
            let rep = aggregate(features, &part, self.codebook, mode, &cfg.params)?;
            Ok(QueryRep {
                scale: rep.gamma,
                residuals: rep.residuals,
            })
        }
    }

    /// Kernel score of the query against every entry.
    pub fn entry_scores(&self, features: &ImageFeatures) -> Result<Vec<f64>> {
        let q = self.query_rep(features)?;
        let idx = self.index;
        let sel = idx.config.mode.selectivity(&idx.config.params);
        let mut acc = vec![0f64; idx.entries.len()];
        let dim = idx.dim;
        for (i, &word) in q.residuals.words.iter().enumerate() {
            let p = &idx.postings[word as usize];
            match &p.payload {
                ResidualData::Dense(d) => {
                    let qv = q.residuals.dense(i);
                    for (k, &e) in p.entries.iter().enumerate() {
                        acc[e as usize] += sel.apply(dot(qv, &d[k * dim..(k + 1) * dim]));
                    }
                }
                ResidualData::Binary(d) => {
                    let qb = q.residuals.bits(i);
                    let n = binary_blocks(dim);
                    for (k, &e) in p.entries.iter().enumerate() {
                        acc[e as usize] += sel.apply(binary_similarity(qb, &d[k * n..(k + 1) * n], dim));
                    }
                }
            }
        }
        Ok(idx
            .entries
            .iter()
            .zip(acc)
            .map(|(e, a)| (q.scale * e.scale) * a)
            .collect())
    }

    /// Pool entry scores per image and return the `top_n` best images.
    pub fn query(&self, features: &ImageFeatures, pooling: Pooling, top_n: usize) -> Result<RankedResult> {
        let mut result = RankedResult {
            query_id: features.image_id.clone(),
            ..Default::default()
        };
        if features.descriptors.is_empty() {
            let msg = format!("query `{}` has no descriptors", features.image_id);
            log::warn!("{msg}");
            result.warnings.push(msg);
            return Ok(result);
        }
        let scores = self.entry_scores(features)?;
        let idx = self.index;
        let mut pooled: Vec<Option<f64>> = vec![None; idx.images.len()];
        let mut sums = vec![0f64; idx.images.len()];
        for (e, &s) in idx.entries.iter().zip(&scores) {
            let i = e.image as usize;
            sums[i] += s;
            pooled[i] = Some(pooled[i].map_or(s, |m: f64| m.max(s)));
        }
        let mut ranked: Vec<(usize, f32)> = (0..idx.images.len())
            .map(|i| {
                let s = match pooling {
                    Pooling::Max => pooled[i].unwrap_or(0.0),
                    Pooling::Avg => {
                        if idx.config.mode.regional().is_some() {
                            sums[i]
                        } else {
                            sums[i] / idx.images[i].regions.max(1) as f64
                        }
                    }
                };
                (i, s as f32)
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| idx.images[a.0].id.cmp(&idx.images[b.0].id))
        });
        ranked.truncate(top_n);
        result.items = ranked
            .into_iter()
            .map(|(i, score)| RankedItem {
                image_id: idx.images[i].id.clone(),
                score,
                inliers: None,
            })
            .collect();
        Ok(result)
    }
}

/// One-shot query; see [`Searcher::query`].
pub fn query(
    index: &RetrievalIndex,
    codebook: &Codebook,
    features: &ImageFeatures,
    pooling: Pooling,
    top_n: usize,
) -> Result<RankedResult> {
    Searcher::new(index, codebook)?.query(features, pooling, top_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, RegionBox};
    use crate::rng::DetRng;

    fn random_image(rng: &mut DetRng, id: &str, n: usize, dim: usize) -> ImageFeatures {
        let mut f = ImageFeatures::new(id, 100, 100, dim);
        for _ in 0..n {
            f.descriptors.push(Descriptor {
                vector: (0..dim).map(|_| rng.normal() as f32).collect(),
                x: rng.uniform_range(0.0, 99.0) as f32,
                y: rng.uniform_range(0.0, 99.0) as f32,
                scale: 1.0,
                attention: 1.0,
            });
        }
        f.boxes = vec![
            RegionBox::new(0., 0., 50., 50., 0.9),
            RegionBox::new(30., 30., 90., 80., 0.4),
        ];
        f
    }

    fn codebook(rng: &mut DetRng, c: usize, dim: usize) -> Codebook {
        Codebook::from_centroids((0..c * dim).map(|_| rng.normal() as f32).collect(), dim).unwrap()
    }

    #[test]
    fn pooling_over_entries() {
        let mut rng = DetRng::new(7);
        let cb = codebook(&mut rng, 8, 4);
        let imgs: Vec<_> = (0..3).map(|i| random_image(&mut rng, &format!("i{i}"), 25, 4)).collect();
        let cfg = IndexConfig::new(IndexMode::Vlad, RegionStrategy::DetectorThreshold(0.3));
        let index = RetrievalIndex::from_features(&imgs, &cb, &cfg).unwrap();
        let s = Searcher::new(&index, &cb).unwrap();
        let q = random_image(&mut rng, "q", 25, 4);
        let scores = s.entry_scores(&q).unwrap();
        let max = s.query(&q, Pooling::Max, 10).unwrap();
        let avg = s.query(&q, Pooling::Avg, 10).unwrap();
        for img in 0..3 {
            let mine: Vec<f64> = index
                .entries
                .iter()
                .zip(&scores)
                .filter(|(e, _)| e.image == img)
                .map(|(_, &s)| s)
                .collect();
            assert_eq!(mine.len(), 3);
            let id = format!("i{img}");
            let find = |r: &RankedResult| r.items.iter().find(|i| i.image_id == id).unwrap().score;
            assert_eq!(find(&max), mine.iter().cloned().fold(f64::MIN, f64::max) as f32);
            assert_eq!(find(&avg), (mine.iter().sum::<f64>() / 3.0) as f32);
        }
    }

    #[test]
    fn entry_counts_per_mode() {
        let mut rng = DetRng::new(1);
        let cb = codebook(&mut rng, 8, 4);
        let imgs: Vec<_> = (0..5).map(|i| random_image(&mut rng, &format!("i{i}"), 20, 4)).collect();
        let strategy = RegionStrategy::DetectorThreshold(0.3);
        let regional = RetrievalIndex::from_features(&imgs, &cb, &IndexConfig::new(IndexMode::AsmkBinary, strategy)).unwrap();
        assert_eq!(regional.num_entries(), 15);
        let agg = RetrievalIndex::from_features(&imgs, &cb, &IndexConfig::new(IndexMode::RAsmkBinary, strategy)).unwrap();
        assert_eq!(agg.num_entries(), 5);
        let whole = RetrievalIndex::from_features(&imgs, &cb, &IndexConfig::new(IndexMode::Asmk, RegionStrategy::WholeImageOnly)).unwrap();
        assert_eq!(whole.num_entries(), 5);
        for p in &regional.postings {
            assert!(p.entries.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn self_query_scores_one() {
        let mut rng = DetRng::new(2);
        let cb = codebook(&mut rng, 16, 4);
        let imgs: Vec<_> = (0..6).map(|i| random_image(&mut rng, &format!("i{i}"), 30, 4)).collect();
        let index = RetrievalIndex::from_features(&imgs, &cb, &IndexConfig::new(IndexMode::Asmk, RegionStrategy::WholeImageOnly)).unwrap();
        let r = query(&index, &cb, &imgs[3], Pooling::Max, 10).unwrap();
        assert_eq!(r.items[0].image_id, "i3");
        assert!((r.items[0].score - 1.0).abs() < 1e-6);
        assert_eq!(r.items.len(), 6);
        assert!(r.items.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn empty_query_and_empty_index() {
        let mut rng = DetRng::new(3);
        let cb = codebook(&mut rng, 4, 4);
        let empty = RetrievalIndex::from_features(&[], &cb, &IndexConfig::new(IndexMode::RAsmk, RegionStrategy::WholeImageOnly)).unwrap();
        let bytes = empty.to_bytes();
        let back = RetrievalIndex::from_bytes(&bytes, Path::new("e")).unwrap();
        assert_eq!(back, empty);
        let q = random_image(&mut rng, "q", 5, 4);
        assert!(query(&back, &cb, &q, Pooling::Max, 10).unwrap().items.is_empty());
        let blank = ImageFeatures::new("b", 10, 10, 4);
        let r = query(&back, &cb, &blank, Pooling::Max, 10).unwrap();
        assert!(r.items.is_empty() && r.warnings.len() == 1);
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let mut rng = DetRng::new(4);
        let cb = codebook(&mut rng, 8, 70);
        let imgs: Vec<_> = (0..4).map(|i| random_image(&mut rng, &format!("i{i}"), 15, 70)).collect();
        for mode in IndexMode::ALL {
            let mut index = RetrievalIndex::from_features(&imgs, &cb, &IndexConfig::new(mode, RegionStrategy::DetectorThreshold(0.3))).unwrap();
            index.provenance = "seed:1".into();
            let bytes = index.to_bytes();
            let back = RetrievalIndex::from_bytes(&bytes, Path::new("x")).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            let a = query(&index, &cb, &imgs[0], Pooling::Avg, 10).unwrap();
            let b = query(&back, &cb, &imgs[0], Pooling::Avg, 10).unwrap();
            assert_eq!(a, b);
            for cut in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
                assert!(matches!(
                    RetrievalIndex::from_bytes(&bytes[..cut], Path::new("x")),
                    Err(Error::CorruptIndex { .. })
                ));
            }
            let mut v = bytes.clone();
            v[4] = 9;
            assert!(matches!(RetrievalIndex::from_bytes(&v, Path::new("x")), Err(Error::Version { .. })));
        }
    }

    #[test]
    fn codebook_hash_checked() {
        let mut rng = DetRng::new(5);
        let cb = codebook(&mut rng, 8, 4);
        let other = codebook(&mut rng, 8, 4);
        let imgs = vec![random_image(&mut rng, "a", 10, 4)];
        let index = RetrievalIndex::from_features(&imgs, &cb, &IndexConfig::new(IndexMode::Vlad, RegionStrategy::WholeImageOnly)).unwrap();
        assert!(matches!(Searcher::new(&index, &other), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut rng = DetRng::new(6);
        let cb = codebook(&mut rng, 8, 4);
        let a = random_image(&mut rng, "a", 10, 4);
        let cfg = IndexConfig::new(IndexMode::Vlad, RegionStrategy::WholeImageOnly);
        assert!(RetrievalIndex::from_features(&[a.clone(), a], &cb, &cfg).is_err());
    }

    #[test]
    fn result_line_round_trip() {
        let r = RankedResult {
            query_id: "q".into(),
            items: vec![
                RankedItem { image_id: "a".into(), score: 0.1 + 0.2, inliers: Some(4) },
                RankedItem { image_id: "b".into(), score: -1e-9, inliers: None },
            ],
            warnings: vec![],
        };
        let back = RankedResult::parse_line(&r.to_line(), Path::new("r")).unwrap();
        assert_eq!(back, r);
        let empty = RankedResult { query_id: "e".into(), ..Default::default() };
        assert_eq!(RankedResult::parse_line(&empty.to_line(), Path::new("r")).unwrap(), empty);
    }
}
