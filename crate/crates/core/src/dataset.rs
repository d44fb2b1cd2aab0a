//! Line-oriented text formats: dataset manifests and ground truth.
//!
//! Each non-comment line is one record made of tab-separated `key:value`
//! pairs; the first pair names the record kind. Lines starting with `#` are
//! comments (provenance headers) and are preserved in order.
//!
//! Manifest:
//!
//! ```text
//! dataset:<name>\tdim:<D>
//! ground_truth:<path>
//! image:<id>\tpath:<path>[\twidth:<W>\theight:<H>]
//! query:<id>\tpath:<path>[\twidth:<W>\theight:<H>]
//! ```
//!
//! Ground truth (one line per query, lists comma-separated, possibly empty):
//!
//! ```text
//! query:<id>\teasy:<ids>\thard:<ids>\tjunk:<ids>
//! ```
//!
//! Relative paths resolve against the manifest's directory. Identifiers are
//! restricted to `[A-Za-z0-9._-]`.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{GroundTruth, QueryTruth};
use crate::features::{load_image_features, ImageFeatures, LoadOptions, DTRF_MAGIC};

pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub width: Option<u32>,
    pub height: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub dim: usize,
    pub images: Vec<ManifestEntry>,
    pub queries: Vec<ManifestEntry>,
    pub ground_truth: Option<PathBuf>,
    /// Comment lines (without the leading `# `), written before the records.
    pub comments: Vec<String>,
    /// Directory that relative paths resolve against; not serialized.
    pub base_dir: PathBuf,
}

fn split_record(line: &str) -> Vec<(&str, &str)> {
    line.split('\t')
        .map(|field| field.split_once(':').unwrap_or((field, "")))
        .collect()
}

fn parse_u32(path: &Path, field: &str, v: &str) -> Result<u32> {
    v.parse::<u32>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::format(path, field, format!("expected positive integer, got `{v}`")))
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            images: Vec::new(),
            queries: Vec::new(),
            ground_truth: None,
            comments: Vec::new(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn ground_truth_path(&self) -> Option<PathBuf> {
        self.ground_truth.as_deref().map(|p| self.resolve(p))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut name = None;
        let mut dim = None;
        let mut m = DatasetManifest::new("", 0);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                m.comments.push(c.strip_prefix(' ').unwrap_or(c).to_string());
                continue;
            }
            let rec = split_record(line);
            let (kind, value) = rec[0];
            let field = |k: &str| rec.iter().find(|(key, _)| *key == k).map(|(_, v)| *v);
            match kind {
                "dataset" => {
                    name = Some(value.to_string());
                    let d = field("dim").ok_or_else(|| Error::format(path, "dim", "missing"))?;
                    dim = Some(parse_u32(path, "dim", d)? as usize);
                }
                "ground_truth" => m.ground_truth = Some(PathBuf::from(value)),
                "image" | "query" => {
                    if !is_valid_id(value) {
                        return Err(Error::format(
                            path,
                            kind,
                            format!("line {}: invalid id `{value}`", lineno + 1),
                        ));
                    }
                    let p = field("path").ok_or_else(|| {
                        Error::format(path, "path", format!("line {}: missing", lineno + 1))
                    })?;
                    let width = field("width").map(|v| parse_u32(path, "width", v)).transpose()?;
                    let height = field("height").map(|v| parse_u32(path, "height", v)).transpose()?;
                    let entry = ManifestEntry {
                        id: value.to_string(),
                        path: PathBuf::from(p),
                        width,
                        height,
                    };
                    if kind == "image" {
                        m.images.push(entry);
                    } else {
                        m.queries.push(entry);
                    }
                }
                other => {
                    return Err(Error::format(
                        path,
                        other,
                        format!("line {}: unknown record kind", lineno + 1),
                    ))
                }
            }
        }
        m.name = name.ok_or_else(|| Error::format(path, "dataset", "missing dataset record"))?;
        m.dim = dim.unwrap_or(0);
        m.validate(path)?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        if self.dim == 0 || self.dim > u16::MAX as usize {
            return Err(Error::format(path, "dim", "must be in 1..=65535"));
        }
        for (kind, list) in [("image", &self.images), ("query", &self.queries)] {
            let mut seen = HashSet::new();
            for e in list {
                if !seen.insert(e.id.as_str()) {
                    return Err(Error::format(path, kind, format!("duplicate id `{}`", e.id)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text, path)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.comments {
            let _ = writeln!(s, "# {c}");
        }
        let _ = writeln!(s, "dataset:{}\tdim:{}", self.name, self.dim);
        if let Some(gt) = &self.ground_truth {
            let _ = writeln!(s, "ground_truth:{}", gt.display());
        }
        for (kind, list) in [("image", &self.images), ("query", &self.queries)] {
            for e in list {
                let _ = write!(s, "{kind}:{}\tpath:{}", e.id, e.path.display());
                if let Some(w) = e.width {
                    let _ = write!(s, "\twidth:{w}");
                }
                if let Some(h) = e.height {
                    let _ = write!(s, "\theight:{h}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_options(&self, entry: &ManifestEntry) -> LoadOptions {
        LoadOptions {
            image_id: Some(entry.id.clone()),
            width: entry.width,
            height: entry.height,
            expected_dim: Some(self.dim),
            min_attention: None,
        }
    }

    pub fn load_entry(&self, entry: &ManifestEntry, min_attention: Option<f32>) -> Result<ImageFeatures> {
        let mut opts = self.load_options(entry);
        opts.min_attention = min_attention;
        load_image_features(self.resolve(&entry.path), &opts)
    }

    /// Check that every referenced feature file exists and declares `dim`.
    pub fn check_files(&self) -> Result<()> {
        for e in self.images.iter().chain(&self.queries) {
            let p = self.resolve(&e.path);
            let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
            if bytes.len() < 8 || bytes[0..4] != DTRF_MAGIC {
                return Err(Error::format(&p, "magic", "expected \"DTRF\""));
            }
            let d = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
            if d != self.dim {
                return Err(Error::Dimension {
                    expected: self.dim,
                    found: d,
                });
            }
        }
        Ok(())
    }
}

fn join_ids(ids: &BTreeSet<String>) -> String {
    ids.iter().map(String::as_str).collect::<Vec<_>>().join(",")
}

fn parse_ids(path: &Path, field: &str, v: &str) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for id in v.split(',').filter(|s| !s.is_empty()) {
        if !is_valid_id(id) {
            return Err(Error::format(path, field, format!("invalid id `{id}`")));
        }
        out.insert(id.to_string());
    }
    Ok(out)
}

pub fn ground_truth_to_text(gt: &GroundTruth, comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        let _ = writeln!(s, "# {c}");
    }
    for (q, t) in gt.iter() {
        let _ = writeln!(
            s,
            "query:{q}\teasy:{}\thard:{}\tjunk:{}",
            join_ids(&t.easy),
            join_ids(&t.hard),
            join_ids(&t.junk)
        );
    }
    s
}

pub fn parse_ground_truth(text: &str, path: &Path) -> Result<GroundTruth> {
    let mut gt = GroundTruth::default();
    for raw in text.lines() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let rec = split_record(line);
        let (kind, qid) = rec[0];
        if kind != "query" || !is_valid_id(qid) {
            return Err(Error::format(path, "query", format!("bad record `{line}`")));
        }
        let get = |k: &str| -> Result<BTreeSet<String>> {
            match rec.iter().find(|(key, _)| *key == k) {
                Some((_, v)) => parse_ids(path, k, v),
                None => Ok(BTreeSet::new()),
            }
        };
        let truth = QueryTruth {
            easy: get("easy")?,
            hard: get("hard")?,
            junk: get("junk")?,
        };
        gt.insert(qid, truth)
            .map_err(|e| Error::format(path, "query", e.to_string()))?;
    }
    Ok(gt)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ground_truth(&text, path)
}

pub fn save_ground_truth(gt: &GroundTruth, comments: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ground_truth_to_text(gt, comments)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = "# tool:test\n\
dataset:demo\tdim:16\n\
ground_truth:gt.txt\n\
image:a\tpath:images/a.dtrf\twidth:640\theight:480\n\
image:b\tpath:images/b.dtrf\n\
query:a\tpath:queries/a.dtrf\twidth:640\theight:480\n";

    #[test]
    fn manifest_text_round_trip() {
        let m = DatasetManifest::parse(MANIFEST, Path::new("m.txt")).unwrap();
        assert_eq!(m.dim, 16);
        assert_eq!(m.images.len(), 2);
        assert_eq!(m.images[1].width, None);
        assert_eq!(m.queries[0].id, "a");
        assert_eq!(m.to_text(), MANIFEST);
    }

    #[test]
    fn duplicate_image_ids_rejected() {
        let text = "dataset:d\tdim:4\nimage:a\tpath:x\nimage:a\tpath:y\n";
        assert!(DatasetManifest::parse(text, Path::new("m")).is_err());
    }

    #[test]
    fn missing_dim_is_format_error() {
        let err = DatasetManifest::parse("dataset:d\n", Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "dim"));
    }

    #[test]
    fn ground_truth_round_trip() {
        let text = "query:q1\teasy:a,b\thard:\tjunk:q1\nquery:q2\teasy:\thard:c\tjunk:\n";
        let gt = parse_ground_truth(text, Path::new("gt")).unwrap();
        assert_eq!(gt.get("q1").unwrap().easy.len(), 2);
        assert_eq!(ground_truth_to_text(&gt, &[]), text);
    }

    #[test]
    fn overlapping_sets_rejected() {
        let text = "query:q\teasy:a\thard:a\tjunk:\n";
        assert!(parse_ground_truth(text, Path::new("gt")).is_err());
    }
}
