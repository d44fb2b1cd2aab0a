//! Retrieval metrics with junk handling, and the attention/box relevance
//! analysis over verified feature matches.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::index::RankedResult;
use crate::rerank::{correspondence_points, match_features, ransac_with_rng, RansacParams, RerankParams};
use crate::rng::DetRng;

/// Relevant (easy/hard) and ignored (junk) images for one query.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryTruth {
    pub easy: BTreeSet<String>,
    pub hard: BTreeSet<String>,
    pub junk: BTreeSet<String>,
}

impl QueryTruth {
    fn validate(&self) -> Result<()> {
        let overlap = self
            .easy
            .intersection(&self.hard)
            .chain(self.easy.intersection(&self.junk))
            .chain(self.hard.intersection(&self.junk))
            .next();
        match overlap {
            Some(id) => Err(Error::Validation(format!("`{id}` appears in more than one set"))),
            None => Ok(()),
        }
    }

    /// (positives, junk) under `protocol`.
    pub fn split(&self, protocol: Protocol) -> (BTreeSet<&str>, BTreeSet<&str>) {
        fn s(set: &BTreeSet<String>) -> BTreeSet<&str> {
            set.iter().map(String::as_str).collect()
        }
        match protocol {
            Protocol::Medium => (&s(&self.easy) | &s(&self.hard), s(&self.junk)),
            Protocol::Hard => (s(&self.hard), &s(&self.junk) | &s(&self.easy)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    queries: BTreeMap<String, QueryTruth>,
}

impl GroundTruth {
    /// Add a query record; fails on duplicate ids or overlapping sets.
    pub fn insert(&mut self, query: &str, truth: QueryTruth) -> Result<()> {
        truth.validate()?;
        if self.queries.contains_key(query) {
            return Err(Error::Validation(format!("duplicate query `{query}`")));
        }
        self.queries.insert(query.to_string(), truth);
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&QueryTruth> {
        self.queries.get(query)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &QueryTruth)> {
        self.queries.iter()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    Medium,
    Hard,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Medium => "medium",
            Protocol::Hard => "hard",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "medium" => Ok(Protocol::Medium),
            "hard" => Ok(Protocol::Hard),
            _ => Err(Error::Config(format!("unknown protocol `{s}`"))),
        }
    }
}

/// Mean of precision at the rank of each positive after junk removal;
/// positives missing from `ranked` contribute 0. `None` without positives.
pub fn average_precision<S: AsRef<str>>(ranked: &[S], positives: &BTreeSet<&str>, junk: &BTreeSet<&str>) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let mut rank = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for id in ranked.iter().map(AsRef::as_ref) {
        if junk.contains(id) {
            continue;
        }
        rank += 1;
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / rank as f64;
        }
    }
    Some(sum / positives.len() as f64)
}

/// Positives among the first `k` non-junk results, divided by `k`.
pub fn precision_at<S: AsRef<str>>(ranked: &[S], positives: &BTreeSet<&str>, junk: &BTreeSet<&str>, k: usize) -> f64 {
    let hits = ranked
        .iter()
        .map(AsRef::as_ref)
        .filter(|id| !junk.contains(id))
        .take(k)
        .filter(|id| positives.contains(id))
        .count();
    hits as f64 / k as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub query: String,
    pub ap: f64,
    pub p10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub protocol: Protocol,
    pub map: f64,
    pub mp10: f64,
    /// Sorted by query id.
    pub per_query: Vec<QueryMetrics>,
    /// Queries without positives under this protocol.
    pub excluded: Vec<String>,
    /// Queries whose ranking is shorter than the corpus.
    pub truncated: Vec<String>,
}

impl Metrics {
    /// `key:value` lines prefixed with the protocol name.
    pub fn to_key_values(&self) -> String {
        let p = self.protocol;
        let mut s = String::new();
        let _ = writeln!(s, "{p}.mAP:{}", self.map);
        let _ = writeln!(s, "{p}.mP@10:{}", self.mp10);
        let _ = writeln!(s, "{p}.queries:{}", self.per_query.len());
        let _ = writeln!(s, "{p}.excluded:{}", self.excluded.join(","));
        for q in &self.per_query {
            let _ = writeln!(s, "{p}.ap.{}:{}", q.query, q.ap);
        }
        s
    }

    /// Human-readable block.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[{}]", self.protocol);
        let _ = writeln!(s, "  mAP    {:.2}", 100.0 * self.map);
        let _ = writeln!(s, "  mP@10  {:.2}", 100.0 * self.mp10);
        let _ = writeln!(s, "  queries evaluated {}, excluded {}", self.per_query.len(), self.excluded.len());
        for q in &self.excluded {
            let _ = writeln!(s, "  excluded (no positives): {q}");
        }
        if !self.truncated.is_empty() {
            let _ = writeln!(s, "  rankings shorter than the corpus: {}", self.truncated.len());
        }
        s
    }
}

/// mAP and mP@10 over `results`. Every result must have a ground-truth
/// record. `corpus_size`, when known, flags rankings that are cut short.
pub fn evaluate(results: &[RankedResult], gt: &GroundTruth, protocol: Protocol, corpus_size: Option<usize>) -> Result<Metrics> {
    let mut seen = HashSet::new();
    for r in results {
        if gt.get(&r.query_id).is_none() {
            return Err(Error::UnknownQuery(r.query_id.clone()));
        }
        if !seen.insert(r.query_id.as_str()) {
            return Err(Error::Validation(format!("query `{}` listed twice", r.query_id)));
        }
    }
    let mut sorted: Vec<&RankedResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let mut per_query = Vec::new();
    let mut excluded = Vec::new();
    let mut truncated = Vec::new();
    for r in sorted {
        let (pos, junk) = gt.get(&r.query_id).unwrap().split(protocol);
        let ids = r.ids();
        if corpus_size.is_some_and(|n| ids.len() < n) {
            truncated.push(r.query_id.clone());
        }
        match average_precision(&ids, &pos, &junk) {
            Some(ap) => per_query.push(QueryMetrics {
                query: r.query_id.clone(),
                ap,
                p10: precision_at(&ids, &pos, &junk, 10),
            }),
            None => excluded.push(r.query_id.clone()),
        }
    }
    if !truncated.is_empty() {
        log::warn!(
            "{} of {} rankings are shorter than the corpus; missing positives count as misses",
            truncated.len(),
            results.len()
        );
    }
    let n = per_query.len().max(1) as f64;
    Ok(Metrics {
        protocol,
        map: per_query.iter().map(|q| q.ap).sum::<f64>() / n,
        mp10: per_query.iter().map(|q| q.p10).sum::<f64>() / n,
        per_query,
        excluded,
        truncated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceParams {
    pub matching: RerankParams,
    /// Query-side boxes below this score are ignored.
    pub box_threshold: f32,
}

impl Default for RelevanceParams {
    fn default() -> Self {
        Self {
            matching: RerankParams::default(),
            box_threshold: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RelevanceRow {
    pub bin_low: f32,
    pub bin_high: f32,
    pub inside_relevant: u64,
    pub inside_total: u64,
    pub outside_relevant: u64,
    pub outside_total: u64,
}

fn ratio_of(a: u64, b: u64) -> f64 {
    if b == 0 {
        f64::NAN
    } else {
        a as f64 / b as f64
    }
}

impl RelevanceRow {
    pub fn inside_prob(&self) -> f64 {
        ratio_of(self.inside_relevant, self.inside_total)
    }

    pub fn outside_prob(&self) -> f64 {
        ratio_of(self.outside_relevant, self.outside_total)
    }

    /// Inside over outside relevance; infinite when nothing outside is
    /// relevant but something inside is, NaN when undefined.
    pub fn ratio(&self) -> f64 {
        let (i, o) = (self.inside_prob(), self.outside_prob());
        if o == 0.0 && i > 0.0 {
            f64::INFINITY
        } else {
            i / o
        }
    }

    /// Both sides hold at least one feature.
    pub fn is_populated(&self) -> bool {
        self.inside_total > 0 && self.outside_total > 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelevanceTable {
    pub rows: Vec<RelevanceRow>,
    /// Pairs for which no geometric model was found.
    pub unverified_pairs: usize,
}

impl RelevanceTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "bin_low,bin_high,inside_prob,outside_prob,ratio,inside_relevant,inside_total,outside_relevant,outside_total\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.bin_low,
                r.bin_high,
                r.inside_prob(),
                r.outside_prob(),
                r.ratio(),
                r.inside_relevant,
                r.inside_total,
                r.outside_relevant,
                r.outside_total
            );
        }
        s
    }
}

/// Bin index of `a` for strictly increasing `edges`; bins are `[low, high)`
/// except the last, which includes its upper edge.
fn bin_of(edges: &[f32], a: f32) -> Option<usize> {
    let last = edges.len() - 1;
    if a < edges[0] || a > edges[last] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= a).saturating_sub(1).min(last - 1))
}

/// Match and verify each (query, database) pair; a query-side feature is
/// relevant iff it is a RANSAC inlier. Features are bucketed by attention
/// bin and by whether they fall in any query-side box. Pairs without a
/// model count all their features as non-relevant.
pub fn analyze_relevance(pairs: &[(ImageFeatures, ImageFeatures)], bins: &[f32], params: &RelevanceParams) -> Result<RelevanceTable> {
    if bins.len() < 2 || bins.windows(2).any(|w| w[0] >= w[1]) || bins.iter().any(|b| !b.is_finite()) {
        return Err(Error::Config("bin edges must be at least two strictly increasing values".into()));
    }
    let per_pair: Vec<(Vec<RelevanceRow>, bool)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (q, db))| {
            let m = &params.matching;
            let matches = match_features(q, db, m.max_distance)?;
            let (src, dst) = correspondence_points(q, db, &matches);
            let mut rp = RansacParams::for_images(q.width, q.height, db.width, db.height);
            rp.iterations = m.iterations;
            if let Some(t) = m.inlier_tol {
                rp.inlier_tol = t;
            }
            let r = ransac_with_rng(&src, &dst, &rp, &mut DetRng::split(m.seed, i as u64));
            let mut relevant = vec![false; q.descriptors.len()];
            for &k in &r.inliers {
                relevant[matches[k].query] = true;
            }
            let boxes: Vec<_> = q.boxes.iter().filter(|b| b.score >= params.box_threshold).collect();
            let mut rows = vec![RelevanceRow::default(); bins.len() - 1];
            for (d, &rel) in q.descriptors.iter().zip(&relevant) {
                let Some(b) = bin_of(bins, d.attention) else { continue };
                let row = &mut rows[b];
                if boxes.iter().any(|bx| bx.contains(d.x, d.y)) {
                    row.inside_total += 1;
                    row.inside_relevant += rel as u64;
                } else {
                    row.outside_total += 1;
                    row.outside_relevant += rel as u64;
                }
            }
            Ok((rows, r.model.is_some()))
        })
        .collect::<Result<_>>()?;
    let mut table = RelevanceTable {
        rows: bins
            .windows(2)
            .map(|w| RelevanceRow {
                bin_low: w[0],
                bin_high: w[1],
                ..Default::default()
            })
            .collect(),
        unverified_pairs: 0,
    };
    for (rows, verified) in per_pair {
        table.unverified_pairs += !verified as usize;
        for (acc, r) in table.rows.iter_mut().zip(rows) {
            acc.inside_relevant += r.inside_relevant;
            acc.inside_total += r.inside_total;
            acc.outside_relevant += r.outside_relevant;
            acc.outside_total += r.outside_total;
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, RegionBox};
    use crate::index::RankedItem;

    fn set<'a>(ids: &[&'a str]) -> BTreeSet<&'a str> {
        ids.iter().copied().collect()
    }

    #[test]
    fn ap_examples() {
        let pos = set(&["a", "b"]);
        let none = set(&[]);
        let ap = average_precision(&["a", "x", "b"], &pos, &none).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let ap = average_precision(&["a", "j", "b"], &pos, &set(&["j"])).unwrap();
        assert_eq!(ap, 1.0);
        assert_eq!(average_precision(&["a", "b", "x"], &pos, &none), Some(1.0));
        assert_eq!(average_precision(&["a"], &pos, &none), Some(0.5));
        assert_eq!(average_precision(&["a"], &none, &none), None);
    }

    #[test]
    fn p10_fixed_denominator() {
        let pos = set(&["a", "b"]);
        assert_eq!(precision_at(&["a", "b"], &pos, &set(&[]), 10), 0.2);
    }

    fn result(q: &str, ids: &[&str]) -> RankedResult {
        RankedResult {
            query_id: q.into(),
            items: ids
                .iter()
                .map(|&id| RankedItem {
                    image_id: id.into(),
                    score: 0.0,
                    inliers: None,
                })
                .collect(),
            warnings: vec![],
        }
    }

    fn truth(easy: &[&str], hard: &[&str], junk: &[&str]) -> QueryTruth {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        QueryTruth {
            easy: s(easy),
            hard: s(hard),
            junk: s(junk),
        }
    }

    #[test]
    fn protocols() {
        let mut gt = GroundTruth::default();
        gt.insert("q1", truth(&["e"], &["h"], &["j"])).unwrap();
        gt.insert("q2", truth(&["e2"], &[], &[])).unwrap();
        let res = vec![result("q1", &["e", "x", "h", "j"]), result("q2", &["e2"])];
        let m = evaluate(&res, &gt, Protocol::Medium, None).unwrap();
        assert!((m.map - ((1.0 + 2.0 / 3.0) / 2.0 + 1.0) / 2.0).abs() < 1e-12);
        let h = evaluate(&res, &gt, Protocol::Hard, None).unwrap();
        assert_eq!(h.excluded, vec!["q2".to_string()]);
        // easy becomes junk: ranking [x, h] → AP 0.5
        assert_eq!(h.map, 0.5);
        assert!(evaluate(&[result("zz", &[])], &gt, Protocol::Medium, None).is_err());
        let t = evaluate(&res, &gt, Protocol::Medium, Some(10)).unwrap();
        assert_eq!(t.truncated.len(), 2);
    }

    #[test]
    fn overlapping_sets_rejected() {
        let mut gt = GroundTruth::default();
        assert!(gt.insert("q", truth(&["a"], &["a"], &[])).is_err());
        gt.insert("q", truth(&["a"], &[], &[])).unwrap();
        assert!(gt.insert("q", truth(&["b"], &[], &[])).is_err());
    }

    #[test]
    fn bins() {
        let e = [0.0, 50.0, 100.0, 200.0];
        assert_eq!(bin_of(&e, 0.0), Some(0));
        assert_eq!(bin_of(&e, 50.0), Some(1));
        assert_eq!(bin_of(&e, 200.0), Some(2));
        assert_eq!(bin_of(&e, 200.1), None);
        assert_eq!(bin_of(&e, -1.0), None);
    }

    #[test]
    fn relevance_without_boxes_is_all_outside() {
        let mut q = ImageFeatures::new("q", 100, 100, 2);
        for i in 0..10 {
            q.descriptors.push(Descriptor {
                vector: vec![(i as f32).cos(), (i as f32).sin()],
                x: (i * 9) as f32,
                y: ((i * 37) % 100) as f32,
                scale: 1.0,
                attention: 1.0,
            });
        }
        let table = analyze_relevance(&[(q.clone(), q.clone())], &[0.0, 2.0], &RelevanceParams::default()).unwrap();
        assert_eq!(table.rows[0].inside_total, 0);
        assert_eq!(table.rows[0].outside_total, 10);
        assert_eq!(table.rows[0].outside_relevant, 10);

        q.boxes.push(RegionBox::new(0., 0., 30., 100., 0.9));
        let table = analyze_relevance(&[(q.clone(), q)], &[0.0, 2.0], &RelevanceParams::default()).unwrap();
        assert_eq!(table.rows[0].inside_total, 4);
        assert!(table.to_csv().lines().count() == 2);
        assert!(analyze_relevance(&[], &[1.0, 1.0], &RelevanceParams::default()).is_err());
    }
}
