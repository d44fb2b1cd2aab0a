use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use rayon::prelude::*;

use ramk_core::codebook::{train_codebook as kmeans, training_sample};
use ramk_core::dataset::{load_ground_truth, ManifestEntry};
use ramk_core::eval::{analyze_relevance as relevance, evaluate as score, RelevanceParams};
use ramk_core::index::DEFAULT_TOP_N;
use ramk_core::rerank::{spatial_rerank, RerankParams, DEFAULT_ITERATIONS, DEFAULT_MAX_DISTANCE};
use ramk_core::synthetic::{SyntheticConfig, SyntheticDataset};
use ramk_core::{
    Codebook, DatasetManifest, Error, ImageFeatures, IndexConfig, IndexMode, Pooling, Protocol, RankedResult,
    RegionStrategy, RetrievalIndex, Searcher, SelectivityParams,
};

use crate::settings::{comment_header, parse_list, Settings};
use crate::{
    AnalyzeRelevanceArgs, BuildIndexArgs, EvaluateArgs, GenSyntheticArgs, Global, IndexSettingsArgs, SearchArgs,
    TrainCodebookArgs,
};

const DEFAULT_WORDS: usize = 1024;
const DEFAULT_KMEANS_ITERS: usize = 20;
const DEFAULT_SAMPLE_CAP: usize = 2_000_000;
const DEFAULT_BINS: &str = "0,0.25,0.5,0.75,1";

fn settings(g: &Global) -> Result<Settings> {
    let mut s = Settings::load(g.config.as_deref().map(Path::new))?;
    s.get("seed", g.seed, 0u64)?;
    Ok(s)
}

fn seed(s: &mut Settings, g: &Global) -> Result<u64> {
    s.get("seed", g.seed, 0)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_entries(m: &DatasetManifest, entries: &[ManifestEntry], min_attention: Option<f32>) -> Result<Vec<ImageFeatures>> {
    Ok(entries
        .par_iter()
        .map(|e| m.load_entry(e, min_attention))
        .collect::<ramk_core::Result<Vec<_>>>()?)
}

pub fn gen_synthetic(g: &Global, a: GenSyntheticArgs) -> Result<()> {
    let mut s = settings(g)?;
    let mut cfg = SyntheticConfig::default();
    let mut params = s.prefixed("synthetic.");
    for p in &a.params {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--param expects key=value, got `{p}`")))?;
        params.push((k.to_string(), v.to_string()));
    }
    for (k, v) in &params {
        if k == "seed" {
            return Err(Error::Config("use --seed for the generator seed".into()).into());
        }
        cfg.set(k, v)?;
    }
    cfg.seed = seed(&mut s, g)?;
    cfg.validate()?;
    let data = SyntheticDataset::generate(&cfg)?;
    let mut prov = s.provenance("gen-synthetic");
    prov.extend(cfg.to_key_values().into_iter().map(|kv| format!("synthetic.{kv}")));
    let dir = PathBuf::from(&a.out);
    let manifest = data.write(&dir, &prov)?;
    let mut pairs = comment_header(&prov);
    for (q, d) in data.matched_pairs() {
        pairs.push_str(&format!("{}\t{}\n", q.image_id, d.image_id));
    }
    write_file(&dir.join("pairs.txt"), pairs.as_bytes())?;
    write_file(&dir.join("layout.txt"), data.layout_summary().as_bytes())?;
    log::info!(
        "wrote {} images and {} queries to {}",
        data.images.len(),
        data.queries.len(),
        manifest.display()
    );
    Ok(())
}

pub fn train_codebook(g: &Global, a: TrainCodebookArgs) -> Result<()> {
    let mut s = settings(g)?;
    let manifest_path: String = s.req("manifest", a.manifest)?;
    let words = s.get("c", a.c, DEFAULT_WORDS)?;
    let iters = s.get("iters", a.iters, DEFAULT_KMEANS_ITERS)?;
    let cap = s.get("sample_cap", a.sample_cap, DEFAULT_SAMPLE_CAP)?;
    let seed = seed(&mut s, g)?;
    let out = PathBuf::from(s.output_req("out", a.out)?);

    let manifest = DatasetManifest::load(&manifest_path)?;
    let images = load_entries(&manifest, &manifest.images, None)?;
    let sample = training_sample(&images, manifest.dim, cap, seed)?;
    log::info!("training {words} words on {} descriptors", sample.len() / manifest.dim.max(1));
    let cb = kmeans(&sample, manifest.dim, words, iters, seed)?;
    if let Some(stats) = &cb.stats {
        for (i, d) in stats.distortion_trace.iter().enumerate() {
            log::info!("iteration {i}: distortion {d:.6e}");
        }
    }
    write_file(&out, &cb.to_bytes())?;
    let mut sidecar = out.clone().into_os_string();
    sidecar.push(".provenance");
    write_file(Path::new(&sidecar), comment_header(&s.provenance("train-codebook")).as_bytes())?;
    log::info!("wrote codebook C={} D={} to {}", cb.num_words(), cb.dim(), out.display());
    Ok(())
}

fn index_config(s: &mut Settings, a: IndexSettingsArgs) -> Result<IndexConfig> {
    let mode: IndexMode = s.req("mode", a.mode.as_deref().map(str::parse).transpose()?)?;
    let strategy: RegionStrategy = s.get(
        "regions",
        a.regions.as_deref().map(str::parse).transpose()?,
        RegionStrategy::WholeImageOnly,
    )?;
    let d = SelectivityParams::default();
    let params = SelectivityParams::new(s.get("alpha", a.alpha, d.alpha)?, s.get("tau", a.tau, d.tau)?)?;
    let mut cfg = IndexConfig::new(mode, strategy);
    cfg.params = params;
    cfg.normalize = !s.switch("raw", a.raw)?;
    Ok(cfg)
}

pub fn build_index(g: &Global, a: BuildIndexArgs) -> Result<()> {
    let mut s = settings(g)?;
    let manifest_path: String = s.req("manifest", a.manifest)?;
    let codebook_path: String = s.req("codebook", a.codebook)?;
    let cfg = index_config(&mut s, a.index)?;
    let min_attention = s.opt("min_attention", a.min_attention)?;
    let out = PathBuf::from(s.output_req("out", a.out)?);

    let manifest = DatasetManifest::load(&manifest_path)?;
    let cb = Codebook::load(&codebook_path)?;
    let images = load_entries(&manifest, &manifest.images, min_attention)?;
    let mut index = RetrievalIndex::from_features(&images, &cb, &cfg)?;
    index.provenance = s.provenance("build-index").join("\n");
    let bytes = index.to_bytes();
    write_file(&out, &bytes)?;
    let n = index.num_images();
    log::info!(
        "index {}: {} images, {} entries, {:.2} entries per image, {} postings bytes, {} file bytes",
        cfg.mode,
        n,
        index.num_entries(),
        index.num_entries() as f64 / n.max(1) as f64,
        index.postings_bytes(),
        bytes.len()
    );
    Ok(())
}

fn read_results(path: &Path) -> Result<Vec<RankedResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| RankedResult::parse_line(l, path))
        .collect::<ramk_core::Result<Vec<_>>>()?)
}

pub fn search(g: &Global, a: SearchArgs) -> Result<()> {
    let mut s = settings(g)?;
    let index_path: String = s.req("index", a.index)?;
    let codebook_path: String = s.req("codebook", a.codebook)?;
    let manifest_path: String = s.req("manifest", a.manifest)?;
    let pooling: Pooling = s.get("pooling", a.pooling.as_deref().map(str::parse).transpose()?, Pooling::Max)?;
    let top_n = s.get("top_n", a.top_n, DEFAULT_TOP_N)?;
    let min_attention = s.opt("min_attention", a.min_attention)?;
    let sp = s.switch("sp", a.sp)?;
    let seed = seed(&mut s, g)?;
    let rerank = if sp {
        let d = RerankParams::default();
        Some(RerankParams {
            depth: s.get("sp_depth", a.sp_depth, d.depth)?,
            iterations: s.get("sp_iters", a.sp_iters, DEFAULT_ITERATIONS)?,
            inlier_tol: s.opt("sp_tol", a.sp_tol)?,
            seed: s.get("sp_seed", a.sp_seed, seed)?,
            max_distance: s.get("max_distance", a.max_distance, DEFAULT_MAX_DISTANCE)?,
        })
    } else {
        None
    };
    let out = PathBuf::from(s.output_req("out", a.out)?);

    let index = RetrievalIndex::load(&index_path)?;
    let cb = Codebook::load(&codebook_path)?;
    let searcher = Searcher::new(&index, &cb)?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let queries = load_entries(&manifest, &manifest.queries, min_attention)?;
    let by_id: HashMap<&str, &ManifestEntry> = manifest.images.iter().map(|e| (e.id.as_str(), e)).collect();
    let load = |id: &str| -> ramk_core::Result<ImageFeatures> {
        let e = by_id
            .get(id)
            .ok_or_else(|| Error::Validation(format!("image `{id}` is not in the manifest")))?;
        manifest.load_entry(e, min_attention)
    };

    let results: Vec<RankedResult> = queries
        .par_iter()
        .map(|q| -> ramk_core::Result<RankedResult> {
            let r = searcher.query(q, pooling, top_n)?;
            match &rerank {
                Some(p) => spatial_rerank(&r, q, load, p),
                None => Ok(r),
            }
        })
        .collect::<ramk_core::Result<_>>()?;

    let mut text = comment_header(&s.provenance("search"));
    for r in &results {
        for w in &r.warnings {
            log::warn!("query `{}`: {w}", r.query_id);
        }
        text.push_str(&r.to_line());
        text.push('\n');
    }
    write_file(&out, text.as_bytes())?;
    log::info!("ranked {} queries against {} images", results.len(), index.num_images());
    Ok(())
}

pub fn evaluate(g: &Global, a: EvaluateArgs) -> Result<()> {
    let mut s = settings(g)?;
    let results_path: String = s.req("results", a.results)?;
    let manifest_path: Option<String> = s.opt("manifest", a.manifest)?;
    let protocol: Option<Protocol> = s.opt("protocol", a.protocol.as_deref().map(str::parse).transpose()?)?;
    let manifest = manifest_path.map(DatasetManifest::load).transpose()?;
    let gt_path = match s.opt::<String>("ground_truth", a.ground_truth)? {
        Some(p) => PathBuf::from(p),
        None => manifest
            .as_ref()
            .and_then(|m| m.ground_truth_path())
            .ok_or_else(|| anyhow!(Error::Config("need --ground-truth or a manifest that names one".into())))?,
    };
    let out = s.output("out", a.out)?;
    let report_path = s.output("report", a.report)?;

    let gt = load_ground_truth(&gt_path)?;
    let results = read_results(Path::new(&results_path))?;
    let corpus = manifest.as_ref().map(|m| m.images.len());
    let protocols = match protocol {
        Some(p) => vec![p],
        None => vec![Protocol::Medium, Protocol::Hard],
    };
    let header = comment_header(&s.provenance("evaluate"));
    let mut kv = header.clone();
    let mut report = header;
    for p in protocols {
        let m = score(&results, &gt, p, corpus)?;
        kv.push_str(&m.to_key_values());
        report.push_str(&m.report());
        log::info!("{p}: mAP {:.2}, mP@10 {:.2}", 100.0 * m.map, 100.0 * m.mp10);
    }
    match &out {
        Some(p) => write_file(Path::new(p), kv.as_bytes())?,
        None => log::warn!("no --out given; metrics only logged"),
    }
    if let Some(p) = &report_path {
        write_file(Path::new(p), report.as_bytes())?;
    }
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(n, l)| {
            let mut it = l.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(q), Some(d), None) => Ok((q.to_string(), d.to_string())),
                _ => Err(Error::Format {
                    path: path.to_path_buf(),
                    field: "pairs".into(),
                    detail: format!("line {}: expected two ids", n + 1),
                }
                .into()),
            }
        })
        .collect()
}

pub fn analyze_relevance(g: &Global, a: AnalyzeRelevanceArgs) -> Result<()> {
    let mut s = settings(g)?;
    let manifest_path: String = s.req("manifest", a.manifest)?;
    let pairs_path: String = s.req("pairs", a.pairs)?;
    let bins_raw: String = s.get("bins", a.bins, DEFAULT_BINS.to_string())?;
    let bins: Vec<f32> = parse_list("bins", &bins_raw)?;
    let mut params = RelevanceParams {
        box_threshold: s.get("box_threshold", a.box_threshold, 0.0)?,
        ..Default::default()
    };
    params.matching.max_distance = s.get("max_distance", a.max_distance, DEFAULT_MAX_DISTANCE)?;
    params.matching.iterations = s.get("sp_iters", a.sp_iters, DEFAULT_ITERATIONS)?;
    params.matching.inlier_tol = s.opt("sp_tol", a.sp_tol)?;
    params.matching.seed = seed(&mut s, g)?;
    let out = PathBuf::from(s.output_req("out", a.out)?);

    let manifest = DatasetManifest::load(&manifest_path)?;
    let ids = read_pairs(Path::new(&pairs_path))?;
    if ids.is_empty() {
        log::warn!("pair list is empty; the table has no observations");
    }
    let by_id: HashMap<&str, &ManifestEntry> = manifest
        .images
        .iter()
        .chain(&manifest.queries)
        .map(|e| (e.id.as_str(), e))
        .collect();
    let load = |id: &str| -> ramk_core::Result<ImageFeatures> {
        let e = by_id
            .get(id)
            .ok_or_else(|| Error::Validation(format!("image `{id}` is not in the manifest")))?;
        manifest.load_entry(e, None)
    };
    let pairs = ids
        .par_iter()
        .map(|(q, d)| Ok((load(q)?, load(d)?)))
        .collect::<ramk_core::Result<Vec<_>>>()?;
    let table = relevance(&pairs, &bins, &params)?;
    if table.unverified_pairs > 0 {
        log::warn!("{} pairs had no verified model; their features count as non-relevant", table.unverified_pairs);
    }
    for row in table.rows.iter().filter(|r| r.is_populated()) {
        log::info!("bin [{}, {}): ratio {:.3}", row.bin_low, row.bin_high, row.ratio());
    }
    let mut text = comment_header(&s.provenance("analyze-relevance"));
    text.push_str(&table.to_csv());
    write_file(&out, text.as_bytes())?;
    Ok(())
}
