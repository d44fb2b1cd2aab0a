use std::path::Path;

use ramk_core::features::LoadOptions;
use ramk_core::synthetic::{SyntheticConfig, SyntheticDataset};
use ramk_core::{train_codebook, Codebook, Error, ErrorClass, ImageFeatures, IndexConfig, IndexMode, RegionStrategy, RetrievalIndex};

fn tiny() -> (SyntheticDataset, Codebook) {
    let cfg = SyntheticConfig {
        landmarks: 2,
        images_per_landmark: 3,
        dim: 16,
        ..Default::default()
    };
    let d = SyntheticDataset::generate(&cfg).unwrap();
    let sample = ramk_core::codebook::training_sample(&d.images, 16, 10_000, 0).unwrap();
    let cb = train_codebook(&sample, 16, 8, 10, 0).unwrap();
    (d, cb)
}

#[test]
fn every_truncation_of_an_index_is_rejected() {
    let (d, cb) = tiny();
    let cfg = IndexConfig::new(IndexMode::RAsmkBinary, RegionStrategy::DetectorThreshold(0.2));
    let bytes = RetrievalIndex::from_features(&d.images, &cb, &cfg).unwrap().to_bytes();
    for cut in (0..bytes.len()).step_by(7) {
        let err = RetrievalIndex::from_bytes(&bytes[..cut], Path::new("t.dtri")).unwrap_err();
        assert_eq!(err.class(), ErrorClass::Data, "cut at {cut}: {err}");
    }
}

#[test]
fn index_version_and_magic_are_checked() {
    let (d, cb) = tiny();
    let cfg = IndexConfig::new(IndexMode::Vlad, RegionStrategy::WholeImageOnly);
    let mut bytes = RetrievalIndex::from_features(&d.images, &cb, &cfg).unwrap().to_bytes();
    bytes[4] = 99;
    assert!(matches!(
        RetrievalIndex::from_bytes(&bytes, Path::new("v.dtri")),
        Err(Error::Version { found: 99, .. })
    ));
    bytes[0] = b'X';
    assert!(RetrievalIndex::from_bytes(&bytes, Path::new("m.dtri")).is_err());
}

#[test]
fn codebook_and_features_reject_truncation() {
    let (d, cb) = tiny();
    let cbytes = cb.to_bytes();
    for cut in [0, 3, 10, cbytes.len() - 1] {
        assert!(Codebook::from_bytes(&cbytes[..cut], Path::new("c")).is_err());
    }
    let f = &d.images[0];
    let fbytes = f.to_bytes().unwrap();
    for cut in [0, 5, fbytes.len() / 2, fbytes.len() - 1] {
        assert!(ImageFeatures::from_bytes(&fbytes[..cut], Path::new("f"), &LoadOptions::default()).is_err());
    }
}

#[test]
fn written_corpus_reloads_identically() {
    let (d, _) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = d.write(dir.path(), &["seed:0".into()]).unwrap();
    let m = ramk_core::DatasetManifest::load(&path).unwrap();
    assert_eq!(m.images.len(), d.images.len());
    for (e, f) in m.images.iter().zip(&d.images) {
        assert_eq!(&m.load_entry(e, None).unwrap(), f);
    }
    let gt = ramk_core::dataset::load_ground_truth(m.ground_truth_path().unwrap()).unwrap();
    assert_eq!(gt, d.ground_truth);
}
