use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dnf_core::dataset::{texture, to_image, TextureParams};
use dnf_core::dnf::{extract_batch, read_feature, DnfConfig, Extractor, FusionStrategy};
use dnf_core::imageio::save_png;
use dnf_core::predictor::AnalyticGaussianPredictor;

fn write_images(dir: &Path, n: usize) -> Vec<PathBuf> {
    let params = TextureParams {
        resolution: 24,
        ..TextureParams::default()
    };
    (0..n)
        .map(|i| {
            let path = dir.join(format!("img-{i:03}.png"));
            save_png(&path, &to_image(&texture(&params, 3, i).unwrap()).unwrap()).unwrap();
            path
        })
        .collect()
}

fn extractor(strategy: FusionStrategy) -> Extractor {
    let cfg = DnfConfig {
        resolution: 16,
        steps: 6,
        strategy,
        ..DnfConfig::default()
    };
    Extractor::new(cfg, Arc::new(AnalyticGaussianPredictor::new(0.0, 0.1).unwrap())).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn warm_cache_is_reused_and_untouched() {
    let data = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let mut files = write_images(data.path(), 6);
    let broken = data.path().join("broken.png");
    std::fs::write(&broken, b"not an image").unwrap();
    files.insert(2, broken.clone());
    files.push(data.path().join("missing.png"));
    let ex = extractor(FusionStrategy::Avg);

    let cold = extract_batch(&files, &ex, cache.path(), 2).unwrap();
    assert_eq!(cold.computed(), 6);
    let failed: Vec<&PathBuf> = cold.failures().map(|f| &f.file).collect();
    assert_eq!(failed, vec![&broken, &data.path().join("missing.png")]);
    assert!(cold.items[2].is_err());
    let before = snapshot(cache.path());
    assert_eq!(before.len(), 12);

    let warm = extract_batch(&files, &ex, cache.path(), 2).unwrap();
    assert_eq!((warm.computed(), warm.cache_hits()), (0, 6));
    assert_eq!(snapshot(cache.path()), before);
}

#[test]
fn single_image_matches_direct_extraction() {
    let data = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let files = write_images(data.path(), 1);
    let ex = extractor(FusionStrategy::Last);
    let report = extract_batch(&files, &ex, cache.path(), 1).unwrap();
    let item = report.succeeded().next().unwrap();
    let features: Vec<_> = snapshot(cache.path())
        .into_keys()
        .filter(|k| k.ends_with(".dnft"))
        .collect();
    assert_eq!(features.len(), 1);
    let stored = read_feature(cache.path(), &item.key).unwrap();
    let direct = ex.extract_file(&files[0]).unwrap();
    assert_eq!(stored.provenance, direct.provenance);
    assert_eq!(stored.values, direct.values.quantize_f32());
}

#[test]
fn worker_count_does_not_change_bytes() {
    let data = tempfile::tempdir().unwrap();
    let files = write_images(data.path(), 20);
    let ex = extractor(FusionStrategy::First);
    let one = tempfile::tempdir().unwrap();
    let eight = tempfile::tempdir().unwrap();
    let a = extract_batch(&files, &ex, one.path(), 1).unwrap();
    let b = extract_batch(&files, &ex, eight.path(), 8).unwrap();
    assert_eq!(a, b);
    assert_eq!(snapshot(one.path()), snapshot(eight.path()));
}

#[test]
fn strategies_get_distinct_cache_entries() {
    let data = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    let files = write_images(data.path(), 3);
    for s in FusionStrategy::ALL {
        let report = extract_batch(&files, &extractor(s), cache.path(), 1).unwrap();
        assert_eq!(report.computed(), 3, "{s}");
    }
    assert_eq!(snapshot(cache.path()).len(), 18);
}
