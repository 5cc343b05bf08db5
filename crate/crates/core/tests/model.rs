use std::collections::BTreeMap;

use grapedet::model::checkpoint::{from_bytes, load, save, to_bytes};
use grapedet::model::{decode, Detector, ModelConfig, Stage};
use grapedet::tensor::Tensor;

fn images(cfg: &ModelConfig, n: usize) -> Tensor<f32> {
    let s = cfg.input_size;
    let len = n * 3 * s * s;
    Tensor::new(&[n, 3, s, s], (0..len).map(|i| ((i as f32) * 0.013).sin() * 0.5 + 0.5).collect()).unwrap()
}

#[test]
fn checkpoint_reload_gives_bit_identical_outputs() {
    let cfg = ModelConfig::gradcheck();
    let det = Detector::<f32>::build(&cfg, 21).unwrap();
    let x = images(&cfg, 2);
    let before = det.predict(&x).unwrap();
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), serde_json::json!(3));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    save(&det, &meta, &path).unwrap();
    let (back, header) = load::<f32>(&path).unwrap();
    assert_eq!(back.config(), &cfg);
    assert_eq!(header.meta.get("epoch"), Some(&serde_json::json!(3)));
    assert_eq!(back.predict(&x).unwrap(), before);
    assert_eq!(to_bytes(&back, &meta).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let det = Detector::<f32>::build(&ModelConfig::gradcheck(), 1).unwrap();
    let bytes = to_bytes(&det, &BTreeMap::new()).unwrap();
    assert!(from_bytes::<f32>(&bytes[..bytes.len() - 7]).is_err());
    assert!(from_bytes::<f32>(b"nope").is_err());
}

#[test]
fn same_seed_builds_the_same_network() {
    let cfg = ModelConfig::gradcheck();
    let a = to_bytes(&Detector::<f32>::build(&cfg, 5).unwrap(), &BTreeMap::new()).unwrap();
    let b = to_bytes(&Detector::<f32>::build(&cfg, 5).unwrap(), &BTreeMap::new()).unwrap();
    let c = to_bytes(&Detector::<f32>::build(&cfg, 6).unwrap(), &BTreeMap::new()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn swin_variant_changes_only_the_last_backbone_stage() {
    let cfg = ModelConfig::tiny();
    let swin = Detector::<f32>::build(&cfg, 0).unwrap();
    let base = Detector::<f32>::build(&cfg.clone().baseline(), 0).unwrap();
    let kinds = |d: &Detector<f32>| {
        d.net.backbone_stages().map(|s| matches!(s, Stage::Swin(_))).collect::<Vec<_>>()
    };
    assert_eq!(kinds(&swin), [false, false, false, true]);
    assert_eq!(kinds(&base), [false; 4]);
    let x = images(&cfg, 1);
    let shapes = |d: &Detector<f32>| d.predict(&x).unwrap().scales.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(&swin), shapes(&base));
    assert_ne!(swin.num_parameters(), base.num_parameters());
}

#[test]
fn decode_threshold_is_monotone_and_boxes_stay_finite() {
    let cfg = ModelConfig::gradcheck();
    let det = Detector::<f32>::build(&cfg, 2).unwrap();
    let out = det.predict(&images(&cfg, 1)).unwrap();
    let loose = decode(&out, &cfg, 0.0);
    let tight = decode(&out, &cfg, 0.5);
    assert!(tight[0].len() <= loose[0].len());
    let total: usize = out.scales.iter().map(|t| t.numel() / t.dim(4)).sum();
    assert!(loose[0].len() <= total && !loose[0].is_empty());
    for b in &loose[0] {
        assert!(b.x1.is_finite() && b.y2.is_finite() && b.width() > 0.0 && b.height() > 0.0);
        assert!(tight[0].iter().all(|t| t.confidence.unwrap() > 0.5));
    }
}
