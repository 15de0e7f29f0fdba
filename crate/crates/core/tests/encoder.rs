use std::path::PathBuf;

use protoseg::encoder::{features, EncoderConfig, EncoderParams};
use protoseg::Tensor;

/// Set to rewrite the golden file from the current build.
const BLESS_ENV: &str = "PROTOSEG_BLESS";

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/encoder_features.bin")
}

/// Integer pattern on 8-bit levels, so no libm call feeds the golden values.
fn image() -> Tensor<f64> {
    Tensor::from_fn([1, 32, 32], |i| {
        let (y, x) = (i / 32, i % 32);
        ((x * 7 + y * 13 + x * y) % 256) as f64 / 255.0
    })
}

/// Shape as three u64 then f64 values, little-endian.
fn encode(t: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[test]
fn features_match_the_golden_file() {
    let cfg = EncoderConfig::default();
    let params = EncoderParams::<f64>::init(&cfg, 7).unwrap();
    let out = features(&cfg, &params, &image()).unwrap();
    assert_eq!(out.shape(), &[32, 8, 8]);
    let bytes = encode(&out);
    let path = golden_path();
    if std::env::var_os(BLESS_ENV).is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &bytes).unwrap();
    }
    let golden = std::fs::read(&path).expect("golden file; run once with PROTOSEG_BLESS=1");
    assert_eq!(bytes, golden);
}
