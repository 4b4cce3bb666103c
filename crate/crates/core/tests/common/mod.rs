#![allow(dead_code)]

use std::path::Path;

use homodiv_core::config::GlobalConfig;
use homodiv_core::linalg::Matrix;
use homodiv_core::pipeline::Stack;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mock stack rooted at `dir`, with extra `section.key=value` overrides.
pub fn mock_stack(dir: &Path, overrides: &[&str]) -> (GlobalConfig, Stack) {
    let mut all = vec![format!("paths.data_dir={}", dir.display())];
    all.extend(overrides.iter().map(|s| s.to_string()));
    let mut config = GlobalConfig::resolve(None, &[], &all).expect("valid test config");
    config.force_mock();
    let stack = config.build_stack().expect("mock stack builds");
    (config, stack)
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}
