#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qprobe::model::{save_raster, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> serde_json::Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).expect("fixture is JSON")
}

pub fn f64s(v: &serde_json::Value) -> Vec<f64> {
    v.as_array().expect("array").iter().map(|x| x.as_f64().expect("number")).collect()
}

/// Smooth gradients plus sinusoidal texture whose frequency varies by seed.
pub fn textured_source(seed: u64, width: usize, height: usize) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx: f64 = rng.gen_range(0.05..0.6);
    let fy: f64 = rng.gen_range(0.05..0.6);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let noise: Vec<f64> = (0..width * height * 3).map(|_| rng.gen_range(-0.05..0.05)).collect();
    Raster::from_fn(width, height, 3, |x, y, c| {
        let (xf, yf) = (x as f64, y as f64);
        let base = 0.3 + 0.3 * xf / width as f64 + 0.1 * c as f64;
        let tex = if x > width / 3 { 0.2 * (fx * xf + phase).sin() * (fy * yf).cos() } else { 0.0 };
        base + tex + noise[(y * width + x) * 3 + c]
    })
    .expect("valid raster")
}

pub fn write_sources(dir: &Path, n: usize, size: usize) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    (0..n)
        .map(|i| {
            let p = dir.join(format!("src{i:03}.png"));
            save_raster(&textured_source(i as u64, size, size), &p).unwrap();
            p
        })
        .collect()
}

pub fn qprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qprobe"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf8 path")
}
