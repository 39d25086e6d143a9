//! Helpers shared by unit tests.

use std::fs;
use std::path::PathBuf;

use crate::numerics::Tensor;
use crate::rng;

pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    rng::normal_tensor(&mut rng::stream(seed, 0), shape, 1.0)
}

pub fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Compares `value` bitwise against `tests/golden/{name}.txt`. With
/// `SERT_BLESS=1` in the environment a missing file is recorded instead.
pub fn check_golden(name: &str, value: &Tensor) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.txt"));
    let encoded = encode(value);
    match fs::read_to_string(&path) {
        Ok(stored) => assert!(
            stored == encoded,
            "output differs from golden file {}",
            path.display()
        ),
        Err(_) if std::env::var("SERT_BLESS").as_deref() == Ok("1") => {
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(&path, encoded).unwrap();
        }
        Err(e) => panic!(
            "golden file {} missing ({e}); rerun with SERT_BLESS=1 to record it",
            path.display()
        ),
    }
}

fn encode(value: &Tensor) -> String {
    let mut s = format!(
        "shape {}\n",
        value
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    );
    for v in value.data() {
        s.push_str(&format!("{:016x}\n", v.to_bits()));
    }
    s
}
