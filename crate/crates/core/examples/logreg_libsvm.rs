//! Load a libsvm file, split it across clients and fit regularised
//! logistic regression with FedADMM.
//!
//! `cargo run --release --example logreg_libsvm [path/to/file.svm]`
//!
//! Without an argument a small separable-ish problem is written to a
//! temporary file first.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedadmm::data::{load_libsvm, partition, write_libsvm};
use fedadmm::harness::{run_fedadmm, RunOptions};
use fedadmm::model::ModelKind;

fn synthetic(path: &std::path::Path) -> fedadmm::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, n) = (600, 12);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let features = Array2::from_shape_fn((d, n), |_| if rng.gen_bool(0.4) { rng.gen_range(-2.0..2.0) } else { 0.0 });
    let labels = Array1::from_shape_fn(d, |t| {
        let score: f64 = features.row(t).iter().zip(&w).map(|(a, b)| a * b).sum();
        f64::from(u8::from(score + rng.gen_range(-0.5..0.5) > 0.0))
    });
    write_libsvm(path, &features, &labels)
}

fn main() -> fedadmm::Result<()> {
    let tmp = tempfile::tempdir()?;
    let path = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => {
            let p = tmp.path().join("synthetic.svm");
            synthetic(&p)?;
            p
        }
    };
    let raw = load_libsvm(&path, None)?;
    let kind = ModelKind::logreg(1e-3)?;
    let data = partition(&raw.to_dense(), &Array1::from(raw.labels.clone()), 10, 1, kind)?;
    println!("{} rows, {} features, {} clients", raw.len(), raw.n, data.m());

    let mut opts = RunOptions::experiment(5, 0.5, 1, kind);
    opts.max_iters = 20_000;
    let out = run_fedadmm(&data, &opts)?;
    let s = &out.summary;
    println!("{} after {} iterations (CR {}), f = {:?}", s.status.as_str(), s.iterations, s.cr, s.f_final);
    Ok(())
}
