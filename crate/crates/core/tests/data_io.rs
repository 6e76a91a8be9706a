use ndarray::{Array1, Array2};
use proptest::prelude::*;

use fedadmm::data::{
    export_dataset, generate_linreg, import_dataset, load_libsvm, partition, pooled_samples, write_libsvm, GenSpec,
};
use fedadmm::model::ModelKind;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn libsvm_round_trip(d in 1usize..20, n in 1usize..8, seed in 0u64..1000, density in 0.0..1.0f64) {
        let features = Array2::from_shape_fn((d, n), |(t, j)| {
            let u = ((seed as usize * 31 + t * 7 + j * 13) % 97) as f64 / 97.0;
            if u < density { (u - 0.5) * 8.0 } else { 0.0 }
        });
        let labels = Array1::from_shape_fn(d, |t| f64::from(u8::from((t + seed as usize) % 3 == 0)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.svm");
        write_libsvm(&path, &features, &labels).unwrap();
        let back = load_libsvm(&path, Some(n)).unwrap();
        prop_assert_eq!(back.to_dense(), features);
        prop_assert_eq!(Array1::from(back.labels), labels);
    }
}

#[test]
fn libsvm_accepts_signed_labels_and_rejects_bad_indices() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.svm");
    std::fs::write(&good, "+1 1:0.5 3:2\n-1 2:1\n").unwrap();
    let data = load_libsvm(&good, None).unwrap();
    assert_eq!(data.labels, vec![1.0, 0.0]);
    assert_eq!(data.n, 3);
    let bad = dir.path().join("bad.svm");
    std::fs::write(&bad, "1 3:1 2:1\n").unwrap();
    assert!(load_libsvm(&bad, None).is_err());
}

#[test]
fn export_import_round_trip_is_exact() {
    let data = generate_linreg(&GenSpec::new(5, 4, 12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_dataset(&data, dir.path(), 12, None).unwrap();
    assert_eq!(manifest.d, data.d());
    let (back, read) = import_dataset(dir.path()).unwrap();
    assert_eq!(read, manifest);
    for (x, y) in back.shards().iter().zip(data.shards()) {
        assert_eq!(x.features(), y.features());
        assert_eq!(x.labels(), y.labels());
    }
}

fn excess_kurtosis(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n / (var * var) - 3.0
}

#[test]
fn heavy_tailed_block_has_larger_kurtosis_than_normal_block() {
    let spec = GenSpec::new(40, 1, 8);
    let d = 4000;
    let (samples, _) = pooled_samples(&spec, d).unwrap();
    let (normal, student, _) = fedadmm::data::block_sizes(d);
    let column = samples.column(0);
    let normal_block: Vec<f64> = column.iter().take(normal).copied().collect();
    let student_block: Vec<f64> = column.iter().skip(normal).take(student).copied().collect();
    assert!(excess_kurtosis(&student_block) > excess_kurtosis(&normal_block));
}

#[test]
fn partition_rejects_more_clients_than_samples() {
    let features = Array2::zeros((3, 2));
    let labels = Array1::zeros(3);
    assert!(partition(&features, &labels, 4, 0, ModelKind::LinReg).is_err());
}
