use proptest::prelude::*;
use t2d_core::data::{
    load_csv, make_folds, split_indices, standardize, summarize, synth_dataset, write_csv, Imputer, SplitSpec,
};

fn labels_strategy() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, 10..200).prop_filter("both classes, 5 each", |l| {
        let pos = l.iter().filter(|&&v| v == 1).count();
        pos >= 5 && l.len() - pos >= 5
    })
}

#[test]
fn pima_file_loads_with_expected_shape() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/pima-indians-diabetes.csv");
    let m = load_csv(path, true).unwrap();
    assert_eq!((m.n_rows(), m.n_cols()), (768, 8));
    assert_eq!(m.class_counts(), (500, 268));
    assert_eq!(m.label_name(), "Outcome");
    let glucose = m.column_index("Glucose").unwrap();
    let s = summarize(&m, &[glucose]).unwrap();
    assert_eq!(s.columns[glucose].missing, 5);
}

#[test]
fn synth_round_trips_through_csv() {
    let m = synth_dataset(100, 4, 0.3, 2.0, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    write_csv(&m, &path).unwrap();
    let back = load_csv(&path, true).unwrap();
    assert_eq!(back, m);
    let s = summarize(&back, &[]).unwrap();
    assert_eq!((s.n_samples, s.n_features, s.n_positive), (100, 4, 30));
}

proptest! {
    #[test]
    fn split_partitions_and_stratifies(labels in labels_strategy(), seed in any::<u64>(), f in 0.2f64..0.8) {
        let spec = SplitSpec { train_fraction: f, seed, stratified: true };
        let (train, test) = split_indices(&labels, &spec).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for class in [0u8, 1] {
            let n_class = labels.iter().filter(|&&l| l == class).count() as f64;
            let in_train = train.iter().filter(|&&i| labels[i] == class).count() as f64;
            prop_assert!((in_train - f * n_class).abs() <= 1.0);
        }
        prop_assert_eq!(split_indices(&labels, &spec).unwrap(), (train, test));
    }

    #[test]
    fn folds_partition_and_balance(labels in labels_strategy(), seed in any::<u64>(), k in 2usize..6) {
        let folds = make_folds(&labels, k, seed).unwrap();
        let mut seen = vec![0; labels.len()];
        for f in 0..k {
            for i in folds.test_indices(f) {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = folds.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for class in [0u8, 1] {
            let per_fold: Vec<usize> = (0..k)
                .map(|f| folds.test_indices(f).iter().filter(|&&i| labels[i] == class).count())
                .collect();
            prop_assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn standardized_columns_have_zero_mean_unit_variance(seed in any::<u64>(), n in 5usize..60) {
        let m = synth_dataset(n, 3, 0.5, 1.0, seed).unwrap();
        let (z, _) = standardize(&m).unwrap();
        for j in 0..3 {
            let col = z.column(j);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn imputation_leaves_no_zeros(values in prop::collection::vec(prop::sample::select(vec![0.0, 1.0, 2.5, 7.0]), 4..40)) {
        prop_assume!(values.iter().any(|&v| v != 0.0));
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v, v]).collect();
        let m = t2d_core::data::FeatureMatrix::new(rows, vec![0; values.len()], vec!["a".into(), "b".into()]).unwrap();
        let imputer = Imputer::fit(&m, &[0]).unwrap();
        let out = imputer.transform(&m);
        prop_assert!(out.column(0).iter().all(|&v| v != 0.0));
        prop_assert_eq!(out.column(1), m.column(1));
    }
}
