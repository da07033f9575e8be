use std::path::Path;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use intsgd::problems::{
    global_gradient, global_value, load_libsvm, make_least_squares, make_quadratic, parse_libsvm,
    partition_heterogeneous, reference_optimum, to_libsvm_string, LeastSquaresSpec, LogRegProblem, Problem,
    ProblemError, Shard, SolverOptions, SparseDataset,
};

fn mushrooms() -> Arc<SparseDataset> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mushrooms");
    Arc::new(load_libsvm(&path, None).unwrap())
}

#[test]
fn benchmark_files_have_published_shapes() {
    let m = mushrooms();
    assert_eq!((m.len(), m.dim()), (8124, 112));
    let a5a = load_libsvm(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/a5a"), Some(123)).unwrap();
    assert_eq!((a5a.len(), a5a.dim()), (6414, 123));
    assert!(m.labels().iter().all(|&l| l == 1.0 || l == -1.0));
}

#[test]
fn serialised_dataset_parses_back_identically() {
    let m = mushrooms();
    let text = to_libsvm_string(&m);
    let back = parse_libsvm(&text, Some(m.dim())).unwrap();
    assert_eq!(back.content_hash(back.len()), m.content_hash(m.len()));
    assert_eq!(to_libsvm_string(&back), text);
}

fn sparse_dataset() -> impl Strategy<Value = SparseDataset> {
    let row = (
        prop::bool::ANY,
        prop::collection::btree_map(0u32..40, -10.0f64..10.0, 0..8),
    );
    prop::collection::vec(row, 1..30).prop_map(|rows| {
        let rows = rows
            .into_iter()
            .map(|(pos, feats)| (if pos { 1.0 } else { -1.0 }, feats.into_iter().collect()))
            .collect();
        SparseDataset::from_rows(rows, Some(40)).unwrap()
    })
}

proptest! {
    #[test]
    fn libsvm_text_round_trip(ds in sparse_dataset()) {
        let text = to_libsvm_string(&ds);
        let back = parse_libsvm(&text, Some(40)).unwrap();
        prop_assert_eq!(back.content_hash(back.len()), ds.content_hash(ds.len()));
    }
}

#[test]
fn parser_rejects_bad_lines_with_numbers() {
    let err = parse_libsvm("1 1:0.5\n-1 3:1 2:1\n", None).unwrap_err();
    assert!(matches!(err, ProblemError::Parse { line: 2, .. }), "{err}");
    let err = parse_libsvm("1 0:1\n", None).unwrap_err();
    assert!(matches!(err, ProblemError::Parse { line: 1, .. }));
    let err = parse_libsvm("1 1:x\n", None).unwrap_err();
    assert!(matches!(err, ProblemError::Parse { line: 1, .. }));
    let err = parse_libsvm("1 1:1\n2 1:1\n3 1:1\n", None).unwrap_err();
    assert!(matches!(err, ProblemError::Parse { line: 3, .. }), "{err}");
}

#[test]
fn two_class_labels_map_to_plus_minus_one() {
    let ds = parse_libsvm("2 1:1\n1 2:1\n# comment\n\n2 3:1\n", None).unwrap();
    assert_eq!(ds.labels(), &[-1.0, 1.0, -1.0]);
    assert_eq!(ds.dim(), 3);
}

#[test]
fn partition_drops_the_tail() {
    let m = mushrooms();
    let shards = partition_heterogeneous(&m, 12).unwrap();
    assert_eq!(shards.len(), 12);
    assert!(shards.iter().all(|s| s.len() == 677));
    assert_eq!(shards[11].rows.end, 8124);
    assert!(partition_heterogeneous(&m, 0).is_err());
}

#[test]
fn local_objectives_average_to_the_global_one() {
    let m = mushrooms();
    let n = 7;
    let locals: Vec<LogRegProblem> =
        partition_heterogeneous(&m, n).unwrap().into_iter().map(|s| LogRegProblem::new(s, 6e-4).unwrap()).collect();
    let refs: Vec<&dyn Problem> = locals.iter().map(|p| p as &dyn Problem).collect();
    let used = locals.last().unwrap().shard().rows.end;
    let whole = LogRegProblem::new(Shard { worker_id: 0, data: Arc::clone(&m), rows: 0..used }, 6e-4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let x: Vec<f64> = (0..m.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let fg = global_value(&refs, &x).unwrap();
        let mut g = vec![0.0; m.dim()];
        let fw = whole.value_grad(&x, None, &mut g).unwrap();
        assert!((fg - fw).abs() <= 1e-13 * fw.abs(), "{fg} vs {fw}");
        let gg = global_gradient(&refs, &x).unwrap();
        for (a, b) in gg.iter().zip(&g) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        // value() and value_grad() agree bit for bit.
        assert_eq!(whole.value(&x).unwrap(), fw);
    }
}

fn check_batch_gradient(p: &dyn Problem, batch: &[usize], x: &[f64]) {
    let d = x.len();
    let mut g = vec![0.0; d];
    p.value_grad(x, Some(batch), &mut g).unwrap();
    let mut scratch = vec![0.0; d];
    let mut xp = x.to_vec();
    for j in 0..d {
        let h = 1e-5;
        xp[j] = x[j] + h;
        let fp = p.value_grad(&xp, Some(batch), &mut scratch).unwrap();
        xp[j] = x[j] - h;
        let fm = p.value_grad(&xp, Some(batch), &mut scratch).unwrap();
        xp[j] = x[j];
        let fd = (fp - fm) / (2.0 * h);
        assert!((fd - g[j]).abs() <= 1e-6 * (1.0 + g[j].abs()), "coordinate {j}: {fd} vs {}", g[j]);
    }
}

#[test]
fn minibatch_gradients_match_finite_differences() {
    let m = mushrooms();
    let lr = LogRegProblem::new(partition_heterogeneous(&m, 12).unwrap().remove(5), 6e-4).unwrap();
    let quad = make_quadratic(6, 20.0, Some((10, 1.5)), 8).unwrap();
    let ls = make_least_squares(&LeastSquaresSpec { dim: 12, workers: 3, spectrum_decay: 2.0, init_decay: 1.0, seed: 5 })
        .unwrap()
        .shards
        .remove(1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for p in [&lr as &dyn Problem, &quad, &ls] {
        for _ in 0..5 {
            let x: Vec<f64> = (0..p.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let batch: Vec<usize> = {
                let mut b: Vec<usize> = (0..3).map(|_| rng.gen_range(0..p.num_samples())).collect();
                b.sort_unstable();
                b
            };
            check_batch_gradient(p, &batch, &x);
        }
    }
}

#[test]
fn bad_calls_are_errors() {
    let quad = make_quadratic(3, 2.0, Some((4, 1.0)), 1).unwrap();
    let mut g = vec![0.0; 3];
    assert!(matches!(quad.value_grad(&[0.0; 2], None, &mut g), Err(ProblemError::DimensionMismatch { .. })));
    assert!(matches!(quad.value_grad(&[0.0; 3], Some(&[]), &mut g), Err(ProblemError::EmptyBatch)));
    assert!(matches!(quad.value_grad(&[0.0; 3], Some(&[9]), &mut g), Err(ProblemError::IndexOutOfRange { .. })));
}

#[test]
fn least_squares_interpolates() {
    let inst = make_least_squares(&LeastSquaresSpec { dim: 40, workers: 4, spectrum_decay: 2.0, init_decay: 1.0, seed: 9 })
        .unwrap();
    let mut g = vec![0.0; 40];
    for shard in &inst.shards {
        let f = shard.value_grad(&inst.x_star, None, &mut g).unwrap();
        assert!(f < 1e-25, "{f}");
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }
    assert_eq!(inst.smoothness, 1.0);
}

#[test]
fn reference_optimum_is_stationary_and_cached() {
    let m = mushrooms();
    let whole = LogRegProblem::new(Shard { worker_id: 0, data: Arc::clone(&m), rows: 0..m.len() }, 6e-4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let key = m.content_hash(m.len());
    let opt = reference_optimum(&whole, &key, 6e-4, Some(dir.path()), &SolverOptions::default()).unwrap();
    assert!(opt.grad_norm_sq < 1e-20, "{}", opt.grad_norm_sq);
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1);
    let again = reference_optimum(&whole, &key, 6e-4, Some(dir.path()), &SolverOptions { max_iters: 0, ..Default::default() })
        .unwrap();
    assert_eq!(again, opt);
}
