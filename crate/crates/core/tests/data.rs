use linklearn::data::{
    apply_task_order, decode_clds, encode_clds, gen_synthetic, gen_synthetic_parts, read_clds, split_by_class,
    write_clds, Benchmark, Dataset, SyntheticSpec,
};
use linklearn::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: 6,
        samples_per_class: 10,
        height: 6,
        width: 6,
        channels: 1,
        rank: 4,
        prototype_scale: 0.5,
        noise: 0.2,
        seed,
    }
}

#[test]
fn prototypes_lie_in_the_basis_span() {
    let s = spec(7);
    let parts = gen_synthetic_parts(&s).unwrap();
    let px = s.pixels();
    // Columns of `b` are basis vectors; solve min ||b·w − p|| per prototype.
    let b = DMatrix::from_fn(px, s.rank, |i, r| parts.basis[r * px + i]);
    let svd = b.clone().svd(true, true);
    for c in 0..s.n_classes {
        let p = DVector::from_column_slice(&parts.prototypes[c * px..(c + 1) * px]);
        let w = svd.solve(&p, 1e-12).unwrap();
        let residual = (&b * w - &p).norm();
        assert!(residual < 1e-8, "class {c}: residual {residual}");
    }
}

#[test]
fn noiseless_samples_equal_their_prototype() {
    let mut s = spec(2);
    s.noise = 0.0;
    let parts = gen_synthetic_parts(&s).unwrap();
    let px = s.pixels();
    for (i, &l) in parts.dataset.labels.iter().enumerate() {
        for (a, b) in parts.dataset.image(i).iter().zip(&parts.prototypes[l * px..(l + 1) * px]) {
            assert_eq!(*a, *b as f32);
        }
    }
}

#[test]
fn default_benchmark_shape() {
    let bench = Benchmark::synth_10_5(0);
    let (base, continual) = bench.generate().unwrap();
    assert_eq!(base.n_classes, 4);
    assert_eq!(continual.n_classes, 10);
    let split = bench.split(&continual).unwrap();
    assert_eq!(split.len(), 5);
    for task in &split.tasks {
        assert_eq!(task.train.class_counts(), vec![175, 175]);
        assert_eq!(task.val.class_counts(), vec![25, 25]);
        assert_eq!(task.test.class_counts(), vec![50, 50]);
    }
}

#[test]
fn split_counts_and_disjointness() {
    let ds = gen_synthetic(&spec(1)).unwrap();
    let split = split_by_class(&ds, 3, 2).unwrap();
    let mut seen = Vec::new();
    for task in &split.tasks {
        assert_eq!(task.train.len() + task.val.len() + task.test.len(), 20);
        assert!(task.train.labels.iter().all(|&l| l < 2));
        for c in &task.classes {
            assert!(!seen.contains(c));
            seen.push(*c);
        }
    }
    assert!(matches!(split_by_class(&ds, 4, 2), Err(Error::Config(_))));
}

#[test]
fn clds_files_roundtrip() {
    let ds = gen_synthetic(&spec(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.clds");
    write_clds(&ds, &path).unwrap();
    assert_eq!(read_clds(&path).unwrap(), ds);
    assert_eq!(std::fs::read(&path).unwrap(), encode_clds(&ds).unwrap());
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..4, 1usize..4, 1usize..3, 1usize..5, 0usize..6).prop_flat_map(|(h, w, c, k, n)| {
        (
            proptest::collection::vec(-1e3f32..1e3, n * h * w * c),
            proptest::collection::vec(0..k, n),
        )
            .prop_map(move |(images, labels)| Dataset::new((h, w, c), k, images, labels).unwrap())
    })
}

proptest! {
    #[test]
    fn clds_bytes_roundtrip(ds in dataset_strategy()) {
        let bytes = encode_clds(&ds).unwrap();
        prop_assert_eq!(bytes.len(), 18 + ds.images.len() * 4 + ds.len() * 2);
        let back = decode_clds(&bytes).unwrap();
        prop_assert_eq!(encode_clds(&back).unwrap(), bytes);
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn truncated_clds_is_rejected(ds in dataset_strategy(), cut in 1usize..40) {
        let bytes = encode_clds(&ds).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_clds(&bytes[..keep]).is_err());
    }

    #[test]
    fn order_then_inverse_is_identity(perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let ds = gen_synthetic(&spec(4)).unwrap();
        let split = split_by_class(&ds, 5, 1).unwrap();
        let permuted = apply_task_order(&split, &perm).unwrap();
        prop_assert_eq!(permuted.order(), perm.clone());
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        prop_assert_eq!(apply_task_order(&permuted, &inverse).unwrap(), split);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        prop_assert_eq!(gen_synthetic(&spec(seed)).unwrap(), gen_synthetic(&spec(seed)).unwrap());
    }
}
