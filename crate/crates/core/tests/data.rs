use fedcc::data::{dirichlet_partition, iid_partition, load_idx, synthetic_gaussian, write_idx, Dataset, Partition};
use fedcc::nn::{forward, init_model, train_step, AdamState, Architecture, Tensor};
use fedcc::Error;
use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

fn fmnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fmnist-subset")
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::fast());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

fn assert_disjoint_cover(p: &Partition, n: usize) {
    let mut seen = BTreeSet::new();
    for client in &p.clients {
        assert!(!client.is_empty());
        for &i in client {
            assert!(i < n);
            assert!(seen.insert(i), "index {i} assigned twice");
        }
    }
    assert_eq!(seen.len(), n);
}

fn balanced_labels(n_classes: usize, per_class: usize) -> Vec<usize> {
    (0..n_classes * per_class).map(|i| i % n_classes).collect()
}

#[test]
fn fmnist_subset_loads() {
    let dir = fmnist_dir();
    let train = load_idx(dir.join("train-images-idx3-ubyte.gz"), dir.join("train-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(train.images().shape(), &[2000, 1, 28, 28]);
    assert_eq!(train.n_classes(), 10);
    assert_eq!(train.class_counts(), vec![200; 10]);
    assert!(train.images().data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    let test = load_idx(dir.join("t10k-images-idx3-ubyte.gz"), dir.join("t10k-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(test.images().shape(), &[1000, 1, 28, 28]);
    assert_eq!(test.class_counts(), vec![100; 10]);
}

#[test]
fn hand_built_fixture_recovers_exact_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let pixels = [0u8, 255, 51, 102, 7, 8, 9, 10];
    let img = idx_bytes(0x803, &[2, 2, 2], &pixels);
    let lab = idx_bytes(0x801, &[2], &[3, 1]);
    for (name, transform) in [("plain", false), ("gzip", true)] {
        let ip = dir.path().join(format!("{name}-img"));
        let lp = dir.path().join(format!("{name}-lab"));
        std::fs::write(&ip, if transform { gz(&img) } else { img.clone() }).unwrap();
        std::fs::write(&lp, if transform { gz(&lab) } else { lab.clone() }).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.images().shape(), &[2, 1, 2, 2]);
        let expected: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
        assert_eq!(d.images().data(), &expected[..]);
        assert_eq!(d.labels(), &[3, 1]);
        assert_eq!(d.n_classes(), 4);
    }
}

#[test]
fn malformed_idx_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, bytes: Vec<u8>| {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    };
    let img = write("img", idx_bytes(0x803, &[2, 1, 1], &[1, 2]));
    let lab = write("lab", idx_bytes(0x801, &[2], &[0, 1]));
    assert!(load_idx(&img, &lab).is_ok());

    let wrong_magic = write("wm", idx_bytes(0x803, &[2, 1, 1], &[0, 1]));
    assert!(matches!(load_idx(&img, &wrong_magic), Err(Error::Format(_))));
    let truncated = write("tr", idx_bytes(0x803, &[3, 1, 1], &[1, 2]));
    assert!(matches!(load_idx(&truncated, &lab), Err(Error::Format(_))));
    let short_header = write("sh", vec![0, 0, 8]);
    assert!(matches!(load_idx(&short_header, &lab), Err(Error::Format(_))));
    let three_labels = write("l3", idx_bytes(0x801, &[3], &[0, 1, 1]));
    assert!(matches!(load_idx(&img, &three_labels), Err(Error::Format(_))));
    assert!(matches!(load_idx(dir.path().join("missing"), &lab), Err(Error::Io { .. })));
}

#[test]
fn dirichlet_covers_fmnist_subset_and_full_size_labels() {
    let dir = fmnist_dir();
    let train = load_idx(dir.join("train-images-idx3-ubyte.gz"), dir.join("train-labels-idx1-ubyte.gz")).unwrap();
    for seed in 0..3 {
        let p = dirichlet_partition(train.labels(), 10, 0.2, seed).unwrap();
        assert_disjoint_cover(&p, train.len());
    }
    let labels = balanced_labels(10, 6000);
    let p = dirichlet_partition(&labels, 10, 0.2, 0).unwrap();
    assert_disjoint_cover(&p, 60000);
}

#[test]
fn huge_alpha_matches_global_histogram() {
    let labels = balanced_labels(10, 6000);
    let p = dirichlet_partition(&labels, 10, 1e6, 1).unwrap();
    for client in &p.clients {
        let mut h = [0usize; 10];
        for &i in client {
            h[labels[i]] += 1;
        }
        for count in h {
            let frac = count as f64 / client.len() as f64;
            assert!((frac - 0.1).abs() <= 0.005, "class fraction {frac}");
        }
    }
}

#[test]
fn tiny_alpha_concentrates_clients_on_one_class() {
    let labels = balanced_labels(10, 600);
    for seed in 0..5 {
        let p = dirichlet_partition(&labels, 10, 0.01, seed).unwrap();
        assert_disjoint_cover(&p, labels.len());
        let best = p
            .clients
            .iter()
            .map(|c| {
                let mut h = [0usize; 10];
                c.iter().for_each(|&i| h[labels[i]] += 1);
                *h.iter().max().unwrap() as f64 / c.len() as f64
            })
            .fold(0.0, f64::max);
        assert!(best >= 0.8, "seed {seed}: max single-class share {best}");
    }
}

#[test]
fn dirichlet_is_seeded_and_repairs_empty_clients() {
    let labels = balanced_labels(3, 4);
    let a = dirichlet_partition(&labels, 12, 0.05, 9).unwrap();
    assert_eq!(a, dirichlet_partition(&labels, 12, 0.05, 9).unwrap());
    assert_disjoint_cover(&a, 12);
    assert!(a.sizes().iter().all(|&s| s == 1));
    assert!(dirichlet_partition(&labels, 13, 0.5, 0).is_err());
    assert!(dirichlet_partition(&labels, 2, 0.0, 0).is_err());
    assert!(dirichlet_partition(&labels, 0, 1.0, 0).is_err());
}

#[test]
fn iid_sizes_and_remainder_rule() {
    let p = iid_partition(&balanced_labels(10, 10), 10, 0).unwrap();
    assert!(p.sizes().iter().all(|&s| s == 10));
    let labels: Vec<usize> = (0..101).map(|i| i % 7).collect();
    let p = iid_partition(&labels, 10, 3).unwrap();
    let mut sizes = p.sizes();
    sizes.sort_unstable();
    assert_eq!(sizes, [vec![10; 9], vec![11]].concat());
    assert_disjoint_cover(&p, 101);
}

#[test]
fn iid_class_histograms_are_balanced() {
    let labels = balanced_labels(10, 37);
    let p = iid_partition(&labels, 7, 5).unwrap();
    for c in 0..10 {
        let counts: Vec<usize> = p
            .clients
            .iter()
            .map(|cl| cl.iter().filter(|&&i| labels[i] == c).count())
            .collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "class {c}: {counts:?}");
    }
}

fn train_linear(train: &Dataset, steps: u64) -> (Architecture, fedcc::nn::ModelParams) {
    let [c, h, w] = train.sample_shape();
    let arch = Architecture::mlp([c, h, w], &[], train.n_classes()).unwrap();
    let mut params = init_model(&arch, 0);
    let mut adam = AdamState::new(&params, 0.01);
    let all: Vec<usize> = (0..train.len()).collect();
    let (x, y) = train.batch(&all);
    for s in 0..steps {
        train_step(&arch, &mut params, &mut adam, &x, &y, s).unwrap();
    }
    (arch, params)
}

fn accuracy(arch: &Architecture, params: &fedcc::nn::ModelParams, data: &Dataset) -> f64 {
    let all: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&all);
    let pred = forward(arch, params, &x, false, 0).unwrap().argmax_rows();
    pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

#[test]
fn synthetic_low_spread_is_linearly_separable() {
    let d = synthetic_gaussian(2, 8, 50, 0.1, 0).unwrap();
    assert_eq!(d.images().shape(), &[100, 1, 8, 1]);
    let (arch, params) = train_linear(&d, 300);
    assert!(accuracy(&arch, &params, &d) >= 0.99);
    assert_eq!(d, synthetic_gaussian(2, 8, 50, 0.1, 0).unwrap());
    assert_ne!(d, synthetic_gaussian(2, 8, 50, 0.1, 1).unwrap());
}

#[test]
fn synthetic_high_spread_caps_held_out_accuracy() {
    let train = synthetic_gaussian(2, 8, 500, 10.0, 0).unwrap();
    let test = synthetic_gaussian(2, 8, 500, 10.0, 1).unwrap();
    let (arch, params) = train_linear(&train, 300);
    let learned = accuracy(&arch, &params, &test);
    assert!(learned <= 0.65, "learned model held-out accuracy {learned}");
    // The Bayes-optimal rule for equal isotropic covariances is nearest mean.
    let bayes = (0..test.len())
        .filter(|&i| {
            let x = test.image(i);
            usize::from(x[1] > x[0]) == test.labels()[i]
        })
        .count() as f64
        / test.len() as f64;
    assert!(bayes <= 0.65, "nearest-mean accuracy {bayes}");
}

#[test]
fn synthetic_rejects_bad_arguments() {
    assert!(synthetic_gaussian(2, 8, 5, 0.0, 0).is_err());
    assert!(synthetic_gaussian(4, 3, 5, 1.0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_round_trip(n in 1usize..6, h in 1usize..5, w in 1usize..5, seed in any::<u64>(), gzip in any::<bool>()) {
        let mut state = seed;
        let mut next = || { state = fedcc::rng::mix64(state.wrapping_add(1)); state };
        let pixels: Vec<f32> = (0..n * h * w).map(|_| (next() % 256) as f32 / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|_| (next() % 10) as usize).collect();
        let k = labels.iter().max().unwrap() + 1;
        let d = Dataset::new(Tensor::new(vec![n, 1, h, w], pixels).unwrap(), labels, k).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ext = if gzip { ".gz" } else { "" };
        let (ip, lp) = (dir.path().join(format!("i{ext}")), dir.path().join(format!("l{ext}")));
        write_idx(&d, &ip, &lp).unwrap();
        prop_assert_eq!(load_idx(&ip, &lp).unwrap(), d);
    }

    #[test]
    fn partitions_are_disjoint_non_empty_covers(
        labels in proptest::collection::vec(0usize..5, 1..200),
        k in 1usize..12,
        alpha in 0.01f64..10.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(k <= labels.len());
        assert_disjoint_cover(&dirichlet_partition(&labels, k, alpha, seed).unwrap(), labels.len());
        let p = iid_partition(&labels, k, seed).unwrap();
        assert_disjoint_cover(&p, labels.len());
        let sizes = p.sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
