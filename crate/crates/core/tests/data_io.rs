use tempscale_core::data::{batches, gen_blob_images_split, gen_blobs, gen_blobs_split, load_idx, parse_idx, BlobSpec};
use tempscale_core::model::EncoderSpec;
use tempscale_core::softmax::Temperature;
use tempscale_core::train::{evaluate, train_standard, TrainConfig};
use tempscale_core::Exec;

fn idx_images(n: usize, rows: usize, cols: usize) -> Vec<u8> {
    let mut b = Vec::with_capacity(16 + n * rows * cols);
    for v in [0x0803u32, n as u32, rows as u32, cols as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend((0..n * rows * cols).map(|i| (i * 7 % 256) as u8));
    b
}

fn idx_labels(n: usize) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + n);
    b.extend_from_slice(&0x0801u32.to_be_bytes());
    b.extend_from_slice(&(n as u32).to_be_bytes());
    b.extend((0..n).map(|i| (i % 10) as u8));
    b
}

#[test]
fn loads_a_test_set_shaped_idx_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (
        dir.path().join("t10k-images-idx3-ubyte"),
        dir.path().join("t10k-labels-idx1-ubyte"),
    );
    std::fs::write(&img, idx_images(10_000, 28, 28)).unwrap();
    std::fs::write(&lab, idx_labels(10_000)).unwrap();
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.sample_shape(), &[28, 28]);
    assert_eq!(ds.classes(), 10);
    assert_eq!(ds.label(9_999), 9);
    assert_eq!(ds.sample(0)[1], 7.0 / 255.0);
    assert!(ds.raw().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn idx_errors_are_located() {
    let img = idx_images(4, 2, 2);
    let lab = idx_labels(4);
    let mut bad = img.clone();
    bad[3] = 0x01;
    assert!(parse_idx(&bad, &lab).is_err());
    assert!(parse_idx(&img[..20], &lab).is_err());
    assert!(parse_idx(&img, &idx_labels(3)).is_err());
    assert!(parse_idx(&img, &lab).is_ok());
}

fn spec(classes: usize, separation: f64, noise: f64, seed: u64) -> BlobSpec {
    BlobSpec {
        classes,
        shape: vec![6],
        per_class: 50,
        test_per_class: 20,
        separation,
        noise,
        seed,
    }
}

#[test]
fn blobs_are_in_range_and_deterministic() {
    let s = spec(4, 0.3, 0.2, 11);
    let (a, at) = gen_blobs_split(&s).unwrap();
    let (b, _) = gen_blobs_split(&s).unwrap();
    assert_eq!(a.raw(), b.raw());
    assert_eq!(a.labels(), b.labels());
    assert_eq!(a.raw(), gen_blobs(&s).unwrap().raw());
    assert_eq!((a.len(), at.len()), (200, 80));
    assert!(a.raw().iter().chain(at.raw()).all(|v| (0.0..=1.0).contains(v)));
    for y in 0..4 {
        assert_eq!(a.labels().iter().filter(|&&l| l == y).count(), 50);
    }
    let c = gen_blobs(&spec(4, 0.3, 0.2, 12)).unwrap();
    assert_ne!(a.raw(), c.raw());

    let mut img = s.clone();
    img.shape = vec![1, 5, 5];
    let (tr, _) = gen_blob_images_split(&img).unwrap();
    assert_eq!(tr.sample_shape(), &[1, 5, 5]);
    assert!(tr.raw().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn impossible_separation_is_reported() {
    assert!(gen_blobs(&spec(10, 5.0, 0.1, 0)).is_err());
}

#[test]
fn batches_partition_the_indices() {
    let b = batches(103, 10, 4, true);
    assert_eq!(b.len(), 11);
    let mut all: Vec<usize> = b.concat();
    assert_ne!(all, (0..103).collect::<Vec<_>>());
    all.sort_unstable();
    assert_eq!(all, (0..103).collect::<Vec<_>>());
    assert_eq!(batches(5, 2, 0, false), vec![vec![0, 1], vec![2, 3], vec![4]]);
}

/// Plain logistic regression fitted by full-batch gradient descent: an
/// oracle that the two classes are linearly separable.
fn logistic_fit_accuracy(x: &[f64], y: &[usize], d: usize) -> f64 {
    let n = y.len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..2000 {
        let mut g = vec![0.0; d + 1];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            let z = w[d] + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - y[i] as f64;
            for k in 0..d {
                g[k] += r * xi[k];
            }
            g[d] += r;
        }
        for k in 0..=d {
            w[k] -= 2.0 * g[k] / n as f64;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let xi = &x[i * d..(i + 1) * d];
            let z = w[d] + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            usize::from(z > 0.0) == y[i]
        })
        .count();
    correct as f64 / n as f64
}

#[test]
fn separable_two_class_blobs_are_learned() {
    let s = spec(2, 0.8, 0.05, 3);
    let (train, test) = gen_blobs_split(&s).unwrap();
    assert!(logistic_fit_accuracy(test.raw(), test.labels(), 6) >= 0.99);

    let mut cfg = TrainConfig::new(Temperature::ONE, EncoderSpec::default_mlp(6), 20, 9);
    cfg.lr_max = 0.05;
    cfg.batch_size = 16;
    let (model, records) = train_standard(&cfg, &train, &test, Exec::Sequential).unwrap();
    assert_eq!(records.len(), 20);
    assert!(evaluate(&model, &test, Exec::Sequential).unwrap().accuracy >= 0.99);
}
