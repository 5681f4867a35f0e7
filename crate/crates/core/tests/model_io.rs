use rand::Rng;

use tempscale_core::model::{EncoderSpec, Model};
use tempscale_core::seed;
use tempscale_core::Tensor;

fn inputs(n: usize, len: usize, s: u64) -> Vec<f64> {
    let mut rng = seed::rng(s);
    (0..n * len).map(|_| rng.gen::<f64>()).collect()
}

/// Logits are exactly the feature/prototype inner products.
#[test]
fn logits_factor_through_prototypes() {
    for spec in [
        EncoderSpec::default_mlp(12),
        EncoderSpec::SmallCnn {
            input_shape: vec![1, 8, 8],
            channels: vec![4, 4],
            feature_dim: 6,
        },
    ] {
        let model = Model::init(spec.clone(), 5, 1).unwrap();
        let x = inputs(7, spec.input_len(), 2);
        let (features, logits) = model.forward_batch(&x, 7).unwrap();
        let protos = model.prototypes();
        assert_eq!(protos.len(), 5);
        for i in 0..7 {
            let f = features.row(i);
            for (j, w) in protos.iter().enumerate() {
                let dot: f64 = f.iter().zip(w).map(|(a, b)| a * b).sum();
                assert!((logits.row(i)[j] - dot).abs() <= 1e-12 * dot.abs().max(1.0));
            }
        }
        assert_eq!(model.head(&features).unwrap(), logits);
    }
}

#[test]
fn save_load_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, spec) in [EncoderSpec::default_mlp(20), EncoderSpec::default_cnn(vec![1, 12, 12])]
        .into_iter()
        .enumerate()
    {
        let model = Model::init(spec.clone(), 10, 42 + i as u64).unwrap();
        let path = dir.path().join(format!("m{i}.json"));
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.spec(), model.spec());
        assert_eq!(back.metadata, model.metadata);
        let x = inputs(10, spec.input_len(), 7);
        let a = model.forward_batch(&x, 10).unwrap();
        let b = back.forward_batch(&x, 10).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.1), bits(&b.1));
        assert_eq!(bits(&a.0), bits(&b.0));
    }
}

#[test]
fn load_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, b"{\"format\":\"nope\"}").unwrap();
    assert!(Model::load(&path).is_err());
    assert!(Model::load(&dir.path().join("missing.json")).is_err());
}

#[test]
fn initialization_is_seeded() {
    let a = Model::init(EncoderSpec::default_mlp(8), 3, 5).unwrap();
    let b = Model::init(EncoderSpec::default_mlp(8), 3, 5).unwrap();
    let c = Model::init(EncoderSpec::default_mlp(8), 3, 6).unwrap();
    let x = inputs(1, 8, 0);
    assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    assert_ne!(a.forward(&x).unwrap(), c.forward(&x).unwrap());
}
