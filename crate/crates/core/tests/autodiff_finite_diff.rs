//! Reverse-mode gradients of random networks against central differences.

use rand::Rng;
use rand_distr::StandardNormal;

use tempscale_core::autodiff::{finite_diff_grad, max_rel_err, ParamId, ParameterStore, Tape, Var};
use tempscale_core::model::{EncoderSpec, Model, ParamMode};
use tempscale_core::seed;
use tempscale_core::{Result, Tensor};

struct Net {
    store: ParameterStore,
    layers: Vec<(ParamId, ParamId)>,
    input: Tensor,
    /// Coefficients of the scalar read-out `Σ c ⊙ output`.
    readout: Tensor,
    labels: Vec<usize>,
    use_ce: bool,
}

fn normal(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_net(seed_value: u64) -> Net {
    let mut rng = seed::rng(seed_value);
    let depth = rng.gen_range(1..=3);
    let batch = rng.gen_range(1..=4);
    let mut widths = vec![rng.gen_range(1..=8)];
    for _ in 0..depth {
        widths.push(rng.gen_range(2..=32));
    }
    let mut store = ParameterStore::new();
    let mut layers = Vec::new();
    for (i, w) in widths.windows(2).enumerate() {
        let wt = Tensor::new(
            vec![w[0], w[1]],
            normal(&mut rng, w[0] * w[1], (2.0 / w[0] as f64).sqrt()),
        )
        .unwrap();
        let b = Tensor::vector(normal(&mut rng, w[1], 0.1));
        layers.push((
            store.insert(format!("w{i}"), wt).unwrap(),
            store.insert(format!("b{i}"), b).unwrap(),
        ));
    }
    let out = *widths.last().unwrap();
    Net {
        store,
        layers,
        input: Tensor::new(vec![batch, widths[0]], normal(&mut rng, batch * widths[0], 1.0)).unwrap(),
        readout: Tensor::new(vec![batch, out], normal(&mut rng, batch * out, 1.0)).unwrap(),
        labels: (0..batch).map(|_| rng.gen_range(0..out)).collect(),
        use_ce: rng.gen_bool(0.5),
    }
}

/// Builds the loss on a fresh tape; `frozen` records parameters as
/// constants so the store is not needed afterwards.
fn build(net: &Net, store: &ParameterStore, input: &Tensor, tape: &mut Tape) -> Result<(Var, Var)> {
    let x = tape.input(input.clone());
    let mut h = x;
    for (i, &(w, b)) in net.layers.iter().enumerate() {
        let wv = tape.param(store, w);
        let bv = tape.param(store, b);
        let z = tape.matmul(h, wv)?;
        h = tape.add_bias(z, bv)?;
        if i + 1 < net.layers.len() {
            h = tape.relu(h);
        }
    }
    let loss = if net.use_ce && net.readout.shape()[1] >= 2 {
        tape.cross_entropy(h, &net.labels, 0.7)?
    } else {
        let weighted = tape.mul_const(h, net.readout.clone())?;
        tape.sum(weighted)
    };
    Ok((x, loss))
}

fn loss_at(net: &Net, store: &ParameterStore, input: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, l) = build(net, store, input, &mut tape)?;
    Ok(tape.value(l).item())
}

#[test]
fn random_mlps_match_finite_differences() {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for s in 0..100 {
        let mut net = random_net(seed::derive_named(s, "fd-mlp"));
        let mut tape = Tape::new();
        let mut store = net.store.clone();
        let (x, loss) = build(&net, &store, &net.input, &mut tape).unwrap();
        let grads = tape.backward(loss, &mut store).unwrap();

        let gx = grads.get_or_zeros(&tape, x);
        let fx = finite_diff_grad(|p| loss_at(&net, &net.store, p), &net.input, h).unwrap();
        worst = worst.max(max_rel_err(gx.data(), fx.data()));

        let ids: Vec<_> = net.store.ids().collect();
        for id in ids {
            let point = net.store.value(id).clone();
            let probe_net = &mut net;
            let fd = finite_diff_grad(
                |p| {
                    let mut st = probe_net.store.clone();
                    *st.value_mut(id) = p.clone();
                    loss_at(probe_net, &st, &probe_net.input)
                },
                &point,
                h,
            )
            .unwrap();
            let e = max_rel_err(store.grad(id).data(), fd.data());
            assert!(e <= 1e-6, "seed {s}, {}: relative error {e:e}", net.store.name(id));
            worst = worst.max(e);
        }
    }
    assert!(worst <= 1e-6, "worst {worst:e}");
}

#[test]
fn tape_replay_is_bit_identical() {
    for s in 0..10 {
        let net = random_net(s);
        let run = || {
            let mut store = net.store.clone();
            let mut tape = Tape::new();
            let (x, loss) = build(&net, &store, &net.input, &mut tape).unwrap();
            let g = tape.backward(loss, &mut store).unwrap();
            let grads: Vec<Vec<f64>> = store.ids().map(|id| store.grad(id).data().to_vec()).collect();
            (
                tape.value(loss).item().to_bits(),
                g.get_or_zeros(&tape, x).into_data(),
                grads,
            )
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn small_cnn_matches_finite_differences() {
    let spec = EncoderSpec::SmallCnn {
        input_shape: vec![2, 6, 6],
        channels: vec![3, 4],
        feature_dim: 5,
    };
    let model = Model::init(spec, 4, 9).unwrap();
    let mut rng = seed::rng(3);
    let input = Tensor::new(vec![2, 2, 6, 6], (0..144).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let labels = [1, 3];
    let loss_of = |m: &Model, x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = m.forward_tape(&mut tape, xv, ParamMode::Frozen)?;
        let l = tape.cross_entropy(out.logits, &labels, 2.0)?;
        Ok(tape.value(l).item())
    };

    let mut trained = model.clone();
    let mut tape = Tape::new();
    let xv = tape.input(input.clone());
    let out = trained.forward_tape(&mut tape, xv, ParamMode::Trainable).unwrap();
    let l = tape.cross_entropy(out.logits, &labels, 2.0).unwrap();
    let g = tape.backward(l, trained.params_mut()).unwrap();

    let fx = finite_diff_grad(|p| loss_of(&model, p), &input, 1e-5).unwrap();
    assert!(max_rel_err(g.get_or_zeros(&tape, xv).data(), fx.data()) <= 1e-6);
    for id in model.params().ids() {
        let fd = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                *m.params_mut().value_mut(id) = p.clone();
                loss_of(&m, &input)
            },
            model.params().value(id),
            1e-5,
        )
        .unwrap();
        let e = max_rel_err(trained.params().grad(id).data(), fd.data());
        assert!(e <= 1e-6, "{}: {e:e}", model.params().name(id));
    }
}
