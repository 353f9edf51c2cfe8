//! Reverse-mode gradients of every op and layer kind against central
//! differences on micro shapes.

use maldi_core::rng::{stream, Rng};
use maldi_core::tensor::gradcheck::{check, check_all, DEFAULT_STEP};
use maldi_core::tensor::{sample_gaussian, Array, Graph, Init, Layer, LayerSpec, Mode, ParamStore, Var};
use maldi_core::Result;

const TOL: f64 = 1e-4;

/// Contracts `v` against a fixed random tensor so every entry matters.
fn probe(g: &mut Graph, v: Var, salt: &str) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = sample_gaussian(&shape, &mut stream(99, salt));
    let w = g.input(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn rand_param(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut Rng) -> maldi_core::tensor::ParamId {
    store.add(name, sample_gaussian(shape, rng))
}

fn assert_ok(what: &str, r: maldi_core::tensor::gradcheck::GradCheckReport) {
    assert!(r.entries_checked > 0, "{what}: nothing checked");
    assert!(r.max_rel_err < TOL, "{what}: rel err {} at {}", r.max_rel_err, r.worst_param);
}

fn layer_case(spec: LayerSpec, input_shape: &[usize], mode: Mode) {
    let mut rng = stream(1, "layer-case");
    let mut store = ParamStore::new();
    let layer = Layer::new(spec.clone(), "l", Init::He, &mut store, &mut rng).unwrap();
    let xid = rand_param(&mut store, "x", input_shape, &mut rng);
    let r = check_all(&store, mode, 40, |g| {
        let x = g.param(xid);
        let y = layer.forward(g, x)?;
        probe(g, y, "layer")
    })
    .unwrap();
    assert_ok(&format!("{spec:?}"), r);
}

#[test]
fn dense() {
    layer_case(LayerSpec::Dense { inputs: 5, units: 3 }, &[4, 5], Mode::Eval);
}

#[test]
fn conv1d_kernels_and_strides() {
    for kernel in [1, 3, 4, 5] {
        for stride in [1, 2] {
            layer_case(
                LayerSpec::Conv1d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel,
                    stride,
                },
                &[2, 2, 9],
                Mode::Eval,
            );
        }
    }
}

#[test]
fn upsample_conv() {
    layer_case(
        LayerSpec::UpsampleConv1d {
            in_channels: 3,
            out_channels: 2,
            kernel: 4,
        },
        &[2, 3, 5],
        Mode::Eval,
    );
}

#[test]
fn pooling_and_activations() {
    for spec in [LayerSpec::Maxpool1d, LayerSpec::Relu, LayerSpec::LeakyRelu, LayerSpec::Sigmoid] {
        layer_case(spec, &[2, 3, 8], Mode::Eval);
    }
}

#[test]
fn groupnorm() {
    layer_case(LayerSpec::Groupnorm { channels: 4, groups: 2 }, &[2, 4, 6], Mode::Eval);
    layer_case(LayerSpec::Groupnorm { channels: 4, groups: 4 }, &[3, 4, 5], Mode::Eval);
}

#[test]
fn dropout_train_mode() {
    layer_case(LayerSpec::Dropout { p: 0.3 }, &[3, 7], Mode::Train);
}

#[test]
fn embedding_lookup() {
    let mut rng = stream(2, "emb");
    let mut store = ParamStore::new();
    let layer = Layer::new(LayerSpec::Embedding { vocab: 4, dim: 3 }, "e", Init::Xavier, &mut store, &mut rng).unwrap();
    let r = check_all(&store, Mode::Eval, 20, |g| {
        let e = layer.lookup(g, &[2, 0, 2, 3])?;
        probe(g, e, "emb")
    })
    .unwrap();
    assert_ok("embedding", r);
}

#[test]
fn elementwise_ops() {
    let mut rng = stream(3, "elem");
    let mut store = ParamStore::new();
    let a = rand_param(&mut store, "a", &[3, 4], &mut rng);
    let b = rand_param(&mut store, "b", &[3, 4], &mut rng);
    let r = check_all(&store, Mode::Eval, 12, |g| {
        let (a, b) = (g.param(a), g.param(b));
        let s = g.add(a, b)?;
        let d = g.sub(s, b)?;
        let m = g.mul(d, b)?;
        let e = g.exp(m);
        let sq = g.square(b);
        let pos = g.affine(sq, 1.0, 0.5);
        let l = g.log(pos);
        let c = g.clamp(a, -0.5, 0.5);
        let sum = g.add(e, l)?;
        let sum = g.add(sum, c)?;
        let mean = g.mean(sum);
        let tot = probe(g, sum, "elem")?;
        g.add(tot, mean)
    })
    .unwrap();
    assert_ok("elementwise", r);
}

#[test]
fn structural_ops() {
    let mut rng = stream(4, "struct");
    let mut store = ParamStore::new();
    let x = rand_param(&mut store, "x", &[2, 3, 5], &mut rng);
    let y = rand_param(&mut store, "y", &[2, 2, 5], &mut rng);
    let sc = rand_param(&mut store, "scale", &[2, 3], &mut rng);
    let sh = rand_param(&mut store, "shift", &[2, 3], &mut rng);
    let v = rand_param(&mut store, "v", &[2, 4], &mut rng);
    let pos = rand_param(&mut store, "pos", &[12, 6], &mut rng);
    let r = check_all(&store, Mode::Eval, 30, |g| {
        let (x, y, sc, sh, v, pos) = (g.param(x), g.param(y), g.param(sc), g.param(sh), g.param(v), g.param(pos));
        let cat = g.concat(&[x, y], 1)?;
        let aff = g.channel_affine(x, sc, sh)?;
        let bl = g.broadcast_len(v, 5)?;
        let all = g.concat(&[cat, aff, bl], 1)?;
        let padded = g.pad_to(all, 8)?;
        let cropped = g.crop(padded, 6)?;
        let flat = g.reshape(cropped, &[2, 12 * 6])?;
        let cat0 = g.concat(&[flat, flat], 0)?;
        let shifted = g.add_batch(cropped, pos)?;
        let sh = probe(g, shifted, "add-batch")?;
        let tot = probe(g, cat0, "struct")?;
        g.add(tot, sh)
    })
    .unwrap();
    assert_ok("structural", r);
}

#[test]
fn softmax_cross_entropy() {
    let mut rng = stream(5, "ce");
    let mut store = ParamStore::new();
    let logits = rand_param(&mut store, "logits", &[4, 3], &mut rng);
    let r = check_all(&store, Mode::Eval, 12, |g| {
        let l = g.param(logits);
        g.softmax_cross_entropy(l, &[0, 2, 1, 2])
    })
    .unwrap();
    assert_ok("softmax cross-entropy", r);
}

#[test]
fn input_gradient_via_tracked_input() {
    let mut rng = stream(6, "tracked");
    let mut store = ParamStore::new();
    let layer = Layer::new(LayerSpec::Dense { inputs: 3, units: 2 }, "d", Init::He, &mut store, &mut rng).unwrap();
    let x = Array::new(vec![2, 3], vec![0.1, -0.4, 0.7, 1.2, 0.0, -0.3]).unwrap();
    let mut g = Graph::new(&store, Mode::Eval);
    let xv = g.tracked_input(x.clone());
    let y = layer.forward(&mut g, xv).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let dx = grads.wrt(xv).unwrap();
    let w = store.get(layer.params()[0]);
    // d/dx sum(x W + b) = row sums of W
    for r in 0..2 {
        for i in 0..3 {
            let want: f64 = (0..2).map(|o| w.data()[i * 2 + o]).sum();
            assert!((dx.data()[r * 3 + i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn small_conv_net_end_to_end() {
    let mut rng = stream(7, "net");
    let mut store = ParamStore::new();
    let specs = [
        LayerSpec::Conv1d {
            in_channels: 1,
            out_channels: 4,
            kernel: 4,
            stride: 1,
        },
        LayerSpec::Groupnorm { channels: 4, groups: 2 },
        LayerSpec::Relu,
        LayerSpec::Maxpool1d,
        LayerSpec::UpsampleConv1d {
            in_channels: 4,
            out_channels: 1,
            kernel: 5,
        },
        LayerSpec::Sigmoid,
    ];
    let layers: Vec<Layer> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| Layer::new(s.clone(), &format!("l{i}"), Init::He, &mut store, &mut rng).unwrap())
        .collect();
    let x = sample_gaussian(&[2, 1, 8], &mut rng);
    let ids: Vec<_> = store.ids().collect();
    let r = check(&store, &ids, Mode::Eval, DEFAULT_STEP, 16, |g| {
        let xv = g.input(x.clone());
        let y = maldi_core::tensor::forward_seq(&layers, g, xv)?;
        probe(g, y, "net")
    })
    .unwrap();
    assert_ok("conv net", r);
}

#[test]
fn batch_std() {
    let mut rng = stream(6, "bstd");
    let mut store = ParamStore::new();
    let x = rand_param(&mut store, "x", &[5, 4], &mut rng);
    let r = check_all(&store, Mode::Eval, 20, |g| {
        let x = g.param(x);
        let s = g.batch_std(x)?;
        let cat = g.concat(&[x, s], 1)?;
        probe(g, cat, "batch-std")
    })
    .unwrap();
    assert_ok("batch std", r);
}
