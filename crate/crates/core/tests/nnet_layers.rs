use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sicsf_core::data::FeatureMatrix;
use sicsf_core::nnet::{
    Adapter, Batch, ConformerLayer, Ctx, DecoderLayer, Init, MultiHeadAttention, Subsample, TransformerEncoderLayer,
};
use sicsf_core::tensorcore::{grad_check, grad_check_params, AttentionSpec, Graph, ParamStore, Result, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = g.value(out).numel();
    let w = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = g.mul_const(out, w)?;
    g.sum(p)
}

/// Zero-initialized tensors (adapter up-projections, bias tables) have
/// exactly-zero gradients downstream; randomize everything for FD checks.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

/// Key biases shift every score of a query equally and unused relative
/// distances never enter the logits: both have identically zero gradient, so
/// finite differences only measure rounding noise there.
fn freeze_structural_zeros(store: &mut ParamStore<f64>) {
    store.set_trainable_where(|n| n.ends_with(".k.bias") || n.ends_with(".rel_bias"), false);
}

fn conformer(seed: u64, d: usize, heads: usize, adapter: Option<usize>) -> (ParamStore<f64>, ConformerLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = {
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        ConformerLayer::new(&mut init, "enc.layer0", d, heads, 3, adapter).unwrap()
    };
    (store, layer)
}

#[test]
fn conformer_layer_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let (mut store, layer) = conformer(seed, 16, 4, Some(4));
        randomize(&mut store, seed + 100);
        freeze_structural_zeros(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, vec![14, 16]);
        let layout = Batch::new(7, vec![7, 5]).unwrap();
        let xin = x.clone();
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.constant(xin.clone());
            let y = layer.forward(g, s, xv, &layout, &mut Ctx::eval())?;
            project(g, y, seed)
        };
        let err = grad_check_params(&store, f, 1e-6, Some(12)).unwrap();
        assert!(err < 1e-4, "seed {seed}: param rel err {err}");
        let fx = |g: &mut Graph<f64>, xv: Var| {
            let y = layer.forward(g, &store, xv, &layout, &mut Ctx::eval())?;
            project(g, y, seed)
        };
        let err = grad_check(fx, &x, 1e-6).unwrap();
        assert!(err < 1e-4, "seed {seed}: input rel err {err}");
    }
}

#[test]
fn decoder_layer_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = DecoderLayer::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "dec.layer0",
            8,
            2,
        )
        .unwrap();
        randomize(&mut store, seed + 7);
        freeze_structural_zeros(&mut store);
        let y = rand_tensor(&mut rng, vec![8, 8]);
        let enc = rand_tensor(&mut rng, vec![10, 8]);
        let yl = Batch::new(4, vec![4, 3]).unwrap();
        let el = Batch::new(5, vec![5, 2]).unwrap();
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let yv = g.constant(y.clone());
            let ev = g.input(enc.clone(), true);
            let out = layer.forward(g, s, yv, &yl, ev, &el, &mut Ctx::eval())?;
            project(g, out, seed)
        };
        let err = grad_check_params(&store, f, 1e-6, Some(16)).unwrap();
        assert!(err < 1e-4, "seed {seed}: rel err {err}");
        let fe = |g: &mut Graph<f64>, ev: Var| {
            let yv = g.constant(y.clone());
            let out = layer.forward(g, &store, yv, &yl, ev, &el, &mut Ctx::eval())?;
            project(g, out, seed)
        };
        let err = grad_check(fe, &enc, 1e-6).unwrap();
        assert!(err < 1e-4, "seed {seed}: encoder-state rel err {err}");
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Adapter::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "a",
            8,
            2,
        )
        .unwrap();
        randomize(&mut store, seed);
        let x = rand_tensor(&mut rng, vec![5, 8]);
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let xv = g.constant(x.clone());
            let out = a.forward(g, s, xv)?;
            project(g, out, seed)
        };
        let err = grad_check_params(&store, f, 1e-6, None).unwrap();
        assert!(err < 1e-5, "seed {seed}: rel err {err}");
    }
}

#[test]
fn adapter_identity_at_init_and_hand_case() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Adapter::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "a",
        4,
        1,
    )
    .unwrap();
    let x = Tensor::from_f64(vec![2, 4], &[1.0, -2.0, 3.0, 0.5, -1.0, -1.0, 0.5, 0.25]).unwrap();
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let y = a.forward(&mut g, &store, xv).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    // down = ones row, up = eps column: x + eps * relu(sum x)
    let eps = 0.125;
    store.get_mut(a.down.w).value.data_mut().fill(1.0);
    store.get_mut(a.up.w).value.data_mut().fill(eps);
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let y = a.forward(&mut g, &store, xv).unwrap();
    let expected: Vec<f64> = x
        .data()
        .chunks(4)
        .flat_map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(move |v| v + eps * s.max(0.0)).collect::<Vec<_>>()
        })
        .collect();
    assert_eq!(g.value(y).data(), expected.as_slice());
}

#[test]
fn fresh_adapters_leave_conformer_output_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, vec![6, 16]).cast::<f32>();
    let layout = Batch::single(6);
    let run = |adapter| {
        let (store, layer) = conformer(11, 16, 4, adapter);
        let store = store.cast::<f32>();
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, &store, xv, &layout, &mut Ctx::eval()).unwrap();
        g.value(y).data().to_vec()
    };
    // identical seeds give identical non-adapter weights since adapters are created last
    assert_eq!(run(None), run(Some(4)));
}

#[test]
fn zero_sub_blocks_reduce_conformer_to_layer_norm() {
    let (mut store, layer) = conformer(5, 8, 2, Some(2));
    for id in [
        layer.ffn1.fc2.w,
        layer.ffn2.fc2.w,
        layer.attn.o.w,
        layer.conv.pointwise_out.w,
    ] {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, vec![5, 8]);
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, &store, xv, &Batch::single(5), &mut Ctx::eval()).unwrap();
    let mut g2 = Graph::no_grad();
    let xv = g2.constant(x);
    let expected = layer.final_norm.forward(&mut g2, &store, xv).unwrap();
    assert_eq!(g.value(y).data(), g2.value(expected).data());
}

#[test]
fn conformer_mask_longer_than_input_is_rejected() {
    let (store, layer) = conformer(0, 8, 2, None);
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::zeros(vec![4, 8]));
    assert!(Batch::new(4, vec![5]).is_err());
    let bad = Batch {
        batch: 1,
        time: 5,
        lens: vec![5],
    };
    assert!(layer.forward(&mut g, &store, x, &bad, &mut Ctx::eval()).is_err());
}

#[test]
fn padded_frames_never_reach_valid_outputs() {
    let (store, layer) = conformer(2, 16, 4, Some(4));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = rand_tensor(&mut rng, vec![8, 16]);
    let layout = Batch::new(8, vec![5]).unwrap();
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, &store, xv, &layout, &mut Ctx::eval()).unwrap();
        g.value(y).data()[..5 * 16].to_vec()
    };
    let before = run(&x);
    for v in &mut x.data_mut()[5 * 16..] {
        *v = 100.0;
    }
    assert_eq!(before, run(&x));
}

#[test]
fn causal_attention_has_no_future_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mha = MultiHeadAttention::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "m",
        8,
        2,
        true,
    )
    .unwrap();
    randomize(&mut store, 4);
    let x = rand_tensor(&mut rng, vec![5, 8]);
    for i in 0..5 {
        let mut g = Graph::new();
        let xv = g.input(x.clone(), true);
        let y = mha
            .forward(&mut g, &store, xv, xv, AttentionSpec::causal(2, 1, 5, vec![5]), &mut Ctx::eval())
            .unwrap();
        let mut mask = vec![0.0; 40];
        mask[i * 8..(i + 1) * 8].fill(1.0);
        let p = g.mul_const(y, mask).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(xv).unwrap();
        assert!(grad[(i + 1) * 8..].iter().all(|&v| v == 0.0), "row {i} sees the future");
        assert!(grad[..(i + 1) * 8].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn single_position_attention_is_value_path() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mha = MultiHeadAttention::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "m",
        8,
        4,
        true,
    )
    .unwrap();
    randomize(&mut store, 8);
    let x = rand_tensor(&mut rng, vec![1, 8]);
    let mut g = Graph::no_grad();
    let xv = g.constant(x);
    let y = mha
        .forward(&mut g, &store, xv, xv, AttentionSpec::full(4, 1, 1, 1, vec![1]), &mut Ctx::eval())
        .unwrap();
    let v = mha.v.forward(&mut g, &store, xv).unwrap();
    let expected = mha.o.forward(&mut g, &store, v).unwrap();
    let (a, b) = (g.value(y).data(), g.value(expected).data());
    assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn zero_cross_attention_ignores_encoder_contents() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layer = DecoderLayer::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "d",
        8,
        2,
    )
    .unwrap();
    store.get_mut(layer.cross_attn.o.w).value.data_mut().fill(0.0);
    let y = rand_tensor(&mut rng, vec![3, 8]);
    let run = |enc: Tensor<f64>| {
        let mut g = Graph::no_grad();
        let yv = g.constant(y.clone());
        let ev = g.constant(enc);
        let out = layer
            .forward(&mut g, &store, yv, &Batch::single(3), ev, &Batch::single(4), &mut Ctx::eval())
            .unwrap();
        g.value(out).data().to_vec()
    };
    let a = run(rand_tensor(&mut rng, vec![4, 8]));
    let b = run(rand_tensor(&mut rng, vec![4, 8]));
    assert_eq!(a, b);
}

#[test]
fn text_encoder_layer_ignores_padding() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let layer = TransformerEncoderLayer::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "t",
        8,
        2,
    )
    .unwrap();
    let mut x = rand_tensor(&mut rng, vec![6, 8]);
    let layout = Batch::new(6, vec![3]).unwrap();
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = layer.forward(&mut g, &store, xv, &layout, &mut Ctx::eval()).unwrap();
        g.value(y).data()[..24].to_vec()
    };
    let before = run(&x);
    x.data_mut()[24..].fill(-7.0);
    assert_eq!(before, run(&x));
}

#[test]
fn subsample_lengths() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut init = Init {
        store: &mut store,
        rng: &mut rng,
    };
    let s1 = Subsample::new(&mut init, "s1", 3, 8, 1).unwrap();
    let s4 = Subsample::new(&mut init, "s4", 3, 8, 4).unwrap();
    let f8 = FeatureMatrix::dense(vec![0.5; 24], 3).unwrap();
    let f7 = FeatureMatrix::dense(vec![0.5; 21], 3).unwrap();
    let f8v5 = FeatureMatrix::new(vec![0.5; 24], 8, 3, 5).unwrap();

    let mut g = Graph::no_grad();
    let (y, l) = s1.forward(&mut g, &store, &[&f8]).unwrap();
    assert_eq!((g.shape(y).to_vec(), l.lens.clone()), (vec![8, 8], vec![8]));
    let (y, l) = s4.forward(&mut g, &store, &[&f8]).unwrap();
    assert_eq!((g.shape(y).to_vec(), l.lens.clone()), (vec![2, 8], vec![2]));
    let (_, l) = s4.forward(&mut g, &store, &[&f7]).unwrap();
    assert_eq!(l.lens, vec![2]);
    let (_, l) = s4.forward(&mut g, &store, &[&f8v5]).unwrap();
    assert_eq!(l.lens, vec![2]);
    let empty = FeatureMatrix::new(vec![0.0; 3], 1, 3, 0).unwrap();
    assert!(s4.forward(&mut g, &store, &[&empty]).is_err());
}
