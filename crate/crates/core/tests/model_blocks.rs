use afusion::model::{
    attention_weights, coattention, colsum_broadcast, standard_attention, AttentionBundle,
    BranchConfig, Checkpoint, FusionHead, Mode, Model, ModelConfig, ModelError, ParamId,
    ParamStore, QkvEncoder, Tcn,
};
use afusion::tensor::{Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        audio_dim: 12,
        text_dim: 20,
        tcn_channels: vec![16, 16],
        key_dim: 8,
        visual_dim: 16,
        ..ModelConfig::default()
    }
}

fn set(store: &mut ParamStore, id: ParamId, value: Tensor) {
    store.get_mut(id).value = value;
}

fn zero(store: &mut ParamStore, id: ParamId) {
    let shape = store.get(id).value.shape().to_vec();
    set(store, id, Tensor::zeros(&shape));
}

#[test]
fn backbone_encodes_every_frame() {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let p = model.params().bind(&tape, |_| false);
    let out = model
        .backbone
        .forward(&p, tape.constant(random(&mut rng, &[300, 3, 40, 40])))
        .unwrap();
    assert_eq!(out.shape(), vec![300, 64]);
}

#[test]
fn backbone_zero_frames_zero_output_layer() {
    let mut model = Model::new(small_config()).unwrap();
    let out_layer = model.backbone.output_layer().clone();
    zero(model.params_mut(), out_layer.weight);
    zero(model.params_mut(), out_layer.bias);
    let tape = Tape::new();
    let p = model.params().bind(&tape, |_| false);
    let out = model
        .backbone
        .forward(&p, tape.constant(Tensor::zeros(&[4, 3, 40, 40])))
        .unwrap();
    assert!(out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn backbone_is_stateless_per_frame() {
    let model = Model::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frame = random(&mut rng, &[1, 3, 40, 40]);
    let mut data = frame.data().to_vec();
    data.extend_from_slice(frame.data());
    let tape = Tape::new();
    let p = model.params().bind(&tape, |_| false);
    let out = model
        .backbone
        .forward(&p, tape.constant(Tensor::new(vec![2, 3, 40, 40], data).unwrap()))
        .unwrap();
    let v = out.value();
    let d = v.shape()[1];
    assert_eq!(v.data()[..d], v.data()[d..]);
}

#[test]
fn backbone_rejects_wrong_size() {
    let model = Model::new(small_config()).unwrap();
    let tape = Tape::new();
    let p = model.params().bind(&tape, |_| false);
    let err = model
        .backbone
        .forward(&p, tape.constant(Tensor::zeros(&[2, 3, 48, 48])))
        .unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { .. }));
}

fn branch(input_dim: usize, channels: Vec<usize>, kernel: usize, dilations: Vec<usize>) -> BranchConfig {
    BranchConfig {
        input_dim,
        output_dim: *channels.last().unwrap(),
        tcn_channels: channels,
        kernel_size: kernel,
        dilations,
        dropout_rate: 0.0,
    }
}

#[test]
fn tcn_zero_conv_leaves_residual_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let tcn = Tcn::new(&mut store, &mut rng, "t", &branch(4, vec![6], 3, vec![1])).unwrap();
    let (w, b, proj) = tcn.layer_params(0);
    zero(&mut store, w);
    zero(&mut store, b);
    let (pw, pb) = proj.expect("width change needs a projection");
    set(&mut store, pb, random(&mut rng, &[6]));

    let x = random(&mut rng, &[7, 4]);
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let out = tcn.forward(&p, tape.constant(x.clone()), &mut Mode::Eval).unwrap();

    let (wv, bv) = (&store.get(pw).value, &store.get(pb).value);
    for t in 0..7 {
        for o in 0..6 {
            let mut expect = bv.data()[o];
            for c in 0..4 {
                expect += wv.at(&[o, c, 0]) * x.at(&[t, c]);
            }
            assert!((out.value().at(&[t, o]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn tcn_identity_passthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let tcn = Tcn::new(&mut store, &mut rng, "t", &branch(5, vec![5], 1, vec![1])).unwrap();
    let (w, b, proj) = tcn.layer_params(0);
    assert!(proj.is_none());
    zero(&mut store, w);
    zero(&mut store, b);
    let x = random(&mut rng, &[9, 5]);
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let out = tcn.forward(&p, tape.constant(x.clone()), &mut Mode::Eval).unwrap();
    assert_eq!(*out.value(), x);
}

#[test]
fn tcn_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let tcn = Tcn::new(&mut store, &mut rng, "t", &branch(3, vec![8, 8, 4], 3, vec![1, 2, 4])).unwrap();
    for b in (0..3).map(|i| tcn.layer_params(i).1) {
        let n = store.get(b).value.numel();
        set(&mut store, b, random(&mut rng, &[n]));
    }
    let run = |x: &Tensor| {
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        let out = tcn.forward(&p, tape.constant(x.clone()), &mut Mode::Eval).unwrap();
        let value = out.value().clone();
        value
    };
    let x = random(&mut rng, &[40, 3]);
    let base = run(&x);
    assert_eq!(base.shape(), &[40, 4]);
    for t in [0, 1, 17, 39] {
        let mut data = x.data().to_vec();
        data[t * 3 + 1] += 0.75;
        let moved = run(&Tensor::new(vec![40, 3], data).unwrap());
        assert_eq!(base.data()[..t * 4], moved.data()[..t * 4]);
        assert_ne!(base.data()[t * 4..(t + 1) * 4], moved.data()[t * 4..(t + 1) * 4]);
    }
}

#[test]
fn qkv_identity_and_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let enc = QkvEncoder::new(&mut store, &mut rng, "e", 6, 6);
    set(&mut store, enc.query.weight, Tensor::eye(6));
    zero(&mut store, enc.query.bias);
    for l in [&enc.key, &enc.value] {
        zero(&mut store, l.weight);
        zero(&mut store, l.bias);
    }
    let x = random(&mut rng, &[5, 6]);
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let (q, k, v) = enc.encode(&p, tape.constant(x.clone())).unwrap();
    assert_eq!(*q.value(), x);
    assert!(k.value().data().iter().chain(v.value().data()).all(|&z| z == 0.0));
}

#[test]
fn qkv_default_width() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.key_dim, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let enc = QkvEncoder::new(&mut store, &mut rng, "e", 64, cfg.key_dim);
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let (q, k, v) = enc.encode(&p, tape.constant(random(&mut rng, &[3, 64]))).unwrap();
    for m in [q, k, v] {
        assert_eq!(m.shape(), vec![3, 32]);
    }
}

/// Scalar triple loop over `(softmax(q·kᵀ/√d) + 1)·v`.
fn brute_force(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, d) = q.dims2().unwrap();
    let dv = v.shape()[1];
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut scores = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..d {
                s += q.at(&[i, c]) * k.at(&[j, c]);
            }
            scores[j] = s / (d as f64).sqrt();
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for j in 0..n {
            let w = (scores[j] - max).exp() / z + 1.0;
            for c in 0..dv {
                out[i * dv + c] += w * v.at(&[j, c]);
            }
        }
    }
    out
}

fn bundle_from<'t>(tape: &'t Tape, blocks: [[Tensor; 3]; 3], d: usize) -> AttentionBundle<'t> {
    let [a, b, c] = blocks.map(|[q, k, v]| (tape.constant(q), tape.constant(k), tape.constant(v)));
    AttentionBundle::new([a, b, c], d).unwrap()
}

#[test]
fn coattention_uniform_scores() {
    let tape = Tape::new();
    let q = tape.constant(Tensor::zeros(&[2, 2]));
    let k = tape.constant(Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.5]]).unwrap());
    let v = tape.constant(Tensor::eye(2));
    let w = attention_weights(q, k).unwrap().add_scalar(1.0).unwrap();
    let out = w.matmul(v).unwrap();
    assert_eq!(out.value().data(), &[1.5, 1.5, 1.5, 1.5]);
}

#[test]
fn coattention_matches_brute_force_and_decomposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for heads in [1, 2, 4] {
        let tape = Tape::new();
        let blocks = [(); 3].map(|_| [(); 3].map(|_| random(&mut rng, &[2, 32])));
        let bundle = bundle_from(&tape, blocks, 32);
        assert_eq!(bundle.q.shape(), vec![6, 32]);
        let out = coattention(&bundle, heads).unwrap();
        let std = standard_attention(bundle.q, bundle.k, bundle.v, heads).unwrap();
        let colsum = colsum_broadcast(&bundle.v.value()).unwrap();
        let diff = out.value().data().iter().zip(std.value().data()).map(|(a, b)| a - b).collect::<Vec<_>>();
        for (d, c) in diff.iter().zip(colsum.data()) {
            assert!((d - c).abs() < 1e-10);
        }
        if heads == 1 {
            let oracle = brute_force(&bundle.q.value(), &bundle.k.value(), &bundle.v.value());
            for (a, b) in out.value().data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let w = attention_weights(
        tape.constant(random(&mut rng, &[30, 8])),
        tape.constant(random(&mut rng, &[30, 8])),
    )
    .unwrap();
    for row in w.value().data().chunks(30) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bundle_rejects_mismatched_branches() {
    let tape = Tape::new();
    let mut blocks = [(); 3].map(|_| [(); 3].map(|_| Tensor::zeros(&[4, 8])));
    blocks[1][2] = Tensor::zeros(&[4, 7]);
    let [a, b, c] = blocks.map(|[q, k, v]| (tape.constant(q), tape.constant(k), tape.constant(v)));
    assert!(AttentionBundle::new([a, b, c], 8).is_err());
}

fn head_fixture(seed: u64) -> (ParamStore, FusionHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = FusionHead::new(&mut store, &mut rng, 8, 16, false);
    (store, head)
}

#[test]
fn head_zero_inputs_zero_outputs() {
    let (mut store, head) = head_fixture(10);
    for l in head.output_layers().to_vec() {
        zero(&mut store, l.bias);
    }
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let out = head
        .forward(&p, tape.constant(Tensor::zeros(&[15, 8])), tape.constant(Tensor::zeros(&[5, 16])))
        .unwrap();
    assert_eq!(out.len(), 5);
    let (v, a) = out.to_vecs();
    assert!(v.iter().chain(&a).all(|&x| x == 0.0));
}

#[test]
fn head_uses_visual_encoding() {
    let (store, head) = head_fixture(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let att = random(&mut rng, &[12, 8]);
    let run = |enc: Tensor| {
        let tape = Tape::new();
        let p = store.bind(&tape, |_| false);
        head.forward(&p, tape.constant(att.clone()), tape.constant(enc)).unwrap().to_vecs()
    };
    let with = run(random(&mut rng, &[4, 16]));
    let without = run(Tensor::zeros(&[4, 16]));
    assert_ne!(with, without);
}

#[test]
fn head_rejects_misaligned_rows() {
    let (store, head) = head_fixture(13);
    let tape = Tape::new();
    let p = store.bind(&tape, |_| false);
    let err = head
        .forward(&p, tape.constant(Tensor::zeros(&[14, 8])), tape.constant(Tensor::zeros(&[5, 16])))
        .unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { .. }));
}

fn inputs(cfg: &ModelConfig, t: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        random(&mut rng, &[t, 3, cfg.crop, cfg.crop]),
        random(&mut rng, &[t, cfg.audio_dim]),
        random(&mut rng, &[t, cfg.text_dim]),
    )
}

#[test]
fn forward_rejects_length_mismatch() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone()).unwrap();
    let (v, a, _) = inputs(&cfg, 300, 14);
    let (_, _, t) = inputs(&cfg, 299, 15);
    let err = model.predict(&v, &a, &t).unwrap_err();
    assert!(matches!(
        err,
        ModelError::LengthMismatch {
            visual: 300,
            audio: 300,
            text: 299
        }
    ));
}

#[test]
fn forward_full_window() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone()).unwrap();
    let (v, a, t) = inputs(&cfg, 300, 16);
    let (val, aro) = model.predict(&v, &a, &t).unwrap();
    assert_eq!((val.len(), aro.len()), (300, 300));
}

#[test]
fn forward_preserves_length() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    for t_len in [1, 2, 7] {
        let (v, a, t) = inputs(&cfg, t_len, 17);
        let (val, aro) = model.predict(&v, &a, &t).unwrap();
        assert_eq!((val.len(), aro.len()), (t_len, t_len));
    }
}

#[test]
fn forward_is_deterministic_under_seeded_dropout() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    let (v, a, t) = inputs(&cfg, 20, 18);
    let run = |seed| {
        let tape = Tape::new();
        let p = model.params().bind(&tape, |_| true);
        let out = model
            .forward(
                &p,
                tape.constant(v.clone()),
                tape.constant(a.clone()),
                tape.constant(t.clone()),
                &mut Mode::train(seed),
            )
            .unwrap();
        out.to_vecs()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn gradient_reaches_every_branch() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    let (v, a, t) = inputs(&cfg, 10, 19);
    let tape = Tape::new();
    let p = model.params().bind(&tape, |_| true);
    let out = model
        .forward(
            &p,
            tape.constant(v),
            tape.constant(a),
            tape.constant(t),
            &mut Mode::Eval,
        )
        .unwrap();
    let loss = out.valence.sum().unwrap().add(out.arousal.sum().unwrap()).unwrap();
    let grads = tape.backward(loss).unwrap();
    for prefix in ["backbone.stage1", "visual_tcn", "audio_tcn", "text_tcn", "attn.audio", "head"] {
        let norm: f64 = model
            .params()
            .ids()
            .filter(|&id| model.params().get(id).name.starts_with(prefix))
            .map(|id| grads.get(p[id]).unwrap().norm())
            .sum();
        assert!(norm > 0.0, "{prefix} received no gradient");
    }
}

#[test]
fn checkpoint_restores_predictions() {
    let cfg = small_config();
    let model = Model::new(cfg.clone()).unwrap();
    let bytes = model.to_checkpoint().to_bytes().unwrap();
    let mut other = Model::new(ModelConfig {
        init_seed: 99,
        ..cfg.clone()
    })
    .unwrap();
    let (v, a, t) = inputs(&cfg, 6, 20);
    assert_ne!(model.predict(&v, &a, &t).unwrap(), other.predict(&v, &a, &t).unwrap());
    other.load_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(model.predict(&v, &a, &t).unwrap(), other.predict(&v, &a, &t).unwrap());
}

#[test]
fn checkpoint_from_other_architecture_is_rejected() {
    let mut model = Model::new(small_config()).unwrap();
    let other = Model::new(ModelConfig {
        key_dim: 4,
        ..small_config()
    })
    .unwrap();
    assert!(matches!(
        model.load_checkpoint(&other.to_checkpoint()),
        Err(ModelError::CheckpointMismatch(_))
    ));
    let mut ckpt = model.to_checkpoint();
    ckpt.tensors.pop();
    assert!(matches!(model.load_checkpoint(&ckpt), Err(ModelError::CheckpointMismatch(_))));
}
