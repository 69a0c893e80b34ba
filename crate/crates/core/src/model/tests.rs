use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mixers::{softmax_attention, Gates};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_spec(kind: MixerKind) -> ModelSpec {
    let mut s = ModelSpec::uniform(3, 8, 2, 11, 16, kind);
    s.ffn_mult = 2;
    s
}

fn model(kind: MixerKind, seed: u64) -> Model {
    Model::init(small_spec(kind), seed, &mut rng(seed)).unwrap()
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..vocab)).collect()
}

fn rms(x: &Tensor, scale: &Tensor) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for (row, src) in out.data_mut().chunks_mut(d).zip(x.data().chunks(d)) {
        let ms = src.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        row.iter_mut().zip(scale.data()).for_each(|(v, s)| *v *= inv * s);
    }
    out
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

#[test]
fn degenerate_specs_rejected() {
    let mut s = small_spec(MixerKind::Softmax);
    s.n_layers = 0;
    s.mixers.clear();
    assert!(Model::init(s, 0, &mut rng(0)).is_err());
    let mut s = small_spec(MixerKind::Softmax);
    s.head_dim = 3;
    assert!(s.validate().is_err());
    let mut s = small_spec(MixerKind::Softmax);
    s.mixers.pop();
    assert!(s.validate().is_err());
}

#[test]
fn identical_seeds_give_identical_logits() {
    let toks = tokens(20, 11, 1);
    let a = model(MixerKind::Gla, 3).logits(&toks, 2).unwrap();
    let b = model(MixerKind::Gla, 3).logits(&toks, 2).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn logits_shape_tied_and_untied() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let heads = r.random_range(1..4);
        let mut spec = ModelSpec::uniform(r.random_range(1..4), heads * 4, heads, r.random_range(5..30), 12, MixerKind::Softmax);
        for tie in [true, false] {
            spec.tie_embeddings = tie;
            let m = Model::init(spec.clone(), seed, &mut r).unwrap();
            let t = 7;
            let logits = m.logits(&tokens(2 * t, spec.vocab, seed), 2).unwrap();
            assert_eq!(logits.shape(), &[2 * t, spec.vocab]);
            assert_eq!(m.unembed.is_none(), tie);
        }
    }
}

#[test]
fn out_of_range_token_fails() {
    let m = model(MixerKind::Softmax, 0);
    let err = m.logits(&[1, 2, 11], 1).unwrap_err();
    assert!(matches!(err, Error::TokenOutOfRange { id: 11, vocab: 11 }));
}

#[test]
fn bypass_with_zero_ffn_is_identity() {
    let mut spec = small_spec(MixerKind::Bypass);
    spec.mixers = vec![MixerKind::Bypass; 3];
    let mut m = Model::init(spec, 0, &mut rng(0)).unwrap();
    m.layers[1].ffn_down = Tensor::zeros(m.layers[1].ffn_down.shape());
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng(1));
    let (u, next) = m.block_forward(1, &x).unwrap();
    assert!(u.bit_eq(&x));
    assert!(next.bit_eq(&x));
}

#[test]
fn zero_input_gives_zero_mixer_state() {
    for kind in [MixerKind::Softmax, MixerKind::Gla, MixerKind::GatedDeltaNet] {
        let m = model(kind, 2);
        let (u, _) = m.block_forward(0, &Tensor::zeros(&[4, 8])).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0), "{kind:?}");
    }
}

#[test]
fn softmax_block_matches_composition() {
    let m = model(MixerKind::Softmax, 4);
    let x = Tensor::randn(&[6, 8], 1.0, &mut rng(5));
    let (u, next) = m.block_forward(2, &x).unwrap();
    let layer = &m.layers[2];
    let mixed = softmax_attention(&rms(&x, &layer.norm_mix), 2, &layer.mixer, &m.spec.mixer_options).unwrap();
    let expect_u = add(&x, &mixed);
    assert!(u.max_abs_diff(&expect_u) < 1e-12);
    let h = rms(&expect_u, &layer.norm_ffn);
    let f = m.spec.ffn_dim();
    let mut ffn = vec![0.0; 6 * 8];
    for t in 0..6 {
        let hid: Vec<f64> = (0..f)
            .map(|j| {
                let g: f64 = (0..8).map(|i| h.get(&[t, i]) * layer.ffn_gate.get(&[i, j])).sum();
                let up: f64 = (0..8).map(|i| h.get(&[t, i]) * layer.ffn_up.get(&[i, j])).sum();
                g / (1.0 + (-g).exp()) * up
            })
            .collect();
        for c in 0..8 {
            ffn[t * 8 + c] = (0..f).map(|j| hid[j] * layer.ffn_down.get(&[j, c])).sum();
        }
    }
    let expect_next = add(&expect_u, &Tensor::new(vec![6, 8], ffn).unwrap());
    assert!(next.max_abs_diff(&expect_next) < 1e-12);
}

#[test]
fn captured_states_match_block_chain() {
    let m = model(MixerKind::GatedDeltaNet, 6);
    let toks = tokens(9, 11, 6);
    let (_, states) = m.forward_capture(&toks, 1, true).unwrap();
    let inputs = m.block_inputs(&toks).unwrap();
    for l in 0..3 {
        let (u, _) = m.block_forward(l, &inputs[l]).unwrap();
        assert!(u.bit_eq(&states[l]), "layer {l}");
    }
    let hidden = m.final_hidden(&toks, 1).unwrap();
    assert!(hidden.bit_eq(&inputs[3]));
}

#[test]
fn all_softmax_student_is_a_clone() {
    let teacher = model(MixerKind::Softmax, 7);
    let student = init_student_from_teacher(&teacher, &teacher.spec.mixers, &mut rng(0)).unwrap();
    let toks = tokens(12, 11, 2);
    assert!(student.logits(&toks, 1).unwrap().bit_eq(&teacher.logits(&toks, 1).unwrap()));
    assert_eq!(student.named_params(), teacher.named_params());
}

#[test]
fn projections_transfer_exactly() {
    let teacher = model(MixerKind::Softmax, 8);
    for kind in [MixerKind::Gla, MixerKind::GatedDeltaNet] {
        let student = init_student_from_teacher(&teacher, &[kind; 3], &mut rng(1)).unwrap();
        student.validate().unwrap();
        for (s, t) in student.layers.iter().zip(&teacher.layers) {
            for (a, b) in [(&s.mixer.wq, &t.mixer.wq), (&s.mixer.wk, &t.mixer.wk), (&s.mixer.wv, &t.mixer.wv), (&s.mixer.wo, &t.mixer.wo)] {
                assert_eq!(a.max_abs_diff(b), 0.0);
            }
            assert!(s.ffn_up.bit_eq(&t.ffn_up));
        }
        assert!(student.embed.bit_eq(&teacher.embed));
    }
}

#[test]
fn transferred_gla_with_open_gates_is_plain_linear_attention() {
    let teacher = model(MixerKind::Softmax, 9);
    let mut student = init_student_from_teacher(&teacher, &[MixerKind::Gla; 3], &mut rng(2)).unwrap();
    for layer in &mut student.layers {
        if let Gates::Diagonal { w, b } = &mut layer.mixer.gates {
            *w = Tensor::zeros(w.shape());
            *b = Tensor::full(b.shape(), 1e3);
        }
    }
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng(3));
    let (u, _) = student.block_forward(1, &x).unwrap();
    let t = &teacher.layers[1];
    let h = rms(&x, &t.norm_mix);
    let proj = |w: &Tensor| -> Vec<f64> {
        (0..5 * 8)
            .map(|idx| (0..8).map(|i| h.get(&[idx / 8, i]) * w.get(&[i, idx % 8])).sum())
            .collect()
    };
    let (q, k, v) = (proj(&t.mixer.wq), proj(&t.mixer.wk), proj(&t.mixer.wv));
    let mut o = vec![0.0; 40];
    for head in 0..2 {
        for r in 0..5 {
            for s in 0..=r {
                let qk: f64 = (0..4).map(|c| q[r * 8 + head * 4 + c] * k[s * 8 + head * 4 + c]).sum();
                for c in 0..4 {
                    o[r * 8 + head * 4 + c] += qk * v[s * 8 + head * 4 + c];
                }
            }
        }
    }
    let mixed: Vec<f64> = (0..40)
        .map(|idx| (0..8).map(|i| o[(idx / 8) * 8 + i] * t.mixer.wo.get(&[i, idx % 8])).sum())
        .collect();
    let expect = add(&x, &Tensor::new(vec![5, 8], mixed).unwrap());
    assert!(u.max_abs_diff(&expect) < 1e-10);
}

#[test]
fn transfer_rejects_mismatched_shapes() {
    let teacher = model(MixerKind::Softmax, 1);
    let mut other = small_spec(MixerKind::Gla);
    other.d_model = 12;
    other.head_dim = 6;
    let student = Model::init(other, 0, &mut rng(0)).unwrap();
    match student.restore_layer(0, &teacher) {
        Err(Error::SpecMismatch(diff)) => {
            assert!(diff.iter().any(|d| d.starts_with("d_model")));
            assert!(diff.iter().any(|d| d.starts_with("head_dim")));
        }
        other => panic!("expected spec mismatch, got {other:?}"),
    }
    assert!(init_student_from_teacher(&teacher, &[MixerKind::Gla; 2], &mut rng(0)).is_err());
}

#[test]
fn restore_is_local_and_non_destructive() {
    let teacher = model(MixerKind::Softmax, 10);
    let student = init_student_from_teacher(&teacher, &[MixerKind::GatedDeltaNet; 3], &mut rng(4)).unwrap();
    let before = student.clone();
    let restored = student.restore_layer(1, &teacher).unwrap();
    assert_eq!(student, before);
    assert_eq!(restored.spec.mixers[1], MixerKind::Softmax);
    assert_eq!(restored.layers[1], teacher.layers[1]);
    for l in [0, 2] {
        assert_eq!(restored.layers[l], student.layers[l]);
        assert_eq!(restored.spec.mixers[l], student.spec.mixers[l]);
    }
    // Undo by copying the original layer back.
    let undone = restored.restore_layer(1, &student).unwrap();
    let toks = tokens(10, 11, 3);
    assert!(undone.logits(&toks, 1).unwrap().bit_eq(&student.logits(&toks, 1).unwrap()));
    assert!(matches!(student.restore_layer(3, &teacher), Err(Error::LayerOutOfRange { layer: 3, .. })));
}

#[test]
fn restored_block_reproduces_teacher_block() {
    let teacher = model(MixerKind::Softmax, 11);
    let student = init_student_from_teacher(&teacher, &[MixerKind::Gla; 3], &mut rng(5)).unwrap();
    let toks = tokens(8, 11, 4);
    let inputs = teacher.block_inputs(&toks).unwrap();
    for l in 0..3 {
        let restored = student.restore_layer(l, &teacher).unwrap();
        let (u, next) = restored.block_forward(l, &inputs[l]).unwrap();
        let (tu, tnext) = teacher.block_forward(l, &inputs[l]).unwrap();
        assert!(u.bit_eq(&tu) && next.bit_eq(&tnext));
    }
}

#[test]
fn layout_partitions_layers() {
    let mut spec = small_spec(MixerKind::Gla);
    spec.mixers[1] = MixerKind::Softmax;
    let layout = spec.layout();
    assert_eq!(layout.softmax().iter().copied().collect::<Vec<_>>(), vec![1]);
    assert_eq!(layout.linear().iter().copied().collect::<Vec<_>>(), vec![0, 2]);
    assert!(HybridLayout::new(3, [3].into()).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = model(MixerKind::GatedDeltaNet, 12);
    m.spec.mixers[0] = MixerKind::SlidingWindow { window: 3 };
    m.layers[0].mixer.gates = Gates::None;
    m.provenance.step = 17;
    m.provenance.notes.insert("planted_layer".into(), "2".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.hybd");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    let toks = tokens(12, 11, 5);
    assert!(back.logits(&toks, 2).unwrap().bit_eq(&m.logits(&toks, 2).unwrap()));
    assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let m = model(MixerKind::Gla, 13);
    let bytes = encode_checkpoint(&m).unwrap();
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::Checkpoint(msg)) if msg.contains("magic")));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_checkpoint(&version), Err(Error::Checkpoint(msg)) if msg.contains("version")));
    let truncated = &bytes[..bytes.len() - 5];
    assert!(matches!(decode_checkpoint(truncated), Err(Error::Checkpoint(msg)) if msg.contains("truncated")));
    assert!(decode_checkpoint(&bytes[..10]).is_err());
}

#[test]
fn manifest_is_sorted_globals_first() {
    let m = model(MixerKind::Gla, 14);
    let keys: Vec<ParamKey> = m.named_params().into_iter().map(|(k, _)| k).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(keys[0], ParamKey::global("embed"));
    assert!(keys.iter().any(|k| k.role == "mixer.gate_w"));
}

/// Cross-entropy of the whole model with `key` replaced by `x`.
fn loss_with<'t>(m: &Model, key: &ParamKey, x: Var<'t>, tape: &'t Tape, toks: &[usize], targets: &[i64]) -> Result<Var<'t>> {
    let f = m.forward(toks, 2, false, &mut |k, t| if k == key { x } else { tape.constant(t.clone()) })?;
    f.logits.cross_entropy(targets)
}

#[test]
fn whole_model_gradients_match_central_differences() {
    for kind in [MixerKind::Softmax, MixerKind::Gla, MixerKind::GatedDeltaNet] {
        let m = model(kind, 4);
        // Short vocabulary draw so tokens repeat within a sequence.
        let toks = tokens(12, 4, 9);
        let targets: Vec<i64> = tokens(12, 11, 10).into_iter().map(|t| t as i64).collect();
        for (key, value) in m.named_params() {
            let tape = Tape::new();
            let xv = tape.param(value);
            let loss = loss_with(&m, &key, xv, &tape, &toks, &targets).unwrap();
            tape.backward(loss).unwrap();
            let analytic = tape.grad(xv).unwrap();
            let eps = 1e-5;
            let mut probe = value.clone();
            for i in 0..value.numel() {
                let eval = |p: &Tensor| {
                    let tape = Tape::new();
                    let v = tape.constant(p.clone());
                    loss_with(&m, &key, v, &tape, &toks, &targets).unwrap().item()
                };
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + eps;
                let up = eval(&probe);
                probe.data_mut()[i] = orig - eps;
                let down = eval(&probe);
                probe.data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "{kind:?} {key:?}[{i}]: {a} vs {numeric}"
                );
            }
        }
    }
}
