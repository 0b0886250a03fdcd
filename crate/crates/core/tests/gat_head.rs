use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegograph::autodiff::{gradcheck, Activation, Mode, ParamStore, Tape};
use stegograph::gat::{attention_mask, classify, gat_layer_forward, readout, ClassifierHead, GatHead, GatLayer};
use stegograph::model::{Model, ModelConfig, ModelHead, ModelKind};
use stegograph::patch_graph::{add_self_loops, build_complete_graph, GraphTopology};
use stegograph::{Error, GrayImage, Tensor, TopologyKind};

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_topology(n: usize, rng: &mut ChaCha8Rng) -> GraphTopology {
    let mut t = GraphTopology::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.5) {
                t.set_edge(i, j);
            }
        }
    }
    add_self_loops(&t)
}

fn layer(store: &mut ParamStore<f64>, din: usize, dout: usize, seed: u64) -> GatLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GatLayer::new(store, &format!("l{seed}"), din, dout, &mut rng).unwrap()
}

/// Attention computed directly from the definition.
fn scripted_attention(h: &[f64], n: usize, din: usize, w: &[f64], a: &[f64], topo: &GraphTopology) -> (Vec<f64>, Vec<f64>) {
    let dout = a.len() / 2;
    let wh: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..dout).map(|k| (0..din).map(|j| h[i * din + j] * w[j * dout + k]).sum()).collect())
        .collect();
    let mut alpha = vec![0.0; n * n];
    for i in 0..n {
        let e: Vec<f64> = (0..n)
            .map(|j| {
                let s: f64 = (0..dout).map(|k| a[k] * wh[i][k] + a[dout + k] * wh[j][k]).sum();
                if s > 0.0 { s } else { 0.2 * s }
            })
            .collect();
        let max = (0..n).filter(|&j| topo.has_edge(i, j)).map(|j| e[j]).fold(f64::MIN, f64::max);
        let z: f64 = (0..n).filter(|&j| topo.has_edge(i, j)).map(|j| (e[j] - max).exp()).sum();
        for j in 0..n {
            if topo.has_edge(i, j) {
                alpha[i * n + j] = (e[j] - max).exp() / z;
            }
        }
    }
    let out = (0..n)
        .flat_map(|i| {
            let alpha = &alpha;
            let wh = &wh;
            (0..dout).map(move |k| (0..n).map(|j| alpha[i * n + j] * wh[j][k]).sum::<f64>())
        })
        .collect();
    (alpha, out)
}

#[test]
fn single_node_identity() {
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, 3, 3, 1);
    store.get_mut(l.wproj).value = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let mask = attention_mask(&add_self_loops(&GraphTopology::empty(1))).unwrap();
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::new(&[1, 1, 3], vec![0.3, -1.2, 2.0]).unwrap());
    let out = gat_layer_forward(&mut tape, &store, &l, h, &mask, None).unwrap();
    assert_eq!(tape.value(out.attention).data(), &[1.0]);
    assert_eq!(tape.value(out.features).data(), &[0.3, -1.2, 2.0]);
}

#[test]
fn identical_features_give_uniform_attention() {
    let mut store = ParamStore::<f64>::new();
    let l = layer(&mut store, 4, 4, 2);
    let mask = attention_mask(&add_self_loops(&build_complete_graph(9))).unwrap();
    let row = [0.5, -0.25, 1.0, 0.1];
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::new(&[1, 9, 4], row.repeat(9)).unwrap());
    let out = gat_layer_forward(&mut tape, &store, &l, h, &mask, Some(Activation::Elu(1.0))).unwrap();
    for a in tape.value(out.attention).data() {
        assert!((a - 1.0 / 9.0).abs() < 1e-15);
    }
    let f = tape.value(out.features).data();
    for i in 1..9 {
        assert_eq!(&f[i * 4..(i + 1) * 4], &f[..4]);
    }
}

#[test]
fn missing_self_loops_are_rejected() {
    assert!(matches!(attention_mask(&build_complete_graph(3)), Err(Error::MissingSelfLoop(0))));
    assert!(attention_mask(&GraphTopology::empty(2)).is_err());
}

#[test]
fn attention_matches_scripted_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let l = layer(&mut store, 6, 4, 100 + trial);
        let topo = random_topology(5, &mut rng);
        let h = random_vec(5 * 6, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::new(&[1, 5, 6], h.clone()).unwrap());
        let out = gat_layer_forward(&mut tape, &store, &l, hv, &attention_mask(&topo).unwrap(), None).unwrap();
        let (alpha, feats) = scripted_attention(
            &h,
            5,
            6,
            store.get(l.wproj).value.data(),
            store.get(l.attn).value.data(),
            &topo,
        );
        let got = tape.value(out.attention).data();
        for i in 0..5 {
            let row = &got[i * 5..(i + 1) * 5];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..5 {
                if !topo.has_edge(i, j) {
                    assert_eq!(row[j], 0.0);
                }
                assert!((row[j] - alpha[i * 5 + j]).abs() < 1e-12);
            }
        }
        for (a, b) in tape.value(out.features).data().iter().zip(&feats) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn readout_examples() {
    let mut tape = Tape::<f64>::new();
    let one = tape.constant(Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let r = readout(&mut tape, one).unwrap();
    assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0]);
    let opp = tape.constant(Tensor::new(&[1, 2, 2], vec![1.5, -2.0, -1.5, 2.0]).unwrap());
    let r = readout(&mut tape, opp).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = random_vec(2 * 5 * 3, &mut rng);
    let v = tape.constant(Tensor::new(&[2, 5, 3], h.clone()).unwrap());
    let r = readout(&mut tape, v).unwrap();
    for b in 0..2 {
        for k in 0..3 {
            let want = (0..5).map(|i| h[(b * 5 + i) * 3 + k]).sum::<f64>() / 5.0;
            assert!((tape.value(r).data()[b * 3 + k] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn classify_examples_and_gradients() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let head = ClassifierHead::new(&mut store, 6, &mut rng).unwrap();
    let g = Tensor::new(&[3, 6], random_vec(18, &mut rng)).unwrap();
    let mut tape = Tape::new();
    let gv = tape.constant(g.clone());
    for p in classify(&mut tape, &store, &head, gv).unwrap().chunks(2) {
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }
    let report = gradcheck::grad_check_store(&store, 1e-5, |s| {
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let logits = stegograph::gat::classify_logits(&mut tape, s, &head, gv)?;
        let loss = tape.softmax_cross_entropy(logits, &[0, 1, 1])?;
        let v = tape.value(loss).data()[0];
        tape.backward_into(loss, s)?;
        Ok(v)
    })
    .unwrap();
    for r in report {
        assert!(r.max_rel_err < 1e-4, "{}: {}", r.name, r.max_rel_err);
    }
    for (_, p) in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let gv = tape.constant(g);
    assert!(classify(&mut tape, &store, &head, gv).unwrap().iter().all(|&p| p == 0.5));
}

#[test]
fn head_parameter_count() {
    for (l, d1, d2) in [(8, 8, 8), (16, 16, 16), (16, 12, 20), (128, 128, 128)] {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        GatHead::with_dims(&mut store, l, d1, d2, &mut rng).unwrap();
        let want = l * d1 + 2 * d1 + d1 * d2 + 2 * d2 + d2 * 64 + 64 + 64 * 2 + 2;
        assert_eq!(store.trainable_count(), want);
        for name in ["gat.layer1.wproj", "gat.layer1.attn", "gat.layer2.wproj", "gat.layer2.attn", "head.fc1.w", "head.fc1.b", "head.fc2.w", "head.fc2.b"] {
            assert!(store.id(name).is_some(), "{name}");
        }
    }
}

fn gat_config(size: usize, patch: usize, grid: usize, alpha: f64, groups: usize) -> ModelConfig {
    ModelConfig {
        kind: ModelKind::CnnGat,
        groups,
        image_h: size,
        image_w: size,
        patch_h: patch,
        patch_w: patch,
        grid_n: grid,
        grid_m: grid,
        alpha,
        beta: alpha,
        topology: TopologyKind::Complete,
    }
}

#[test]
fn model_shape_contract() {
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, gat_config(64, 32, 3, 0.5, 2), 7).unwrap();
    assert_eq!(model.topology().unwrap().node_count(), 9);
    assert!(model.topology().unwrap().has_self_loops());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = GrayImage::new(64, 64, (0..64 * 64).map(|_| rng.gen()).collect()).unwrap();
    let input = model.prepare::<f32>(&[&img]).unwrap();
    let mut tape = Tape::new();
    let pass = model.logits(&mut tape, &store, input, Mode::Eval, None).unwrap();
    assert_eq!(tape.value(pass.features).shape(), &[9, 16]);
    let p = stegograph::model::model_forward(&img, &model, &store).unwrap();
    assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
}

#[test]
fn constant_image_reduces_to_single_node() {
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, gat_config(32, 16, 3, 0.5, 1), 9).unwrap();
    let img = GrayImage::filled(32, 32, 90);
    let input = model.prepare::<f64>(&[&img]).unwrap();
    let mut tape = Tape::new();
    let pass = model.logits(&mut tape, &store, input, Mode::Eval, None).unwrap();
    let feats = tape.value(pass.features).clone();
    let row = feats.data()[..8].to_vec();
    for i in 1..9 {
        assert_eq!(&feats.data()[i * 8..(i + 1) * 8], &row[..]);
    }
    let ModelHead::Gat(head) = &model.head else { unreachable!() };
    let mut single = Tape::new();
    let h = single.constant(Tensor::new(&[1, 1, 8], row).unwrap());
    let mask = attention_mask(&add_self_loops(&GraphTopology::empty(1))).unwrap();
    let logits = head.forward(&mut single, &store, h, &mask).unwrap();
    for (a, b) in tape.value(pass.logits).data().iter().zip(single.value(logits).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn end_to_end_gradients() {
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, gat_config(8, 4, 2, 0.0, 1), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let imgs: Vec<GrayImage> = (0..2)
        .map(|_| GrayImage::new(8, 8, (0..64).map(|_| rng.gen()).collect()).unwrap())
        .collect();
    let refs: Vec<&GrayImage> = imgs.iter().collect();
    let report = gradcheck::grad_check_store(&store, 1e-5, |s| {
        let mut tape = Tape::new();
        let input = model.prepare(&refs)?;
        let pass = model.logits(&mut tape, s, input, Mode::Train, None)?;
        let loss = tape.softmax_cross_entropy(pass.logits, &[0, 1])?;
        let v = tape.value(loss).data()[0];
        tape.backward_into(loss, s)?;
        Ok(v)
    })
    .unwrap();
    assert_eq!(report.len(), 3 + 4 + 4);
    for r in &report {
        assert!(r.max_rel_err < 1e-4, "{}: {}", r.name, r.max_rel_err);
    }
}

#[test]
fn layer_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..100 {
        let n = rng.gen_range(1..=9);
        let mut store = ParamStore::<f32>::new();
        let mut lrng = ChaCha8Rng::seed_from_u64(trial);
        let l = GatLayer::new(&mut store, "g", 5, 4, &mut lrng).unwrap();
        let topo = random_topology(n, &mut rng);
        let h: Vec<f32> = (0..n * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut ph = vec![0.0; n * 5];
        for i in 0..n {
            ph[perm[i] * 5..perm[i] * 5 + 5].copy_from_slice(&h[i * 5..i * 5 + 5]);
        }
        let run = |feats: Vec<f32>, t: &GraphTopology| {
            let mut tape = Tape::new();
            let hv = tape.constant(Tensor::new(&[1, n, 5], feats).unwrap());
            let out = gat_layer_forward(&mut tape, &store, &l, hv, &attention_mask(t).unwrap(), Some(Activation::Elu(1.0))).unwrap();
            tape.value(out.features).data().to_vec()
        };
        let base = run(h, &topo);
        let permuted = run(ph, &topo.permuted(&perm));
        for i in 0..n {
            for k in 0..4 {
                assert!((permuted[perm[i] * 4 + k] - base[i * 4 + k]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn model_is_invariant_to_patch_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, gat_config(16, 8, 3, 0.5, 1), 14).unwrap();
    let topo = model.topology().unwrap().clone();
    for _ in 0..100 {
        let img = GrayImage::new(16, 16, (0..256).map(|_| rng.gen()).collect()).unwrap();
        let input = model.prepare::<f32>(&[&img]).unwrap();
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = vec![0.0; input.tensor.len()];
        for i in 0..9 {
            shuffled[perm[i] * 64..perm[i] * 64 + 64].copy_from_slice(&input.tensor.data()[i * 64..i * 64 + 64]);
        }
        let shuffled = stegograph::model::ModelInput {
            tensor: Tensor::new(&[9, 1, 8, 8], shuffled).unwrap(),
            batch: 1,
        };
        let mut t1 = Tape::new();
        let a = model.logits(&mut t1, &store, input, Mode::Eval, None).unwrap();
        let mut t2 = Tape::new();
        let b = model.logits(&mut t2, &store, shuffled, Mode::Eval, Some(&topo.permuted(&perm))).unwrap();
        for (x, y) in t1.value(a.logits).data().iter().zip(t2.value(b.logits).data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
