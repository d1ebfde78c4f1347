use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vislang::model::{Model, ModelDims};
use vislang::params::{Bound, ParamGroup, ParamStore};
use vislang::text::{Vocabulary, PAD};
use vislang::transformer::{assemble, linear, PairInput, Transformer};
use vislang::{Graph, Segment, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn stack(c: usize, layers: usize, heads: usize, zero_residual: bool, seed: u64) -> (ParamStore, Transformer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Transformer::new(&mut store, c, layers, heads, 4, zero_residual, &mut rng).unwrap();
    (store, t)
}

fn small_dims() -> ModelDims {
    ModelDims {
        c: 16,
        layers: 2,
        heads: 2,
        mlp_ratio: 2,
        s: 16,
        max_len: 8,
        k: 12,
        image_h: 64,
        image_w: 64,
    }
}

fn small_model(seed: u64) -> Model {
    let vocab = Vocabulary::build(["a red circle left of a blue square"]).unwrap();
    Model::new(small_dims(), vocab, 0.99, seed).unwrap()
}

#[test]
fn attention_rows_are_distributions_over_unmasked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..128 {
        let heads = rng.gen_range(1..4);
        let c = heads * rng.gen_range(1..4);
        let len = rng.gen_range(1..9);
        let mut key_mask: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.6)).collect();
        key_mask[rng.gen_range(0..len)] = true;
        let seg = Segment {
            start: 0,
            len,
            key_mask: key_mask.clone(),
        };
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(&mut rng, &[len, c]));
        let k = g.constant(rand_tensor(&mut rng, &[len, c]));
        let v = g.constant(rand_tensor(&mut rng, &[len, c]));
        let a = g.attention(q, k, v, &[seg], heads).unwrap();
        let probs = g.attention_probs(a).unwrap();
        assert_eq!(probs.len(), heads);
        for p in probs {
            for i in 0..len {
                let row = &p[i * len..(i + 1) * len];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                for (j, &w) in row.iter().enumerate() {
                    if !key_mask[j] {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn single_token_attention_is_output_of_value_projection() {
    let (store, t) = stack(8, 1, 2, false, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[1, 8]);
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, |_| true);
    let xv = g.constant(x);
    let (out, _) = t.attention_sublayer(&mut g, &bound, 0, xv, &[Segment::full(0, 1)]).unwrap();
    let id = |n: &str| store.id(n).unwrap();
    let v = linear(&mut g, &bound, xv, id("layer.0.attn.v"), id("layer.0.attn.v.bias")).unwrap();
    let want = linear(&mut g, &bound, v, id("layer.0.attn.o"), id("layer.0.attn.o.bias")).unwrap();
    for (a, b) in g.value(out).data().iter().zip(g.value(want).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn one_visible_key_takes_all_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (len, c, only) = (6, 4, 3);
    let mut key_mask = vec![false; len];
    key_mask[only] = true;
    let mut g = Graph::new();
    let q = g.constant(rand_tensor(&mut rng, &[len, c]));
    let k = g.constant(rand_tensor(&mut rng, &[len, c]));
    let vt = rand_tensor(&mut rng, &[len, c]);
    let v = g.constant(vt.clone());
    let a = g.attention(q, k, v, &[Segment { start: 0, len, key_mask }], 2).unwrap();
    for i in 0..len {
        assert_eq!(g.value(a).row(i), vt.row(only));
    }
}

#[test]
fn zero_residual_branches_give_the_identity() {
    let (store, t) = stack(8, 3, 2, true, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[5, 8]);
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, |_| true);
    let xv = g.constant(x.clone());
    let y = t.forward(&mut g, &bound, xv, &[Segment::full(0, 5)]).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn permuting_padding_leaves_real_outputs_unchanged() {
    let (store, t) = stack(8, 2, 2, false, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 7;
    let x = rand_tensor(&mut rng, &[n, 8]);
    let key_mask = vec![true, true, true, true, true, false, false];
    let seg = [Segment { start: 0, len: n, key_mask }];
    let mut swapped = x.clone();
    let (r5, r6) = (x.row(5).to_vec(), x.row(6).to_vec());
    swapped.row_mut(5).copy_from_slice(&r6);
    swapped.row_mut(6).copy_from_slice(&r5);
    let run = |input: Tensor| {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &store, |_| true);
        let xv = g.constant(input);
        let y = t.forward(&mut g, &bound, xv, &seg).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(x), run(swapped));
    for i in 0..5 {
        for (p, q) in a.row(i).iter().zip(b.row(i)) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn every_unmasked_position_influences_every_output() {
    let (store, t) = stack(8, 2, 2, false, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 6;
    let x = rand_tensor(&mut rng, &[n, 8]);
    let seg = [Segment::full(0, n)];
    let run = |input: Tensor| {
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &store, |_| true);
        let xv = g.constant(input);
        let y = t.forward(&mut g, &bound, xv, &seg).unwrap();
        g.value(y).clone()
    };
    let base = run(x.clone());
    for j in 0..n {
        let mut p = x.clone();
        p.row_mut(j)[0] += 0.1;
        let out = run(p);
        for i in 0..n {
            let moved = base.row(i).iter().zip(out.row(i)).any(|(a, b)| (a - b).abs() > 1e-9);
            assert!(moved, "output {i} ignores position {j}");
        }
    }
}

#[test]
fn head_shapes_and_uniform_baselines() {
    let mut model = small_model(12);
    for name in ["head.mlm", "head.mlm.bias", "head.mvm", "head.mvm.bias", "head.itm", "head.itm.bias"] {
        let id = model.store.id(name).unwrap();
        let zero = Tensor::zeros(model.store.get(id).shape());
        model.store.set(name, zero).unwrap();
    }
    let (l, t, c) = (16, 8, model.dims.c);
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &model.store, |_| true);
    let hidden = g.constant(Tensor::zeros(&[l + t, c]));
    let text_rows: Vec<usize> = (l..l + t).collect();
    let vis_rows: Vec<usize> = (0..l).collect();
    let mlm = model.heads.mlm(&mut g, &bound, hidden, &text_rows).unwrap();
    let mvm = model.heads.mvm(&mut g, &bound, hidden, &vis_rows).unwrap();
    let itm = model.heads.itm(&mut g, &bound, hidden, &[l]).unwrap();
    assert_eq!(g.shape(mlm), &[t, model.vocab.len()]);
    assert_eq!(g.shape(mvm), &[l, model.dims.k]);
    assert_eq!(g.shape(itm), &[1]);
    let pm = g.softmax(mlm);
    let pv = g.softmax(mvm);
    let v = model.vocab.len() as f64;
    assert!(g.value(pm).data().iter().all(|&p| (p - 1.0 / v).abs() < 1e-15));
    assert!(g.value(pv).data().iter().all(|&p| (p - 1.0 / 12.0).abs() < 1e-15));
    let z = g.value(itm).item();
    assert_eq!(1.0 / (1.0 + (-z).exp()), 0.5);
}

#[test]
fn matching_loss_reaches_visual_tokens() {
    let model = small_model(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let l = model.dims.l();
    let visual = rand_tensor(&mut rng, &[l, model.dims.c]);
    let tokens = model.vocab.tokenize("a red circle", 8).unwrap();
    let pair = PairInput {
        image: 0,
        text_mask: tokens.pad_mask(),
        tokens: tokens.ids.clone(),
        visual_masked: Vec::new(),
    };
    assert_eq!(pair.tokens.last(), Some(&PAD));
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &model.store, |grp| grp == ParamGroup::EncoderConv);
    let vis = g.param(visual);
    let (joint, packing) = assemble(&mut g, &bound, &model.emb, vis, model.position_encoding(), &[pair]).unwrap();
    let hidden = model.transformer.forward(&mut g, &bound, joint, &packing.segments).unwrap();
    let z = model.heads.itm(&mut g, &bound, hidden, &packing.cls_rows()).unwrap();
    let loss = g.bce_with_logits(z, &[1.0]).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(vis).unwrap();
    for i in 0..l {
        assert!(grad.row(i).iter().any(|&x| x != 0.0), "visual token {i} gets no gradient");
    }
}

#[test]
fn mismatched_width_is_a_dimension_error() {
    let (store, t) = stack(8, 1, 2, false, 15);
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, &store, |_| true);
    let x = g.constant(Tensor::zeros(&[3, 4]));
    assert!(matches!(
        t.forward(&mut g, &bound, x, &[Segment::full(0, 3)]),
        Err(vislang::Error::Dimension(_))
    ));
    let mut other = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(Transformer::new(&mut other, 10, 1, 4, 4, false, &mut rng).is_err());
}
