use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::object_encoder::EncoderKind;
use crate::params::finite_diff_check_params;
use crate::prompt::{PromptLayout, Vocabulary};

fn small(vocab: usize, layers: usize) -> DecoderConfig {
    DecoderConfig {
        vocab_size: vocab,
        width: 8,
        layers,
        heads: 2,
        mlp_ratio: 2,
        max_len: 16,
        embed_std: 0.02,
    }
}

fn logits_of(dec: &Decoder, store: &ParamStore, rows: &Tensor, lora: Option<&LoraAdapter>) -> Tensor {
    let mut s = Session::inference(store);
    let r = s.g.constant(rows.clone());
    let l = dec.forward(&mut s, r, lora).unwrap();
    s.g.value(l).clone()
}

#[test]
fn zero_layer_logits_are_rows_times_embedding_transpose() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(10, 0), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let got = logits_of(&dec, &store, &rows, None);
    let e = store.get(dec.embed_id());
    for t in 0..3 {
        for v in 0..10 {
            let want: f64 = (0..8).map(|j| rows.get(t, j) as f64 * e.get(v, j) as f64).sum();
            assert!((got.get(t, v) as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn future_rows_do_not_affect_earlier_logits() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(12, 2), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let base = logits_of(&dec, &store, &rows, None);
    for t in 0..5 {
        let mut perturbed = rows.clone();
        for r in t + 1..6 {
            for j in 0..8 {
                perturbed.data_mut()[r * 8 + j] = rng.random_range(-3.0..3.0);
            }
        }
        let other = logits_of(&dec, &store, &perturbed, None);
        for r in 0..=t {
            assert_eq!(base.row(r), other.row(r));
        }
    }
}

#[test]
fn sequences_longer_than_max_len_are_rejected() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(5, 1), 0).unwrap();
    let mut s = Session::inference(&store);
    let r = s.g.constant(Tensor::zeros(&[17, 8]));
    assert!(matches!(dec.forward(&mut s, r, None), Err(Error::Length { len: 17, max: 16 })));
}

fn randomize(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, std, &mut rng);
    }
}

#[test]
fn embedding_table_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(7, 1), 5).unwrap();
    randomize(&mut store, 0.4, 6);
    let store64 = store.cast::<f64>();
    let tokens = [4u32, 5, 6, 4, 1];
    let targets = [Some(5), None, Some(1), Some(6), Some(2)];
    let err = finite_diff_check_params(
        &store64,
        |s| {
            let rows = dec.embed_tokens(s, &tokens, &[])?;
            dec.loss(s, rows, &targets, None)
        },
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn lora_path_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(6, 1), 7).unwrap();
    let lora = LoraAdapter::init(&mut store, &dec, LoraConfig { rank: 2, alpha: 4.0 }, 8).unwrap();
    randomize(&mut store, 0.4, 9);
    store.set_trainable("decoder.", false);
    let store64 = store.cast::<f64>();
    let obj = Tensor::<f64>::randn(&[1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let err = finite_diff_check_params(
        &store64,
        |s| {
            let o = s.g.constant(obj.clone());
            let rows = dec.embed_tokens(s, &[4, OBJ, 5, 4], &[o])?;
            dec.loss(s, rows, &[None, Some(5), Some(2), Some(0)], Some(&lora))
        },
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn untrained_loss_is_near_log_vocab() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(32, 2), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut total = 0.0;
    for _ in 0..100 {
        let tokens: Vec<u32> = (0..8).map(|_| rng.random_range(4..32)).collect();
        let targets: Vec<Option<u32>> = (0..8).map(|_| Some(rng.random_range(0..32))).collect();
        let mut s = Session::inference(&store);
        let rows = dec.embed_tokens(&mut s, &tokens, &[]).unwrap();
        let l = dec.loss(&mut s, rows, &targets, None).unwrap();
        total += s.g.value(l).item() as f64;
    }
    let mean = total / 100.0;
    assert!((mean - 32f64.ln()).abs() < 0.2, "{mean}");
}

#[test]
fn all_masked_loss_is_a_domain_error() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(8, 1), 0).unwrap();
    let mut s = Session::inference(&store);
    let rows = dec.embed_tokens(&mut s, &[1, 2], &[]).unwrap();
    assert!(matches!(dec.loss(&mut s, rows, &[None, None], None), Err(Error::Domain(_))));
}

#[test]
fn masking_prompt_positions_changes_loss_and_zeroes_their_gradient() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(9, 1), 2).unwrap();
    randomize(&mut store, 0.3, 3);
    let tokens = [1u32, 4, 5, 6, 7];
    let run = |targets: &[Option<u32>]| {
        let mut s = Session::training(&store);
        let rows = dec.embed_tokens(&mut s, &tokens, &[]).unwrap();
        let logits = dec.forward(&mut s, rows, None).unwrap();
        let ids: Vec<usize> = targets.iter().map(|t| t.map_or(usize::MAX, |v| v as usize)).collect();
        let l = s.g.cross_entropy(logits, &ids, usize::MAX).unwrap();
        let loss = s.g.value(l).item();
        let g = s.g.backward(l).unwrap();
        (loss, g.get(logits).unwrap().to_vec())
    };
    let (masked, g_masked) = run(&[None, None, Some(6), Some(7), Some(2)]);
    let (full, _) = run(&[Some(4), Some(5), Some(6), Some(7), Some(2)]);
    assert_ne!(masked, full);
    // prompt positions receive no gradient at all
    assert!(g_masked[..2 * 9].iter().all(|&v| v == 0.0));
    assert!(g_masked[2 * 9..].iter().any(|&v| v != 0.0));
}

#[test]
fn one_sample_can_be_memorized() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(12, 1), 13).unwrap();
    let tokens = [1u32, 4, 5, 6, 7, 8];
    let targets = [None, None, Some(6), Some(7), Some(8), Some(2)];
    let mut velocity: Vec<Vec<f32>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
    let mut last = f32::INFINITY;
    for _ in 0..400 {
        let mut s = Session::training(&store);
        let rows = dec.embed_tokens(&mut s, &tokens, &[]).unwrap();
        let l = dec.loss(&mut s, rows, &targets, None).unwrap();
        last = s.g.value(l).item();
        let g = s.backward(l).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(gr) = g.get(id) {
                let v = &mut velocity[id.index()];
                for ((p, vel), &gi) in store.get_mut(id).data_mut().iter_mut().zip(v.iter_mut()).zip(gr) {
                    *vel = 0.9 * *vel + gi;
                    *p -= 0.05 * *vel;
                }
            }
        }
    }
    assert!(last < 0.01, "{last}");
}

fn hand_built() -> (Vocabulary, Decoder, ParamStore, u32, u32) {
    let vocab = Vocabulary::new(["a", "cat"]);
    let mut store = ParamStore::new();
    let cfg = DecoderConfig {
        vocab_size: vocab.len(),
        width: 3,
        layers: 0,
        heads: 1,
        mlp_ratio: 1,
        max_len: 32,
        embed_std: 0.02,
    };
    let dec = Decoder::init(&mut store, cfg, 0).unwrap();
    let (a, cat, q) = (vocab.id("a").unwrap(), vocab.id("cat").unwrap(), vocab.id("?").unwrap());
    let e = store.get_mut(dec.embed_id());
    e.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut set = |id: u32, row: [f32; 3]| e.data_mut()[id as usize * 3..id as usize * 3 + 3].copy_from_slice(&row);
    // Gram entries: <?,a>=2 beats <?,?>=1; <a,cat>=10 beats <a,a>=5;
    // <cat,eos>=110 beats <cat,cat>=100.
    set(q, [1.0, 0.0, 0.0]);
    set(a, [2.0, 1.0, 0.0]);
    set(cat, [0.0, 10.0, 0.0]);
    set(EOS, [-5.0, 11.0, 50.0]);
    (vocab, dec, store, a, cat)
}

fn prompt_for(vocab: &Vocabulary, text: &str, objects: &[&[f32]]) -> MultimodalPrompt {
    let mut p = MultimodalPrompt::unbound(PromptLayout::from_text(vocab, text));
    for (i, o) in objects.iter().enumerate() {
        p.bind(i, ObjectEmbedding::new(o.to_vec(), EncoderKind::Resampler)).unwrap();
    }
    p
}

#[test]
fn hand_built_table_decodes_a_cat() {
    let (vocab, dec, store, a, cat) = hand_built();
    let p = prompt_for(&vocab, "[obj] ?", &[&[0.0, 0.0, 1.0]]);
    let out = dec.greedy_decode(&store, None, &p, 10).unwrap();
    assert_eq!(out.tokens, vec![a, cat, EOS]);
    assert_eq!(out.stop, StopReason::Eos);
    assert_eq!(vocab.detokenize(out.text_tokens()), "a cat");
}

#[test]
fn decoding_respects_max_new_and_is_deterministic() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(300, 2), 21).unwrap();
    randomize(&mut store, 0.5, 22);
    let vocab = Vocabulary::new(["x"]);
    let p = prompt_for(&vocab, "[obj] x", &[&[0.3; 8]]);
    for max_new in [0, 1, 3, 7] {
        let a = dec.greedy_decode(&store, None, &p, max_new).unwrap();
        let b = dec.greedy_decode(&store, None, &p, max_new).unwrap();
        assert!(a.tokens.len() <= max_new);
        assert_eq!(a.logprobs.len(), a.tokens.len());
        assert_eq!(a.tokens, b.tokens);
        assert!(a.logprobs.iter().zip(&b.logprobs).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let unbound = MultimodalPrompt::unbound(PromptLayout::from_text(&vocab, "[obj] x"));
    assert!(matches!(dec.greedy_decode(&store, None, &unbound, 3), Err(Error::UnboundSlot(0))));
}

#[test]
fn greedy_logprobs_match_stepwise_softmax_product() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(300, 1), 31).unwrap();
    randomize(&mut store, 0.3, 32);
    let vocab = Vocabulary::new(["x"]);
    let p = prompt_for(&vocab, "[obj] x x", &[&[0.1; 8]]);
    let out = dec.greedy_decode(&store, None, &p, 5).unwrap();
    let mut tokens = vec![BOS];
    tokens.extend_from_slice(p.tokens());
    let mut product = 1.0f64;
    for &next in &out.tokens {
        let mut s = Session::inference(&store);
        let o = s.g.constant(Tensor::new(vec![1, 8], vec![0.1; 8]).unwrap());
        let rows = dec.embed_tokens(&mut s, &tokens, &[o]).unwrap();
        let logits = dec.forward(&mut s, rows, None).unwrap();
        let row = s.g.value(logits).row(tokens.len() - 1).to_vec();
        let z: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
        product *= (row[next as usize] as f64).exp() / z;
        tokens.push(next);
    }
    let sum: f64 = out.logprobs.iter().sum();
    assert!((sum - product.ln()).abs() < 1e-5);
}

#[test]
fn object_row_equal_to_text_row_reproduces_text_model() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(300, 2), 41).unwrap();
    randomize(&mut store, 0.5, 42);
    let vocab = Vocabulary::new(["x", "y"]);
    let y = vocab.id("y").unwrap();
    let e_y = store.get(dec.embed_id()).row(y as usize).to_vec();
    let with_obj = prompt_for(&vocab, "x [obj] x", &[&e_y]);
    let text_only = prompt_for(&vocab, "x y x", &[]);
    let a = dec.greedy_decode(&store, None, &with_obj, 4).unwrap();
    let b = dec.greedy_decode(&store, None, &text_only, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fresh_adapter_is_bit_identical_to_base() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(20, 2), 51).unwrap();
    let lora = LoraAdapter::init(&mut store, &dec, LoraConfig::default(), 52).unwrap();
    let rows = Tensor::randn(&[5, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(53));
    let base = logits_of(&dec, &store, &rows, None);
    let adapted = logits_of(&dec, &store, &rows, Some(&lora));
    assert_eq!(base.data(), adapted.data());
}

#[test]
fn merged_weights_match_dynamic_adapter() {
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, small(20, 2), 61).unwrap();
    let lora = LoraAdapter::init(&mut store, &dec, LoraConfig { rank: 3, alpha: 6.0 }, 62).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("lora.")).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
    }
    let rows = Tensor::randn(&[6, 8], 1.0, &mut rng);
    let dynamic = logits_of(&dec, &store, &rows, Some(&lora));
    let merged = lora.merge(&store, &dec).unwrap();
    let standalone = logits_of(&dec, &merged, &rows, None);
    assert!(dynamic.max_abs_diff(&standalone) <= 1e-5, "{}", dynamic.max_abs_diff(&standalone));
    assert!(dynamic.max_abs_diff(&logits_of(&dec, &store, &rows, None)) > 1e-3);
}

#[test]
fn full_rank_adapter_fits_any_delta() {
    use nalgebra::DMatrix;
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut store = ParamStore::new();
    let pair = LoraPair {
        a: store.add("a", Tensor::randn(&[d, d], 0.5, &mut rng)).unwrap(),
        b: store.add("b", Tensor::zeros(&[d, d])).unwrap(),
        scaling: 1.0,
    };
    let x = Tensor::<f32>::randn(&[32, d], 1.0, &mut rng);
    let delta = Tensor::<f32>::randn(&[d, d], 1.0, &mut rng);
    // least-squares oracle for the map x -> x·Δ
    let xm = DMatrix::from_row_slice(32, d, &x.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let dm = DMatrix::from_row_slice(d, d, &delta.data().iter().map(|&v| v as f64).collect::<Vec<_>>());
    let y = &xm * &dm;
    let oracle = (xm.transpose() * &xm).try_inverse().unwrap() * xm.transpose() * y;

    let mut vel: Vec<Vec<f32>> = vec![vec![0.0; d * d]; 2];
    for _ in 0..3000 {
        let mut s = Session::training(&store);
        let xv = s.g.constant(x.clone());
        let dv = s.g.constant(delta.clone());
        let pred = pair.delta(&mut s, xv).unwrap();
        let want = s.g.matmul(xv, dv).unwrap();
        let neg = s.g.scale(want, -1.0);
        let diff = s.g.add(pred, neg).unwrap();
        let sq = s.g.mul(diff, diff).unwrap();
        let l = s.g.mean(sq);
        let g = s.backward(l).unwrap();
        for (slot, id) in [pair.a, pair.b].into_iter().enumerate() {
            let gr = g.get(id).unwrap().to_vec();
            for ((p, v), gi) in store.get_mut(id).data_mut().iter_mut().zip(vel[slot].iter_mut()).zip(gr) {
                *v = 0.9 * *v + gi;
                *p -= 0.02 * *v;
            }
        }
    }
    // effective delta (B·A)ᵀ
    let a = store.get(pair.a);
    let b = store.get(pair.b);
    for i in 0..d {
        for o in 0..d {
            let eff: f64 = (0..d).map(|k| b.get(o, k) as f64 * a.get(k, i) as f64).sum();
            assert!((eff - oracle[(i, o)]).abs() <= 1e-3, "{eff} vs {}", oracle[(i, o)]);
        }
    }
}

#[test]
fn checkpoint_round_trip_binds_the_same_model() {
    let mut store = ParamStore::new();
    let cfg = small(30, 2);
    let dec = Decoder::init(&mut store, cfg.clone(), 81).unwrap();
    let bytes = crate::params::encode_checkpoint(&serde_json::to_value(&cfg).unwrap(), &store).unwrap();
    let (json, loaded) = crate::params::decode_checkpoint(&bytes).unwrap();
    let cfg2: DecoderConfig = serde_json::from_value(json).unwrap();
    let dec2 = Decoder::bind(&loaded, cfg2).unwrap();
    let rows = Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(82));
    assert_eq!(logits_of(&dec, &store, &rows, None), logits_of(&dec2, &loaded, &rows, None));
}
