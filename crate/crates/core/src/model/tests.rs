use super::*;
use crate::autodiff::log_softmax_rows;
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 2,
        d_ff: 24,
        max_ctx_len: 8,
        max_input_len: 6,
        max_target_len: 5,
        k_contexts: 4,
    }
}

fn ctx(tokens: &[TokenId], w: usize) -> Vec<TokenId> {
    let mut t = tokens.to_vec();
    t.resize(w, PAD);
    t
}

#[test]
fn init_is_deterministic_and_finite() {
    let a = Model::<f32>::init(tiny_config(), 7).unwrap();
    let b = Model::<f32>::init(tiny_config(), 7).unwrap();
    assert_eq!(a.params, b.params);
    assert!(a.params.all_finite());
    let c = Model::<f32>::init(tiny_config(), 8).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn head_divisibility_is_checked() {
    let cfg = ModelConfig { d_model: 63, n_heads: 4, ..ModelConfig::new(100) };
    assert!(matches!(Model::<f32>::init(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn encoding_shape_and_padding() {
    let m = Model::<f32>::init(tiny_config(), 1).unwrap();
    let e = m.encode_context(&ctx(&[5, 6, 7], 8), 3).unwrap();
    assert_eq!(e.states.dim(), (8, 16));
    assert_eq!(e.content_len, 3);
    assert!(e.states.slice(s![3.., ..]).iter().all(|&v| v == 0.0));
    assert!(e.is_masked(3) && !e.is_masked(2));
    let empty = m.encode_context(&[PAD; 8], 0).unwrap();
    assert!(empty.is_fully_masked());
    assert!(empty.states.iter().all(|&v| v == 0.0));
    assert!(m.encode_context(&[5, 6], 0).is_err());
    assert!(m.encode_context(&ctx(&[5, PAD, 6], 8), 0).is_err());
}

#[test]
fn batched_encoding_is_block_diagonal() {
    let m = Model::<f32>::init(tiny_config(), 2).unwrap();
    let a = ctx(&[5, 6, 7, 8], 8);
    let b = ctx(&[9, 10, 11, 12, 13, 14], 8);
    let batched = m
        .encode_batched(&[ContextRef { id: 0, tokens: &a }, ContextRef { id: 1, tokens: &b }])
        .unwrap();
    for (single, joint) in [m.encode_context(&a, 0).unwrap(), m.encode_context(&b, 1).unwrap()].iter().zip(&batched) {
        assert_eq!(single.content_len, joint.content_len);
        for (x, y) in single.states.iter().zip(joint.states.iter()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}

#[test]
fn empty_encodings_ignore_the_encoder() {
    let m = Model::<f64>::init(tiny_config(), 3).unwrap();
    let mut perturbed = m.clone();
    for (i, name) in m.params.names().iter().enumerate() {
        if param_group(name) == ParamGroup::Encoder {
            perturbed.params.get_mut(i).mapv_inplace(|v| v + 0.5);
        }
    }
    let x = [PAD, 5, 6, 7];
    let y = [8, 9];
    assert_eq!(m.decode_logits(&x, &y, &[]).unwrap(), perturbed.decode_logits(&x, &y, &[]).unwrap());
}

#[test]
fn concatenated_memory_equals_single_merged_encoding() {
    let m = Model::<f64>::init(tiny_config(), 4).unwrap();
    let h = m.encode_context(&ctx(&[5, 6], 8), 1).unwrap();
    let g = m.encode_context(&ctx(&[7], 8), 2).unwrap();
    let mut merged = h.clone();
    merged.states.row_mut(2).assign(&g.states.row(0));
    merged.content_len = 3;
    let x = [10, 11];
    let a = m.decode_logits(&x, &[12], &[g.clone(), h.clone()]).unwrap();
    let b = m.decode_logits(&x, &[12], &[merged]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn permuted_contexts_give_identical_outputs() {
    let m = Model::<f32>::init(tiny_config(), 5).unwrap();
    let encs: Vec<_> = [[5, 6, 7], [8, 9, 10], [11, 12, 13], [14, 15, 16]]
        .iter()
        .enumerate()
        .map(|(i, t)| m.encode_context(&ctx(t, 8), i as u64).unwrap())
        .collect();
    let mut rev = encs.clone();
    rev.reverse();
    let x = [17, 18, 19];
    assert_eq!(m.decode_logits(&x, &[20], &encs).unwrap(), m.decode_logits(&x, &[20], &rev).unwrap());
    assert_eq!(m.greedy_decode(&x, &encs, 5).unwrap(), m.greedy_decode(&x, &rev, 5).unwrap());
}

#[test]
fn too_many_contexts_is_an_error() {
    let m = Model::<f32>::init(tiny_config(), 5).unwrap();
    let e = m.encode_context(&ctx(&[5], 8), 0).unwrap();
    assert!(m.decode_logits(&[6], &[], &vec![e; 5]).is_err());
}

#[test]
fn causal_logits_ignore_future_tokens() {
    let m = Model::<f64>::init(tiny_config(), 6).unwrap();
    let a = m.decode_logits(&[5, 6, 7], &[8, 9], &[]).unwrap();
    let b = m.decode_logits(&[5, 6, 7], &[8, 20], &[]).unwrap();
    // rows 0..=4 cover BOS, x and y_0
    assert_eq!(a.slice(s![..5, ..]), b.slice(s![..5, ..]));
    assert_ne!(a.row(5), b.row(5));
}

fn zeroed_output(m: &mut Model<f64>) {
    let e = m.params.find("embed").unwrap();
    m.params.get_mut(e).fill(0.0);
}

#[test]
fn uniform_logits_give_ln_vocab() {
    let mut m = Model::<f64>::init(tiny_config(), 7).unwrap();
    zeroed_output(&mut m);
    let ex = Example { input: &[PAD, 5, 6], target: &[7, 8, PAD], contexts: vec![] };
    let l = m.lm_loss(&[ex], false).unwrap();
    assert!((l - 30f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_counts_only_target_tokens() {
    let m = Model::<f64>::init(tiny_config(), 8).unwrap();
    let x = [PAD, PAD, 5, 6];
    let y = [7, 8, 9, PAD, PAD];
    let c0 = ctx(&[10, 11], 8);
    let ex = Example { input: &x, target: &y, contexts: vec![ContextRef { id: 0, tokens: &c0 }] };
    let l = m.lm_loss(std::slice::from_ref(&ex), true).unwrap();
    let enc = m.encode_context(&c0, 0).unwrap();
    let logits = m.decode_logits(&x, &y, &[enc]).unwrap();
    let lp = log_softmax_rows(logits.view());
    // BOS, 5, 6 precede the targets; row 2 predicts y_0
    let manual = -(lp[[2, 7]] + lp[[3, 8]] + lp[[4, 9]]) / 3.0;
    assert!((l - manual).abs() < 1e-12);
    let doubled = m.lm_loss(&[ex.clone(), ex], true).unwrap();
    assert!((l - doubled).abs() < 1e-12);
    let none = Example { input: &x, target: &[PAD; 5], contexts: vec![] };
    assert!(m.lm_loss(&[none], false).is_err());
}

#[test]
fn gradient_matches_finite_differences_on_sampled_coordinates() {
    let m = Model::<f64>::init(tiny_config(), 9).unwrap();
    let c0 = ctx(&[10, 11, 12], 8);
    let c1 = ctx(&[13, 14], 8);
    let x = [PAD, 5, 6];
    let y = [7, 8, PAD];
    let batch = vec![Example {
        input: &x,
        target: &y,
        contexts: vec![ContextRef { id: 1, tokens: &c1 }, ContextRef { id: 0, tokens: &c0 }],
    }];
    let (_, g) = m.grad(&batch, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    for _ in 0..60 {
        let k = rng.gen_range(0..m.params.num_scalars());
        let (id, r, col) = m.params.coord(k);
        let mut p = m.clone();
        p.params.get_mut(id)[[r, col]] += h;
        let lp = p.lm_loss(&batch, true).unwrap();
        p.params.get_mut(id)[[r, col]] -= 2.0 * h;
        let lm = p.lm_loss(&batch, true).unwrap();
        let num = (lp - lm) / (2.0 * h);
        let ana = g.get(id)[[r, col]];
        let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
        assert!(err < 1e-3, "{}: {ana} vs {num}", m.params.name(id));
    }
}

#[test]
fn encoder_gradient_is_zero_without_contexts() {
    let m = Model::<f64>::init(tiny_config(), 10).unwrap();
    let c0 = ctx(&[10, 11, 12], 8);
    let batch = vec![Example { input: &[5, 6], target: &[7, 8], contexts: vec![ContextRef { id: 0, tokens: &c0 }] }];
    let (_, g) = m.grad(&batch, false).unwrap();
    let (_, g_with) = m.grad(&batch, true).unwrap();
    let mut saw_nonzero = false;
    for (i, (name, t)) in g.iter().enumerate() {
        assert!(t.iter().all(|v| v.is_finite()));
        if param_group(name) == ParamGroup::Encoder {
            assert!(t.iter().all(|&v| v == 0.0), "{name}");
            saw_nonzero |= g_with.get(i).iter().any(|&v| v != 0.0);
        }
    }
    assert!(saw_nonzero);
}

#[test]
fn greedy_decode_matches_stepwise_oracle() {
    let m = Model::<f32>::init(tiny_config(), 11).unwrap();
    let enc = m.encode_context(&ctx(&[5, 6, 7], 8), 0).unwrap();
    let x = [8, 9];
    let out = m.greedy_decode(&x, std::slice::from_ref(&enc), 4).unwrap();
    assert!(out.len() <= 4);
    let mut oracle = Vec::new();
    for _ in 0..4 {
        let logits = m.decode_logits(&x, &oracle, std::slice::from_ref(&enc)).unwrap();
        let last = logits.row(logits.nrows() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        if best as TokenId == EOS {
            break;
        }
        oracle.push(best as TokenId);
    }
    assert_eq!(out, oracle);
}

#[test]
fn greedy_decode_stops_on_immediate_eos() {
    let mut m = Model::<f32>::init(tiny_config(), 12).unwrap();
    let b = m.params.find("out.bias").unwrap();
    m.params.get_mut(b)[[0, EOS as usize]] = 1e4;
    assert!(m.greedy_decode(&[5], &[], 5).unwrap().is_empty());
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax([1.0, 3.0, 3.0, 2.0]), 1);
}
