use super::*;
use crate::corpus::PAD;
use crate::model::{param_group, ModelConfig, ParamGroup};
use crate::retrieval::dense::{in_batch_softmax_loss, Embedder, EmbedderConfig, RetrievalTriple, Role};
use crate::utility::{Condition, UtilityTable};
use proptest::prelude::*;
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        max_ctx_len: 6,
        max_input_len: 5,
        max_target_len: 5,
        k_contexts: 2,
    }
}

fn copy_task(n: usize, seed: u64) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<u32> = (0..4).map(|_| rng.gen_range(4..20)).collect();
            let c: Vec<u32> = (0..6).map(|_| rng.gen_range(4..20)).collect();
            Triplet { input: x.clone(), target: x, contexts: vec![(0, c.clone()), (1, c)] }
        })
        .collect()
}

fn quick(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 4, lr: 3e-3, warmup_steps: 20, eval_every: 0, ..TrainConfig::default() }
}

#[test]
fn copy_task_loss_halves_in_200_steps() {
    let data = copy_task(20, 1);
    let m = Model::<f32>::init(tiny(), 1).unwrap();
    let before = eval_lm(&m, &data, false).unwrap().loss;
    let (m, hist) = train_lm(m, &quick(200), &data, &data, false, None).unwrap();
    let after = eval_lm(&m, &data, false).unwrap().loss;
    assert!(after <= 0.5 * before, "{before} -> {after}");
    assert_eq!(hist.records.len(), 1);
    assert_eq!(hist.last().unwrap().eval_loss, after);
}

#[test]
fn training_is_seed_deterministic() {
    let data = copy_task(10, 2);
    let run = || train_lm(Model::<f32>::init(tiny(), 3).unwrap(), &quick(15), &data, &[], true, None).unwrap().0;
    assert_eq!(run().params, run().params);
}

#[test]
fn no_retrieval_training_ignores_contexts_and_freezes_the_encoder() {
    let data = copy_task(10, 3);
    let mut shuffled = data.clone();
    for t in &mut shuffled {
        t.contexts.reverse();
        t.contexts[0].1 = vec![7, 7, 7, PAD, PAD, PAD];
    }
    let init = Model::<f32>::init(tiny(), 4).unwrap();
    let (a, _) = train_lm(init.clone(), &quick(12), &data, &[], false, None).unwrap();
    let (b, _) = train_lm(init.clone(), &quick(12), &shuffled, &[], false, None).unwrap();
    assert_eq!(a.params, b.params);
    for (i, name) in a.params.names().iter().enumerate() {
        if param_group(name) == ParamGroup::Encoder {
            assert_eq!(a.params.get(i), init.params.get(i), "{name}");
        }
    }
}

#[test]
fn retrieval_training_needs_k_contexts() {
    let mut data = copy_task(3, 4);
    data[1].contexts.pop();
    let m = Model::<f32>::init(tiny(), 5).unwrap();
    assert!(matches!(train_lm(m, &quick(2), &data, &[], true, None), Err(Error::InvalidInput(_))));
}

#[test]
fn non_finite_loss_aborts() {
    let data = copy_task(4, 5);
    let mut m = Model::<f32>::init(tiny(), 6).unwrap();
    let e = m.params.find("embed").unwrap();
    m.params.get_mut(e).fill(f32::NAN);
    assert!(matches!(train_lm(m, &quick(3), &data, &[], false, None), Err(Error::Diverged(_))));
}

#[test]
fn warm_start_draws_from_the_subset_first() {
    let data = copy_task(10, 6);
    let m = Model::<f32>::init(tiny(), 7).unwrap();
    let cfg = TrainConfig { warm_start_steps: 5, ..quick(5) };
    let (a, _) = train_lm(m.clone(), &cfg, &data, &[], false, Some(&[2])).unwrap();
    let only: Vec<Triplet> = vec![data[2].clone()];
    let (b, _) = train_lm(m, &cfg, &only, &[], false, None).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn top_fraction_examples() {
    assert_eq!(top_fraction(&[3.0, 1.0, 2.0], 2.0 / 3.0).unwrap(), vec![0, 2]);
    assert_eq!(top_fraction(&[1.0; 5], 1.0).unwrap(), vec![0, 1, 2, 3, 4]);
    let ten: Vec<f64> = (0..10).map(|i| (i * 7 % 10) as f64).collect();
    assert_eq!(top_fraction(&ten, 0.1).unwrap(), vec![7]);
    assert_eq!(top_fraction(&[2.0, 2.0, 1.0], 0.5).unwrap(), vec![0, 1]);
    assert!(top_fraction(&[1.0], 0.0).is_err());
}

#[test]
fn warm_start_subset_uses_proxy_utility() {
    let mut table = UtilityTable::default();
    table.cells[Condition::InContextNotInInput.index()].mean = 1.0;
    let t = |y: Vec<u32>, c: Vec<u32>| Triplet { input: vec![4], target: y, contexts: vec![(0, c)] };
    let data = vec![t(vec![5, 6], vec![9]), t(vec![5, 6], vec![5, 6]), t(vec![5, 6], vec![5])];
    assert_eq!(warm_start_subset(&data, &table, 2.0 / 3.0).unwrap(), vec![1, 2]);
}

proptest! {
    #[test]
    fn top_fraction_is_superset_monotone(scores in proptest::collection::vec(-5i32..5, 1..30), a in 0.01f64..1.0, b in 0.01f64..1.0) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = top_fraction(&scores, lo).unwrap();
        let big = top_fraction(&scores, hi).unwrap();
        prop_assert!(small.iter().all(|i| big.contains(i)));
    }
}

fn retrieval_pairs(n: usize, seed: u64) -> Vec<RetrievalTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let topic: Vec<u32> = (0..3).map(|_| rng.gen_range(4..30)).collect();
            let noise = |rng: &mut ChaCha8Rng| rng.gen_range(4..30);
            let query = vec![topic[0], topic[1], noise(&mut rng)];
            let positive = vec![topic[0], topic[1], topic[2], noise(&mut rng)];
            RetrievalTriple { query, positive, hard_negative: None }
        })
        .collect()
}

fn mean_rank(e: &Embedder<f32>, data: &[RetrievalTriple]) -> f64 {
    let qs = e.embed_all(&data.iter().map(|t| t.query.clone()).collect::<Vec<_>>(), Role::Query).unwrap();
    let ds = e.embed_all(&data.iter().map(|t| t.positive.clone()).collect::<Vec<_>>(), Role::Document).unwrap();
    let scores = qs.dot(&ds.t());
    let mut total = 0usize;
    for i in 0..data.len() {
        total += (0..data.len()).filter(|&j| scores[[i, j]] > scores[[i, i]]).count();
    }
    total as f64 / data.len() as f64
}

#[test]
fn retriever_training_improves_heldout_ranking() {
    let train = retrieval_pairs(200, 1);
    let test = retrieval_pairs(40, 2);
    let cfg = EmbedderConfig { vocab_size: 30, hidden: 32, dim: 16, max_len: 8, shared: true };
    let init = Embedder::<f32>::init(cfg, 3).unwrap();
    let tc = TrainConfig { steps: 300, batch_size: 16, lr: 1e-2, warmup_steps: 10, ..TrainConfig::default() };
    let (trained, losses) = train_retriever(init.clone(), &tc, &train).unwrap();
    assert!(mean_rank(&trained, &test) < mean_rank(&init, &test));
    let batch = &train[..16];
    assert!(in_batch_softmax_loss(&trained, batch).unwrap() < in_batch_softmax_loss(&init, batch).unwrap());
    assert_eq!(losses.len(), 300);
    let (again, _) = train_retriever(init, &tc, &train).unwrap();
    assert_eq!(again, trained);
}
