use std::collections::BTreeSet;

use proptest::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

use nrs_core::corpus::synth::{contains_answer, oracle_value};
use nrs_core::corpus::{
    build_utterance_instances, generate_synthetic, parse_dataset, split_dataset, write_dataset, GeneratorConfig,
    SplitRatios,
};
use nrs_core::embed::{build_features, tokenize, Combine, EmbeddingProvider, HashedEmbedder, PoolingSpec, TokenPool};
use nrs_core::model::{
    backward, forward, init_params, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta,
};
use nrs_core::optim::hinge_loss;
use nrs_core::select::{argmax_first, clopper_pearson, cohens_kappa, cosine};

fn small_config(topics: usize, convs: usize, turns: usize, rate: f64) -> GeneratorConfig {
    GeneratorConfig {
        topics,
        conversations_per_topic: convs,
        mean_turns: turns,
        context_dependent_rate: rate,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_round_trips(seed in any::<u64>(), topics in 1usize..4, convs in 1usize..4, turns in 1usize..5) {
        let data = generate_synthetic(&small_config(topics, convs, turns, 0.5), seed).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        prop_assert_eq!(parse_dataset(&buf[..]).unwrap(), data);
    }

    #[test]
    fn instances_match_realized_sequence(seed in any::<u64>(), turns in 1usize..8, window in 0usize..7, open in any::<bool>()) {
        let cfg = GeneratorConfig { engine_open: open, ..small_config(1, 1, turns, 0.5) };
        let conv = generate_synthetic(&cfg, seed).unwrap().remove(0);
        let mut realized: Vec<String> = conv.engine_open.iter().cloned().collect();
        let instances = build_utterance_instances(&conv, window);
        prop_assert_eq!(instances.len(), conv.turns.len());
        for (inst, turn) in instances.iter().zip(&conv.turns) {
            let start = realized.len().saturating_sub(window);
            prop_assert_eq!(&inst.context, &realized[start..].to_vec());
            prop_assert_eq!(&inst.query, &turn.user_query);
            prop_assert_eq!(&inst.gold, &turn.gold);
            realized.push(turn.user_query.clone());
            realized.push(turn.gold.clone());
        }
    }

    #[test]
    fn split_is_a_partition(seed in any::<u64>(), topics in 1usize..5, convs in 1usize..12) {
        let data = generate_synthetic(&small_config(topics, convs, 2, 0.5), 1).unwrap();
        let s = split_dataset(&data, SplitRatios::default(), seed).unwrap();
        let ids = |v: &[nrs_core::corpus::Conversation]| v.iter().map(|c| c.id.clone()).collect::<Vec<_>>();
        let (tr, va, te) = (ids(&s.train), ids(&s.valid), ids(&s.test));
        let all: BTreeSet<String> = tr.iter().chain(&va).chain(&te).cloned().collect();
        prop_assert_eq!(all.len(), data.len());
        prop_assert_eq!(tr.len() + va.len() + te.len(), data.len());
        if convs >= 3 {
            prop_assert!(!va.is_empty() && !te.is_empty());
        } else {
            prop_assert_eq!(tr.len(), data.len());
        }
        let again = split_dataset(&data, SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(ids(&again.test), te);
    }

    #[test]
    fn labels_rederive_from_text(seed in any::<u64>(), rate in 0.0f64..=1.0) {
        let cfg = small_config(3, 2, 4, rate);
        for conv in generate_synthetic(&cfg, seed).unwrap() {
            let topic: usize = conv.topic[1..].parse().unwrap();
            for turn in &conv.turns {
                let slot_tok = turn.user_query.split_whitespace().last().unwrap();
                let slot: usize = slot_tok[1..].parse().unwrap();
                let value = format!("v{}", oracle_value(topic, slot, cfg.values, seed));
                let expected: Vec<String> = turn
                    .candidates
                    .iter()
                    .filter(|c| contains_answer(&c.text, &conv.topic, slot_tok, &value))
                    .map(|c| c.agent_id.clone())
                    .collect();
                prop_assert_eq!(turn.labels.as_ref().unwrap(), &expected);
                prop_assert!(contains_answer(&turn.gold, &conv.topic, slot_tok, &value));
            }
        }
    }

    #[test]
    fn hashed_rows_are_unit_and_deterministic(text in "[a-z ]{0,40}", k in 1usize..32, seed in any::<u64>(), alpha in 0.01f64..=1.0) {
        let e = HashedEmbedder::new(k, seed, alpha).unwrap();
        let toks = tokenize(&text);
        let m = e.embed(&toks).unwrap();
        prop_assert_eq!(m.rows(), toks.len());
        for row in m.iter_rows() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
        let again = HashedEmbedder::new(k, seed, alpha).unwrap().embed(&toks).unwrap();
        prop_assert_eq!(m, again);
    }

    #[test]
    fn feature_layout(k in 1usize..8, window in 0usize..4, present in 0usize..6, avg in any::<bool>()) {
        let e = HashedEmbedder::new(k, 0, 0.7).unwrap();
        let spec = PoolingSpec { token_pool: if avg { TokenPool::Avg } else { TokenPool::Last }, combine: Combine::Concat };
        let context: Vec<String> = (0..present).map(|i| format!("utterance {i}")).collect();
        let x = build_features(&e, &spec, &context, "query", "response", window).unwrap();
        prop_assert_eq!(x.len(), (window + 2) * k);
        let padded = window.saturating_sub(present);
        prop_assert!(x[..padded * k].iter().all(|v| *v == 0.0));
        prop_assert!(x[padded * k..].iter().all(|v| *v != 0.0 || k == 1));
        let sum = PoolingSpec { combine: Combine::Sum, ..spec };
        prop_assert_eq!(build_features(&e, &sum, &context, "query", "response", window).unwrap().len(), k);
    }

    #[test]
    fn backward_is_linear_and_matches_differences(seed in any::<u64>(), d in 1usize..6, h in 1usize..5, scale in -3.0f64..3.0) {
        let p = init_params(d, h, 3, seed).unwrap();
        let x: Vec<f64> = (0..d).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 / 500.0) - 1.0).collect();
        let (_, tape) = forward(&p, &x).unwrap();
        let g1 = backward(&p, &tape, 1.0).unwrap();
        let gs = backward(&p, &tape, scale).unwrap();
        for (a, b) in g1.slices().into_iter().flatten().zip(gs.slices().into_iter().flatten()) {
            prop_assert!((a * scale - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        // The head bias always has derivative one.
        prop_assert_eq!(g1.head.bias, 1.0);
    }

    #[test]
    fn hinge_is_nonnegative_with_opposite_gradients(sg in -5.0f64..5.0, sa in -5.0f64..5.0, delta in 0.0f64..3.0) {
        let h = hinge_loss(sg, sa, delta);
        prop_assert!(h.loss >= 0.0);
        prop_assert_eq!(h.d_gold, -h.d_agent);
        prop_assert_eq!(h.loss == 0.0, h.d_gold == 0.0);
    }

    #[test]
    fn argmax_picks_first_maximum(scores in prop::collection::vec(-3i32..3, 1..12)) {
        let s: Vec<f64> = scores.iter().map(|v| *v as f64).collect();
        let i = argmax_first(&s).unwrap();
        prop_assert!(s.iter().all(|v| *v <= s[i]));
        prop_assert!(s[..i].iter().all(|v| *v < s[i]));
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-10.0f64..10.0, 1..8), b in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        let n = a.len().min(b.len());
        let c = cosine(&a[..n], &b[..n]).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn clopper_pearson_matches_cdf_inversion(n in 1u64..300, frac in 0.0f64..=1.0) {
        let k = ((n as f64) * frac).round() as u64;
        let (lo, hi) = clopper_pearson(k, n, 0.05).unwrap();
        prop_assert!(lo <= k as f64 / n as f64 && k as f64 / n as f64 <= hi);
        if k > 0 {
            let upper_tail = 1.0 - Binomial::new(lo, n).unwrap().cdf(k - 1);
            prop_assert!((upper_tail - 0.025).abs() < 1e-7, "upper tail {}", upper_tail);
        }
        if k < n {
            let lower_tail = Binomial::new(hi, n).unwrap().cdf(k);
            prop_assert!((lower_tail - 0.025).abs() < 1e-7, "lower tail {}", lower_tail);
        }
    }

    #[test]
    fn kappa_matches_contingency_table(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..40)) {
        let mut table = [[0.0f64; 3]; 3];
        for &(a, b) in &pairs {
            table[a as usize][b as usize] += 1.0;
        }
        let n = pairs.len() as f64;
        let p_o: f64 = (0..3).map(|i| table[i][i]).sum::<f64>() / n;
        let p_e: f64 = (0..3)
            .map(|i| table[i].iter().sum::<f64>() * (0..3).map(|r| table[r][i]).sum::<f64>())
            .sum::<f64>() / (n * n);
        match cohens_kappa(&pairs) {
            Ok(k) if p_e < 1.0 => prop_assert!((k - (p_o - p_e) / (1.0 - p_e)).abs() < 1e-12),
            Ok(k) => prop_assert_eq!(k, 1.0),
            Err(_) => prop_assert!(p_e >= 1.0 - 1e-15),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(seed in any::<u64>(), k in 1usize..6, window in 0usize..3, hidden in 1usize..6) {
        let pooling = PoolingSpec::default();
        let params = init_params(pooling.input_dim(k, window), hidden, 3, seed).unwrap();
        let meta = CheckpointMeta::for_params(&params, k, window, pooling, seed);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params, &meta).unwrap();
        let (p2, m2) = read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(&m2, &meta);
        let bits = |p: &nrs_core::model::ScorerParams| p.slices().into_iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&p2), bits(&params));
    }
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ss");
    let pooling = PoolingSpec::default();
    let params = init_params(pooling.input_dim(4, 2), 8, 3, 5).unwrap();
    let meta = CheckpointMeta::for_params(&params, 4, 2, pooling, 5);
    save_checkpoint(&path, &params, &meta).unwrap();
    let (p2, m2) = load_checkpoint(&path).unwrap();
    assert_eq!(p2, params);
    assert_eq!(m2, meta);
}
