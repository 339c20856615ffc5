use std::collections::BTreeSet;

use lpilab_core::attribution::{
    all_neurons, example_importances, neuron_coefficient, neuron_output, AttributionOptions, ImportanceTable,
    NeuronKind, NeuronRef, NeuronStats, ProfileAggregate,
};
use lpilab_core::dataset::{parse_relations, relations_to_jsonl, synth_facts, Prompt, SynthSpec, Tokenizer, UnknownPolicy};
use lpilab_core::intervention::{ablation_drop, prompt_logits, MaskSpec};
use lpilab_core::metrics::{
    cross_step_cv, jaccard, layer_consistency, positive_gain_concentration, random_jaccard_baseline, top_count,
};
use lpilab_core::model::{Checkpoint, Model, Params};
use lpilab_core::numerics::max_abs_diff;
use lpilab_core::oracle;
use lpilab_core::selftest::random_config;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model_from_seed(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_config(&mut rng, seed % 2 == 1);
    let params = Params::random(&cfg, rng.gen(), 0.5);
    Model::new(cfg, params).unwrap()
}

fn tokens_for(model: &Model, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let len = rng.gen_range(1..=model.config.max_seq);
    (0..len).map(|_| rng.gen_range(0..model.config.vocab)).collect()
}

fn table(scores: &[f64]) -> ImportanceTable {
    ImportanceTable {
        step: 0,
        examples: 1,
        aggregate: ProfileAggregate::SignedSum,
        neurons: (0..scores.len()).map(|c| NeuronRef::ffn(0, None, c)).collect(),
        stats: scores
            .iter()
            .map(|&s| NeuronStats {
                mean_i: s,
                mean_abs_i: s,
                mean_pos_i: s,
            })
            .collect(),
        ffn_profile: vec![scores.iter().sum()],
        attn_profile: vec![0.0],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neuron_outputs_sum_to_block_outputs(seed in 0u64..100_000) {
        let model = model_from_seed(seed);
        let tokens = tokens_for(&model, seed);
        let trace = model.forward(&tokens).unwrap();
        let d = model.config.d_model;
        for pos in 0..tokens.len() {
            let mut ffn = vec![vec![0.0; d]; model.config.layers];
            let mut attn = vec![vec![0.0; d]; model.config.layers];
            for n in all_neurons(&model.config) {
                let out = neuron_output(&model, &trace, &n, pos).unwrap();
                let acc = if n.kind == NeuronKind::Ffn { &mut ffn[n.layer] } else { &mut attn[n.layer] };
                acc.iter_mut().zip(&out).for_each(|(a, v)| *a += v);
            }
            for (l, lt) in trace.layers.iter().enumerate() {
                prop_assert!(max_abs_diff(&ffn[l], lt.ffn.output().row(pos)) < 1e-10);
                prop_assert!(max_abs_diff(&attn[l], lt.attn.output.row(pos)) < 1e-10);
            }
        }
    }

    #[test]
    fn importance_matches_oracle_and_zero_coefficient_gives_zero(seed in 0u64..100_000) {
        let model = model_from_seed(seed);
        let tokens = tokens_for(&model, seed);
        let target = (seed as usize) % model.config.vocab;
        let prompt = Prompt { tokens: tokens.clone(), target };
        let fast = example_importances(&model, &prompt, AttributionOptions::default()).unwrap();
        let neurons = all_neurons(&model.config);
        let slow = oracle::importances(&model, &tokens, target, &neurons);
        prop_assert!(max_abs_diff(&fast, &slow) < 1e-10);
        let trace = model.forward(&tokens).unwrap();
        for (n, &i) in neurons.iter().zip(&fast) {
            if neuron_coefficient(&model, &trace, n, tokens.len() - 1).unwrap() == 0.0 {
                prop_assert_eq!(i, 0.0);
            }
        }
    }

    #[test]
    fn all_heads_mask_equals_zero_attention_oracle(seed in 0u64..100_000) {
        let model = model_from_seed(seed);
        let tokens = tokens_for(&model, seed);
        let prompt = Prompt { tokens: tokens.clone(), target: 0 };
        let masked = prompt_logits(&model, std::slice::from_ref(&prompt), &MaskSpec::all_heads(&model)).unwrap();
        let o = oracle::forward(&model, &tokens, true);
        prop_assert!(max_abs_diff(&masked[0], o.logits.last().unwrap()) < 1e-10);
        let empty = ablation_drop(&model, &[prompt], &MaskSpec::default()).unwrap();
        prop_assert!(empty.drop_pct.is_none_or(|d| d == 0.0));
    }

    #[test]
    fn jaccard_is_a_bounded_symmetric_similarity(
        a in proptest::collection::btree_set(0u32..40, 0..20),
        b in proptest::collection::btree_set(0u32..40, 0..20),
    ) {
        let j = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
        if a.is_disjoint(&b) && !(a.is_empty() && b.is_empty()) {
            prop_assert_eq!(j, 0.0);
        }
    }

    #[test]
    fn top_count_is_within_bounds(n in 1usize..100_000, f in 1e-6f64..=1.0) {
        let k = top_count(n, f).unwrap();
        prop_assert!(k >= 1 && k <= n);
        prop_assert!(k as f64 >= f * n as f64 - 1e-6);
    }

    #[test]
    fn gain_concentration_lies_in_unit_interval(
        prev in proptest::collection::vec(0.0f64..1.0, 1..60),
        noise in proptest::collection::vec(-1.0f64..1.0, 60),
        f in 0.001f64..=1.0,
    ) {
        let cur: Vec<f64> = prev.iter().zip(&noise).map(|(p, e)| (p + e).abs()).collect();
        if let Some(r) = positive_gain_concentration(&table(&prev), &table(&cur), f, NeuronKind::Ffn).unwrap() {
            prop_assert!((0.0..=1.0).contains(&r));
            // The top k gains hold at least a k/n share of the total.
            prop_assert!(r >= top_count(prev.len(), f).unwrap() as f64 / prev.len() as f64 - 1e-12);
        }
    }

    #[test]
    fn profile_statistics_are_bounded_and_scale_invariant(
        raw in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 2..7),
        scale in 0.1f64..10.0,
    ) {
        let scaled: Vec<Vec<f64>> = raw.iter().map(|p| p.iter().map(|v| v * scale).collect()).collect();
        let c = layer_consistency(&raw).unwrap();
        if let Some(r) = c.rho_avg {
            prop_assert!((-1.0..=1.0).contains(&r));
            let r2 = layer_consistency(&scaled).unwrap().rho_avg.unwrap();
            prop_assert!((r - r2).abs() < 1e-9);
        }
        if let Some(s) = cross_step_cv(&raw).unwrap().sigma_rel {
            prop_assert!(s >= 0.0);
            let s2 = cross_step_cv(&scaled).unwrap().sigma_rel.unwrap();
            prop_assert!((s - s2).abs() < 1e-9 * s.max(1.0));
        }
    }

    #[test]
    fn random_baseline_is_a_probability(n in 1usize..500, f in 0.01f64..=1.0, seed in 0u64..1000) {
        let b = random_jaccard_baseline(n, f, 20, seed).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert_eq!(b, random_jaccard_baseline(n, f, 20, seed).unwrap());
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in 0u64..100_000, step in 0u64..10_000) {
        let model = model_from_seed(seed);
        let mut params = model.params.clone();
        params.map_values(|v| v as f32 as f64);
        let ckpt = Checkpoint { step, model: Model::new(model.config.clone(), params).unwrap() };
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.model.params, ckpt.model.params);
    }

    #[test]
    fn synthetic_corpus_round_trips(relations in 1usize..14, entities in 1usize..12, seed in 0u64..1000) {
        let facts = synth_facts(&SynthSpec::new(relations, entities, seed)).unwrap();
        let text = relations_to_jsonl(&facts);
        prop_assert_eq!(&parse_relations(&text, "mem").unwrap(), &facts);
        let tok = Tokenizer::from_examples(&facts);
        for ex in &facts {
            let s = format!("{} {}", ex.prompt_text(), ex.object);
            let ids = tok.encode(&s, UnknownPolicy::Strict).unwrap();
            prop_assert_eq!(tok.decode(&ids), s.split_whitespace().collect::<Vec<_>>().join(" "));
        }
        let unique: BTreeSet<(&str, &str, &str)> =
            facts.iter().map(|f| (f.relation.as_str(), f.subject.as_str(), f.template.as_str())).collect();
        prop_assert_eq!(unique.len(), facts.len());
    }
}
