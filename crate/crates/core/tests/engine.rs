mod common;

use filab::analysis::logit_lens;
use filab::model::{forward, forward_cached, forward_intervened, InterventionPlan, NodeRef, PatchSources};
use proptest::prelude::*;
use rand::SeedableRng;

fn max_abs_diff(a: ndarray::ArrayView2<f32>, b: ndarray::ArrayView2<f32>) -> f32 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cache_invariants_hold(seed in any::<u64>(), len in 2usize..60) {
        let model = common::scaled(seed % 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tokens = common::random_tokens(&mut rng, len);
        let (logits, cache) = forward_cached(&model, &tokens).unwrap();
        prop_assert!(cache.max_decomposition_error() <= 1e-5);
        for layer in &cache.pattern {
            for p in layer {
                for q in 0..len {
                    let row = p.row(q);
                    let sum: f64 = row.iter().map(|&v| v as f64).sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-6, "row {q} sums to {sum}");
                    prop_assert!(row.iter().skip(q + 1).all(|&v| v == 0.0));
                }
            }
        }
        let all: Vec<u32> = (0..model.config.vocab_size as u32).collect();
        let lens = logit_lens(&model, &cache, &all, len - 1).unwrap();
        let last = lens.last().unwrap();
        for (t, v) in last.iter().enumerate() {
            prop_assert!((v - logits[[len - 1, t]]).abs() <= 1e-5);
        }
        prop_assert_eq!(forward(&model, &tokens).unwrap(), logits);
    }

    #[test]
    fn later_tokens_never_reach_earlier_positions(seed in any::<u64>(), len in 3usize..40, at in 1usize..39) {
        let model = common::scaled(seed % 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tokens = common::random_tokens(&mut rng, len);
        let p = 1 + at % (len - 1);
        let mut changed = tokens.clone();
        changed[p] = if tokens[p] == 2 { 3 } else { 2 };
        let (_, a) = forward_cached(&model, &tokens).unwrap();
        let (_, b) = forward_cached(&model, &changed).unwrap();
        for ((node, x), (_, y)) in a.tensors().into_iter().zip(b.tensors()) {
            prop_assert_eq!(x.slice(ndarray::s![..p, ..]), y.slice(ndarray::s![..p, ..]), "{}", node);
        }
    }

    #[test]
    fn directives_leave_earlier_layers_untouched(seed in any::<u64>(), layer in 0usize..3, head in 0usize..4) {
        let model = common::scaled(seed % 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tokens = common::random_tokens(&mut rng, 24);
        let (_, clean) = forward_cached(&model, &tokens).unwrap();
        let plan = InterventionPlan::new().zero(NodeRef::head_output(layer, head));
        let (_, cut) = forward_intervened(&model, &tokens, &plan, PatchSources::none()).unwrap();
        for l in 0..layer {
            prop_assert_eq!(&clean.resid_post[l], &cut.resid_post[l]);
            prop_assert_eq!(&clean.mlp_out[l], &cut.mlp_out[l]);
        }
        prop_assert_eq!(&clean.resid_pre[layer], &cut.resid_pre[layer]);
        prop_assert_eq!(&clean.pattern[layer], &cut.pattern[layer]);
        prop_assert!(cut.head_out[layer][head].iter().all(|&v| v == 0.0));
        prop_assert!(max_abs_diff(cut.resid_post[layer].view(), clean.resid_post[layer].view()) > 0.0);
    }
}

#[test]
fn empty_plan_matches_plain_forward() {
    let model = common::scaled(1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let tokens = common::random_tokens(&mut rng, 30);
    let (a, ca) = forward_cached(&model, &tokens).unwrap();
    let (b, cb) = forward_intervened(&model, &tokens, &InterventionPlan::new(), PatchSources::none()).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}
