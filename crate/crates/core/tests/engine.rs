mod common;

use d3_core::analysis::TailPerturbation;
use d3_core::{
    CacheError, DecodeParams, DepthSchedule, Engine, EngineError, FillPolicy, KeptSet, LayerPlan,
};
use proptest::prelude::*;

use common::*;

fn params(max_new: usize, batch: usize) -> DecodeParams {
    DecodeParams {
        max_new_tokens: max_new,
        eos_token: None,
        batch_size: batch,
        seed: 0,
    }
}

fn plan_strategy(l: usize) -> impl Strategy<Value = DepthSchedule> {
    prop_oneof![
        (0.0..1.0f64, 0.3..=1.0f64, 0usize..3)
            .prop_map(move |(s, a, t)| DepthSchedule::d3(l, s, a, t).unwrap()),
        (1..=l, 1usize..16).prop_flat_map(move |(lower, ramp)| (lower..=l)
            .prop_map(move |upper| DepthSchedule::linear_head(l, upper, lower, ramp).unwrap())),
        (1..=l).prop_map(move |e| DepthSchedule::constant_tail(l, e).unwrap()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batched_equals_unbatched(
        (l, plan) in (1usize..=5).prop_flat_map(|l| (Just(l), plan_strategy(l))),
        seed in 0u64..1000,
        batch in 2usize..=5,
    ) {
        let model = random_model(config(24, 16, l, 2, 24, 48), seed);
        let prompts = random_prompts(5, 24, 1, 12, seed + 1);
        let e = Engine::new(&model);
        let a = e.generate(&plan, &prompts, &params(10, batch)).unwrap();
        let b = e.generate(&plan, &prompts, &params(10, 1)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.untimed(), y.untimed());
        }
    }

    #[test]
    fn nested_schedules_never_miss_under_strict(
        (l, plan) in (1usize..=6).prop_flat_map(|l| (Just(l), plan_strategy(l))),
        seed in 0u64..1000,
    ) {
        let model = random_model(config(24, 8, l, 1, 16, 40), seed);
        let prompts = random_prompts(3, 24, 1, 10, seed);
        let traces = Engine::with_policy(&model, FillPolicy::Strict)
            .generate(&plan, &prompts, &params(16, 3))
            .unwrap();
        prop_assert!(traces.iter().all(|t| t.missing_events == 0));
    }
}

#[test]
fn step_zero_is_full_depth_and_decode_steps_follow_the_plan() {
    let model = random_model(config(32, 16, 6, 2, 32, 64), 3);
    let plan = DepthSchedule::d3(6, 0.5, 0.8, 1).unwrap();
    let t = &Engine::new(&model)
        .generate(&plan, &[vec![1, 2, 3]], &params(12, 1))
        .unwrap()[0];
    assert_eq!(t.prompt_length, 3);
    assert_eq!(t.steps.len(), 12);
    assert_eq!(t.steps[0].kept_set, KeptSet::full(6));
    for s in &t.steps[1..] {
        assert_eq!(s.kept_set, plan.kept_set(s.step));
        assert_eq!(s.kept_count, s.kept_set.len());
    }
}

#[test]
fn fill_policies_agree_when_nothing_is_missing() {
    let model = random_model(config(32, 16, 4, 2, 32, 64), 5);
    let prompts = random_prompts(4, 32, 2, 9, 6);
    let plan = DepthSchedule::d3(4, 0.25, 0.85, 1).unwrap();
    let runs: Vec<_> = [
        FillPolicy::Strict,
        FillPolicy::TensorCopy,
        FillPolicy::Reproject,
    ]
    .into_iter()
    .map(|p| {
        Engine::with_policy(&model, p)
            .generate(&plan, &prompts, &params(10, 2))
            .unwrap()
            .iter()
            .map(|t| t.untimed())
            .collect::<Vec<_>>()
    })
    .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn windowed_tail_copy_exercises_fill_policies() {
    let model = random_model(config(32, 16, 4, 2, 32, 64), 7);
    let prompts = vec![vec![4, 5, 6]];
    let plan = TailPerturbation::new(4, 1, 2, Some(2)).unwrap();
    assert!(!plan.kept_set(3).is_subset(&plan.kept_set(2)));

    let strict =
        Engine::with_policy(&model, FillPolicy::Strict).generate(&plan, &prompts, &params(6, 1));
    assert!(matches!(
        strict,
        Err(EngineError::Cache(CacheError::MissingState { .. }))
    ));
    for policy in [FillPolicy::TensorCopy, FillPolicy::Reproject] {
        let t = Engine::with_policy(&model, policy)
            .generate(&plan, &prompts, &params(6, 1))
            .unwrap();
        // steps 1 and 2 skip layers 2..4 at two positions
        assert_eq!(t[0].missing_events, 4, "{policy:?}");
    }
}

#[test]
fn rows_stop_at_eos_and_max_seq() {
    let model = random_model(config(16, 8, 2, 1, 16, 8), 9);
    let plan = DepthSchedule::full(2).unwrap();
    let long = Engine::new(&model)
        .generate(&plan, &[vec![1; 6]], &params(10, 1))
        .unwrap();
    // positions 6 and 7 are the only free slots
    assert_eq!(long[0].steps.len(), 3);

    let first = long[0].steps[0].token;
    let p = DecodeParams {
        eos_token: Some(first),
        ..params(10, 1)
    };
    let t = Engine::new(&model)
        .generate(&plan, &[vec![1; 6]], &p)
        .unwrap();
    assert_eq!(t[0].steps.len(), 1);

    let too_long = Engine::new(&model).generate(&plan, &[vec![1; 9]], &params(2, 1));
    assert!(matches!(
        too_long,
        Err(EngineError::SequenceTooLong { len: 9, max_seq: 8 })
    ));
}

#[test]
fn generation_matches_naive_greedy_on_full_depth() {
    let model = random_model(config(40, 32, 3, 4, 64, 64), 13);
    let prompt = vec![3, 14, 15, 9, 2, 6];
    let t = &Engine::new(&model)
        .generate(
            &DepthSchedule::full(3).unwrap(),
            std::slice::from_ref(&prompt),
            &params(8, 1),
        )
        .unwrap()[0];
    let mut seq = prompt;
    for s in &t.steps {
        let logits = naive_logits(&model, &seq).pop().unwrap();
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        // greedy picks agree whenever the top two logits are clearly apart
        if sorted[0] - sorted[1] > 1e-4 {
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(s.token as usize, best);
        }
        seq.push(s.token);
    }
}
