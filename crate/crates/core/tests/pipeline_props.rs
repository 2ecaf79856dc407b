mod common;

use std::sync::Arc;

use proptest::prelude::*;

use specpipe::model::ToyModel;
use specpipe::pipeline::{
    run, LocalBank, Mode, PipelineConfig, RunOutput, Session, StageBank, StopReason,
};
use specpipe::source::{BeamConfig, SyntheticDraft, SyntheticDraftConfig};
use specpipe::tree::TokenId;

use common::{dense_embed, dense_layers, max_abs_diff, path_tokens, toy};

fn reference(model: &ToyModel, prompt: &[TokenId], n: usize) -> Vec<TokenId> {
    let generated = model.sequential_decode(prompt, n).unwrap();
    [prompt.to_vec(), generated].concat()
}

fn draft_for(
    model: &ToyModel,
    prompt: &[TokenId],
    n: usize,
    cfg: SyntheticDraftConfig,
) -> SyntheticDraft {
    SyntheticDraft::new(cfg, model.config().vocab, reference(model, prompt, n + 32))
}

fn decode(
    model: &Arc<ToyModel>,
    cfg: &PipelineConfig,
    prompt: &[TokenId],
    n: usize,
    draft: SyntheticDraftConfig,
) -> RunOutput {
    let mut d = draft_for(model, prompt, n, draft);
    run(Arc::clone(model), cfg, &mut d, prompt, n).unwrap()
}

fn config(stages: usize, w: usize, k: usize) -> PipelineConfig {
    PipelineConfig::new(stages, BeamConfig { w, k })
}

fn draft_strategy() -> impl Strategy<Value = SyntheticDraftConfig> {
    (
        prop::sample::select(vec![0.0, 0.05, 0.5, 1.0]),
        0.0f64..1.0,
        0.0f64..0.95,
        prop::sample::select(vec![0.0, 0.0, 0.2]),
        any::<u64>(),
    )
        .prop_map(|(miss, top1, decay, stall, seed)| SyntheticDraftConfig {
            top1_hit: top1 * (1.0 - miss),
            rank_decay: decay,
            miss_prob: miss,
            stall_prob: stall,
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn output_equals_sequential_decode(
        model_seed in 0u64..1000,
        prompt in prop::collection::vec(0u32..16, 1..6),
        draft in draft_strategy(),
        stages in 2usize..=4,
        w in 1usize..10,
        k in 2usize..5,
        overlap in any::<bool>(),
        vanilla in prop::bool::weighted(0.15),
    ) {
        let model = toy(16, 8, 4, model_seed);
        let prompt: Vec<TokenId> = prompt.into_iter().map(TokenId).collect();
        let mut cfg = config(stages, w, k);
        cfg.overlap = overlap;
        if vanilla {
            cfg.mode = Mode::VanillaPp;
        }
        let out = decode(&model, &cfg, &prompt, 24, draft);
        prop_assert_eq!(out.stop, StopReason::Completed);
        prop_assert_eq!(&out.tokens, &model.sequential_decode(&prompt, 24).unwrap());
        prop_assert_eq!(out.metrics.tokens, 24);
        if draft.stall_prob == 0.0 {
            prop_assert!(out.metrics.steps_per_token.unwrap() <= stages as f64);
        }
    }

    #[test]
    fn worker_threads_change_nothing(
        model_seed in 0u64..1000,
        draft in draft_strategy(),
        stages in 2usize..=4,
        w in 1usize..8,
    ) {
        let model = toy(16, 8, 4, model_seed);
        let prompt = vec![TokenId(2), TokenId(9)];
        let local = config(stages, w, 3);
        let mut threaded = local.clone();
        threaded.workers = true;
        let a = decode(&model, &local, &prompt, 16, draft);
        let b = decode(&model, &threaded, &prompt, 16, draft);
        prop_assert_eq!(a.tokens, b.tokens);
        prop_assert_eq!(a.outcomes, b.outcomes);
        prop_assert_eq!(a.metrics, b.metrics);
        prop_assert_eq!(a.trace.to_csv_string(None), b.trace.to_csv_string(None));
    }
}

/// Steps a session by hand and, after every step, recomputes every in-flight
/// hidden state from scratch along the node's full token sequence.
fn check_in_flight_states(model: Arc<ToyModel>, cfg: PipelineConfig, draft: SyntheticDraftConfig) {
    let prompt = vec![TokenId(4), TokenId(1), TokenId(7)];
    let mut d = draft_for(&model, &prompt, 30, draft);
    let bank = LocalBank::new(Arc::clone(&model), &cfg).unwrap();
    let (mut session, _) = Session::new(Arc::clone(&model), cfg, bank, &prompt).unwrap();
    let mut checked = 0;
    while session.emitted().len() < 24 {
        session.step(&mut d).unwrap().unwrap();
        let verified = session.verified().to_vec();
        let tree = session.tree().clone();
        for stage in session.bank().stages() {
            let packets = [
                (stage.inbox(), stage.layers().start),
                (stage.outbox(), stage.layers().end),
            ];
            for (msg, depth) in packets {
                let Some(msg) = msg else { continue };
                let Some(hidden) = &msg.hidden else {
                    assert!(stage.is_first() && depth == 0);
                    continue;
                };
                for r in 0..hidden.rows() {
                    let id = hidden.slots()[r].node().unwrap();
                    let i = tree.index_of(id).expect("in-flight node missing from tree");
                    assert_eq!(
                        hidden.slots()[r].position(),
                        verified.len() - 1 + tree.depth(i)
                    );
                    assert_eq!(msg.position, hidden.slots()[r].position());
                    let mut seq = verified[..verified.len() - 1].to_vec();
                    seq.extend(path_tokens(&tree, i));
                    let positions: Vec<usize> = (0..seq.len()).collect();
                    let dense =
                        dense_layers(&model, dense_embed(&model, &seq, &positions), 0..depth);
                    let diff = max_abs_diff(hidden.row(r), dense.last().unwrap());
                    assert!(
                        diff < 1e-9,
                        "stage {} node {} off by {diff}",
                        stage.index(),
                        id.0
                    );
                    checked += 1;
                }
            }
        }
        let resident: usize = session
            .bank_mut()
            .audit()
            .unwrap()
            .iter()
            .map(|a| a.packets())
            .sum();
        assert!(session.ledger().balances(resident as u64));
    }
    assert!(checked > 0);
}

#[test]
fn in_flight_hidden_states_match_full_recompute() {
    let model = toy(16, 8, 4, 2);
    check_in_flight_states(
        Arc::clone(&model),
        config(4, 3, 2),
        SyntheticDraftConfig::perfect(1),
    );
    check_in_flight_states(
        Arc::clone(&model),
        config(4, 4, 3),
        SyntheticDraftConfig {
            miss_prob: 0.2,
            seed: 5,
            ..SyntheticDraftConfig::default()
        },
    );
    check_in_flight_states(
        model,
        config(3, 2, 2),
        SyntheticDraftConfig::per_step_hit(0.6, 9),
    );
}

#[test]
fn a_flush_costs_exactly_one_refill() {
    let model = toy(16, 8, 4, 11);
    for m in 2..=4 {
        let out = decode(
            &model,
            &config(m, 4, 2),
            &[TokenId(3)],
            60,
            SyntheticDraftConfig::per_step_hit(0.7, m as u64),
        );
        let verifications: Vec<_> = out
            .outcomes
            .iter()
            .filter(|o| o.verified.is_some())
            .collect();
        assert!(verifications.iter().any(|o| o.hit == Some(false)));
        for pair in verifications.windows(2) {
            let gap = pair[1].step - pair[0].step;
            match pair[0].hit {
                Some(false) => {
                    assert_eq!(gap, m as u64);
                    assert_eq!(pair[0].flush_depth, m);
                }
                // After a hit the next root is already in flight, at most
                // one full pass away when its subtree was shallow.
                _ => assert!((1..=m as u64).contains(&gap)),
            }
        }
    }
}

#[test]
fn steady_state_keeps_every_stage_busy() {
    let model = toy(16, 8, 4, 3);
    let prompt = vec![TokenId(1), TokenId(2)];
    let cfg = config(4, 4, 3);
    let mut d = draft_for(&model, &prompt, 40, SyntheticDraftConfig::perfect(0));
    let bank = LocalBank::new(Arc::clone(&model), &cfg).unwrap();
    let (mut session, _) = Session::new(Arc::clone(&model), cfg, bank, &prompt).unwrap();
    for step in 1..=30u64 {
        let o = session.step(&mut d).unwrap().unwrap();
        assert!(o.drafted);
        if step >= 4 {
            assert_eq!(session.occupied_stages().unwrap(), 4, "step {step}");
        }
        if step > 4 {
            assert_eq!(o.hit, Some(true));
            assert!(o.emitted);
        }
    }
}

#[test]
fn vanilla_pipeline_needs_a_full_pass_per_token() {
    let model = toy(16, 8, 4, 8);
    for m in [2, 3, 4] {
        let mut cfg = config(m, 8, 4);
        cfg.mode = Mode::VanillaPp;
        let out = decode(
            &model,
            &cfg,
            &[TokenId(5), TokenId(6)],
            20,
            SyntheticDraftConfig::perfect(3),
        );
        assert_eq!(out.metrics.steps_per_token, Some(m as f64));
        assert_eq!(out.metrics.hits, 0);
        assert!(out.outcomes.iter().all(|o| !o.drafted));
    }
}

#[test]
fn empty_prompt_and_bad_tokens_are_rejected() {
    let model = toy(16, 8, 4, 1);
    let cfg = config(2, 2, 2);
    let mut d = draft_for(&model, &[TokenId(1)], 4, SyntheticDraftConfig::perfect(0));
    assert!(run(Arc::clone(&model), &cfg, &mut d, &[], 4).is_err());
    assert!(run(Arc::clone(&model), &cfg, &mut d, &[TokenId(99)], 4).is_err());
    let bad = config(5, 2, 2);
    assert!(run(model, &bad, &mut d, &[TokenId(1)], 4).is_err());
}

#[test]
fn stage_layer_split_is_respected() {
    let model = toy(16, 8, 5, 4);
    let mut cfg = config(3, 3, 2);
    cfg.layer_split = Some(vec![1, 3, 1]);
    let prompt = [TokenId(0), TokenId(3)];
    let out = decode(&model, &cfg, &prompt, 20, SyntheticDraftConfig::default());
    assert_eq!(out.tokens, model.sequential_decode(&prompt, 20).unwrap());
    let bank = LocalBank::new(Arc::clone(&model), &cfg).unwrap();
    let ranges: Vec<_> = (0..bank.stage_count())
        .map(|i| bank.stages()[i].layers())
        .collect();
    assert_eq!(ranges, vec![0..1, 1..4, 4..5]);
}
