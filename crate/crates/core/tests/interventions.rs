mod common;

use filab::circuits::{
    eval_completeness, eval_faithfulness, eval_minimality, f_with_knockout, Circuit, CompletenessStrategy,
    KnockoutPolicy, Side,
};
use filab::interventions::{
    activation_patch_from, all_writers, logit_diff, path_patch_runs, relative_logit_diff, Ablation, AblationMode,
    MeanBank, MlpMode, PairRuns, Reference,
};
use filab::model::{forward_intervened, InterventionPlan, Model, NodeRef, PatchSources, Positions};
use filab::tasks::{sample_mcqa_task, sample_pairs, McqaRecord, TaskSpec};
use filab::{PromptPair, Vocab};
use rand::{Rng, SeedableRng};

fn families() -> Vec<(&'static str, Vec<PromptPair>)> {
    let vocab = Vocab::new();
    let mut out = vec![
        ("off-by-k", sample_pairs(&TaskSpec::off_by_k(1, 4).with_seed(1), &vocab, 40).unwrap()),
        ("caesar", sample_pairs(&TaskSpec::caesar(3, 4).with_seed(2), &vocab, 40).unwrap()),
        ("base-k", sample_pairs(&TaskSpec::base_k(8, 4).with_seed(3), &vocab, 40).unwrap()),
    ];
    let records: Vec<McqaRecord> = (0..12)
        .map(|i| McqaRecord {
            question: format!("what is item {i}"),
            choices: ["red", "blue", "green", "gold"].iter().map(|s| s.to_string()).collect(),
            answer: (b'A' + (i % 4) as u8) as char,
        })
        .collect();
    let spec = TaskSpec::shifted_mcqa(1, 2);
    let mut rng = filab::rng(4);
    let mcqa = (0..40)
        .map(|_| sample_mcqa_task(&spec, &records, &vocab, &mut rng).unwrap())
        .collect();
    out.push(("shifted-mcqa", mcqa));
    out
}

fn model() -> Model {
    common::scaled(7)
}

#[test]
fn self_donor_and_full_substitution() {
    let model = model();
    let writers = all_writers(&model);
    for (name, pairs) in families() {
        let mut live = 0;
        for pair in &pairs {
            let runs = PairRuns::new(&model, pair).unwrap();
            if runs.is_degenerate() || live == 20 {
                continue;
            }
            live += 1;
            for site in [NodeRef::resid_pre(1), NodeRef::head_output(2, 3), NodeRef::mlp_out(0)] {
                let r = activation_patch_from(&model, pair, &runs, &site, &runs.cont).unwrap() - 1.0;
                assert!(r.abs() <= 1e-3, "{name} self-donor r = {r}");
            }
            let full = path_patch_runs(&model, pair, &runs, &writers, &NodeRef::logits(), MlpMode::Strict).unwrap();
            assert!((full.r + 1.0).abs() <= 1e-3, "{name} full substitution r = {}", full.r);
        }
        assert_eq!(live, 20, "{name}");
    }
}

#[test]
fn r_prime_is_one_plus_r_on_random_sites() {
    let model = model();
    let pairs = sample_pairs(&TaskSpec::off_by_k(2, 5).with_seed(9), &Vocab::new(), 10).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
    let c = model.config.clone();
    for i in 0..100 {
        let pair = &pairs[i % pairs.len()];
        let runs = PairRuns::new(&model, pair).unwrap();
        let l = rng.gen_range(0..c.n_layers);
        let site = match rng.gen_range(0..4) {
            0 => NodeRef::resid_pre(l),
            1 => NodeRef::mlp_out(l),
            2 => NodeRef::head_output(l, rng.gen_range(0..c.n_heads)),
            _ => NodeRef::head_value(l, rng.gen_range(0..c.n_heads)),
        };
        let site = site.at(Positions::one(rng.gen_range(0..pair.len())));
        let r_prime = activation_patch_from(&model, pair, &runs, &site, &runs.base).unwrap();
        let plan = InterventionPlan::new().replace_from_donor(site);
        let (logits, _) = forward_intervened(&model, &pair.x_cont, &plan, PatchSources::donor(&runs.base)).unwrap();
        let f = logit_diff(logits.row(pair.answer_pos()), pair.y_base, pair.y_cont).unwrap();
        let r = relative_logit_diff(f, runs.f_cont, runs.f_base).unwrap();
        assert!((r_prime - (1.0 + r)).abs() <= 1e-9, "r' = {r_prime}, r = {r}");
    }
}

#[test]
fn empty_senders_leave_the_receiver_clean() {
    let model = model();
    let pairs = sample_pairs(&TaskSpec::off_by_k(1, 4).with_seed(5), &Vocab::new(), 5).unwrap();
    for pair in &pairs {
        let runs = PairRuns::new(&model, pair).unwrap();
        for receiver in [NodeRef::logits(), NodeRef::head_value(2, 1), NodeRef::head_query(1, 0)] {
            for mode in [MlpMode::Strict, MlpMode::Relaxed] {
                let out = path_patch_runs(&model, pair, &runs, &[], &receiver, mode).unwrap();
                assert_eq!(out.r, 0.0, "{receiver}");
                assert_eq!(out.f_patched, runs.f_cont);
                let node = filab::interventions::receiver_positions(&receiver, pair);
                let rows = node.positions.resolve(pair.len());
                let clean = runs.cont.node(&node).select(ndarray::Axis(0), &rows);
                assert_eq!(out.receiver_value, clean, "{receiver}");
            }
        }
    }
}

#[test]
fn path_patch_rejects_upstream_receivers() {
    let model = model();
    let pair = &sample_pairs(&TaskSpec::off_by_k(1, 3).with_seed(6), &Vocab::new(), 1).unwrap()[0];
    let runs = PairRuns::new(&model, pair).unwrap();
    let senders = [NodeRef::head_output(2, 0)];
    assert!(path_patch_runs(&model, pair, &runs, &senders, &NodeRef::head_value(1, 0), MlpMode::Strict).is_err());
    assert!(path_patch_runs(&model, pair, &runs, &senders, &NodeRef::head_value(2, 1), MlpMode::Strict).is_err());
}

#[test]
fn ablation_is_idempotent_in_every_mode() {
    let model = model();
    let pairs = sample_pairs(&TaskSpec::off_by_k(1, 4).with_seed(8), &Vocab::new(), 6).unwrap();
    let bank_prompts: Vec<_> = pairs.iter().map(|p| (p.x_base.clone(), p.answer_pos())).collect();
    let bank = MeanBank::build(&model, &bank_prompts).unwrap();
    let heads = [(0, 1), (1, 3), (2, 2)];
    for pair in &pairs {
        let runs = PairRuns::new(&model, pair).unwrap();
        let pos = [pair.answer_pos()];
        for (mode, reference) in [
            (AblationMode::Instance, Reference::Donor(&runs.base)),
            (AblationMode::Zero, Reference::None),
            (AblationMode::Mean, Reference::Bank(&bank)),
        ] {
            let ab = Ablation::new(&heads, mode, reference);
            let (once, cache) = ab.run_at(&model, &pair.x_cont, &pos).unwrap();
            let plan = ab.plan(&model, pair.len(), &pos).unwrap();
            let mut twice = plan.clone();
            twice.directives.extend(plan.directives.iter().cloned());
            let sources = match reference {
                Reference::Donor(d) => PatchSources::donor(d),
                _ => PatchSources::none(),
            };
            let (again, cache2) = forward_intervened(&model, &pair.x_cont, &twice, sources).unwrap();
            assert_eq!(once, again, "{mode:?}");
            assert_eq!(cache, cache2, "{mode:?}");
            let re = Ablation::new(&heads, AblationMode::Instance, Reference::Donor(&cache));
            let (from_self, _) = re.run_at(&model, &pair.x_cont, &pos).unwrap();
            assert_eq!(once, from_self, "{mode:?}");

            for &(l, h) in &heads {
                let out = cache.head_out[l][h].view();
                match (mode, reference) {
                    (AblationMode::Instance, _) => assert_eq!(out, runs.base.head_out[l][h].view()),
                    (AblationMode::Zero, _) => assert!(out.iter().all(|&v| v == 0.0)),
                    _ => {
                        let p = pair.answer_pos();
                        assert_eq!(out.row(p).to_vec(), bank.means[l][h]);
                        let clean = forward_intervened(&model, &pair.x_cont, &InterventionPlan::new(), PatchSources::none())
                            .unwrap()
                            .1;
                        let before = ndarray::s![..p, ..];
                        assert_eq!(out.slice(before), clean.head_out[l][h].slice(before));
                    }
                }
            }
        }
    }
}

#[test]
fn all_heads_circuit_identities() {
    let model = model();
    let pairs = sample_pairs(&TaskSpec::off_by_k(1, 4).with_seed(12), &Vocab::new(), 12).unwrap();
    let circuit = Circuit::all_heads(&model);
    let bank_prompts: Vec<_> = pairs.iter().map(|p| (p.x_base.clone(), p.answer_pos())).collect();
    let bank = MeanBank::build(&model, &bank_prompts).unwrap();
    for policy in [KnockoutPolicy::Instance, KnockoutPolicy::Zero, KnockoutPolicy::Mean(bank)] {
        let f = eval_faithfulness(&model, &circuit, &pairs, &policy).unwrap();
        assert_eq!(f.percent, 100.0, "{policy:?}");

        let mut rng = filab::rng(3);
        for strategy in [CompletenessStrategy::Random, CompletenessStrategy::Greedy] {
            let pts = eval_completeness(&model, &circuit, &pairs, strategy, 4, &policy, &mut rng).unwrap();
            assert_eq!(pts[0].k, vec![]);
            for p in &pts {
                assert_eq!(p.f_circuit, p.f_model, "{} under {policy:?}", p.label);
            }
        }

        let v = (1, 2);
        let m = eval_minimality(&model, &circuit, &pairs, v, 1, &policy).unwrap();
        assert_eq!(m.evaluated, 1);
        assert!(m.k.is_empty());
        let mut delta = 0.0;
        let mut n = 0;
        for pair in &pairs {
            let runs = PairRuns::new(&model, pair).unwrap();
            if runs.is_degenerate() {
                continue;
            }
            delta += f_with_knockout(&model, pair, &runs, Side::Contrast, &[v], &policy).unwrap();
            n += 1;
        }
        let cont: f64 = pairs
            .iter()
            .map(|p| PairRuns::new(&model, p).unwrap())
            .filter(|r| !r.is_degenerate())
            .map(|r| r.f_cont)
            .sum::<f64>();
        let expected = (delta / n as f64 - cont / n as f64).abs();
        assert_eq!(m.score, expected);
    }
}
