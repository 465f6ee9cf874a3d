use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{
    build_instances, generate_toy_corpus, imperfect_rewrites, Candidate, CandidateSet, DatasetRow, Passage,
    Provenance,
};
use crate::embedding::HashingEncoder;
use crate::generator::{AdamConfig, GeneratorConfig, Vocab};

fn store(texts: &[(&str, &str)]) -> EmbeddingStore {
    let passages: Vec<Passage> = texts
        .iter()
        .map(|(id, t)| Passage {
            passage_id: id.to_string(),
            text: t.to_string(),
        })
        .collect();
    EmbeddingStore::build(&passages, &HashingEncoder::default()).unwrap()
}

#[test]
fn rewards_follow_cosine_and_max_rule() {
    let s = store(&[
        ("g1", "kalomu population census residents"),
        ("g2", "river delta flooding season"),
    ]);
    let enc = HashingEncoder::default();
    let texts = vec![
        "kalomu population census residents".to_string(),
        "zebra quartz violin monsoon".to_string(),
        "river delta flooding season".to_string(),
    ];
    let r = compute_rewards(&texts, &["g1".into()], &s, &enc).unwrap();
    assert!((r[0] - 1.0).abs() < 1e-5);
    assert!(r[1].abs() < 0.15, "disjoint reward {}", r[1]);
    let both = compute_rewards(&texts, &["g1".into(), "g2".into()], &s, &enc).unwrap();
    assert!((both[2] - 1.0).abs() < 1e-5);
    assert!(matches!(
        compute_rewards(&texts, &["nope".into()], &s, &enc),
        Err(Error::Validation(_))
    ));
    assert!(matches!(compute_rewards(&texts, &[], &s, &enc), Err(Error::Invariant(_))));
}

#[test]
fn minmax_examples() {
    assert_eq!(minmax_normalize(&[0.4, 0.4]), vec![0.5, 0.5]);
    for (raw, want) in [
        (vec![0.2, 0.5, 0.8], vec![0.0, 0.5, 1.0]),
        (vec![-0.1, 0.1, 0.3, 0.1], vec![0.0, 0.5, 1.0, 0.5]),
    ] {
        for (g, e) in minmax_normalize(&raw).iter().zip(want) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}

#[test]
fn renormalize_examples() {
    assert_eq!(renormalize_probs(&[-3.0; 4]), vec![0.25; 4]);
    let p = renormalize_probs(&[-1.0, -2.0]);
    assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
    // Oracle: e^-1 / (e^-1 + e^-2) computed directly.
    let direct = (-1f64).exp() / ((-1f64).exp() + (-2f64).exp());
    assert!((p[0] - direct).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let v: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen_range(-80.0..0.0)).collect();
        assert!((renormalize_probs(&v).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn mbr_examples() {
    assert_eq!(mbr_loss(&[-2.0, -2.0], &[0.0, 1.0]).unwrap().0, -0.5);
    let (l, _) = mbr_loss(&[-1.0, -2.0], &[1.0, 0.0]).unwrap();
    assert!((l + 0.73106).abs() < 1e-5);
    let (l, g) = mbr_loss(&[-1.3, -0.2, -4.0], &[0.5; 3]).unwrap();
    assert!((l + 0.5).abs() < 1e-15);
    assert!(g.iter().all(|x| *x == 0.0));
    assert!(matches!(mbr_loss(&[-1.0], &[0.1, 0.2]), Err(Error::Validation(_))));
}

#[test]
fn mbr_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(2..12);
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-8.0..0.0)).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (_, g) = mbr_loss(&s, &r).unwrap();
        let eps = 1e-3;
        let at = |j: usize, h: f64| {
            let mut v = s.clone();
            v[j] += h;
            mbr_loss(&v, &r).unwrap().0
        };
        for j in 0..n {
            // Five-point central stencil.
            let numeric = (-at(j, 2.0 * eps) + 8.0 * at(j, eps) - 8.0 * at(j, -eps) + at(j, -2.0 * eps)) / (12.0 * eps);
            let scale = numeric.abs().max(g[j].abs());
            if scale < 1e-9 {
                continue;
            }
            assert!((numeric - g[j]).abs() / scale < 1e-6, "j={j} numeric {numeric} analytic {}", g[j]);
        }
    }
}

#[test]
fn top1_examples() {
    assert_eq!(select_top1(&[0.1, 0.9, 0.3]), 1);
    assert_eq!(select_top1(&[0.5, 0.5]), 0);
    let raw = [0.12, 0.31, 0.07, 0.31];
    assert_eq!(select_top1(&raw), select_top1(&minmax_normalize(&raw)));
}

proptest! {
    #[test]
    fn mbr_loss_bounds_monotonicity_and_permutation(
        pairs in prop::collection::vec((-30.0f64..0.0, 0.0f64..=1.0), 1..12),
        bump in 0.0f64..1.0,
        pick in any::<prop::sample::Index>(),
        rot in 0usize..12,
    ) {
        let (s, r): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        let (l, _) = mbr_loss(&s, &r).unwrap();
        prop_assert!((-1.0 - 1e-12..=1e-12).contains(&l));

        let j = pick.index(r.len());
        let mut r2 = r.clone();
        r2[j] = (r2[j] + bump).min(1.0);
        prop_assert!(mbr_loss(&s, &r2).unwrap().0 <= l + 1e-12);

        let k = rot % s.len();
        let (mut sp, mut rp) = (s.clone(), r.clone());
        sp.rotate_left(k);
        rp.rotate_left(k);
        prop_assert!((mbr_loss(&sp, &rp).unwrap().0 - l).abs() < 1e-12);
        let mut p = renormalize_probs(&s);
        p.rotate_left(k);
        for (a, b) in p.iter().zip(renormalize_probs(&sp)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top1_invariant_under_increasing_maps(raw in prop::collection::vec(-1.0f64..1.0, 1..15)) {
        let idx = select_top1(&raw);
        let cubed: Vec<f64> = raw.iter().map(|x| x.powi(3) * 2.0 + 7.0).collect();
        let exp: Vec<f64> = raw.iter().map(|x| x.exp()).collect();
        prop_assert_eq!(select_top1(&cubed), idx);
        prop_assert_eq!(select_top1(&exp), idx);
    }
}

fn toy_setup() -> (Vec<ReformulationInstance>, DatasetVersion, Vocab) {
    let corpus = generate_toy_corpus(0, 6, 3, 6).unwrap();
    let instances = build_instances(&corpus.sessions);
    let d0 = DatasetVersion::bootstrap(Provenance::File, imperfect_rewrites(&corpus, 0.5, 0));
    let mut texts: Vec<String> = instances.iter().map(|i| i.model_input()).collect();
    texts.extend(corpus.passages.iter().map(|p| p.text.clone()));
    let vocab = Vocab::fit(&texts, 1).unwrap();
    (instances, d0, vocab)
}

fn small() -> GeneratorConfig {
    GeneratorConfig {
        embedding_size: 16,
        hidden_size: 24,
        max_decode_len: 12,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn uniform_model_nll_is_log_vocab() {
    let (instances, _, vocab) = toy_setup();
    let v = vocab.len() as f64;
    let model = Generator::zeroed(vocab, GeneratorConfig {
        copy_attention: false,
        ..small()
    });
    let nll = nll_loss(&model, &instances[3].model_input(), "what is the history of it").unwrap();
    assert!((nll - v.ln()).abs() < 0.05, "{nll} vs {}", v.ln());
    assert!(matches!(nll_loss(&model, "x", "  "), Err(Error::Validation(_))));
}

#[test]
fn init_epochs_reduce_nll() {
    let (instances, d0, vocab) = toy_setup();
    let map: HashMap<_, _> = instances.iter().map(|i| (i.instance_id.clone(), i.clone())).collect();
    let mut model = Generator::new(vocab, small());
    let mut opt = Adam::new(AdamConfig::with_learning_rate(5e-3), &model.params);
    let ctx = EpochContext {
        instances: &map,
        batch_size: 8,
        seed: 0,
    };
    let losses: Vec<f64> = (0..5)
        .map(|e| train_epoch(&mut model, &mut opt, &d0, Phase::Init, &ctx, e).unwrap().mean_loss)
        .collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    for inst in &instances {
        assert!(nll_loss(&model, &inst.model_input(), &inst.current_query).unwrap() >= 0.0);
    }
    assert!(matches!(
        train_epoch(&mut model, &mut opt, &d0, Phase::Mbr, &ctx, 0),
        Err(Error::Invariant(_))
    ));
}

fn candidate_version(model: &Generator, instances: &[ReformulationInstance], rewards: impl Fn(usize) -> Option<Vec<f64>>) -> DatasetVersion {
    DatasetVersion {
        iteration: 1,
        n: 4,
        provenance: Provenance::Generated,
        generated_by: Some(0),
        rows: instances
            .iter()
            .enumerate()
            .map(|(i, inst)| DatasetRow {
                instance_id: inst.instance_id.clone(),
                targets: Targets::Candidates(CandidateSet {
                    candidates: model.generate_candidates(&inst.model_input(), 4, 4).unwrap(),
                    rewards: rewards(i),
                }),
            })
            .collect(),
    }
}

#[test]
fn equal_rewards_contribute_no_gradient() {
    let (instances, _, vocab) = toy_setup();
    let model = Generator::new(vocab, small());
    let cands: Vec<Vec<u32>> = model
        .generate_candidates(&instances[4].model_input(), 4, 4)
        .unwrap()
        .into_iter()
        .map(|c: Candidate| c.token_ids)
        .collect();
    let normalized = minmax_normalize(&[0.3; 4]);
    let ex = Example::Mbr {
        input: instances[4].model_input(),
        candidates: cands,
        normalized: &normalized,
    };
    let (loss, grads) = ex.loss_and_grads(&model).unwrap();
    assert_eq!(loss, -0.5);
    assert_eq!(grads.norm(), 0.0);
}

#[test]
fn mbr_and_top1_epochs_skip_rewardless_rows() {
    let (instances, _, vocab) = toy_setup();
    let map: HashMap<_, _> = instances.iter().map(|i| (i.instance_id.clone(), i.clone())).collect();
    let mut model = Generator::new(vocab, small());
    let version = candidate_version(&model, &instances, |i| {
        (i % 3 != 0).then(|| vec![0.1 * (i % 4) as f64, 0.3, 0.2, 0.05])
    });
    let ctx = EpochContext {
        instances: &map,
        batch_size: 4,
        seed: 1,
    };
    let mut opt = Adam::new(AdamConfig::with_learning_rate(1e-3), &model.params);
    let stats = train_epoch(&mut model, &mut opt, &version, Phase::Mbr, &ctx, 0).unwrap();
    assert_eq!(stats.skipped_instances, 6);
    assert!(stats.mean_loss <= 0.0 && stats.mean_loss >= -1.0);
    let stats = train_epoch(&mut model, &mut opt, &version, Phase::Top1, &ctx, 0).unwrap();
    assert_eq!(stats.skipped_instances, 6);
    assert!(stats.mean_raw_reward.unwrap() > 0.0);
}

#[test]
fn top1_epoch_raises_the_selected_candidate() {
    let (instances, _, vocab) = toy_setup();
    let map: HashMap<_, _> = instances.iter().map(|i| (i.instance_id.clone(), i.clone())).collect();
    let mut model = Generator::new(vocab, small());
    // Reward the last-ranked candidate of every instance.
    let version = candidate_version(&model, &instances, |_| Some(vec![0.1, 0.2, 0.3, 0.9]));
    let before: Vec<f64> = instances
        .iter()
        .zip(&version.rows)
        .map(|(inst, row)| {
            let Targets::Candidates(set) = &row.targets else { unreachable!() };
            model.score_candidates(&inst.model_input(), &[set.candidates[3].token_ids.clone()]).logprobs()[0]
        })
        .collect();
    let ctx = EpochContext {
        instances: &map,
        batch_size: 8,
        seed: 1,
    };
    let mut opt = Adam::new(AdamConfig::with_learning_rate(5e-3), &model.params);
    for e in 0..3 {
        train_epoch(&mut model, &mut opt, &version, Phase::Top1, &ctx, e).unwrap();
    }
    let raised = instances
        .iter()
        .zip(&version.rows)
        .zip(&before)
        .filter(|((inst, row), &b)| {
            let Targets::Candidates(set) = &row.targets else { unreachable!() };
            model.score_candidates(&inst.model_input(), &[set.candidates[3].token_ids.clone()]).logprobs()[0] > b
        })
        .count();
    assert_eq!(raised, instances.len());
}

#[test]
fn phase_schedule() {
    assert_eq!(Phase::for_iteration(0, 1), Phase::Init);
    assert_eq!(Phase::for_iteration(1, 1), Phase::Mbr);
    assert_eq!(Phase::for_iteration(2, 1), Phase::Top1);
    assert_eq!(Phase::for_iteration(3, 3), Phase::Mbr);
    assert_eq!(Phase::for_iteration(1, 0), Phase::Top1);
}
