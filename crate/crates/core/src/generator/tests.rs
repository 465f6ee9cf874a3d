use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn vocab() -> Vocab {
    Vocab::fit(
        &[
            "what is the population of it <sep> question : tell me about kalomu",
            "what is the population of kalomu",
            "answer : kalomu is known for music",
        ],
        1,
    )
    .unwrap()
}

fn small_config(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        embedding_size: 8,
        hidden_size: 12,
        max_decode_len: 8,
        init_scale: 0.3,
        seed,
        ..Default::default()
    }
}

const INPUT: &str = "what is the population of it <sep> question: tell me about kalomu answer: kalomu is known for music";

#[test]
fn rejects_zero_candidates_and_narrow_beam() {
    let g = Generator::new(vocab(), small_config(1));
    assert!(matches!(g.generate_candidates(INPUT, 0, 4), Err(Error::Validation(_))));
    assert!(matches!(g.generate_candidates(INPUT, 5, 4), Err(Error::Validation(_))));
}

#[test]
fn candidates_are_ordered_and_consistent_with_scoring() {
    let g = Generator::new(vocab(), small_config(2));
    let cands = g.generate_candidates(INPUT, 10, 10).unwrap();
    assert_eq!(cands.len(), 10);
    assert!(cands.windows(2).all(|w| w[0].logprob >= w[1].logprob));
    let ids: Vec<Vec<u32>> = cands.iter().map(|c| c.token_ids.clone()).collect();
    let scored = g.score_candidates(INPUT, &ids);
    for (c, s) in cands.iter().zip(scored.logprobs()) {
        assert!(c.logprob <= 0.0);
        assert!((c.logprob - s).abs() < 1e-5, "beam {} vs score {}", c.logprob, s);
        assert_eq!(c.text, g.vocab.decode(&c.token_ids));
    }
    let again = g.score_candidates(INPUT, &ids);
    assert_eq!(scored.logprobs(), again.logprobs());
}

#[test]
fn width_one_beam_is_greedy() {
    let g = Generator::new(vocab(), small_config(3));
    let best = g.generate_candidates(INPUT, 1, 1).unwrap().remove(0);
    let net = g.network();
    let decoder = net.decoder(&g.source_ids(INPUT));
    let mut state = decoder.initial_state();
    let mut prev = BOS;
    let mut tokens = Vec::new();
    let mut total = 0.0;
    let blocked = [PAD, UNK, BOS];
    for step in 0..=g.config.max_decode_len {
        let (next, logp) = decoder.step(&state, prev);
        let tok = if step == g.config.max_decode_len {
            EOS
        } else {
            (0..logp.len() as u32)
                .filter(|t| !blocked.contains(t))
                .max_by(|a, b| logp[*a as usize].partial_cmp(&logp[*b as usize]).unwrap().then(b.cmp(a)))
                .unwrap()
        };
        total += logp[tok as usize];
        if tok == EOS {
            break;
        }
        tokens.push(tok);
        state = next;
        prev = tok;
    }
    assert_eq!(best.token_ids, tokens);
    assert_eq!(best.logprob, total);
}

#[test]
fn constant_output_model_matches_hand_log_softmax() {
    let v = vocab();
    let mut cfg = small_config(0);
    cfg.copy_attention = false;
    let mut g = Generator::zeroed(v, cfg);
    let bias: Vec<f64> = (0..g.vocab.len()).map(|i| (i as f64 * 0.37).sin()).collect();
    g.params.tensors[13].data = bias.clone();
    let max = bias.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + bias.iter().map(|b| (b - max).exp()).sum::<f64>().ln();
    let target = vec![5u32, 7u32];
    let expected = (bias[5] - lse) + (bias[7] - lse) + (bias[EOS as usize] - lse);
    let got = g.score_candidates("anything", &[target]).logprobs()[0];
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn empty_candidate_scores_end_token_only() {
    let g = Generator::new(vocab(), small_config(4));
    let s = g.score_candidates(INPUT, &[vec![]]);
    let net = g.network();
    let decoder = net.decoder(&g.source_ids(INPUT));
    let (_, logp) = decoder.step(&decoder.initial_state(), BOS);
    assert_eq!(s.logprobs()[0], logp[EOS as usize]);
    assert_eq!(s.token_counts(), &[1]);
}

fn composed_loss(g: &Generator, targets: &[Vec<u32>], weights: &[f64]) -> f64 {
    let s = g.score_candidates(INPUT, targets);
    s.logprobs().iter().zip(weights).map(|(l, w)| l * w).sum()
}

#[test]
fn gradients_match_central_differences() {
    let mut g = Generator::new(vocab(), GeneratorConfig { seed: 9, ..Default::default() });
    let targets = vec![g.target_ids("what is the population of kalomu"), g.target_ids("population it"), vec![]];
    let weights = [-0.7, 0.4, -0.2];
    let mut grads = g.zero_grads();
    {
        let s = g.score_candidates(INPUT, &targets);
        s.backward(&weights, &mut grads);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let eps = 1e-4;
    let mut checked = 0;
    while checked < 20 {
        let i = rng.gen_range(0..g.params.count());
        let analytic = grads.get(i);
        if analytic.abs() < 1e-7 {
            continue; // untouched embedding rows have exactly zero gradient
        }
        let (t, o) = g.params.locate(i);
        let orig = g.params.tensors[t].data[o];
        g.params.tensors[t].data[o] = orig + eps;
        let up = composed_loss(&g, &targets, &weights);
        g.params.tensors[t].data[o] = orig - eps;
        let down = composed_loss(&g, &targets, &weights);
        g.params.tensors[t].data[o] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        assert!(rel < 1e-3, "param {i}: numeric {numeric} analytic {analytic} rel {rel}");
        checked += 1;
    }
}

fn nll_step(g: &mut Generator, opt: &mut Adam, target: &[u32]) -> f64 {
    let mut grads = g.zero_grads();
    let loss = {
        let s = g.score_candidates(INPUT, &[target.to_vec()]);
        let n = s.token_counts()[0] as f64;
        s.backward(&[-1.0 / n], &mut grads);
        -s.logprobs()[0] / n
    };
    g.train_step(opt, &grads, loss).unwrap();
    loss
}

#[test]
fn overfits_a_single_pair() {
    let mut g = Generator::new(vocab(), small_config(5));
    let target = g.target_ids("what is the population of kalomu");
    let mut opt = Adam::new(AdamConfig::with_learning_rate(0.05), &g.params);
    for _ in 0..50 {
        nll_step(&mut g, &mut opt, &target);
    }
    let s = g.score_candidates(INPUT, &[target.clone()]);
    let per_token = -s.logprobs()[0] / s.token_counts()[0] as f64;
    assert!(per_token < 0.1, "per-token NLL {per_token}");
    let best = g.generate_candidates(INPUT, 1, 4).unwrap().remove(0);
    assert_eq!(best.token_ids, target);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut g = Generator::new(vocab(), small_config(6));
    let before = g.params.clone();
    let target = g.target_ids("population of kalomu");
    let mut opt = Adam::new(AdamConfig::with_learning_rate(0.0), &g.params);
    nll_step(&mut g, &mut opt, &target);
    assert_eq!(g.params, before);
}

#[test]
fn non_finite_loss_is_refused() {
    let mut g = Generator::new(vocab(), small_config(6));
    let grads = g.zero_grads();
    let mut opt = Adam::new(AdamConfig::default(), &g.params);
    assert!(matches!(g.train_step(&mut opt, &grads, f64::NAN), Err(Error::Invariant(_))));
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let g = Generator::new(vocab(), small_config(7));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    g.save(&path).unwrap();
    let back = Generator::load(&path).unwrap();
    assert_eq!(back, g);
    let probe: Vec<Vec<u32>> = g
        .generate_candidates(INPUT, 4, 4)
        .unwrap()
        .into_iter()
        .map(|c| c.token_ids)
        .collect();
    let a = g.score_candidates(INPUT, &probe).logprobs().to_vec();
    let b = back.score_candidates(INPUT, &probe).logprobs().to_vec();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.to_bits(), y.to_bits());
        assert!((x - y).abs() <= 1e-7);
    }
}

#[test]
fn corrupt_or_mismatched_model_file_is_format_error() {
    let g = Generator::new(vocab(), small_config(8));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    g.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Generator::load(&path), Err(Error::Format(_))));
    g.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Generator::load(&path), Err(Error::Format(_))));
}

#[test]
fn same_seed_same_model_and_candidates() {
    let a = Generator::new(vocab(), small_config(10));
    let b = Generator::new(vocab(), small_config(10));
    assert_eq!(a.params, b.params);
    assert_eq!(
        a.generate_candidates(INPUT, 3, 5).unwrap(),
        b.generate_candidates(INPUT, 3, 5).unwrap()
    );
}

#[test]
fn default_size_is_under_budget() {
    let words: Vec<String> = (0..5000).map(|i| format!("w{i}")).collect();
    let v = Vocab::fit(&[words.join(" ")], 1).unwrap();
    let g = Generator::new(v, GeneratorConfig::default());
    assert!(g.parameter_count() < 2_000_000, "{}", g.parameter_count());
}
