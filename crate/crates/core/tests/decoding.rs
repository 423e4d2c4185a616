use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sicsf_core::data::FeatureMatrix;
use sicsf_core::decoding::*;
use sicsf_core::model::{build_model, ModelBundle, ModelConfig, Source};
use sicsf_core::nnet::Ctx;
use sicsf_core::tensorcore::kernels::log_softmax_tempered;
use sicsf_core::tensorcore::Graph;
use sicsf_core::tokenizer::{BOS, EOS};

/// Logits are an arbitrary deterministic function of the prefix.
struct FnScorer<F: Fn(&[usize]) -> Vec<f32>> {
    v: usize,
    f: F,
}

impl<F: Fn(&[usize]) -> Vec<f32>> StepScorer for FnScorer<F> {
    type State = Vec<usize>;
    fn vocab_size(&self) -> usize {
        self.v
    }
    fn initial(&self) -> Vec<usize> {
        Vec::new()
    }
    fn step(&self, state: &mut Vec<usize>, token: usize) -> Result<Vec<f32>> {
        state.push(token);
        Ok((self.f)(state))
    }
}

fn random_scorer(v: usize, seed: u64) -> FnScorer<impl Fn(&[usize]) -> Vec<f32>> {
    FnScorer {
        v,
        f: move |prefix: &[usize]| {
            let mut h = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            for &t in prefix {
                h = (h ^ t as u64).wrapping_mul(0x100_0000_01b3).rotate_left(17);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            (0..v).map(|_| rng.gen_range(-3.0f32..3.0)).collect()
        },
    }
}

/// Log-softmax in f64, written independently of the library kernel.
fn log_probs(logits: &[f32], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().map(|&x| x as f64 / temperature).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

/// Every complete output: EOS-terminated within `max_len`, or exactly
/// `max_len` tokens without EOS.
fn enumerate<M: StepScorer>(m: &M, max_len: usize, temperature: f64) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(vec![BOS], 0.0f64)];
    while let Some((prefix, score)) = stack.pop() {
        let mut st = m.initial();
        let mut logits = Vec::new();
        for &t in &prefix {
            logits = m.step(&mut st, t).unwrap();
        }
        for (tok, lp) in log_probs(&logits, temperature).into_iter().enumerate() {
            let mut seq = prefix.clone();
            seq.push(tok);
            let s = score + lp;
            if tok == EOS || seq.len() - 1 == max_len {
                out.push((seq, s));
            } else {
                stack.push((seq, s));
            }
        }
    }
    out
}

fn score_of(all: &[(Vec<usize>, f64)], seq: &[usize]) -> f64 {
    all.iter().find(|(s, _)| s == seq).map(|(_, sc)| *sc).expect("beam output is a complete sequence")
}

#[test]
fn beam_matches_exhaustive_search_on_toys() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..100u64 {
        let v = rng.gen_range(3..=4);
        let max_len = rng.gen_range(1..=4);
        let temperature = [1.0, 1.25, 0.7][case as usize % 3];
        let m = random_scorer(v, case);
        let all = enumerate(&m, max_len, temperature);
        let best = all.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let cfg = DecodeConfig {
            width: v.pow(max_len as u32),
            temperature,
            max_len,
            len_norm_alpha: 0.0,
            greedy: false,
        };
        let got = beam_search(&m, &cfg).unwrap().best;
        assert!((score_of(&all, &got.tokens) - best).abs() < 1e-5, "case {case}: {:?}", got.tokens);
        assert!((got.score - best).abs() < 1e-4);
    }
}

#[test]
fn hand_set_three_token_model() {
    // V = 3, only EOS (2) and token 0 matter; token 1 is nearly impossible.
    // P(0|BOS)=0.6, P(EOS|BOS)=0.4; P(EOS|BOS 0)=0.5, P(0|BOS 0)=0.5
    // Sequences: [EOS] 0.4, [0 EOS] 0.3, [0 0] 0.3 → argmax [EOS].
    let ln = |p: f32| p.ln();
    let m = FnScorer {
        v: 3,
        f: move |prefix: &[usize]| match prefix {
            [_] => vec![ln(0.6), ln(1e-9), ln(0.4)],
            _ => vec![ln(0.5), ln(1e-9), ln(0.5)],
        },
    };
    let cfg = DecodeConfig {
        width: 9,
        temperature: 1.0,
        max_len: 2,
        len_norm_alpha: 0.0,
        greedy: false,
    };
    let r = beam_search(&m, &cfg).unwrap();
    assert_eq!(r.best.tokens, vec![BOS, EOS]);
    assert!((r.best.score - 0.4f64.ln()).abs() < 1e-6);
    // greedy commits to the locally better first token
    let g = greedy_decode(&m, 2).unwrap();
    assert_eq!(g.tokens[1], 0);
}

#[test]
fn width_one_beam_equals_greedy_on_random_tables() {
    for seed in 0..50u64 {
        let m = random_scorer(3 + (seed % 5) as usize, 1000 + seed);
        let g = greedy_decode(&m, 12).unwrap();
        let b = beam_search(
            &m,
            &DecodeConfig {
                width: 1,
                temperature: 1.0,
                max_len: 12,
                len_norm_alpha: 0.0,
                greedy: false,
            },
        )
        .unwrap()
        .best;
        assert_eq!(g.tokens, b.tokens, "seed {seed}");
    }
}

fn small_model(seed: u64) -> ModelBundle {
    let cfg = ModelConfig {
        d_model: 32,
        n_enc_layers: 1,
        n_dec_layers: 2,
        conv_kernel: 5,
        out_vocab: 12,
        max_target_len: 24,
        ..ModelConfig::default()
    };
    build_model(&cfg, seed).unwrap()
}

fn features(seed: u64, frames: usize) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix::dense((0..frames * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(), 16).unwrap()
}

#[test]
fn width_one_beam_equals_greedy_on_random_models() {
    for seed in 0..50u64 {
        let m = small_model(seed);
        let f = features(seed, 12 + (seed % 9) as usize);
        let src = Source::Features(&[&f]);
        let g = decode_source(&m, src, &DecodeConfig::greedy(20)).unwrap();
        let cfg = DecodeConfig {
            width: 1,
            temperature: 1.0,
            max_len: 20,
            ..DecodeConfig::default()
        };
        let b = decode_source(&m, src, &cfg).unwrap();
        assert_eq!(g.tokens, b.tokens, "seed {seed}");
    }
}

#[test]
fn cached_scorer_matches_full_decoder() {
    for seed in 0..5u64 {
        let m = small_model(seed);
        let f = features(100 + seed, 17);
        let prefix = [BOS, 5, 7, 3, 11, 4];
        let mut g = Graph::<f32>::no_grad();
        let (enc, layout) = m.encode(&mut g, &m.params, Source::Features(&[&f]), &mut Ctx::eval()).unwrap();
        let full = m.decode_logits(&mut g, &m.params, &[&prefix], enc, &layout, &mut Ctx::eval()).unwrap();
        let full = g.value(full).data().to_vec();
        let scorer = ModelScorer::new(&m, Source::Features(&[&f])).unwrap();
        let mut st = scorer.initial();
        for (i, &t) in prefix.iter().enumerate() {
            let step = scorer.step(&mut st, t).unwrap();
            for (a, b) in step.iter().zip(&full[i * 12..(i + 1) * 12]) {
                assert!((a - b).abs() < 1e-4, "seed {seed} pos {i}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn infinite_temperature_keeps_every_first_token() {
    let v = 4;
    let m = random_scorer(v, 3);
    let beam = start(&m).unwrap();
    let cands = expand(&[beam], v, 1e12);
    let mut toks: Vec<usize> = cands.iter().map(|(_, h)| h.tokens[1]).collect();
    toks.sort();
    assert_eq!(toks, (0..v).collect::<Vec<_>>());
    for (_, h) in &cands {
        assert!((h.score + (v as f64).ln()).abs() < 1e-5);
    }
}

#[test]
fn scores_never_increase_along_a_hypothesis() {
    let m = random_scorer(4, 8);
    let cfg = DecodeConfig {
        width: 5,
        max_len: 6,
        ..DecodeConfig::default()
    };
    let r = beam_search(&m, &cfg).unwrap();
    for h in &r.hypotheses {
        assert!(h.score <= 0.0);
        let mut st = m.initial();
        let mut acc = 0.0f64;
        let mut logits = m.step(&mut st, BOS).unwrap();
        for &t in h.generated() {
            let next = acc + log_softmax_tempered(&logits, 1.25)[t] as f64;
            assert!(next <= acc);
            acc = next;
            logits = m.step(&mut st, t).unwrap();
        }
        assert!((acc - h.score).abs() < 1e-9);
        if h.finished {
            assert_eq!(h.tokens.last(), Some(&EOS));
        }
    }
}

#[test]
fn argmax_is_temperature_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let row: Vec<f32> = (0..10).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let arg = |t: f32| {
            let lp = log_softmax_tempered(&row, t);
            (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b })
        };
        let a = arg(1.0);
        for t in [0.3, 1.25, 4.0, 50.0] {
            assert_eq!(arg(t), a);
        }
    }
}

#[test]
fn ties_go_to_the_lower_token() {
    let m = FnScorer {
        v: 5,
        f: |p: &[usize]| if p.len() < 3 { vec![0.0; 5] } else { vec![0.0, 0.0, 9.0, 0.0, 0.0] },
    };
    let g = greedy_decode(&m, 5).unwrap();
    assert_eq!(g.tokens, vec![BOS, 0, 0, EOS]);
    let cfg = DecodeConfig {
        width: 2,
        temperature: 1.0,
        max_len: 5,
        len_norm_alpha: 0.0,
        greedy: false,
    };
    let b = beam_search(&m, &cfg).unwrap().best;
    assert_eq!(b.tokens, vec![BOS, 0, 0, EOS]);
}

#[test]
fn eos_first_model_yields_empty_body() {
    let mut m = small_model(1);
    let id = m.params.id("decoder.out.bias").unwrap();
    m.params.get_mut(id).value.data_mut()[EOS] = 1e4;
    m.out_vocab = Some(sicsf_core::tokenizer::train_tokenizer(&["abcdefgh"], 8).unwrap());
    let f = features(2, 10);
    for cfg in [DecodeConfig::greedy(192), DecodeConfig::default()] {
        let h = decode_source(&m, Source::Features(&[&f]), &cfg).unwrap();
        assert_eq!(h.generated(), &[EOS]);
        assert_eq!(detokenize(&m, &h).unwrap(), "");
    }
}

#[test]
fn truncation_at_max_len_is_valid_output() {
    let m = FnScorer {
        v: 4,
        f: |_: &[usize]| vec![0.0, 0.0, -9.0, 5.0],
    };
    let g = greedy_decode(&m, 3).unwrap();
    assert_eq!(g.tokens, vec![BOS, 3, 3, 3]);
    assert!(!g.finished);
    let b = beam_search(
        &m,
        &DecodeConfig {
            width: 3,
            max_len: 3,
            ..DecodeConfig::default()
        },
    )
    .unwrap()
    .best;
    assert_eq!(b.tokens, vec![BOS, 3, 3, 3]);
}

#[test]
fn length_normalization_changes_the_winner() {
    // [EOS]: ln 0.5 = -0.693; [3 3 3 EOS]: 4·ln 0.8 = -0.893 (per token -0.223)
    let m = FnScorer {
        v: 4,
        f: |p: &[usize]| {
            let ln = |x: f32| x.ln();
            match p.len() {
                1 => vec![ln(1e-6), ln(1e-6), ln(0.5), ln(0.5)],
                2 => vec![ln(1e-6), ln(1e-6), ln(0.2), ln(0.8)],
                3 => vec![ln(1e-6), ln(1e-6), ln(0.2), ln(0.8)],
                _ => vec![ln(1e-6), ln(1e-6), ln(0.8), ln(0.2)],
            }
        },
    };
    let mut cfg = DecodeConfig {
        width: 4,
        temperature: 1.0,
        max_len: 6,
        len_norm_alpha: 0.0,
        greedy: false,
    };
    assert_eq!(beam_search(&m, &cfg).unwrap().best.tokens, vec![BOS, EOS]);
    cfg.len_norm_alpha = 1.0;
    assert_eq!(beam_search(&m, &cfg).unwrap().best.tokens, vec![BOS, 3, 3, 3, EOS]);
}

#[test]
fn decoding_is_deterministic() {
    let m = small_model(9);
    let f = features(9, 20);
    let a = decode_source(&m, Source::Features(&[&f]), &DecodeConfig::default()).unwrap();
    let b = decode_source(&m, Source::Features(&[&f]), &DecodeConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_configs_are_rejected() {
    let m = random_scorer(3, 0);
    let bad = [
        DecodeConfig {
            width: 0,
            ..DecodeConfig::default()
        },
        DecodeConfig {
            temperature: 0.0,
            ..DecodeConfig::default()
        },
        DecodeConfig {
            max_len: 0,
            ..DecodeConfig::default()
        },
    ];
    for cfg in bad {
        assert!(beam_search(&m, &cfg).is_err());
    }
    assert!(matches!(greedy_decode(&m, 0), Err(DecodeError::MaxLen)));
}

#[test]
fn defaults_follow_the_reference_setup() {
    let d = DecodeConfig::default();
    assert_eq!((d.width, d.temperature, d.max_len, d.len_norm_alpha), (32, 1.25, 192, 0.0));
}

#[test]
fn prediction_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let preds = vec![
        Prediction {
            id: "a".into(),
            prediction: "{'scenario': 'x', 'action': 'y', 'entities': []}".into(),
            score: -0.5,
        },
        Prediction {
            id: "b".into(),
            prediction: "{'scenario': 'none', 'action': 'none', 'entities': []}".into(),
            score: -3.25,
        },
    ];
    let plain = dir.path().join("pred.txt");
    write_predictions(&plain, &preds).unwrap();
    let text = std::fs::read_to_string(&plain).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>(), preds.iter().map(|p| p.prediction.as_str()).collect::<Vec<_>>());
    let jsonl = dir.path().join("pred.jsonl");
    write_predictions_jsonl(&jsonl, &preds).unwrap();
    let back: Vec<Prediction> = std::fs::read_to_string(&jsonl)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(back, preds);
}
