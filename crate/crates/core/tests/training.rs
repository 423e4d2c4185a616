use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sicsf_core::data::{synth_dataset, SynthConfig};
use sicsf_core::model::{build_model, ModelConfig};
use sicsf_core::pipeline::{speech_examples, target_vocab, Target};
use sicsf_core::tensorcore::{Graph, ParamStore, Tensor};
use sicsf_core::tokenizer::{BOS, EOS, PAD};
use sicsf_core::training::*;

/// Independent per-position sum: -Σ_i log softmax(z_i)[y_{i+1}], averaged.
fn brute_force_nll(logits: &[f64], v: usize, seq: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..seq.len() - 1 {
        let row = &logits[i * v..(i + 1) * v];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        total -= (row[seq[i + 1]].exp() / z).ln();
    }
    total / (seq.len() - 1) as f64
}

fn loss_of(logits: Vec<f64>, v: usize, seqs: &[&[usize]]) -> f64 {
    let tf = teacher_forcing(seqs).unwrap();
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![logits.len() / v, v], logits).unwrap(), true);
    let l = nll_teacher_forcing_loss(&mut g, x, &tf).unwrap();
    g.value(l).data()[0]
}

#[test]
fn loss_matches_per_position_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let v = rng.gen_range(4..=16);
        let len = rng.gen_range(2..=8);
        let mut seq = vec![BOS];
        seq.extend((0..len - 2).map(|_| rng.gen_range(3..v)));
        seq.push(EOS);
        let logits: Vec<f64> = (0..(len - 1) * v).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let got = loss_of(logits.clone(), v, &[&seq]);
        let want = brute_force_nll(&logits, v, &seq);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    for v in [4usize, 7, 16] {
        let seq = [BOS, 3, 3, EOS];
        let got = loss_of(vec![0.25; 3 * v], v, &[&seq]);
        assert!((got - (v as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn confident_correct_logits_drive_loss_to_zero() {
    let v = 5;
    let seq = [BOS, 4, EOS];
    let mut logits = vec![-50.0; 2 * v];
    logits[4] = 50.0;
    logits[v + EOS] = 50.0;
    assert!(loss_of(logits, v, &[&seq]) < 1e-12);
}

#[test]
fn padded_targets_are_neutral() {
    let v = 6;
    let short: &[usize] = &[BOS, 4, EOS];
    let long: &[usize] = &[BOS, 5, 4, 3, EOS];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<f64> = (0..8 * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    // batch of two: the short row is padded to four positions
    let both = loss_of(logits.clone(), v, &[short, long]);
    let want = (brute_force_nll(&logits[..2 * v], v, short) * 2.0 + brute_force_nll(&logits[4 * v..], v, long) * 4.0) / 6.0;
    assert!((both - want).abs() < 1e-12);
    let padded: &[usize] = &[BOS, 4, EOS, PAD, PAD];
    let tf = teacher_forcing(&[padded]).unwrap();
    assert_eq!(tf.mask, vec![true, true, false, false]);
    let alone = loss_of(logits[..4 * v].to_vec(), v, &[padded]);
    assert!((alone - brute_force_nll(&logits[..2 * v], v, short)).abs() < 1e-12);
}

fn scalar_store(value: f32) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.add("decoder.w", Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
    s
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut s = scalar_store(0.5);
    let mut st = OptimState::new(&s);
    let id = s.id("decoder.w").unwrap();
    adam_step(&mut s, &[(id, vec![1.0])], &mut st, &AdamConfig::default(), |_| 1e-3).unwrap();
    let delta = s.get(id).value.data()[0] as f64 - 0.5;
    assert!((delta + 1e-3).abs() < 1e-7, "{delta}");
    assert_eq!(st.step, 1);
}

#[test]
fn adam_zero_grad_keeps_params() {
    let mut s = scalar_store(0.5);
    let mut st = OptimState::new(&s);
    let id = s.id("decoder.w").unwrap();
    adam_step(&mut s, &[(id, vec![0.0])], &mut st, &AdamConfig::default(), |_| 1e-3).unwrap();
    assert_eq!(s.get(id).value.data()[0], 0.5);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_skips_frozen_params() {
    let mut s = scalar_store(0.5);
    let id = s.id("decoder.w").unwrap();
    s.get_mut(id).trainable = false;
    let mut st = OptimState::new(&s);
    adam_step(&mut s, &[(id, vec![3.0])], &mut st, &AdamConfig::default(), |_| 1e-2).unwrap();
    assert_eq!(s.get(id).value.data()[0], 0.5);
    assert_eq!(st.m[id.0], vec![0.0]);
    assert_eq!(st.v[id.0], vec![0.0]);
}

#[test]
fn adam_rejects_nan_gradient_by_name() {
    let mut s = scalar_store(0.5);
    let mut st = OptimState::new(&s);
    let id = s.id("decoder.w").unwrap();
    let err = adam_step(&mut s, &[(id, vec![f32::NAN])], &mut st, &AdamConfig::default(), |_| 1e-3).unwrap_err();
    assert!(err.to_string().contains("decoder.w"), "{err}");
    assert_eq!(s.get(id).value.data()[0], 0.5);
}

#[test]
fn gradient_clipping_scales_moments() {
    let mut s = ParamStore::<f32>::new();
    let a = s.add("decoder.a", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
    let mut st = OptimState::new(&s);
    let cfg = AdamConfig::default();
    let norm = adam_step(&mut s, &[(a, vec![30.0, 40.0])], &mut st, &cfg, |_| 1e-3).unwrap();
    assert!((norm - 50.0).abs() < 1e-9);
    // clipped gradient is (3, 4); first moment = 0.1 · g
    assert!((st.m[a.0][0] - 0.3).abs() < 1e-6 && (st.m[a.0][1] - 0.4).abs() < 1e-6);
}

#[test]
fn groups_get_their_own_learning_rate() {
    let mut s = ParamStore::<f32>::new();
    let e = s.add("encoder.layers.0.w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
    let ad = s.add("encoder.layers.0.adapter_attn.down.weight", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
    let d = s.add("decoder.w", Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
    let mut st = OptimState::new(&s);
    let grads = vec![(e, vec![1.0]), (ad, vec![1.0]), (d, vec![1.0])];
    adam_step(&mut s, &grads, &mut st, &AdamConfig::default(), |g| match g {
        Group::Encoder => 2e-4,
        Group::Decoder => 3e-4,
    })
    .unwrap();
    let val = |id| s.get(id).value.data()[0] as f64;
    assert!((val(e) + 2e-4).abs() < 1e-9);
    assert!((val(ad) + 3e-4).abs() < 1e-9);
    assert!((val(d) + 3e-4).abs() < 1e-9);
}

fn schedule(min_lr: f64) -> ScheduleConfig {
    ScheduleConfig {
        lr_enc: 2e-4,
        lr_dec: 3e-4,
        warmup_steps: 200,
        total_steps: 1000,
        min_lr,
    }
}

#[test]
fn lr_schedule_endpoints_and_midpoint() {
    let sc = schedule(0.0);
    assert_eq!(lr_at(0, &sc), (0.0, 0.0));
    let (e, d) = lr_at(200, &sc);
    assert!((e - 2e-4).abs() < 1e-15 && (d - 3e-4).abs() < 1e-15);
    let (e, d) = lr_at(600, &sc);
    assert!((e - 1e-4).abs() < 1e-15 && (d - 1.5e-4).abs() < 1e-15);
    assert_eq!(lr_at(1000, &sc), (0.0, 0.0));
    let sc = schedule(1e-5);
    assert_eq!(lr_at(5000, &sc), (1e-5, 1e-5));
}

#[test]
fn lr_schedule_is_monotone_in_each_phase() {
    let sc = schedule(1e-5);
    let lrs: Vec<f64> = (0..=1200).map(|s| lr_at(s, &sc).1).collect();
    assert!(lrs[..=200].windows(2).all(|w| w[1] >= w[0]));
    assert!(lrs[200..].windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn warmup_must_fit_inside_the_run() {
    let mut sc = schedule(0.0);
    sc.warmup_steps = 1000;
    assert!(sc.validate().is_err());
}

fn tiny_setup(n: usize) -> (sicsf_core::model::ModelBundle, Vec<Example>) {
    let data = synth_dataset(&SynthConfig {
        train_samples: n,
        dev_samples: 0,
        test_samples: 0,
        asr_samples: 0,
        ..SynthConfig::default()
    })
    .unwrap();
    let vocab = target_vocab(&data.train, Target::Semantics, 96).unwrap();
    let cfg = ModelConfig {
        out_vocab: vocab.len(),
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut m = build_model(&cfg, 5).unwrap();
    let ex = speech_examples(&data.train, &vocab, Target::Semantics);
    m.out_vocab = Some(vocab);
    (m, ex)
}

#[test]
fn overfit_one_sample_loss_decreases() {
    let (mut m, ex) = tiny_setup(1);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 1,
        lr_enc: 1e-3,
        lr_dec: 1e-3,
        warmup_steps: Some(1),
        ..TrainConfig::default()
    };
    let log = train(&mut m, &ex, &cfg, |_, _| (None, Control::Continue)).unwrap();
    // step 0 runs at lr 0 under warmup, so compare from step 1 onward
    let l = &log.step_losses;
    assert_eq!(l.len(), 5);
    assert!(l[1..].windows(2).all(|w| w[1] < w[0]), "{l:?}");
    assert!(l[4] < l[0]);
}

#[test]
fn overfits_ten_samples_within_300_steps() {
    let (mut m, ex) = tiny_setup(10);
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: 10,
        lr_enc: 2e-3,
        lr_dec: 3e-3,
        warmup_steps: Some(30),
        seed: 1,
        ..TrainConfig::default()
    };
    let mut best = f64::INFINITY;
    let log = train(&mut m, &ex, &cfg, |_, _| (None, Control::Continue)).unwrap();
    for &l in &log.step_losses {
        best = best.min(l);
    }
    assert!(best < 0.05, "best loss {best}");
}

#[test]
fn same_seed_gives_identical_curves() {
    let run = || {
        let (mut m, ex) = tiny_setup(24);
        m.config.dropout = 0.2;
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 9,
            ..TrainConfig::desk()
        };
        let log = train(&mut m, &ex, &cfg, |_, _| (None, Control::Continue)).unwrap();
        (log.step_losses, m.to_bytes())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert!(ca == cb);
}

#[test]
fn frozen_encoder_is_untouched() {
    let (mut m, ex) = tiny_setup(16);
    m.freeze_encoder(false).unwrap();
    let before = m.encoder_bytes();
    let dec_before: Vec<f32> = m.params.by_name("decoder.out.weight").unwrap().value.data().to_vec();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::desk()
    };
    train(&mut m, &ex, &cfg, |_, _| (None, Control::Continue)).unwrap();
    assert!(m.encoder_bytes() == before);
    assert_ne!(m.params.by_name("decoder.out.weight").unwrap().value.data(), &dec_before[..]);
}

#[test]
fn nan_weights_abort_with_step() {
    let (mut m, ex) = tiny_setup(4);
    let id = m.params.id("decoder.out.bias").unwrap();
    m.params.get_mut(id).value.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::desk()
    };
    match train(&mut m, &ex, &cfg, |_, _| (None, Control::Continue)) {
        Err(TrainError::Diverged { step: 0, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let (mut m, _) = tiny_setup(1);
    assert!(matches!(
        train(&mut m, &[], &TrainConfig::desk(), |_, _| (None, Control::Continue)),
        Err(TrainError::EmptyDataset)
    ));
}

#[test]
fn csv_log_has_expected_columns() {
    let (mut m, ex) = tiny_setup(4);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::desk()
    };
    let log = train(&mut m, &ex, &cfg, |_, ep| {
        let dev = (ep == 2).then_some(DevScores {
            intent_accuracy: 0.5,
            f1: 0.25,
        });
        (dev, Control::Continue)
    })
    .unwrap();
    let csv = log.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,step,lr_enc,lr_dec,train_loss,dev_intent_acc,dev_f1");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,2,") && lines[1].ends_with(",,"));
    assert!(lines[2].starts_with("2,4,") && lines[2].ends_with(",0.5000,0.2500"));
    let plain = TrainLog {
        epochs: vec![EpochLog {
            dev: None,
            ..log.epochs[0].clone()
        }],
        step_losses: vec![],
    };
    assert!(plain.to_csv().starts_with("epoch,step,lr_enc,lr_dec,train_loss\n"));
}

#[test]
fn control_stop_ends_training() {
    let (mut m, ex) = tiny_setup(4);
    let log = train(&mut m, &ex, &TrainConfig::desk(), |_, ep| (None, if ep == 3 { Control::Stop } else { Control::Continue })).unwrap();
    assert_eq!(log.epochs.len(), 3);
}
