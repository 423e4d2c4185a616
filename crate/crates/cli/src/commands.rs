use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use sicsf_core::data::{load_manifest, synth_generate, Utterance};
use sicsf_core::decoding::{self, DecodeConfig};
use sicsf_core::metrics::{score_files, MatchMode};
use sicsf_core::model::{ModelBundle, ModelKind};
use sicsf_core::pipeline::{
    build_cascade_nlu, cascade_point, model_sources, nlu_examples, predict as predict_all, sources_of, speech_examples,
    speech_model, target_vocab, train_monitored, transcript_words, word_accuracy, DevMonitor, Target,
};
use sicsf_core::semantics::SemanticsRecord;
use sicsf_core::tokenizer::UNK;
use sicsf_core::training::TrainLog;

use crate::config::RunConfig;
use crate::{CliError, TrainOverrides};

fn print_config(cfg: &RunConfig) {
    eprintln!("# effective config\n{}", cfg.to_toml());
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.lr_enc {
        cfg.train.lr_enc = v;
    }
    if let Some(v) = o.lr_dec {
        cfg.train.lr_dec = v;
    }
    if let Some(v) = o.seed {
        cfg.train.seed = v;
    }
}

/// `data` itself when it is a file, else `<data>/<split>.jsonl`.
fn manifest_path(data: &Path, split: &str) -> PathBuf {
    if data.is_file() {
        data.to_path_buf()
    } else {
        data.join(format!("{split}.jsonl"))
    }
}

fn load_split(data: &Path, split: &str) -> Result<Vec<Utterance>, CliError> {
    let utts = load_manifest(&manifest_path(data, split))?;
    if utts.is_empty() {
        return Err(CliError::Data(format!("{} split of {} is empty", split, data.display())));
    }
    Ok(utts)
}

fn load_optional(data: &Path, split: &str) -> Result<Vec<Utterance>, CliError> {
    let p = data.join(format!("{split}.jsonl"));
    if p.is_file() {
        Ok(load_manifest(&p)?)
    } else {
        Ok(Vec::new())
    }
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn log_summary(log: &TrainLog) -> serde_json::Value {
    let last = log.epochs.last();
    json!({
        "epochs": log.epochs.len(),
        "steps": log.step_losses.len(),
        "final_train_loss": last.map(|e| e.train_loss),
        "final_dev": last.and_then(|e| e.dev).map(|d| json!({"intent_accuracy": d.intent_accuracy, "f1": d.f1})),
    })
}

fn print_epochs(log: &TrainLog) {
    for e in &log.epochs {
        match e.dev {
            Some(d) => eprintln!(
                "epoch {:>3}  loss {:.4}  dev intent {:.4}  dev f1 {:.4}",
                e.epoch, e.train_loss, d.intent_accuracy, d.f1
            ),
            None => eprintln!("epoch {:>3}  loss {:.4}", e.epoch, e.train_loss),
        }
    }
}

pub fn synth_data(config: Option<&Path>, out: &Path, seed: Option<u64>, json: bool) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.data.synth.seed = s;
    }
    print_config(&cfg);
    let data = synth_generate(&cfg.data.synth, out)?;
    let counts = json!({
        "train": data.train.len(),
        "dev": data.dev.len(),
        "test": data.test.len(),
        "asr": data.asr.len(),
        "words": data.codebook.words.len(),
    });
    if json {
        println!("{counts}");
    } else {
        println!(
            "wrote {} train, {} dev, {} test, {} asr utterances to {}",
            data.train.len(),
            data.dev.len(),
            data.test.len(),
            data.asr.len(),
            out.display()
        );
    }
    Ok(())
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub freeze_encoder: bool,
    pub adapters: bool,
    pub init_encoder: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub vocab_size: Option<usize>,
    pub no_dev: bool,
    pub overrides: TrainOverrides,
    pub json: bool,
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_overrides(&mut cfg, &a.overrides);
    if let Some(v) = a.vocab_size {
        cfg.data.vocab_size = v;
    }
    if a.adapters {
        cfg.model.adapter.enabled = true;
    }
    let train = load_split(&a.data, "train")?;
    let dev = if a.no_dev { Vec::new() } else { load_optional(&a.data, "dev")? };
    let vocab = target_vocab(&train, Target::Semantics, cfg.data.vocab_size)?;
    cfg.model.feat_dim = train[0].features.dim();
    cfg.model.out_vocab = vocab.len();
    let mut model = speech_model(&cfg.model, vocab, cfg.model.feat_dim, cfg.train.seed)?;
    if let Some(p) = &a.init_encoder {
        let src = ModelBundle::load(p)?;
        if src.kind != ModelKind::Speech {
            return Err(CliError::Usage(format!("{} is not a speech checkpoint", p.display())));
        }
        model.load_encoder_from(&src)?;
    }
    if a.freeze_encoder {
        model.freeze_encoder(a.adapters)?;
    }
    print_config(&cfg);
    let (trainable, total) = (model.num_trainable(), model.num_params());
    if !a.json {
        println!(
            "trainable parameters: {trainable} / {total} ({:.2}%)",
            100.0 * trainable as f64 / total as f64
        );
    }

    let examples = speech_examples(&train, model.out_vocab.as_ref().expect("vocab set"), Target::Semantics);
    let dev_sources = sources_of(&dev);
    let dev_golds: Vec<SemanticsRecord> = dev.iter().map(|u| u.semantics.clone()).collect();
    let monitor = DevMonitor {
        sources: &dev_sources,
        golds: &dev_golds,
        decode: DecodeConfig::greedy(cfg.decode.max_len),
        stop_at: None,
    };
    let log = train_monitored(&mut model, &examples, &cfg.train, (!dev.is_empty()).then_some(&monitor))?;
    print_epochs(&log);
    model.save(&a.out)?;
    write_file(&a.log.unwrap_or_else(|| with_ext(&a.out, ".csv")), &log.to_csv())?;
    write_file(&with_ext(&a.out, ".toml"), &cfg.to_toml())?;
    let mut summary = log_summary(&log);
    summary["trainable_params"] = json!(trainable);
    summary["total_params"] = json!(total);
    if a.json {
        println!("{summary}");
    } else {
        println!("saved {}", a.out.display());
    }
    Ok(())
}

pub fn asr_proxy_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    log_path: Option<PathBuf>,
    overrides: &TrainOverrides,
    json: bool,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    apply_overrides(&mut cfg, overrides);
    let mut train = load_optional(data, "asr")?;
    if train.is_empty() {
        train = load_split(data, "train")?;
    }
    let dev = load_optional(data, "dev")?;
    let vocab = target_vocab(&train, Target::Transcript, cfg.data.transcript_vocab_size)?;
    cfg.model.feat_dim = train[0].features.dim();
    cfg.model.out_vocab = vocab.len();
    cfg.model.adapter.enabled = false;
    let mut model = speech_model(&cfg.model, vocab, cfg.model.feat_dim, cfg.train.seed)?;
    print_config(&cfg);
    let examples = speech_examples(&train, model.out_vocab.as_ref().expect("vocab set"), Target::Transcript);
    let log = train_monitored(&mut model, &examples, &cfg.train, None)?;
    print_epochs(&log);
    model.save(out)?;
    write_file(&log_path.unwrap_or_else(|| with_ext(out, ".csv")), &log.to_csv())?;
    write_file(&with_ext(out, ".toml"), &cfg.to_toml())?;
    let acc = if dev.is_empty() {
        None
    } else {
        Some(word_accuracy(&model, &dev, cfg.decode.max_len)?)
    };
    let mut summary = log_summary(&log);
    summary["utterances"] = json!(train.len());
    summary["dev_word_accuracy"] = json!(acc);
    if json {
        println!("{summary}");
    } else {
        if let Some(acc) = acc {
            println!("dev word accuracy: {acc:.4}");
        }
        println!("saved {}", out.display());
    }
    Ok(())
}

pub struct PredictArgs {
    pub config: Option<PathBuf>,
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub beam: Option<usize>,
    pub temperature: Option<f64>,
    pub max_len: Option<usize>,
    pub len_norm: Option<f64>,
    pub greedy: bool,
    pub jsonl: bool,
    pub json: bool,
}

pub fn predict(a: PredictArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let d = &mut cfg.decode;
    if let Some(v) = a.beam {
        d.width = v;
    }
    if let Some(v) = a.temperature {
        d.temperature = v;
    }
    if let Some(v) = a.max_len {
        d.max_len = v;
    }
    if let Some(v) = a.len_norm {
        d.len_norm_alpha = v;
    }
    if a.greedy {
        *d = DecodeConfig::greedy(d.max_len);
    }
    cfg.decode.validate()?;
    let model = ModelBundle::load(&a.ckpt)?;
    let utts = load_split(&a.data, &a.split)?;
    print_config(&cfg);
    let ids: Vec<String> = utts.iter().map(|u| u.id.clone()).collect();
    let preds = predict_all(&model, &ids, &model_sources(&model, &utts), &cfg.decode)?;
    if a.jsonl {
        decoding::write_predictions_jsonl(&a.out, &preds)?;
    } else {
        decoding::write_predictions(&a.out, &preds)?;
    }
    if a.json {
        println!("{}", json!({"predictions": preds.len(), "out": a.out}));
    } else {
        println!("wrote {} predictions to {}", preds.len(), a.out.display());
    }
    Ok(())
}

pub fn score(pred: &Path, gold: &Path, split: &str, mode: MatchMode, json: bool) -> Result<(), CliError> {
    let report = score_files(pred, &manifest_path(gold, split))?;
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{report}");
        let s = report.entities(mode);
        println!("entity f1 ({mode:?}): {:.4}", s.f1);
    }
    Ok(())
}

pub fn cascade_eval(
    config: Option<&Path>,
    data: &Path,
    wer: Vec<f64>,
    split: &str,
    save: Option<PathBuf>,
    overrides: &TrainOverrides,
    json: bool,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    apply_overrides(&mut cfg, overrides);
    if !wer.is_empty() {
        cfg.data.wer_sweep = wer;
    }
    if let Some(w) = cfg.data.wer_sweep.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(CliError::Usage(format!("WER {w} outside [0, 1]")));
    }
    cfg.decode.validate()?;
    let train = load_split(data, "train")?;
    let dev = load_optional(data, "dev")?;
    let eval = load_split(data, split)?;
    print_config(&cfg);
    let mut nlu = build_cascade_nlu(
        &train,
        &cfg.model,
        cfg.data.nlu_in_vocab_size,
        cfg.data.nlu_out_vocab_size,
        cfg.train.seed,
    )?;
    let examples = nlu_examples(&nlu, &train);
    let dev_sources = model_sources(&nlu, &dev);
    let dev_golds: Vec<SemanticsRecord> = dev.iter().map(|u| u.semantics.clone()).collect();
    let monitor = DevMonitor {
        sources: &dev_sources,
        golds: &dev_golds,
        decode: DecodeConfig::greedy(cfg.decode.max_len),
        stop_at: None,
    };
    let log = train_monitored(&mut nlu, &examples, &cfg.train, (!dev.is_empty()).then_some(&monitor))?;
    print_epochs(&log);
    if let Some(p) = &save {
        nlu.save(p)?;
    }
    let mut words = train.clone();
    words.extend(eval.iter().cloned());
    let vocabulary = transcript_words(&words);
    let mut points = Vec::new();
    for &w in &cfg.data.wer_sweep {
        points.push(cascade_point(&nlu, &eval, w, &vocabulary, cfg.train.seed, &cfg.decode)?);
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&points).expect("points serialize"));
    } else {
        println!("{:>8} {:>9} {:>9} {:>9}", "wer", "measured", "intent", "f1");
        for p in &points {
            println!(
                "{:>8.3} {:>9.4} {:>9.4} {:>9.4}",
                p.target_wer, p.measured_wer, p.report.intent_accuracy, p.report.exact.f1
            );
        }
    }
    Ok(())
}

pub fn vocab_sweep(config: Option<&Path>, data: &Path, json: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let train = load_split(data, "train")?;
    print_config(&cfg);
    let mut rows = Vec::new();
    for &size in &cfg.data.vocab_sweep {
        let vocab = target_vocab(&train, Target::Semantics, size)?;
        let (mut tokens, mut lossless, mut unk) = (0usize, true, 0usize);
        for u in &train {
            let s = u.semantics_string();
            let ids = vocab.encode(&s, true);
            tokens += ids.len() - 2;
            unk += ids.iter().filter(|&&i| i == UNK).count();
            lossless &= vocab.decode(&ids)? == s;
        }
        rows.push(json!({
            "vocab_size": size,
            "ids": vocab.len(),
            "mean_tokens": tokens as f64 / train.len() as f64,
            "unk": unk,
            "lossless": lossless,
        }));
    }
    if json {
        println!("{}", serde_json::Value::Array(rows.clone()));
    } else {
        println!("{:>10} {:>6} {:>12} {:>5} {:>9}", "vocab", "ids", "mean tokens", "unk", "lossless");
        for r in &rows {
            println!(
                "{:>10} {:>6} {:>12.2} {:>5} {:>9}",
                r["vocab_size"].as_u64().unwrap_or(0),
                r["ids"].as_u64().unwrap_or(0),
                r["mean_tokens"].as_f64().unwrap_or(0.0),
                r["unk"].as_u64().unwrap_or(0),
                r["lossless"].as_bool().unwrap_or(false)
            );
        }
    }
    if rows.iter().any(|r| r["lossless"] != json!(true) || r["unk"] != json!(0)) {
        return Err(CliError::Data("tokenizer round trip failed".into()));
    }
    Ok(())
}
