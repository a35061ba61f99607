use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use reportgen::decoder::{greedy_generate, AttentionDump, GenerateOptions};
use reportgen::labeler::{classification_report, label_report, ClassificationReport, FindingOntology};
use reportgen::metrics::{evaluate_pairs, read_pairs, MetricSummary};
use reportgen::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use reportgen::synth::{generate as synthesize, read_dataset, split, write_dataset, GeneratorConfig, Record};
use reportgen::tokenizer::Tokenizer;
use reportgen::trainer::{evaluate as eval_loss, train_epoch, AdamState, Sample, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::manifest::{sibling, RunManifest};
use crate::{
    AttentionArgs, EvaluateArgs, GenerateArgs, SplitArgs, SplitName, SynthArgs, TokenizeArgs, TrainArgs,
};

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON config", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("{}: cannot write", path.display()))
}

fn ontology(path: Option<&Path>) -> Result<FindingOntology> {
    Ok(match path {
        Some(p) => FindingOntology::load(p)?,
        None => FindingOntology::standard(),
    })
}

fn select(records: Vec<Record>, which: SplitName, args: &SplitArgs) -> Result<Vec<Record>> {
    let ratios: [f64; 3] = args.split_ratios[..].try_into().context("--split-ratios needs three values")?;
    let (train, validate, test) = split(&records, ratios, args.split_seed)?;
    Ok(match which {
        SplitName::Train => train,
        SplitName::Validate => validate,
        SplitName::Test => test,
        SplitName::All => records,
    })
}

fn split_settings(args: &SplitArgs) -> serde_json::Value {
    serde_json::json!({ "split_seed": args.split_seed, "split_ratios": args.split_ratios })
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => read_json::<GeneratorConfig>(p)?,
        None => GeneratorConfig::standard(0, 2000),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_samples {
        cfg.n_samples = n;
    }
    let onto = ontology(args.ontology.as_deref())?;
    let mut manifest = RunManifest::new(Some(cfg.seed), serde_json::to_value(&cfg)?)
        .input("config", args.config.as_deref())?
        .input("ontology", args.ontology.as_deref())?;
    let records = synthesize(&cfg, &onto)?;
    write_dataset(&args.out, &records)?;
    manifest.output("dataset", &args.out)?;
    manifest.write(&sibling(&args.out))
}

pub fn tokenize(args: &TokenizeArgs) -> Result<()> {
    let records = select(read_dataset(&args.dataset)?, args.split, &args.splits)?;
    ensure!(!records.is_empty(), "{}: selected split is empty", args.dataset.display());
    let reports: Vec<&str> = records.iter().map(|r| r.report.as_str()).collect();
    let tok = Tokenizer::train(&reports, args.vocab_size)?;
    let mut settings = split_settings(&args.splits);
    settings["vocab_size"] = args.vocab_size.into();
    settings["split"] = format!("{:?}", args.split).to_lowercase().into();
    let mut manifest = RunManifest::new(None, settings).input("dataset", Some(&args.dataset))?;
    tok.save(&args.out)?;
    manifest.output("vocab", &args.out)?;
    manifest.write(&sibling(&args.out))
}

fn samples(records: &[Record], tok: &Tokenizer, max_len: usize) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| Sample::from_record(r, tok, max_len).with_context(|| format!("sample {}", r.id)))
        .collect()
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let tok = Tokenizer::load(&args.vocab)?;
    let model_cfg = match &args.model_config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => ModelConfig::desk_scale(tok.vocab_size()),
    };
    model_cfg.validate()?;
    ensure!(
        model_cfg.vocab_size >= tok.vocab_size(),
        "model vocab_size {} is smaller than the {}-token vocabulary in {}",
        model_cfg.vocab_size,
        tok.vocab_size(),
        args.vocab.display()
    );
    let mut train_cfg = match &args.train_config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    if let Some(lr) = args.learning_rate {
        train_cfg.learning_rate = lr;
    }
    train_cfg.validate()?;

    let all = read_dataset(&args.dataset)?;
    let train_set = samples(&select(all.clone(), SplitName::Train, &args.splits)?, &tok, model_cfg.max_len)?;
    let val_set = samples(&select(all, SplitName::Validate, &args.splits)?, &tok, model_cfg.max_len)?;
    ensure!(!train_set.is_empty(), "{}: training split is empty", args.dataset.display());
    if args.select_best {
        ensure!(!val_set.is_empty(), "--select-best needs a non-empty validation split");
    }
    for s in train_set.iter().chain(&val_set) {
        let shape = [model_cfg.image_grid.height, model_cfg.image_grid.width, model_cfg.image_grid.channels];
        ensure!(s.image.shape() == shape, "sample {} has extents {:?}, model expects {shape:?}", s.id, s.image.shape());
    }

    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("{}: cannot create", args.out_dir.display()))?;
    let mut settings = split_settings(&args.splits);
    settings["model"] = serde_json::to_value(&model_cfg)?;
    settings["train"] = serde_json::to_value(&train_cfg)?;
    settings["select_best"] = args.select_best.into();
    let mut manifest = RunManifest::new(Some(train_cfg.seed), settings)
        .input("dataset", Some(&args.dataset))?
        .input("vocab", Some(&args.vocab))?
        .input("model_config", args.model_config.as_deref())?
        .input("train_config", args.train_config.as_deref())?;

    let mut params = ModelParams::init(&model_cfg, train_cfg.seed);
    let mut state = AdamState::for_model(&params);
    let ckpt = |name: String, p: &ModelParams| -> Result<std::path::PathBuf> {
        let path = args.out_dir.join(name);
        save_checkpoint(&path, &model_cfg, p)?;
        Ok(path)
    };
    let initial = ckpt("epoch_0000.ckpt".into(), &params)?;
    manifest.output("epoch_0000", &initial)?;

    let start = Instant::now();
    let mut log = String::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 0..train_cfg.epochs {
        let stats = train_epoch(&train_set, &mut params, &mut state, &model_cfg, &train_cfg, epoch)?;
        let val = if val_set.is_empty() {
            None
        } else {
            Some(eval_loss(&val_set, &params, &model_cfg, train_cfg.batch_size)?)
        };
        let fmt = |v: Option<f64>| v.map_or("nan".to_owned(), |x| format!("{x:.6}"));
        let _ = writeln!(
            log,
            "{}\t{:.6}\t{:.6}\t{}\t{}\t{:.3}",
            epoch + 1,
            stats.mean_loss,
            stats.token_accuracy,
            fmt(val.as_ref().map(|v| v.mean_loss)),
            fmt(val.as_ref().map(|v| v.token_accuracy)),
            start.elapsed().as_secs_f64()
        );
        let name = format!("epoch_{:04}", epoch + 1);
        let path = ckpt(format!("{name}.ckpt"), &params)?;
        manifest.output(&name, &path)?;
        if let (true, Some(v)) = (args.select_best, &val) {
            if best.as_ref().is_none_or(|(b, _, _)| v.mean_loss < *b) {
                best = Some((v.mean_loss, epoch + 1, params.clone()));
            }
        }
    }
    let log_path = args.out_dir.join("train.log");
    write_text(&log_path, &log)?;
    let final_params = match &best {
        Some((_, _, p)) => p,
        None => &params,
    };
    let model_path = ckpt("model.ckpt".into(), final_params)?;
    manifest.settings["selected_epoch"] = best.map_or(train_cfg.epochs, |(_, e, _)| e).into();
    manifest.output("model", &model_path)?;
    manifest.write(&args.out_dir.join("manifest.json"))
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    candidate: String,
    references: Vec<&'a str>,
    token_ids: Vec<u32>,
}

fn load_model(checkpoint: &Path, vocab: &Path) -> Result<(ModelConfig, ModelParams, Tokenizer)> {
    let (cfg, params) = load_checkpoint(checkpoint)?;
    let tok = Tokenizer::load(vocab)?;
    ensure!(
        tok.vocab_size() <= cfg.vocab_size,
        "{} has {} tokens but {} was trained for {}",
        vocab.display(),
        tok.vocab_size(),
        checkpoint.display(),
        cfg.vocab_size
    );
    Ok((cfg, params, tok))
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let (cfg, params, tok) = load_model(&args.checkpoint, &args.vocab)?;
    let records = select(read_dataset(&args.dataset)?, args.split, &args.splits)?;
    let opts = GenerateOptions { max_tokens: args.max_tokens, attention_layer: None, vocab_limit: None };
    let mut settings = split_settings(&args.splits);
    settings["split"] = format!("{:?}", args.split).to_lowercase().into();
    settings["max_tokens"] = args.max_tokens.into();
    let mut manifest = RunManifest::new(None, settings)
        .input("checkpoint", Some(&args.checkpoint))?
        .input("vocab", Some(&args.vocab))?
        .input("dataset", Some(&args.dataset))?;
    let mut out = String::new();
    for r in &records {
        let image = r.image()?;
        let gen = greedy_generate(&image, &params, &cfg, &tok, &opts).with_context(|| format!("sample {}", r.id))?;
        let line = Prediction { id: &r.id, candidate: gen.text, references: vec![&r.report], token_ids: gen.token_ids };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    write_text(&args.out, &out)?;
    manifest.output("predictions", &args.out)?;
    manifest.write(&sibling(&args.out))
}

#[derive(Serialize)]
struct Evaluation {
    nlp: MetricSummary,
    classification: ClassificationReport,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let onto = ontology(args.ontology.as_deref())?;
    let pairs = read_pairs(&args.predictions)?;
    let nlp = evaluate_pairs(&pairs)?;
    let pred: Vec<BTreeSet<String>> = pairs.iter().map(|p| label_report(&p.candidate, &onto)).collect();
    let truth: Vec<BTreeSet<String>> = pairs.iter().map(|p| label_report(&p.references[0], &onto)).collect();
    let classification = classification_report(&pred, &truth, &onto.ids())?;
    let mut manifest = RunManifest::new(None, serde_json::json!({}))
        .input("predictions", Some(&args.predictions))?
        .input("ontology", args.ontology.as_deref())?;
    write_text(&args.out, &(serde_json::to_string_pretty(&Evaluation { nlp, classification })? + "\n"))?;
    manifest.output("metrics", &args.out)?;
    manifest.write(&sibling(&args.out))
}

pub fn attention(args: &AttentionArgs) -> Result<()> {
    let (cfg, params, tok) = load_model(&args.checkpoint, &args.vocab)?;
    let records = read_dataset(&args.dataset)?;
    let Some(record) = records.iter().find(|r| r.id == args.sample_id) else {
        bail!("{}: no sample with id {:?}", args.dataset.display(), args.sample_id);
    };
    let opts = GenerateOptions { max_tokens: args.max_tokens, attention_layer: args.layer, vocab_limit: None };
    let mut manifest = RunManifest::new(
        None,
        serde_json::json!({ "sample_id": args.sample_id, "layer": args.layer, "max_tokens": args.max_tokens }),
    )
    .input("checkpoint", Some(&args.checkpoint))?
    .input("vocab", Some(&args.vocab))?
    .input("dataset", Some(&args.dataset))?;
    let gen = greedy_generate(&record.image()?, &params, &cfg, &tok, &opts)?;
    AttentionDump::from_generation(&gen, &tok).save(&args.out)?;
    manifest.output("attention", &args.out)?;
    manifest.write(&sibling(&args.out))
}
