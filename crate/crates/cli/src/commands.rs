use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use mmgpt_core::chat::{chat_turn, read_image_arg, vocab_path, ChatModel, ChatSession};
use mmgpt_core::dataops::{build_mixture, export, ingest, resolve_images, synth_source, Kind, MixtureReport, MixtureSpec};
use mmgpt_core::model::{Decoding, Model, ModelConfig};
use mmgpt_core::templates::{DialogueRecord, TemplateOptions};
use mmgpt_core::tokenizer::Vocab;
use mmgpt_core::trainer::{
    build_examples, corpus_texts, evaluate, train, EvalReport, Example, TrainConfig, TrainMode, TrainOutputs,
    TrainReport,
};

use crate::usage;

pub const VL_SHARD: &str = "vl.jsonl";
pub const LM_SHARD: &str = "lm.jsonl";

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {what} {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{what} {}: {e}", path.display())))
}

/// Synthesizes every source that asks for it, builds the mixture and writes
/// `vl.jsonl`, `lm.jsonl` and a report into `out`. Raw sources live in
/// `sources` (default: `out/sources`).
pub fn prepare(spec: Option<&Path>, sources: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<MixtureReport> {
    let mut spec: MixtureSpec = match spec {
        Some(p) => read_json(p, "mixture spec")?,
        None => MixtureSpec::instruction_default(0),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let sources = sources.map(Path::to_path_buf).unwrap_or_else(|| out.join("sources"));
    std::fs::create_dir_all(&sources)?;
    // Absolute so the shards' image references work from anywhere.
    let sources = std::fs::canonicalize(&sources)?;
    for (i, src) in spec.sources.iter().enumerate() {
        if src.synth.is_some() && !spec.exclude_sources.contains(&src.name) {
            let path = synth_source(&sources, src, spec.seed.wrapping_add(i as u64 * 7919))?;
            log::info!("synthesized {} -> {}", src.name, path.display());
        }
    }
    let mix = build_mixture(&spec, &sources)?;
    export(&out.join(VL_SHARD), &mix.vl)?;
    export(&out.join(LM_SHARD), &mix.lm)?;
    std::fs::write(out.join("report.txt"), mix.report.to_string())?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&mix.report)?)?;
    Ok(mix.report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Full(ModelConfig),
}

fn default_vocab() -> usize {
    1024
}

fn default_model() -> ModelChoice {
    ModelChoice::Preset("desk".into())
}

/// Contents of a `train --config` file. `train` holds trainer settings
/// except the mode, which comes from the command line.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default = "default_model")]
    pub model: ModelChoice,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default)]
    pub template: TemplateOptions,
    #[serde(default)]
    pub train: serde_json::Map<String, serde_json::Value>,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            model: default_model(),
            vocab_size: default_vocab(),
            template: TemplateOptions::default(),
            train: Default::default(),
        }
    }
}

impl TrainFile {
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut cfg = match &self.model {
            ModelChoice::Preset(p) if p == "desk" => ModelConfig::desk(vocab_size),
            ModelChoice::Preset(p) if p == "tiny" => ModelConfig::tiny(vocab_size),
            ModelChoice::Preset(p) => return Err(usage(format!("model: unknown preset `{p}` (desk, tiny)"))),
            ModelChoice::Full(c) => c.clone(),
        };
        cfg.vocab_size = vocab_size;
        Ok(cfg)
    }

    pub fn train_config(&self, mode: TrainMode) -> Result<TrainConfig> {
        let mut map = self.train.clone();
        map.insert("mode".into(), serde_json::to_value(mode)?);
        let cfg: TrainConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| usage(format!("train: {e}")))?;
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Records of a prepared data directory, image references resolved.
pub fn load_shards(data: &Path) -> Result<(Vec<DialogueRecord>, Vec<DialogueRecord>)> {
    let read = |name: &str, kind| -> Result<Vec<DialogueRecord>> {
        let path = data.join(name);
        let mut recs = ingest(&path, kind)?.collect::<std::result::Result<Vec<_>, _>>()?;
        resolve_images(&mut recs, data);
        Ok(recs)
    };
    Ok((read(VL_SHARD, Kind::VisionLanguage)?, read(LM_SHARD, Kind::Language)?))
}

fn fitting(examples: Vec<Example>, max_len: usize, what: &str) -> Vec<Example> {
    let before = examples.len();
    let kept: Vec<_> = examples.into_iter().filter(|e| e.sample.len() <= max_len).collect();
    if kept.len() < before {
        log::warn!("dropped {} {what} samples longer than {max_len} tokens", before - kept.len());
    }
    kept
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: PathBuf,
    pub adapters: Option<PathBuf>,
    pub metrics: PathBuf,
    pub report: TrainReport,
}

/// Pretrains a fresh model (`Pretrain`) or fine-tunes adapters on top of
/// `base` (`LoraFinetune`), writing checkpoints, vocabulary and metrics
/// into `out`.
pub fn train_cmd(
    file: &TrainFile,
    mode: TrainMode,
    data: &Path,
    out: &Path,
    base: Option<&Path>,
    seed: Option<u64>,
) -> Result<TrainRun> {
    let mut tcfg = file.train_config(mode)?;
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    let (vl_recs, lm_recs) = load_shards(data)?;
    std::fs::create_dir_all(out)?;
    let (mut model, vocab, stem) = match mode {
        TrainMode::Pretrain => {
            if base.is_some() {
                log::warn!("--checkpoint is ignored when pretraining");
            }
            let texts: Vec<String> = corpus_texts(&vl_recs, file.template)?
                .into_iter()
                .chain(corpus_texts(&lm_recs, file.template)?)
                .collect();
            let vocab = Vocab::build(texts.iter().map(String::as_str), file.vocab_size)?;
            let mut cfg = file.model_config(vocab.len())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            (Model::<f32>::new(cfg)?, vocab, "base")
        }
        TrainMode::LoraFinetune => {
            let base = base.ok_or_else(|| usage("lora mode needs --checkpoint pointing at a pretrained base"))?;
            let mut model = Model::<f32>::load(base).with_context(|| format!("loading {}", base.display()))?;
            let vocab = Vocab::load(&vocab_path(base)).with_context(|| format!("loading vocabulary for {}", base.display()))?;
            if !model.has_lora() {
                model.inject_lora()?;
            }
            (model, vocab, "lora")
        }
    };
    let checkpoint = out.join(format!("{stem}.ck"));
    vocab.save(&vocab_path(&checkpoint))?;
    let max = model.cfg.max_seq_len;
    let vl = fitting(build_examples(&vl_recs, &vocab, file.template)?, max, "vision-language");
    let lm = fitting(build_examples(&lm_recs, &vocab, file.template)?, max, "language");
    let metrics = out.join(format!("metrics_{stem}.csv"));
    if metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }
    let adapters = (mode == TrainMode::LoraFinetune).then(|| out.join("adapters.ck"));
    let outputs = TrainOutputs {
        metrics_csv: Some(metrics.clone()),
        checkpoint: Some(checkpoint.clone()),
        adapters: adapters.clone(),
    };
    log::info!(
        "{mode:?}: {} vl + {} lm samples, {}, {} trainable of {} parameters",
        vl.len(),
        lm.len(),
        model.cfg.summary(),
        model.store.trainable_count(),
        model.store.total_count()
    );
    let report = train(&mut model, &vl, &lm, &tcfg, &outputs)?;
    Ok(TrainRun {
        checkpoint,
        adapters,
        metrics,
        report,
    })
}

pub fn load_engine(checkpoint: Option<&Path>) -> Result<ChatModel> {
    let ck = checkpoint.ok_or_else(|| usage("--checkpoint is required"))?;
    ChatModel::load(ck).with_context(|| format!("loading {}", ck.display()))
}

pub fn eval_cmd(engine: &ChatModel, data: &Path, limit: Option<usize>, max_new: usize) -> Result<EvalReport> {
    let (vl, lm) = load_shards(data)?;
    let take = limit.unwrap_or(usize::MAX);
    let recs: Vec<_> = vl.into_iter().take(take).chain(lm.into_iter().take(take)).collect();
    let examples = fitting(
        build_examples(&recs, &engine.vocab, engine.opts)?,
        engine.model.cfg.max_seq_len,
        "held-out",
    );
    Ok(evaluate(&engine.model, &examples, &engine.vocab, engine.opts, max_new)?)
}

/// Sampling mode for a request: greedy unless a positive temperature is given.
pub fn decoding(temperature: Option<f64>, seed: Option<u64>) -> Decoding {
    match temperature {
        Some(tau) if tau > 0.0 => Decoding::Temperature {
            tau,
            seed: seed.unwrap_or(0),
        },
        _ => Decoding::Greedy,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnReply {
    pub response: String,
    pub round_index: usize,
}

/// Interactive chat: one instruction per input line. Replies are printed as
/// plain text, or as one JSON object per line with `json`.
pub fn chat_repl(
    engine: &ChatModel,
    image: Option<&str>,
    mode: Decoding,
    json: bool,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<ChatSession> {
    let mut session = ChatSession::new("cli");
    if let Some(arg) = image {
        let (r, img) = read_image_arg(arg)?;
        session.attach_image(r, img)?;
    }
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match chat_turn(&mut session, &line, engine, mode) {
            Ok(response) => {
                let reply = TurnReply {
                    response,
                    round_index: session.history.len() - 1,
                };
                if json {
                    writeln!(output, "{}", serde_json::to_string(&reply)?)?;
                } else {
                    writeln!(output, "{}", reply.response)?;
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                if json {
                    writeln!(output, "{}", serde_json::json!({ "error": e.to_string() }))?;
                }
            }
        }
        output.flush()?;
    }
    Ok(session)
}
