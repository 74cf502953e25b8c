//! Training, evaluation, checkpoints, metrics and graph export.
//!
//! All four tasks share one loop. Recognition tasks (`cslr`,
//! `tcp_pretrain`) minimise the CTC loss of both the final and the
//! auxiliary classifier; fine-tuning tasks add the decoder cross-entropy
//! with weight 1. Every random choice (initialisation, shuffling,
//! augmentation, DropEdge) is drawn from a stream keyed by the seed and the
//! epoch/sample position, so a run resumed from a checkpoint repeats the
//! uninterrupted run step for step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{stack_frames, Frame};
use crate::ctc::{greedy_decode, is_feasible, wer, WerReport};
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::graph::{to_dot, to_json, GraphKind};
use crate::head::{cross_entropy, reduced_len, BOS, EOS, MIN_HEAD_STEPS, NUM_SPECIALS, UNK};
use crate::model::{Model, ModelConfig};
use crate::optim::{lr_at, scale_decay_epochs, Adam, AdamConfig};
use crate::rng::{derive_seed, substream};
use crate::tcp::{
    build_vocab, feature_dispersion, make_pseudo_gloss, Lemmatizer, NormalizerConfig,
};
use crate::tensor::{GradBuffer, ParamBinder, ParamStore, Tape};
use crate::vocab::GlossVocab;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,split,loss,wer,del,ins,sub,dispersion";
pub const TRANSLATION_FILE: &str = "translation.csv";
pub const TRANSLATION_HEADER: &str = "epoch,split,ce,token_accuracy";
pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";

// stream tags
const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const AUGMENT: u64 = 3;
const DROP: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Cslr,
    TcpPretrain,
    FinetuneGloss,
    FinetuneGlossfree,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Task {
    /// Name used in configuration files.
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Cslr => "cslr",
            Task::TcpPretrain => "tcp_pretrain",
            Task::FinetuneGloss => "finetune_gloss",
            Task::FinetuneGlossfree => "finetune_glossfree",
        }
    }

    pub fn uses_decoder(self) -> bool {
        matches!(self, Task::FinetuneGloss | Task::FinetuneGlossfree)
    }

    /// CTC targets come from pseudo glosses rather than gloss labels.
    pub fn uses_pseudo_glosses(self) -> bool {
        matches!(self, Task::TcpPretrain | Task::FinetuneGlossfree)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub decoder_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Decay epochs given for `decay_reference` total epochs; rescaled to
    /// `epochs`.
    pub decay_epochs: Vec<usize>,
    pub decay_reference: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            decoder_lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 30,
            decay_epochs: vec![20, 30],
            decay_reference: 50,
            decay_factor: 0.5,
            batch_size: 4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "decay epochs must be strictly increasing".into(),
            ));
        }
        if self.batch_size == 0 || self.decay_reference == 0 {
            return Err(Error::Config(
                "batch_size and decay_reference must be positive".into(),
            ));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("decoder_lr", self.decoder_lr),
            ("decay_factor", self.decay_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn decay_schedule(&self) -> Vec<usize> {
        scale_decay_epochs(&self.decay_epochs, self.decay_reference, self.epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoGlossConfig {
    pub lemmatizer: Lemmatizer,
    pub function_word_filter: bool,
}

impl Default for PseudoGlossConfig {
    fn default() -> Self {
        Self {
            lemmatizer: Lemmatizer::SuffixStrip,
            function_word_filter: false,
        }
    }
}

impl PseudoGlossConfig {
    pub fn normalizer(&self) -> NormalizerConfig {
        let n = NormalizerConfig::default().with_lemmatizer(self.lemmatizer);
        if self.function_word_filter {
            n.with_function_word_filter()
        } else {
            n
        }
    }
}

fn default_temporal_scale() -> f64 {
    0.2
}

fn default_decode_len() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Training clips are resampled to a random length within this
    /// fraction of the original.
    #[serde(default = "default_temporal_scale")]
    pub temporal_scale: f64,
    #[serde(default)]
    pub pseudo_gloss: PseudoGlossConfig,
    /// Checkpoint directory to initialise from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(default = "default_decode_len")]
    pub max_decode_len: usize,
}

impl TrainConfig {
    pub fn new(dataset: impl Into<PathBuf>, task: Task) -> Self {
        Self {
            dataset: dataset.into(),
            task,
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            temporal_scale: default_temporal_scale(),
            pseudo_gloss: PseudoGlossConfig::default(),
            init: None,
            max_decode_len: default_decode_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if !(0.0..1.0).contains(&self.temporal_scale) {
            return Err(Error::Config("temporal_scale must lie in [0, 1)".into()));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Config("max_decode_len must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("train config", e))
    }
}

/// One row of the metrics CSV. Training rows only carry the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    /// Mean objective over samples whose target fits; absent when none do.
    pub loss: Option<f64>,
    pub wer: Option<WerReport>,
    pub dispersion: Option<f64>,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},", self.epoch, self.split);
        if let Some(l) = self.loss {
            write!(s, "{l}").expect("string write");
        }
        match &self.wer {
            Some(w) => write!(s, ",{},{},{},{}", w.wer, w.del, w.ins, w.sub).expect("string write"),
            None => s.push_str(",,,,"),
        }
        match self.dispersion {
            Some(d) => write!(s, ",{d}").expect("string write"),
            None => s.push(','),
        }
        s
    }
}

/// Decoder metrics of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub epoch: usize,
    pub ce: Option<f64>,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub split: String,
    pub metrics: MetricsRecord,
    pub translation: Option<TranslationRecord>,
    /// Samples whose CTC target does not fit the output length.
    pub infeasible: usize,
    /// Target tokens missing from the training vocabulary.
    pub unknown_tokens: usize,
}

/// Everything a run persists besides parameters and optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: Vec<MetricsRecord>,
    pub translation_history: Vec<(String, TranslationRecord)>,
    /// Streams are keyed by `seed` and the epoch, so these two values are
    /// the complete random state.
    pub rng_seed: u64,
    pub rng_next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub adam: Adam,
    pub state: RunState,
    pub ctc_vocab: GlossVocab,
    pub text_vocab: Option<GlossVocab>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.json"), self.config.to_json()? + "\n")?;
        self.params
            .save(&dir.join("params.json"), &dir.join("params.bin"))?;
        self.adam
            .m
            .save(&dir.join("adam_m.json"), &dir.join("adam_m.bin"))?;
        self.adam
            .v
            .save(&dir.join("adam_v.json"), &dir.join("adam_v.bin"))?;
        let optim = serde_json::json!({ "step": self.adam.step, "config": self.adam.cfg });
        write(
            &dir.join("optimizer.json"),
            serde_json::to_string_pretty(&optim).map_err(|e| Error::json("optimizer", e))? + "\n",
        )?;
        write(
            &dir.join("state.json"),
            serde_json::to_string_pretty(&self.state).map_err(|e| Error::json("state", e))? + "\n",
        )?;
        self.ctc_vocab.save(&dir.join("ctc_vocab.json"))?;
        let text_path = dir.join("text_vocab.json");
        match &self.text_vocab {
            Some(v) => v.save(&text_path)?,
            None if text_path.exists() => {
                fs::remove_file(&text_path).map_err(|e| Error::io(&text_path, e))?
            }
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = TrainConfig::from_json(&read_string(&dir.join("config.json"))?)?;
        let params = ParamStore::load(&dir.join("params.json"), &dir.join("params.bin"))?;
        let m = ParamStore::load(&dir.join("adam_m.json"), &dir.join("adam_m.bin"))?;
        let v = ParamStore::load(&dir.join("adam_v.json"), &dir.join("adam_v.bin"))?;
        #[derive(Deserialize)]
        struct Optim {
            step: u64,
            config: AdamConfig,
        }
        let o: Optim = serde_json::from_str(&read_string(&dir.join("optimizer.json"))?)
            .map_err(|e| Error::json("optimizer", e))?;
        let adam = Adam::from_state(o.config, o.step, m, v, &params)?;
        let state: RunState = serde_json::from_str(&read_string(&dir.join("state.json"))?)
            .map_err(|e| Error::json("state", e))?;
        let ctc_vocab = GlossVocab::load(&dir.join("ctc_vocab.json"))?;
        let text_path = dir.join("text_vocab.json");
        let text_vocab = if text_path.exists() {
            Some(GlossVocab::load(&text_path)?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            adam,
            state,
            ctc_vocab,
            text_vocab,
        })
    }

    /// Rebuilds the network skeleton; parameters come from the checkpoint.
    pub fn model(&self) -> Result<Model> {
        let (model, fresh) = build_model(&self.config, &self.ctc_vocab, self.text_vocab.as_ref())?;
        let layout = |s: &ParamStore| {
            s.iter()
                .map(|(_, n, t)| (n.to_owned(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        if layout(&fresh) != layout(&self.params) {
            return Err(Error::Format(
                "checkpoint parameters do not match its configuration".into(),
            ));
        }
        Ok(model)
    }
}

fn build_model(
    cfg: &TrainConfig,
    ctc: &GlossVocab,
    text: Option<&GlossVocab>,
) -> Result<(Model, ParamStore)> {
    let mut rng = substream(cfg.seed, &[INIT]);
    Model::new(
        &cfg.model,
        ctc.size(),
        text.map(|v| NUM_SPECIALS + v.num_tokens()),
        &mut rng,
    )
}

/// A sample with its targets resolved.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub frames: Vec<Frame>,
    pub ctc_target: Vec<usize>,
    /// `[BOS, tokens.., EOS]` in decoder ids.
    pub text_target: Option<Vec<usize>>,
}

impl Prepared {
    pub fn feasible(&self, frames: usize) -> bool {
        frames >= MIN_HEAD_STEPS && is_feasible(&self.ctc_target, reduced_len(frames))
    }
}

/// Words of the spoken text used as translation targets.
pub fn text_tokens(text: &str) -> Vec<String> {
    make_pseudo_gloss(text, &NormalizerConfig::default())
}

pub struct Vocabs {
    pub ctc: GlossVocab,
    pub text: Option<GlossVocab>,
}

/// Builds the CTC and text vocabularies from the training split.
pub fn build_vocabs(cfg: &TrainConfig, ds: &Dataset, train: &[Sample]) -> Result<Vocabs> {
    let ctc = if cfg.task.uses_pseudo_glosses() {
        let norm = cfg.pseudo_gloss.normalizer();
        let corpus: Vec<Vec<String>> = train
            .iter()
            .map(|s| make_pseudo_gloss(&s.text, &norm))
            .collect();
        build_vocab(&corpus)?.with_lowercase_flag(true)
    } else {
        GlossVocab::from_tokens(ds.glosses().to_vec())?
    };
    let text = if cfg.task.uses_decoder() {
        let corpus: Vec<Vec<String>> = train.iter().map(|s| text_tokens(&s.text)).collect();
        Some(build_vocab(&corpus)?.with_lowercase_flag(true))
    } else {
        None
    };
    Ok(Vocabs { ctc, text })
}

/// Resolves targets; returns the samples and the count of unknown tokens.
pub fn prepare(
    cfg: &TrainConfig,
    ds: &Dataset,
    vocabs: &Vocabs,
    samples: Vec<Sample>,
) -> Result<(Vec<Prepared>, usize)> {
    let norm = cfg.pseudo_gloss.normalizer();
    let mut unknown = 0;
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let ctc_target = if cfg.task.uses_pseudo_glosses() {
            let (ids, unk) = vocabs.ctc.encode_known(&make_pseudo_gloss(&s.text, &norm));
            unknown += unk;
            ids
        } else {
            s.gloss_ids
                .iter()
                .map(|&g| {
                    let name = ds.glosses().get(g).ok_or_else(|| {
                        Error::Format(format!("{}: gloss id {g} out of range", s.id))
                    })?;
                    vocabs.ctc.id(name).ok_or_else(|| {
                        Error::Format(format!("gloss {name} missing from vocabulary"))
                    })
                })
                .collect::<Result<_>>()?
        };
        let text_target = vocabs.text.as_ref().map(|tv| {
            let mut t = vec![BOS];
            for w in text_tokens(&s.text) {
                match tv.id(&w) {
                    Some(id) => t.push(id - 1 + NUM_SPECIALS),
                    None => {
                        unknown += 1;
                        t.push(UNK);
                    }
                }
            }
            t.push(EOS);
            t
        });
        out.push(Prepared {
            id: s.id,
            frames: s.frames,
            ctc_target,
            text_target,
        });
    }
    Ok((out, unknown))
}

/// Nearest-frame resampling to `len` frames.
pub fn resample(frames: &[Frame], len: usize) -> Vec<Frame> {
    let t = frames.len();
    (0..len)
        .map(|i| frames[(((i as f64 + 0.5) * t as f64 / len as f64) as usize).min(t - 1)].clone())
        .collect()
}

/// Random temporal rescaling, kept only when the target still fits.
fn augment(s: &Prepared, scale: f64, rng: &mut impl Rng) -> Vec<Frame> {
    if scale == 0.0 {
        return s.frames.clone();
    }
    let f = rng.gen_range(1.0 - scale..=1.0 + scale);
    let len = ((s.frames.len() as f64 * f).round() as usize).max(1);
    if s.feasible(len) {
        resample(&s.frames, len)
    } else {
        s.frames.clone()
    }
}

/// Total objective of one sample on `tape`; also returns the CE term.
fn sample_objective(
    model: &Model,
    tape: &mut Tape,
    p: &mut ParamBinder,
    frames: &[Frame],
    s: &Prepared,
    drop_seed: Option<u64>,
) -> Result<(crate::tensor::Var, Option<f64>)> {
    let x = tape.constant(stack_frames(frames)?);
    let out = model.forward(tape, p, x, drop_seed)?;
    let lp = tape.log_softmax(out.head.logits)?;
    let main = tape.ctc_loss(lp, &s.ctc_target)?;
    let lp_aux = tape.log_softmax(out.head.conv_logits)?;
    let aux = tape.ctc_loss(lp_aux, &s.ctc_target)?;
    let mut loss = tape.add(main, aux)?;
    let mut ce_value = None;
    if let (Some(dec), Some(target)) = (&model.decoder, &s.text_target) {
        let dlp = dec.teacher_forced(tape, p, out.head.features, target)?;
        let ce = cross_entropy(tape, dlp, &target[1..])?;
        ce_value = Some(tape.value(ce).item());
        loss = tape.add(loss, ce)?;
    }
    Ok((loss, ce_value))
}

/// Position-wise matches over `max(|ref|, |hyp|)`, pooled over samples.
pub fn token_accuracy(pairs: &[(Vec<usize>, Vec<usize>)]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (hyp, r) in pairs {
        hit += hyp.iter().zip(r).filter(|(a, b)| a == b).count();
        total += hyp.len().max(r.len());
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Evaluates prepared samples without gradient tracking.
pub fn evaluate_prepared(
    model: &Model,
    store: &ParamStore,
    samples: &[Prepared],
    epoch: usize,
    split: &str,
    max_decode_len: usize,
) -> Result<EvalRecord> {
    let mut losses = Vec::new();
    let mut ces = Vec::new();
    let mut reports = Vec::new();
    let mut dispersions = Vec::new();
    let mut pairs = Vec::new();
    let mut infeasible = 0;
    for s in samples {
        if s.frames.len() < MIN_HEAD_STEPS {
            infeasible += 1;
            continue;
        }
        let inf = model.infer(store, &s.frames)?;
        let hyp = greedy_decode(&inf.log_probs);
        if !s.ctc_target.is_empty() {
            reports.push(wer(&hyp, &s.ctc_target)?);
        }
        if inf.features.shape()[0] >= 2 {
            dispersions.push(feature_dispersion(&inf.features)?);
        }
        if let (Some(dec), Some(target)) = (&model.decoder, &s.text_target) {
            let d = dec.greedy(store, &inf.features, max_decode_len)?;
            pairs.push((d.tokens, target[1..target.len() - 1].to_vec()));
        }
        if s.feasible(s.frames.len()) {
            let mut tape = Tape::new();
            let mut p = ParamBinder::new(store, false);
            let (loss, ce) = sample_objective(model, &mut tape, &mut p, &s.frames, s, None)?;
            losses.push(tape.value(loss).item());
            ces.extend(ce);
        } else {
            infeasible += 1;
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let translation = model.decoder.as_ref().map(|_| TranslationRecord {
        epoch,
        ce: mean(&ces),
        token_accuracy: token_accuracy(&pairs),
    });
    Ok(EvalRecord {
        split: split.to_owned(),
        metrics: MetricsRecord {
            epoch,
            split: split.to_owned(),
            loss: mean(&losses),
            wer: Some(WerReport::merge(&reports)),
            dispersion: mean(&dispersions),
        },
        translation,
        infeasible,
        unknown_tokens: 0,
    })
}

/// Options that steer a run without being part of its configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint directory (normally `<out>/last`).
    pub resume: Option<PathBuf>,
    /// Stop after this epoch even if the configuration asks for more.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub best: Checkpoint,
    pub history: Vec<MetricsRecord>,
    pub skipped: usize,
    pub unknown_dev_tokens: usize,
}

fn mismatch_error(init: &ParamStore, store: &ParamStore) -> Option<Error> {
    let bad: Vec<String> = store
        .iter()
        .filter_map(|(_, n, t)| match init.by_name(n) {
            Some(v) if v.shape() != t.shape() => {
                Some(format!("{n} ({:?} vs {:?})", v.shape(), t.shape()))
            }
            _ => None,
        })
        .collect();
    (!bad.is_empty()).then(|| {
        Error::Config(format!(
            "init checkpoint does not match the model: {}",
            bad.join(", ")
        ))
    })
}

fn score(task: Task, eval: &EvalRecord) -> f64 {
    match (&eval.translation, task.uses_decoder()) {
        (Some(t), true) => -t.token_accuracy,
        _ => eval.metrics.wer.map_or(f64::MAX, |w| w.wer),
    }
}

fn write_metrics(out: &Path, state: &RunState) -> Result<()> {
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for r in &state.history {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(&out.join(METRICS_FILE), csv)?;
    if !state.translation_history.is_empty() {
        let mut csv = String::from(TRANSLATION_HEADER);
        csv.push('\n');
        for (split, t) in &state.translation_history {
            let ce = t.ce.map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{},{split},{ce},{}", t.epoch, t.token_accuracy);
        }
        write(&out.join(TRANSLATION_FILE), csv)?;
    }
    Ok(())
}

/// Runs the configured task, writing `metrics.csv`, `best/` and `last/`
/// under `out`.
pub fn train(cfg: &TrainConfig, out: &Path, opts: &RunOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ds = Dataset::open(&cfg.dataset)?;
    let train_samples = ds.load_split("train")?;
    let dev_samples = ds.load_split("dev")?;
    let vocabs = build_vocabs(cfg, &ds, &train_samples)?;
    let (train_set, _) = prepare(cfg, &ds, &vocabs, train_samples)?;
    let (dev_set, unknown_dev) = prepare(cfg, &ds, &vocabs, dev_samples)?;
    if unknown_dev > 0 {
        log::info!("{unknown_dev} dev target tokens are outside the training vocabulary");
    }
    let feasible: Vec<usize> = (0..train_set.len())
        .filter(|&i| train_set[i].feasible(train_set[i].frames.len()))
        .collect();
    let skipped = train_set.len() - feasible.len();
    if feasible.is_empty() {
        return Err(Error::Config(format!(
            "no feasible training samples ({skipped} skipped)"
        )));
    }
    if skipped > 0 {
        log::info!("skipping {skipped} training samples with infeasible CTC targets");
    }

    let (model, mut store) = build_model(cfg, &vocabs.ctc, vocabs.text.as_ref())?;
    let adam_cfg = AdamConfig {
        weight_decay: cfg.optim.weight_decay,
        ..AdamConfig::default()
    };
    let (mut adam, state) = match &opts.resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            if ck.config != *cfg {
                return Err(Error::Config(
                    "resume checkpoint was written with a different configuration".into(),
                ));
            }
            store = ck.params;
            (ck.adam, ck.state)
        }
        None => {
            if let Some(init) = &cfg.init {
                let init_ck = Checkpoint::load(init)?;
                if let Some(e) = mismatch_error(&init_ck.params, &store) {
                    return Err(e);
                }
                store.copy_matching(&init_ck.params);
            }
            let adam = Adam::new(adam_cfg, &store);
            let mut state = RunState {
                epoch: 0,
                best_epoch: 0,
                best_score: f64::MAX,
                history: Vec::new(),
                translation_history: Vec::new(),
                rng_seed: cfg.seed,
                rng_next_epoch: 1,
            };
            let train_eval = evaluate_loss(&model, &store, &train_set, &feasible)?;
            state.history.push(MetricsRecord {
                epoch: 0,
                split: "train".into(),
                loss: Some(train_eval),
                wer: None,
                dispersion: None,
            });
            let dev = evaluate_prepared(&model, &store, &dev_set, 0, "dev", cfg.max_decode_len)?;
            record_dev(&mut state, &dev, cfg.task);
            (adam, state)
        }
    };

    let mut ck = Checkpoint {
        config: cfg.clone(),
        params: store,
        adam,
        state,
        ctc_vocab: vocabs.ctc,
        text_vocab: vocabs.text,
    };
    if opts.resume.is_none() {
        ck.save(&out.join(BEST_DIR))?;
        ck.save(&out.join(LAST_DIR))?;
        write_metrics(out, &ck.state)?;
    }
    adam = ck.adam.clone();
    let decay = cfg.optim.decay_schedule();
    let lrs_for = |epoch: usize, store: &ParamStore| -> Vec<f64> {
        let base = lr_at(cfg.optim.lr, epoch - 1, &decay, cfg.optim.decay_factor);
        let dec = lr_at(
            cfg.optim.decoder_lr,
            epoch - 1,
            &decay,
            cfg.optim.decay_factor,
        );
        store
            .iter()
            .map(|(_, n, _)| if n.starts_with("dec.") { dec } else { base })
            .collect()
    };
    let last_epoch = opts
        .stop_after
        .map_or(cfg.optim.epochs, |s| s.min(cfg.optim.epochs));
    let first = ck.state.rng_next_epoch;
    for epoch in first..=last_epoch {
        let mut order = feasible.clone();
        order.shuffle(&mut substream(cfg.seed, &[SHUFFLE, epoch as u64]));
        let lrs = lrs_for(epoch, &ck.params);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.optim.batch_size) {
            let mut grads = GradBuffer::zeros_like(&ck.params);
            for &i in batch {
                let s = &train_set[i];
                let frames = augment(
                    s,
                    cfg.temporal_scale,
                    &mut substream(cfg.seed, &[AUGMENT, epoch as u64, i as u64]),
                );
                let drop_seed = derive_seed(cfg.seed, &[DROP, epoch as u64, i as u64]);
                let mut tape = Tape::new();
                let mut p = ParamBinder::new(&ck.params, true);
                let (loss, _) =
                    sample_objective(&model, &mut tape, &mut p, &frames, s, Some(drop_seed))?;
                let v = tape.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::invalid(
                        "train",
                        format!("non-finite loss on {} at epoch {epoch}", s.id),
                    ));
                }
                epoch_loss += v;
                tape.backward(loss)?;
                p.accumulate_grads(&tape, &mut grads, 1.0 / batch.len() as f64);
            }
            adam.update_with_lrs(&mut ck.params, &grads, &lrs);
        }
        ck.adam = adam.clone();
        ck.state.history.push(MetricsRecord {
            epoch,
            split: "train".into(),
            loss: Some(epoch_loss / order.len() as f64),
            wer: None,
            dispersion: None,
        });
        let dev = evaluate_prepared(
            &model,
            &ck.params,
            &dev_set,
            epoch,
            "dev",
            cfg.max_decode_len,
        )?;
        let improved = record_dev(&mut ck.state, &dev, cfg.task);
        ck.state.epoch = epoch;
        ck.state.rng_next_epoch = epoch + 1;
        log::info!(
            "epoch {epoch}: train loss {:.4}, dev loss {:.4}, dev wer {:.4}",
            epoch_loss / order.len() as f64,
            dev.metrics.loss.unwrap_or(f64::NAN),
            dev.metrics.wer.map_or(f64::NAN, |w| w.wer)
        );
        if improved {
            ck.save(&out.join(BEST_DIR))?;
        }
        ck.save(&out.join(LAST_DIR))?;
        write_metrics(out, &ck.state)?;
    }
    let best = Checkpoint::load(&out.join(BEST_DIR))?;
    Ok(TrainSummary {
        best,
        history: ck.state.history,
        skipped,
        unknown_dev_tokens: unknown_dev,
    })
}

/// Pushes the dev rows; returns whether the score improved. Best-state
/// fields are updated before the caller saves, so `best/` records itself.
fn record_dev(state: &mut RunState, dev: &EvalRecord, task: Task) -> bool {
    state.history.push(dev.metrics.clone());
    if let Some(t) = dev.translation {
        state.translation_history.push(("dev".into(), t));
    }
    let s = score(task, dev);
    let improved = s < state.best_score;
    if improved {
        state.best_score = s;
        state.best_epoch = dev.metrics.epoch;
    }
    improved
}

fn evaluate_loss(
    model: &Model,
    store: &ParamStore,
    set: &[Prepared],
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let mut tape = Tape::new();
        let mut p = ParamBinder::new(store, false);
        let (loss, _) = sample_objective(model, &mut tape, &mut p, &set[i].frames, &set[i], None)?;
        total += tape.value(loss).item();
    }
    Ok(total / idx.len() as f64)
}

/// Evaluates a checkpoint directory on one split of its dataset.
pub fn evaluate(checkpoint: &Path, split: &str) -> Result<EvalRecord> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::open(&ck.config.dataset)?;
    let samples = ds.load_split(split)?;
    let vocabs = Vocabs {
        ctc: ck.ctc_vocab.clone(),
        text: ck.text_vocab.clone(),
    };
    let (set, unknown) = prepare(&ck.config, &ds, &vocabs, samples)?;
    let model = ck.model()?;
    let mut rec = evaluate_prepared(
        &model,
        &ck.params,
        &set,
        ck.state.epoch,
        split,
        ck.config.max_decode_len,
    )?;
    rec.unknown_tokens = unknown;
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Dot,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Self::Dot),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!(
                "unknown export format {other:?} (expected dot or json)"
            ))),
        }
    }
}

/// Writes `stage{i}_{kind}.{dot|json}` for every graph a forward pass on
/// `sample_id` builds. Returns the written paths.
pub fn export_graphs(
    checkpoint: &Path,
    sample_id: &str,
    format: ExportFormat,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::open(&ck.config.dataset)?;
    let sample = ds.load_sample(sample_id)?;
    let model = ck.model()?;
    let inf = model.infer(&ck.params, &sample.frames)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (i, graphs) in inf.graphs.iter().enumerate() {
        for kind in [
            GraphKind::Local,
            GraphKind::Temporal,
            GraphKind::Hierarchical,
        ] {
            let gs = graphs.by_kind(kind);
            if gs.is_empty() {
                continue;
            }
            let stem = format!("stage{i}_{}", kind.as_str());
            let (path, text) = match format {
                ExportFormat::Dot => (out.join(format!("{stem}.dot")), to_dot(&stem, gs)),
                ExportFormat::Json => (out.join(format!("{stem}.json")), to_json(kind, gs)?),
            };
            write(&path, text)?;
            written.push(path);
        }
    }
    Ok(written)
}
