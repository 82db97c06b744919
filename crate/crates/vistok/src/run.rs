//! Run configuration and the pipeline commands behind the CLI: corpus,
//! render, budget, dataset generation, training, evaluation, and reports.
//! Every command is a pure function of (config, seeds); reruns produce
//! byte-identical artifacts except wall-clock timing fields.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assemble::{build_query, to_token_stream, Part, Template, TokenStream};
use crate::corpus::{filler_sentence, load_corpus, synth_document, Corpus, Document};
use crate::error::{Error, Result};
use crate::eval::{
    density_report, extrapolation_curve, ocr_text_of, run_eval, timing_report, write_artifact_pair,
    CurvePoint, EvalReport, InputMode,
};
use crate::model::{
    forward_examples, generate, load_checkpoint, save_checkpoint, train_step,
    Batch, ModelConfig, ModelParams, TrainState,
};
use crate::render::{
    export_pages, layout_text, page_count, rasterize_page, render_document, write_manifest,
    PageImage, RenderConfig,
};
use crate::taskgen::{
    export_dataset, gen_arxivqa, gen_index, gen_passkey, gen_sent_retrieval, gen_verbatim,
    load_dataset, Task, TaskSample, DEFAULT_KEY_ALPHABET, DEFAULT_KEY_LEN,
};
use crate::textok::{train_bpe, Vocab};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn default_vocab_size() -> usize {
    512
}
fn default_noise_rate() -> f64 {
    0.02
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerSettings {
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_noise_rate")]
    pub ocr_noise_rate: f64,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings { vocab_size: default_vocab_size(), ocr_noise_rate: default_noise_rate() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub n_pages: usize,
    pub total_steps: u64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub log_every: u64,
    pub held_out: usize,
    pub target_accuracy: f64,
    pub max_new_tokens: usize,
    /// Curriculum: this many initial steps train single-page transcription
    /// (dense per-glyph supervision) before switching to passkey retrieval.
    pub ocr_steps: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            n_pages: 2,
            total_steps: 20_000,
            peak_lr: 3e-3,
            batch_size: 32,
            eval_every: 250,
            log_every: 50,
            held_out: 64,
            target_accuracy: 0.90,
            max_new_tokens: 8,
            ocr_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskGrid {
    pub tasks: Vec<String>,
    pub n_pages: Vec<usize>,
    pub samples_per_cell: usize,
    /// Option count for the Index task.
    pub index_k: usize,
}

impl Default for TaskGrid {
    fn default() -> Self {
        TaskGrid {
            tasks: Task::ALL.iter().map(|t| t.name().to_string()).collect(),
            n_pages: vec![1, 2, 4, 8],
            samples_per_cell: 80,
            index_k: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSettings {
    pub n_pages: Vec<usize>,
    pub samples_per_point: usize,
    pub timing_samples: usize,
    pub timing_reps: usize,
}

impl Default for ReportSettings {
    fn default() -> Self {
        ReportSettings { n_pages: vec![1, 2, 4, 8], samples_per_point: 8, timing_samples: 3, timing_reps: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory every command writes into.
    pub out_dir: PathBuf,
    /// Text corpus root; None generates a synthetic corpus.
    pub corpus_root: Option<PathBuf>,
    /// Synthetic corpus shape when corpus_root is None.
    pub synth_docs: usize,
    pub synth_facts: usize,
    pub synth_filler: usize,
    /// Master seed; all generators derive from it.
    pub seed: u64,
    /// Context limit for budget accounting (not the model's context).
    pub context_limit: usize,
    pub prompt_overhead: usize,
    /// Page rendering for corpus export and budget accounting.
    pub render: RenderConfig,
    /// Page rendering for generated tasks; matches the model's input side so
    /// task pages are rendered crisp rather than downscaled, and lays glyphs
    /// on the patch grid (no margin, one character cell per patch).
    pub task_render: RenderConfig,
    pub tokenizer: TokenizerSettings,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub tasks: TaskGrid,
    pub report: ReportSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            corpus_root: None,
            synth_docs: 16,
            synth_facts: 6,
            synth_filler: 4,
            seed: 0,
            context_limit: 8192,
            prompt_overhead: 16,
            render: RenderConfig::default(),
            task_render: RenderConfig {
                canvas_px: 192,
                margin_px: 0,
                font_size_px: 24,
                line_height_factor: 1.0,
                char_cell_px: Some(24),
                ..RenderConfig::default()
            },
            tokenizer: TokenizerSettings::default(),
            model: ModelConfig::toy(),
            train: TrainSettings::default(),
            tasks: TaskGrid::default(),
            report: ReportSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.task_render.validate()?;
        self.model.validate()?;
        if let Some(root) = &self.corpus_root {
            if !root.is_dir() {
                return Err(Error::Config(format!("corpus_root {} is not a directory", root.display())));
            }
        }
        if self.train.batch_size == 0 || self.train.total_steps == 0 {
            return Err(Error::Config("train.batch_size and train.total_steps must be positive".into()));
        }
        for name in &self.tasks.tasks {
            Task::from_name(name).map_err(|_| Error::Config(format!("unknown task {name}")))?;
        }
        Ok(())
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: RunConfig = toml::from_str(&body).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Serialized copy of the resolved config, written into every output
/// directory so a run can be replayed exactly.
pub fn write_config_echo(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let body = toml::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("config_echo.toml");
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Exclusive-writer lock on an output directory, released on drop.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<OutDirLock> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutDirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output dir {} is locked by another writer (stale? remove {})",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Load the corpus from disk, or synthesize one from the seed.
pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.corpus_root {
        Some(root) => load_corpus(root),
        None => (0..cfg.synth_docs)
            .map(|i| synth_document(cfg.seed.wrapping_add(i as u64), cfg.synth_facts, cfg.synth_filler))
            .collect(),
    }
}

pub fn build_vocab(cfg: &RunConfig, corpus: &Corpus) -> Result<Vocab> {
    train_bpe(corpus, cfg.tokenizer.vocab_size)
}

/// Filler document guaranteed to render to at least `n_pages` pages.
pub fn doc_with_pages(seed: u64, n_pages: usize, cfg: &RenderConfig) -> Result<Document> {
    let mut doc = synth_document(seed, 2 + n_pages, 1)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xf111);
    while page_count(&doc.text, cfg)? < n_pages {
        doc.text.push(' ');
        doc.text.push_str(&filler_sentence(&mut rng));
    }
    Ok(doc)
}

/// Lower a task sample to a model-ready token stream. Answer text, when
/// given, becomes the supervised region.
pub fn sample_to_stream(
    sample: &TaskSample,
    vocab: &Vocab,
    mcfg: &ModelConfig,
    answer: Option<&str>,
) -> Result<(TokenStream, Vec<Arc<PageImage>>)> {
    let mut parts: Vec<Part> = sample.images.iter().cloned().map(Part::Image).collect();
    parts.push(Part::Text(format!(" {} ", sample.prompt)));
    let query = build_query("", parts, Template::MultiImage)?;
    let images = query.images();
    let stream = to_token_stream(&query, vocab, mcfg.tokens_per_image(), answer, mcfg.context_len)?;
    Ok((stream, images))
}

/// Short fixed prompt used for passkey training streams; the dataset's
/// longer prompt is for human-readable exports.
pub const PASSKEY_TRAIN_PROMPT: &str = "What is the pass key?";

fn passkey_training_sample(seed: u64, n_pages: usize, cfg: &RenderConfig) -> Result<TaskSample> {
    let mut s = gen_passkey(seed, n_pages, cfg, DEFAULT_KEY_ALPHABET, DEFAULT_KEY_LEN)?;
    s.prompt = PASSKEY_TRAIN_PROMPT.to_string();
    Ok(s)
}

/// Prompt for the transcription curriculum phase.
pub const OCR_TRAIN_PROMPT: &str = "Transcribe the page.";

/// Cell-aligned transcription stream: one full page whose gold is every
/// layout line space-padded to the line's cell capacity, concatenated. With
/// a byte-level tokenizer and grid rendering, supervised token i always
/// reads the patch at the same relative offset, which an attention head can
/// express directly. Includes a key sentence so the key alphabet is covered.
fn transcription_stream(
    seed: u64,
    rcfg: &RenderConfig,
    vocab: &Vocab,
    mcfg: &ModelConfig,
) -> Result<(TokenStream, Vec<Arc<PageImage>>)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x0c2a);
    let key: String = (0..DEFAULT_KEY_LEN)
        .map(|_| DEFAULT_KEY_ALPHABET[rng.gen_range(0..DEFAULT_KEY_ALPHABET.len())] as char)
        .collect();
    let key_sentence = format!("The pass key is {key}.");
    let frac: f64 = rng.gen();
    // grow past one page so the first page uses every line
    let mut fillers = vec![filler_sentence(&mut rng)];
    let text = loop {
        let pos = ((fillers.len() + 1) as f64 * frac) as usize;
        let mut all: Vec<&str> = fillers.iter().map(String::as_str).collect();
        all.insert(pos.min(all.len()), &key_sentence);
        let text = all.join(" ");
        if page_count(&text, rcfg)? > 1 {
            break text;
        }
        fillers.push(filler_sentence(&mut rng));
    };
    let layout = layout_text(&text, rcfg)?.swap_remove(0);
    let page = rasterize_page(&layout, rcfg)?;
    let gold = match rcfg.char_cell_px {
        Some(cell) => {
            let cells = ((rcfg.canvas_px - 2 * rcfg.margin_px) / cell) as usize;
            layout.lines.iter().map(|l| format!("{:<cells$}", l.text)).collect::<String>()
        }
        None => page.ground_truth.clone(),
    };
    let parts = vec![Part::Image(Arc::new(page)), Part::Text(format!(" {OCR_TRAIN_PROMPT} "))];
    let query = build_query("", parts, Template::MultiImage)?;
    let images = query.images();
    let stream = to_token_stream(&query, vocab, mcfg.tokens_per_image(), Some(&gold), mcfg.context_len)?;
    Ok((stream, images))
}

const HELDOUT_SEED_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub final_loss: f64,
    pub best_accuracy: f64,
    pub reached_target: bool,
}

/// Exact-match accuracy of greedy decoding on a held-out passkey set.
pub fn passkey_accuracy(
    state_params: &ModelParams<f32>,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    samples: &[TaskSample],
    max_new: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    for s in samples {
        let (stream, images) = sample_to_stream(s, vocab, mcfg, None)?;
        let out = generate(&stream, &images, state_params, mcfg, vocab, max_new)?;
        if out.trim() == s.gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

/// Train the toy model on streamed passkey samples, evaluating a fixed
/// held-out set periodically and stopping early at the target accuracy.
/// Writes `checkpoint.ckpt` and `train_log.csv` when `out_dir` is given.
pub fn train_passkey(cfg: &RunConfig, out_dir: Option<&Path>, quiet: bool) -> Result<(TrainState<f32>, Vocab, TrainOutcome)> {
    cfg.validate()?;
    let corpus = build_corpus(cfg)?;
    let vocab = build_vocab(cfg, &corpus)?;
    let t = &cfg.train;
    let mcfg = &cfg.model;
    let rcfg = &cfg.task_render;

    let held_out: Vec<TaskSample> = (0..t.held_out)
        .map(|i| passkey_training_sample(HELDOUT_SEED_BASE + i as u64, t.n_pages, rcfg))
        .collect::<Result<_>>()?;

    let params = ModelParams::<f32>::init(mcfg)?;
    let mut state = TrainState::new(params, t.total_steps, t.peak_lr, t.batch_size);
    let mut log = String::from("step,lr,loss\n");
    let mut best_acc = 0.0f64;
    let mut reached = false;

    while state.step < t.total_steps {
        let base = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(state.step * t.batch_size as u64);
        let mut streams = Vec::with_capacity(t.batch_size);
        let mut images = Vec::with_capacity(t.batch_size);
        let ocr_phase = state.step < t.ocr_steps;
        for i in 0..t.batch_size {
            let (stream, imgs) = if ocr_phase {
                transcription_stream(base + i as u64, rcfg, &vocab, mcfg)?
            } else {
                let sample = passkey_training_sample(base + i as u64, t.n_pages, rcfg)?;
                sample_to_stream(&sample, &vocab, mcfg, Some(&sample.gold))?
            };
            streams.push(stream);
            images.push(imgs);
        }
        let batch = Batch { streams, images };
        let stats = train_step(&mut state, &batch, mcfg)?;
        if stats.step % t.log_every == 0 || stats.step == 1 {
            log.push_str(&format!("{},{:.9},{:.6}\n", stats.step, stats.lr, stats.loss));
            if !quiet {
                eprintln!("step {} lr {:.2e} loss {:.4}", stats.step, stats.lr, stats.loss);
            }
        }
        let last_loss = stats.loss;
        let past_curriculum = stats.step >= t.ocr_steps;
        if past_curriculum && (stats.step % t.eval_every == 0 || stats.step == t.total_steps) {
            let acc = passkey_accuracy(&state.params, mcfg, &vocab, &held_out, t.max_new_tokens)?;
            best_acc = best_acc.max(acc);
            if !quiet {
                eprintln!("step {} held-out exact match {:.3}", stats.step, acc);
            }
            log.push_str(&format!("# eval step={} accuracy={:.4}\n", stats.step, acc));
            if acc >= t.target_accuracy {
                reached = true;
                let _ = last_loss;
                break;
            }
        }
    }

    let final_loss = log
        .lines().rfind(|l| !l.starts_with('#') && !l.starts_with("step"))
        .and_then(|l| l.split(',').nth(2))
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN);
    let outcome = TrainOutcome { steps_run: state.step, final_loss, best_accuracy: best_acc, reached_target: reached };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&state.params, mcfg, state.step, &dir.join("checkpoint.ckpt"))?;
        let log_path = dir.join("train_log.csv");
        std::fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
        vocab.save(&dir.join("vocab.txt"))?;
        let outcome_path = dir.join("train_outcome.json");
        let mut body = serde_json::to_string_pretty(&outcome)?;
        body.push('\n');
        std::fs::write(&outcome_path, body).map_err(|e| Error::io(&outcome_path, e))?;
    }
    Ok((state, vocab, outcome))
}

/// Render every corpus document and write pages + a JSONL manifest.
pub fn cmd_render(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.out_dir.join("pages");
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_config_echo(cfg, &cfg.out_dir)?;
    let corpus = build_corpus(cfg)?;
    let mut records = Vec::new();
    for doc in &corpus {
        let pages = render_document(doc, &cfg.render)?;
        records.extend(export_pages(&doc.id, &pages, &out)?);
    }
    let manifest = out.join("manifest.jsonl");
    write_manifest(&records, &manifest)?;
    Ok(manifest)
}

/// Token-density accounting over the corpus: CSV plus a histogram SVG.
pub fn cmd_budget(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_config_echo(cfg, &cfg.out_dir)?;
    let corpus = build_corpus(cfg)?;
    let vocab = build_vocab(cfg, &corpus)?;
    let ocr = crate::textok::OcrParams { noise_rate: cfg.tokenizer.ocr_noise_rate, seed: cfg.seed };
    let (csv, svg) = density_report(
        &corpus,
        &cfg.render,
        &vocab,
        cfg.model.tokens_per_image(),
        cfg.context_limit,
        cfg.prompt_overhead,
        ocr,
    )?;
    write_artifact_pair(&cfg.out_dir, "budget", &csv, &svg)?;
    Ok(cfg.out_dir.join("budget.csv"))
}

fn gen_cell(cfg: &RunConfig, corpus: &Corpus, task: Task, n_pages: usize) -> Result<Vec<TaskSample>> {
    let rcfg = &cfg.task_render;
    let n = cfg.tasks.samples_per_cell;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let seed = cfg
            .seed
            .wrapping_add(task as u64 * 1_000_003)
            .wrapping_add(n_pages as u64 * 7_001)
            .wrapping_add(i as u64);
        let sample = match task {
            Task::PassKey => gen_passkey(seed, n_pages, rcfg, DEFAULT_KEY_ALPHABET, DEFAULT_KEY_LEN)?,
            Task::Index => gen_index(corpus, rcfg, cfg.tasks.index_k, seed)?,
            Task::SentRetrie => {
                let doc = doc_with_pages(seed, n_pages, rcfg)?;
                gen_sent_retrieval(&doc, n_pages, rcfg)?
            }
            Task::ArxivQA => {
                let doc = doc_with_pages(seed, n_pages, rcfg)?;
                gen_arxivqa(&doc, rcfg, seed)?
            }
            Task::ArxivVerb | Task::WikiVerb => {
                // font sizes sweep 18..=30 across the cell
                let font = 18 + (i as u32 % 13);
                let vcfg = RenderConfig { font_size_px: font, ..rcfg.clone() };
                let doc = doc_with_pages(seed, 1, &vcfg)?;
                let pages = render_document(&doc, &vcfg)?;
                let mut s = gen_verbatim(&pages[0], task)?;
                s.meta.insert("font_size_px".into(), serde_json::json!(font));
                s
            }
        };
        let mut sample = sample;
        sample.id = format!("{}-p{}-{i}", task.name(), n_pages);
        out.push(sample);
    }
    Ok(out)
}

/// Generate the task grid: one dataset directory per (task, n_pages) cell.
pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_config_echo(cfg, &cfg.out_dir)?;
    let corpus = build_corpus(cfg)?;
    let root = cfg.out_dir.join("dataset");
    for name in &cfg.tasks.tasks {
        let task = Task::from_name(name)?;
        // single-page tasks ignore the page grid
        let grid: &[usize] = match task {
            Task::ArxivVerb | Task::WikiVerb | Task::Index => &[1],
            _ => &cfg.tasks.n_pages,
        };
        for &n_pages in grid {
            let samples = gen_cell(cfg, &corpus, task, n_pages)?;
            export_dataset(&samples, &root.join(format!("{}_p{}", task.name(), n_pages)))?;
        }
    }
    Ok(root)
}

/// Train on streamed passkey batches; artifacts land in out_dir/train.
pub fn cmd_train(cfg: &RunConfig, quiet: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_config_echo(cfg, &cfg.out_dir)?;
    let dir = cfg.out_dir.join("train");
    train_passkey(cfg, Some(&dir), quiet)?;
    Ok(dir.join("checkpoint.ckpt"))
}

fn answer_budget(task: Task) -> usize {
    match task {
        Task::Index => 4,
        Task::PassKey => 8,
        Task::ArxivQA => 24,
        Task::SentRetrie => 48,
        Task::ArxivVerb | Task::WikiVerb => 256,
    }
}

/// Evaluate a checkpoint on every exported dataset directory.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if !checkpoint.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_config_echo(cfg, &cfg.out_dir)?;
    let (params, mcfg, _) = load_checkpoint::<f32>(checkpoint)?;
    let vocab = load_vocab_near(checkpoint).or_else(|_| {
        let corpus = build_corpus(cfg)?;
        build_vocab(cfg, &corpus)
    })?;

    let dataset_root = cfg.out_dir.join("dataset");
    let mut cells: Vec<PathBuf> = std::fs::read_dir(&dataset_root)
        .map_err(|e| Error::io(&dataset_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cells.sort();
    if cells.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut written = Vec::new();
    for cell in cells {
        let samples = load_dataset(&cell)?;
        let report = eval_samples(&samples, &params, &mcfg, &vocab, cfg)?;
        let name = cell.file_name().unwrap().to_string_lossy().to_string();
        let path = cfg.out_dir.join(format!("eval_{name}.json"));
        let mut body = serde_json::to_string_pretty(&report)?;
        body.push('\n');
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn load_vocab_near(checkpoint: &Path) -> Result<Vocab> {
    let dir = checkpoint.parent().ok_or_else(|| Error::Config("checkpoint has no parent dir".into()))?;
    Vocab::load(&dir.join("vocab.txt"))
}

fn eval_samples(
    samples: &[TaskSample],
    params: &ModelParams<f32>,
    mcfg: &ModelConfig,
    vocab: &Vocab,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let task = samples.first().map(|s| s.task).ok_or(Error::EmptyDataset)?;
    let max_new = answer_budget(task);
    let mut echo = BTreeMap::new();
    echo.insert("context_limit".to_string(), cfg.context_limit.to_string());
    echo.insert("model_seed".to_string(), mcfg.seed.to_string());
    echo.insert("tokens_per_image".to_string(), mcfg.tokens_per_image().to_string());
    run_eval(
        |s| {
            let (stream, images) = sample_to_stream(s, vocab, mcfg, None)?;
            generate(&stream, &images, params, mcfg, vocab, max_new)
        },
        samples,
        echo,
    )
}

/// Text-mode stream for a sample: simulated OCR of its pages plus the
/// prompt, truncated from the back to fit the model context.
fn ocr_stream(
    sample: &TaskSample,
    vocab: &Vocab,
    mcfg: &ModelConfig,
    noise_rate: f64,
    seed: u64,
    max_new: usize,
) -> Result<TokenStream> {
    let text = ocr_text_of(&sample.images, noise_rate, seed)?;
    let mut ids = vocab.encode(&text);
    let prompt_ids = vocab.encode(&format!(" {} ", sample.prompt));
    let budget = mcfg.context_len.saturating_sub(prompt_ids.len() + max_new);
    ids.truncate(budget);
    ids.extend(prompt_ids);
    Ok(TokenStream { ids: ids.clone(), image_slots: Vec::new(), supervision_mask: vec![false; ids.len()] })
}

/// Analysis artifacts: extrapolation curve over page counts for both input
/// modes, density report, and timing comparison. Uses the checkpoint when
/// given, otherwise a freshly initialized model (structure over skill).
pub fn cmd_report(cfg: &RunConfig, checkpoint: Option<&Path>, quiet: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(&cfg.out_dir)?;
    write_config_echo(cfg, &cfg.out_dir)?;
    let corpus = build_corpus(cfg)?;
    let (params, mcfg, vocab) = match checkpoint {
        Some(path) => {
            let (params, mcfg, _) = load_checkpoint::<f32>(path)?;
            let vocab = load_vocab_near(path).or_else(|_| build_vocab(cfg, &corpus))?;
            (params, mcfg, vocab)
        }
        None => (ModelParams::<f32>::init(&cfg.model)?, cfg.model.clone(), build_vocab(cfg, &corpus)?),
    };
    let noise = cfg.tokenizer.ocr_noise_rate;
    let max_new = answer_budget(Task::PassKey);

    // curve: passkey exact match per page count, image vs OCR-text input
    let mut points = Vec::new();
    for &n_pages in &cfg.report.n_pages {
        let samples: Vec<TaskSample> = (0..cfg.report.samples_per_point)
            .map(|i| {
                passkey_training_sample(HELDOUT_SEED_BASE * 2 + (n_pages as u64) * 1000 + i as u64, n_pages, &cfg.task_render)
            })
            .collect::<Result<_>>()?;
        for mode in [InputMode::Image, InputMode::OcrText] {
            let mut hits = 0usize;
            for (i, s) in samples.iter().enumerate() {
                let out = match mode {
                    InputMode::Image => {
                        let (stream, images) = sample_to_stream(s, &vocab, &mcfg, None)?;
                        if stream.len() + max_new > mcfg.context_len {
                            String::new()
                        } else {
                            generate(&stream, &images, &params, &mcfg, &vocab, max_new)?
                        }
                    }
                    InputMode::OcrText => {
                        let stream = ocr_stream(s, &vocab, &mcfg, noise, cfg.seed + i as u64, max_new)?;
                        generate(&stream, &[], &params, &mcfg, &vocab, max_new)?
                    }
                };
                hits += (out.trim() == s.gold) as usize;
            }
            let score = hits as f64 / samples.len().max(1) as f64;
            points.push(CurvePoint { n_pages, mode, score });
            if !quiet {
                eprintln!("pages {} mode {} score {:.3}", n_pages, mode.name(), score);
            }
        }
    }
    let (curve_csv, curve_svg) = extrapolation_curve(&points, mcfg.tokens_per_image(), 0)?;
    write_artifact_pair(&cfg.out_dir, "extrapolation", &curve_csv, &curve_svg)?;

    // density over the corpus
    let ocr = crate::textok::OcrParams { noise_rate: noise, seed: cfg.seed };
    let (density_csv, density_svg) = density_report(
        &corpus,
        &cfg.render,
        &vocab,
        mcfg.tokens_per_image(),
        cfg.context_limit,
        cfg.prompt_overhead,
        ocr,
    )?;
    write_artifact_pair(&cfg.out_dir, "density", &density_csv, &density_svg)?;

    // timing: one forward pass per input path
    let timing_set: Vec<TaskSample> = (0..cfg.report.timing_samples)
        .map(|i| passkey_training_sample(HELDOUT_SEED_BASE * 3 + i as u64, 2, &cfg.task_render))
        .collect::<Result<_>>()?;
    let timing_csv = timing_report(
        &timing_set,
        cfg.report.timing_reps,
        |s| {
            let (stream, images) = sample_to_stream(s, &vocab, &mcfg, None)?;
            let batch = Batch { streams: vec![stream], images: vec![images] };
            forward_examples(&batch, &mcfg, &params).map(|_| ())
        },
        |s| {
            let stream = ocr_stream(s, &vocab, &mcfg, noise, cfg.seed, 0)?;
            let batch = Batch { streams: vec![stream], images: vec![Vec::new()] };
            forward_examples(&batch, &mcfg, &params).map(|_| ())
        },
    )?;
    let timing_path = cfg.out_dir.join("timing.csv");
    std::fs::write(&timing_path, timing_csv).map_err(|e| Error::io(&timing_path, e))?;

    Ok(cfg.out_dir.clone())
}
