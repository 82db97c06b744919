//! Long-context task generators. Every sample is self-grading: the gold
//! answer is recoverable from the attached pages' ground-truth text by a
//! deterministic rule (substring search, first sentence, or option letter).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{filler_sentence, segment_sentences, Corpus, Document};
use crate::error::{Error, Result};
use crate::render::{page_count, render_document, save_png, PageImage, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Multiple choice: which image contains the given sentence.
    Index,
    /// Reproduce the first sentence of the first page.
    SentRetrie,
    /// Templated fact / purpose questions over a synthetic report.
    ArxivQA,
    /// Reproduce a short key hidden in filler pages.
    PassKey,
    /// Read a rendered report page verbatim.
    ArxivVerb,
    /// Read a rendered prose page verbatim.
    WikiVerb,
}

impl Task {
    pub const ALL: [Task; 6] =
        [Task::Index, Task::SentRetrie, Task::ArxivQA, Task::PassKey, Task::ArxivVerb, Task::WikiVerb];

    pub fn name(self) -> &'static str {
        match self {
            Task::Index => "index",
            Task::SentRetrie => "sent_retrieval",
            Task::ArxivQA => "arxiv_qa",
            Task::PassKey => "passkey",
            Task::ArxivVerb => "arxiv_verbatim",
            Task::WikiVerb => "wiki_verbatim",
        }
    }

    pub fn from_name(name: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown task {name}")))
    }
}

pub type Meta = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone)]
pub struct TaskSample {
    pub id: String,
    pub task: Task,
    pub images: Vec<Arc<PageImage>>,
    pub prompt: String,
    pub gold: String,
    pub meta: Meta,
}

fn meta_u64(meta: &mut Meta, key: &str, v: u64) {
    meta.insert(key.to_string(), serde_json::json!(v));
}

const OPTION_LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Line breaks inside page ground truth collapse to single spaces so probe
/// sentences and golds compare like running text.
pub fn flatten_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Multiple-choice page identification: k first pages from k distinct
/// documents, one probe sentence drawn from exactly one of them. The answer
/// position is uniform over options under the seed. Page sets whose target
/// page has no unique sentence are redrawn deterministically.
pub fn gen_index(corpus: &Corpus, cfg: &RenderConfig, k_images: usize, seed: u64) -> Result<TaskSample> {
    for attempt in 0..16u64 {
        if let Some(sample) = try_gen_index(corpus, cfg, k_images, seed, attempt)? {
            return Ok(sample);
        }
    }
    Err(Error::InsufficientCorpus { have: corpus.len(), need: k_images })
}

/// Ok(None) means the drawn page set had no sentence unique to the target
/// page; the caller redraws.
fn try_gen_index(
    corpus: &Corpus,
    cfg: &RenderConfig,
    k_images: usize,
    seed: u64,
    attempt: u64,
) -> Result<Option<TaskSample>> {
    if k_images < 2 || k_images > OPTION_LETTERS.len() {
        return Err(Error::InvalidArg(format!("k_images {k_images} outside [2, 26]")));
    }
    if corpus.len() < k_images {
        return Err(Error::InsufficientCorpus { have: corpus.len(), need: k_images });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x1d7e ^ (attempt << 40));

    // sample k distinct documents
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for i in 0..k_images {
        let j = rng.gen_range(i..order.len());
        order.swap(i, j);
    }
    let chosen = &order[..k_images];
    let target_slot = rng.gen_range(0..k_images);

    let mut pages = Vec::with_capacity(k_images);
    for &di in chosen {
        let page = render_document(&corpus[di], cfg)?.remove(0);
        pages.push(Arc::new(page));
    }

    // probe sentence from the target page, absent from every other page
    let flat: Vec<String> = pages.iter().map(|p| flatten_ws(&p.ground_truth)).collect();
    let target_text = flat[target_slot].clone();
    let mut spans = segment_sentences(&target_text);
    for i in (1..spans.len()).rev() {
        let j = rng.gen_range(0..=i);
        spans.swap(i, j);
    }
    let Some(probe) = spans
        .iter()
        .map(|s| s.text(&target_text).trim())
        .find(|probe| {
            probe.split_whitespace().count() >= 4
                && flat.iter().enumerate().all(|(i, t)| i == target_slot || !t.contains(*probe))
        })
        .map(str::to_string)
    else {
        return Ok(None);
    };

    let gold = (OPTION_LETTERS[target_slot] as char).to_string();
    let options: Vec<String> = (0..k_images)
        .map(|i| format!("{}) Image {}", OPTION_LETTERS[i] as char, i + 1))
        .collect();
    let prompt = format!(
        "Which image contains the given sentence? Sentence: \"{}\" Options: {}. Answer with the option letter.",
        probe,
        options.join(" ")
    );
    let mut meta = Meta::new();
    meta_u64(&mut meta, "seed", seed);
    meta_u64(&mut meta, "option_count", k_images as u64);
    meta_u64(&mut meta, "n_pages", k_images as u64);
    Ok(Some(TaskSample {
        id: format!("index-{seed}-{k_images}"),
        task: Task::Index,
        images: pages,
        prompt,
        gold,
        meta,
    }))
}

/// First-sentence retrieval over the leading n pages of a document.
pub fn gen_sent_retrieval(doc: &Document, n_pages: usize, cfg: &RenderConfig) -> Result<TaskSample> {
    let pages = render_document(doc, cfg)?;
    if pages.len() < n_pages || n_pages == 0 {
        return Err(Error::TooShort { got: pages.len(), need: n_pages.max(1) });
    }
    let first_text = flatten_ws(&pages[0].ground_truth);
    let spans = segment_sentences(&first_text);
    let gold = spans
        .first()
        .map(|s| s.text(&first_text).trim().to_string())
        .ok_or(Error::EmptyPage)?;
    let mut meta = Meta::new();
    meta_u64(&mut meta, "n_pages", n_pages as u64);
    meta.insert("doc".into(), serde_json::json!(doc.id));
    Ok(TaskSample {
        id: format!("sent_retrieval-{}-{n_pages}", doc.id.replace('/', "_")),
        task: Task::SentRetrie,
        images: pages.into_iter().take(n_pages).map(Arc::new).collect(),
        prompt: "What is the first sentence on the first image?".to_string(),
        gold,
        meta,
    })
}

pub const DEFAULT_KEY_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const DEFAULT_KEY_LEN: usize = 5;

/// Key hidden at a seeded position inside filler pages. The document grows
/// one filler sentence at a time until it renders to exactly n_pages, so the
/// page count is an invariant, not a target.
pub fn gen_passkey(
    seed: u64,
    n_pages: usize,
    cfg: &RenderConfig,
    key_alphabet: &[u8],
    key_len: usize,
) -> Result<TaskSample> {
    if n_pages == 0 {
        return Err(Error::InvalidArg("n_pages must be >= 1".into()));
    }
    if key_alphabet.is_empty() || key_len == 0 {
        return Err(Error::InvalidArg("key alphabet and length must be non-empty".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9a55);
    let key: String = (0..key_len)
        .map(|_| key_alphabet[rng.gen_range(0..key_alphabet.len())] as char)
        .collect();
    let key_sentence = format!("The pass key is {key}.");
    let frac: f64 = rng.gen();

    let mut fillers: Vec<String> = Vec::new();
    let build = |fillers: &[String], frac: f64, key_sentence: &str| {
        let pos = ((fillers.len() + 1) as f64 * frac) as usize;
        let mut all: Vec<&str> = fillers.iter().map(String::as_str).collect();
        all.insert(pos.min(all.len()), key_sentence);
        all.join(" ")
    };
    // grow sentence by sentence; on overshoot, retry the last increment one
    // word at a time (a word never spans more than a page)
    let text = loop {
        let text = build(&fillers, frac, &key_sentence);
        let pages = page_count(&text, cfg)?;
        if pages == n_pages {
            break text;
        }
        if pages < n_pages {
            fillers.push(filler_sentence(&mut rng));
            continue;
        }
        let over = fillers.pop().ok_or_else(|| {
            Error::InvalidArg(format!("page layout too coarse to hit {n_pages} pages exactly"))
        })?;
        let words: Vec<&str> = over.split(' ').collect();
        let mut hit = None;
        for k in 1..words.len() {
            fillers.push(words[..k].join(" "));
            if page_count(&build(&fillers, frac, &key_sentence), cfg)? == n_pages {
                hit = Some(build(&fillers, frac, &key_sentence));
                break;
            }
            fillers.pop();
        }
        match hit {
            Some(text) => break text,
            None => {
                return Err(Error::InvalidArg(format!(
                    "page layout too coarse to hit {n_pages} pages exactly"
                )))
            }
        }
    };
    debug_assert_eq!(text.matches(&key).count(), 1);

    let doc = Document {
        id: format!("passkey/{seed}-{n_pages}"),
        text,
        source: crate::corpus::SourceKind::Synthetic,
        facts: Vec::new(),
    };
    let pages = render_document(&doc, cfg)?;
    let mut meta = Meta::new();
    meta_u64(&mut meta, "seed", seed);
    meta_u64(&mut meta, "n_pages", n_pages as u64);
    meta.insert("key_position".into(), serde_json::json!(frac));
    Ok(TaskSample {
        id: format!("passkey-{seed}-{n_pages}"),
        task: Task::PassKey,
        images: pages.into_iter().map(Arc::new).collect(),
        prompt: "What is the pass key in the provided images? The masked sentence reads: The pass key is <MASK>.".to_string(),
        gold: key,
        meta,
    })
}

/// Verbatim page reading; gold is the page's ground truth, char for char.
pub fn gen_verbatim(page: &PageImage, flavor: Task) -> Result<TaskSample> {
    if flavor != Task::ArxivVerb && flavor != Task::WikiVerb {
        return Err(Error::InvalidArg(format!("{} is not a verbatim task", flavor.name())));
    }
    if page.ground_truth.trim().is_empty() {
        return Err(Error::EmptyPage);
    }
    let mut meta = Meta::new();
    meta_u64(&mut meta, "page_index", page.page_index as u64);
    meta_u64(&mut meta, "n_pages", 1);
    Ok(TaskSample {
        id: format!("{}-p{}", flavor.name(), page.page_index),
        task: flavor,
        images: vec![Arc::new(page.clone())],
        prompt: "Read the text in the image verbatim.".to_string(),
        gold: page.ground_truth.clone(),
        meta,
    })
}

/// Templated QA over a synthetic report: either the opening purpose sentence
/// or a planted (entity, attribute, value) fact.
pub fn gen_arxivqa(doc: &Document, cfg: &RenderConfig, seed: u64) -> Result<TaskSample> {
    if doc.facts.is_empty() {
        return Err(Error::NoFacts);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xa99a);
    let pages = render_document(doc, cfg)?;
    let n_pages = pages.len();
    let (prompt, gold, kind) = if rng.gen_bool(0.5) {
        let spans = segment_sentences(&doc.text);
        let opening = spans.first().map(|s| s.text(&doc.text).trim().to_string()).ok_or(Error::EmptyPage)?;
        (
            "What is the main purpose of the article as stated in the abstract?".to_string(),
            opening,
            "purpose",
        )
    } else {
        let fact = &doc.facts[rng.gen_range(0..doc.facts.len())];
        (
            format!("What is the {} of {}?", fact.attribute, fact.entity),
            fact.value.clone(),
            "fact",
        )
    };
    let mut meta = Meta::new();
    meta_u64(&mut meta, "seed", seed);
    meta_u64(&mut meta, "n_pages", n_pages as u64);
    meta.insert("question_kind".into(), serde_json::json!(kind));
    meta.insert("doc".into(), serde_json::json!(doc.id));
    Ok(TaskSample {
        id: format!("arxiv_qa-{}-{seed}", doc.id.replace('/', "_")),
        task: Task::ArxivQA,
        images: pages.into_iter().map(Arc::new).collect(),
        prompt,
        gold,
        meta,
    })
}

/// One dataset record per line of `samples.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub task: String,
    pub images: Vec<String>,
    pub prompt: String,
    pub gold: String,
    pub meta: Meta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
}

/// Write `samples.jsonl`, per-sample PNG pages, and `manifest.json` under
/// `out_dir`. Image paths in records are relative to `out_dir`.
pub fn export_dataset(samples: &[TaskSample], out_dir: &Path) -> Result<DatasetManifest> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut lines = String::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for sample in samples {
        let rel_dir = format!("images/{}", sample.id);
        let img_dir = out_dir.join(&rel_dir);
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut rel_paths = Vec::with_capacity(sample.images.len());
        for (i, img) in sample.images.iter().enumerate() {
            let rel = format!("{rel_dir}/page{i}.png");
            save_png(img, &out_dir.join(&rel))?;
            rel_paths.push(rel);
        }
        let record = SampleRecord {
            id: sample.id.clone(),
            task: sample.task.name().to_string(),
            images: rel_paths,
            prompt: sample.prompt.clone(),
            gold: sample.gold.clone(),
            meta: sample.meta.clone(),
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
        *counts.entry(sample.task.name().to_string()).or_default() += 1;
    }
    let jsonl = out_dir.join("samples.jsonl");
    std::fs::write(&jsonl, lines).map_err(|e| Error::io(&jsonl, e))?;
    let manifest = DatasetManifest { total: samples.len(), counts };
    let mpath = out_dir.join("manifest.json");
    let mut body = serde_json::to_string_pretty(&manifest)?;
    body.push('\n');
    std::fs::write(&mpath, body).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Read a dataset back. Ground truth is not stored per page; loaded pages
/// carry pixels only, which is all inference needs.
pub fn load_dataset(dir: &Path) -> Result<Vec<TaskSample>> {
    let jsonl = dir.join("samples.jsonl");
    let body = std::fs::read_to_string(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut samples = Vec::new();
    for line in body.lines().filter(|l| !l.trim().is_empty()) {
        let record: SampleRecord = serde_json::from_str(line)?;
        let mut images = Vec::with_capacity(record.images.len());
        for (i, rel) in record.images.iter().enumerate() {
            let path = dir.join(rel);
            let img = image::open(&path)
                .map_err(|e| Error::Io { path: path.clone(), source: std::io::Error::other(e) })?
                .to_luma8();
            if img.width() != img.height() {
                return Err(Error::Shape { got: img.height() as usize, want: img.width() as usize });
            }
            images.push(Arc::new(PageImage {
                side_px: img.width(),
                pixels: img.into_raw(),
                page_index: i,
                ground_truth: String::new(),
            }));
        }
        samples.push(TaskSample {
            id: record.id,
            task: Task::from_name(&record.task)?,
            images,
            prompt: record.prompt,
            gold: record.gold,
            meta: record.meta,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}

/// Export manifest path for a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
