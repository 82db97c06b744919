//! Scoring and analysis artifacts: Rouge-L and exact-match metrics, dataset
//! evaluation, page-count extrapolation curves, token-density reports, and
//! image-vs-OCR timing comparisons.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{ocr_simulate, Corpus};
use crate::error::{Error, Result};
use crate::render::{PageImage, RenderConfig};
use crate::taskgen::{Task, TaskSample};
use crate::textok::{budget_report, OcrParams, TokenBudget, Vocab};

/// Longest-common-subsequence overlap on lowercased whitespace tokens.
/// Returns (precision, recall, f1); either side empty gives all zeros.
pub fn rouge_l(candidate: &str, reference: &str) -> (f64, f64, f64) {
    let cand: Vec<String> = candidate.split_whitespace().map(str::to_lowercase).collect();
    let refr: Vec<String> = reference.split_whitespace().map(str::to_lowercase).collect();
    if cand.is_empty() || refr.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    // two-row LCS dynamic program
    let mut prev = vec![0usize; refr.len() + 1];
    let mut cur = vec![0usize; refr.len() + 1];
    for c in &cand {
        for (j, r) in refr.iter().enumerate() {
            cur[j + 1] = if c == r { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let lcs = prev[refr.len()] as f64;
    let p = lcs / cand.len() as f64;
    let r = lcs / refr.len() as f64;
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Letter answers survive trailing whitespace, a trailing period, and case.
fn normalize_answer(s: &str) -> String {
    let t = s.trim();
    let t = t.strip_suffix('.').unwrap_or(t).trim();
    if t.chars().count() == 1 {
        t.to_uppercase()
    } else {
        t.to_string()
    }
}

/// Mean exact match over normalized answers.
pub fn accuracy(preds: &[String], golds: &[String]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_answer(p) == normalize_answer(g))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub prediction: String,
    pub gold: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub per_sample: Vec<SampleScore>,
    /// Mean of per_sample scores.
    pub aggregate: f64,
    pub config_echo: BTreeMap<String, String>,
}

/// Score every sample with the task's metric: Index by normalized exact
/// match, everything else by Rouge-L f1. Samples must share one task.
pub fn run_eval(
    mut answerer: impl FnMut(&TaskSample) -> Result<String>,
    dataset: &[TaskSample],
    config_echo: BTreeMap<String, String>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let task = dataset[0].task;
    let mut per_sample = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let prediction = answerer(sample)?;
        let score = match task {
            Task::Index => {
                if normalize_answer(&prediction) == normalize_answer(&sample.gold) {
                    1.0
                } else {
                    0.0
                }
            }
            _ => rouge_l(&prediction, &sample.gold).2,
        };
        per_sample.push(SampleScore { id: sample.id.clone(), prediction, gold: sample.gold.clone(), score });
    }
    let aggregate = per_sample.iter().map(|s| s.score).sum::<f64>() / per_sample.len() as f64;
    Ok(EvalReport { task, per_sample, aggregate, config_echo })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InputMode {
    Image,
    OcrText,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Image => "image",
            InputMode::OcrText => "ocr_text",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub n_pages: usize,
    pub mode: InputMode,
    pub score: f64,
}

pub const EXTRAPOLATION_CSV_HEADER: &str = "n_pages,input_mode,score,image_tokens";

/// Score-vs-page-count table plus an SVG line plot. The image_tokens column
/// is the exact linear accounting n_pages * tokens_per_image + overhead.
pub fn extrapolation_curve(
    points: &[CurvePoint],
    tokens_per_image: usize,
    overhead_tokens: usize,
) -> Result<(String, String)> {
    let mut groups: std::collections::BTreeSet<usize> = points.iter().map(|p| p.n_pages).collect();
    if groups.len() < 2 {
        return Err(Error::InsufficientGroups(groups.len()));
    }
    let mut sorted: Vec<&CurvePoint> = points.iter().collect();
    sorted.sort_by_key(|p| (p.n_pages, p.mode));
    let mut csv = String::from(EXTRAPOLATION_CSV_HEADER);
    csv.push('\n');
    for p in &sorted {
        let image_tokens = p.n_pages * tokens_per_image + overhead_tokens;
        csv.push_str(&format!("{},{},{:.6},{}\n", p.n_pages, p.mode.name(), p.score, image_tokens));
    }

    let max_pages = groups.pop_last().unwrap_or(1) as f64;
    let mut svg = svg_open(640, 400, "score vs pages");
    for mode in [InputMode::Image, InputMode::OcrText] {
        let pts: Vec<(f64, f64)> = sorted
            .iter()
            .filter(|p| p.mode == mode)
            .map(|p| (p.n_pages as f64 / max_pages, p.score))
            .collect();
        if !pts.is_empty() {
            let color = if mode == InputMode::Image { "#1f6fb2" } else { "#c24d2c" };
            svg.push_str(&svg_polyline(&pts, 640, 400, color));
        }
    }
    svg.push_str("</svg>\n");
    Ok((csv, svg))
}

pub const DENSITY_SUMMARY_PREFIX: &str = "summary";

/// Per-document token budgets plus a summary row with the fractions of the
/// corpus that fit under the context limit in each representation.
pub fn density_report(
    corpus: &Corpus,
    cfg: &RenderConfig,
    vocab: &Vocab,
    tokens_per_image: usize,
    context_limit: usize,
    prompt_overhead: usize,
    ocr: OcrParams,
) -> Result<(String, String)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(std::path::PathBuf::from("<memory>")));
    }
    let mut budgets: Vec<(String, TokenBudget)> = Vec::with_capacity(corpus.len());
    for doc in corpus {
        let b = budget_report(doc, cfg, vocab, tokens_per_image, context_limit, prompt_overhead, ocr)?;
        budgets.push((doc.id.clone(), b));
    }
    let n = budgets.len() as f64;
    let frac_images = budgets.iter().filter(|(_, b)| b.fits_as_images).count() as f64 / n;
    let frac_text = budgets.iter().filter(|(_, b)| b.fits_as_text).count() as f64 / n;

    let mut csv = String::from(TokenBudget::CSV_HEADER);
    csv.push('\n');
    for (id, b) in &budgets {
        csv.push_str(&b.csv_row(id));
        csv.push('\n');
    }
    csv.push_str(&format!(
        "{DENSITY_SUMMARY_PREFIX},fits_as_images={frac_images:.4},fits_as_text={frac_text:.4},context_limit={context_limit},,\n"
    ));

    // histogram of OCR token counts with per-bin image-token means
    let max_ocr = budgets.iter().map(|(_, b)| b.ocr_tokens).max().unwrap_or(1).max(1);
    let bins = 16usize;
    let mut counts = vec![0usize; bins];
    for (_, b) in &budgets {
        let bin = (b.ocr_tokens * bins / (max_ocr + 1)).min(bins - 1);
        counts[bin] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let mut svg = svg_open(640, 400, "ocr token histogram");
    let bar_w = 640.0 / bins as f64;
    for (i, &c) in counts.iter().enumerate() {
        let h = 360.0 * c as f64 / peak;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#1f6fb2\"/>\n",
            i as f64 * bar_w,
            380.0 - h,
            bar_w - 2.0,
            h
        ));
    }
    svg.push_str("</svg>\n");
    Ok((csv, svg))
}

#[derive(Debug, Clone, Copy)]
pub struct DensitySummary {
    pub fits_as_images: f64,
    pub fits_as_text: f64,
}

/// Fractions only, for callers that don't need the CSV.
pub fn density_fractions(
    corpus: &Corpus,
    cfg: &RenderConfig,
    vocab: &Vocab,
    tokens_per_image: usize,
    context_limit: usize,
    prompt_overhead: usize,
    ocr: OcrParams,
) -> Result<DensitySummary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(std::path::PathBuf::from("<memory>")));
    }
    let mut img = 0usize;
    let mut txt = 0usize;
    for doc in corpus {
        let b = budget_report(doc, cfg, vocab, tokens_per_image, context_limit, prompt_overhead, ocr)?;
        img += b.fits_as_images as usize;
        txt += b.fits_as_text as usize;
    }
    let n = corpus.len() as f64;
    Ok(DensitySummary { fits_as_images: img as f64 / n, fits_as_text: txt as f64 / n })
}

pub const TIMING_CSV_HEADER: &str = "sample_id,mode,median_seconds,reps";

/// Wall-clock comparison of the two input paths per sample: one forward pass
/// over image slots versus ocr_simulate + encode + text-only forward.
/// Medians over `reps` repetitions; no ratio is computed.
pub fn timing_report<F, G>(
    samples: &[TaskSample],
    reps: usize,
    mut image_path: F,
    mut text_path: G,
) -> Result<String>
where
    F: FnMut(&TaskSample) -> Result<()>,
    G: FnMut(&TaskSample) -> Result<()>,
{
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reps = reps.max(5);
    let mut csv = String::from(TIMING_CSV_HEADER);
    csv.push('\n');
    for sample in samples {
        for (mode, run) in [
            (InputMode::Image, &mut image_path as &mut dyn FnMut(&TaskSample) -> Result<()>),
            (InputMode::OcrText, &mut text_path),
        ] {
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t0 = Instant::now();
                run(sample)?;
                times.push(t0.elapsed().as_secs_f64());
            }
            times.sort_by(|a, b| a.total_cmp(b));
            let median = times[times.len() / 2];
            csv.push_str(&format!("{},{},{:.6},{}\n", sample.id, mode.name(), median, reps));
        }
    }
    Ok(csv)
}

/// OCR-text stand-in for a sample's pages: noisy ground truth, concatenated
/// in page order. Pages loaded from disk have no ground truth and yield an
/// empty string; timing callers must use in-memory samples.
pub fn ocr_text_of(images: &[std::sync::Arc<PageImage>], noise_rate: f64, seed: u64) -> Result<String> {
    let joined = images.iter().map(|p| p.ground_truth.as_str()).collect::<Vec<_>>().join("\n");
    ocr_simulate(&joined, noise_rate, seed)
}

fn svg_open(w: u32, h: u32, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<title>{title}</title>\n<rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n"
    )
}

/// Points are (x, y) in [0,1]; y grows upward.
fn svg_polyline(pts: &[(f64, f64)], w: u32, h: u32, color: &str) -> String {
    let coords: Vec<String> = pts
        .iter()
        .map(|(x, y)| {
            format!("{:.1},{:.1}", 20.0 + x * (w as f64 - 40.0), (h as f64 - 20.0) - y * (h as f64 - 40.0))
        })
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
        color,
        coords.join(" ")
    )
}

/// Write a (csv, svg) pair next to each other under `dir`.
pub fn write_artifact_pair(dir: &Path, stem: &str, csv: &str, svg: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cpath = dir.join(format!("{stem}.csv"));
    std::fs::write(&cpath, csv).map_err(|e| Error::io(&cpath, e))?;
    let spath = dir.join(format!("{stem}.svg"));
    std::fs::write(&spath, svg).map_err(|e| Error::io(&spath, e))?;
    Ok(())
}
