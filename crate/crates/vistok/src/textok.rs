//! Byte-level BPE tokenizer with reserved multimodal specials, plus the
//! visual-vs-OCR token budget calculator.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ocr_simulate, Corpus, Document};
use crate::error::{Error, Result};
use crate::render::{page_count, RenderConfig};

/// Separator capacity: numbered image markers exist for indices 1..=32.
pub const MAX_IMAGES: usize = 32;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Placeholder id filling every position of an image slot.
pub const IMG_SLOT: u32 = 3;
/// Reserved ids: 4 fixed specials + start/end markers per image index.
pub const RESERVED: u32 = 4 + 2 * MAX_IMAGES as u32;
const BYTE_BASE: u32 = RESERVED;

pub fn start_of_img(i: usize) -> u32 {
    debug_assert!((1..=MAX_IMAGES).contains(&i));
    4 + 2 * (i as u32 - 1)
}

pub fn end_of_img(i: usize) -> u32 {
    start_of_img(i) + 1
}

fn special_name(id: u32) -> String {
    match id {
        PAD => "<|pad|>".into(),
        BOS => "<|bos|>".into(),
        EOS => "<|eos|>".into(),
        IMG_SLOT => "<|img|>".into(),
        _ => {
            let k = id - 4;
            let idx = k / 2 + 1;
            if k.is_multiple_of(2) {
                format!("<|startofimg{idx}|>")
            } else {
                format!("<|endofimg{idx}|>")
            }
        }
    }
}

/// Byte-level BPE vocabulary. Ids: [0, RESERVED) specials, then 256 byte
/// tokens, then learned merges in training order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    /// Learned merges as (left id, right id), in training order.
    pub merges: Vec<(u32, u32)>,
    /// Byte expansion per non-special id, indexed by id - RESERVED.
    token_bytes: Vec<Vec<u8>>,
    #[serde(skip)]
    rank: HashMap<(u32, u32), u32>,
}

impl Vocab {
    fn base() -> Vocab {
        Vocab {
            merges: Vec::new(),
            token_bytes: (0u16..256).map(|b| vec![b as u8]).collect(),
            rank: HashMap::new(),
        }
    }

    fn add_merge(&mut self, left: u32, right: u32) -> u32 {
        let id = BYTE_BASE + self.token_bytes.len() as u32;
        let mut bytes = self.bytes_of(left).to_vec();
        bytes.extend_from_slice(self.bytes_of(right));
        self.token_bytes.push(bytes);
        self.merges.push((left, right));
        self.rank.insert((left, right), id);
        id
    }

    fn bytes_of(&self, id: u32) -> &[u8] {
        &self.token_bytes[(id - BYTE_BASE) as usize]
    }

    pub fn size(&self) -> usize {
        RESERVED as usize + self.token_bytes.len()
    }

    pub fn is_special(id: u32) -> bool {
        id < RESERVED
    }

    fn rebuild_rank(&mut self) {
        self.rank = self
            .merges
            .iter()
            .enumerate()
            .map(|(k, &pair)| (pair, BYTE_BASE + 256 + k as u32))
            .collect();
    }

    /// Text tokens only; specials are never produced.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(|b| BYTE_BASE + b as u32).collect();
        loop {
            // lowest-ranked (earliest-learned) applicable merge
            let mut best: Option<u32> = None;
            for w in ids.windows(2) {
                if let Some(&merged) = self.rank.get(&(w[0], w[1])) {
                    best = Some(best.map_or(merged, |b: u32| b.min(merged)));
                }
            }
            let Some(merged) = best else { break };
            let (left, right) = self.merges[(merged - BYTE_BASE - 256) as usize];
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Inverse of encode on text ids; specials render as their marker names.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if id >= self.size() as u32 {
                return Err(Error::Decode(id));
            }
            if Vocab::is_special(id) {
                bytes.extend_from_slice(special_name(id).as_bytes());
            } else {
                bytes.extend_from_slice(self.bytes_of(id));
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("vistok-vocab v1\n");
        out.push_str(&format!("reserved {RESERVED}\n"));
        for &(l, r) in &self.merges {
            out.push_str(&format!("merge {l} {r}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("vistok-vocab v1") {
            return Err(Error::Config(format!("{path:?} is not a vocab file")));
        }
        let mut vocab = Vocab::base();
        for line in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["reserved", n] => {
                    if n.parse::<u32>().ok() != Some(RESERVED) {
                        return Err(Error::Config("reserved-token table mismatch".into()));
                    }
                }
                ["merge", l, r] => {
                    let l: u32 = l.parse().map_err(|_| Error::Config("bad merge line".into()))?;
                    let r: u32 = r.parse().map_err(|_| Error::Config("bad merge line".into()))?;
                    vocab.add_merge(l, r);
                }
                [] => {}
                _ => return Err(Error::Config(format!("bad vocab line: {line}"))),
            }
        }
        Ok(vocab)
    }
}

/// Greedy highest-frequency pair merging over the corpus byte streams.
/// Ties break on the lexicographically smallest (left bytes, right bytes).
/// Stops early if no pair occurs twice.
pub fn train_bpe(corpus: &Corpus, vocab_size: usize) -> Result<Vocab> {
    if vocab_size < 256 + RESERVED as usize {
        return Err(Error::InvalidArg(format!(
            "vocab_size {vocab_size} < {} (bytes + reserved)",
            256 + RESERVED as usize
        )));
    }
    let mut vocab = Vocab::base();
    let mut seqs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|d| d.text.bytes().map(|b| BYTE_BASE + b as u32).collect())
        .collect();

    while vocab.size() < vocab_size {
        let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .iter()
            .filter(|&(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // prefer lexicographically smaller pair on ties
                    let ka = (vocab.bytes_of(pa.0), vocab.bytes_of(pa.1));
                    let kb = (vocab.bytes_of(pb.0), vocab.bytes_of(pb.1));
                    kb.cmp(&ka)
                })
            })
            .map(|(&pair, _)| pair);
        let Some((left, right)) = best else { break };
        let merged = vocab.add_merge(left, right);
        for seq in &mut seqs {
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
        }
    }
    vocab.rebuild_rank();
    Ok(vocab)
}

/// (image_side_px / patch_px)^2
pub fn image_token_count(image_side_px: u32, patch_px: u32) -> Result<u32> {
    if patch_px == 0 || !image_side_px.is_multiple_of(patch_px) {
        return Err(Error::NotDivisible { side: image_side_px, patch: patch_px });
    }
    let grid = image_side_px / patch_px;
    Ok(grid * grid)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OcrParams {
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for OcrParams {
    fn default() -> Self {
        // simulated engine mistake rate; real OCR on clean scans is near this
        OcrParams { noise_rate: 0.02, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenBudget {
    pub ocr_tokens: usize,
    pub image_tokens: usize,
    pub n_pages: usize,
    pub context_limit: usize,
    pub fits_as_images: bool,
    pub fits_as_text: bool,
}

impl TokenBudget {
    pub const CSV_HEADER: &'static str =
        "doc_id,n_pages,ocr_tokens,image_tokens,fits_as_text,fits_as_images";

    pub fn csv_row(&self, doc_id: &str) -> String {
        format!(
            "{},{},{},{},{},{}",
            doc_id, self.n_pages, self.ocr_tokens, self.image_tokens, self.fits_as_text, self.fits_as_images
        )
    }
}

/// Compare what a document costs as rendered pages versus as OCR text.
/// Image cost counts 2 separator tokens per image; both sides count
/// `prompt_overhead` against the context limit.
pub fn budget_report(
    doc: &Document,
    cfg: &RenderConfig,
    vocab: &Vocab,
    tokens_per_image: usize,
    context_limit: usize,
    prompt_overhead: usize,
    ocr: OcrParams,
) -> Result<TokenBudget> {
    if context_limit <= prompt_overhead {
        return Err(Error::InvalidArg("context_limit must exceed prompt_overhead".into()));
    }
    let n_pages = page_count(&doc.text, cfg)?;
    let ocr_text = ocr_simulate(&doc.text, ocr.noise_rate, ocr.seed)?;
    let ocr_tokens = vocab.encode(&ocr_text).len();
    let image_tokens = n_pages * tokens_per_image;
    let separators = 2 * n_pages;
    Ok(TokenBudget {
        ocr_tokens,
        image_tokens,
        n_pages,
        context_limit,
        fits_as_images: image_tokens + separators + prompt_overhead <= context_limit,
        fits_as_text: ocr_tokens + prompt_overhead <= context_limit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_document, Document, SourceKind};

    fn doc(text: &str) -> Document {
        Document { id: "t".into(), text: text.into(), source: SourceKind::Ingested, facts: vec![] }
    }

    #[test]
    fn reserved_ids_are_disjoint_and_named() {
        assert_eq!(start_of_img(1), 4);
        assert_eq!(end_of_img(1), 5);
        assert_eq!(end_of_img(MAX_IMAGES), RESERVED - 1);
        assert_eq!(special_name(start_of_img(2)), "<|startofimg2|>");
        assert_eq!(special_name(end_of_img(32)), "<|endofimg32|>");
    }

    #[test]
    fn first_merge_is_frequency_forced() {
        let corpus = vec![doc("aaaa")];
        let vocab = train_bpe(&corpus, 256 + RESERVED as usize + 1).unwrap();
        assert_eq!(vocab.merges.len(), 1);
        let a = BYTE_BASE + b'a' as u32;
        assert_eq!(vocab.merges[0], (a, a));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = vec![doc("the cat sat on the mat, the cat ran."), doc("mat cat the")];
        let a = train_bpe(&corpus, 400).unwrap();
        let b = train_bpe(&corpus, 400).unwrap();
        assert_eq!(a.merges, b.merges);
    }

    #[test]
    fn encode_empty_is_empty() {
        let vocab = train_bpe(&vec![doc("abc")], 324).unwrap();
        assert!(vocab.encode("").is_empty());
    }

    #[test]
    fn roundtrip_on_corpus_documents() {
        let docs: Vec<Document> = (0..4).map(|s| synth_document(s, 6, 2).unwrap()).collect();
        let vocab = train_bpe(&docs, 512).unwrap();
        for d in &docs {
            let ids = vocab.encode(&d.text);
            assert_eq!(vocab.decode(&ids).unwrap(), d.text);
            assert!(ids.iter().all(|&id| !Vocab::is_special(id)));
        }
    }

    #[test]
    fn roundtrip_unicode() {
        let vocab = train_bpe(&vec![doc("plain ascii corpus")], 330).unwrap();
        for s in ["héllo wörld", "日本語テキスト", "emoji 🎈 and \u{1F980}", "tabs\tand\nnewlines"] {
            assert_eq!(vocab.decode(&vocab.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn decode_rejects_out_of_vocab() {
        let vocab = train_bpe(&vec![doc("abc")], 324).unwrap();
        let bad = vocab.size() as u32;
        assert!(matches!(vocab.decode(&[bad]), Err(Error::Decode(_))));
    }

    #[test]
    fn too_small_vocab_rejected() {
        assert!(matches!(train_bpe(&vec![doc("x")], 100), Err(Error::InvalidArg(_))));
    }

    #[test]
    fn save_load_roundtrip() {
        let docs: Vec<Document> = (0..2).map(|s| synth_document(s, 5, 2).unwrap()).collect();
        let vocab = train_bpe(&docs, 512).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.merges, vocab.merges);
        let s = &docs[0].text;
        assert_eq!(loaded.encode(s), vocab.encode(s));
    }

    #[test]
    fn image_token_counts() {
        assert_eq!(image_token_count(768, 32).unwrap(), 576);
        assert_eq!(image_token_count(224, 32).unwrap(), 49);
        assert!(matches!(image_token_count(100, 32), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn budget_pages_times_tokens() {
        let d = synth_document(5, 3, 1).unwrap();
        let vocab = train_bpe(&vec![d.clone()], 512).unwrap();
        let cfg = RenderConfig::default();
        let b = budget_report(&d, &cfg, &vocab, 576, 8192, 16, OcrParams { noise_rate: 0.0, seed: 0 }).unwrap();
        assert_eq!(b.n_pages, 1);
        assert_eq!(b.image_tokens, 576);
        assert!(b.fits_as_images && b.fits_as_text);
    }

    #[test]
    fn budget_respects_context_limit() {
        let d = synth_document(5, 3, 1).unwrap();
        let vocab = train_bpe(&vec![d.clone()], 512).unwrap();
        let cfg = RenderConfig::default();
        // limit below one page's image cost
        let b = budget_report(&d, &cfg, &vocab, 576, 500, 16, OcrParams::default()).unwrap();
        assert!(!b.fits_as_images);
    }
}
