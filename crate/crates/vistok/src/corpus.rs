//! Corpus ingestion, sentence segmentation, synthetic fact documents, and
//! the OCR simulator.

use std::collections::HashSet;
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// Abbreviations that suppress a sentence break, one token per line.
const ABBREVIATIONS: &str = include_str!("../assets/abbreviations.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceKind {
    Ingested,
    Synthetic,
}

/// A (entity, attribute, value) triple planted in a synthetic document.
/// The value occurs verbatim exactly once in the document text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    /// Newline-normalized UTF-8 (LF only).
    pub text: String,
    pub source: SourceKind,
    pub facts: Vec<Fact>,
}

pub type Corpus = Vec<Document>;

/// Byte range of one sentence within a document, whitespace-trimmed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    pub index: usize,
}

impl SentenceSpan {
    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.start..self.end]
    }
}

/// CRLF and lone CR become LF; all other bytes pass through.
pub fn normalize_newlines(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '\r' {
            if chars.peek() == Some(&'\n') {
                chars.next();
            }
            out.push('\n');
        } else {
            out.push(c);
        }
    }
    out
}

/// Read every file under `root` as one document. Ids are relative paths
/// (forward slashes), ordering is lexicographic by id.
pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let mut docs = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            Error::io(path.clone(), e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")))
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let raw = std::fs::read_to_string(entry.path())
            .map_err(|e| Error::io(entry.path(), e))?;
        let id = entry
            .path()
            .strip_prefix(root)
            .unwrap_or(entry.path())
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        docs.push(Document {
            id,
            text: normalize_newlines(&raw),
            source: SourceKind::Ingested,
            facts: Vec::new(),
        });
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus(root.to_path_buf()));
    }
    docs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(docs)
}

fn abbreviation_set() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| ABBREVIATIONS.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '?' | '!')
}

/// Rule-based sentence segmentation: a break happens after `.` `?` `!`
/// followed by whitespace and an uppercase letter or digit, unless the
/// token ending at the terminator is a known abbreviation.
pub fn segment_sentences(text: &str) -> Vec<SentenceSpan> {
    let abbrevs = abbreviation_set();
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut sent_start: Option<usize> = None;
    let mut last_nonws_end = 0usize;
    let mut token_start = 0usize; // start of the whitespace-delimited token in progress

    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c.is_whitespace() {
            if let Some(&(j, _)) = iter.peek() {
                token_start = j;
            }
            continue;
        }
        if sent_start.is_none() {
            sent_start = Some(i);
        }
        last_nonws_end = i + c.len_utf8();

        if is_terminator(c) {
            // Look ahead: require >=1 whitespace char, then uppercase/digit.
            let mut j = i + c.len_utf8();
            let mut saw_ws = false;
            while j < bytes.len() {
                let next = text[j..].chars().next().unwrap();
                if next.is_whitespace() {
                    saw_ws = true;
                    j += next.len_utf8();
                } else {
                    break;
                }
            }
            let upnext = j < bytes.len()
                && text[j..]
                    .chars()
                    .next()
                    .map(|n| n.is_uppercase() || n.is_ascii_digit())
                    .unwrap_or(false);
            if saw_ws && upnext {
                let token = &text[token_start..i + c.len_utf8()];
                if !abbrevs.contains(token) {
                    spans.push(SentenceSpan {
                        start: sent_start.unwrap(),
                        end: i + c.len_utf8(),
                        index: spans.len(),
                    });
                    sent_start = None;
                }
            }
        }
    }
    if let Some(start) = sent_start {
        if last_nonws_end > start {
            spans.push(SentenceSpan {
                start,
                end: last_nonws_end,
                index: spans.len(),
            });
        }
    }
    spans
}

mod words {
    pub const TOPICS: &[&str] = &[
        "coastal weather stations",
        "mountain survey beacons",
        "river gauging instruments",
        "volcanic monitoring arrays",
        "polar drift buoys",
        "desert seismic sensors",
        "harbor tide recorders",
        "forest canopy towers",
    ];
    pub const ENTITIES: &[&str] = &[
        "Aldermoor station", "Bracken tower", "Cinderfell beacon", "Dunwich buoy",
        "Eastgate recorder", "Foxglove array", "Greywater gauge", "Hollowtree mast",
        "Ironvale sensor", "Juniper relay", "Kestrel platform", "Larkspur node",
        "Mirewood probe", "Northwick pylon", "Oakhurst monitor", "Pembroke unit",
        "Quarry Hill post", "Ravenscar dome", "Stonebridge rig", "Thornfield cell",
    ];
    pub const ATTRIBUTES: &[&str] = &[
        "serial code", "calibration tag", "access phrase", "channel label",
        "maintenance marker", "registry stamp", "firmware badge", "inventory mark",
    ];
    pub const COLORS: &[&str] = &[
        "amber", "cobalt", "crimson", "indigo", "ochre", "sienna", "teal", "umber",
        "viridian", "magenta", "saffron", "cerulean",
    ];
    pub const FILLER_SUBJECTS: &[&str] = &[
        "The field crew", "A maintenance team", "The night operator", "Each observer",
        "The regional office", "A visiting engineer", "The archive clerk", "The duty log",
    ];
    pub const FILLER_VERBS: &[&str] = &[
        "inspected", "recalibrated", "documented", "photographed", "cross-checked",
        "replaced", "archived", "flagged", "reviewed", "sampled",
    ];
    pub const FILLER_OBJECTS: &[&str] = &[
        "the anemometer housing", "the backup batteries", "the signal cabling",
        "the mounting brackets", "the data cartridges", "the solar panels",
        "the reference thermometer", "the grounding straps", "the alignment marks",
        "the weatherproof seals",
    ];
    pub const FILLER_TAILS: &[&str] = &[
        "during the spring rotation", "after the storm season", "under routine protocol",
        "before the annual audit", "at first light", "without incident",
        "despite heavy fog", "ahead of schedule", "twice in one week",
        "following standard procedure",
    ];
}

/// One seeded filler sentence of plain prose.
pub fn filler_sentence(rng: &mut impl Rng) -> String {
    use words::*;
    format!(
        "{} {} {} {}.",
        FILLER_SUBJECTS[rng.gen_range(0..FILLER_SUBJECTS.len())],
        FILLER_VERBS[rng.gen_range(0..FILLER_VERBS.len())],
        FILLER_OBJECTS[rng.gen_range(0..FILLER_OBJECTS.len())],
        FILLER_TAILS[rng.gen_range(0..FILLER_TAILS.len())],
    )
}

/// Deterministic fact-bearing document: an abstract-like opening sentence,
/// then one "The <attribute> of <entity> is <value>." sentence per fact,
/// interleaved with filler prose. Every fact value occurs exactly once.
pub fn synth_document(seed: u64, n_facts: usize, filler_sentences_per_fact: usize) -> Result<Document> {
    if n_facts == 0 {
        return Err(Error::InvalidArg("n_facts must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let topic = words::TOPICS[rng.gen_range(0..words::TOPICS.len())];
    let opening = format!(
        "This report catalogs identification records for {} and preserves their registry entries for future audits.",
        topic
    );

    let mut used_numbers = HashSet::new();
    let mut facts = Vec::with_capacity(n_facts);
    let mut sentences = vec![opening];
    for k in 0..n_facts {
        let entity = format!(
            "the {}",
            words::ENTITIES[(rng.gen_range(0..words::ENTITIES.len()) + k) % words::ENTITIES.len()]
        );
        let attribute = words::ATTRIBUTES[rng.gen_range(0..words::ATTRIBUTES.len())].to_string();
        // Distinct 3-digit suffixes keep values collision-free under substring search.
        let number = loop {
            let n: u32 = rng.gen_range(100..1000);
            if used_numbers.insert(n) {
                break n;
            }
        };
        let value = format!("{}-{}", words::COLORS[rng.gen_range(0..words::COLORS.len())], number);
        sentences.push(format!("The {} of {} is {}.", attribute, entity, value));
        for _ in 0..filler_sentences_per_fact {
            sentences.push(filler_sentence(&mut rng));
        }
        facts.push(Fact { entity, attribute, value });
    }
    let text = sentences.join(" ");
    for fact in &facts {
        debug_assert_eq!(text.matches(&fact.value).count(), 1);
    }
    Ok(Document {
        id: format!("synth/{seed}-{n_facts}-{filler_sentences_per_fact}"),
        text,
        source: SourceKind::Synthetic,
        facts,
    })
}

const OCR_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,;:!?-";

/// Ground-truth-plus-noise stand-in for an OCR engine: each non-whitespace
/// character is independently replaced with probability `noise_rate`.
/// Character count is preserved; rate 0 is the identity.
pub fn ocr_simulate(text: &str, noise_rate: f64, seed: u64) -> Result<String> {
    if !(0.0..=1.0).contains(&noise_rate) {
        return Err(Error::InvalidArg(format!("noise_rate {noise_rate} outside [0,1]")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if !c.is_whitespace() && rng.gen::<f64>() < noise_rate {
            let sub = loop {
                let cand = OCR_ALPHABET[rng.gen_range(0..OCR_ALPHABET.len())] as char;
                if cand != c {
                    break cand;
                }
            };
            out.push(sub);
        } else {
            out.push(c);
        }
    }
    Ok(out)
}
