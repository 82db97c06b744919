//! Interleaved image/text query assembly and lowering to a token stream
//! with fixed-size image slots.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::render::PageImage;
use crate::textok::{end_of_img, start_of_img, Vocab, EOS, IMG_SLOT, MAX_IMAGES};

#[derive(Debug, Clone)]
pub enum Part {
    Text(String),
    Image(Arc<PageImage>),
}

#[derive(Debug, Clone)]
pub enum Segment {
    Text(String),
    /// 1-based image index, consecutive in order of appearance.
    Image { index: usize, image: Arc<PageImage> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// Numbered start/end markers around every image.
    MultiImage,
    /// At most one image, no numbered markers.
    SingleImage,
}

#[derive(Debug, Clone)]
pub struct MultimodalSequence {
    pub system_prompt: String,
    pub segments: Vec<Segment>,
    pub template: Template,
}

impl MultimodalSequence {
    pub fn images(&self) -> Vec<Arc<PageImage>> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Image { image, .. } => Some(image.clone()),
                Segment::Text(_) => None,
            })
            .collect()
    }

    pub fn n_images(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Image { .. })).count()
    }
}

/// System prompt first, then parts in order; image i gets markers
/// start(img,i) / end(img,i) under the multi-image template.
pub fn build_query(system_prompt: &str, parts: Vec<Part>, template: Template) -> Result<MultimodalSequence> {
    let n_images = parts.iter().filter(|p| matches!(p, Part::Image(_))).count();
    if template == Template::SingleImage && n_images > 1 {
        return Err(Error::TemplateMismatch(n_images));
    }
    if n_images > MAX_IMAGES {
        return Err(Error::InvalidArg(format!(
            "{n_images} images exceed marker capacity {MAX_IMAGES}"
        )));
    }
    let mut segments = Vec::with_capacity(parts.len());
    let mut next_index = 1;
    for part in parts {
        segments.push(match part {
            Part::Text(t) => Segment::Text(t),
            Part::Image(image) => {
                let index = next_index;
                next_index += 1;
                Segment::Image { index, image }
            }
        });
    }
    Ok(MultimodalSequence { system_prompt: system_prompt.to_string(), segments, template })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSlot {
    /// Offset of the first slot position in `ids`.
    pub position: usize,
    /// 1-based image index.
    pub image_index: usize,
    pub length: usize,
}

/// Token-level skeleton of a query: text ids, reserved slot ids where image
/// features will be substituted, and a per-position supervision bit.
#[derive(Debug, Clone)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub image_slots: Vec<ImageSlot>,
    pub supervision_mask: Vec<bool>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lower a query to ids. Each image becomes `tokens_per_image` slot ids
/// (plus its two markers under the multi-image template); the answer, when
/// given, is appended with a terminating eos and is the only supervised
/// region.
pub fn to_token_stream(
    seq: &MultimodalSequence,
    vocab: &Vocab,
    tokens_per_image: usize,
    answer: Option<&str>,
    context_len: usize,
) -> Result<TokenStream> {
    let mut ids = Vec::new();
    let mut image_slots = Vec::new();
    ids.extend(vocab.encode(&seq.system_prompt));
    for segment in &seq.segments {
        match segment {
            Segment::Text(t) => ids.extend(vocab.encode(t)),
            Segment::Image { index, .. } => {
                if seq.template == Template::MultiImage {
                    ids.push(start_of_img(*index));
                }
                image_slots.push(ImageSlot { position: ids.len(), image_index: *index, length: tokens_per_image });
                ids.extend(std::iter::repeat_n(IMG_SLOT, tokens_per_image));
                if seq.template == Template::MultiImage {
                    ids.push(end_of_img(*index));
                }
            }
        }
    }
    let mut supervision_mask = vec![false; ids.len()];
    if let Some(answer) = answer {
        let answer_ids = vocab.encode(answer);
        ids.extend(&answer_ids);
        ids.push(EOS);
        supervision_mask.extend(std::iter::repeat_n(true, answer_ids.len() + 1));
    }
    if ids.len() > context_len {
        return Err(Error::CapacityExceeded { got: ids.len(), limit: context_len });
    }
    Ok(TokenStream { ids, image_slots, supervision_mask })
}

/// One line per segment: kind, image index, token count.
pub fn debug_dump(seq: &MultimodalSequence, vocab: &Vocab) -> String {
    let mut out = format!("system - {}\n", vocab.encode(&seq.system_prompt).len());
    for segment in &seq.segments {
        match segment {
            Segment::Text(t) => out.push_str(&format!("text - {}\n", vocab.encode(t).len())),
            Segment::Image { index, .. } => out.push_str(&format!("image {index} -\n")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_document;
    use crate::render::{render_document, RenderConfig};
    use crate::textok::{train_bpe, Vocab, RESERVED};

    fn tiny_vocab() -> Vocab {
        let docs = vec![synth_document(1, 3, 1).unwrap()];
        train_bpe(&docs, 512).unwrap()
    }

    fn page() -> Arc<PageImage> {
        let doc = synth_document(2, 2, 0).unwrap();
        Arc::new(render_document(&doc, &RenderConfig::default()).unwrap().remove(0))
    }

    #[test]
    fn markers_ordered_and_paired() {
        let vocab = tiny_vocab();
        let seq = build_query(
            "sys",
            vec![
                Part::Image(page()),
                Part::Image(page()),
                Part::Text("what is shown?".into()),
            ],
            Template::MultiImage,
        )
        .unwrap();
        let stream = to_token_stream(&seq, &vocab, 8, None, 4096).unwrap();
        let specials: Vec<u32> = stream.ids.iter().copied().filter(|&id| id < RESERVED && id != crate::textok::IMG_SLOT).collect();
        assert_eq!(
            specials,
            vec![start_of_img(1), end_of_img(1), start_of_img(2), end_of_img(2)]
        );
    }

    #[test]
    fn pure_text_has_no_markers() {
        let vocab = tiny_vocab();
        let seq = build_query("s", vec![Part::Text("just text".into())], Template::MultiImage).unwrap();
        let stream = to_token_stream(&seq, &vocab, 8, None, 4096).unwrap();
        assert!(stream.ids.iter().all(|&id| !Vocab::is_special(id)));
        assert!(stream.image_slots.is_empty());
    }

    #[test]
    fn single_image_template_has_no_numbered_markers() {
        let vocab = tiny_vocab();
        let seq = build_query("s", vec![Part::Image(page()), Part::Text("q".into())], Template::SingleImage).unwrap();
        let stream = to_token_stream(&seq, &vocab, 8, None, 4096).unwrap();
        assert_eq!(stream.image_slots.len(), 1);
        assert!(!stream.ids.contains(&start_of_img(1)));
        assert!(!stream.ids.contains(&end_of_img(1)));
    }

    #[test]
    fn single_image_template_rejects_two_images() {
        let res = build_query("s", vec![Part::Image(page()), Part::Image(page())], Template::SingleImage);
        assert!(matches!(res, Err(Error::TemplateMismatch(2))));
    }

    #[test]
    fn length_formula_and_mask() {
        let vocab = tiny_vocab();
        let sys = "system prompt here";
        let text = "trailing question";
        let answer = "gold";
        let seq = build_query(
            sys,
            vec![Part::Image(page()), Part::Image(page()), Part::Text(text.into())],
            Template::MultiImage,
        )
        .unwrap();
        let tpi = 16;
        let stream = to_token_stream(&seq, &vocab, tpi, Some(answer), 4096).unwrap();
        let text_tokens = vocab.encode(sys).len() + vocab.encode(text).len() + vocab.encode(answer).len();
        assert_eq!(stream.len(), text_tokens + 2 * 2 + 2 * tpi + 1);
        // supervision exactly on answer + eos
        let supervised = stream.supervision_mask.iter().filter(|&&b| b).count();
        assert_eq!(supervised, vocab.encode(answer).len() + 1);
        assert!(stream.supervision_mask[stream.len() - 1]);
        assert_eq!(stream.ids[stream.len() - 1], EOS);
    }

    #[test]
    fn no_answer_means_no_supervision() {
        let vocab = tiny_vocab();
        let seq = build_query("s", vec![Part::Image(page())], Template::MultiImage).unwrap();
        let stream = to_token_stream(&seq, &vocab, 8, None, 4096).unwrap();
        assert!(stream.supervision_mask.iter().all(|&b| !b));
    }

    #[test]
    fn text_regions_roundtrip() {
        let vocab = tiny_vocab();
        let sys = "the system prompt";
        let q = " and the question text";
        let seq = build_query(sys, vec![Part::Text(q.into()), Part::Image(page())], Template::MultiImage).unwrap();
        let stream = to_token_stream(&seq, &vocab, 4, None, 4096).unwrap();
        let text_ids: Vec<u32> = stream.ids.iter().copied().filter(|&id| !Vocab::is_special(id)).collect();
        assert_eq!(vocab.decode(&text_ids).unwrap(), format!("{sys}{q}"));
    }

    #[test]
    fn context_overflow_rejected() {
        let vocab = tiny_vocab();
        let seq = build_query("s", vec![Part::Image(page())], Template::MultiImage).unwrap();
        assert!(matches!(
            to_token_stream(&seq, &vocab, 576, None, 64),
            Err(Error::CapacityExceeded { .. })
        ));
    }
}
