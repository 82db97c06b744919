use std::sync::Arc;

use ndarray::Array2;

use super::forward::{forward_examples, loss_and_grad_logits, patch_embed, Batch};
use super::{grad_check, generate, train_step, ModelConfig, ModelParams, TrainState};
use crate::assemble::{ImageSlot, TokenStream};
use crate::render::PageImage;
use crate::textok::{train_bpe, IMG_SLOT, RESERVED};

fn text_stream(ids: Vec<u32>, supervised_from: usize) -> TokenStream {
    let mask = (0..ids.len()).map(|p| p >= supervised_from).collect();
    TokenStream { ids, image_slots: Vec::new(), supervision_mask: mask }
}

fn test_page(side: u32, seed: u8) -> Arc<PageImage> {
    let n = (side * side) as usize;
    let pixels = (0..n).map(|i| ((i as u32 * 37 + seed as u32 * 11) % 256) as u8).collect();
    Arc::new(PageImage { side_px: side, pixels, page_index: 0, ground_truth: String::new() })
}

fn image_stream(cfg: &ModelConfig, prefix: &[u32], answer: &[u32]) -> (TokenStream, Vec<Arc<PageImage>>) {
    let tpi = cfg.tokens_per_image();
    let mut ids: Vec<u32> = prefix.to_vec();
    let slot = ImageSlot { position: ids.len(), image_index: 1, length: tpi };
    ids.extend(std::iter::repeat_n(IMG_SLOT, tpi));
    let boundary = ids.len();
    ids.extend_from_slice(answer);
    let mask = (0..ids.len()).map(|p| p >= boundary).collect();
    let stream = TokenStream { ids, image_slots: vec![slot], supervision_mask: mask };
    (stream, vec![test_page(cfg.image_side_px, 3)])
}

#[test]
fn initial_loss_is_near_uniform() {
    // std-0.02 init keeps logits tiny, so CE starts near ln(vocab)
    let cfg = ModelConfig { context_len: 64, ..ModelConfig::grad_check_config() };
    let params = ModelParams::<f32>::init(&cfg).unwrap();
    let stream = text_stream((RESERVED..RESERVED + 24).collect(), 1);
    let batch = Batch { streams: vec![stream], images: vec![Vec::new()] };
    let (logits, cache) = forward_examples(&batch, &cfg, &params).unwrap();
    let (loss, _) = loss_and_grad_logits(&logits, &batch.streams, cache.batch, cache.seq).unwrap();
    let expected = (cfg.vocab_size as f32).ln();
    assert!((loss - expected).abs() / expected < 0.05, "loss {loss} vs {expected}");
}

#[test]
fn causal_mask_blocks_future_tokens() {
    let cfg = ModelConfig { context_len: 32, ..ModelConfig::grad_check_config() };
    let params = ModelParams::<f32>::init(&cfg).unwrap();
    let base: Vec<u32> = (RESERVED..RESERVED + 10).collect();
    let mut bumped = base.clone();
    *bumped.last_mut().unwrap() += 40;
    let run = |ids: Vec<u32>| {
        let batch = Batch { streams: vec![text_stream(ids, 1)], images: vec![Vec::new()] };
        forward_examples(&batch, &cfg, &params).unwrap().0
    };
    let a = run(base);
    let b = run(bumped);
    for row in 0..9 {
        assert_eq!(a.row(row), b.row(row), "future token leaked into row {row}");
    }
    assert_ne!(a.row(9), b.row(9));
}

#[test]
fn padded_batch_matches_single_forward() {
    let cfg = ModelConfig { context_len: 64, ..ModelConfig::grad_check_config() };
    let params = ModelParams::<f32>::init(&cfg).unwrap();
    let short = text_stream((RESERVED..RESERVED + 6).collect(), 1);
    let long = text_stream((RESERVED + 50..RESERVED + 68).collect(), 1);
    let single = Batch { streams: vec![short.clone()], images: vec![Vec::new()] };
    let pair = Batch { streams: vec![long, short], images: vec![Vec::new(), Vec::new()] };
    let (solo, _) = forward_examples(&single, &cfg, &params).unwrap();
    let (both, cache) = forward_examples(&pair, &cfg, &params).unwrap();
    // example 1 occupies rows [seq, 2*seq); right padding must not alter it
    for p in 0..6 {
        assert_eq!(solo.row(p), both.row(cache.seq + p));
    }
}

#[test]
fn attention_probs_rows_sum_to_one() {
    let cfg = ModelConfig { context_len: 32, ..ModelConfig::grad_check_config() };
    let params = ModelParams::<f32>::init(&cfg).unwrap();
    let batch = Batch {
        streams: vec![text_stream((RESERVED..RESERVED + 8).collect(), 1)],
        images: vec![Vec::new()],
    };
    let (_, cache) = forward_examples(&batch, &cfg, &params).unwrap();
    for p in &cache.layers[0].probs {
        for i in 0..p.nrows() {
            let sum: f32 = (0..=i).map(|j| p[[i, j]]).sum();
            assert!((sum - 1.0).abs() < 1e-5);
            for j in i + 1..p.ncols() {
                assert_eq!(p[[i, j]], 0.0);
            }
        }
    }
}

#[test]
fn uniform_logits_loss_is_ln_vocab() {
    // hand-built logits: 4 supervised targets, all-zero rows
    let stream = text_stream(vec![RESERVED, RESERVED + 1, RESERVED + 2, RESERVED + 3, RESERVED + 4], 1);
    let logits = Array2::<f64>::zeros((5, 512));
    let (loss, dl) = loss_and_grad_logits(&logits, std::slice::from_ref(&stream), 1, 5).unwrap();
    assert!((loss - 512f64.ln()).abs() < 1e-12);
    // gradient rows sum to zero and are nonzero only at predicting rows
    for r in 0..4 {
        let s: f64 = dl.row(r).sum();
        assert!(s.abs() < 1e-12);
    }
    assert!(dl.row(4).iter().all(|&v| v == 0.0));
}

#[test]
fn patch_embed_is_deterministic_and_shaped() {
    let cfg = ModelConfig::grad_check_config();
    let params = ModelParams::<f64>::init(&cfg).unwrap();
    let img = test_page(cfg.image_side_px, 7);
    let (a, cache) = patch_embed(&img, &cfg, &params).unwrap();
    let (b, _) = patch_embed(&img, &cfg, &params).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim(), (cfg.tokens_per_image(), cfg.d_model));
    assert_eq!(cache.x.dim(), (cfg.tokens_per_image(), cfg.patch_dim()));
    // normalized pixels stay in [0, 1]
    assert!(cache.x.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = ModelConfig { context_len: 32, ..ModelConfig::grad_check_config() };
    let params = ModelParams::<f64>::init(&cfg).unwrap();
    let (stream, images) = image_stream(&cfg, &[RESERVED, RESERVED + 9], &[RESERVED + 1, RESERVED + 2, 2]);
    let batch = Batch { streams: vec![stream], images: vec![images] };
    let report = grad_check(&params, &cfg, &batch, 1e-4, 220, 11).unwrap();
    assert!(report.n_coords >= 200, "only {} coords sampled", report.n_coords);
    assert!(
        report.max_rel_error < 1e-3,
        "max rel err {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn single_batch_overfit_drives_loss_down() {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        context_len: 32,
        ..ModelConfig::grad_check_config()
    };
    let params = ModelParams::<f32>::init(&cfg).unwrap();
    let (stream, images) = image_stream(&cfg, &[RESERVED + 4], &[RESERVED + 7, RESERVED + 8, 2]);
    let batch = Batch { streams: vec![stream], images: vec![images] };
    let mut state = TrainState::new(params, 200, 3e-3, 1);
    let mut first = 0.0;
    let mut last = 0.0;
    for step in 0..200 {
        let stats = train_step(&mut state, &batch, &cfg).unwrap();
        if step == 0 {
            first = stats.loss;
        }
        last = stats.loss;
    }
    assert!(first > 4.0, "initial loss {first}");
    assert!(last < 0.05, "final loss {last}");
}

#[test]
fn generate_is_deterministic_and_respects_limits() {
    let cfg = ModelConfig { context_len: 64, ..ModelConfig::grad_check_config() };
    let params = ModelParams::<f32>::init(&cfg).unwrap();
    let docs = vec![crate::corpus::synth_document(5, 3, 1).unwrap()];
    let vocab = train_bpe(&docs, cfg.vocab_size).unwrap();
    let prompt = text_stream(vocab.encode("a prompt"), usize::MAX);
    let images: Vec<Arc<PageImage>> = Vec::new();
    let a = generate(&prompt, &images, &params, &cfg, &vocab, 6).unwrap();
    let b = generate(&prompt, &images, &params, &cfg, &vocab, 6).unwrap();
    assert_eq!(a, b);
    let empty = generate(&prompt, &images, &params, &cfg, &vocab, 0).unwrap();
    assert_eq!(empty, "");
    assert!(generate(&prompt, &images, &params, &cfg, &vocab, 100).is_err());
}

#[test]
fn overfit_then_generate_reproduces_answer() {
    let cfg = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        context_len: 64,
        ..ModelConfig::grad_check_config()
    };
    let docs = vec![crate::corpus::synth_document(9, 4, 2).unwrap()];
    let vocab = train_bpe(&docs, cfg.vocab_size).unwrap();
    let prompt_ids = vocab.encode("key: ");
    let answer = "ok";
    let mut ids = prompt_ids.clone();
    let boundary = ids.len();
    ids.extend(vocab.encode(answer));
    ids.push(crate::textok::EOS);
    let mask = (0..ids.len()).map(|p| p >= boundary).collect();
    let train_stream = TokenStream { ids, image_slots: Vec::new(), supervision_mask: mask };
    let batch = Batch { streams: vec![train_stream], images: vec![Vec::new()] };
    let mut state = TrainState::new(ModelParams::<f32>::init(&cfg).unwrap(), 300, 3e-3, 1);
    for _ in 0..300 {
        train_step(&mut state, &batch, &cfg).unwrap();
    }
    let prompt = text_stream(prompt_ids, usize::MAX);
    let out = generate(&prompt, &[], &state.params, &cfg, &vocab, 8).unwrap();
    assert_eq!(out, answer);
}
