use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub norm1: Array1<T>,
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub norm2: Array1<T>,
    pub w1: Array2<T>,
    pub w2: Array2<T>,
}

/// All learnable tensors. The same struct doubles as the gradient and the
/// optimizer-moment container.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    /// (vocab, d)
    pub tok_emb: Array2<T>,
    /// (patch_px^2, d)
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    /// (d, adaptor_hidden)
    pub adaptor_w1: Array2<T>,
    pub adaptor_b1: Array1<T>,
    /// (adaptor_hidden, d)
    pub adaptor_w2: Array2<T>,
    pub adaptor_b2: Array1<T>,
    /// learned position per image slot: (tokens_per_image, d)
    pub slot_pos: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Array1<T>,
    /// (d, vocab), untied from tok_emb
    pub head: Array2<T>,
}

fn randn(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn init_mat<T: Scalar>(rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(randn(rng) * std))
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let std = 0.02;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                norm1: Array1::ones(d),
                wq: init_mat(&mut rng, d, d, std),
                wk: init_mat(&mut rng, d, d, std),
                wv: init_mat(&mut rng, d, d, std),
                wo: init_mat(&mut rng, d, d, std),
                norm2: Array1::ones(d),
                w1: init_mat(&mut rng, d, cfg.ffn_dim(), std),
                w2: init_mat(&mut rng, cfg.ffn_dim(), d, std),
            })
            .collect();
        Ok(ModelParams {
            tok_emb: init_mat(&mut rng, cfg.vocab_size, d, std),
            patch_w: init_mat(&mut rng, cfg.patch_dim(), d, std),
            patch_b: Array1::zeros(d),
            adaptor_w1: init_mat(&mut rng, d, cfg.adaptor_hidden, std),
            adaptor_b1: Array1::zeros(cfg.adaptor_hidden),
            adaptor_w2: init_mat(&mut rng, cfg.adaptor_hidden, d, std),
            adaptor_b2: Array1::zeros(d),
            slot_pos: init_mat(&mut rng, cfg.tokens_per_image(), d, std),
            layers,
            final_norm: Array1::ones(d),
            head: init_mat(&mut rng, d, cfg.vocab_size, std),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_tensor_mut(&mut |_, slice| slice.fill(T::zero()));
        out
    }

    /// Every tensor as a named flat slice, in the declared (checkpoint) order.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out: Vec<(&'static str, &mut [T])> = vec![
            ("tok_emb", self.tok_emb.as_slice_mut().unwrap()),
            ("patch_w", self.patch_w.as_slice_mut().unwrap()),
            ("patch_b", self.patch_b.as_slice_mut().unwrap()),
            ("adaptor_w1", self.adaptor_w1.as_slice_mut().unwrap()),
            ("adaptor_b1", self.adaptor_b1.as_slice_mut().unwrap()),
            ("adaptor_w2", self.adaptor_w2.as_slice_mut().unwrap()),
            ("adaptor_b2", self.adaptor_b2.as_slice_mut().unwrap()),
            ("slot_pos", self.slot_pos.as_slice_mut().unwrap()),
        ];
        for LayerParams { norm1, wq, wk, wv, wo, norm2, w1, w2 } in self.layers.iter_mut() {
            out.push(("norm1", norm1.as_slice_mut().unwrap()));
            out.push(("wq", wq.as_slice_mut().unwrap()));
            out.push(("wk", wk.as_slice_mut().unwrap()));
            out.push(("wv", wv.as_slice_mut().unwrap()));
            out.push(("wo", wo.as_slice_mut().unwrap()));
            out.push(("norm2", norm2.as_slice_mut().unwrap()));
            out.push(("w1", w1.as_slice_mut().unwrap()));
            out.push(("w2", w2.as_slice_mut().unwrap()));
        }
        out.push(("final_norm", self.final_norm.as_slice_mut().unwrap()));
        out.push(("head", self.head.as_slice_mut().unwrap()));
        out
    }

    /// Visit every tensor as a flat slice, in the declared (checkpoint) order.
    pub fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(&'static str, &mut [T])) {
        for (name, slice) in self.tensors_mut() {
            f(name, slice);
        }
    }

    pub fn n_params(&mut self) -> usize {
        let mut n = 0;
        self.for_each_tensor_mut(&mut |_, s| n += s.len());
        n
    }

    pub fn all_finite(&mut self) -> bool {
        let mut ok = true;
        self.for_each_tensor_mut(&mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    step: u64,
    dtype: String,
}

/// Checkpoint: one JSON header line, then raw little-endian tensors in
/// declared order.
pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    step: u64,
    path: &Path,
) -> Result<()> {
    let header = CheckpointHeader { config: cfg.clone(), step, dtype: T::DTYPE.to_string() };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    let mut p = params.clone();
    p.for_each_tensor_mut(&mut |_, slice| {
        for v in slice.iter() {
            v.write_le(&mut buf);
        }
    });
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, ModelConfig, u64)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header_line = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte).map_err(|e| Error::io(path, e))?;
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_line)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Config(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut params = ModelParams::<T>::init(&header.config)?;
    let mut read_err = None;
    params.for_each_tensor_mut(&mut |_, slice| {
        if read_err.is_some() {
            return;
        }
        let mut bytes = vec![0u8; slice.len() * T::BYTES];
        match reader.read_exact(&mut bytes) {
            Ok(()) => {
                for (v, chunk) in slice.iter_mut().zip(bytes.chunks_exact(T::BYTES)) {
                    *v = T::read_le(chunk);
                }
            }
            Err(e) => read_err = Some(e),
        }
    });
    if let Some(e) = read_err {
        return Err(Error::io(path, e));
    }
    Ok((params, header.config, header.step))
}
