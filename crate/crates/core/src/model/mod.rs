//! Decoder-only transformer: configuration, weights and the hookable forward pass.

mod forward;
mod io;
pub(crate) mod ops;

pub use forward::{
    forward, forward_cached, forward_intervened, ActivationCache, Directive, InterventionPlan,
    NodeKind, NodeRef, PatchSources, Positions, Source, unembed_rows,
};
pub use io::{load_model, save_model};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, BOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Rms,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosKind {
    LearnedAbsolute,
}

/// Architecture hyper-parameters. `n_heads * d_head == d_model`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub pos_kind: PosKind,
    /// Layers whose block has no MLP (a zero-width one).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mlp_free: Vec<usize>,
}

// Upper bound on any single dimension accepted from a file or CLI.
const MAX_DIM: usize = 1 << 16;

impl ModelConfig {
    /// Default toy configuration: 4 layers, 8 heads, width 128.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            d_model: 128,
            d_head: 16,
            d_mlp: 512,
            vocab_size,
            max_seq: 256,
            norm_kind: NormKind::Rms,
            pos_kind: PosKind::LearnedAbsolute,
            mlp_free: Vec::new(),
        }
    }

    /// Hidden width of the MLP in `layer`.
    pub fn mlp_width(&self, layer: usize) -> usize {
        if self.mlp_free.contains(&layer) {
            0
        } else {
            self.d_mlp
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
            if v > MAX_DIM {
                return Err(Error::InvalidConfig(format!("{name} = {v} exceeds {MAX_DIM}")));
            }
        }
        if self.max_seq < 2 || self.max_seq > MAX_DIM {
            return Err(Error::InvalidConfig(format!(
                "max_seq = {} must lie in [2, {MAX_DIM}]",
                self.max_seq
            )));
        }
        if let Some(l) = self.mlp_free.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::InvalidConfig(format!("mlp_free layer {l} >= n_layers = {}", self.n_layers)));
        }
        if self.n_heads.checked_mul(self.d_head) != Some(self.d_model) {
            return Err(Error::InvalidConfig(format!(
                "n_heads * d_head = {} * {} != d_model = {}",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        Ok(())
    }

    pub fn n_head_total(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

/// Weights of one transformer block. Query/key/value projections are stored
/// fused: columns `h*d_head..(h+1)*d_head` belong to head `h`. The output
/// projection is stored with rows `h*d_head..(h+1)*d_head` belonging to head `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm1: Array1<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub norm2: Array1<f32>,
    pub w_in: Array2<f32>,
    pub w_out: Array2<f32>,
}

/// A decoder-only, pre-norm transformer without biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Array2<f32>,
    pub pos: Array2<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Array1<f32>,
    pub unembed: Array2<f32>,
}

impl Model {
    /// All-zero weights (norm gains included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let layer = |l: usize| LayerWeights {
            norm1: Array1::zeros(c.d_model),
            wq: Array2::zeros((c.d_model, c.d_model)),
            wk: Array2::zeros((c.d_model, c.d_model)),
            wv: Array2::zeros((c.d_model, c.d_model)),
            wo: Array2::zeros((c.d_model, c.d_model)),
            norm2: Array1::zeros(c.d_model),
            w_in: Array2::zeros((c.d_model, c.mlp_width(l))),
            w_out: Array2::zeros((c.mlp_width(l), c.d_model)),
        };
        Ok(Self {
            embed: Array2::zeros((c.vocab_size, c.d_model)),
            pos: Array2::zeros((c.max_seq, c.d_model)),
            layers: (0..c.n_layers).map(layer).collect(),
            final_norm: Array1::zeros(c.d_model),
            unembed: Array2::zeros((c.d_model, c.vocab_size)),
            config,
        })
    }

    /// Gaussian initialisation with std 0.02 (output projections scaled by
    /// `1/sqrt(2 * n_layers)`), unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02f32;
        let out_std = std / (2.0 * m.config.n_layers as f32).sqrt();
        let mut fill = |a: &mut Array2<f32>, s: f32| {
            let normal = Normal::new(0.0, s).expect("positive std");
            a.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        };
        fill(&mut m.embed, std);
        fill(&mut m.pos, std);
        for l in &mut m.layers {
            l.norm1.fill(1.0);
            l.norm2.fill(1.0);
            fill(&mut l.wq, std);
            fill(&mut l.wk, std);
            fill(&mut l.wv, std);
            fill(&mut l.wo, out_std);
            fill(&mut l.w_in, std);
            fill(&mut l.w_out, out_std);
        }
        m.final_norm.fill(1.0);
        fill(&mut m.unembed, std);
        Ok(m)
    }

    /// Checks the input contract of every forward pass.
    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_seq: self.config.max_seq,
            });
        }
        if tokens[0] != BOS {
            return Err(Error::MissingBos);
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Named tensors in file order with their shapes, as flat row-major slices.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let c = &self.config;
        let dh = c.d_head;
        let mut out = Vec::new();
        let mat = |a: &Array2<f32>| a.iter().copied().collect::<Vec<_>>();
        out.push(("embed".to_string(), vec![c.vocab_size, c.d_model], mat(&self.embed)));
        out.push(("pos".to_string(), vec![c.max_seq, c.d_model], mat(&self.pos)));
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("L{l}.norm1"), vec![c.d_model], lw.norm1.to_vec()));
            for (tag, w) in [("q", &lw.wq), ("k", &lw.wk), ("v", &lw.wv)] {
                for h in 0..c.n_heads {
                    let slice = w.slice(ndarray::s![.., h * dh..(h + 1) * dh]);
                    out.push((
                        format!("L{l}.attn.{tag}.h{h}"),
                        vec![c.d_model, dh],
                        slice.iter().copied().collect(),
                    ));
                }
            }
            for h in 0..c.n_heads {
                let slice = lw.wo.slice(ndarray::s![h * dh..(h + 1) * dh, ..]);
                out.push((
                    format!("L{l}.attn.o.h{h}"),
                    vec![dh, c.d_model],
                    slice.iter().copied().collect(),
                ));
            }
            out.push((format!("L{l}.norm2"), vec![c.d_model], lw.norm2.to_vec()));
            out.push((format!("L{l}.mlp.in"), vec![c.d_model, c.mlp_width(l)], mat(&lw.w_in)));
            out.push((format!("L{l}.mlp.out"), vec![c.mlp_width(l), c.d_model], mat(&lw.w_out)));
        }
        out.push(("final_norm".to_string(), vec![c.d_model], self.final_norm.to_vec()));
        out.push(("unembed".to_string(), vec![c.d_model, c.vocab_size], mat(&self.unembed)));
        out
    }

    /// Every parameter tensor as a mutable flat slice, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = Vec::new();
        v.push(self.embed.as_slice_mut().expect("standard layout"));
        v.push(self.pos.as_slice_mut().expect("standard layout"));
        for l in &mut self.layers {
            v.push(l.norm1.as_slice_mut().expect("standard layout"));
            v.push(l.wq.as_slice_mut().expect("standard layout"));
            v.push(l.wk.as_slice_mut().expect("standard layout"));
            v.push(l.wv.as_slice_mut().expect("standard layout"));
            v.push(l.wo.as_slice_mut().expect("standard layout"));
            v.push(l.norm2.as_slice_mut().expect("standard layout"));
            v.push(l.w_in.as_slice_mut().expect("standard layout"));
            v.push(l.w_out.as_slice_mut().expect("standard layout"));
        }
        v.push(self.final_norm.as_slice_mut().expect("standard layout"));
        v.push(self.unembed.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn params(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = Vec::new();
        v.push(self.embed.as_slice().expect("standard layout"));
        v.push(self.pos.as_slice().expect("standard layout"));
        for l in &self.layers {
            v.push(l.norm1.as_slice().expect("standard layout"));
            v.push(l.wq.as_slice().expect("standard layout"));
            v.push(l.wk.as_slice().expect("standard layout"));
            v.push(l.wv.as_slice().expect("standard layout"));
            v.push(l.wo.as_slice().expect("standard layout"));
            v.push(l.norm2.as_slice().expect("standard layout"));
            v.push(l.w_in.as_slice().expect("standard layout"));
            v.push(l.w_out.as_slice().expect("standard layout"));
        }
        v.push(self.final_norm.as_slice().expect("standard layout"));
        v.push(self.unembed.as_slice().expect("standard layout"));
        v
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Bit-level equality of every tensor and the config.
    pub fn bit_eq(&self, other: &Model) -> bool {
        self.config == other.config
            && self
                .params()
                .iter()
                .zip(other.params())
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}
