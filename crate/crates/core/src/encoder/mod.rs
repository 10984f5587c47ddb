//! The frozen toy dual-encoder standing in for a CLIP-style model: a small
//! transformer text encoder with depth-parameterized prompt injection and an
//! MLP image encoder, trained jointly by contrastive loss.
//!
//! Both encoders are immutable after construction; forward passes are pure
//! functions of their inputs. Every numeric path goes through [`DiffGraph`],
//! so the no-grad helpers here produce bitwise-identical values to the taped
//! paths used during training.

pub mod pretrain;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WorldConfig;
use crate::error::{Error, Result};
use crate::numcore::{container, graph::NodeId, kernels, DiffGraph, Tensor};
use crate::rng::Rng;

pub use pretrain::{contrastive_pretrain, retrieval_accuracy, PretrainConfig};

/// Sizes and temperatures of a dual-encoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Transformer width D.
    pub embed_dim: usize,
    /// Number of transformer blocks L.
    pub blocks: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Maximum sequence length including injected vectors.
    pub max_seq: usize,
    /// Output feature width shared by both encoders.
    pub feat_dim: usize,
    /// Raw image-space dimensionality.
    pub image_dim: usize,
    /// Hidden width of the image MLP.
    pub image_hidden: usize,
    /// Hidden width of each block's MLP.
    pub mlp_hidden: usize,
    /// Inference temperature of the prediction softmax.
    pub tau: f64,
    /// Contrastive-training temperature.
    pub tau_train: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 64,
            embed_dim: 32,
            blocks: 6,
            heads: 2,
            max_seq: 24,
            feat_dim: 32,
            image_dim: 16,
            image_hidden: 32,
            mlp_hidden: 64,
            tau: 0.01,
            tau_train: 0.07,
        }
    }
}

impl EncoderConfig {
    /// A tiny configuration for fast unit tests and gradient checks.
    pub fn tiny() -> Self {
        EncoderConfig {
            vocab_size: 16,
            embed_dim: 8,
            blocks: 2,
            heads: 2,
            max_seq: 12,
            feat_dim: 8,
            image_dim: 4,
            image_hidden: 8,
            mlp_hidden: 16,
            tau: 0.01,
            tau_train: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.vocab_size < 2 || self.blocks == 0 || self.max_seq < 2 {
            return Err(Error::Config("degenerate encoder sizes".into()));
        }
        Ok(())
    }
}

/// One transformer block: self-attention plus MLP, each behind a layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Block {
    fn init(d: usize, hidden: usize, rng: &mut Rng) -> Block {
        let mat = |rows: usize, cols: usize, std: f64, rng: &mut Rng| {
            let data = rng.normals(rows * cols).into_iter().map(|v| v * std).collect();
            Tensor::new(vec![rows, cols], data).expect("block shape")
        };
        let s = 1.0 / (d as f64).sqrt();
        Block {
            ln1_g: Tensor::new(vec![d], vec![1.0; d]).expect("ln"),
            ln1_b: Tensor::zeros(vec![d]),
            wq: mat(d, d, s, rng),
            bq: Tensor::zeros(vec![1, d]),
            wk: mat(d, d, s, rng),
            bk: Tensor::zeros(vec![1, d]),
            wv: mat(d, d, s, rng),
            bv: Tensor::zeros(vec![1, d]),
            wo: mat(d, d, s, rng),
            bo: Tensor::zeros(vec![1, d]),
            ln2_g: Tensor::new(vec![d], vec![1.0; d]).expect("ln"),
            ln2_b: Tensor::zeros(vec![d]),
            w1: mat(d, hidden, s * std::f64::consts::SQRT_2, rng),
            b1: Tensor::zeros(vec![1, hidden]),
            w2: mat(hidden, d, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(vec![1, d]),
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("mlp.w1", &mut self.w1),
            ("mlp.b1", &mut self.b1),
            ("mlp.w2", &mut self.w2),
            ("mlp.b2", &mut self.b2),
        ]
    }
}

/// Transformer text encoder with prompt-injection support.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub feat_dim: usize,
    pub token_embeddings: Tensor,
    pub positional: Tensor,
    pub blocks: Vec<Block>,
    pub output_projection: Tensor,
}

/// Vectors prepended to the hidden sequence at the input of block `depth`.
#[derive(Debug, Clone, Copy)]
pub struct Injection<'a> {
    pub depth: usize,
    pub vectors: &'a Tensor,
}

/// Node handles for one text encoder's parameters inside a graph.
#[derive(Debug, Clone)]
pub struct TextLeaves {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub blocks: Vec<BlockLeaves>,
    pub proj: NodeId,
}

#[derive(Debug, Clone)]
pub struct BlockLeaves {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Result of building a text forward pass: the projected feature plus the
/// hidden state after embedding ("pre") and after every block.
#[derive(Debug, Clone)]
pub struct TextForward {
    pub feature: NodeId,
    pub embed_state: NodeId,
    pub block_states: Vec<NodeId>,
}

impl TextEncoder {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> TextEncoder {
        let d = cfg.embed_dim;
        let emb: Vec<f64> = rng
            .normals(cfg.vocab_size * d)
            .into_iter()
            .map(|v| v * 0.02)
            .collect();
        let pos: Vec<f64> = rng
            .normals(cfg.max_seq * d)
            .into_iter()
            .map(|v| v * 0.01)
            .collect();
        let blocks = (0..cfg.blocks)
            .map(|_| Block::init(d, cfg.mlp_hidden, rng))
            .collect();
        let proj: Vec<f64> = rng
            .normals(d * cfg.feat_dim)
            .into_iter()
            .map(|v| v / (d as f64).sqrt())
            .collect();
        TextEncoder {
            vocab_size: cfg.vocab_size,
            embed_dim: d,
            heads: cfg.heads,
            max_seq: cfg.max_seq,
            feat_dim: cfg.feat_dim,
            token_embeddings: Tensor::new(vec![cfg.vocab_size, d], emb).expect("emb"),
            positional: Tensor::new(vec![cfg.max_seq, d], pos).expect("pos"),
            blocks,
            output_projection: Tensor::new(vec![d, cfg.feat_dim], proj).expect("proj"),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Registers all parameters as graph leaves under `prefix`.
    pub fn leaves(&self, g: &mut DiffGraph, prefix: &str, trainable: bool) -> TextLeaves {
        let tok_emb = g.param(&format!("{prefix}.tok_emb"), self.token_embeddings.clone(), trainable);
        let pos_emb = g.param(&format!("{prefix}.pos_emb"), self.positional.clone(), trainable);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut add =
                    |name: &str, t: &Tensor| g.param(&format!("{prefix}.block{i}.{name}"), t.clone(), trainable);
                BlockLeaves {
                    ln1_g: add("ln1.g", &b.ln1_g),
                    ln1_b: add("ln1.b", &b.ln1_b),
                    wq: add("attn.wq", &b.wq),
                    bq: add("attn.bq", &b.bq),
                    wk: add("attn.wk", &b.wk),
                    bk: add("attn.bk", &b.bk),
                    wv: add("attn.wv", &b.wv),
                    bv: add("attn.bv", &b.bv),
                    wo: add("attn.wo", &b.wo),
                    bo: add("attn.bo", &b.bo),
                    ln2_g: add("ln2.g", &b.ln2_g),
                    ln2_b: add("ln2.b", &b.ln2_b),
                    w1: add("mlp.w1", &b.w1),
                    b1: add("mlp.b1", &b.b1),
                    w2: add("mlp.w2", &b.w2),
                    b2: add("mlp.b2", &b.b2),
                }
            })
            .collect();
        let proj = g.param(&format!("{prefix}.proj"), self.output_projection.clone(), trainable);
        TextLeaves {
            tok_emb,
            pos_emb,
            blocks,
            proj,
        }
    }

    /// Builds the taped forward pass over `tokens`, optionally prepending
    /// injected vectors at the input of block `depth`.
    ///
    /// Injected slots take positional rows 0..N-1 and token positions shift
    /// by N, so injection at depth 0 reproduces the `[p, c]` prefix-prompt
    /// layout at the embedding level. The text feature is the hidden state
    /// at the final sequence position mapped through the output projection.
    pub fn encode_graph(
        &self,
        g: &mut DiffGraph,
        leaves: &TextLeaves,
        tokens: &[usize],
        injection: Option<(usize, NodeId)>,
    ) -> Result<TextForward> {
        if tokens.is_empty() {
            return Err(Error::Config("encode_text needs at least one token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                got: bad,
                bound: self.vocab_size,
            });
        }
        let n_inj = match injection {
            Some((depth, vecs)) => {
                if depth >= self.depth() {
                    return Err(Error::Config(format!(
                        "injection depth {depth} out of range (blocks {})",
                        self.depth()
                    )));
                }
                let t = g.value(vecs);
                if t.cols() != self.embed_dim {
                    return Err(Error::Shape {
                        op: "encode_text.injection",
                        left: t.shape().to_vec(),
                        right: vec![self.embed_dim],
                    });
                }
                t.rows()
            }
            None => 0,
        };
        if n_inj + tokens.len() > self.max_seq {
            return Err(Error::Capacity {
                needed: n_inj + tokens.len(),
                max: self.max_seq,
            });
        }

        let shift = if injection.is_some() { n_inj } else { 0 };
        let emb = g.embed_rows(leaves.tok_emb, tokens)?;
        let pos_tok = g.slice_rows(leaves.pos_emb, shift, tokens.len())?;
        let mut h = g.add(emb, pos_tok)?;

        let mut embed_state = h;
        let mut block_states = Vec::with_capacity(self.depth());
        for (i, bl) in leaves.blocks.iter().enumerate() {
            if let Some((depth, vecs)) = injection {
                if depth == i {
                    let pos_inj = g.slice_rows(leaves.pos_emb, 0, n_inj)?;
                    let inj = g.add(vecs, pos_inj)?;
                    h = g.concat_rows(&[inj, h])?;
                    if i == 0 {
                        embed_state = h;
                    }
                }
            }
            h = self.block_graph(g, bl, h)?;
            block_states.push(h);
        }
        let rows = g.value(h).rows();
        let last = g.slice_rows(h, rows - 1, 1)?;
        let feature = g.matmul(last, leaves.proj)?;
        Ok(TextForward {
            feature,
            embed_state,
            block_states,
        })
    }

    fn block_graph(&self, g: &mut DiffGraph, b: &BlockLeaves, h: NodeId) -> Result<NodeId> {
        let d = self.embed_dim;
        let dh = d / self.heads;
        let a = g.layer_norm(h, b.ln1_g, b.ln1_b)?;
        let q0 = g.matmul(a, b.wq)?;
        let q = g.add_row_broadcast(q0, b.bq)?;
        let k0 = g.matmul(a, b.wk)?;
        let k = g.add_row_broadcast(k0, b.bk)?;
        let v0 = g.matmul(a, b.wv)?;
        let v = g.add_row_broadcast(v0, b.bv)?;
        let merged = if self.heads == 1 {
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt)?;
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let w = g.softmax_rows(scaled);
            g.matmul(w, v)?
        } else {
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt)?;
                let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
                let w = g.softmax_rows(scaled);
                heads.push(g.matmul(w, vh)?);
            }
            g.concat_cols(&heads)?
        };
        let proj0 = g.matmul(merged, b.wo)?;
        let proj = g.add_row_broadcast(proj0, b.bo)?;
        let h = g.add(h, proj)?;

        let m = g.layer_norm(h, b.ln2_g, b.ln2_b)?;
        let mid0 = g.matmul(m, b.w1)?;
        let mid1 = g.add_row_broadcast(mid0, b.b1)?;
        let mid = g.gelu(mid1);
        let out0 = g.matmul(mid, b.w2)?;
        let out = g.add_row_broadcast(out0, b.b2)?;
        g.add(h, out)
    }

    /// One-shot forward: returns the projected text feature (rank-1).
    pub fn encode(&self, tokens: &[usize], injection: Option<Injection>) -> Result<Tensor> {
        let (_, feature) = self.encode_states(tokens, injection)?;
        Ok(feature)
    }

    /// Forward pass capturing per-layer hidden states: the embedding-level
    /// state, each block output, and the projected feature.
    pub fn encode_states(
        &self,
        tokens: &[usize],
        injection: Option<Injection>,
    ) -> Result<(Vec<Tensor>, Tensor)> {
        let mut g = DiffGraph::new();
        let leaves = self.leaves(&mut g, "text", false);
        let inj = match injection {
            Some(Injection { depth, vectors }) => {
                let node = g.constant(vectors.clone());
                Some((depth, node))
            }
            None => None,
        };
        let fwd = self.encode_graph(&mut g, &leaves, tokens, inj)?;
        let mut states = Vec::with_capacity(1 + fwd.block_states.len());
        states.push(g.value(fwd.embed_state).clone());
        for s in &fwd.block_states {
            states.push(g.value(*s).clone());
        }
        let f = g.value(fwd.feature);
        let feature = Tensor::new(vec![self.feat_dim], f.data().to_vec()).expect("feature");
        Ok((states, feature))
    }

    /// Parameter tensors grouped by drift-analysis layer: embeddings and
    /// positional rows count as "pre", each block as its index, the output
    /// projection as "post".
    pub fn layer_groups(&self) -> Vec<(String, Vec<(String, &Tensor)>)> {
        let mut out = Vec::with_capacity(self.blocks.len() + 2);
        out.push((
            "pre".to_string(),
            vec![
                ("tok_emb".to_string(), &self.token_embeddings),
                ("pos_emb".to_string(), &self.positional),
            ],
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((
                i.to_string(),
                b.tensors()
                    .into_iter()
                    .map(|(n, t)| (n.to_string(), t))
                    .collect(),
            ));
        }
        out.push((
            "post".to_string(),
            vec![("proj".to_string(), &self.output_projection)],
        ));
        out
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        f("text.tok_emb".into(), &mut self.token_embeddings);
        f("text.pos_emb".into(), &mut self.positional);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                f(format!("text.block{i}.{name}"), t);
            }
        }
        f("text.proj".into(), &mut self.output_projection);
    }
}

/// MLP image encoder, tanh between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub layers: Vec<ImageLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageLayer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Node handles for the image encoder's parameters.
#[derive(Debug, Clone)]
pub struct ImageLeaves {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl ImageEncoder {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> ImageEncoder {
        ImageEncoder::init_with_hidden(cfg, cfg.image_hidden, rng)
    }

    pub fn init_with_hidden(cfg: &EncoderConfig, hidden: usize, rng: &mut Rng) -> ImageEncoder {
        let widths = [cfg.image_dim, hidden, cfg.feat_dim];
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = 1.0 / (fan_in as f64).sqrt();
                let data = rng
                    .normals(fan_in * fan_out)
                    .into_iter()
                    .map(|v| v * std)
                    .collect();
                ImageLayer {
                    w: Tensor::new(vec![fan_in, fan_out], data).expect("image layer"),
                    b: Tensor::zeros(vec![1, fan_out]),
                }
            })
            .collect();
        ImageEncoder { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("layers").w.shape()[1]
    }

    pub fn leaves(&self, g: &mut DiffGraph, prefix: &str, trainable: bool) -> ImageLeaves {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                (
                    g.param(&format!("{prefix}.layer{i}.w"), l.w.clone(), trainable),
                    g.param(&format!("{prefix}.layer{i}.b"), l.b.clone(), trainable),
                )
            })
            .collect();
        ImageLeaves { layers }
    }

    /// Batched forward: input node is B x image_dim, output B x feat_dim.
    pub fn encode_graph(
        &self,
        g: &mut DiffGraph,
        leaves: &ImageLeaves,
        x: NodeId,
    ) -> Result<NodeId> {
        if g.value(x).cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "encode_image",
                left: g.value(x).shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        let mut h = x;
        let last = leaves.layers.len() - 1;
        for (i, (w, b)) in leaves.layers.iter().enumerate() {
            let lin = g.matmul(h, *w)?;
            h = g.add_row_broadcast(lin, *b)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    /// One-shot forward for a single raw image vector.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.features(std::slice::from_ref(x))?;
        Ok(Tensor::new(vec![self.output_dim()], f.data().to_vec()).expect("feature"))
    }

    /// Batched no-grad features: B x feat_dim.
    pub fn features(&self, xs: &[Tensor]) -> Result<Tensor> {
        let dim = self.input_dim();
        for x in xs {
            if x.numel() != dim {
                return Err(Error::Shape {
                    op: "encode_image",
                    left: x.shape().to_vec(),
                    right: vec![dim],
                });
            }
        }
        let mut batch = Tensor::zeros(vec![xs.len(), dim]);
        for (i, x) in xs.iter().enumerate() {
            batch.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(x.data());
        }
        let mut g = DiffGraph::new();
        let leaves = self.leaves(&mut g, "image", false);
        let input = g.constant(batch);
        let out = self.encode_graph(&mut g, &leaves, input)?;
        Ok(g.value(out).clone())
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("image.layer{i}.w"), &mut l.w);
            f(format!("image.layer{i}.b"), &mut l.b);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairTag {
    Base,
    Upgraded,
}

impl PairTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairTag::Base => "base",
            PairTag::Upgraded => "upgraded",
        }
    }
}

/// A matched text/image encoder pair plus the world it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub tag: PairTag,
    pub tau: f64,
    pub tau_train: f64,
    pub world: WorldConfig,
    pub config: EncoderConfig,
    pub seed: u64,
}

impl ModelPair {
    /// Base and upgraded pairs must agree on all text-encoder shapes for the
    /// drift analysis and module reuse to be meaningful.
    pub fn layer_aligned(&self, other: &ModelPair) -> bool {
        self.text.vocab_size == other.text.vocab_size
            && self.text.embed_dim == other.text.embed_dim
            && self.text.depth() == other.text.depth()
            && self.text.feat_dim == other.text.feat_dim
            && self.text.max_seq == other.text.max_seq
    }

    /// Embedding row of a single class token (the conditioning input c_i).
    pub fn class_embedding(&self, token: usize) -> Result<Tensor> {
        if token >= self.text.vocab_size {
            return Err(Error::Index {
                what: "token id",
                got: token,
                bound: self.text.vocab_size,
            });
        }
        Ok(Tensor::new(
            vec![1, self.text.embed_dim],
            self.text.token_embeddings.row(token).to_vec(),
        )
        .expect("class embedding"))
    }

    /// Mean-pooled embedding of a multi-token condition sequence.
    pub fn pooled_embedding(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Config("empty condition sequence".into()));
        }
        let d = self.text.embed_dim;
        let mut acc = vec![0.0; d];
        for &t in tokens {
            if t >= self.text.vocab_size {
                return Err(Error::Index {
                    what: "token id",
                    got: t,
                    bound: self.text.vocab_size,
                });
            }
            for (a, &v) in acc.iter_mut().zip(self.text.token_embeddings.row(t)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= tokens.len() as f64;
        }
        Ok(Tensor::new(vec![1, d], acc).expect("pooled embedding"))
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        let mut text = self.text.clone();
        text.for_each_param_mut(|name, t| {
            out.insert(name, t.clone());
        });
        let mut image = self.image.clone();
        image.for_each_param_mut(|name, t| {
            out.insert(name, t.clone());
        });
        out
    }

    /// Serialized container bytes; the basis of checksums and the
    /// frozen-encoder invariance checks.
    pub fn container_bytes(&self) -> Vec<u8> {
        container::to_bytes(&self.to_tensors())
    }

    pub fn checksum(&self) -> String {
        container::fnv1a_hex(&self.container_bytes())
    }

    pub fn save(&self, stem: &Path, extra: Option<serde_json::Value>) -> Result<()> {
        let tensors = self.to_tensors();
        container::save_to_file(&stem.with_extension("pcmp"), &tensors)?;
        let manifest = PairManifest {
            format: "pcmp-modelpair".into(),
            version: 1,
            tag: self.tag.as_str().into(),
            seed: self.seed,
            tau: self.tau,
            tau_train: self.tau_train,
            config: self.config.clone(),
            world: self.world.clone(),
            config_fingerprint: config_fingerprint(&self.config, &self.world),
            checksum: container::fnv1a_hex(&container::to_bytes(&tensors)),
            extra,
        };
        let json =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(stem.with_extension("json"), json)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<ModelPair> {
        let tensors = container::load_from_file(&stem.with_extension("pcmp"))?;
        let manifest: PairManifest =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)
                .map_err(|e| Error::Format(e.to_string()))?;
        let cfg = manifest.config.clone();
        let mut rng = Rng::new(0);
        let mut text = TextEncoder::init(&cfg, &mut rng);
        let mut image = ImageEncoder::init(&cfg, &mut rng);
        let mut missing = Vec::new();
        text.for_each_param_mut(|name, t| match tensors.get(&name) {
            Some(src) if src.shape() == t.shape() => {
                t.data_mut().copy_from_slice(src.data());
            }
            _ => missing.push(name),
        });
        image.for_each_param_mut(|name, t| match tensors.get(&name) {
            Some(src) if src.shape() == t.shape() => {
                t.data_mut().copy_from_slice(src.data());
            }
            _ => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(Error::Format(format!(
                "checkpoint missing or misshapen tensors: {missing:?}"
            )));
        }
        let tag = match manifest.tag.as_str() {
            "base" => PairTag::Base,
            "upgraded" => PairTag::Upgraded,
            other => return Err(Error::Format(format!("unknown pair tag {other}"))),
        };
        Ok(ModelPair {
            text,
            image,
            tag,
            tau: manifest.tau,
            tau_train: manifest.tau_train,
            world: manifest.world,
            config: cfg,
            seed: manifest.seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairManifest {
    pub format: String,
    pub version: u32,
    pub tag: String,
    pub seed: u64,
    pub tau: f64,
    pub tau_train: f64,
    pub config: EncoderConfig,
    pub world: WorldConfig,
    pub config_fingerprint: String,
    pub checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

/// Fingerprint of the (encoder, world) configuration for provenance stamps.
pub fn config_fingerprint(cfg: &EncoderConfig, world: &WorldConfig) -> String {
    let json = serde_json::to_string(&(cfg, world)).expect("config serializes");
    container::fnv1a_hex(json.as_bytes())
}

/// Zero-shot classifier: row i encodes `template ++ class_tokens[i]`; rows
/// are L2-normalized.
pub fn zero_shot_classifier(
    pair: &ModelPair,
    class_tokens: &[Vec<usize>],
    template: &[usize],
) -> Result<Tensor> {
    if class_tokens.len() < 2 {
        return Err(Error::Config(format!(
            "zero-shot classifier needs at least 2 classes, got {}",
            class_tokens.len()
        )));
    }
    let mut g = DiffGraph::new();
    let leaves = pair.text.leaves(&mut g, "text", false);
    let mut rows = Vec::with_capacity(class_tokens.len());
    for ct in class_tokens {
        let mut tokens = template.to_vec();
        tokens.extend_from_slice(ct);
        rows.push(pair.text.encode_graph(&mut g, &leaves, &tokens, None)?.feature);
    }
    let stacked = g.concat_rows(&rows)?;
    let normed = g.row_l2_normalize(stacked)?;
    Ok(g.value(normed).clone())
}

/// Eq.-2 style prediction: softmax over cosine similarities divided by tau.
pub fn predict(pair: &ModelPair, classifier: &Tensor, f: &Tensor) -> Result<Tensor> {
    predict_with_tau(classifier, f, pair.tau)
}

pub fn predict_with_tau(classifier: &Tensor, f: &Tensor, tau: f64) -> Result<Tensor> {
    let c = classifier.rows();
    let mut logits = vec![0.0; c];
    let fv = Tensor::new(vec![f.numel()], f.data().to_vec()).expect("feature");
    for (i, l) in logits.iter_mut().enumerate() {
        let row = Tensor::new(vec![classifier.cols()], classifier.row(i).to_vec()).expect("row");
        *l = crate::numcore::cosine(&row, &fv)? / tau;
    }
    let mut probs = vec![0.0; c];
    kernels::softmax_rows(&logits, 1, c, &mut probs);
    Tensor::new(vec![c], probs)
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
