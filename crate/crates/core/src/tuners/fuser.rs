//! Attention fusion of class information into learnable prompts.
//!
//! Given prompts p (N x D) and a class-embedding row c (1 x D), the fuser
//! stacks X = [p; c], runs one self-attention layer
//! O = Softmax(Q K^T / sqrt(d)) V W_O with Q = X W_Q, K = X W_K, V = X W_V,
//! and returns the first N output rows. Class-conditioned prompts are the
//! residual form p + Attn(p, c).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{graph::NodeId, DiffGraph, Tensor};
use crate::rng::Rng;

/// Projection weights of the fusion attention layer. No biases, matching the
/// plain-projection formulation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnFuser {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuserInit {
    pub dim: usize,
    pub heads: usize,
    /// Start with W_O = 0 so the fused prompts initially equal p.
    pub zero_init_output: bool,
}

impl AttnFuser {
    /// Kaiming-initialized projections (std sqrt(2 / fan_in)).
    pub fn init(cfg: FuserInit, rng: &mut Rng) -> Result<AttnFuser> {
        check_heads(cfg.dim, cfg.heads)?;
        let std = (2.0 / cfg.dim as f64).sqrt();
        let mut mat = |rng: &mut Rng| {
            let data = rng
                .normals(cfg.dim * cfg.dim)
                .into_iter()
                .map(|v| v * std)
                .collect();
            Tensor::new(vec![cfg.dim, cfg.dim], data).expect("fuser shape")
        };
        let wq = mat(rng);
        let wk = mat(rng);
        let wv = mat(rng);
        let wo = if cfg.zero_init_output {
            Tensor::zeros(vec![cfg.dim, cfg.dim])
        } else {
            mat(rng)
        };
        Ok(AttnFuser {
            wq,
            wk,
            wv,
            wo,
            heads: cfg.heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "heads {heads} must divide fuser dim {dim}"
        )));
    }
    Ok(())
}

/// Node handles for the fuser weights inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct FuserLeaves {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

impl AttnFuser {
    pub fn leaves(&self, g: &mut DiffGraph, prefix: &str, trainable: bool) -> FuserLeaves {
        FuserLeaves {
            wq: g.param(&format!("{prefix}.wq"), self.wq.clone(), trainable),
            wk: g.param(&format!("{prefix}.wk"), self.wk.clone(), trainable),
            wv: g.param(&format!("{prefix}.wv"), self.wv.clone(), trainable),
            wo: g.param(&format!("{prefix}.wo"), self.wo.clone(), trainable),
        }
    }
}

/// Taped fusion: returns the node holding Attn(p, c), the first N rows of
/// the attention output over X = [p; c].
pub fn attn_fuse_graph(
    g: &mut DiffGraph,
    prompts: NodeId,
    class_row: NodeId,
    leaves: FuserLeaves,
    heads: usize,
) -> Result<NodeId> {
    let n = g.value(prompts).rows();
    let d = g.value(prompts).cols();
    check_heads(d, heads)?;
    if g.value(class_row).rows() != 1 || g.value(class_row).cols() != d {
        return Err(Error::Shape {
            op: "attn_fuse",
            left: g.value(prompts).shape().to_vec(),
            right: g.value(class_row).shape().to_vec(),
        });
    }
    let x = g.concat_rows(&[prompts, class_row])?;
    let q = g.matmul(x, leaves.wq)?;
    let k = g.matmul(x, leaves.wk)?;
    let v = g.matmul(x, leaves.wv)?;
    let dh = d / heads;
    let merged = if heads == 1 {
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let w = g.softmax_rows(scaled);
        g.matmul(w, v)?
    } else {
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let w = g.softmax_rows(scaled);
            outs.push(g.matmul(w, vh)?);
        }
        g.concat_cols(&outs)?
    };
    let o = g.matmul(merged, leaves.wo)?;
    g.slice_rows(o, 0, n)
}

/// Attn(p, c): the fusion output alone.
pub fn attn_fuse(p: &Tensor, c: &Tensor, fuser: &AttnFuser) -> Result<Tensor> {
    let mut g = DiffGraph::new();
    let pn = g.constant(p.clone());
    let cn = g.constant(reshape_row(c, fuser.dim())?);
    let leaves = fuser.leaves(&mut g, "fuser", false);
    let out = attn_fuse_graph(&mut g, pn, cn, leaves, fuser.heads)?;
    Ok(g.value(out).clone())
}

/// p + Attn(p, c), the residual class-conditioned prompts.
pub fn class_conditioned_prompts(p: &Tensor, c: &Tensor, fuser: &AttnFuser) -> Result<Tensor> {
    let mut g = DiffGraph::new();
    let pn = g.constant(p.clone());
    let cn = g.constant(reshape_row(c, fuser.dim())?);
    let leaves = fuser.leaves(&mut g, "fuser", false);
    let attn = attn_fuse_graph(&mut g, pn, cn, leaves, fuser.heads)?;
    let out = g.add(pn, attn)?;
    Ok(g.value(out).clone())
}

fn reshape_row(c: &Tensor, dim: usize) -> Result<Tensor> {
    if c.numel() != dim {
        return Err(Error::Shape {
            op: "attn_fuse.condition",
            left: c.shape().to_vec(),
            right: vec![1, dim],
        });
    }
    Tensor::new(vec![1, dim], c.data().to_vec())
}
