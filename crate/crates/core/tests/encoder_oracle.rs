//! Validates the text-encoder forward pass against a fully independent
//! scalar-by-scalar reimplementation on a hand-built 1-block, width-2
//! encoder, with and without prompt injection.

use pcmp_core::data::WorldConfig;
use pcmp_core::encoder::{
    zero_shot_classifier, EncoderConfig, ImageEncoder, Injection, ModelPair, PairTag, TextEncoder,
};
use pcmp_core::rng::Rng;
use pcmp_core::Tensor;

/// Plain-loop matrix multiply on nested vecs.
fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, &v)| (v - mean) * rstd * g[i] + b[i])
        .collect()
}

fn softmax_row(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Independent forward pass: embedding + shifted positions, pre-LN blocks
/// with single-head attention, GELU MLP, feature from the last position.
fn oracle_forward(enc: &TextEncoder, tokens: &[usize], injection: Option<(usize, &Tensor)>) -> Vec<f64> {
    let d = enc.embed_dim;
    let n_inj = injection.map_or(0, |(_, v)| v.rows());
    let shift = if injection.is_some() { n_inj } else { 0 };

    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            (0..d)
                .map(|c| enc.token_embeddings.at(t, c) + enc.positional.at(shift + r, c))
                .collect()
        })
        .collect();

    for (li, blk) in enc.blocks.iter().enumerate() {
        if let Some((depth, vecs)) = injection {
            if depth == li {
                let mut prefixed: Vec<Vec<f64>> = (0..n_inj)
                    .map(|r| (0..d).map(|c| vecs.at(r, c) + enc.positional.at(r, c)).collect())
                    .collect();
                prefixed.append(&mut h);
                h = prefixed;
            }
        }
        let s = h.len();
        let a: Vec<Vec<f64>> = h
            .iter()
            .map(|row| layer_norm_row(row, blk.ln1_g.data(), blk.ln1_b.data()))
            .collect();
        let add_bias = |m: Vec<Vec<f64>>, b: &Tensor| -> Vec<Vec<f64>> {
            m.into_iter()
                .map(|row| row.iter().enumerate().map(|(c, v)| v + b.data()[c]).collect())
                .collect()
        };
        let q = add_bias(mm(&a, &rows_of(&blk.wq)), &blk.bq);
        let k = add_bias(mm(&a, &rows_of(&blk.wk)), &blk.bk);
        let v = add_bias(mm(&a, &rows_of(&blk.wv)), &blk.bv);
        assert_eq!(enc.heads, 1, "oracle covers the single-head case");
        let scale = 1.0 / (d as f64).sqrt();
        let mut merged = vec![vec![0.0; d]; s];
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| {
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += q[i][c] * k[j][c];
                    }
                    dot * scale
                })
                .collect();
            let w = softmax_row(&scores);
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += w[j] * v[j][c];
                }
                merged[i][c] = acc;
            }
        }
        let proj = add_bias(mm(&merged, &rows_of(&blk.wo)), &blk.bo);
        for i in 0..s {
            for c in 0..d {
                h[i][c] += proj[i][c];
            }
        }
        let m: Vec<Vec<f64>> = h
            .iter()
            .map(|row| layer_norm_row(row, blk.ln2_g.data(), blk.ln2_b.data()))
            .collect();
        let mid: Vec<Vec<f64>> = add_bias(mm(&m, &rows_of(&blk.w1)), &blk.b1)
            .into_iter()
            .map(|row| row.into_iter().map(gelu).collect())
            .collect();
        let out = add_bias(mm(&mid, &rows_of(&blk.w2)), &blk.b2);
        for i in 0..s {
            for c in 0..d {
                h[i][c] += out[i][c];
            }
        }
    }

    let last = &h[h.len() - 1];
    let proj = rows_of(&enc.output_projection);
    (0..enc.feat_dim)
        .map(|c| {
            let mut s = 0.0;
            for p in 0..d {
                s += last[p] * proj[p][c];
            }
            s
        })
        .collect()
}

fn hand_built() -> (EncoderConfig, TextEncoder) {
    let cfg = EncoderConfig {
        vocab_size: 4,
        embed_dim: 2,
        blocks: 1,
        heads: 1,
        max_seq: 6,
        feat_dim: 2,
        image_dim: 3,
        image_hidden: 3,
        mlp_hidden: 3,
        tau: 0.01,
        tau_train: 0.07,
    };
    let mut rng = Rng::for_domain("oracle-enc", 7);
    let enc = TextEncoder::init(&cfg, &mut rng);
    (cfg, enc)
}

#[test]
fn encode_text_matches_scalar_oracle() {
    let (_, enc) = hand_built();
    for tokens in [vec![0usize], vec![2, 1], vec![3, 0, 2]] {
        let got = enc.encode(&tokens, None).unwrap();
        let want = oracle_forward(&enc, &tokens, None);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "mismatch: {a} vs {b}");
        }
    }
}

#[test]
fn encode_text_with_injection_matches_scalar_oracle() {
    let (_, enc) = hand_built();
    let vecs = Tensor::from_rows(&[vec![0.3, -0.1], vec![-0.2, 0.4]]).unwrap();
    for depth in [0usize] {
        let got = enc
            .encode(&[1, 3], Some(Injection { depth, vectors: &vecs }))
            .unwrap();
        let want = oracle_forward(&enc, &[1, 3], Some((depth, &vecs)));
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "depth {depth}: {a} vs {b}");
        }
    }
}

#[test]
fn zero_shot_rows_match_oracle() {
    let (cfg, enc) = hand_built();
    let mut rng = Rng::for_domain("oracle-img", 7);
    let image = ImageEncoder::init(&cfg, &mut rng);
    let world = WorldConfig {
        image_dim: cfg.image_dim,
        template: vec![1],
        class_token_start: 2,
        class_token_count: 2,
    };
    let pair = ModelPair {
        text: enc,
        image,
        tag: PairTag::Base,
        tau: cfg.tau,
        tau_train: cfg.tau_train,
        world,
        config: cfg,
        seed: 7,
    };
    let classes = vec![vec![2usize], vec![3usize]];
    let w = zero_shot_classifier(&pair, &classes, &[1]).unwrap();
    for (i, ct) in classes.iter().enumerate() {
        let mut tokens = vec![1usize];
        tokens.extend_from_slice(ct);
        let raw = oracle_forward(&pair.text, &tokens, None);
        let norm: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (c, &v) in raw.iter().enumerate() {
            assert!((w.at(i, c) - v / norm).abs() < 1e-12);
        }
    }
}
