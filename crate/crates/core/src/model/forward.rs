//! Forward pass: weight-shared CNN front end, cross-attention (ETE) stack,
//! sequential (SE) stack and the classification head.

use super::config::{ModelConfig, LAYERNORM_EPS};
use super::params::{BoundParams, ConvPath, EncoderWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use std::f64::consts::PI;

/// Intermediate activations of one directed pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    /// CNN features of the key/value branch, `[B*S, N+1, D]`.
    pub cnn_x: Var,
    /// CNN features of the query branch, `[B*S, N+1, D]`.
    pub cnn_xp: Var,
    /// Cross-encoder output pooled at the class token, `[B*S, 1, D]`.
    pub ete: Var,
    /// Sequential encoder output, `[B, S, D]`.
    pub se: Var,
    /// Logits, `[B, S, n_classes]`.
    pub logits: Var,
}

/// `PE[pos, n] = sin(pos / 10000^(2 floor(n/2) / D) - (1 + (-1)^n) pi / 4)`,
/// i.e. `-cos` on even feature indices and `sin` on odd ones.
pub fn positional_encoding(count: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(count * dim);
    for pos in 0..count {
        for n in 0..dim {
            let rate = 10000f64.powf((2 * (n / 2)) as f64 / dim as f64);
            let offset = if n % 2 == 0 { PI / 2.0 } else { 0.0 };
            data.push((pos as f64 / rate - offset).sin());
        }
    }
    Tensor::new(vec![count, dim], data).expect("positive extents")
}

fn conv_path(g: &mut Graph, x: Var, w: &ConvPath<Var>, stride: usize, tokens: usize) -> Result<Var> {
    let h = g.conv1d(x, w.conv1_weight, stride, 0)?;
    let h = g.add(h, w.conv1_bias)?;
    let h = g.gelu(h);
    let h = g.conv1d(h, w.conv2_weight, 1, 0)?;
    let h = g.add(h, w.conv2_bias)?;
    let h = g.gelu(h);
    let h = g.adaptive_avg_pool1d(h, tokens)?;
    // [n, D, tokens] -> [n, tokens, D]
    g.permute(h, &[0, 2, 1])
}

/// Maps `[B, S, C, T]` epochs to `[B*S, N+1, D]` tokens: two CNN paths pooled
/// to `N/2` tokens each, concatenated behind the class token, plus `PE`.
pub fn cnn_block_forward(g: &mut Graph, params: &BoundParams, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != cfg.seq_len || shape[2] != cfg.channels || shape[3] != cfg.samples_per_epoch {
        return Err(Error::dim(format!(
            "expected input [B, {}, {}, {}], got {shape:?}",
            cfg.seq_len, cfg.channels, cfg.samples_per_epoch
        )));
    }
    let n = shape[0] * shape[1];
    let flat = g.reshape(x, &[n, cfg.channels, cfg.samples_per_epoch])?;
    let [long_geo, short_geo] = cfg.paths();
    let long = conv_path(g, flat, &params.long, long_geo.stride, cfg.tokens / 2)?;
    let short = conv_path(g, flat, &params.short, short_geo.stride, cfg.tokens / 2)?;
    let cls = g.broadcast_to(params.class_token, &[n, 1, cfg.dim])?;
    let tokens = g.concat(&[cls, long, short], 1)?;
    let pe = g.constant(&positional_encoding(cfg.tokens + 1, cfg.dim));
    g.add(tokens, pe)
}

/// Multi-head attention with queries from `q_in: [n, Lq, D]` and keys/values
/// from `c_in: [n, Lc, D]`. Scores are scaled by `1/sqrt(D)`.
/// Returns the projected output and the attention weights `[n, A, Lq, Lc]`.
pub fn multi_head_attention(
    g: &mut Graph,
    w: &EncoderWeights<Var>,
    cfg: &ModelConfig,
    q_in: Var,
    c_in: Var,
) -> Result<(Var, Var)> {
    let (sq, sc) = (g.shape(q_in).to_vec(), g.shape(c_in).to_vec());
    if sq.len() != 3 || sc.len() != 3 || sq[0] != sc[0] || sq[2] != cfg.dim || sc[2] != cfg.dim {
        return Err(Error::dim(format!("attention: query {sq:?} and context {sc:?} with D = {}", cfg.dim)));
    }
    let (n, lq, lc) = (sq[0], sq[1], sc[1]);
    let (a, hd) = (cfg.heads, cfg.head_dim);

    let q = g.matmul(q_in, w.query)?;
    let q = g.reshape(q, &[n, lq, a, hd])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = g.matmul(c_in, w.key)?;
    let k = g.reshape(k, &[n, lc, a, hd])?;
    let kt = g.permute(k, &[0, 2, 3, 1])?;
    let v = g.matmul(c_in, w.value)?;
    let v = g.reshape(v, &[n, lc, a, hd])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;

    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (cfg.dim as f64).sqrt());
    let attn = g.softmax(scores, 3)?;
    let heads = g.matmul(attn, v)?;
    let heads = g.permute(heads, &[0, 2, 1, 3])?;
    let concat = g.reshape(heads, &[n, lq, cfg.dim])?;
    Ok((g.matmul(concat, w.output)?, attn))
}

/// `L = LN(MHA(Q, C) + Q)`, `E = LN(GELU(L W1) W2 + L)`.
pub fn encoder_block_forward(
    g: &mut Graph,
    w: &EncoderWeights<Var>,
    cfg: &ModelConfig,
    q_in: Var,
    c_in: Var,
) -> Result<Var> {
    let (m, _) = multi_head_attention(g, w, cfg, q_in, c_in)?;
    let res = g.add(m, q_in)?;
    let l = g.layernorm(res, w.norm1_gain, w.norm1_bias, LAYERNORM_EPS)?;
    let f = g.matmul(l, w.ffn_in)?;
    let f = g.gelu(f);
    let f = g.matmul(f, w.ffn_out)?;
    let res = g.add(f, l)?;
    g.layernorm(res, w.norm2_gain, w.norm2_bias, LAYERNORM_EPS)
}

/// Everything after the CNN block. `kv` supplies keys and values to every
/// cross-attention block; `query` seeds the first block's queries.
fn head_forward(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &ModelConfig,
    kv: Var,
    query: Var,
    batch: usize,
) -> Result<(Var, Var, Var)> {
    let mut h = query;
    for w in &params.ete {
        h = encoder_block_forward(g, w, cfg, h, kv)?;
    }
    let ete = g.narrow(h, 1, 0, 1)?;
    let seq = g.reshape(ete, &[batch, cfg.seq_len, cfg.dim])?;
    let pe = g.constant(&positional_encoding(cfg.seq_len, cfg.dim));
    let mut s = g.add(seq, pe)?;
    for w in &params.se {
        s = encoder_block_forward(g, w, cfg, s, s)?;
    }
    let r = g.relu(s);
    let logits = g.matmul(r, params.head)?;
    Ok((ete, s, logits))
}

fn check_pair(g: &Graph, x: Var, xp: Var) -> Result<usize> {
    if g.shape(x) != g.shape(xp) {
        return Err(Error::dim(format!("X {:?} and X' {:?} differ in shape", g.shape(x), g.shape(xp))));
    }
    g.shape(x).first().copied().ok_or_else(|| Error::dim("empty input"))
}

/// One directed pass `Z(X, X')`: queries from the `X'` branch, keys and values
/// from the `X` branch. For inference pass the same input twice.
pub fn sst_forward(g: &mut Graph, params: &BoundParams, cfg: &ModelConfig, x: Var, xp: Var) -> Result<ForwardTrace> {
    let batch = check_pair(g, x, xp)?;
    let cnn_x = cnn_block_forward(g, params, cfg, x)?;
    let cnn_xp = if x == xp { cnn_x } else { cnn_block_forward(g, params, cfg, xp)? };
    let (ete, se, logits) = head_forward(g, params, cfg, cnn_x, cnn_xp, batch)?;
    Ok(ForwardTrace { cnn_x, cnn_xp, ete, se, logits })
}

/// Both directions `Z(X, X')` and `Z(X', X)`. The CNN features are computed
/// once per input and reused with their roles swapped.
pub fn sst_forward_pair(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &ModelConfig,
    x: Var,
    xp: Var,
) -> Result<(ForwardTrace, ForwardTrace)> {
    let batch = check_pair(g, x, xp)?;
    let cnn_x = cnn_block_forward(g, params, cfg, x)?;
    let cnn_xp = cnn_block_forward(g, params, cfg, xp)?;
    let (ete, se, logits) = head_forward(g, params, cfg, cnn_x, cnn_xp, batch)?;
    let fwd = ForwardTrace { cnn_x, cnn_xp, ete, se, logits };
    let (ete, se, logits) = head_forward(g, params, cfg, cnn_xp, cnn_x, batch)?;
    let rev = ForwardTrace { cnn_x: cnn_xp, cnn_xp: cnn_x, ete, se, logits };
    Ok((fwd, rev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients_with, GradCheckOptions};
    use crate::model::params::ModelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(seed: u64) -> (ModelConfig, ModelParams, ChaCha8Rng) {
        let cfg = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::init(&cfg, &mut rng);
        (cfg, p, rng)
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(5, 6);
        for n in 0..6 {
            let expect = if n % 2 == 0 { -1.0 } else { 0.0 };
            assert!((pe.at(&[0, n]) - expect).abs() < 1e-15);
        }
        // pos 1, n = 1: sin(1 / 10000^0) = sin(1)
        assert!((pe.at(&[1, 1]) - 1f64.sin()).abs() < 1e-15);
        // pos 3, n = 2: sin(3 / 10000^(2/6) - pi/2)
        let expect = (3.0 / 10000f64.powf(2.0 / 6.0) - PI / 2.0).sin();
        assert!((pe.at(&[3, 2]) - expect).abs() < 1e-15);
        let big = positional_encoding(40, 64);
        assert!(big.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn cnn_block_shape_and_class_token() {
        let mut cfg = ModelConfig::toy();
        cfg.tokens = 16;
        cfg.dim = 64;
        cfg.heads = 8;
        cfg.head_dim = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::init(&cfg, &mut rng);
        let x = random(&[2, cfg.seq_len, 1, cfg.samples_per_epoch], &mut rng);
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let xv = g.constant(&x);
        let out = cnn_block_forward(&mut g, &bound, &cfg, xv).unwrap();
        assert_eq!(g.shape(out), &[8, 17, 64]);
        let pe = positional_encoding(17, 64);
        let v = g.value(out);
        for row in 0..8 {
            for j in 0..64 {
                let expect = p.class_token.data()[j] + pe.at(&[0, j]);
                assert_eq!(v[row * 17 * 64 + j], expect);
            }
        }
    }

    #[test]
    fn cnn_block_rejects_wrong_shapes() {
        let (cfg, p, _) = setup(5);
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let x = g.constant(&Tensor::zeros(&[2, cfg.seq_len, 1, cfg.samples_per_epoch - 1]));
        assert!(matches!(cnn_block_forward(&mut g, &bound, &cfg, x), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_rows_sum_to_one_and_single_context_passes_value_through() {
        let (cfg, p, mut rng) = setup(6);
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let q = g.constant(&random(&[3, 5, cfg.dim], &mut rng));
        let c = g.constant(&random(&[3, 7, cfg.dim], &mut rng));
        let (out, attn) = multi_head_attention(&mut g, &bound.ete[0], &cfg, q, c).unwrap();
        assert_eq!(g.shape(out), &[3, 5, cfg.dim]);
        assert_eq!(g.shape(attn), &[3, cfg.heads, 5, 7]);
        for row in g.value(attn).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        // One context position: every query gets V W_M of that position.
        let c1 = g.constant(&random(&[3, 1, cfg.dim], &mut rng));
        let (out, attn) = multi_head_attention(&mut g, &bound.ete[0], &cfg, q, c1).unwrap();
        assert!(g.value(attn).iter().all(|&w| w == 1.0));
        let v = g.matmul(c1, bound.ete[0].value).unwrap();
        let expect = g.matmul(v, bound.ete[0].output).unwrap();
        let (ov, ev) = (g.value(out).to_vec(), g.value(expect).to_vec());
        for b in 0..3 {
            for l in 0..5 {
                for j in 0..cfg.dim {
                    assert!((ov[(b * 5 + l) * cfg.dim + j] - ev[b * cfg.dim + j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_is_invariant_to_context_order() {
        let (cfg, p, mut rng) = setup(7);
        let q = random(&[2, 3, cfg.dim], &mut rng);
        let c = random(&[2, 6, cfg.dim], &mut rng);
        let perm = [4, 0, 5, 2, 1, 3];
        let mut shuffled = c.clone();
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for j in 0..cfg.dim {
                    shuffled.data_mut()[(b * 6 + dst) * cfg.dim + j] = c.data()[(b * 6 + src) * cfg.dim + j];
                }
            }
        }
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let qv = g.constant(&q);
        let cv = g.constant(&c);
        let sv = g.constant(&shuffled);
        let (a, _) = multi_head_attention(&mut g, &bound.ete[0], &cfg, qv, cv).unwrap();
        let (b, _) = multi_head_attention(&mut g, &bound.ete[0], &cfg, qv, sv).unwrap();
        assert!(g.tensor(a).max_abs_diff(&g.tensor(b)) < 1e-12);
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let (cfg, p, _) = setup(8);
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let q = g.constant(&Tensor::zeros(&[1, 2, cfg.dim]));
        let c = g.constant(&Tensor::zeros(&[1, 2, cfg.dim + 1]));
        assert!(matches!(multi_head_attention(&mut g, &bound.ete[0], &cfg, q, c), Err(Error::Dimension(_))));
    }

    #[test]
    fn encoder_block_shape_and_norm() {
        let (cfg, p, mut rng) = setup(9);
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let q = g.constant(&random(&[2, 3, cfg.dim], &mut rng));
        let c = g.constant(&random(&[2, 5, cfg.dim], &mut rng));
        let e = encoder_block_forward(&mut g, &bound.ete[0], &cfg, q, c).unwrap();
        assert_eq!(g.shape(e), &[2, 3, cfg.dim]);
        for row in g.value(e).chunks(cfg.dim) {
            assert!((row.iter().sum::<f64>() / cfg.dim as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn encoder_block_gradient_check() {
        let mut cfg = ModelConfig::toy();
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.head_dim = 4;
        cfg.ffn_dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = ModelParams::init(&cfg, &mut rng);
        let e = &p.ete[0];
        let mut inputs = vec![random(&[2, 3, 8], &mut rng), random(&[2, 4, 8], &mut rng), random(&[2, 3, 8], &mut rng)];
        let ws = [
            &e.query, &e.key, &e.value, &e.output, &e.norm1_gain, &e.norm1_bias, &e.ffn_in, &e.ffn_out, &e.norm2_gain,
            &e.norm2_bias,
        ];
        inputs.extend(ws.iter().map(|t| (*t).clone()));
        let report = check_gradients_with(&inputs, &GradCheckOptions::default(), |g, v| {
            let w = EncoderWeights {
                query: v[3],
                key: v[4],
                value: v[5],
                output: v[6],
                norm1_gain: v[7],
                norm1_bias: v[8],
                ffn_in: v[9],
                ffn_out: v[10],
                norm2_gain: v[11],
                norm2_bias: v[12],
            };
            let out = encoder_block_forward(g, &w, &cfg, v[0], v[1])?;
            let p = g.mul(out, v[2])?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn sst_shapes_and_determinism() {
        let (cfg, p, mut rng) = setup(11);
        let x = random(&[2, cfg.seq_len, 1, cfg.samples_per_epoch], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let bound = p.bind_frozen(&mut g);
            let xv = g.constant(&x);
            let t = sst_forward(&mut g, &bound, &cfg, xv, xv).unwrap();
            assert_eq!(g.shape(t.cnn_x), &[8, cfg.tokens + 1, cfg.dim]);
            assert_eq!(g.shape(t.cnn_xp), &[8, cfg.tokens + 1, cfg.dim]);
            assert_eq!(g.shape(t.ete), &[8, 1, cfg.dim]);
            assert_eq!(g.shape(t.se), &[2, cfg.seq_len, cfg.dim]);
            assert_eq!(g.shape(t.logits), &[2, cfg.seq_len, 5]);
            g.value(t.logits).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn siamese_branches_swap_exactly() {
        let (cfg, p, mut rng) = setup(12);
        let x = random(&[1, cfg.seq_len, 1, cfg.samples_per_epoch], &mut rng);
        let xp = random(&[1, cfg.seq_len, 1, cfg.samples_per_epoch], &mut rng);
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let (xv, xpv) = (g.constant(&x), g.constant(&xp));
        let a = sst_forward(&mut g, &bound, &cfg, xv, xpv).unwrap();
        let b = sst_forward(&mut g, &bound, &cfg, xpv, xv).unwrap();
        assert_eq!(g.value(a.cnn_x), g.value(b.cnn_xp));
        assert_eq!(g.value(a.cnn_xp), g.value(b.cnn_x));
        assert_ne!(g.value(a.ete), g.value(b.ete));

        let (f, r) = sst_forward_pair(&mut g, &bound, &cfg, xv, xpv).unwrap();
        assert_eq!(g.value(f.logits), g.value(a.logits));
        assert_eq!(g.value(r.logits), g.value(b.logits));
    }

    #[test]
    fn zero_depth_logits_ignore_the_input() {
        let mut cfg = ModelConfig::toy();
        cfg.depth = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = ModelParams::init(&cfg, &mut rng);
        let x1 = random(&[2, cfg.seq_len, 1, cfg.samples_per_epoch], &mut rng);
        let x2 = random(&[2, cfg.seq_len, 1, cfg.samples_per_epoch], &mut rng);
        let mut g = Graph::new();
        let bound = p.bind_frozen(&mut g);
        let (a, b) = (g.constant(&x1), g.constant(&x2));
        let ta = sst_forward(&mut g, &bound, &cfg, a, a).unwrap();
        let tb = sst_forward(&mut g, &bound, &cfg, b, a).unwrap();
        assert_eq!(g.value(ta.logits), g.value(tb.logits));
        // ReLU(cls + PE[0] + PE_seq[s]) W_head
        let pe_tok = positional_encoding(cfg.tokens + 1, cfg.dim);
        let pe_seq = positional_encoding(cfg.seq_len, cfg.dim);
        for s in 0..cfg.seq_len {
            for c in 0..5 {
                let expect: f64 = (0..cfg.dim)
                    .map(|j| {
                        let h = p.class_token.data()[j] + pe_tok.at(&[0, j]) + pe_seq.at(&[s, j]);
                        h.max(0.0) * p.head.at(&[j, c])
                    })
                    .sum();
                assert!((g.value(ta.logits)[s * 5 + c] - expect).abs() < 1e-12);
            }
        }
    }
}
