//! Node-to-frame and frame-to-clip pooling.
//!
//! Spatial: adaptive attention over the 68 enriched geo nodes of each frame,
//! `e_i = w_a^T tanh(W_a x_i + b_a)`, softmax-normalized per frame, weighted
//! sum into one frame vector. Temporal: global max over frames per output
//! channel, recording the (first) argmax index per channel; the normalized
//! histogram of those indices is the temporal contribution density.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Graph nodes of the attention scorer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub w_a: NodeId, // (d_out, d_a)
    pub b_a: NodeId, // (1, d_a)
    pub w_v: NodeId, // (d_a, 1)
}

/// Attention-pool `frames` blocks of `nodes_per_frame` rows.
///
/// `x` is `(frames * nodes_per_frame, d_out)`; returns the pooled frame
/// features `(frames, d_out)` and the attention weights `(frames,
/// nodes_per_frame)` (each row sums to 1).
pub fn attention_pool_frames(
    g: &mut Graph,
    x: NodeId,
    frames: usize,
    nodes_per_frame: usize,
    p: &AttentionNodes,
) -> Result<(NodeId, NodeId)> {
    let rows = g.shape(x)[0];
    if rows != frames * nodes_per_frame {
        return Err(Error::InvalidArgument(format!(
            "attention_pool: {rows} rows != {frames} frames * {nodes_per_frame} nodes"
        )));
    }
    let hidden = g.matmul(x, p.w_a)?;
    let hidden = g.add_row(hidden, p.b_a)?;
    let hidden = g.tanh(hidden);
    let scores = g.matmul(hidden, p.w_v)?; // (frames * nodes, 1)
    let scores = g.reshape(scores, &[frames, nodes_per_frame])?;
    let alphas = g.softmax_rows(scores)?;
    let pooled = g.segment_weighted_sum(alphas, x)?;
    Ok((pooled, alphas))
}

/// Single-frame attention pooling: `(z, alphas)` for one 68-node frame.
pub fn attention_pool(
    g: &mut Graph,
    x_geo: NodeId,
    p: &AttentionNodes,
) -> Result<(NodeId, NodeId)> {
    let nodes = g.shape(x_geo)[0];
    attention_pool_frames(g, x_geo, 1, nodes, p)
}

/// Per-channel temporal argmax bookkeeping of the clip max pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyRecord {
    /// First argmax frame per output channel.
    pub argmax: Vec<usize>,
    /// Histogram of argmax counts over frames, normalized to sum 1.
    pub density: Vec<f64>,
}

impl SaliencyRecord {
    pub fn from_argmax(argmax: Vec<usize>, frames: usize) -> Self {
        let mut density = vec![0.0; frames];
        for &t in &argmax {
            density[t] += 1.0;
        }
        let inv = 1.0 / argmax.len() as f64;
        for v in &mut density {
            *v *= inv;
        }
        SaliencyRecord { argmax, density }
    }
}

/// Global temporal max pooling of `(T, d_out)` into `(1, d_out)`, plus the
/// saliency record of which frame won each channel.
pub fn temporal_max_pool(g: &mut Graph, y_bi: NodeId) -> Result<(NodeId, SaliencyRecord)> {
    let frames = g.shape(y_bi)[0];
    let pooled = g.max_rows(y_bi)?;
    let argmax: Vec<usize> = g
        .argmax_of(pooled)
        .expect("max_rows records argmax")
        .iter()
        .map(|&v| v as usize)
        .collect();
    Ok((pooled, SaliencyRecord::from_argmax(argmax, frames)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_attention(
        g: &mut Graph,
        d_out: usize,
        d_a: usize,
        rng: &mut ChaCha8Rng,
    ) -> AttentionNodes {
        let mut mk = |shape: &[usize], id: usize| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            g.param(ParamId(id), Tensor::from_vec(shape.to_vec(), data))
        };
        AttentionNodes {
            w_a: mk(&[d_out, d_a], 0),
            b_a: mk(&[1, d_a], 1),
            w_v: mk(&[d_a, 1], 2),
        }
    }

    #[test]
    fn identical_nodes_give_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let d_out = 6;
        let row: Vec<f64> = (0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(
            vec![68, d_out],
            (0..68).flat_map(|_| row.clone()).collect(),
        ));
        let p = random_attention(&mut g, d_out, 4, &mut rng);
        let (z, alphas) = attention_pool(&mut g, x, &p).unwrap();
        for &a in g.value(alphas).data() {
            assert!((a - 1.0 / 68.0).abs() < 1e-12);
        }
        for (zv, xv) in g.value(z).data().iter().zip(&row) {
            assert!((zv - xv).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scorer_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let d_out = 5;
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(
            vec![68, d_out],
            (0..68 * d_out).map(|_| rng.random_range(-2.0..2.0)).collect(),
        ));
        let p = AttentionNodes {
            w_a: g.input(Tensor::from_vec(
                vec![d_out, 3],
                (0..d_out * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )),
            b_a: g.input(Tensor::from_vec(
                vec![1, 3],
                vec![0.3, -0.2, 0.9],
            )),
            w_v: g.input(Tensor::zeros(&[3, 1])), // w_a = 0 -> constant scores
        };
        let (_, alphas) = attention_pool(&mut g, x, &p).unwrap();
        for &a in g.value(alphas).data() {
            assert!((a - 1.0 / 68.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_direct_evaluation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (d_out, d_a, nodes) = (5, 4, 68);
        let x: Vec<f64> = (0..nodes * d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_a: Vec<f64> = (0..d_out * d_a).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b_a: Vec<f64> = (0..d_a).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_v: Vec<f64> = (0..d_a).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let xn = g.input(Tensor::from_vec(vec![nodes, d_out], x.clone()));
        let p = AttentionNodes {
            w_a: g.input(Tensor::from_vec(vec![d_out, d_a], w_a.clone())),
            b_a: g.input(Tensor::from_vec(vec![1, d_a], b_a.clone())),
            w_v: g.input(Tensor::from_vec(vec![d_a, 1], w_v.clone())),
        };
        let (z, alphas) = attention_pool(&mut g, xn, &p).unwrap();

        // Direct evaluation of the published rule.
        let mut scores = vec![0.0; nodes];
        for i in 0..nodes {
            let mut e = 0.0;
            for a in 0..d_a {
                let mut pre = b_a[a];
                for q in 0..d_out {
                    pre += x[i * d_out + q] * w_a[q * d_a + a];
                }
                e += w_v[a] * pre.tanh();
            }
            scores[i] = e;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let expect_alpha: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let mut expect_z = vec![0.0; d_out];
        for i in 0..nodes {
            for q in 0..d_out {
                expect_z[q] += expect_alpha[i] * x[i * d_out + q];
            }
        }

        let alpha_sum: f64 = g.value(alphas).data().iter().sum();
        assert!((alpha_sum - 1.0).abs() < 1e-9);
        for (a, b) in g.value(alphas).data().iter().zip(&expect_alpha) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(z).data().iter().zip(&expect_z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let d_out = 4;
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(
            vec![10, d_out],
            (0..10 * d_out).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let p = random_attention(&mut g, d_out, 3, &mut rng);
        let (z, _) = attention_pool_frames(&mut g, x, 2, 5, &p).unwrap();
        let sq = g.mul(z, z).unwrap();
        let loss = g.sum_all(sq);
        let report = crate::gradcheck::check_gradients(&mut g, loss, 1e-5, 1e-4).unwrap();
        assert!(report.all_pass(), "worst {}", report.worst());
    }

    #[test]
    fn temporal_max_single_frame() {
        let mut g = Graph::new();
        let y = g.input(Tensor::from_vec(vec![1, 4], vec![0.5, -1.0, 2.0, 0.0]));
        let (pooled, saliency) = temporal_max_pool(&mut g, y).unwrap();
        assert_eq!(g.value(pooled).data(), &[0.5, -1.0, 2.0, 0.0]);
        assert_eq!(saliency.density, vec![1.0]);
    }

    #[test]
    fn temporal_max_is_permutation_free_and_dominates_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let (t, d) = (12, 6);
        let data: Vec<f64> = (0..t * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut perm: Vec<usize> = (0..t).collect();
        for i in (1..t).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| data[i * d..(i + 1) * d].to_vec())
            .collect();

        let run = |vals: Vec<f64>| -> Vec<f64> {
            let mut g = Graph::new();
            let y = g.input(Tensor::from_vec(vec![t, d], vals));
            let (pooled, _) = temporal_max_pool(&mut g, y).unwrap();
            g.value(pooled).data().to_vec()
        };
        assert_eq!(run(data.clone()), run(permuted));

        // max >= mean per channel
        let maxed = run(data.clone());
        for c in 0..d {
            let mean: f64 = (0..t).map(|i| data[i * d + c]).sum::<f64>() / t as f64;
            assert!(maxed[c] >= mean);
        }
    }

    #[test]
    fn dominant_row_concentrates_density() {
        let t = 8;
        let d = 5;
        let mut data = vec![0.0; t * d];
        for c in 0..d {
            data[3 * d + c] = 10.0; // row 3 dominates every channel
        }
        let mut g = Graph::new();
        let y = g.input(Tensor::from_vec(vec![t, d], data));
        let (_, saliency) = temporal_max_pool(&mut g, y).unwrap();
        assert_eq!(saliency.density[3], 1.0);
        assert!((saliency.density.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(saliency.argmax.iter().all(|&a| a == 3));
    }
}
