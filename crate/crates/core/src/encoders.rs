//! Heterogeneous node feature construction: linear projection of canonical
//! geometry and a shared Micro-CNN over the three 32×32 texture patches.
//!
//! The Micro-CNN is conv3×3(3→8) → LeakyReLU → 2×2 max-pool → conv3×3(8→16)
//! → LeakyReLU → global average pool → linear(16→d), applied with one shared
//! weight set to every ROI of every frame. Pixels are scaled to [0,1] before
//! entering the graph. With d = 32 the encoder carries exactly 1936
//! parameters (224 + 1168 + 544).

use crate::autodiff::{Graph, NodeId};
use crate::datagen::{PATCH_BYTES, PATCH_CHANNELS, PATCH_SIDE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::LEAKY_SLOPE;

/// Graph nodes of the shared Micro-CNN parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub conv1_w: NodeId, // [8, 3, 3, 3]
    pub conv1_b: NodeId, // [1, 8]
    pub conv2_w: NodeId, // [16, 8, 3, 3]
    pub conv2_b: NodeId, // [1, 16]
    pub fc_w: NodeId,    // [16, d]
    pub fc_b: NodeId,    // [1, d]
}

pub const CONV1_OUT: usize = 8;
pub const CONV2_OUT: usize = 16;

/// Closed-form Micro-CNN parameter count for latent width `d`.
pub const fn encoder_param_count(d: usize) -> usize {
    CONV1_OUT * (PATCH_CHANNELS * 9 + 1) + CONV2_OUT * (CONV1_OUT * 9 + 1) + (CONV2_OUT * d + d)
}

/// Convert `count` raw HWC u8 patches into one `[count, 3, 32, 32]` tensor
/// scaled to [0,1].
pub fn patches_to_tensor(patches: &[u8], count: usize) -> Result<Tensor> {
    if patches.len() != count * PATCH_BYTES {
        return Err(Error::InvalidArgument(format!(
            "expected {count} patches of {PATCH_BYTES} bytes, got {} bytes",
            patches.len()
        )));
    }
    let hw = PATCH_SIDE * PATCH_SIDE;
    let mut data = vec![0.0; count * PATCH_CHANNELS * hw];
    for b in 0..count {
        let src = &patches[b * PATCH_BYTES..(b + 1) * PATCH_BYTES];
        for p in 0..hw {
            for c in 0..PATCH_CHANNELS {
                data[b * PATCH_CHANNELS * hw + c * hw + p] =
                    src[p * PATCH_CHANNELS + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(
        vec![count, PATCH_CHANNELS, PATCH_SIDE, PATCH_SIDE],
        data,
    ))
}

/// Encode a batch of patches (already a `[B, 3, 32, 32]` node) into `(B, d)`
/// texture features.
pub fn encode_patches(g: &mut Graph, patches: NodeId, p: &EncoderNodes) -> Result<NodeId> {
    let c1 = g.conv3x3(patches, p.conv1_w, p.conv1_b)?;
    let a1 = g.leaky_relu(c1, LEAKY_SLOPE);
    let pooled = g.max_pool2x2(a1)?;
    let c2 = g.conv3x3(pooled, p.conv2_w, p.conv2_b)?;
    let a2 = g.leaky_relu(c2, LEAKY_SLOPE);
    let gap = g.global_avg_pool(a2)?;
    let fc = g.matmul(gap, p.fc_w)?;
    g.add_row(fc, p.fc_b)
}

/// Project stacked canonical coordinates `(rows, 3)` into the latent space.
pub fn project_geo(g: &mut Graph, aligned: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let proj = g.matmul(aligned, w)?;
    g.add_row(proj, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_encoder(g: &mut Graph, d: usize) -> EncoderNodes {
        EncoderNodes {
            conv1_w: g.input(Tensor::zeros(&[CONV1_OUT, PATCH_CHANNELS, 3, 3])),
            conv1_b: g.input(Tensor::zeros(&[1, CONV1_OUT])),
            conv2_w: g.input(Tensor::zeros(&[CONV2_OUT, CONV1_OUT, 3, 3])),
            conv2_b: g.input(Tensor::zeros(&[1, CONV2_OUT])),
            fc_w: g.input(Tensor::zeros(&[CONV2_OUT, d])),
            fc_b: g.input(Tensor::zeros(&[1, d])),
        }
    }

    fn random_encoder(g: &mut Graph, d: usize, rng: &mut ChaCha8Rng, base: usize) -> EncoderNodes {

        let mut mk = |shape: &[usize], id: usize| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
            g.param(ParamId(base + id), Tensor::from_vec(shape.to_vec(), data))
        };
        EncoderNodes {
            conv1_w: mk(&[CONV1_OUT, PATCH_CHANNELS, 3, 3], 0),
            conv1_b: mk(&[1, CONV1_OUT], 1),
            conv2_w: mk(&[CONV2_OUT, CONV1_OUT, 3, 3], 2),
            conv2_b: mk(&[1, CONV2_OUT], 3),
            fc_w: mk(&[CONV2_OUT, d], 4),
            fc_b: mk(&[1, d], 5),
        }
    }

    #[test]
    fn parameter_count_closed_form() {
        assert_eq!(encoder_param_count(32), 1936);
        assert_eq!(encoder_param_count(32), 224 + 1168 + 544);
    }

    #[test]
    fn zero_patch_zero_params_give_zero() {
        let mut g = Graph::new();
        let patches = g.input(patches_to_tensor(&vec![0u8; PATCH_BYTES], 1).unwrap());
        let p = zero_encoder(&mut g, 5);
        let out = encode_patches(&mut g, patches, &p).unwrap();
        assert_eq!(g.shape(out), &[1, 5]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_patches_identical_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let patch: Vec<u8> = (0..PATCH_BYTES).map(|_| rng.random()).collect();
        let two: Vec<u8> = patch.iter().chain(patch.iter()).copied().collect();
        let mut g = Graph::new();
        let patches = g.input(patches_to_tensor(&two, 2).unwrap());
        let p = random_encoder(&mut g, 4, &mut rng, 0);
        let out = encode_patches(&mut g, patches, &p).unwrap();
        let d = g.value(out).cols();
        for j in 0..d {
            assert_eq!(g.value(out).data()[j], g.value(out).data()[d + j]);
        }
    }

    #[test]
    fn uniform_patch_rotation_invariant() {
        // Constant input: convs see the same value everywhere (up to border
        // effects identical under 90-degree rotation) and global pooling
        // removes position, so the embedding matches its rotation exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let uniform = vec![137u8; PATCH_BYTES];
        // 90-degree rotation of a uniform patch is itself; use both anyway.
        let rotated = uniform.clone();
        let both: Vec<u8> = uniform.iter().chain(rotated.iter()).copied().collect();
        let mut g = Graph::new();
        let patches = g.input(patches_to_tensor(&both, 2).unwrap());
        let p = random_encoder(&mut g, 4, &mut rng, 0);
        let out = encode_patches(&mut g, patches, &p).unwrap();
        let d = g.value(out).cols();
        for j in 0..d {
            assert_eq!(g.value(out).data()[j], g.value(out).data()[d + j]);
        }
    }

    #[test]
    fn projection_identity_map() {
        let mut g = Graph::new();
        let pts = g.input(Tensor::from_vec(
            vec![2, 3],
            vec![0.1, 0.2, 0.3, -0.4, -0.5, -0.6],
        ));
        let w = g.input(Tensor::from_vec(
            vec![3, 3],
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
        ));
        let b = g.input(Tensor::zeros(&[1, 3]));
        let out = project_geo(&mut g, pts, w, b).unwrap();
        assert_eq!(g.value(out).data(), g.value(pts).data());
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let patch: Vec<u8> = (0..PATCH_BYTES).map(|_| rng.random()).collect();
        let mut g = Graph::new();
        let patches = g.input(patches_to_tensor(&patch, 1).unwrap());
        let p = random_encoder(&mut g, 4, &mut rng, 0);
        let emb = encode_patches(&mut g, patches, &p).unwrap();
        let sq = g.mul(emb, emb).unwrap();
        let loss = g.sum_all(sq);
        let report = crate::gradcheck::check_gradients(&mut g, loss, 1e-5, 1e-4).unwrap();
        assert!(report.all_pass(), "worst {}", report.worst());
    }

    #[test]
    fn projection_gradients_pass_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let mut g = Graph::new();
        let pts = g.input(Tensor::from_vec(
            vec![5, 3],
            (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ));
        let w = g.param(
            ParamId(0),
            Tensor::from_vec(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()),
        );
        let b = g.param(
            ParamId(1),
            Tensor::from_vec(vec![1, 4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()),
        );
        let out = project_geo(&mut g, pts, w, b).unwrap();
        let sq = g.mul(out, out).unwrap();
        let loss = g.sum_all(sq);
        let report = crate::gradcheck::check_gradients(&mut g, loss, 1e-5, 1e-4).unwrap();
        assert!(report.all_pass(), "worst {}", report.worst());
    }
}
