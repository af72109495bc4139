//! Similarity Procrustes alignment of 68-point landmark frames.
//!
//! Rigid head pose (rotation, translation, uniform scale) is removed by
//! aligning each raw frame to a fixed frontal canonical template in closed
//! form: center both point sets, take the SVD of the 3×3 cross-covariance,
//! correct the determinant sign so the rotation is proper, and recover scale
//! from the trace. Points are rows; the rotation multiplies on the right
//! (`aligned = c * P * R + t`).

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

pub const NUM_LANDMARKS: usize = 68;

/// One raw capture frame: 68 landmark rows of (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    points: Vec<[f64; 3]>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidArgument(format!(
                "landmark frame needs {NUM_LANDMARKS} rows, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "landmark frame".into(),
            });
        }
        Ok(LandmarkFrame { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
}

/// Frontal canonical template: centered, unit Frobenius norm.
#[derive(Debug, Clone)]
pub struct CanonicalTemplate {
    points: Vec<[f64; 3]>,
}

impl CanonicalTemplate {
    /// Validate an already-normalized point set.
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidArgument(format!(
                "template needs {NUM_LANDMARKS} rows, got {}",
                points.len()
            )));
        }
        let mean = centroid(&points);
        if mean.iter().any(|m| m.abs() > 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "template is not centered: mean {mean:?}"
            )));
        }
        let norm = frob_norm(&points);
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "template is not unit-norm: |P|_F = {norm}"
            )));
        }
        Ok(CanonicalTemplate { points })
    }

    /// Center and scale an arbitrary 68-point set into template form.
    pub fn from_raw(points: &[[f64; 3]]) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::InvalidArgument(format!(
                "template needs {NUM_LANDMARKS} rows, got {}",
                points.len()
            )));
        }
        let mean = centroid(points);
        let mut centered: Vec<[f64; 3]> = points
            .iter()
            .map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]])
            .collect();
        let norm = frob_norm(&centered);
        if norm <= 1e-12 {
            return Err(Error::RankDeficientFrame { frame: None });
        }
        for p in &mut centered {
            for v in p.iter_mut() {
                *v /= norm;
            }
        }
        CanonicalTemplate::new(centered)
    }

    /// Parse the shipped template format: 68 lines of three floats.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for (lineno, line) in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
        {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!(
                            "template line {}: bad float {tok:?}",
                            lineno + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "template line {}: expected 3 values, got {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        CanonicalTemplate::new(points)
    }

    /// Read a template file from disk.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        CanonicalTemplate::parse(&text)
    }

    /// The template shipped with the crate (the neutral synthetic face,
    /// centered and normalized).
    pub fn builtin() -> Self {
        CanonicalTemplate::parse(include_str!("../data/canonical_face.txt"))
            .expect("shipped template is valid")
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
}

/// Recovered similarity transform `aligned = scale * P * rotation + translation`.
#[derive(Debug, Clone)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    /// Orthonormality and determinant check used by tests and callers that
    /// persist transforms.
    pub fn is_proper_rotation(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        let id = Matrix3::identity();
        let ortho = (rtr - id).norm() <= tol;
        let det = (self.rotation.determinant() - 1.0).abs() <= tol;
        ortho && det && self.scale > 0.0
    }

    pub fn apply(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        points
            .iter()
            .map(|p| {
                let v = Vector3::new(p[0], p[1], p[2]);
                let out = self.scale * self.rotation.transpose() * v + self.translation;
                [out[0], out[1], out[2]]
            })
            .collect()
    }
}

fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for p in points {
        for k in 0..3 {
            m[k] += p[k];
        }
    }
    for v in &mut m {
        *v /= points.len() as f64;
    }
    m
}

fn frob_norm(points: &[[f64; 3]]) -> f64 {
    points
        .iter()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Closed-form similarity Procrustes of one frame onto the template.
///
/// Returns the optimal transform, the aligned 68×3 point set, and the
/// Frobenius residual to the template.
pub fn procrustes_align(
    frame: &LandmarkFrame,
    template: &CanonicalTemplate,
) -> Result<(SimilarityTransform, Vec<[f64; 3]>, f64)> {
    let p = frame.points();
    let q = template.points();

    let mu_p = centroid(p);
    let mu_q = centroid(q);

    let pc: Vec<[f64; 3]> = p
        .iter()
        .map(|r| [r[0] - mu_p[0], r[1] - mu_p[1], r[2] - mu_p[2]])
        .collect();
    let p_norm_sq: f64 = pc.iter().flatten().map(|v| v * v).sum();
    if p_norm_sq <= 1e-24 {
        return Err(Error::RankDeficientFrame { frame: None });
    }

    // Cross-covariance M = Pc^T Qc (3x3).
    let mut m = Matrix3::<f64>::zeros();
    for (rp, rq) in pc.iter().zip(q.iter()) {
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] += rp[i] * (rq[j] - mu_q[j]);
            }
        }
    }

    let svd = m.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let mut d = Matrix3::identity();
    // Force det(R) = +1: reflections are not admissible poses.
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // R maximizes tr(R^T M); row-vector convention applies it on the right.
    let r = u * d * v_t;

    let trace_term = (svd.singular_values[0] * d[(0, 0)])
        + (svd.singular_values[1] * d[(1, 1)])
        + (svd.singular_values[2] * d[(2, 2)]);
    let scale = trace_term / p_norm_sq;
    if scale <= 0.0 {
        return Err(Error::RankDeficientFrame { frame: None });
    }

    let mu_p_v = Vector3::new(mu_p[0], mu_p[1], mu_p[2]);
    let mu_q_v = Vector3::new(mu_q[0], mu_q[1], mu_q[2]);
    // aligned_row = c * row * R + t  ==  c * R^T * col + t in column form.
    let translation = mu_q_v - scale * r.transpose() * mu_p_v;

    let transform = SimilarityTransform {
        scale,
        rotation: r,
        translation,
    };
    let aligned = transform.apply(p);

    let mut residual = 0.0;
    for (a, b) in aligned.iter().zip(q.iter()) {
        for k in 0..3 {
            let d = a[k] - b[k];
            residual += d * d;
        }
    }
    Ok((transform, aligned, residual.sqrt()))
}

/// Align every frame independently; errors carry the frame index.
pub fn align_sequence(
    frames: &[LandmarkFrame],
    template: &CanonicalTemplate,
) -> Result<Vec<Vec<[f64; 3]>>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("align_sequence: empty input".into()));
    }
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            procrustes_align(f, template)
                .map(|(_, aligned, _)| aligned)
                .map_err(|e| match e {
                    Error::RankDeficientFrame { .. } => {
                        Error::RankDeficientFrame { frame: Some(i) }
                    }
                    other => other,
                })
        })
        .collect()
}
