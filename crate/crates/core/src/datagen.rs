//! Synthetic labeled clip generator and the `HSTD` dataset container.
//!
//! Replaces the upstream video/landmark pipeline with a parametric face:
//! a neutral 68-point template is animated per class (normal: jitter plus
//! brief blinks; talking: fast mouth oscillation; yawning: slow large
//! ramp-apex-release events with concurrent eye narrowing), buried under a
//! per-frame random rigid-plus-scale transform so alignment is load-bearing,
//! and paired with procedurally rendered 32×32 RGB patches whose mean
//! intensity and dark interior ellipse track the region's aperture.
//!
//! Every sequence is generated from its own RNG stream derived from
//! `(seed, sequence index)`, so generation is order-independent and
//! reproducible clip by clip.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const PATCH_SIDE: usize = 32;
pub const PATCH_CHANNELS: usize = 3;
pub const PATCH_BYTES: usize = PATCH_SIDE * PATCH_SIDE * PATCH_CHANNELS;
pub const ROIS: usize = 3; // left eye, right eye, mouth

/// Behavior class of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassLabel {
    Normal = 0,
    Talking = 1,
    Yawning = 2,
}

impl ClassLabel {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ClassLabel::Normal),
            1 => Ok(ClassLabel::Talking),
            2 => Ok(ClassLabel::Yawning),
            _ => Err(Error::InvalidArgument(format!("label {v} out of range"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::Talking => "talking",
            ClassLabel::Yawning => "yawning",
        }
    }
}

pub const NUM_CLASSES: usize = 3;

/// Generator configuration.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_sequences: usize,
    /// Raw frames per clip before sparse sampling.
    pub frames_per_clip: usize,
    /// Nominal capture rate; class oscillation frequencies are in Hz.
    pub fps: f64,
    /// normal / talking / yawning fractions, summing to 1.
    pub class_mix: [f64; 3],
    pub subjects: usize,
    /// Landmark jitter sigma in template units; also scales patch pixel noise.
    pub noise_scale: f64,
    /// Max per-frame rotation angle (radians) of the random head pose.
    pub rigid_amplitude: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sequences: 600,
            frames_per_clip: 640,
            fps: 20.0,
            class_mix: [0.5, 0.25, 0.25],
            subjects: 30,
            noise_scale: 0.06,
            rigid_amplitude: 0.4,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_sequences == 0 || self.frames_per_clip == 0 || self.subjects == 0 {
            return Err(Error::InvalidArgument("synth config needs positive counts".into()));
        }
        let s: f64 = self.class_mix.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|&m| m < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "class mix must be nonnegative and sum to 1, got {:?}",
                self.class_mix
            )));
        }
        if self.fps <= 0.0 || self.noise_scale < 0.0 || self.rigid_amplitude < 0.0 {
            return Err(Error::InvalidArgument("synth config rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A labeled event inside a generated clip (raw frame indices, half-open).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventSpan {
    pub kind: EventKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Blink,
    Yawn,
}

/// One generated raw sequence. Landmarks are stored at the container's f32
/// precision so in-memory use and file round-trips see identical data.
#[derive(Debug, Clone)]
pub struct RawSequence {
    pub label: ClassLabel,
    pub subject_id: u32,
    pub n_frames: usize,
    /// `n_frames * 68 * 3` row-major.
    pub landmarks: Vec<f32>,
    /// `n_frames * 3 * PATCH_BYTES`, ROI order left eye / right eye / mouth.
    pub patches: Vec<u8>,
    /// Ground-truth spans; kept in memory only, never serialized.
    pub events: Vec<EventSpan>,
}

// ── Neutral template ─────────────────────────────────────────────────

/// The neutral 68-point face in raw template units (half-width 8), Dlib-68
/// ordering: jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth 48-67.
pub fn neutral_template() -> Vec<[f64; 3]> {
    let mut p = Vec::with_capacity(68);
    // Jaw arc.
    for i in 0..17 {
        let u = i as f64 / 16.0;
        let a = std::f64::consts::PI * u;
        p.push([-8.0 * a.cos(), 2.2 - 9.8 * a.sin(), -1.2 + 2.0 * a.sin()]);
    }
    // Brows.
    for i in 0..5 {
        let x = -6.4 + 1.2 * i as f64;
        let lift = 0.5 * (std::f64::consts::PI * i as f64 / 4.0).sin();
        p.push([x, 3.4 + lift, 0.6]);
    }
    for i in 0..5 {
        let x = 1.6 + 1.2 * i as f64;
        let lift = 0.5 * (std::f64::consts::PI * i as f64 / 4.0).sin();
        p.push([x, 3.4 + lift, 0.6]);
    }
    // Nose bridge and base.
    for i in 0..4 {
        p.push([0.0, 2.6 - 0.875 * i as f64, 1.0 + 0.4 * i as f64]);
    }
    p.push([-1.2, -1.1, 1.4]);
    p.push([-0.6, -1.25, 1.6]);
    p.push([0.0, -1.3, 1.7]);
    p.push([0.6, -1.25, 1.6]);
    p.push([1.2, -1.1, 1.4]);
    // Eyes (aperture baseline 0.8).
    let eye = |cx: f64| -> Vec<[f64; 3]> {
        vec![
            [cx - 1.3, 1.8, 0.50],
            [cx - 0.5, 2.2, 0.55],
            [cx + 0.5, 2.2, 0.55],
            [cx + 1.3, 1.8, 0.50],
            [cx + 0.5, 1.4, 0.55],
            [cx - 0.5, 1.4, 0.55],
        ]
    };
    p.extend(eye(-4.0));
    p.extend(eye(4.0));
    // Outer lips.
    p.push([-2.6, -4.40, 1.00]);
    p.push([-1.8, -3.70, 1.05]);
    p.push([-0.9, -3.45, 1.10]);
    p.push([0.0, -3.40, 1.12]);
    p.push([0.9, -3.45, 1.10]);
    p.push([1.8, -3.70, 1.05]);
    p.push([2.6, -4.40, 1.00]);
    p.push([1.8, -5.10, 1.05]);
    p.push([0.9, -5.30, 1.10]);
    p.push([0.0, -5.35, 1.12]);
    p.push([-0.9, -5.30, 1.10]);
    p.push([-1.8, -5.10, 1.05]);
    // Inner lips, near closed (gap 0.2).
    p.push([-2.0, -4.40, 1.05]);
    p.push([-0.8, -4.32, 1.10]);
    p.push([0.0, -4.30, 1.12]);
    p.push([0.8, -4.32, 1.10]);
    p.push([2.0, -4.40, 1.05]);
    p.push([0.8, -4.48, 1.10]);
    p.push([0.0, -4.50, 1.12]);
    p.push([-0.8, -4.48, 1.10]);
    debug_assert_eq!(p.len(), 68);
    p
}

/// Nominal template half-width; class amplitudes are relative to this.
pub const FACE_SCALE: f64 = 8.0;

/// Vertical inner-lip distance, the mouth aperture statistic.
pub fn mouth_aperture(points: &[[f64; 3]]) -> f64 {
    points[62][1] - points[66][1]
}

/// Mean eyelid separation over both eyes.
pub fn eye_openness(points: &[[f64; 3]]) -> f64 {
    let left = (points[37][1] + points[38][1] - points[40][1] - points[41][1]) / 2.0;
    let right = (points[43][1] + points[44][1] - points[46][1] - points[47][1]) / 2.0;
    (left + right) / 2.0
}

// ── Animation ────────────────────────────────────────────────────────

fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(tag.rotate_left(17))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

struct SubjectShape {
    points: Vec<[f64; 3]>,
    scale: f64,
    tint: [i16; 3],
}

fn subject_shape(cfg: &SynthConfig, subject_id: u32) -> SubjectShape {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x53554246, subject_id as u64));
    let scale = 1.0 + rng.random_range(-0.12..0.12);
    let base = neutral_template();
    let points = base
        .iter()
        .map(|p| {
            [
                (p[0] + rng.random_range(-0.15..0.15)) * scale,
                (p[1] + rng.random_range(-0.15..0.15)) * scale,
                (p[2] + rng.random_range(-0.10..0.10)) * scale,
            ]
        })
        .collect();
    let tint = [
        rng.random_range(-12..=12),
        rng.random_range(-12..=12),
        rng.random_range(-12..=12),
    ];
    SubjectShape { points, scale, tint }
}

/// Mouth opening displacement field for aperture `a` (template units).
fn apply_mouth(points: &mut [[f64; 3]], a: f64) {
    for i in 61..=63 {
        points[i][1] += 0.18 * a;
    }
    for i in 65..=67 {
        points[i][1] -= 0.82 * a;
    }
    for i in 49..=53 {
        points[i][1] += 0.12 * a;
    }
    for i in 55..=59 {
        points[i][1] -= 0.75 * a;
    }
    for i in [48, 54, 60, 64] {
        points[i][1] -= 0.25 * a;
    }
    points[8][1] -= 0.60 * a;
    points[7][1] -= 0.50 * a;
    points[9][1] -= 0.50 * a;
    points[6][1] -= 0.30 * a;
    points[10][1] -= 0.30 * a;
    points[5][1] -= 0.12 * a;
    points[11][1] -= 0.12 * a;
}

/// Eyelid displacement; `openness` in [0,1], 1 fully open.
fn apply_eyes(points: &mut [[f64; 3]], openness: f64, scale: f64) {
    let shift = 0.4 * (1.0 - openness) * scale;
    for i in [37, 38, 43, 44] {
        points[i][1] -= shift;
    }
    for i in [40, 41, 46, 47] {
        points[i][1] += shift;
    }
}

/// Smooth 0→1→0 envelope over [0, 1].
fn bump(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        0.0
    } else {
        0.5 * (1.0 - (2.0 * std::f64::consts::PI * u).cos())
    }
}

struct FrameSignal {
    mouth: f64,        // aperture in template units (pre subject scale)
    eye_openness: f64, // [0, 1]
}

struct ClipScript {
    /// Per raw frame signals.
    signals: Vec<FrameSignal>,
    events: Vec<EventSpan>,
}

fn script_clip(label: ClassLabel, n: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> ClipScript {
    let mut signals: Vec<FrameSignal> = (0..n)
        .map(|_| FrameSignal {
            mouth: 0.0,
            eye_openness: 1.0,
        })
        .collect();
    let mut events = Vec::new();

    // Blinks appear in normal clips (1-3 of them, 4-8 frames).
    if label == ClassLabel::Normal {
        let blinks = rng.random_range(1..=3);
        for _ in 0..blinks {
            let width = rng.random_range(4..=8);
            let start = rng.random_range(0..n.saturating_sub(width).max(1));
            let depth = rng.random_range(0.85..0.95);
            for t in start..(start + width).min(n) {
                let u = (t - start) as f64 / width as f64;
                let o = 1.0 - depth * bump(u);
                signals[t].eye_openness = signals[t].eye_openness.min(o);
            }
            events.push(EventSpan {
                kind: EventKind::Blink,
                start,
                end: (start + width).min(n),
            });
        }
    }

    match label {
        ClassLabel::Normal => {}
        ClassLabel::Talking => {
            // 3-6 Hz oscillation with wandering phase and per-clip amplitude
            // at most 0.15 of face scale.
            let amp = FACE_SCALE * 0.15 * rng.random_range(0.80..1.0);
            let mut phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut freq = rng.random_range(3.0..6.0);
            for t in 0..n {
                phase += std::f64::consts::TAU * freq / cfg.fps
                    + rng.random_range(-0.35..0.35);
                if rng.random_range(0.0..1.0) < 0.05 {
                    freq = rng.random_range(3.0..6.0);
                }
                signals[t].mouth = amp * 0.5 * (1.0 + phase.sin());
            }
        }
        ClassLabel::Yawning => {
            let n_events = rng.random_range(1..=2);
            let mut cursor = rng.random_range(0..n / 3);
            for _ in 0..n_events {
                let span = rng.random_range(30..=60.min(n.max(31) - 1));
                if cursor + span >= n {
                    break;
                }
                let amp = FACE_SCALE * 0.6 * rng.random_range(1.0..1.15);
                // ramp 30%, apex 40%, release 30%
                for t in 0..span {
                    let u = t as f64 / span as f64;
                    let env = if u < 0.3 {
                        u / 0.3
                    } else if u < 0.7 {
                        1.0
                    } else {
                        (1.0 - u) / 0.3
                    };
                    let env = env.clamp(0.0, 1.0);
                    let f = &mut signals[cursor + t];
                    f.mouth = f.mouth.max(amp * env);
                    f.eye_openness = f.eye_openness.min(1.0 - 0.6 * env);
                }
                events.push(EventSpan {
                    kind: EventKind::Yawn,
                    start: cursor,
                    end: cursor + span,
                });
                cursor += span + rng.random_range(40..120.max(41));
                if cursor >= n {
                    break;
                }
            }
            // A yawning clip must contain at least one event.
            if events.iter().all(|e| e.kind != EventKind::Yawn) {
                let span = 40.min(n.saturating_sub(1)).max(1);
                let start = (n - span) / 2;
                let amp = FACE_SCALE * 0.6 * 1.05;
                for t in 0..span {
                    let u = t as f64 / span as f64;
                    let env = bump(u);
                    signals[start + t].mouth = amp * env;
                    signals[start + t].eye_openness = 1.0 - 0.6 * env;
                }
                events.push(EventSpan {
                    kind: EventKind::Yawn,
                    start,
                    end: start + span,
                });
            }
        }
    }

    ClipScript { signals, events }
}

// ── Patch rendering ──────────────────────────────────────────────────

/// Render one 32×32×3 patch. `aperture` in [0,1] means pupil visibility for
/// eyes and mouth-cavity size for the mouth.
fn render_patch(
    out: &mut [u8],
    is_mouth: bool,
    aperture: f64,
    tint: [i16; 3],
    noise_amp: i16,
    rng: &mut ChaCha8Rng,
) {
    debug_assert_eq!(out.len(), PATCH_BYTES);
    let a = aperture.clamp(0.0, 1.0);
    let (bg, fg, rx, ry) = if is_mouth {
        (185.0 - 40.0 * a, 35.0, 12.0, 2.0 + 12.0 * a)
    } else {
        (150.0 + 30.0 * (1.0 - a), 45.0, 11.0, 2.0 + 9.0 * a)
    };
    let (cx, cy) = (
        15.5 + rng.random_range(-1.0..1.0),
        15.5 + rng.random_range(-1.0..1.0),
    );
    let ch_off = [tint[0] + 8, tint[1], tint[2] - 8];

    let mut noise_word = 0u64;
    let mut noise_left = 0u8;
    let span = (2 * noise_amp + 1) as u64;

    for py in 0..PATCH_SIDE {
        for px in 0..PATCH_SIDE {
            let dx = (px as f64 - cx) / rx;
            let dy = (py as f64 - cy) / ry;
            let inside = dx * dx + dy * dy <= 1.0;
            let base = if inside { fg } else { bg };
            let idx = (py * PATCH_SIDE + px) * PATCH_CHANNELS;
            for c in 0..PATCH_CHANNELS {
                let noise = if noise_amp == 0 {
                    0i16
                } else {
                    if noise_left == 0 {
                        noise_word = rng.random::<u64>();
                        noise_left = 8;
                    }
                    let byte = (noise_word & 0xFF) as u64;
                    noise_word >>= 8;
                    noise_left -= 1;
                    (byte % span) as i16 - noise_amp
                };
                let v = base as i16 + ch_off[c] + noise;
                out[idx + c] = v.clamp(0, 255) as u8;
            }
        }
    }
}

// ── Sequence generation ──────────────────────────────────────────────

/// Generate one raw sequence from the stream `(cfg.seed, seq_index)`.
pub fn generate_sequence(
    label: ClassLabel,
    subject_id: u32,
    cfg: &SynthConfig,
    seq_index: u64,
) -> RawSequence {
    let n = cfg.frames_per_clip;
    let subject = subject_shape(cfg, subject_id);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x53455121, seq_index));
    let script = script_clip(label, n, cfg, &mut rng);

    let noise_amp = ((cfg.noise_scale * 80.0).round() as i16).clamp(0, 120);
    let mut landmarks = Vec::with_capacity(n * 68 * 3);
    let mut patches = vec![0u8; n * ROIS * PATCH_BYTES];

    for (t, sig) in script.signals.iter().enumerate() {
        // Canonical expression frame in subject units.
        let mut pts = subject.points.clone();
        apply_mouth(&mut pts, sig.mouth * subject.scale);
        apply_eyes(&mut pts, sig.eye_openness, subject.scale);
        if cfg.noise_scale > 0.0 {
            for p in &mut pts {
                for v in p.iter_mut() {
                    *v += rng.random_range(-1.0..1.0) * cfg.noise_scale;
                }
            }
        }

        // Random rigid + scale head pose, independent per frame.
        let (ca, cb, cc) = (
            rng.random_range(-cfg.rigid_amplitude..=cfg.rigid_amplitude),
            rng.random_range(-cfg.rigid_amplitude..=cfg.rigid_amplitude),
            rng.random_range(-cfg.rigid_amplitude..=cfg.rigid_amplitude),
        );
        let scale = rng.random_range(0.8..1.25);
        let tx = rng.random_range(-10.0..10.0);
        let ty = rng.random_range(-10.0..10.0);
        let tz = rng.random_range(-10.0..10.0);
        let (sa, caa) = (ca.sin(), ca.cos());
        let (sb, cbb) = (cb.sin(), cb.cos());
        let (sc, ccc) = (cc.sin(), cc.cos());
        for p in &pts {
            // Rz(cc) * Ry(cb) * Rx(ca) applied to the column vector.
            let (x0, y0, z0) = (p[0], p[1], p[2]);
            let y1 = caa * y0 - sa * z0;
            let z1 = sa * y0 + caa * z0;
            let x2 = cbb * x0 + sb * z1;
            let z2 = -sb * x0 + cbb * z1;
            let x3 = ccc * x2 - sc * y1;
            let y3 = sc * x2 + ccc * y1;
            landmarks.push((scale * x3 + tx) as f32);
            landmarks.push((scale * y3 + ty) as f32);
            landmarks.push((scale * z2 + tz) as f32);
        }

        // ROI patches: normalized apertures.
        let eye_a = 1.0 - sig.eye_openness; // pupil hidden when closed
        let eye_open = 1.0 - eye_a; // visibility of the dark pupil
        let mouth_a = (sig.mouth / (0.8 * FACE_SCALE)).clamp(0.0, 1.0);
        let base = t * ROIS * PATCH_BYTES;
        render_patch(
            &mut patches[base..base + PATCH_BYTES],
            false,
            eye_open,
            subject.tint,
            noise_amp,
            &mut rng,
        );
        render_patch(
            &mut patches[base + PATCH_BYTES..base + 2 * PATCH_BYTES],
            false,
            eye_open,
            subject.tint,
            noise_amp,
            &mut rng,
        );
        render_patch(
            &mut patches[base + 2 * PATCH_BYTES..base + 3 * PATCH_BYTES],
            true,
            mouth_a,
            subject.tint,
            noise_amp,
            &mut rng,
        );
    }

    RawSequence {
        label,
        subject_id,
        n_frames: n,
        landmarks,
        patches,
        events: script.events,
    }
}

/// Deterministic (label, subject) assignment for sequence `k`: the label
/// pattern [normal, talking, normal, yawning] realizes the default 50/25/25
/// mix exactly; general mixes use cumulative thresholds over a 0..1 grid.
pub fn assignment_for(cfg: &SynthConfig, k: usize) -> (ClassLabel, u32) {
    let subject = (k % cfg.subjects) as u32;
    // Position of k on a deterministic low-discrepancy grid of the mix.
    let u = ((k as f64) + 0.5) * 0.618_033_988_749_894_9;
    let u = u - u.floor();
    let mut acc = 0.0;
    for (c, &m) in cfg.class_mix.iter().enumerate() {
        acc += m;
        if u < acc {
            return (ClassLabel::from_u8(c as u8).unwrap(), subject);
        }
    }
    (ClassLabel::Yawning, subject)
}

// ── Dataset container ────────────────────────────────────────────────

/// Texture payload flavor of a container file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureMode {
    RawPatches,
    Embeddings { d_tex: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TexturePayload {
    RawPatches(Vec<u8>),
    Embeddings(Vec<f32>),
}

/// One stored sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub label: u8,
    pub subject_id: u32,
    pub n_frames: u32,
    pub landmarks: Vec<f32>,
    pub texture: TexturePayload,
}

/// In-memory dataset, matching the `HSTD` file contents exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    pub texture_mode: TextureMode,
    pub sequences: Vec<SequenceRecord>,
}

/// Subject-disjoint split of subject ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

impl SubjectSplit {
    pub fn subjects(&self, name: SplitName) -> &[u32] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// 70/15/15 split over sorted unique subject ids: train first, then val,
/// then test. Re-derivable from any container without extra metadata.
pub fn split_subjects(mut subjects: Vec<u32>) -> Result<SubjectSplit> {
    subjects.sort_unstable();
    subjects.dedup();
    let s = subjects.len();
    if s < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 subjects for a 70/15/15 split, got {s}"
        )));
    }
    let n_test = ((s as f64 * 0.15).floor() as usize).max(1);
    let n_val = n_test;
    let n_train = s - n_val - n_test;
    Ok(SubjectSplit {
        train: subjects[..n_train].to_vec(),
        val: subjects[n_train..n_train + n_val].to_vec(),
        test: subjects[n_train + n_val..].to_vec(),
    })
}

/// Generate a full dataset plus its subject-disjoint split.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(DatasetContainer, SubjectSplit)> {
    cfg.validate()?;
    if cfg.subjects < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 subjects, got {}",
            cfg.subjects
        )));
    }
    use rayon::prelude::*;
    let sequences: Vec<SequenceRecord> = (0..cfg.n_sequences)
        .into_par_iter()
        .map(|k| {
            let (label, subject) = assignment_for(cfg, k);
            let raw = generate_sequence(label, subject, cfg, k as u64);
            SequenceRecord {
                label: raw.label as u8,
                subject_id: raw.subject_id,
                n_frames: raw.n_frames as u32,
                landmarks: raw.landmarks,
                texture: TexturePayload::RawPatches(raw.patches),
            }
        })
        .collect();
    let split = split_subjects((0..cfg.subjects as u32).collect())?;
    Ok((
        DatasetContainer {
            texture_mode: TextureMode::RawPatches,
            sequences,
        },
        split,
    ))
}

// ── HSTD binary format ───────────────────────────────────────────────

const HSTD_MAGIC: &[u8; 4] = b"HSTD";
const HSTD_VERSION: u32 = 1;

/// Write a dataset container. Byte-exact for a given in-memory value.
pub fn write_container(path: &Path, data: &DatasetContainer) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    w.write_all(HSTD_MAGIC).map_err(io_err)?;
    w.write_all(&HSTD_VERSION.to_le_bytes()).map_err(io_err)?;
    match data.texture_mode {
        TextureMode::RawPatches => w.write_all(&[0u8]).map_err(io_err)?,
        TextureMode::Embeddings { d_tex } => {
            w.write_all(&[1u8]).map_err(io_err)?;
            w.write_all(&d_tex.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.write_all(&(data.sequences.len() as u32).to_le_bytes())
        .map_err(io_err)?;

    for (i, seq) in data.sequences.iter().enumerate() {
        let seq_err = |what: &str| {
            Error::format(
                path.display().to_string(),
                format!("sequence {i}: {what}"),
            )
        };
        let n = seq.n_frames as usize;
        if seq.landmarks.len() != n * 68 * 3 {
            return Err(seq_err("landmark buffer size mismatch"));
        }
        w.write_all(&[seq.label]).map_err(io_err)?;
        w.write_all(&seq.subject_id.to_le_bytes()).map_err(io_err)?;
        w.write_all(&seq.n_frames.to_le_bytes()).map_err(io_err)?;
        let mut lm_bytes = Vec::with_capacity(seq.landmarks.len() * 4);
        for v in &seq.landmarks {
            lm_bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&lm_bytes).map_err(io_err)?;
        match (&data.texture_mode, &seq.texture) {
            (TextureMode::RawPatches, TexturePayload::RawPatches(px)) => {
                if px.len() != n * ROIS * PATCH_BYTES {
                    return Err(seq_err("patch buffer size mismatch"));
                }
                w.write_all(px).map_err(io_err)?;
            }
            (TextureMode::Embeddings { d_tex }, TexturePayload::Embeddings(emb)) => {
                if emb.len() != n * ROIS * *d_tex as usize {
                    return Err(seq_err("embedding buffer size mismatch"));
                }
                let mut bytes = Vec::with_capacity(emb.len() * 4);
                for v in emb {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&bytes).map_err(io_err)?;
            }
            _ => return Err(seq_err("texture payload does not match container mode")),
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Streaming reader over an `HSTD` file.
pub struct ContainerReader {
    path: String,
    reader: BufReader<std::fs::File>,
    pub texture_mode: TextureMode,
    pub n_sequences: u32,
    cursor: u32,
}

impl ContainerReader {
    pub fn open(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut reader = BufReader::new(f);
        let pstr = path.display().to_string();

        let mut magic = [0u8; 4];
        read_exact(&mut reader, &mut magic, &pstr, "magic")?;
        if &magic != HSTD_MAGIC {
            return Err(Error::format(&pstr, "not a dataset container (bad magic)"));
        }
        let version = read_u32(&mut reader, &pstr, "version")?;
        if version != HSTD_VERSION {
            return Err(Error::format(
                &pstr,
                format!("unsupported version {version}"),
            ));
        }
        let mut mode = [0u8; 1];
        read_exact(&mut reader, &mut mode, &pstr, "texture mode")?;
        let texture_mode = match mode[0] {
            0 => TextureMode::RawPatches,
            1 => {
                let d_tex = read_u32(&mut reader, &pstr, "d_tex")?;
                TextureMode::Embeddings { d_tex }
            }
            m => return Err(Error::format(&pstr, format!("unknown texture mode {m}"))),
        };
        let n_sequences = read_u32(&mut reader, &pstr, "sequence count")?;
        Ok(ContainerReader {
            path: pstr,
            reader,
            texture_mode,
            n_sequences,
            cursor: 0,
        })
    }

    /// Read the next sequence; `None` after the last one.
    pub fn next_sequence(&mut self) -> Result<Option<SequenceRecord>> {
        if self.cursor >= self.n_sequences {
            return Ok(None);
        }
        let i = self.cursor;
        let ctx = |what: &str| format!("sequence {i}: {what}");

        let mut label = [0u8; 1];
        read_exact(&mut self.reader, &mut label, &self.path, &ctx("label"))?;
        let subject_id = read_u32(&mut self.reader, &self.path, &ctx("subject id"))?;
        let n_frames = read_u32(&mut self.reader, &self.path, &ctx("frame count"))?;
        if n_frames == 0 {
            return Err(Error::format(&self.path, ctx("zero frames")));
        }
        let n = n_frames as usize;

        let mut lm_bytes = vec![0u8; n * 68 * 3 * 4];
        read_exact(&mut self.reader, &mut lm_bytes, &self.path, &ctx("landmarks"))?;
        let landmarks: Vec<f32> = lm_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let texture = match self.texture_mode {
            TextureMode::RawPatches => {
                let mut px = vec![0u8; n * ROIS * PATCH_BYTES];
                read_exact(&mut self.reader, &mut px, &self.path, &ctx("patches"))?;
                TexturePayload::RawPatches(px)
            }
            TextureMode::Embeddings { d_tex } => {
                let mut bytes = vec![0u8; n * ROIS * d_tex as usize * 4];
                read_exact(&mut self.reader, &mut bytes, &self.path, &ctx("embeddings"))?;
                TexturePayload::Embeddings(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
        };

        self.cursor += 1;
        Ok(Some(SequenceRecord {
            label: label[0],
            subject_id,
            n_frames,
            landmarks,
            texture,
        }))
    }
}

/// Read a full container into memory.
pub fn read_container(path: &Path) -> Result<DatasetContainer> {
    let mut reader = ContainerReader::open(path)?;
    let mut sequences = Vec::with_capacity(reader.n_sequences as usize);
    while let Some(seq) = reader.next_sequence()? {
        sequences.push(seq);
    }
    Ok(DatasetContainer {
        texture_mode: reader.texture_mode,
        sequences,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, path: &str, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}
