//! Two-optimizer training loop and evaluation.
//!
//! Main parameters step with Adam (bias-corrected, decoupled weight decay on
//! multiplicative weights only); class centers step with plain SGD on the
//! analytic center-loss gradient at their own learning rate, and only when
//! the center term participates in the objective (`lambda > 0`).
//!
//! Per batch, every clip records its own graph (in parallel when cores are
//! available), each contributing `focal/B + lambda * center` to the batch
//! objective; gradients are reduced in fixed clip order, so runs are
//! deterministic for a fixed seed regardless of thread count.

use crate::autodiff::ParamId;
use crate::error::{Error, Result};
use crate::losses::{center_gradient, center_loss, focal_loss, LossConfig};
use crate::metrics::Confusion;
use crate::model::{build_forward_graph, extract_artifacts, PreparedClip, TrainState};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Optimization hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub center_lr: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Evaluate the validation split every this many epochs (0 = never).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            center_lr: 0.5,
            loss: LossConfig::default(),
            seed: 42,
            val_every: 10,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One epoch line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Validation metrics when evaluated this epoch.
    pub val: Option<(f64, f64)>,
}

impl EpochLog {
    /// Machine-readable `key=value` rendering; identical runs produce
    /// identical lines.
    pub fn render(&self) -> String {
        let mut s = format!(
            "epoch={} loss={:.9} train_accuracy={:.6} train_macro_f1={:.6}",
            self.epoch, self.loss, self.accuracy, self.macro_f1
        );
        if let Some((acc, f1)) = self.val {
            s.push_str(&format!(" val_accuracy={acc:.6} val_macro_f1={f1:.6}"));
        }
        s
    }
}

struct ClipResult {
    loss: f64,
    predicted: usize,
    label: usize,
    grads: Vec<(ParamId, Tensor)>,
    v_final: Vec<f64>,
}

fn run_clip(
    state: &TrainState,
    clip: &PreparedClip,
    batch_size: usize,
    loss_cfg: &LossConfig,
) -> Result<ClipResult> {
    let fwd = build_forward_graph(state, clip)?;
    let mut g = fwd.graph;
    let labels = [clip.label];

    // focal/B + lambda * center: summed over the batch this reproduces
    // mean-focal + lambda * summed-center.
    let focal = focal_loss(&mut g, fwd.logits, &labels, loss_cfg)?;
    let focal_scaled = g.scale(focal, 1.0 / batch_size as f64);
    let loss_node = if loss_cfg.lambda > 0.0 {
        let centers = g.input(state.centers.clone());
        let center = center_loss(&mut g, fwd.v_final, &labels, centers)?;
        let center_scaled = g.scale(center, loss_cfg.lambda);
        g.add(focal_scaled, center_scaled)?
    } else {
        focal_scaled
    };

    let predicted = argmax(g.value(fwd.logits).data());
    let v_final = g.value(fwd.v_final).data().to_vec();
    let grads = g.backward_scalar(loss_node)?;
    Ok(ClipResult {
        loss: g.value(loss_node).item(),
        predicted,
        label: clip.label,
        grads: grads.into_vec(),
        v_final,
    })
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn adam_step(state: &mut TrainState, grads: &[Tensor], cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..state.params.len() {
        let decay = state.defs[i].decay;
        let g = grads[i].data();
        let m = state.adam_m[i].data_mut();
        let v = state.adam_v[i].data_mut();
        let p = state.params[i].data_mut();
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if decay {
                p[j] -= cfg.lr * cfg.weight_decay * p[j];
            }
        }
    }
}

/// Train on `train_clips`, logging one line per epoch; the validation split
/// is scored every `val_every` epochs when provided.
pub fn train(
    state: &mut TrainState,
    train_clips: &[PreparedClip],
    val_clips: Option<&[PreparedClip]>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.loss.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.lr <= 0.0 || cfg.center_lr < 0.0 {
        return Err(Error::InvalidArgument("train config rates must be positive".into()));
    }
    if train_clips.len() < cfg.batch_size {
        return Err(Error::InvalidArgument(format!(
            "training split has {} clips, need at least one batch of {}",
            train_clips.len(),
            cfg.batch_size
        )));
    }
    let distinct: std::collections::BTreeSet<usize> =
        train_clips.iter().map(|c| c.label).collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument(
            "training split needs at least 2 classes".into(),
        ));
    }

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_clips.len()).collect();

    for epoch in 0..cfg.epochs {
        // Per-epoch shuffle stream derived from (seed, epoch): reproducible
        // without carrying RNG state in checkpoints.
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15),
        );
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut confusion = Confusion::new(state.cfg.num_classes);
        let n_batches = order.len() / cfg.batch_size; // drop the last partial batch

        for b in 0..n_batches {
            let batch = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let results: Vec<ClipResult> = batch
                .par_iter()
                .map(|&i| run_clip(state, &train_clips[i], cfg.batch_size, &cfg.loss))
                .collect::<Result<_>>()?;

            // Reduce gradients in clip order.
            let mut total: Vec<Tensor> = state
                .params
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
                for (pid, g) in &r.grads {
                    let acc = total[pid.0].data_mut();
                    for (a, b) in acc.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                confusion.record(r.label, r.predicted);
            }
            epoch_loss += batch_loss;

            adam_step(state, &total, cfg);

            // Dedicated center update on the analytic gradient of the raw
            // center loss (not lambda-scaled); inactive when lambda = 0.
            if cfg.loss.lambda > 0.0 {
                let feats = Tensor::from_vec(
                    vec![results.len(), state.cfg.d_out],
                    results.iter().flat_map(|r| r.v_final.clone()).collect(),
                );
                let labels: Vec<usize> = results.iter().map(|r| r.label).collect();
                let grad = center_gradient(&feats, &labels, &state.centers)?;
                for (c, g) in state.centers.data_mut().iter_mut().zip(grad.data()) {
                    *c -= cfg.center_lr * g;
                }
            }
        }
        state.epoch += 1;

        let val = match (val_clips, cfg.val_every) {
            (Some(vc), every) if every > 0 && (epoch + 1) % every == 0 && !vc.is_empty() => {
                let (acc, f1, _) = evaluate(state, vc)?;
                Some((acc, f1))
            }
            _ => None,
        };
        logs.push(EpochLog {
            epoch: epoch + 1,
            loss: epoch_loss,
            accuracy: confusion.accuracy(),
            macro_f1: confusion.macro_f1(),
            val,
        });
    }
    Ok(logs)
}

/// Forward-only scoring of a clip set.
pub fn evaluate(
    state: &TrainState,
    clips: &[PreparedClip],
) -> Result<(f64, f64, Confusion)> {
    if clips.is_empty() {
        return Err(Error::InvalidArgument("evaluate: empty split".into()));
    }
    let preds: Vec<(usize, usize)> = clips
        .par_iter()
        .map(|c| {
            let fwd = build_forward_graph(state, c)?;
            Ok((c.label, argmax(fwd.graph.value(fwd.logits).data())))
        })
        .collect::<Result<_>>()?;
    let mut confusion = Confusion::new(state.cfg.num_classes);
    for (truth, pred) in preds {
        confusion.record(truth, pred);
    }
    Ok((confusion.accuracy(), confusion.macro_f1(), confusion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::CanonicalTemplate;
    use crate::datagen::{generate_sequence, ClassLabel, SynthConfig, TexturePayload};
    use crate::model::{init_model, prepare_clip, ModelConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            t: 8,
            d: 4,
            d_out: 8,
            d_a: 4,
            n_state: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_clips(cfg: &ModelConfig, per_class: usize) -> Vec<PreparedClip> {
        let synth = SynthConfig {
            frames_per_clip: 40,
            subjects: 5,
            n_sequences: 8,
            noise_scale: 0.02,
            ..SynthConfig::default()
        };
        let tpl = CanonicalTemplate::builtin();
        let mut clips = Vec::new();
        for (li, label) in [ClassLabel::Normal, ClassLabel::Talking, ClassLabel::Yawning]
            .into_iter()
            .enumerate()
        {
            for i in 0..per_class {
                let raw = generate_sequence(label, i as u32, &synth, (li * per_class + i) as u64);
                clips.push(
                    prepare_clip(
                        &raw.landmarks,
                        &TexturePayload::RawPatches(raw.patches),
                        raw.n_frames,
                        label as usize,
                        raw.subject_id,
                        cfg,
                        &tpl,
                    )
                    .unwrap(),
                );
            }
        }
        clips
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let mcfg = tiny_model();
        let clips = tiny_clips(&mcfg, 2);
        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            val_every: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let mut state = init_model(&mcfg).unwrap();
            let logs = train(&mut state, &clips, Some(&clips), &tcfg).unwrap();
            (
                logs.iter().map(|l| l.render()).collect::<Vec<_>>(),
                state.params[0].data().to_vec(),
            )
        };
        let (la, pa) = run();
        let (lb, pb) = run();
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn lambda_zero_keeps_centers_fixed() {
        let mcfg = tiny_model();
        let clips = tiny_clips(&mcfg, 2);
        let mut state = init_model(&mcfg).unwrap();
        let before = state.centers.clone();
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            center_lr: 123.0, // arbitrary; must not matter
            loss: LossConfig {
                lambda: 0.0,
                ..LossConfig::default()
            },
            val_every: 0,
            ..TrainConfig::default()
        };
        train(&mut state, &clips, None, &tcfg).unwrap();
        assert_eq!(state.centers.data(), before.data());
    }

    #[test]
    fn centers_move_with_lambda_positive() {
        let mcfg = tiny_model();
        let clips = tiny_clips(&mcfg, 2);
        let mut state = init_model(&mcfg).unwrap();
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            val_every: 0,
            ..TrainConfig::default()
        };
        train(&mut state, &clips, None, &tcfg).unwrap();
        assert!(state.centers.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn memorizes_a_separable_pair() {
        // Loss trends down over the first epochs on a trivially separable
        // two-clip problem.
        let mcfg = tiny_model();
        let all = tiny_clips(&mcfg, 2);
        let pair: Vec<PreparedClip> = vec![all[0].clone(), all[5].clone()]; // normal vs yawning
        let mut state = init_model(&mcfg).unwrap();
        let tcfg = TrainConfig {
            epochs: 20,
            batch_size: 2,
            val_every: 0,
            ..TrainConfig::default()
        };
        let logs = train(&mut state, &pair, None, &tcfg).unwrap();
        let first = logs.first().unwrap().loss;
        let last = logs.last().unwrap().loss;
        assert!(
            last < first * 0.5,
            "loss did not shrink: {first} -> {last}"
        );
        let (acc, _, _) = evaluate(&state, &pair).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn weight_decay_touches_only_flagged_tensors() {
        let mcfg = tiny_model();
        let clips = tiny_clips(&mcfg, 1);
        let run = |wd: f64| -> crate::model::TrainState {
            let mut state = init_model(&mcfg).unwrap();
            let tcfg = TrainConfig {
                epochs: 1,
                batch_size: 3,
                weight_decay: wd,
                val_every: 0,
                ..TrainConfig::default()
            };
            train(&mut state, &clips, None, &tcfg).unwrap();
            state
        };
        let no_wd = run(0.0);
        let with_wd = run(0.1);
        for (i, def) in no_wd.defs.iter().enumerate() {
            let same = no_wd.params[i].data() == with_wd.params[i].data();
            if !def.decay {
                // a_log, biases, gains, edge weights: decay must not act;
                // their trajectories only differ if the loss path itself
                // changed, which one identical epoch rules out numerically
                // except through decayed co-parameters. Check the first
                // step's untouched tensors: biases of unused-gradient paths.
                let _ = same;
            }
        }
        // Direct check: run a single batch so only one optimizer step
        // separates the two states; non-decay tensors must match exactly.
        let mcfg2 = tiny_model();
        let clips2 = tiny_clips(&mcfg2, 1);
        let one_step = |wd: f64| -> crate::model::TrainState {
            let mut state = init_model(&mcfg2).unwrap();
            let tcfg = TrainConfig {
                epochs: 1,
                batch_size: clips2.len(),
                weight_decay: wd,
                val_every: 0,
                ..TrainConfig::default()
            };
            train(&mut state, &clips2, None, &tcfg).unwrap();
            state
        };
        let a = one_step(0.0);
        let b = one_step(0.3);
        for (i, def) in a.defs.iter().enumerate() {
            if !def.decay {
                assert_eq!(
                    a.params[i].data(),
                    b.params[i].data(),
                    "{} moved under weight decay",
                    def.name
                );
            }
        }
        assert_ne!(
            a.params[a.index.head_w].data(),
            b.params[b.index.head_w].data()
        );
    }

    #[test]
    fn empty_split_is_rejected() {
        let mcfg = tiny_model();
        let state = init_model(&mcfg).unwrap();
        assert!(evaluate(&state, &[]).is_err());
        let mut state = init_model(&mcfg).unwrap();
        let err = train(&mut state, &[], None, &TrainConfig::default());
        assert!(err.is_err());
    }
}
