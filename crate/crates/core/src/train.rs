//! Momentum SGD over the keypoint loss with a step learning-rate schedule.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::flip_record;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{jitter_box, BoundingBox};
use crate::head::{encode_targets, keypoint_loss};
use crate::keypoints::KeypointSet;
use crate::model::{evaluate, is_backbone_param, EvalConfig, PoseModel};
use crate::params::{Graph, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iterations: u64,
    /// Fractions of `total_iterations` at which the rate is multiplied by `decay_factor`.
    pub decay_milestones: Vec<f64>,
    pub decay_factor: f64,
    /// Images per iteration.
    pub batch_size: usize,
    pub flip_probability: f64,
    /// Proposal noise applied to ground-truth boxes.
    pub jitter_scale: f64,
    pub jitter_shift: f64,
    /// Keep backbone and FPN weights fixed.
    pub freeze_backbone: bool,
    pub seed: u64,
    /// Evaluate on the first `eval_images` images every this many iterations (0 disables).
    pub eval_every: u64,
    pub eval_images: usize,
    /// Hand a checkpoint to the observer every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.0025,
            momentum: 0.9,
            weight_decay: 0.0,
            total_iterations: 2000,
            decay_milestones: vec![2.0 / 3.0, 8.0 / 9.0],
            decay_factor: 0.1,
            batch_size: 4,
            flip_probability: 0.5,
            jitter_scale: 0.1,
            jitter_shift: 0.05,
            freeze_backbone: false,
            seed: 0,
            eval_every: 0,
            eval_images: 20,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("train_config", reason));
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.total_iterations == 0 || self.batch_size == 0 {
            return bad("total_iterations and batch_size must be positive".into());
        }
        let mut prev = 0.0;
        for &m in &self.decay_milestones {
            if !(m > prev && m < 1.0) {
                return bad(format!("milestones {:?} must be strictly increasing in (0, 1)", self.decay_milestones));
            }
            prev = m;
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} outside (0, 1]", self.decay_factor));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad(format!("flip_probability {} outside [0, 1]", self.flip_probability));
        }
        for (name, v) in [("jitter_scale", self.jitter_scale), ("jitter_shift", self.jitter_shift)] {
            if !(0.0..=0.5).contains(&v) {
                return bad(format!("{name} {v} outside [0, 0.5]"));
            }
        }
        Ok(())
    }

    /// Iterations at which each decay takes effect.
    pub fn milestone_iterations(&self) -> Vec<u64> {
        self.decay_milestones
            .iter()
            .map(|f| (f * self.total_iterations as f64).round() as u64)
            .collect()
    }
}

/// `base_lr · decay^(milestones passed)`.
pub fn lr_at(iteration: u64, cfg: &TrainConfig) -> Result<f64> {
    if iteration >= cfg.total_iterations {
        return Err(Error::invalid(
            "lr_at",
            format!("iteration {iteration} outside [0, {})", cfg.total_iterations),
        ));
    }
    let passed = cfg.milestone_iterations().iter().filter(|&&m| iteration >= m).count();
    Ok(cfg.base_lr * cfg.decay_factor.powi(passed as i32))
}

/// Heavy-ball SGD: `v ← μv + g + λw`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Updates every parameter whose `frozen` flag is false.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64, frozen: &[bool]) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::shape("sgd_step", "parameter count", params.len(), grads.len()));
        }
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            let w = params.get_mut(id);
            let v = &mut self.velocity[i];
            let g = &grads[i];
            if g.shape() != w.shape() {
                return Err(Error::shape("sgd_step", format!("gradient {i} size"), w.len(), g.len()));
            }
            for ((wj, vj), gj) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vj = self.momentum * *vj + gj + self.weight_decay * *wj;
                *wj -= lr * *vj;
            }
        }
        Ok(())
    }
}

/// One training image with its proposal boxes.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub instances: Vec<(BoundingBox, KeypointSet)>,
}

/// Loss of one sample and its gradient for every parameter.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub loss: f64,
    /// Instances with at least one keypoint inside their heatmap region.
    pub instances: usize,
    pub grads: Vec<Tensor>,
}

/// Mean keypoint loss over the sample's instances and its gradient.
/// Instances without a valid target are skipped; a sample with none yields
/// zero loss and zero gradients.
pub fn sample_gradient(model: &PoseModel, sample: &Sample, freeze_backbone: bool) -> Result<SampleGradient> {
    let mut g = Graph::new(&model.params);
    let pyramid = if freeze_backbone {
        let p = model.pyramid(&sample.image)?;
        [2u8, 3, 4, 5].map(|l| g.input(p.level(l).clone()))
    } else {
        model.pyramid_vars(&mut g, &sample.image)?
    };
    let ext = model.extraction();
    let head = &model.config().head;
    let mut losses = Vec::with_capacity(sample.instances.len());
    for (b, kps) in &sample.instances {
        let (logits, region) = model.person_logits(&mut g, &pyramid, b, &ext)?;
        let targets = encode_targets(kps, &region, head.heatmap_size);
        let l = keypoint_loss(&mut g.tape, logits, &targets, head.loss)?;
        if l.valid > 0 {
            losses.push(l.value);
        }
    }
    if losses.is_empty() {
        return Ok(SampleGradient {
            loss: 0.0,
            instances: 0,
            grads: model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        });
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.tape.add(total, l)?;
    }
    let mean = g.tape.scale(total, 1.0 / losses.len() as f64);
    let loss = g.value(mean).data()[0];
    let mut grads = g.tape.backward(mean)?;
    Ok(SampleGradient {
        loss,
        instances: losses.len(),
        grads: g.param_grads(&mut grads),
    })
}

/// Per-sample gradients (possibly in parallel) reduced in sample order into
/// the batch mean.
pub fn batch_gradient(model: &PoseModel, samples: &[Sample], freeze_backbone: bool) -> Result<SampleGradient> {
    if samples.is_empty() {
        return Err(Error::invalid("batch_gradient", "empty batch"));
    }
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<SampleGradient>> = {
        use rayon::prelude::*;
        samples.par_iter().map(|s| sample_gradient(model, s, freeze_backbone)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<SampleGradient>> = samples.iter().map(|s| sample_gradient(model, s, freeze_backbone)).collect();
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("non-empty batch")?;
    for p in iter {
        let p = p?;
        acc.loss += p.loss;
        acc.instances += p.instances;
        for (a, b) in acc.grads.iter_mut().zip(&p.grads) {
            a.add_assign(b)?;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    acc.loss *= inv;
    for a in &mut acc.grads {
        *a = a.scale(inv);
    }
    Ok(acc)
}

/// The images, flips and proposals of iteration `iteration`; depends only on
/// the seed and the iteration index.
pub fn draw_batch(dataset: &Dataset, cfg: &TrainConfig, iteration: u64) -> Result<Vec<Sample>> {
    let eligible: Vec<usize> = (0..dataset.images.len()).filter(|&i| !dataset.images[i].annotations.is_empty()).collect();
    if eligible.is_empty() {
        return Err(Error::Data("training set has no annotated images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iteration);
    (0..cfg.batch_size)
        .map(|_| {
            let img = &dataset.images[eligible[rng.gen_range(0..eligible.len())]];
            let flip = rng.gen_bool(cfg.flip_probability);
            let record = if flip { flip_record(img)? } else { img.clone() };
            let instances = record
                .annotations
                .iter()
                .map(|a| Ok((jitter_box(&a.bbox, cfg.jitter_scale, cfg.jitter_shift, &mut rng)?, a.keypoints)))
                .collect::<Result<_>>()?;
            Ok(Sample {
                image: record.pixels()?.clone(),
                instances,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub instances: usize,
    /// Wall-clock time of the iteration.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    /// Iterations completed when the snapshot was taken.
    pub iteration: u64,
    pub ap_mean: f64,
    pub pck: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub snapshots: Vec<EvalSnapshot>,
}

impl TrainLog {
    /// Mean loss of the first `n` records.
    pub fn initial_loss(&self, n: usize) -> f64 {
        let k = n.min(self.records.len()).max(1);
        self.records.iter().take(k).map(|r| r.loss).sum::<f64>() / k as f64
    }

    /// Mean loss of the last `n` records.
    pub fn final_loss(&self, n: usize) -> f64 {
        let k = n.min(self.records.len()).max(1);
        self.records.iter().rev().take(k).map(|r| r.loss).sum::<f64>() / k as f64
    }

    /// Everything except wall-clock times, bit-exact.
    pub fn trajectory(&self) -> Vec<(u64, u64, u64, usize)> {
        self.records
            .iter()
            .map(|r| (r.iteration, r.loss.to_bits(), r.lr.to_bits(), r.instances))
            .collect()
    }
}

/// Hooks called while training.
pub trait TrainObserver {
    fn record(&mut self, _record: &LogRecord) {}
    fn snapshot(&mut self, _snapshot: &EvalSnapshot) {}
    /// Called with the number of completed iterations.
    fn checkpoint(&mut self, _iteration: u64, _model: &PoseModel, _optimizer: &Sgd) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Optimizer state plus the number of completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub optimizer: Sgd,
}

impl TrainState {
    pub fn fresh(model: &PoseModel, cfg: &TrainConfig) -> Self {
        Self {
            iteration: 0,
            optimizer: Sgd::new(&model.params, cfg.momentum, cfg.weight_decay),
        }
    }
}

/// Runs iterations `state.iteration..total_iterations`, updating `model` in
/// place. On a non-finite loss or gradient the model keeps the weights of
/// the last good iteration and `Error::Diverged` is returned.
pub fn train(
    model: &mut PoseModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    resume: Option<TrainState>,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainState, TrainLog)> {
    cfg.validate()?;
    if dataset.images.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut state = resume.unwrap_or_else(|| TrainState::fresh(model, cfg));
    state.optimizer.momentum = cfg.momentum;
    state.optimizer.weight_decay = cfg.weight_decay;
    let frozen: Vec<bool> = model
        .params
        .iter()
        .map(|(name, _)| cfg.freeze_backbone && is_backbone_param(name))
        .collect();
    let eval_subset = dataset.head(cfg.eval_images);
    let mut log = TrainLog::default();
    while state.iteration < cfg.total_iterations {
        let it = state.iteration;
        let start = Instant::now();
        let lr = lr_at(it, cfg)?;
        let batch = draw_batch(dataset, cfg, it)?;
        let grad = batch_gradient(model, &batch, cfg.freeze_backbone)?;
        if !grad.loss.is_finite() || !grad.grads.iter().all(Tensor::all_finite) {
            return Err(Error::Diverged {
                iteration: it,
                loss: grad.loss,
            });
        }
        state.optimizer.step(&mut model.params, &grad.grads, lr, &frozen)?;
        state.iteration += 1;
        let record = LogRecord {
            iteration: it,
            loss: grad.loss,
            lr,
            instances: grad.instances,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer.record(&record);
        log.records.push(record);
        let done = state.iteration;
        if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.total_iterations) {
            let report = evaluate(model, &eval_subset, &model.extraction(), eval)?;
            let snap = EvalSnapshot {
                iteration: done,
                ap_mean: report.ap_mean,
                pck: report.pck,
            };
            observer.snapshot(&snap);
            log.snapshots.push(snap);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_iterations {
            observer.checkpoint(done, model, &state.optimizer)?;
        }
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};
    use crate::model::ModelConfig;
    use crate::pyramid::BackboneConfig;
    use crate::head::{HeadConfig, HeadVariant};

    fn tiny_model() -> PoseModel {
        PoseModel::new(&ModelConfig {
            backbone: BackboneConfig {
                stem_channels: 4,
                stage_channels: [4, 4, 8, 8],
                convs_per_stage: 1,
            },
            fpn_channels: 8,
            head: HeadConfig {
                variant: HeadVariant::GcmSeries,
                head_channels: 8,
                heads: 2,
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_data() -> Dataset {
        synth_generate(&SynthConfig { num_images: 4, image_size: 64, seed: 2, ..Default::default() }).unwrap()
    }

    #[test]
    fn schedule_hits_the_milestones() {
        let cfg = TrainConfig { total_iterations: 900, ..Default::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0025);
        assert_eq!(lr_at(599, &cfg).unwrap(), 0.0025);
        assert!((lr_at(600, &cfg).unwrap() - 0.00025).abs() < 1e-18);
        assert!((lr_at(799, &cfg).unwrap() - 0.00025).abs() < 1e-18);
        assert!((lr_at(800, &cfg).unwrap() - 0.000025).abs() < 1e-18);
        assert!(lr_at(900, &cfg).is_err());
    }

    #[test]
    fn momentum_step_matches_closed_form() {
        // f(w) = ½·a·w², so g = a·w.
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let a = [2.0, 0.5, 3.0];
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut sgd = Sgd::new(&params, mu, wd);
        let mut w: Vec<f64> = params.get(id).data().to_vec();
        let mut v = vec![0.0; 3];
        for _ in 0..3 {
            let g = Tensor::from_fn(&[3], |i| a[i] * params.get(id).data()[i]);
            sgd.step(&mut params, &[g], lr, &[false]).unwrap();
            for i in 0..3 {
                v[i] = mu * v[i] + a[i] * w[i] + wd * w[i];
                w[i] -= lr * v[i];
            }
        }
        for i in 0..3 {
            assert!((params.get(id).data()[i] - w[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_leaves_weights_bitwise_unchanged() {
        let mut model = tiny_model();
        let before = model.params.clone();
        let cfg = TrainConfig { base_lr: 0.0, total_iterations: 1, batch_size: 2, ..Default::default() };
        train(&mut model, &tiny_data(), &cfg, &EvalConfig::default(), None, &mut NoObserver).unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(before.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let model = tiny_model();
        let data = tiny_data();
        let cfg = TrainConfig { batch_size: 3, ..Default::default() };
        let batch = draw_batch(&data, &cfg, 7).unwrap();
        let mean = batch_gradient(&model, &batch, false).unwrap();

        // Oracle: one graph holding the whole batch, loss = mean of sample losses.
        let mut g = Graph::new(&model.params);
        let ext = model.extraction();
        let mut sample_losses = Vec::new();
        for s in &batch {
            let pyr = model.pyramid_vars(&mut g, &s.image).unwrap();
            let mut inst = Vec::new();
            for (b, kps) in &s.instances {
                let (logits, region) = model.person_logits(&mut g, &pyr, b, &ext).unwrap();
                let t = encode_targets(kps, &region, (56, 56));
                let l = keypoint_loss(&mut g.tape, logits, &t, Default::default()).unwrap();
                if l.valid > 0 {
                    inst.push(l.value);
                }
            }
            let mut sum = inst[0];
            for &l in &inst[1..] {
                sum = g.tape.add(sum, l).unwrap();
            }
            sample_losses.push(g.tape.scale(sum, 1.0 / inst.len() as f64));
        }
        let mut total = sample_losses[0];
        for &l in &sample_losses[1..] {
            total = g.tape.add(total, l).unwrap();
        }
        let total = g.tape.scale(total, 1.0 / batch.len() as f64);
        assert!((g.value(total).data()[0] - mean.loss).abs() < 1e-12);
        let mut grads = g.tape.backward(total).unwrap();
        let joint = g.param_grads(&mut grads);
        for (a, b) in joint.iter().zip(&mean.grads) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-10);
        }
    }

    #[test]
    fn frozen_backbone_stays_fixed_and_head_moves() {
        let mut model = tiny_model();
        let before = model.params.clone();
        let cfg = TrainConfig { base_lr: 0.01, total_iterations: 2, batch_size: 1, freeze_backbone: true, ..Default::default() };
        train(&mut model, &tiny_data(), &cfg, &EvalConfig::default(), None, &mut NoObserver).unwrap();
        let mut head_moved = false;
        for ((name, a), (_, b)) in model.params.iter().zip(before.iter()) {
            if is_backbone_param(name) {
                assert_eq!(a, b, "{name}");
            } else {
                head_moved |= a != b;
            }
        }
        assert!(head_moved);
    }

    #[test]
    fn fixed_seed_reproduces_the_log_and_resume_matches() {
        let data = tiny_data();
        let cfg = TrainConfig { base_lr: 0.01, total_iterations: 6, batch_size: 2, ..Default::default() };
        let run = |resume_at: Option<u64>| {
            let mut model = tiny_model();
            let mut log = TrainLog::default();
            let mut state = None;
            if let Some(k) = resume_at {
                let partial = TrainConfig { total_iterations: cfg.total_iterations, ..cfg.clone() };
                // Stop early by training a prefix with the full schedule.
                let mut st = TrainState::fresh(&model, &partial);
                while st.iteration < k {
                    let lr = lr_at(st.iteration, &partial).unwrap();
                    let batch = draw_batch(&data, &partial, st.iteration).unwrap();
                    let g = batch_gradient(&model, &batch, false).unwrap();
                    let frozen = vec![false; model.params.len()];
                    st.optimizer.step(&mut model.params, &g.grads, lr, &frozen).unwrap();
                    log.records.push(LogRecord { iteration: st.iteration, loss: g.loss, lr, instances: g.instances, seconds: 0.0 });
                    st.iteration += 1;
                }
                state = Some(st);
            }
            let (_, rest) = train(&mut model, &data, &cfg, &EvalConfig::default(), state, &mut NoObserver).unwrap();
            log.records.extend(rest.records);
            (model.params, log)
        };
        let (p1, l1) = run(None);
        let (p2, l2) = run(None);
        let (p3, l3) = run(Some(3));
        assert_eq!(l1.trajectory(), l2.trajectory());
        assert_eq!(p1, p2);
        assert_eq!(l1.trajectory(), l3.trajectory());
        assert_eq!(p1, p3);
        assert_eq!(l1.records.iter().map(|r| r.iteration).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { decay_milestones: vec![0.8, 0.5], ..Default::default() }.validate().is_err());
        assert!(TrainConfig { decay_milestones: vec![1.0], ..Default::default() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
