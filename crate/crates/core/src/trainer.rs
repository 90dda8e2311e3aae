//! Optimisation loop: batching, AdamW, clipping, EMA, metrics, checkpoints.
//!
//! A step runs in a fixed order: draw `t` and noise, student forward with its
//! tap, teacher forward at the earlier time, joint loss, backward, global norm
//! clipping, AdamW on student and head, then the EMA update of the teacher.
//!
//! All randomness of step `s` comes from streams keyed by `(seed, s)`: the
//! data stream draws label dropout, timesteps and noise, the alignment stream
//! draws the interval. A baseline run and an aligned run with `λ = 0`
//! therefore see identical batches and noise.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::backbone::apply_label_dropout;
use crate::backbone::{Conditioning, DiffusionTransformer, ModelConfig, ParamSet};
use crate::data::Dataset;
use crate::process::{self, Process, ProcessConfig, Timestep};
use crate::rng::{self, Purpose};
use crate::sra::{self, NoisedBatch, ProjectionHead, SraConfig, TeacherState};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    /// `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub log_every: u64,
    /// `0` writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.0,
            total_steps: 20_000,
            grad_clip_norm: Some(1.0),
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::out_of_range("batch_size", 0.0, "[1, inf)"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::out_of_range("learning_rate", self.learning_rate, "(0, inf)"));
        }
        let (b1, b2) = self.betas;
        for (name, b) in [("beta1", b1), ("beta2", b2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::out_of_range(name, b, "[0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::out_of_range("adam_eps", self.adam_eps, "(0, inf)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::out_of_range("weight_decay", self.weight_decay, "[0, inf)"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::out_of_range("grad_clip_norm", c, "(0, inf]"));
            }
        }
        if self.log_every == 0 {
            return Err(Error::out_of_range("log_every", 0.0, "[1, inf)"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub gen_loss: f64,
    pub align_loss: f64,
    pub joint_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Seconds since the loop started; excluded from equality.
    pub wall_time: f64,
}

impl PartialEq for MetricsRecord {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.gen_loss.to_bits() == other.gen_loss.to_bits()
            && self.align_loss.to_bits() == other.align_loss.to_bits()
            && self.joint_loss.to_bits() == other.joint_loss.to_bits()
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
    }
}

/// First and second moment buffers of AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: ParamSet<S>,
    pub v: ParamSet<S>,
    pub steps: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(like: &ParamSet<S>) -> Self {
        AdamState {
            m: ParamSet::zeros_like(like),
            v: ParamSet::zeros_like(like),
            steps: 0,
        }
    }

    /// Decoupled weight decay, then the bias-corrected adaptive step.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &ParamSet<S>, cfg: &TrainConfig) -> Result<()> {
        if !params.same_structure(grads) || !params.same_structure(&self.m) {
            return Err(Error::ParamMismatch("optimizer buffers do not match parameters".into()));
        }
        self.steps += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.steps as i32);
        let bc2 = 1.0 - b2.powi(self.steps as i32);
        let lr = cfg.learning_rate;
        let decay = S::of(1.0 - lr * cfg.weight_decay);
        let (sb1, sb2) = (S::of(b1), S::of(b2));
        let (one_b1, one_b2) = (S::of(1.0 - b1), S::of(1.0 - b2));
        let (sbc1, sbc2) = (S::of(bc1), S::of(bc2));
        let (slr, seps) = (S::of(lr), S::of(cfg.adam_eps));
        for (((p, &g), m), v) in params
            .data
            .iter_mut()
            .zip(&grads.data)
            .zip(&mut self.m.data)
            .zip(&mut self.v.data)
        {
            *p *= decay;
            *m = sb1 * *m + one_b1 * g;
            *v = sb2 * *v + one_b2 * g * g;
            let m_hat = *m / sbc1;
            let v_hat = *v / sbc2;
            *p -= slr * m_hat / (v_hat.sqrt() + seps);
        }
        Ok(())
    }
}

/// Global L2 norm over several gradient buffers.
pub fn global_norm<S: Scalar>(grads: &[&ParamSet<S>]) -> f64 {
    grads.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt()
}

/// Rescales all buffers so their joint norm is at most `max_norm`. Returns
/// the norm before clipping. An infinite limit leaves gradients untouched.
pub fn clip_global_norm<S: Scalar>(grads: &mut [&mut ParamSet<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt();
    if max_norm.is_finite() && norm > max_norm {
        let scale = S::of(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Callback run after every training step.
pub type StepHook<'a, S> = dyn FnMut(&TrainState<S>) -> Result<()> + 'a;

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S> {
    /// Number of completed steps.
    pub step: u64,
    pub student: ParamSet<S>,
    pub head: Option<ParamSet<S>>,
    pub teacher: Option<TeacherState<S>>,
    pub opt_student: AdamState<S>,
    pub opt_head: Option<AdamState<S>>,
}

/// Gradients and losses of one step before any state is touched.
#[derive(Debug, Clone)]
pub struct StepGradients<S> {
    pub student: ParamSet<S>,
    pub head: Option<ParamSet<S>>,
    /// Accumulator for teacher parameters. The teacher tap is detached, so
    /// nothing is ever written here.
    pub teacher: Option<ParamSet<S>>,
    pub gen_loss: f64,
    pub align_loss: f64,
    pub joint_loss: f64,
}

/// Per-step random streams.
#[derive(Debug, Clone)]
pub struct StepRngs {
    pub data: rng::Rng,
    pub align: rng::Rng,
}

impl StepRngs {
    pub fn for_step(seed: u64, step: u64) -> Self {
        StepRngs {
            data: rng::stream(seed, step, Purpose::Data),
            align: rng::stream(seed, step, Purpose::Align),
        }
    }
}

/// Static parts of a run: architecture, process and hyperparameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: DiffusionTransformer,
    process_config: ProcessConfig,
    process: Process,
    config: TrainConfig,
    sra: Option<SraConfig>,
    head: Option<ProjectionHead>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    step: u64,
    model: ModelConfig,
    process: ProcessConfig,
    train: TrainConfig,
    sra: Option<SraConfig>,
    teacher_updates: u64,
    adam_steps: u64,
}

impl Trainer {
    /// `sra = None` is the plain generative baseline.
    pub fn new(
        model: ModelConfig,
        process: ProcessConfig,
        config: TrainConfig,
        sra: Option<SraConfig>,
    ) -> Result<Self> {
        config.validate()?;
        let model = DiffusionTransformer::new(model)?;
        let built = process.build()?;
        if let Some(s) = &sra {
            s.validate(model.config().depth, built.family())?;
        }
        let head = sra
            .as_ref()
            .filter(|s| s.use_projection_head)
            .map(|_| ProjectionHead::new(model.config().hidden_dim));
        Ok(Trainer {
            model,
            process_config: process,
            process: built,
            config,
            sra,
            head,
        })
    }

    pub fn model(&self) -> &DiffusionTransformer {
        &self.model
    }

    pub fn process(&self) -> &Process {
        &self.process
    }

    pub fn process_config(&self) -> &ProcessConfig {
        &self.process_config
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn sra(&self) -> Option<&SraConfig> {
        self.sra.as_ref()
    }

    pub fn head(&self) -> Option<&ProjectionHead> {
        self.head.as_ref()
    }

    /// Student init depends only on the seed, so baseline and aligned runs
    /// start from the same weights. The teacher starts as a copy.
    pub fn init_state<S: Scalar>(&self) -> TrainState<S> {
        let seed = self.config.seed;
        let student = self
            .model
            .init_params::<S, _>(&mut rng::stream(seed, 0, Purpose::Init));
        let head = self
            .head
            .as_ref()
            .map(|h| h.init_params::<S, _>(&mut rng::stream(seed, 1, Purpose::Init)));
        let teacher = self
            .sra
            .as_ref()
            .map(|s| TeacherState::from_student(&student, s.ema));
        TrainState {
            step: 0,
            opt_student: AdamState::new(&student),
            opt_head: head.as_ref().map(AdamState::new),
            student,
            head,
            teacher,
        }
    }

    /// Forward passes, losses and gradients for one batch. Consumes the step
    /// streams but leaves `state` untouched.
    pub fn compute_gradients<S: Scalar>(
        &self,
        state: &TrainState<S>,
        x0: &Array4<S>,
        labels: &[usize],
        rngs: &mut StepRngs,
    ) -> Result<StepGradients<S>> {
        let cfg = self.model.config();
        let bsz = labels.len();
        if x0.dim().0 != bsz {
            return Err(Error::ShapeMismatch {
                op: "train batch",
                lhs: x0.shape().to_vec(),
                rhs: vec![bsz],
            });
        }
        let family = self.process.family();
        let class_ids = apply_label_dropout(labels, cfg.label_dropout_prob, cfg.null_class(), &mut rngs.data);
        let times: Vec<Timestep> = (0..bsz)
            .map(|_| process::sample_timestep(family, &mut rngs.data))
            .collect();
        let eps = Array4::from_shape_simple_fn(x0.raw_dim(), || {
            S::of(StandardNormal.sample(&mut rngs.data))
        });
        let target = self.process.target_batch(x0, &eps, &times)?;

        let mut student_grads = ParamSet::zeros_like(&state.student);
        let mut head_grads = state.head.as_ref().map(ParamSet::zeros_like);
        let teacher_grads = state.teacher.as_ref().map(|t| ParamSet::zeros_like(&t.params));

        match (&self.sra, &state.teacher) {
            (Some(sra_cfg), Some(teacher)) => {
                let targets = sra::sra_training_targets(
                    &self.model,
                    &self.process,
                    &state.student,
                    &teacher.params,
                    NoisedBatch {
                        x0,
                        eps: &eps,
                        times: &times,
                        class_ids: &class_ids,
                    },
                    sra_cfg,
                    &mut rngs.align,
                )?;
                let prediction = &targets.student.prediction;
                let gen_loss = process::mean_squared_error(prediction, &target)?;
                let tap = &targets.student.taps[&sra_cfg.student_layer];
                let (projected, head_cache) = match (&self.head, &state.head) {
                    (Some(h), Some(p)) => {
                        let (out, cache) = h.forward(p, tap)?;
                        (out, Some(cache))
                    }
                    _ => (tap.clone(), None),
                };
                let align_loss = sra::alignment_loss(&targets.teacher_tap, &projected, sra_cfg.distance)?;
                let joint_loss = sra::joint_loss(gen_loss, align_loss, sra_cfg.lambda)?;

                let d_pred = mse_grad(prediction, &target);
                let mut d_taps = BTreeMap::new();
                if sra_cfg.lambda != 0.0 {
                    let d_proj: Array3<S> =
                        sra::alignment_loss_grad(&targets.teacher_tap, &projected, sra_cfg.distance)?
                            * S::of(sra_cfg.lambda);
                    let d_tap = match (&self.head, &state.head, &head_cache, head_grads.as_mut()) {
                        (Some(h), Some(p), Some(c), Some(g)) => h.backward(p, c, &d_proj, g),
                        _ => d_proj,
                    };
                    d_taps.insert(sra_cfg.student_layer, d_tap);
                }
                self.model
                    .backward(&state.student, &targets.cache, Some(&d_pred), &d_taps, &mut student_grads)?;
                Ok(StepGradients {
                    student: student_grads,
                    head: head_grads,
                    teacher: teacher_grads,
                    gen_loss,
                    align_loss,
                    joint_loss,
                })
            }
            _ => {
                let x_t = self.process.noised_batch(x0, &eps, &times)?;
                let model_times: Vec<f64> = times.iter().map(|&t| family.model_time(t)).collect();
                let (out, cache) = self.model.forward_train(
                    &state.student,
                    &x_t,
                    Conditioning {
                        times: &model_times,
                        class_ids: &class_ids,
                    },
                    &[],
                )?;
                let gen_loss = process::mean_squared_error(&out.prediction, &target)?;
                let joint_loss = sra::joint_loss(gen_loss, 0.0, 0.0)?;
                let d_pred = mse_grad(&out.prediction, &target);
                self.model
                    .backward(&state.student, &cache, Some(&d_pred), &BTreeMap::new(), &mut student_grads)?;
                Ok(StepGradients {
                    student: student_grads,
                    head: head_grads,
                    teacher: teacher_grads,
                    gen_loss,
                    align_loss: 0.0,
                    joint_loss,
                })
            }
        }
    }

    /// One full optimisation step. On error `state` is left unchanged.
    pub fn train_step<S: Scalar>(
        &self,
        state: &mut TrainState<S>,
        x0: &Array4<S>,
        labels: &[usize],
        rngs: &mut StepRngs,
    ) -> Result<MetricsRecord> {
        let mut g = self.compute_gradients(state, x0, labels, rngs)?;
        let limit = self.config.grad_clip_norm.unwrap_or(f64::INFINITY);
        let grad_norm = {
            let mut bufs: Vec<&mut ParamSet<S>> = vec![&mut g.student];
            bufs.extend(g.head.as_mut());
            clip_global_norm(&mut bufs, limit)
        };
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        state.opt_student.step(&mut state.student, &g.student, &self.config)?;
        if let (Some(p), Some(opt), Some(gh)) = (state.head.as_mut(), state.opt_head.as_mut(), g.head.as_ref()) {
            opt.step(p, gh, &self.config)?;
        }
        if let Some(t) = state.teacher.as_mut() {
            t.update(&state.student)?;
        }
        state.step += 1;
        Ok(MetricsRecord {
            step: state.step,
            gen_loss: g.gen_loss,
            align_loss: g.align_loss,
            joint_loss: g.joint_loss,
            grad_norm,
            wall_time: 0.0,
        })
    }

    /// Sample indices of step `step`: consecutive slices of per-epoch
    /// permutations seeded by `(seed, epoch)`.
    pub fn batch_indices(&self, dataset_len: usize, step: u64) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        let n = dataset_len as u64;
        let mut out = Vec::with_capacity(b as usize);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in step * b..(step + 1) * b {
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..dataset_len).collect();
                perm.shuffle(&mut rng::stream(self.config.seed, epoch, Purpose::Shuffle));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("filled above").1[(pos % n) as usize]);
        }
        out
    }

    /// Runs from `state.step` to `total_steps`. With an output directory,
    /// metrics append to `metrics.jsonl` and checkpoints land in
    /// `checkpoints/`. `hook` sees the state after every step.
    pub fn train_loop<S: Scalar>(
        &self,
        mut state: TrainState<S>,
        dataset: &Dataset,
        out_dir: Option<&Path>,
        mut hook: Option<&mut StepHook<'_, S>>,
    ) -> Result<(TrainState<S>, Vec<MetricsRecord>)> {
        if dataset.is_empty() {
            return Err(Error::Degenerate("training dataset is empty".into()));
        }
        let mcfg = self.model.config();
        let (_, c, h, w) = dataset.images.dim();
        if (c, h, w) != (mcfg.channels, mcfg.input_height, mcfg.input_width) {
            return Err(Error::ShapeMismatch {
                op: "dataset vs model",
                lhs: vec![c, h, w],
                rhs: vec![mcfg.channels, mcfg.input_height, mcfg.input_width],
            });
        }
        if let Some(&l) = dataset.labels.iter().find(|&&l| l >= mcfg.num_classes) {
            return Err(Error::out_of_range("label", l as f64, format!("[0, {})", mcfg.num_classes)));
        }
        let mut log = match out_dir {
            Some(dir) => Some(MetricsLog::open(dir, state.step)?),
            None => None,
        };
        let start = Instant::now();
        let mut records = Vec::new();
        while state.step < self.config.total_steps {
            let idx = self.batch_indices(dataset.len(), state.step);
            let (x0, labels) = dataset.batch::<S>(&idx);
            let mut rngs = StepRngs::for_step(self.config.seed, state.step);
            let mut rec = self.train_step(&mut state, &x0, &labels, &mut rngs)?;
            rec.wall_time = start.elapsed().as_secs_f64();
            if rec.step % self.config.log_every == 0 {
                if let Some(log) = log.as_mut() {
                    log.append(&rec)?;
                }
                records.push(rec);
            }
            if let Some(h) = hook.as_mut() {
                h(&state)?;
            }
            if let Some(dir) = out_dir {
                if self.config.checkpoint_every > 0 && state.step.is_multiple_of(self.config.checkpoint_every) {
                    self.save_checkpoint(&state, checkpoint_path(dir, state.step))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(&state, dir.join("final.ckpt"))?;
        }
        Ok((state, records))
    }

    fn meta<S: Scalar>(&self, state: &TrainState<S>) -> CheckpointMeta {
        CheckpointMeta {
            kind: "checkpoint".into(),
            step: state.step,
            model: self.model.config().clone(),
            process: self.process_config,
            train: self.config.clone(),
            sra: self.sra.clone(),
            teacher_updates: state.teacher.as_ref().map_or(0, |t| t.updates),
            adam_steps: state.opt_student.steps,
        }
    }

    pub fn checkpoint_archive<S: Scalar>(&self, state: &TrainState<S>) -> Archive {
        let meta = serde_json::to_value(self.meta(state)).expect("metadata serialises");
        let mut a = Archive::new().with_metadata(meta);
        state.student.write_to("student.", &mut a);
        if let Some(h) = &state.head {
            h.write_to("head.", &mut a);
        }
        if let Some(t) = &state.teacher {
            t.params.write_to("teacher.", &mut a);
        }
        state.opt_student.m.write_to("adam.student.m.", &mut a);
        state.opt_student.v.write_to("adam.student.v.", &mut a);
        if let Some(o) = &state.opt_head {
            o.m.write_to("adam.head.m.", &mut a);
            o.v.write_to("adam.head.v.", &mut a);
        }
        a
    }

    pub fn save_checkpoint<S: Scalar>(&self, state: &TrainState<S>, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint_archive(state).save(path)
    }

    /// Loads a state saved by a trainer with the same model configuration.
    pub fn load_state<S: Scalar>(&self, path: impl AsRef<Path>) -> Result<TrainState<S>> {
        let archive = Archive::load(path)?;
        let meta = read_meta(&archive)?;
        if meta.model != *self.model.config() {
            return Err(Error::ParamMismatch(format!(
                "checkpoint model {:?} differs from configured model {:?}",
                meta.model,
                self.model.config()
            )));
        }
        if meta.sra.is_some() != self.sra.is_some() {
            return Err(Error::ParamMismatch(
                "checkpoint and run disagree on whether alignment is enabled".into(),
            ));
        }
        self.state_from_archive(&archive, &meta)
    }

    fn state_from_archive<S: Scalar>(&self, a: &Archive, meta: &CheckpointMeta) -> Result<TrainState<S>> {
        let layout = self.model.layout().clone();
        let student = ParamSet::read_from("student.", a, layout.clone())?;
        let head = match &self.head {
            Some(h) => Some(ParamSet::read_from("head.", a, h.layout().clone())?),
            None => None,
        };
        let teacher = match &self.sra {
            Some(s) => Some(TeacherState {
                params: ParamSet::read_from("teacher.", a, layout.clone())?,
                schedule: s.ema,
                updates: meta.teacher_updates,
            }),
            None => None,
        };
        let opt_student = AdamState {
            m: ParamSet::read_from("adam.student.m.", a, layout.clone())?,
            v: ParamSet::read_from("adam.student.v.", a, layout)?,
            steps: meta.adam_steps,
        };
        let opt_head = match &self.head {
            Some(h) => Some(AdamState {
                m: ParamSet::read_from("adam.head.m.", a, h.layout().clone())?,
                v: ParamSet::read_from("adam.head.v.", a, h.layout().clone())?,
                steps: meta.adam_steps,
            }),
            None => None,
        };
        Ok(TrainState {
            step: meta.step,
            student,
            head,
            teacher,
            opt_student,
            opt_head,
        })
    }
}

fn read_meta(a: &Archive) -> Result<CheckpointMeta> {
    serde_json::from_value(a.metadata.clone())
        .map_err(|e| Error::Config(format!("checkpoint metadata is not a training checkpoint: {e}")))
}

/// Rebuilds the trainer recorded in a checkpoint together with its state.
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(Trainer, TrainState<S>)> {
    let archive = Archive::load(path)?;
    let meta = read_meta(&archive)?;
    let trainer = Trainer::new(meta.model.clone(), meta.process, meta.train.clone(), meta.sra.clone())?;
    let state = trainer.state_from_archive(&archive, &meta)?;
    Ok((trainer, state))
}

pub fn save_checkpoint<S: Scalar>(trainer: &Trainer, state: &TrainState<S>, path: impl AsRef<Path>) -> Result<()> {
    trainer.save_checkpoint(state, path)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

fn mse_grad<S: Scalar>(prediction: &Array4<S>, target: &Array4<S>) -> Array4<S> {
    let scale = S::of(2.0 / prediction.len().max(1) as f64);
    (prediction - target) * scale
}

struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    /// Opens `metrics.jsonl`, dropping records past `resume_step` so a
    /// resumed run rewrites them.
    fn open(dir: &Path, resume_step: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let kept: Vec<String> = if resume_step > 0 && path.exists() {
            read_metrics(&path)?
                .into_iter()
                .filter(|r| r.step <= resume_step)
                .map(|r| serde_json::to_string(&r).expect("record serialises"))
                .collect()
        } else {
            Vec::new()
        };
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for line in kept {
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(MetricsLog { file })
    }

    fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serialises");
        writeln!(self.file, "{line}").map_err(|e| Error::io("metrics.jsonl", e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Archive {
                path: path.to_path_buf(),
                msg: format!("bad metrics line: {e}"),
            })
        })
        .collect()
}

/// Moving average over a trailing window, aligned with the input.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
