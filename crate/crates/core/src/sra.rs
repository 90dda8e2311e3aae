//! Self-representation alignment.
//!
//! The student's layer-`m` tokens at time `t` pass through a small projection
//! head and are pulled towards the EMA teacher's layer-`n` tokens at the
//! less noisy time `max(t - k, 0)`. The teacher output is a constant for the
//! purposes of differentiation: it comes from an evaluation-mode forward
//! pass and no gradient is ever routed back into teacher parameters.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, Array4, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::layers::{self, Init, Linear};
use crate::backbone::{Conditioning, DiffusionTransformer, ForwardCache, ForwardOutput, ParamLayout, ParamSet};
use crate::process::{self, Family, Process, TimeSpec, Timestep};
use crate::{Error, Result, Scalar};

/// Elementwise distance used inside the per-patch mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Distance {
    SmoothL1 { beta: f64 },
    L2,
    L1,
}

impl Default for Distance {
    fn default() -> Self {
        Distance::SmoothL1 { beta: 1.0 }
    }
}

impl Distance {
    pub fn kernel(self, d: f64) -> f64 {
        match self {
            Distance::SmoothL1 { beta } => {
                let a = d.abs();
                if a < beta {
                    0.5 * d * d / beta
                } else {
                    a - 0.5 * beta
                }
            }
            Distance::L2 => d * d,
            Distance::L1 => d.abs(),
        }
    }

    pub fn derivative(self, d: f64) -> f64 {
        match self {
            Distance::SmoothL1 { beta } => {
                if d.abs() < beta {
                    d / beta
                } else {
                    d.signum()
                }
            }
            Distance::L2 => 2.0 * d,
            Distance::L1 => {
                if d == 0.0 {
                    0.0
                } else {
                    d.signum()
                }
            }
        }
    }
}

/// Teacher momentum over the course of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EmaSchedule {
    Constant { alpha: f64 },
    /// Cosine ramp from `start` to `end` over `total_steps` updates.
    Cosine {
        start: f64,
        end: f64,
        total_steps: u64,
    },
}

impl Default for EmaSchedule {
    fn default() -> Self {
        EmaSchedule::Constant { alpha: 0.9999 }
    }
}

impl EmaSchedule {
    pub fn alpha_at(self, update: u64) -> f64 {
        match self {
            EmaSchedule::Constant { alpha } => alpha,
            EmaSchedule::Cosine {
                start,
                end,
                total_steps,
            } => {
                let frac = (update as f64 / total_steps.max(1) as f64).min(1.0);
                end - (end - start) * ((PI * frac).cos() + 1.0) / 2.0
            }
        }
    }

    fn validate(self) -> Result<()> {
        let check = |a: f64| {
            if (0.0..1.0).contains(&a) {
                Ok(())
            } else {
                Err(Error::out_of_range("ema alpha", a, "[0, 1)"))
            }
        };
        match self {
            EmaSchedule::Constant { alpha } => check(alpha),
            EmaSchedule::Cosine { start, end, .. } => {
                check(start)?;
                // The ramp may end at exactly 1.0.
                if !(start..=1.0).contains(&end) {
                    return Err(Error::out_of_range("ema end", end, "[start, 1]"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SraConfig {
    pub student_layer: usize,
    pub teacher_layer: usize,
    /// Upper bound of the time interval in family units (`[0, k_max)`).
    pub k_max: f64,
    pub lambda: f64,
    pub ema: EmaSchedule,
    pub use_projection_head: bool,
    pub distance: Distance,
    /// Draw one interval per sample instead of one per batch.
    pub per_sample_interval: bool,
    /// Teacher reuses the student's noise draw (`false` draws fresh noise).
    pub shared_noise: bool,
}

impl Default for SraConfig {
    fn default() -> Self {
        SraConfig::for_model(Family::ContinuousFlow, 12)
    }
}

impl SraConfig {
    /// Defaults scaled from the reference layer pairs: `m = round(3/12·depth)`,
    /// `n = round(8/12·depth)` for flow and `round(7/12·depth)` for denoise.
    pub fn for_model(family: Family, depth: usize) -> Self {
        let round = |num: usize| ((depth * num) as f64 / 12.0).round().max(1.0) as usize;
        let student_layer = round(3);
        let teacher_layer = match family {
            Family::ContinuousFlow => round(8),
            Family::DiscreteDenoise { .. } => round(7),
        }
        .max(student_layer)
        .min(depth);
        SraConfig {
            student_layer,
            teacher_layer,
            k_max: family.default_k_max(),
            lambda: 0.2,
            ema: EmaSchedule::default(),
            use_projection_head: true,
            distance: Distance::default(),
            per_sample_interval: false,
            shared_noise: true,
        }
    }

    pub fn validate(&self, depth: usize, family: Family) -> Result<()> {
        if self.student_layer < 1 || self.student_layer > self.teacher_layer || self.teacher_layer > depth {
            return Err(Error::Config(format!(
                "layer pair {}→{} violates 1 ≤ m ≤ n ≤ depth ({depth})",
                self.student_layer, self.teacher_layer
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::out_of_range("lambda", self.lambda, "[0, inf)"));
        }
        if let Distance::SmoothL1 { beta } = self.distance {
            if !(beta > 0.0) {
                return Err(Error::out_of_range("smooth-l1 beta", beta, "(0, inf)"));
            }
        }
        self.ema.validate()?;
        TimeSpec::new(family, self.k_max)?;
        Ok(())
    }

    pub fn time_spec(&self, family: Family) -> Result<TimeSpec> {
        TimeSpec::new(family, self.k_max)
    }
}

/// Two affine layers with SiLU between them, applied per token.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    dim: usize,
    layout: Arc<ParamLayout>,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache<S> {
    input: Array2<S>,
    pre: Array2<S>,
    act: Array2<S>,
    shape: (usize, usize, usize),
}

impl ProjectionHead {
    pub fn new(dim: usize) -> Self {
        let mut layout = ParamLayout::default();
        let fc1 = Linear::new(&mut layout, "fc1", dim, dim);
        let fc2 = Linear::new(&mut layout, "fc2", dim, dim);
        ProjectionHead {
            dim,
            layout: Arc::new(layout),
            fc1,
            fc2,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<S> {
        let mut set = ParamSet::zeros(self.layout.clone());
        self.fc1.init(Init::XavierUniform, &mut set.data, rng);
        self.fc2.init(Init::XavierUniform, &mut set.data, rng);
        set
    }

    /// Zeroes the second layer so the head's output starts at exactly zero.
    pub fn zero_output_layer<S: Scalar>(&self, params: &mut ParamSet<S>) {
        params.data[self.fc2.weight.range()].fill(S::zero());
        params.data[self.fc2.bias.range()].fill(S::zero());
    }

    pub fn forward<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        tap: &Array3<S>,
    ) -> Result<(Array3<S>, HeadCache<S>)> {
        let (b, n, d) = tap.dim();
        if d != self.dim || params.data.len() != self.layout.len() {
            return Err(Error::ShapeMismatch {
                op: "projection head",
                lhs: vec![b, n, d],
                rhs: vec![b, n, self.dim],
            });
        }
        let input = tap
            .to_owned()
            .into_shape_with_order((b * n, d))
            .expect("contiguous tap");
        let pre = self.fc1.forward(&params.data, input.view());
        let act = pre.mapv(layers::silu);
        let out = self.fc2.forward(&params.data, act.view());
        Ok((
            out.into_shape_with_order((b, n, d)).expect("contiguous"),
            HeadCache {
                input,
                pre,
                act,
                shape: (b, n, d),
            },
        ))
    }

    /// Returns the gradient w.r.t. the head input; parameter gradients
    /// accumulate into `grads`.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        cache: &HeadCache<S>,
        d_out: &Array3<S>,
        grads: &mut ParamSet<S>,
    ) -> Array3<S> {
        let (b, n, d) = cache.shape;
        let dy = d_out
            .view()
            .into_shape_with_order((b * n, d))
            .expect("contiguous");
        let p = &params.data;
        let g = &mut grads.data;
        let dact = self.fc2.backward(p, g, cache.act.view(), dy, true).expect("dx");
        let dpre = &dact * &cache.pre.mapv(layers::silu_grad);
        let dx = self
            .fc1
            .backward(p, g, cache.input.view(), dpre.view(), true)
            .expect("dx");
        dx.into_shape_with_order((b, n, d)).expect("contiguous")
    }
}

/// `teacher ← α·teacher + (1 − α)·student`, elementwise.
pub fn ema_update<S: Scalar>(teacher: &mut ParamSet<S>, student: &ParamSet<S>, alpha: f64) -> Result<()> {
    if !teacher.same_structure(student) || teacher.data.len() != student.data.len() {
        return Err(Error::ParamMismatch(
            "teacher and student parameter sets differ in structure".into(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::out_of_range("ema alpha", alpha, "[0, 1]"));
    }
    let a = S::of(alpha);
    let b = S::of(1.0 - alpha);
    teacher
        .data
        .iter_mut()
        .zip(&student.data)
        .for_each(|(t, &s)| *t = a * *t + b * s);
    Ok(())
}

/// EMA copy of the student backbone that supplies alignment targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<S> {
    pub params: ParamSet<S>,
    pub schedule: EmaSchedule,
    pub updates: u64,
}

impl<S: Scalar> TeacherState<S> {
    /// Starts as an exact copy of the student.
    pub fn from_student(student: &ParamSet<S>, schedule: EmaSchedule) -> Self {
        TeacherState {
            params: student.clone(),
            schedule,
            updates: 0,
        }
    }

    pub fn update(&mut self, student: &ParamSet<S>) -> Result<()> {
        let alpha = self.schedule.alpha_at(self.updates);
        ema_update(&mut self.params, student, alpha)?;
        self.updates += 1;
        Ok(())
    }
}

fn check_same<S>(a: &Array3<S>, b: &Array3<S>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "alignment_loss",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean over batch and patches of the per-patch distance, itself the mean
/// over channels of the elementwise kernel.
pub fn alignment_loss<S: Scalar>(teacher_tap: &Array3<S>, projected: &Array3<S>, distance: Distance) -> Result<f64> {
    check_same(teacher_tap, projected)?;
    let n = projected.len().max(1) as f64;
    let sum = Zip::from(teacher_tap)
        .and(projected)
        .fold(0.0, |acc, &t, &s| acc + distance.kernel((s - t).f64()));
    Ok(sum / n)
}

/// Gradient of [`alignment_loss`] w.r.t. the projected student tokens.
pub fn alignment_loss_grad<S: Scalar>(
    teacher_tap: &Array3<S>,
    projected: &Array3<S>,
    distance: Distance,
) -> Result<Array3<S>> {
    check_same(teacher_tap, projected)?;
    let n = projected.len().max(1) as f64;
    Ok(Zip::from(teacher_tap)
        .and(projected)
        .map_collect(|&t, &s| S::of(distance.derivative((s - t).f64()) / n)))
}

/// `gen + λ·align`.
pub fn joint_loss(gen_loss: f64, align_loss: f64, lambda: f64) -> Result<f64> {
    if !gen_loss.is_finite() {
        return Err(Error::NonFinite("generative loss"));
    }
    if !align_loss.is_finite() {
        return Err(Error::NonFinite("alignment loss"));
    }
    Ok(gen_loss + lambda * align_loss)
}

/// One noised training batch.
#[derive(Debug, Clone, Copy)]
pub struct NoisedBatch<'a, S> {
    pub x0: &'a Array4<S>,
    pub eps: &'a Array4<S>,
    pub times: &'a [Timestep],
    pub class_ids: &'a [usize],
}

/// Everything the joint objective needs from one step's forward passes.
#[derive(Debug, Clone)]
pub struct SraTargets<S> {
    /// Student prediction plus its layer-`m` tap.
    pub student: ForwardOutput<S>,
    pub cache: ForwardCache<S>,
    /// Teacher layer-`n` tap at the teacher times; carries no gradient.
    pub teacher_tap: Array3<S>,
    pub intervals: Vec<Timestep>,
    pub teacher_times: Vec<Timestep>,
}

/// Student forward on `x_t` (tap `m`) and teacher forward on `x_{t-k}` (tap
/// `n`) with the same class condition. `k` is drawn from `rng` every call.
pub fn sra_training_targets<S: Scalar, R: Rng + ?Sized>(
    model: &DiffusionTransformer,
    process: &Process,
    student: &ParamSet<S>,
    teacher: &ParamSet<S>,
    batch: NoisedBatch<'_, S>,
    config: &SraConfig,
    rng: &mut R,
) -> Result<SraTargets<S>> {
    let family = process.family();
    config.validate(model.config().depth, family)?;
    let spec = config.time_spec(family)?;
    let bsz = batch.times.len();

    let intervals: Vec<Timestep> = if config.per_sample_interval {
        (0..bsz).map(|_| process::sample_interval(&spec, rng)).collect()
    } else {
        vec![process::sample_interval(&spec, rng); bsz]
    };
    let teacher_times = batch
        .times
        .iter()
        .zip(&intervals)
        .map(|(&t, &k)| process::teacher_timestep(&spec, t, k))
        .collect::<Result<Vec<_>>>()?;

    let x_t = process.noised_batch(batch.x0, batch.eps, batch.times)?;
    let student_times: Vec<f64> = batch.times.iter().map(|&t| family.model_time(t)).collect();
    let (student_out, cache) = model.forward_train(
        student,
        &x_t,
        Conditioning {
            times: &student_times,
            class_ids: batch.class_ids,
        },
        &[config.student_layer],
    )?;

    let fresh;
    let teacher_eps = if config.shared_noise {
        batch.eps
    } else {
        fresh = Array4::from_shape_simple_fn(batch.eps.raw_dim(), || {
            S::of(rng.sample::<f64, _>(StandardNormal))
        });
        &fresh
    };
    let x_teacher = process.noised_batch(batch.x0, teacher_eps, &teacher_times)?;
    let t_model: Vec<f64> = teacher_times.iter().map(|&t| family.model_time(t)).collect();
    let mut taps = model.forward_taps(
        teacher,
        &x_teacher,
        Conditioning {
            times: &t_model,
            class_ids: batch.class_ids,
        },
        &[config.teacher_layer],
    )?;
    let teacher_tap = taps
        .remove(&config.teacher_layer)
        .expect("requested teacher tap");

    Ok(SraTargets {
        student: student_out,
        cache,
        teacher_tap,
        intervals,
        teacher_times,
    })
}
