//! Baseline-versus-alignment comparison over several seeds.
//!
//! Each seed trains two models from the same initialisation and data order:
//! the plain generative baseline and the aligned run. Both are scored with
//! the Fréchet proxy on fresh samples and a linear probe at one layer, and
//! the aligned run additionally records teacher and student probes every
//! few hundred steps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::data::{self, Dataset, ShapesConfig};
use crate::diagnostics::{extract_features, fid_proxy, linear_probe, ProbeConfig};
use crate::process::ProcessConfig;
use crate::sampler::{sample_model, SampleConfig, SdeMode};
use crate::sra::{EmaSchedule, SraConfig};
use crate::trainer::{TrainConfig, TrainState, Trainer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Generated images per run for the Fréchet proxy.
    pub fid_samples: usize,
    pub sample_steps: usize,
    pub sde_mode: SdeMode,
    /// Held-out images for probing.
    pub probe_samples: usize,
    /// Layer compared between baseline and aligned students.
    pub probe_layer: usize,
    /// Timestep, in family units, of the probed inputs.
    pub probe_timestep: f64,
    pub track_every: u64,
    pub track_from: u64,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fid_samples: 1000,
            sample_steps: 250,
            sde_mode: SdeMode::SdeWtSigma,
            probe_samples: 1000,
            probe_layer: 3,
            probe_timestep: 0.5,
            track_every: 200,
            track_from: 2000,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectionConfig {
    pub model: ModelConfig,
    pub process: ProcessConfig,
    /// `seed` is replaced per run.
    pub train: TrainConfig,
    pub sra: SraConfig,
    pub dataset: ShapesConfig,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
}

impl Default for DirectionConfig {
    fn default() -> Self {
        DirectionConfig::full()
    }
}

impl DirectionConfig {
    /// Depth-12 flow model, 20k steps of batch 64, alignment 3 -> 8 with
    /// `k < 0.2`, `λ = 0.2`, `α = 0.9999`, three seeds.
    pub fn full() -> Self {
        let model = ModelConfig::small();
        let process = ProcessConfig::default();
        let sra = SraConfig {
            student_layer: 3,
            teacher_layer: 8,
            k_max: 0.2,
            lambda: 0.2,
            ema: EmaSchedule::Constant { alpha: 0.9999 },
            ..SraConfig::for_model(process.family(), model.depth)
        };
        DirectionConfig {
            model,
            process,
            train: TrainConfig {
                batch_size: 64,
                total_steps: 20_000,
                ..TrainConfig::default()
            },
            sra,
            dataset: ShapesConfig::default(),
            seeds: vec![0, 1, 2],
            eval: EvalConfig::default(),
        }
    }

    /// A depth-4, width-64 version that runs in well under an hour on one
    /// core. The EMA rate is shortened to suit the shorter horizon.
    pub fn reduced() -> Self {
        let model = ModelConfig {
            depth: 4,
            hidden_dim: 64,
            num_heads: 4,
            ..ModelConfig::tiny()
        };
        let process = ProcessConfig::default();
        let sra = SraConfig {
            ema: EmaSchedule::Constant { alpha: 0.999 },
            ..SraConfig::for_model(process.family(), model.depth)
        };
        DirectionConfig {
            eval: EvalConfig {
                fid_samples: 500,
                sample_steps: 50,
                probe_layer: sra.student_layer,
                track_every: 200,
                track_from: 1000,
                ..EvalConfig::default()
            },
            model,
            process,
            train: TrainConfig {
                batch_size: 32,
                total_steps: 3000,
                ..TrainConfig::default()
            },
            sra,
            dataset: ShapesConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let family = self.process.family();
        self.sra.validate(self.model.depth, family)?;
        self.dataset.validate()?;
        family.timestep(self.eval.probe_timestep)?;
        let l = self.eval.probe_layer;
        if l < 1 || l > self.model.depth {
            return Err(Error::out_of_range("probe_layer", l as f64, format!("[1, {}]", self.model.depth)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is needed".into()));
        }
        if self.eval.track_every == 0 {
            return Err(Error::Config("track_every must be positive".into()));
        }
        if self.eval.fid_samples < 2 || self.eval.probe_samples < 2 * self.dataset.num_classes {
            return Err(Error::Config("too few evaluation samples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fid_pixel: f64,
    pub fid_projected: f64,
    pub probe: f64,
    pub final_gen_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub step: u64,
    /// Teacher probe at the teacher layer.
    pub teacher: f64,
    /// Student probe at the student layer.
    pub student: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline: RunSummary,
    pub sra: RunSummary,
    pub track: Vec<TrackPoint>,
}

impl SeedResult {
    /// Lower-or-equal Fréchet proxy and higher-or-equal probe.
    pub fn sra_ahead(&self) -> bool {
        self.sra.fid_pixel <= self.baseline.fid_pixel && self.sra.probe >= self.baseline.probe
    }

    pub fn teacher_ahead(&self) -> bool {
        self.track.iter().all(|p| p.teacher >= p.student)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub config: DirectionConfig,
    pub seeds: Vec<SeedResult>,
}

impl DirectionReport {
    pub fn seeds_ahead(&self) -> usize {
        self.seeds.iter().filter(|s| s.sra_ahead()).count()
    }

    /// At least two thirds of the seeds favour alignment.
    pub fn effect_holds(&self) -> bool {
        3 * self.seeds_ahead() >= 2 * self.seeds.len()
    }

    pub fn teacher_ahead(&self) -> bool {
        self.seeds.iter().all(|s| !s.track.is_empty() && s.teacher_ahead())
    }

    pub fn summary(&self) -> String {
        let mut out = String::from("seed,variant,fid_pixel,fid_projected,probe,final_gen_loss\n");
        for s in &self.seeds {
            for (name, r) in [("baseline", &s.baseline), ("sra", &s.sra)] {
                out.push_str(&format!(
                    "{},{name},{},{},{},{}\n",
                    s.seed, r.fid_pixel, r.fid_projected, r.probe, r.final_gen_loss
                ));
            }
        }
        out
    }

    pub fn track_csv(&self) -> String {
        let mut out = String::from("seed,step,teacher,student\n");
        for s in &self.seeds {
            for p in &s.track {
                out.push_str(&format!("{},{},{},{}\n", s.seed, p.step, p.teacher, p.student));
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serialises");
        for (name, text) in [
            ("report.json", json),
            ("summary.csv", self.summary()),
            ("track.csv", self.track_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Held-out data shared by every run: probe images and Fréchet references.
struct EvalData {
    probe: Dataset,
    reference: Dataset,
}

impl EvalData {
    fn new(cfg: &DirectionConfig) -> Result<Self> {
        let probe = data::generate_shapes_with(&ShapesConfig {
            num: cfg.eval.probe_samples,
            seed: cfg.dataset.seed.wrapping_add(1),
            ..cfg.dataset.clone()
        })?;
        let reference = data::generate_shapes_with(&ShapesConfig {
            num: cfg.eval.fid_samples,
            seed: cfg.dataset.seed.wrapping_add(2),
            ..cfg.dataset.clone()
        })?;
        Ok(EvalData { probe, reference })
    }
}

fn probe_at(
    trainer: &Trainer,
    params: &crate::backbone::ParamSet<f32>,
    eval: &EvalData,
    layer: usize,
    cfg: &DirectionConfig,
    seed: u64,
) -> Result<f64> {
    let t = trainer.process().family().timestep(cfg.eval.probe_timestep)?;
    let feats = extract_features(trainer.model(), params, trainer.process(), &eval.probe, layer, t, seed)?;
    let probe = ProbeConfig {
        seed,
        ..cfg.eval.probe.clone()
    };
    linear_probe(&feats, &eval.probe.labels, &probe)
}

fn summarise(
    trainer: &Trainer,
    state: &TrainState<f32>,
    gen_loss: f64,
    eval: &EvalData,
    cfg: &DirectionConfig,
    seed: u64,
) -> Result<RunSummary> {
    let sample_cfg = SampleConfig {
        num_steps: cfg.eval.sample_steps,
        sde_mode: cfg.eval.sde_mode,
        seed,
        num_samples: cfg.eval.fid_samples,
        ..SampleConfig::default()
    };
    let samples = sample_model(trainer.model(), &state.student, trainer.process(), &sample_cfg)?;
    let fid = fid_proxy(&samples, &eval.reference.images, seed)?;
    Ok(RunSummary {
        fid_pixel: fid.pixel,
        fid_projected: fid.projected,
        probe: probe_at(trainer, &state.student, eval, cfg.eval.probe_layer, cfg, seed)?,
        final_gen_loss: gen_loss,
    })
}

struct RunContext<'a> {
    cfg: &'a DirectionConfig,
    seed: u64,
    dataset: &'a Dataset,
    eval: &'a EvalData,
    out_dir: Option<&'a Path>,
}

/// Trains one variant; records teacher and student probes when `track` is set.
fn train_and_score(
    ctx: &RunContext<'_>,
    name: &str,
    sra: Option<SraConfig>,
    mut track: Option<&mut Vec<TrackPoint>>,
    log: &mut dyn FnMut(&str),
) -> Result<RunSummary> {
    let (cfg, seed, eval) = (ctx.cfg, ctx.seed, ctx.eval);
    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let trainer = Trainer::new(cfg.model.clone(), cfg.process, train, sra)?;
    let dir = ctx.out_dir.map(|d| d.join(format!("seed_{seed}")).join(name));
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut hook = |s: &TrainState<f32>| -> Result<()> {
        if s.step.is_multiple_of(1000) {
            log(&format!("seed {seed} {name}: step {}", s.step));
        }
        let (Some(buf), Some(sra), Some(teacher)) = (track.as_deref_mut(), trainer.sra(), s.teacher.as_ref()) else {
            return Ok(());
        };
        if s.step >= cfg.eval.track_from && s.step.is_multiple_of(cfg.eval.track_every) {
            buf.push(TrackPoint {
                step: s.step,
                teacher: probe_at(&trainer, &teacher.params, eval, sra.teacher_layer, cfg, seed)?,
                student: probe_at(&trainer, &s.student, eval, sra.student_layer, cfg, seed)?,
            });
        }
        Ok(())
    };
    let (state, records) = trainer.train_loop(trainer.init_state::<f32>(), ctx.dataset, dir.as_deref(), Some(&mut hook))?;
    let gen = records.last().map_or(f64::NAN, |r| r.gen_loss);
    summarise(&trainer, &state, gen, eval, cfg, seed)
}

/// Trains and scores the baseline and aligned models for one seed.
pub fn run_seed(
    cfg: &DirectionConfig,
    seed: u64,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<SeedResult> {
    cfg.validate()?;
    let dataset = data::generate_shapes_with(&cfg.dataset)?;
    let eval = EvalData::new(cfg)?;
    let ctx = RunContext {
        cfg,
        seed,
        dataset: &dataset,
        eval: &eval,
        out_dir,
    };
    let baseline = train_and_score(&ctx, "baseline", None, None, log)?;
    log(&format!("seed {seed} baseline: {baseline:?}"));
    let mut track = Vec::new();
    let sra = train_and_score(&ctx, "sra", Some(cfg.sra.clone()), Some(&mut track), log)?;
    log(&format!("seed {seed} sra: {sra:?}"));
    Ok(SeedResult {
        seed,
        baseline,
        sra,
        track,
    })
}

/// Runs every configured seed and writes the report when `out_dir` is set.
pub fn run_direction(
    cfg: &DirectionConfig,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<DirectionReport> {
    cfg.validate()?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        seeds.push(run_seed(cfg, seed, out_dir, log)?);
        if let Some(d) = out_dir {
            DirectionReport {
                config: cfg.clone(),
                seeds: seeds.clone(),
            }
            .write(d)?;
        }
    }
    Ok(DirectionReport {
        config: cfg.clone(),
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> DirectionConfig {
        let model = ModelConfig::toy();
        let process = ProcessConfig::default();
        DirectionConfig {
            sra: SraConfig {
                ema: EmaSchedule::Constant { alpha: 0.9 },
                ..SraConfig::for_model(process.family(), model.depth)
            },
            model,
            process,
            train: TrainConfig {
                batch_size: 8,
                total_steps: 6,
                ..TrainConfig::default()
            },
            dataset: ShapesConfig {
                num: 32,
                size: 8,
                ..ShapesConfig::default()
            },
            seeds: vec![3],
            eval: EvalConfig {
                fid_samples: 16,
                sample_steps: 4,
                probe_samples: 40,
                probe_layer: 1,
                track_every: 2,
                track_from: 2,
                probe: ProbeConfig {
                    epochs: 2,
                    ..ProbeConfig::default()
                },
                ..EvalConfig::default()
            },
        }
    }

    #[test]
    fn presets_validate() {
        DirectionConfig::full().validate().unwrap();
        DirectionConfig::reduced().validate().unwrap();
        let full = DirectionConfig::full();
        assert_eq!((full.sra.student_layer, full.sra.teacher_layer), (3, 8));
        assert_eq!(full.train.total_steps, 20_000);
        let mut bad = quick();
        bad.eval.probe_layer = 5;
        assert!(bad.validate().is_err());
        bad = quick();
        bad.seeds.clear();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tiny_direction_run_is_reproducible() {
        let cfg = quick();
        let dir = tempfile::tempdir().unwrap();
        let mut lines = Vec::new();
        let report = run_direction(&cfg, Some(dir.path()), &mut |l| lines.push(l.to_string())).unwrap();
        let s = &report.seeds[0];
        assert_eq!(s.track.iter().map(|p| p.step).collect::<Vec<_>>(), vec![2, 4, 6]);
        for r in [&s.baseline, &s.sra] {
            assert!(r.fid_pixel.is_finite() && r.fid_pixel >= 0.0);
            assert!((0.0..=1.0).contains(&r.probe));
        }
        for f in ["report.json", "summary.csv", "track.csv", "seed_3/sra/final.ckpt", "seed_3/baseline/metrics.jsonl"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let again = run_direction(&cfg, None, &mut |_| {}).unwrap();
        assert_eq!(again, report);
        let back: DirectionReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn verdicts() {
        let run = |fid, probe| RunSummary {
            fid_pixel: fid,
            fid_projected: fid,
            probe,
            final_gen_loss: 0.0,
        };
        let seed = |b: RunSummary, s: RunSummary, track| SeedResult {
            seed: 0,
            baseline: b,
            sra: s,
            track,
        };
        let pt = |teacher, student| TrackPoint {
            step: 0,
            teacher,
            student,
        };
        let report = DirectionReport {
            config: quick(),
            seeds: vec![
                seed(run(2.0, 0.5), run(1.0, 0.6), vec![pt(0.7, 0.6)]),
                seed(run(2.0, 0.5), run(1.0, 0.4), vec![pt(0.7, 0.7)]),
                seed(run(2.0, 0.5), run(2.0, 0.5), vec![pt(0.8, 0.6)]),
            ],
        };
        assert_eq!(report.seeds_ahead(), 2);
        assert!(report.effect_holds());
        assert!(report.teacher_ahead());
        let mut worse = report.clone();
        worse.seeds[2].sra = run(2.5, 0.5);
        worse.seeds[1].track.push(pt(0.5, 0.6));
        assert!(!worse.effect_holds());
        assert!(!worse.teacher_ahead());
    }
}
