//! Command-line front end of the `sra` binary.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array4, Axis};

use crate::archive::Archive;
use crate::config::RunConfig;
use crate::data::{self, Dataset, ShapesConfig};
use crate::diagnostics::{analyze_checkpoint, fid_proxy, AnalyzeConfig, ProbeConfig};
use crate::experiment::{run_direction, DirectionConfig};
use crate::sampler::{sample_model, SampleConfig, SdeMode};
use crate::trainer::{load_checkpoint, read_metrics, TrainState, Trainer};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "sra", version, about = "Self-representation alignment for small diffusion transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Ode,
    Sde,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Reduced,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Drop the alignment term and train the plain generative model.
        #[arg(long)]
        baseline: bool,
        /// Overrides `output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Draw samples from a checkpoint; writes `samples.sra` and `samples.png`.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 16)]
        num: usize,
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        #[arg(long, default_value_t = 250)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Mode::Sde)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample with the EMA teacher instead of the student.
        #[arg(long)]
        teacher: bool,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Linear-probe accuracy over layers and timesteps.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        grid: Grid,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Probe grid plus PCA projections of the probed features.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        grid: Grid,
        #[arg(long, default_value_t = 2)]
        pca: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fréchet proxy and probe differences between two run directories.
    Compare {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        #[command(flatten)]
        grid: Grid,
        #[arg(long, default_value_t = 256)]
        num: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a shapes dataset archive.
    GenerateData {
        #[arg(long, default_value_t = 2048)]
        num: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline against alignment over several seeds.
    Experiment {
        #[arg(long, value_enum, default_value_t = Preset::Reduced)]
        preset: Preset,
        /// TOML overrides applied on top of the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
struct Grid {
    /// Comma-separated 1-based layers; defaults to the run's probe layers.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Comma-separated timesteps in family units.
    #[arg(long, value_delimiter = ',')]
    timesteps: Option<Vec<f64>>,
    /// Probe on this dataset archive instead of fresh shapes.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Size of the fresh probe set.
    #[arg(long, default_value_t = 1000)]
    probe_samples: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            baseline,
            output,
            resume,
        } => train(&config, baseline, output, resume),
        Command::Sample {
            checkpoint,
            class,
            num,
            guidance,
            steps,
            mode,
            seed,
            teacher,
            out,
        } => {
            let (trainer, state) = load_checkpoint::<f32>(&checkpoint)?;
            let cfg = SampleConfig {
                num_steps: steps,
                guidance_scale: guidance,
                sde_mode: match mode {
                    Mode::Ode => SdeMode::Ode,
                    Mode::Sde => SdeMode::SdeWtSigma,
                },
                seed,
                num_samples: num,
                class_id: class,
                ..SampleConfig::default()
            };
            cfg.validate()?;
            let params = if teacher {
                &state
                    .teacher
                    .as_ref()
                    .ok_or_else(|| Error::Config("checkpoint has no teacher".into()))?
                    .params
            } else {
                &state.student
            };
            let samples = sample_model(trainer.model(), params, trainer.process(), &cfg)?;
            create_dir(&out)?;
            let mut a = Archive::new().with_metadata(serde_json::to_value(&cfg).expect("config serialises"));
            a.push("samples", samples.shape(), samples.as_slice().expect("contiguous samples"));
            a.save(out.join("samples.sra"))?;
            write_png_grid(&out.join("samples.png"), &samples)?;
            println!("wrote {} samples to {}", num, out.display());
            Ok(())
        }
        Command::Probe { checkpoint, grid, out } => {
            let (trainer, state) = load_checkpoint::<f32>(&checkpoint)?;
            let analysis = grid_analysis(&checkpoint, &trainer, &state, &grid, 0)?;
            create_dir(&out)?;
            let csv = analysis.report.to_csv();
            write_file(&out.join("probe.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Analyze {
            checkpoint,
            grid,
            pca,
            out,
        } => {
            let (trainer, state) = load_checkpoint::<f32>(&checkpoint)?;
            let analysis = grid_analysis(&checkpoint, &trainer, &state, &grid, pca)?;
            analysis.write(&out)?;
            print!("{}", analysis.report.to_csv());
            Ok(())
        }
        Command::Compare {
            run_a,
            run_b,
            grid,
            num,
            steps,
            seed,
            out,
        } => {
            let table = compare(&run_a, &run_b, &grid, num, steps, seed)?;
            if let Some(p) = out {
                write_file(&p, &table)?;
            }
            print!("{table}");
            Ok(())
        }
        Command::GenerateData {
            num,
            classes,
            size,
            seed,
            out,
        } => {
            let ds = data::generate_shapes_with(&ShapesConfig {
                num,
                num_classes: classes,
                size,
                seed,
                ..ShapesConfig::default()
            })?;
            ds.save(&out)?;
            println!("wrote {} images to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Experiment {
            preset,
            config,
            seeds,
            steps,
            out,
        } => {
            let mut cfg = match preset {
                Preset::Full => DirectionConfig::full(),
                Preset::Reduced => DirectionConfig::reduced(),
            };
            if let Some(p) = config {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let mut base = toml::Value::try_from(&cfg).expect("config serialises");
                let over: toml::Table = text
                    .parse()
                    .map_err(|e: toml::de::Error| Error::Config(format!("malformed config: {e}")))?;
                crate::config::merge(&mut base, toml::Value::Table(over));
                cfg = base
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(n) = steps {
                cfg.train.total_steps = n;
            }
            let report = run_direction(&cfg, Some(&out), &mut |l| eprintln!("{l}"))?;
            print!("{}", report.summary());
            println!(
                "seeds favouring alignment: {}/{}; teacher ahead at every tracked step: {}",
                report.seeds_ahead(),
                report.seeds.len(),
                report.teacher_ahead()
            );
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(config: &Path, baseline: bool, output: Option<PathBuf>, resume: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if baseline {
        cfg.sra = None;
    }
    if let Some(o) = output {
        cfg.output_dir = o;
    }
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let trainer = cfg.trainer()?;
    let state = match resume.then(|| latest_checkpoint(&dir)).flatten() {
        Some(p) => {
            eprintln!("resuming from {}", p.display());
            trainer.load_state::<f32>(&p)?
        }
        None => {
            if dir.join("metrics.jsonl").exists() && !resume {
                return Err(Error::Config(format!(
                    "{} already holds a run; pass --resume or pick another output",
                    dir.display()
                )));
            }
            trainer.init_state::<f32>()
        }
    };
    write_file(&dir.join("config.toml"), &cfg.to_toml())?;
    let dataset = cfg.dataset.build()?;
    let every = (cfg.train.total_steps / 10).max(1);
    let mut hook = |s: &TrainState<f32>| -> Result<()> {
        if s.step.is_multiple_of(every) {
            eprintln!("step {}/{}", s.step, cfg.train.total_steps);
        }
        Ok(())
    };
    let (state, records) = trainer.train_loop(state, &dataset, Some(&dir), Some(&mut hook))?;
    if let Some(r) = records.last() {
        println!(
            "step {}: gen {:.5} align {:.5} joint {:.5}",
            r.step, r.gen_loss, r.align_loss, r.joint_loss
        );
    }
    println!("final checkpoint at step {} in {}", state.step, dir.join("final.ckpt").display());
    Ok(())
}

/// Newest `checkpoints/step_*.ckpt`, or `final.ckpt` when it is newer.
fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    if let Ok(entries) = fs::read_dir(dir.join("checkpoints")) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if let Some(step) = name
                .strip_prefix("step_")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, e.path()));
                }
            }
        }
    }
    let last_logged = read_metrics(dir.join("metrics.jsonl"))
        .ok()
        .and_then(|m| m.last().map(|r| r.step))
        .unwrap_or(0);
    let fin = dir.join("final.ckpt");
    if fin.exists() && best.as_ref().is_none_or(|(b, _)| last_logged > *b) {
        return Some(fin);
    }
    best.map(|(_, p)| p)
}

/// Run configuration stored next to a checkpoint, if any.
fn run_config_for(checkpoint: &Path) -> Option<RunConfig> {
    let dir = checkpoint.parent()?;
    [dir.join("config.toml"), dir.parent()?.join("config.toml")]
        .into_iter()
        .find(|p| p.exists())
        .and_then(|p| RunConfig::load(p).ok())
}

fn probe_dataset(checkpoint: &Path, trainer: &Trainer, grid: &Grid) -> Result<Dataset> {
    if let Some(p) = &grid.dataset {
        return Dataset::load(p);
    }
    if let Some(mut cfg) = run_config_for(checkpoint) {
        cfg.analysis.probe_samples = grid.probe_samples;
        return cfg.probe_dataset();
    }
    let m = trainer.model().config();
    data::generate_shapes_with(&ShapesConfig {
        num: grid.probe_samples,
        num_classes: m.num_classes,
        size: m.input_height,
        seed: 1,
        ..ShapesConfig::default()
    })
}

fn grid_for(checkpoint: &Path, trainer: &Trainer, grid: &Grid) -> (Vec<usize>, Vec<f64>) {
    let fallback = RunConfig {
        model: trainer.model().config().clone(),
        process: *trainer.process_config(),
        sra: trainer.sra().cloned(),
        ..RunConfig::default()
    };
    let cfg = run_config_for(checkpoint).unwrap_or(fallback);
    (
        grid.layers.clone().unwrap_or_else(|| cfg.probe_layers()),
        grid.timesteps.clone().unwrap_or_else(|| cfg.probe_timesteps()),
    )
}

fn grid_analysis(
    checkpoint: &Path,
    trainer: &Trainer,
    state: &TrainState<f32>,
    grid: &Grid,
    pca: usize,
) -> Result<crate::diagnostics::Analysis> {
    let dataset = probe_dataset(checkpoint, trainer, grid)?;
    let (layers, timesteps) = grid_for(checkpoint, trainer, grid);
    let cfg = AnalyzeConfig {
        probe: ProbeConfig {
            epochs: grid.epochs,
            ..ProbeConfig::default()
        },
        pca_components: pca,
        ..AnalyzeConfig::default()
    };
    analyze_checkpoint(trainer, state, &dataset, &layers, &timesteps, &cfg)
}

fn compare(run_a: &Path, run_b: &Path, grid: &Grid, num: usize, steps: usize, seed: u64) -> Result<String> {
    let ckpt_a = run_a.join("final.ckpt");
    let ckpt_b = run_b.join("final.ckpt");
    let (ta, sa) = load_checkpoint::<f32>(&ckpt_a)?;
    let (tb, sb) = load_checkpoint::<f32>(&ckpt_b)?;
    let reference = {
        let m = ta.model().config();
        let base = run_config_for(&ckpt_a).map(|c| c.dataset.shapes).unwrap_or(ShapesConfig {
            num_classes: m.num_classes,
            size: m.input_height,
            ..ShapesConfig::default()
        });
        data::generate_shapes_with(&ShapesConfig {
            num,
            seed: base.seed.wrapping_add(2),
            ..base
        })?
    };
    let sample_cfg = SampleConfig {
        num_steps: steps,
        seed,
        num_samples: num,
        ..SampleConfig::default()
    };
    let score = |t: &Trainer, s: &TrainState<f32>| -> Result<(f64, f64)> {
        let x = sample_model(t.model(), &s.student, t.process(), &sample_cfg)?;
        let f = fid_proxy(&x, &reference.images, seed)?;
        Ok((f.pixel, f.projected))
    };
    let (pa, qa) = score(&ta, &sa)?;
    let (pb, qb) = score(&tb, &sb)?;
    let mut rows = vec![
        ("fid_pixel".to_string(), pa, pb),
        ("fid_projected".to_string(), qa, qb),
    ];
    let ra = grid_analysis(&ckpt_a, &ta, &sa, grid, 0)?.report;
    let rb = grid_analysis(&ckpt_b, &tb, &sb, grid, 0)?.report;
    for cell in &ra.cells {
        if let Some(b) = rb.get(cell.role, cell.layer, cell.timestep) {
            rows.push((
                format!("probe_{}_l{}_t{}", cell.role.name(), cell.layer, cell.timestep),
                cell.accuracy,
                b,
            ));
        }
    }
    let mut out = String::from("metric,run_a,run_b,delta\n");
    for (name, a, b) in rows {
        out.push_str(&format!("{name},{a},{b},{}\n", b - a));
    }
    Ok(out)
}

/// Tiles images into a square-ish grid with one-pixel gaps; `[-1, 1]` maps
/// to `[0, 255]`. Single-channel images are grey, three-channel are RGB,
/// others show their first channel.
pub fn write_png_grid(path: &Path, images: &Array4<f32>) -> Result<()> {
    let (n, c, h, w) = images.dim();
    if n == 0 {
        return Err(Error::Degenerate("no images to write".into()));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let rgb = c == 3;
    let ch = if rgb { 3 } else { 1 };
    let mut buf = vec![0u8; gw * gh * ch];
    let to_byte = |v: f32| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
    for (i, img) in images.axis_iter(Axis(0)).enumerate() {
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let px = ((oy + y) * gw + ox + x) * ch;
                for k in 0..ch {
                    buf[px + k] = to_byte(img[[k, y, x]]);
                }
            }
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), gw as u32, gh as u32);
    enc.set_color(if rgb { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Archive {
        path: path.to_path_buf(),
        msg: format!("png: {e}"),
    };
    enc.write_header()
        .map_err(png_err)?
        .write_image_data(&buf)
        .map_err(png_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_exit_nonzero() {
        assert_eq!(cli_dispatch(["sra", "train", "--bogus"]), 2);
        assert_eq!(cli_dispatch(["sra"]), 2);
        assert_eq!(cli_dispatch(["sra", "--help"]), 0);
        assert_eq!(cli_dispatch(["sra", "train", "--config", "/nonexistent/run.toml"]), 1);
    }

    #[test]
    fn png_grid_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let imgs = Array4::from_shape_fn((5, 1, 4, 4), |(i, _, _, _)| i as f32 / 2.0 - 1.0);
        write_png_grid(&p, &imgs).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(&p).unwrap()));
        let info = dec.read_info().unwrap().info().clone();
        // 3 columns, 2 rows of 4x4 tiles with 1-pixel gaps.
        assert_eq!((info.width, info.height), (16, 11));
        assert!(write_png_grid(&p, &Array4::zeros((0, 1, 4, 4))).is_err());
    }
}
