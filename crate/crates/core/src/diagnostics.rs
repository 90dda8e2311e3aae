//! Representation diagnostics: pooled tap features, linear probes, PCA and
//! a Gaussian Fréchet distance used as a desk-scale FID stand-in.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::backbone::{Conditioning, DiffusionTransformer, ParamSet};
use crate::data::Dataset;
use crate::process::{Process, Timestep};
use crate::rng::{self, Purpose};
use crate::trainer::{TrainState, Trainer};
use crate::{Error, Result, Scalar};

/// Mean over tokens of tap `layer` for noised inputs at `t`, one row per
/// sample. Sample `i` draws its noise from stream `(seed, i)`. Inputs carry
/// the null label so the features cannot read the class off the
/// conditioning.
#[allow(clippy::too_many_arguments)]
pub fn extract_features<S: Scalar>(
    model: &DiffusionTransformer,
    params: &ParamSet<S>,
    process: &Process,
    dataset: &Dataset,
    layer: usize,
    t: Timestep,
    seed: u64,
) -> Result<Array2<f64>> {
    let family = process.family();
    family.validate(t)?;
    let cfg = model.config();
    if layer < 1 || layer > cfg.depth {
        return Err(Error::out_of_range("tap layer", layer as f64, format!("[1, {}]", cfg.depth)));
    }
    let n = dataset.len();
    let mut out = Array2::zeros((n, cfg.hidden_dim));
    let chunk = 64;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x0, _) = dataset.batch::<S>(&idx);
        let mut eps = Array4::zeros(x0.raw_dim());
        for (i, mut row) in eps.outer_iter_mut().enumerate() {
            let mut r = rng::stream(seed, (start + i) as u64, Purpose::Features);
            row.iter_mut().for_each(|v| *v = S::of(StandardNormal.sample(&mut r)));
        }
        let times = vec![t; idx.len()];
        let x_t = process.noised_batch(&x0, &eps, &times)?;
        let model_times = vec![family.model_time(t); idx.len()];
        let ids = vec![cfg.null_class(); idx.len()];
        let taps = model.forward_taps(
            params,
            &x_t,
            Conditioning {
                times: &model_times,
                class_ids: &ids,
            },
            &[layer],
        )?;
        let pooled = taps[&layer].mean_axis(Axis(1)).expect("at least one token");
        out.slice_mut(s![start..end, ..]).assign(&pooled.mapv(|v| v.f64()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak rate of the cosine schedule.
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Disjoint train / held-out index split from a seeded permutation. Both
/// sides are nonempty when `n ≥ 2`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, 0, Purpose::Probe));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = if n >= 2 { n_train.clamp(1, n - 1) } else { n };
    let held = perm.split_off(n_train);
    (perm, held)
}

/// Held-out top-1 accuracy of a softmax classifier on standardised
/// features. Standardisation statistics come from the train split only.
pub fn linear_probe(features: &Array2<f64>, labels: &[usize], cfg: &ProbeConfig) -> Result<f64> {
    let (n, d) = features.dim();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "linear_probe",
            lhs: vec![n, d],
            rhs: vec![labels.len()],
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features"));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&b| b).count()
    };
    if distinct < 2 || n < 2 {
        return Err(Error::Degenerate(format!(
            "linear probe needs at least two classes, got {distinct} over {n} samples"
        )));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) || cfg.batch_size == 0 {
        return Err(Error::Config("probe needs train_fraction in (0, 1) and batch_size ≥ 1".into()));
    }
    let (train, held) = split_indices(n, cfg.train_fraction, cfg.seed);

    let train_x = features.select(Axis(0), &train);
    let mean = train_x.mean_axis(Axis(0)).expect("nonempty train split");
    let std = train_x.std_axis(Axis(0), 0.0);
    let inv = std.mapv(|s| if s > 1e-12 { 1.0 / s } else { 0.0 });
    let standardise = |x: Array2<f64>| (x - &mean) * &inv;
    let train_x = standardise(train_x);
    let held_x = standardise(features.select(Axis(0), &held));
    let train_y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let held_y: Vec<usize> = held.iter().map(|&i| labels[i]).collect();

    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let (mut mw, mut vw) = (w.clone(), w.clone());
    let (mut mb, mut vb) = (b.clone(), b.clone());
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * per_epoch).max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut it = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, 1 + epoch as u64, Purpose::Probe));
        for batch in order.chunks(cfg.batch_size) {
            let x = train_x.select(Axis(0), batch);
            let mut p = x.dot(&w) + &b;
            softmax_rows(&mut p);
            for (row, &i) in batch.iter().enumerate() {
                p[[row, train_y[i]]] -= 1.0;
            }
            p /= batch.len() as f64;
            let gw = x.t().dot(&p);
            let gb = p.sum_axis(Axis(0));
            it += 1;
            let lr = 0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * (it - 1) as f64 / total as f64).cos());
            let (c1, c2) = (1.0 - b1.powi(it as i32), 1.0 - b2.powi(it as i32));
            adam(&mut w, &gw, &mut mw, &mut vw, lr, b1, b2, eps, c1, c2);
            adam(&mut b, &gb, &mut mb, &mut vb, lr, b1, b2, eps, c1, c2);
        }
    }
    let logits = held_x.dot(&w) + &b;
    let correct = logits
        .outer_iter()
        .zip(&held_y)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    Ok(correct as f64 / held_y.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn adam<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    c1: f64,
    c2: f64,
) {
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    });
}

fn softmax_rows(p: &mut Array2<f64>) {
    for mut row in p.outer_iter_mut() {
        let top = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - top).exp());
        let z = row.sum();
        row /= z;
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    it.enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// Orthonormal directions as rows, `[k, D]`.
    pub components: Array2<f64>,
    /// Centred data in component coordinates, `[n, k]`.
    pub projected: Array2<f64>,
    pub explained_ratio: Vec<f64>,
    pub mean: Array1<f64>,
}

fn to_matrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

fn covariance(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows();
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let c = x - &mean;
    let cov = c.t().dot(&c) / (n.max(2) - 1) as f64;
    (mean, cov)
}

fn eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m.clone(), 1e-14, 10_000).ok_or_else(|| {
        Error::MatrixSqrt(format!(
            "eigendecomposition of {what} ({}x{}, Frobenius norm {:.3e}) did not converge",
            m.nrows(),
            m.ncols(),
            m.norm()
        ))
    })
}

/// Top-`k` principal directions of the mean-centred rows. Each component's
/// sign is fixed so its largest-magnitude entry is positive.
pub fn pca_project(features: &Array2<f64>, k: usize) -> Result<Pca> {
    let (n, d) = features.dim();
    if k < 1 || k > n.min(d) {
        return Err(Error::out_of_range("k", k as f64, format!("[1, {}]", n.min(d))));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pca features"));
    }
    let (mean, cov) = covariance(features);
    let eig = eigen(&to_matrix(&cov), "covariance")?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut components = Array2::zeros((k, d));
    let mut ratios = Vec::with_capacity(k);
    for (row, &j) in order.iter().take(k).enumerate() {
        let col = eig.eigenvectors.column(j);
        let pivot = col.iter().fold(0.0f64, |a, &b| if b.abs() > a.abs() { b } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for c in 0..d {
            components[[row, c]] = sign * col[c];
        }
        ratios.push(if total > 0.0 { eig.eigenvalues[j].max(0.0) / total } else { 0.0 });
    }
    let projected = (features - &mean).dot(&components.t());
    Ok(Pca {
        components,
        projected,
        explained_ratio: ratios,
        mean,
    })
}

/// Diagonal load added to each covariance before square roots.
pub const COV_SHRINKAGE: f64 = 1e-6;

/// `Σ_a^{1/2}` of a symmetric positive semidefinite matrix.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = eigen(m, "matrix")?;
    let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -1e-9 * top.max(1.0)) {
        return Err(Error::MatrixSqrt(format!(
            "matrix is not positive semidefinite: eigenvalue {bad:.3e} (largest {top:.3e})"
        )));
    }
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `(Σ_a Σ_b)^{1/2}` as `Σ_a^{1/2} (Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2} Σ_a^{-1/2}`;
/// `Σ_a` must be positive definite.
pub fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = eigen(a, "first covariance")?;
    let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lo > 0.0) {
        return Err(Error::MatrixSqrt(format!("first matrix is singular: smallest eigenvalue {lo:.3e}")));
    }
    let root = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    let a_half = v * DMatrix::from_diagonal(&root) * v.transpose();
    let a_inv_half = v * DMatrix::from_diagonal(&root.map(|r| 1.0 / r)) * v.transpose();
    let inner = &a_half * b * &a_half;
    let inner = (&inner + inner.transpose()) * 0.5;
    Ok(a_half * sqrt_psd(&inner)? * a_inv_half)
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})` with `shrinkage·I`
/// added to both covariances.
pub fn frechet_gaussian_distance_with(a: &Array2<f64>, b: &Array2<f64>, shrinkage: f64) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch {
            op: "frechet_gaussian_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Degenerate("Fréchet distance needs at least two samples per set".into()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Fréchet features"));
    }
    let d = a.ncols();
    let (ma, ca) = covariance(a);
    let (mb, cb) = covariance(b);
    let load = DMatrix::identity(d, d) * shrinkage;
    let ca = to_matrix(&ca) + &load;
    let cb = to_matrix(&cb) + &load;
    let mean_term: f64 = (&ma - &mb).mapv(|v| v * v).sum();
    let a_half = sqrt_psd(&ca)?;
    let inner = &a_half * &cb * &a_half;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = eigen(&inner, "Σa^½ Σb Σa^½")?;
    let cross: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

pub fn frechet_gaussian_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    frechet_gaussian_distance_with(a, b, COV_SHRINKAGE)
}

/// Flattened pixels, one row per image.
pub fn pixel_features<S: Scalar>(images: &Array4<S>) -> Array2<f64> {
    let n = images.len_of(Axis(0));
    let d = images.len() / n.max(1);
    Array2::from_shape_vec((n, d), images.iter().map(|v| v.f64()).collect()).expect("row-major")
}

/// Seeded Gaussian projection of flattened pixels to `dim` features.
pub fn random_projection<S: Scalar>(images: &Array4<S>, dim: usize, seed: u64) -> Array2<f64> {
    let px = pixel_features(images);
    let d = px.ncols();
    let mut r = rng::stream(seed, 0, Purpose::Projection);
    let scale = 1.0 / (d as f64).sqrt();
    let proj = Array2::from_shape_simple_fn((d, dim), || {
        let z: f64 = StandardNormal.sample(&mut r);
        z * scale
    });
    px.dot(&proj)
}

pub const PROJECTION_DIM: usize = 64;

/// Fréchet distance on raw pixels and on the fixed random projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidProxy {
    pub pixel: f64,
    pub projected: f64,
}

pub fn fid_proxy<S: Scalar>(a: &Array4<S>, b: &Array4<S>, projection_seed: u64) -> Result<FidProxy> {
    Ok(FidProxy {
        pixel: frechet_gaussian_distance(&pixel_features(a), &pixel_features(b))?,
        projected: frechet_gaussian_distance(
            &random_projection(a, PROJECTION_DIM, projection_seed),
            &random_projection(b, PROJECTION_DIM, projection_seed),
        )?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    Teacher,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::Teacher => "teacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub role: Role,
    pub layer: usize,
    pub timestep: f64,
    pub accuracy: f64,
}

/// Probe accuracies over `layers × timesteps` for each available role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub cells: Vec<ProbeCell>,
}

impl ProbeReport {
    pub fn get(&self, role: Role, layer: usize, timestep: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.role == role && c.layer == layer && c.timestep == timestep)
            .map(|c| c.accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("role,layer,timestep,accuracy\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{}", c.role.name(), c.layer, c.timestep, c.accuracy);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut cells = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("report line {} is malformed: {line:?}", i + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let role = match f[0] {
                "student" => Role::Student,
                "teacher" => Role::Teacher,
                _ => return Err(bad()),
            };
            cells.push(ProbeCell {
                role,
                layer: f[1].parse().map_err(|_| bad())?,
                timestep: f[2].parse().map_err(|_| bad())?,
                accuracy: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(ProbeReport { cells })
    }
}

/// Probe grid plus PCA of every probed feature matrix.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: ProbeReport,
    pub pca: Vec<(Role, usize, f64, Pca)>,
}

impl Analysis {
    /// Projections and ratios as a named-tensor archive.
    pub fn pca_archive(&self) -> Archive {
        let mut a = Archive::new().with_metadata(serde_json::json!({ "kind": "pca" }));
        for (role, layer, t, p) in &self.pca {
            let key = format!("{}.layer{layer}.t{t}", role.name());
            let (n, k) = p.projected.dim();
            a.push(format!("{key}.projected"), &[n, k], p.projected.as_slice().expect("standard"));
            a.push(format!("{key}.components"), p.components.shape(), p.components.as_slice().expect("standard"));
            a.push(format!("{key}.explained_ratio"), &[k], &p.explained_ratio);
        }
        a
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("probe.csv");
        fs::write(&csv, self.report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("probe.json");
        fs::write(&json, serde_json::to_string_pretty(&self.report).expect("serialisable"))
            .map_err(|e| Error::io(&json, e))?;
        let mut ratios = String::from("role,layer,timestep,component,explained_ratio\n");
        for (role, layer, t, p) in &self.pca {
            for (i, r) in p.explained_ratio.iter().enumerate() {
                let _ = writeln!(ratios, "{},{layer},{t},{},{r}", role.name(), i + 1);
            }
        }
        let path = dir.join("pca.csv");
        fs::write(&path, ratios).map_err(|e| Error::io(&path, e))?;
        self.pca_archive().save(dir.join("pca.sra"))
    }
}

/// Settings shared by [`analyze_checkpoint`] calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub probe: ProbeConfig,
    pub feature_seed: u64,
    /// Number of PCA components kept per cell; `0` skips PCA.
    pub pca_components: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            probe: ProbeConfig::default(),
            feature_seed: 0,
            pca_components: 2,
        }
    }
}

/// Probes (and optionally PCA) over `layers × timesteps` for the student
/// and, when present, the teacher.
pub fn analyze_checkpoint<S: Scalar>(
    trainer: &Trainer,
    state: &TrainState<S>,
    dataset: &Dataset,
    layers: &[usize],
    timesteps: &[f64],
    cfg: &AnalyzeConfig,
) -> Result<Analysis> {
    let mut roles = vec![(Role::Student, &state.student)];
    if let Some(t) = &state.teacher {
        roles.push((Role::Teacher, &t.params));
    }
    let family = trainer.process().family();
    let mut report = ProbeReport::default();
    let mut pca = Vec::new();
    for (role, params) in roles {
        for &layer in layers {
            for &tv in timesteps {
                let t = family.timestep(tv)?;
                let feats = extract_features(trainer.model(), params, trainer.process(), dataset, layer, t, cfg.feature_seed)?;
                let accuracy = linear_probe(&feats, &dataset.labels, &cfg.probe)?;
                report.cells.push(ProbeCell {
                    role,
                    layer,
                    timestep: tv,
                    accuracy,
                });
                if cfg.pca_components > 0 {
                    let k = cfg.pca_components.min(feats.nrows()).min(feats.ncols());
                    pca.push((role, layer, tv, pca_project(&feats, k)?));
                }
            }
        }
    }
    Ok(Analysis { report, pca })
}

#[cfg(test)]
mod tests;
