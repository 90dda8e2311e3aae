//! Patchified diffusion transformer with adaptive layer-norm conditioning.
//!
//! The network follows the usual DiT layout: linear patch embedding plus a
//! fixed sine/cosine position table, a timestep MLP and a class table whose
//! sum conditions every block through shift/scale/gate modulation, and a
//! zero-initialised modulated output head. Any block's output can be tapped;
//! the tap gradients injected in [`DiffusionTransformer::backward`] are how
//! the alignment loss reaches the student.
//!
//! All parameters live in one flat buffer described by a [`ParamLayout`], so
//! optimizer steps, EMA blends, clipping and checkpointing are plain slice
//! operations.

mod embed;
pub mod layers;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use embed::{
    apply_label_dropout, patchify, sincos_position_table, timestep_frequencies, unpatchify,
};
use layers::{AttentionCache, Init, Linear, Slot};

use crate::archive::Archive;
use crate::{Error, Result, Scalar};

/// Which activation of a block is exposed as its tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Residual stream after the block's final residual addition.
    #[default]
    Residual,
    /// Output of the block's MLP before the adaptive gate multiplies it.
    MlpOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub label_dropout_prob: f64,
    pub mlp_ratio: usize,
    pub frequency_dim: usize,
    pub tap_point: TapPoint,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::tiny()
    }
}

impl ModelConfig {
    /// Depth 6, width 128, 4 heads on 16x16x1 inputs with 4 classes.
    pub fn tiny() -> Self {
        ModelConfig {
            input_height: 16,
            input_width: 16,
            channels: 1,
            patch_size: 2,
            depth: 6,
            hidden_dim: 128,
            num_heads: 4,
            num_classes: 4,
            label_dropout_prob: 0.1,
            mlp_ratio: 4,
            frequency_dim: 256,
            tap_point: TapPoint::Residual,
        }
    }

    /// Depth 12, width 256, 8 heads.
    pub fn small() -> Self {
        ModelConfig {
            depth: 12,
            hidden_dim: 256,
            num_heads: 8,
            ..ModelConfig::tiny()
        }
    }

    /// Depth 2, width 8 on 8x8x1 inputs; for tests and quick checks.
    pub fn toy() -> Self {
        ModelConfig {
            input_height: 8,
            input_width: 8,
            depth: 2,
            hidden_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            frequency_dim: 16,
            ..ModelConfig::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0
            || !self.input_height.is_multiple_of(self.patch_size)
            || !self.input_width.is_multiple_of(self.patch_size)
        {
            return bad(format!(
                "input {}x{} not divisible by patch size {}",
                self.input_height, self.input_width, self.patch_size
            ));
        }
        if self.channels == 0 || self.hidden_dim == 0 || self.num_heads == 0 {
            return bad("channels, hidden_dim and num_heads must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.depth < 2 {
            return bad(format!("depth {} < 2", self.depth));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.label_dropout_prob) {
            return bad(format!(
                "label_dropout_prob {} outside [0, 1]",
                self.label_dropout_prob
            ));
        }
        if self.frequency_dim < 2 || self.mlp_ratio == 0 {
            return bad("frequency_dim >= 2 and mlp_ratio >= 1 required".into());
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.input_height / self.patch_size) * (self.input_width / self.patch_size)
    }

    pub fn patch_width(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Label id reserved for "no class".
    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names, shapes and offsets of every tensor in a flat parameter buffer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl ParamLayout {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> Slot {
        let (rows, cols) = match shape {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => panic!("parameters are vectors or matrices"),
        };
        let slot = Slot {
            offset: self.len,
            rows,
            cols,
        };
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
        });
        self.len += rows * cols;
        slot
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// A flat parameter (or gradient, or optimizer moment) buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<S> {
    pub layout: Arc<ParamLayout>,
    pub data: Vec<S>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let data = vec![S::zero(); layout.len()];
        ParamSet { layout, data }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.layout.clone())
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn get(&self, name: &str) -> Option<&[S]> {
        self.layout
            .entries()
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.data[e.offset..e.offset + e.len()])
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }

    pub fn write_to(&self, prefix: &str, archive: &mut Archive) {
        for e in self.layout.entries() {
            archive.push(
                format!("{prefix}{}", e.name),
                &e.shape,
                &self.data[e.offset..e.offset + e.len()],
            );
        }
    }

    /// Reads every entry of `layout` under `prefix`, checking shapes.
    pub fn read_from(prefix: &str, archive: &Archive, layout: Arc<ParamLayout>) -> Result<Self> {
        let mut set = Self::zeros(layout.clone());
        for e in layout.entries() {
            let name = format!("{prefix}{}", e.name);
            let t = archive.get(&name)?;
            if t.shape != e.shape {
                return Err(Error::ParamMismatch(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape, e.shape
                )));
            }
            let v = t.to_vec::<S>()?;
            set.data[e.offset..e.offset + e.len()].copy_from_slice(&v);
        }
        Ok(set)
    }
}

/// Per-sample conditioning: model-time values and class ids (the id
/// `num_classes` is the null label).
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub times: &'a [f64],
    pub class_ids: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    pub prediction: Array4<S>,
    /// Requested block outputs, keyed by 1-based layer index, `[B, N, D]`.
    pub taps: BTreeMap<usize, Array3<S>>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    modv: Array2<S>,
    h1: Array2<S>,
    rstd1: Array1<S>,
    u1: Array2<S>,
    attn: AttentionCache<S>,
    a: Array2<S>,
    h2: Array2<S>,
    rstd2: Array1<S>,
    u2: Array2<S>,
    f: Array2<S>,
    gl: Array2<S>,
    m: Array2<S>,
}

/// Activations retained by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    batch: usize,
    patches: Array2<S>,
    freq: Array2<S>,
    t_hidden: Array2<S>,
    t_act: Array2<S>,
    class_ids: Vec<usize>,
    cond: Array2<S>,
    cond_act: Array2<S>,
    blocks: Vec<BlockCache<S>>,
    final_mod: Array2<S>,
    final_h: Array2<S>,
    final_rstd: Array1<S>,
    final_u: Array2<S>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Eval,
    Train,
    TapsOnly,
}

struct Trunk<S> {
    x: Array2<S>,
    taps: BTreeMap<usize, Array3<S>>,
    cache: Option<ForwardCache<S>>,
}

#[derive(Debug, Clone)]
pub struct DiffusionTransformer {
    config: ModelConfig,
    layout: Arc<ParamLayout>,
    pos: Array2<f64>,
    patch_embed: Linear,
    t_in: Linear,
    t_out: Linear,
    class_table: Slot,
    blocks: Vec<Block>,
    final_ada: Linear,
    final_out: Linear,
}

impl DiffusionTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let mut layout = ParamLayout::default();
        let patch_embed = Linear::new(&mut layout, "patch_embed", config.patch_width(), d);
        let t_in = Linear::new(&mut layout, "t_embed.mlp.0", config.frequency_dim, d);
        let t_out = Linear::new(&mut layout, "t_embed.mlp.2", d, d);
        let class_table = layout.add("y_embed.table", &[config.num_classes + 1, d]);
        let blocks = (0..config.depth)
            .map(|i| Block {
                ada: Linear::new(&mut layout, &format!("blocks.{i}.ada"), d, 6 * d),
                qkv: Linear::new(&mut layout, &format!("blocks.{i}.attn.qkv"), d, 3 * d),
                proj: Linear::new(&mut layout, &format!("blocks.{i}.attn.proj"), d, d),
                fc1: Linear::new(&mut layout, &format!("blocks.{i}.mlp.fc1"), d, config.mlp_ratio * d),
                fc2: Linear::new(&mut layout, &format!("blocks.{i}.mlp.fc2"), config.mlp_ratio * d, d),
            })
            .collect();
        let final_ada = Linear::new(&mut layout, "final.ada", d, 2 * d);
        let final_out = Linear::new(&mut layout, "final.linear", d, config.patch_width());
        let grid = (
            config.input_height / config.patch_size,
            config.input_width / config.patch_size,
        );
        Ok(DiffusionTransformer {
            pos: sincos_position_table(d, grid.0, grid.1),
            config,
            layout: Arc::new(layout),
            patch_embed,
            t_in,
            t_out,
            class_table,
            blocks,
            final_ada,
            final_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    /// Standard initialisation: Xavier-uniform linear weights, N(0, 0.02)
    /// timestep MLP and class table, zero modulation and output head.
    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<S> {
        let mut set = ParamSet::zeros(self.layout.clone());
        let p = &mut set.data;
        self.patch_embed.init(Init::XavierUniform, p, rng);
        self.t_in.init(Init::Normal(0.02), p, rng);
        self.t_out.init(Init::Normal(0.02), p, rng);
        Init::Normal(0.02).fill(self.class_table, p, rng);
        for b in &self.blocks {
            b.ada.init(Init::Zeros, p, rng);
            b.qkv.init(Init::XavierUniform, p, rng);
            b.proj.init(Init::XavierUniform, p, rng);
            b.fc1.init(Init::XavierUniform, p, rng);
            b.fc2.init(Init::XavierUniform, p, rng);
        }
        self.final_ada.init(Init::Zeros, p, rng);
        self.final_out.init(Init::Zeros, p, rng);
        set
    }

    fn check_inputs<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        x: &Array4<S>,
        cond: Conditioning<'_>,
        taps: &[usize],
    ) -> Result<()> {
        let c = &self.config;
        if params.data.len() != self.layout.len() {
            return Err(Error::ParamMismatch(format!(
                "{} parameters given, model has {}",
                params.data.len(),
                self.layout.len()
            )));
        }
        let (b, ch, h, w) = x.dim();
        if (ch, h, w) != (c.channels, c.input_height, c.input_width) {
            return Err(Error::ShapeMismatch {
                op: "forward input",
                lhs: x.shape().to_vec(),
                rhs: vec![b, c.channels, c.input_height, c.input_width],
            });
        }
        if cond.times.len() != b || cond.class_ids.len() != b {
            return Err(Error::ShapeMismatch {
                op: "conditioning",
                lhs: vec![cond.times.len(), cond.class_ids.len()],
                rhs: vec![b, b],
            });
        }
        if let Some(&id) = cond.class_ids.iter().find(|&&id| id > c.num_classes) {
            return Err(Error::out_of_range(
                "class id",
                id as f64,
                format!("[0, {}]", c.num_classes),
            ));
        }
        if let Some(&l) = taps.iter().find(|&&l| l == 0 || l > c.depth) {
            return Err(Error::out_of_range(
                "tap layer",
                l as f64,
                format!("[1, {}]", c.depth),
            ));
        }
        Ok(())
    }

    /// Evaluation forward pass returning the prediction and the requested taps.
    pub fn forward_with_taps<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        x: &Array4<S>,
        cond: Conditioning<'_>,
        taps: &[usize],
    ) -> Result<ForwardOutput<S>> {
        self.check_inputs(params, x, cond, taps)?;
        let trunk = self.trunk(&params.data, x, cond, taps, Mode::Eval)?;
        let prediction = self.head(&params.data, &trunk.x, cond, None)?;
        Ok(ForwardOutput {
            prediction,
            taps: trunk.taps,
        })
    }

    /// Runs only as many blocks as the deepest requested tap needs.
    pub fn forward_taps<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        x: &Array4<S>,
        cond: Conditioning<'_>,
        taps: &[usize],
    ) -> Result<BTreeMap<usize, Array3<S>>> {
        self.check_inputs(params, x, cond, taps)?;
        Ok(self.trunk(&params.data, x, cond, taps, Mode::TapsOnly)?.taps)
    }

    /// Training forward pass; the cache feeds [`Self::backward`].
    pub fn forward_train<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        x: &Array4<S>,
        cond: Conditioning<'_>,
        taps: &[usize],
    ) -> Result<(ForwardOutput<S>, ForwardCache<S>)> {
        self.check_inputs(params, x, cond, taps)?;
        let trunk = self.trunk(&params.data, x, cond, taps, Mode::Train)?;
        let mut cache = trunk.cache.expect("train mode keeps a cache");
        let prediction = self.head(&params.data, &trunk.x, cond, Some(&mut cache))?;
        Ok((
            ForwardOutput {
                prediction,
                taps: trunk.taps,
            },
            cache,
        ))
    }

    /// Timestep embedding `MLP(freq(t))` of width `hidden_dim`.
    pub fn embed_timestep<S: Scalar>(&self, params: &ParamSet<S>, t: f64) -> Array1<S> {
        let freq = Array2::from_shape_vec(
            (1, self.config.frequency_dim),
            timestep_frequencies(t, self.config.frequency_dim)
                .into_iter()
                .map(S::of)
                .collect(),
        )
        .expect("frequency width");
        let h = self.t_in.forward(&params.data, freq.view()).mapv(layers::silu);
        self.t_out.forward(&params.data, h.view()).row(0).to_owned()
    }

    fn trunk<S: Scalar>(
        &self,
        p: &[S],
        x: &Array4<S>,
        cond: Conditioning<'_>,
        taps: &[usize],
        mode: Mode,
    ) -> Result<Trunk<S>> {
        let cfg = &self.config;
        let batch = x.len_of(Axis(0));
        let tokens = cfg.tokens();
        let d = cfg.hidden_dim;
        let keep = mode == Mode::Train;
        let tap_set: BTreeSet<usize> = taps.iter().copied().collect();

        let patches = patchify(x, cfg.patch_size)?
            .into_shape_with_order((batch * tokens, cfg.patch_width()))
            .expect("contiguous patches");
        let mut h = self.patch_embed.forward(p, patches.view());
        let pos = self.pos.mapv(S::of);
        for (i, mut row) in h.rows_mut().into_iter().enumerate() {
            row += &pos.row(i % tokens);
        }

        let freq = frequency_matrix(cond.times, cfg.frequency_dim);
        let t_hidden = self.t_in.forward(p, freq.view());
        let t_act = t_hidden.mapv(layers::silu);
        let mut c = self.t_out.forward(p, t_act.view());
        let table = self.class_table.mat(p);
        for (b, &id) in cond.class_ids.iter().enumerate() {
            let mut row = c.row_mut(b);
            row += &table.row(id);
        }
        let c_act = c.mapv(layers::silu);

        let last = match mode {
            Mode::TapsOnly => tap_set.last().copied().unwrap_or(0),
            _ => cfg.depth,
        };
        let mut tap_out = BTreeMap::new();
        let mut caches = Vec::with_capacity(if keep { cfg.depth } else { 0 });
        for (i, block) in self.blocks.iter().take(last).enumerate() {
            let (next, cache) = self.block_forward(block, p, h, c_act.view(), batch, keep);
            h = next;
            let layer = i + 1;
            if tap_set.contains(&layer) {
                let tap = match cfg.tap_point {
                    TapPoint::Residual => h.clone(),
                    TapPoint::MlpOutput => cache
                        .as_ref()
                        .map(|c| c.m.clone())
                        .expect("MlpOutput taps keep the block cache"),
                };
                tap_out.insert(
                    layer,
                    tap.into_shape_with_order((batch, tokens, d))
                        .expect("contiguous tap"),
                );
            }
            if let (true, Some(c)) = (keep, cache) {
                caches.push(c);
            }
        }

        let cache = keep.then(|| ForwardCache {
            batch,
            patches,
            freq,
            t_hidden,
            t_act,
            class_ids: cond.class_ids.to_vec(),
            cond: c,
            cond_act: c_act,
            blocks: caches,
            final_mod: Array2::zeros((0, 0)),
            final_h: Array2::zeros((0, 0)),
            final_rstd: Array1::zeros(0),
            final_u: Array2::zeros((0, 0)),
        });
        Ok(Trunk {
            x: h,
            taps: tap_out,
            cache,
        })
    }

    fn block_forward<S: Scalar>(
        &self,
        blk: &Block,
        p: &[S],
        mut x: Array2<S>,
        c_act: ArrayView2<S>,
        batch: usize,
        keep: bool,
    ) -> (Array2<S>, Option<BlockCache<S>>) {
        let tokens = self.config.tokens();
        let d = self.config.hidden_dim;
        let modv = blk.ada.forward(p, c_act);
        let chunk = |i: usize| modv.slice(s![.., i * d..(i + 1) * d]);

        let (h1, rstd1) = layers::layer_norm(x.view());
        let u1 = layers::modulate(h1.view(), chunk(0), chunk(1), tokens);
        let qkv = blk.qkv.forward(p, u1.view());
        let (ctx, probs) = layers::attention(&qkv, batch, tokens, self.config.num_heads, keep);
        let a = blk.proj.forward(p, ctx.view());
        layers::gated_add(&mut x, chunk(2), a.view(), tokens);

        let (h2, rstd2) = layers::layer_norm(x.view());
        let u2 = layers::modulate(h2.view(), chunk(3), chunk(4), tokens);
        let f = blk.fc1.forward(p, u2.view());
        let gl = f.mapv(layers::gelu);
        let m = blk.fc2.forward(p, gl.view());
        layers::gated_add(&mut x, chunk(5), m.view(), tokens);

        let need_m = self.config.tap_point == TapPoint::MlpOutput;
        let cache = (keep || need_m).then(|| BlockCache {
            modv: modv.clone(),
            h1,
            rstd1,
            u1,
            attn: AttentionCache { qkv, probs, ctx },
            a,
            h2,
            rstd2,
            u2,
            f,
            gl,
            m,
        });
        (x, cache)
    }

    fn head<S: Scalar>(
        &self,
        p: &[S],
        x: &Array2<S>,
        cond: Conditioning<'_>,
        cache: Option<&mut ForwardCache<S>>,
    ) -> Result<Array4<S>> {
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        let batch = cond.times.len();
        let tokens = cfg.tokens();
        let c_act = match &cache {
            Some(c) => c.cond_act.clone(),
            None => self.condition(p, cond).mapv(layers::silu),
        };
        let fmod = self.final_ada.forward(p, c_act.view());
        let (fh, frstd) = layers::layer_norm(x.view());
        let fu = layers::modulate(
            fh.view(),
            fmod.slice(s![.., 0..d]),
            fmod.slice(s![.., d..2 * d]),
            tokens,
        );
        let out = self.final_out.forward(p, fu.view());
        let out = out
            .into_shape_with_order((batch, tokens, cfg.patch_width()))
            .expect("contiguous output");
        if let Some(c) = cache {
            c.final_mod = fmod;
            c.final_h = fh;
            c.final_rstd = frstd;
            c.final_u = fu;
        }
        unpatchify(
            &out,
            cfg.channels,
            cfg.input_height,
            cfg.input_width,
            cfg.patch_size,
        )
    }

    fn condition<S: Scalar>(&self, p: &[S], cond: Conditioning<'_>) -> Array2<S> {
        let f = self.config.frequency_dim;
        let freq = frequency_matrix(cond.times, f);
        let h = self.t_in.forward(p, freq.view()).mapv(layers::silu);
        let mut c = self.t_out.forward(p, h.view());
        let table = self.class_table.mat(p);
        for (b, &id) in cond.class_ids.iter().enumerate() {
            let mut row = c.row_mut(b);
            row += &table.row(id);
        }
        c
    }

    /// Reverse pass. `d_prediction` is the loss gradient w.r.t. the
    /// prediction (if the prediction feeds the loss); `d_taps` holds
    /// gradients w.r.t. tapped activations. Parameter gradients accumulate
    /// into `grads`.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        cache: &ForwardCache<S>,
        d_prediction: Option<&Array4<S>>,
        d_taps: &BTreeMap<usize, Array3<S>>,
        grads: &mut ParamSet<S>,
    ) -> Result<()> {
        let cfg = &self.config;
        let p = &params.data[..];
        let g = &mut grads.data[..];
        if g.len() != p.len() {
            return Err(Error::ParamMismatch("gradient buffer layout".into()));
        }
        let batch = cache.batch;
        let tokens = cfg.tokens();
        let d = cfg.hidden_dim;
        let rows = batch * tokens;
        for (&l, dt) in d_taps {
            if l == 0 || l > cfg.depth || cache.blocks.len() < l {
                return Err(Error::out_of_range("tap layer", l as f64, "cached layers"));
            }
            if dt.dim() != (batch, tokens, d) {
                return Err(Error::ShapeMismatch {
                    op: "tap gradient",
                    lhs: dt.shape().to_vec(),
                    rhs: vec![batch, tokens, d],
                });
            }
        }

        let mut dc_act: Array2<S> = Array2::zeros((batch, d));
        let mut dx: Array2<S> = Array2::zeros((rows, d));

        if let Some(dpred) = d_prediction {
            let dtok = patchify(dpred, cfg.patch_size)?
                .into_shape_with_order((rows, cfg.patch_width()))
                .expect("contiguous grad");
            let du = self
                .final_out
                .backward(p, g, cache.final_u.view(), dtok.view(), true)
                .expect("dx requested");
            let mut dmod = Array2::zeros((batch, 2 * d));
            let (dshift, dscale) = dmod.multi_slice_mut((s![.., 0..d], s![.., d..2 * d]));
            let dh = layers::modulate_backward(
                cache.final_h.view(),
                cache.final_mod.slice(s![.., d..2 * d]),
                du.view(),
                tokens,
                dshift,
                dscale,
            );
            dx = layers::layer_norm_backward(cache.final_h.view(), cache.final_rstd.view(), dh.view());
            dc_act += &self
                .final_ada
                .backward(p, g, cache.cond_act.view(), dmod.view(), true)
                .expect("dx requested");
        }

        for (i, blk) in self.blocks.iter().enumerate().rev() {
            let layer = i + 1;
            let tap_grad = d_taps.get(&layer).map(|t| {
                t.view()
                    .into_shape_with_order((rows, d))
                    .expect("contiguous tap grad")
            });
            if cfg.tap_point == TapPoint::Residual {
                if let Some(t) = &tap_grad {
                    dx += t;
                }
            }
            let Some(bc) = cache.blocks.get(i) else {
                continue;
            };
            let mlp_grad = match cfg.tap_point {
                TapPoint::MlpOutput => tap_grad,
                TapPoint::Residual => None,
            };
            dx = self.block_backward(blk, p, g, bc, dx, mlp_grad, cache.cond_act.view(), &mut dc_act, batch);
        }

        self.patch_embed
            .backward(p, g, cache.patches.view(), dx.view(), false);

        let dc = &dc_act * &cache.cond.mapv(layers::silu_grad);
        {
            let mut table = self.class_table.mat_mut(g);
            for (b, &id) in cache.class_ids.iter().enumerate() {
                let mut row = table.row_mut(id);
                row += &dc.row(b);
            }
        }
        let dt_act = self
            .t_out
            .backward(p, g, cache.t_act.view(), dc.view(), true)
            .expect("dx requested");
        let dt_hidden = &dt_act * &cache.t_hidden.mapv(layers::silu_grad);
        self.t_in
            .backward(p, g, cache.freq.view(), dt_hidden.view(), false);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward<S: Scalar>(
        &self,
        blk: &Block,
        p: &[S],
        g: &mut [S],
        bc: &BlockCache<S>,
        dx_out: Array2<S>,
        d_mlp_tap: Option<ArrayView2<S>>,
        c_act: ArrayView2<S>,
        dc_act: &mut Array2<S>,
        batch: usize,
    ) -> Array2<S> {
        let tokens = self.config.tokens();
        let heads = self.config.num_heads;
        let d = self.config.hidden_dim;
        let chunk = |i: usize| bc.modv.slice(s![.., i * d..(i + 1) * d]);
        let mut dmod = Array2::zeros((batch, 6 * d));
        let (dsh1, dsc1, dg1, dsh2, dsc2, dg2) = dmod.multi_slice_mut((
            s![.., 0..d],
            s![.., d..2 * d],
            s![.., 2 * d..3 * d],
            s![.., 3 * d..4 * d],
            s![.., 4 * d..5 * d],
            s![.., 5 * d..6 * d],
        ));

        let mut dm = layers::gated_add_backward(chunk(5), bc.m.view(), dx_out.view(), tokens, dg2);
        if let Some(t) = d_mlp_tap {
            dm += &t;
        }
        let dgl = blk.fc2.backward(p, g, bc.gl.view(), dm.view(), true).expect("dx");
        let df = &dgl * &bc.f.mapv(layers::gelu_grad);
        let du2 = blk.fc1.backward(p, g, bc.u2.view(), df.view(), true).expect("dx");
        let dh2 = layers::modulate_backward(bc.h2.view(), chunk(4), du2.view(), tokens, dsh2, dsc2);
        let dx_mid = dx_out + layers::layer_norm_backward(bc.h2.view(), bc.rstd2.view(), dh2.view());

        let da = layers::gated_add_backward(chunk(2), bc.a.view(), dx_mid.view(), tokens, dg1);
        let dctx = blk.proj.backward(p, g, bc.attn.ctx.view(), da.view(), true).expect("dx");
        let dqkv = layers::attention_backward(&bc.attn, dctx.view(), batch, tokens, heads);
        let du1 = blk.qkv.backward(p, g, bc.u1.view(), dqkv.view(), true).expect("dx");
        let dh1 = layers::modulate_backward(bc.h1.view(), chunk(1), du1.view(), tokens, dsh1, dsc1);
        let dx_in = dx_mid + layers::layer_norm_backward(bc.h1.view(), bc.rstd1.view(), dh1.view());

        *dc_act += &blk.ada.backward(p, g, c_act, dmod.view(), true).expect("dx");
        dx_in
    }
}

fn frequency_matrix<S: Scalar>(times: &[f64], dim: usize) -> Array2<S> {
    let mut freq = Array2::zeros((times.len(), dim));
    for (mut row, &t) in freq.rows_mut().into_iter().zip(times) {
        let f = timestep_frequencies(t, dim);
        row.iter_mut().zip(&f).for_each(|(o, &v)| *o = S::of(v));
    }
    freq
}
