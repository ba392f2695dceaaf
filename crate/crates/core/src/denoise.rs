//! Flow-matching denoiser over a block stack: the velocity model, the
//! Euler sampler, stochastic condition dropout, the channel-concatenation
//! baseline, and a toy training task.
//!
//! Conventions: `x_t = (1 − t)·x0 + t·ε`, target velocity `u = ε − x0`,
//! sampling integrates from `t = 1` (noise) to `t = 0` (data).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{LowRankAdapter, ProjectionSet, Stream, StreamWeights};
use crate::autodiff::{Tape, Var};
use crate::block::{
    apply_lora, forward_block, BlockContext, BlockParams, BlockState, LinearId,
    LoraTargets, Mlp, StaticSource, TimestepEmbedder, Variant,
};
use crate::cache::{ConditionFingerprint, FingerprintBuilder, StaticCache};
use crate::cost::{analytic_block_macs, CostDims, CostReport, MacCounter, MacKind, MacTally, Meter, Pathway};
use crate::error::{rejected, Error, Result};
use crate::linalg::{c, load_tsw, save_tsw, silu, Matrix, Real};
use crate::tokens::{
    embed_mask, embed_text, grid_positions, patch_feature_indices, LabelGrid, Modality, RopeTable,
    StubEmbedder, TokenSequence,
};

/// Shape of a denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels per image token.
    pub d_in: usize,
    pub d: usize,
    pub heads: usize,
    pub depth: usize,
    pub variant: Variant,
    /// Image grid in patches, `(rows, cols)`.
    pub grid: (usize, usize),
    pub patch_size: usize,
    /// Mask label alphabet size, background included.
    pub classes: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: LoraTargets,
    pub mask_uses_text_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 8,
            d: 64,
            heads: 4,
            depth: 4,
            variant: Variant::Decoupled,
            grid: (8, 8),
            patch_size: 1,
            classes: 4,
            vocab: 12,
            max_text_len: 8,
            lora_rank: 8,
            lora_alpha: 8.0,
            lora_targets: LoraTargets::AllAttention,
            mask_uses_text_weights: true,
        }
    }
}

impl ModelConfig {
    /// Narrow two-block model used for the toy training runs.
    pub fn toy_train() -> Self {
        Self {
            d: 32,
            heads: 2,
            depth: 2,
            lora_alpha: 32.0,
            ..Self::default()
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible into {} heads",
                self.d, self.heads
            )));
        }
        if (self.d / self.heads) % 2 != 0 {
            return Err(Error::Config("head_dim must be even".into()));
        }
        if self.d_in == 0 || self.classes < 2 || self.vocab == 0 || self.patch_size == 0 {
            return Err(Error::Config("d_in, vocab and patch_size must be positive, classes at least 2".into()));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d {
            return Err(Error::Config(format!(
                "adapter rank {} must lie in 1..={}",
                self.lora_rank, self.d
            )));
        }
        Ok(())
    }
}

/// All weights of a denoiser. Adapters are kept separate from the block
/// weights they adapt; [`Model::new`] merges them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    /// `d_in × d`.
    pub img_in: Matrix<T>,
    /// `d × d_in`.
    pub img_out: Matrix<T>,
    /// `d × 2d` head producing the output shift and scale.
    pub final_mod: Matrix<T>,
    /// `1 × 2d`.
    pub final_mod_b: Matrix<T>,
    pub time: TimestepEmbedder<T>,
    /// `2d × d` fusion projection of the channel-concat baseline.
    pub concat_proj: Matrix<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// Adapters per block.
    pub adapters: Vec<Vec<(LinearId, LowRankAdapter<T>)>>,
    pub mask_embedder: StubEmbedder<T>,
    pub text_embedder: StubEmbedder<T>,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

impl ModelParams<f64> {
    /// Random base weights standing in for a pretrained backbone, zeroed
    /// output head and `B = 0` adapters.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let s = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut adapters = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let mut set = || ProjectionSet {
                wq: normal(&mut rng, d, d, s),
                wk: normal(&mut rng, d, d, s),
                wv: normal(&mut rng, d, d, s),
            };
            let streams = [set(), set(), set()];
            let mut attn = StreamWeights::new(streams, normal(&mut rng, d, d, s), cfg.heads)?;
            attn.mask_uses_text_weights = cfg.mask_uses_text_weights;
            let mut mlp = || Mlp {
                w1: normal(&mut rng, d, 4 * d, s),
                w2: normal(&mut rng, 4 * d, d, 0.5 * s),
            };
            let mlps = [mlp(), mlp(), mlp()];
            let w_mod = normal(&mut rng, d, 18 * d, 0.1 * s);
            blocks.push(BlockParams::new(attn, mlps, w_mod, vec![0.0; 18 * d], cfg.variant)?);
            let r = cfg.lora_rank;
            let mut ad = Vec::new();
            for id in cfg.lora_targets.linears() {
                let (i, o) = id.shape(d);
                let a = normal(&mut rng, r, o, 1.0 / (o as f64).sqrt());
                ad.push((id, LowRankAdapter::new(a, Matrix::zeros(i, r), cfg.lora_alpha)?));
            }
            adapters.push(ad);
        }
        let in_dim = StubEmbedder::<f64>::visual_in_dim(cfg.patch_size, cfg.classes);
        let mut time = TimestepEmbedder::zeros(d);
        time.w1 = normal(&mut rng, d, d, s);
        time.w2 = normal(&mut rng, d, d, s);
        let mut concat_proj = Matrix::zeros(2 * d, d);
        for i in 0..d {
            concat_proj[(i, i)] = 1.0;
        }
        let mask_embedder = StubEmbedder::visual(cfg.patch_size, cfg.classes, normal(&mut rng, in_dim, d, 1.0))?;
        let text_embedder = StubEmbedder::text(cfg.max_text_len, normal(&mut rng, cfg.vocab, d, 1.0));
        let p = Self {
            img_in: normal(&mut rng, cfg.d_in, d, 1.0 / (cfg.d_in as f64).sqrt()),
            img_out: Matrix::zeros(d, cfg.d_in),
            final_mod: Matrix::zeros(d, 2 * d),
            final_mod_b: Matrix::zeros(1, 2 * d),
            time,
            concat_proj,
            blocks,
            adapters,
            mask_embedder,
            text_embedder,
            cfg,
        };
        p.validate()?;
        Ok(p)
    }
}

impl ModelParams<f64> {
    /// Adds `std·N(0, 1)` noise to every trainable matrix and draws the
    /// modulation biases from the same scale, so that an untrained model
    /// exercises every path. Stands in for fine-tuned weights.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in trainables_mut(self) {
            let (r, c) = m.shape();
            *m = m.add(&normal(&mut rng, r, c, std));
        }
        for b in &mut self.blocks {
            for v in &mut b.b_mod {
                *v = 2.0 * std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

const CHECKPOINT_MANIFEST: &str = "manifest.txt";

impl<T: Real> ModelParams<T> {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let (d, d_in) = (self.cfg.d, self.cfg.d_in);
        let checks = [
            ("img_in", self.img_in.shape(), (d_in, d)),
            ("img_out", self.img_out.shape(), (d, d_in)),
            ("final_mod", self.final_mod.shape(), (d, 2 * d)),
            ("final_mod_b", self.final_mod_b.shape(), (1, 2 * d)),
            ("concat_proj", self.concat_proj.shape(), (2 * d, d)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Config(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        if self.blocks.len() != self.cfg.depth || self.adapters.len() != self.cfg.depth {
            return Err(Error::Config("block count differs from depth".into()));
        }
        for b in &self.blocks {
            b.validate()?;
            if b.d() != d {
                return Err(Error::Config("block width differs from model width".into()));
            }
        }
        if self.mask_embedder.d() != d || self.text_embedder.d() != d {
            return Err(Error::Config("embedder width differs from model width".into()));
        }
        Ok(())
    }

    /// Every matrix under a stable name, in a fixed order.
    pub fn named_matrices(&self) -> Vec<(String, Matrix<T>)> {
        let mut out = vec![
            ("img_in".to_string(), self.img_in.clone()),
            ("img_out".into(), self.img_out.clone()),
            ("final_mod".into(), self.final_mod.clone()),
            ("final_mod_b".into(), self.final_mod_b.clone()),
            ("time.w1".into(), self.time.w1.clone()),
            ("time.b1".into(), Matrix::row_vector(self.time.b1.clone())),
            ("time.w2".into(), self.time.w2.clone()),
            ("time.b2".into(), Matrix::row_vector(self.time.b2.clone())),
            ("concat_proj".into(), self.concat_proj.clone()),
            ("mask_embedder".into(), self.mask_embedder.projection.clone()),
            ("text_embedder".into(), self.text_embedder.projection.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, m) in b.reset_lora().named_matrices() {
                out.push((format!("block{i}.{n}"), m));
            }
            for (id, a) in &self.adapters[i] {
                out.push((format!("block{i}.lora.{}.a", id.name()), a.a.clone()));
                out.push((format!("block{i}.lora.{}.b", id.name()), a.b.clone()));
            }
        }
        out
    }

    /// Content hash of all weights; part of every cache fingerprint.
    pub fn weight_digest(&self) -> u128 {
        let mut h = FingerprintBuilder::default();
        h.bytes(self.cfg.variant.code().as_bytes());
        h.bytes(&[self.cfg.mask_uses_text_weights as u8]);
        for (name, m) in self.named_matrices() {
            h.bytes(name.as_bytes());
            h.matrix(&m);
        }
        h.finish().0
    }

    /// Writes every matrix as `TSW1` plus a manifest of names, shapes and
    /// the configuration. Values are stored as 32-bit floats.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("variant {}\n", self.cfg.variant.code()));
        let cfg = serde_json::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        manifest.push_str(&format!("config {cfg}\n"));
        for (name, m) in self.named_matrices() {
            save_tsw(&dir.join(format!("{name}.tsw")), &m)?;
            manifest.push_str(&format!("matrix {name} {} {}\n", m.rows(), m.cols()));
        }
        std::fs::write(dir.join(CHECKPOINT_MANIFEST), manifest)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ModelParams::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = std::fs::read_to_string(&path)?;
        let bad = |reason: String| Error::Format {
            path: path.clone(),
            reason,
        };
        let mut cfg: Option<ModelConfig> = None;
        let mut shapes = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            match key {
                "variant" => {}
                "config" => {
                    cfg = Some(serde_json::from_str(rest).map_err(|e| bad(e.to_string()))?);
                }
                "matrix" => {
                    let f: Vec<&str> = rest.split_whitespace().collect();
                    let [name, r, c] = f[..] else {
                        return Err(bad(format!("bad matrix line {line:?}")));
                    };
                    let r: usize = r.parse().map_err(|_| bad(format!("bad rows in {line:?}")))?;
                    let c: usize = c.parse().map_err(|_| bad(format!("bad cols in {line:?}")))?;
                    shapes.insert(name.to_string(), (r, c));
                }
                _ => return Err(bad(format!("unknown manifest key {key:?}"))),
            }
        }
        let cfg = cfg.ok_or_else(|| bad("missing config line".into()))?;
        let get = |name: &str| -> Result<Matrix<T>> {
            let want = *shapes
                .get(name)
                .ok_or_else(|| bad(format!("manifest lacks {name}")))?;
            let m = load_tsw::<T>(&dir.join(format!("{name}.tsw")))?;
            if m.shape() != want {
                return Err(bad(format!("{name} is {:?}, manifest says {want:?}", m.shape())));
            }
            Ok(m)
        };
        let mut blocks = Vec::new();
        let mut adapters = Vec::new();
        for i in 0..cfg.depth {
            let mut b = BlockParams::from_named(|n| get(&format!("block{i}.{n}")), cfg.heads, cfg.variant)?;
            b.attn.mask_uses_text_weights = cfg.mask_uses_text_weights;
            blocks.push(b);
            let mut ad = Vec::new();
            for id in cfg.lora_targets.linears() {
                let a = get(&format!("block{i}.lora.{}.a", id.name()))?;
                let bm = get(&format!("block{i}.lora.{}.b", id.name()))?;
                ad.push((id, LowRankAdapter::new(a, bm, cfg.lora_alpha)?));
            }
            adapters.push(ad);
        }
        let time = TimestepEmbedder {
            w1: get("time.w1")?,
            b1: get("time.b1")?.into_vec(),
            w2: get("time.w2")?,
            b2: get("time.b2")?.into_vec(),
        };
        let p = Self {
            img_in: get("img_in")?,
            img_out: get("img_out")?,
            final_mod: get("final_mod")?,
            final_mod_b: get("final_mod_b")?,
            time,
            concat_proj: get("concat_proj")?,
            blocks,
            adapters,
            mask_embedder: StubEmbedder::visual(cfg.patch_size, cfg.classes, get("mask_embedder")?)?,
            text_embedder: StubEmbedder::text(cfg.max_text_len, get("text_embedder")?),
            cfg,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg.clone(),
            img_in: self.img_in.cast(),
            img_out: self.img_out.cast(),
            final_mod: self.final_mod.cast(),
            final_mod_b: self.final_mod_b.cast(),
            time: self.time.cast(),
            concat_proj: self.concat_proj.cast(),
            blocks: self.blocks.iter().map(BlockParams::cast).collect(),
            adapters: self
                .adapters
                .iter()
                .map(|a| a.iter().map(|(id, ad)| (*id, ad.cast())).collect())
                .collect(),
            mask_embedder: self.mask_embedder.cast(),
            text_embedder: self.text_embedder.cast(),
        }
    }

    /// The same weights run under another attention layout.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut p = self.clone();
        p.cfg.variant = variant;
        for b in &mut p.blocks {
            b.variant = variant;
        }
        p
    }

    /// Embeds raw conditions; a missing condition becomes the null token
    /// set of `null`.
    pub fn embed_conditions(&self, cond: &CondInput, null: NullStyle) -> Result<Conditions<T>> {
        let d = self.cfg.d;
        let mask = match &cond.mask {
            Some(g) => embed_mask(g, &self.mask_embedder)?,
            None => null.tokens(Modality::Mask, d),
        };
        let text = match &cond.text {
            Some(ids) => embed_text(ids, &self.text_embedder)?,
            None => null.tokens(Modality::Text, d),
        };
        Ok(Conditions { text, mask })
    }
}

/// Raw conditions; `None` marks a dropped or absent condition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CondInput {
    pub mask: Option<LabelGrid>,
    pub text: Option<Vec<u32>>,
}

/// Embedded conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions<T> {
    pub text: TokenSequence<T>,
    pub mask: TokenSequence<T>,
}

impl<T: Real> Conditions<T> {
    pub fn fingerprint(&self, variant: Variant, weight_version: u128) -> ConditionFingerprint {
        ConditionFingerprint::new(&self.mask, &self.text, variant, weight_version)
    }
}

/// What replaces a dropped condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NullStyle {
    /// One all-zero token (at the grid origin for masks).
    ZeroToken,
    /// No tokens at all.
    Empty,
}

impl NullStyle {
    pub fn tokens<T: Real>(self, modality: Modality, d: usize) -> TokenSequence<T> {
        match self {
            NullStyle::Empty => TokenSequence::empty(modality, d),
            NullStyle::ZeroToken => TokenSequence::new(modality, Matrix::zeros(1, d), vec![(0, 0)])
                .expect("a single origin token is always valid"),
        }
    }
}

/// Channel-concatenation baseline: `[x | mask] · proj`, keeping width `d`.
pub fn concat_baseline_fuse<T: Real>(
    x_t: &TokenSequence<T>,
    mask: &TokenSequence<T>,
    proj: &Matrix<T>,
    meter: &Meter,
) -> Result<TokenSequence<T>> {
    if x_t.count() != mask.count() || x_t.positions() != mask.positions() {
        return Err(rejected(format!(
            "channel concat needs aligned tokens, got {} image and {} mask",
            x_t.count(),
            mask.count()
        )));
    }
    let d = x_t.d();
    if mask.d() != d || proj.shape() != (2 * d, d) {
        return Err(rejected(format!(
            "fusion projection {:?} does not fit width {d}",
            proj.shape()
        )));
    }
    let cat = Matrix::concat_cols(&[x_t.embeddings(), mask.embeddings()]);
    x_t.with_embeddings(meter.matmul(MacKind::Projection, &cat, proj))
}

/// A denoiser ready to run: adapters merged, weights hashed.
pub struct Model<T> {
    pub params: ModelParams<T>,
    blocks: Vec<BlockParams<T>>,
    weight_version: u128,
    positions: Vec<(i64, i64)>,
}

impl<T: Real> Model<T> {
    pub fn new(params: &ModelParams<T>) -> Result<Self> {
        params.validate()?;
        let blocks = params
            .blocks
            .iter()
            .zip(&params.adapters)
            .map(|(b, a)| apply_lora(b, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weight_version: params.weight_digest(),
            positions: grid_positions(params.cfg.grid.0, params.cfg.grid.1),
            params: params.clone(),
            blocks,
        })
    }

    pub fn variant(&self) -> Variant {
        self.params.cfg.variant
    }

    pub fn weight_version(&self) -> u128 {
        self.weight_version
    }

    pub fn blocks(&self) -> &[BlockParams<T>] {
        &self.blocks
    }

    pub fn fingerprint(&self, cond: &Conditions<T>) -> ConditionFingerprint {
        cond.fingerprint(self.variant(), self.weight_version)
    }

    /// Predicted velocity `v_θ(x_t, C_T, C_M, t)`.
    pub fn velocity(
        &self,
        x_t: &Matrix<T>,
        t: f64,
        cond: &Conditions<T>,
        source: StaticSource<'_, T>,
        meter: &Meter,
    ) -> Result<Matrix<T>> {
        let cfg = &self.params.cfg;
        if x_t.shape() != (cfg.n_tokens(), cfg.d_in) {
            return Err(rejected(format!(
                "noisy input is {:?}, model expects ({}, {})",
                x_t.shape(),
                cfg.n_tokens(),
                cfg.d_in
            )));
        }
        let outside = meter.on(Pathway::Outside);
        let t_emb = self.params.time.embed(t, &outside);
        let x = outside.matmul(MacKind::Projection, x_t, &self.params.img_in);
        let mut image = TokenSequence::new(Modality::Image, x, self.positions.clone())?;
        let d = cfg.d;
        let mask = match self.variant() {
            Variant::Holistic | Variant::HardDecoupled | Variant::Decoupled => cond.mask.clone(),
            Variant::Vanilla => TokenSequence::empty(Modality::Mask, d),
            Variant::ChannelConcat => {
                let is_null = cond.mask.count() != image.count()
                    && cond.mask.embeddings().as_slice().iter().all(|v| *v == T::zero());
                let fused_mask = if is_null {
                    TokenSequence::new(Modality::Mask, Matrix::zeros(image.count(), d), self.positions.clone())?
                } else {
                    cond.mask.clone()
                };
                image = concat_baseline_fuse(&image, &fused_mask, &self.params.concat_proj, &meter.on(Pathway::Dynamic))?;
                TokenSequence::empty(Modality::Mask, d)
            }
        };
        let mut state = BlockState {
            text: cond.text.clone(),
            image,
            mask,
            t_emb,
        };
        for (i, b) in self.blocks.iter().enumerate() {
            let ctx = BlockContext {
                block_id: i,
                text_condition: &cond.text,
                source,
            };
            state = forward_block(&state, b, &ctx, meter)?;
        }
        let s = Matrix::row_vector(state.t_emb.vector.iter().map(|&v| silu(v)).collect());
        let fm = outside
            .matmul(MacKind::Projection, &s, &self.params.final_mod)
            .add_row(self.params.final_mod_b.as_slice());
        let (shift, scale) = fm.as_slice().split_at(d);
        let h = crate::block::modulate(state.image.embeddings(), scale, shift)?;
        Ok(outside.matmul(MacKind::Projection, &h, &self.params.img_out))
    }
}

/// One flow-matching training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub x0: Matrix<T>,
    pub eps: Matrix<T>,
    pub t: f64,
    pub x_t: Matrix<T>,
    pub u_target: Matrix<T>,
}

impl<T: Real> FlowSample<T> {
    pub fn new(x0: Matrix<T>, eps: Matrix<T>, t: f64) -> Result<Self> {
        if x0.shape() != eps.shape() {
            return Err(rejected("x0 and noise shapes differ"));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(rejected(format!("t = {t} outside [0, 1]")));
        }
        let (a, b): (T, T) = (c(1.0 - t), c(t));
        let x_t = x0.zip_map(&eps, |x, e| a * x + b * e);
        let u_target = eps.sub(&x0);
        Ok(Self {
            x0,
            eps,
            t,
            x_t,
            u_target,
        })
    }
}

/// Euler sampler settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Serve the static pathway from the cache after its first computation.
    pub use_cache: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 28,
            seed: 42,
            variant: Variant::Decoupled,
            use_cache: true,
        }
    }
}

/// Sampler position.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseState<T> {
    pub x: Matrix<T>,
    pub step: usize,
    pub t: f64,
}

/// Standard-normal starting noise, drawn in 64-bit so that every precision
/// starts from the same values.
pub fn initial_noise<T: Real>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal(&mut rng, rows, cols, 1.0).cast()
}

/// Integrates the velocity field from `t = 1` to `t = 0` in `steps`
/// uniform Euler steps. `cache` is used only when `cfg.use_cache` is set.
pub fn sample<T: Real>(
    params: &ModelParams<T>,
    cond: &Conditions<T>,
    cfg: &SamplerConfig,
    cache: &StaticCache<T>,
    meter: &Meter,
) -> Result<Matrix<T>> {
    let model = Model::new(&params.with_variant(cfg.variant))?;
    sample_with(&model, cond, cfg, cache, meter)
}

/// [`sample`] with a prepared model.
pub fn sample_with<T: Real>(
    model: &Model<T>,
    cond: &Conditions<T>,
    cfg: &SamplerConfig,
    cache: &StaticCache<T>,
    meter: &Meter,
) -> Result<Matrix<T>> {
    if cfg.steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    if model.variant() != cfg.variant {
        return Err(Error::Config(format!(
            "model runs variant {}, sampler asked for {}",
            model.variant(),
            cfg.variant
        )));
    }
    let p = &model.params.cfg;
    let source = if cfg.use_cache {
        StaticSource::Cached {
            cache,
            fingerprint: model.fingerprint(cond),
        }
    } else {
        StaticSource::Recompute
    };
    let steps = cfg.steps as f64;
    let mut state = DenoiseState {
        x: initial_noise::<T>(p.n_tokens(), p.d_in, cfg.seed),
        step: 0,
        t: 1.0,
    };
    while state.step < cfg.steps {
        let t_next = (cfg.steps - state.step - 1) as f64 / steps;
        let v = model.velocity(&state.x, state.t, cond, source, meter)?;
        let dt: T = c(t_next - state.t);
        let x = state.x.zip_map(&v, |x, v| x + dt * v);
        if !x.is_finite() {
            return Err(Error::SamplerDiverged { step: state.step });
        }
        state = DenoiseState {
            x,
            step: state.step + 1,
            t: t_next,
        };
    }
    Ok(state.x)
}

/// Condition dropout settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub p: f64,
    pub null: NullStyle,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self {
            p: 0.1,
            null: NullStyle::ZeroToken,
        }
    }
}

impl DropoutPolicy {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
        }
        Ok(Self {
            p,
            ..Self::default()
        })
    }
}

/// Which conditions one dropout call removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DropEvents {
    pub text: bool,
    pub mask: bool,
}

/// Two independent Bernoulli(p) draws, text first.
pub fn draw_drops(p: f64, rng: &mut impl Rng) -> DropEvents {
    let u_text: f64 = rng.random();
    let u_mask: f64 = rng.random();
    DropEvents {
        text: u_text < p,
        mask: u_mask < p,
    }
}

/// Replaces each condition by its null token set with probability `p`,
/// independently. Consumes exactly two draws from `rng`.
pub fn drop_conditions<T: Real>(
    cond_t: &TokenSequence<T>,
    cond_m: &TokenSequence<T>,
    policy: &DropoutPolicy,
    rng: &mut impl Rng,
) -> (TokenSequence<T>, TokenSequence<T>, DropEvents) {
    let ev = draw_drops(policy.p, rng);
    let d = cond_t.d().max(cond_m.d());
    let t = if ev.text {
        policy.null.tokens(Modality::Text, d)
    } else {
        cond_t.clone()
    };
    let m = if ev.mask {
        policy.null.tokens(Modality::Mask, d)
    } else {
        cond_m.clone()
    };
    (t, m, ev)
}

/// One element of a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub sample: FlowSample<f64>,
    pub cond: CondInput,
}

/// Gradients of the trainable parameters, in [`trainable_names`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub names: Vec<String>,
    pub values: Vec<Matrix<f64>>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|m| m.as_slice().iter())
            .fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Names of the trainable parameters: adapters, embedders, the image
/// projections and the output modulation head.
pub fn trainable_names(p: &ModelParams<f64>) -> Vec<String> {
    let mut out = Vec::new();
    for (i, ad) in p.adapters.iter().enumerate() {
        for (id, _) in ad {
            out.push(format!("block{i}.lora.{}.a", id.name()));
            out.push(format!("block{i}.lora.{}.b", id.name()));
        }
    }
    for n in ["mask_embedder", "text_embedder", "img_in", "img_out", "final_mod", "final_mod_b"] {
        out.push(n.into());
    }
    out
}

/// Mutable views of the trainable parameters, in [`trainable_names`] order.
pub fn trainables_mut(p: &mut ModelParams<f64>) -> Vec<&mut Matrix<f64>> {
    let mut out: Vec<&mut Matrix<f64>> = Vec::new();
    for ad in p.adapters.iter_mut() {
        for (_, a) in ad.iter_mut() {
            out.push(&mut a.a);
            out.push(&mut a.b);
        }
    }
    out.push(&mut p.mask_embedder.projection);
    out.push(&mut p.text_embedder.projection);
    out.push(&mut p.img_in);
    out.push(&mut p.img_out);
    out.push(&mut p.final_mod);
    out.push(&mut p.final_mod_b);
    out
}

fn trainables(p: &ModelParams<f64>) -> Vec<&Matrix<f64>> {
    let mut out: Vec<&Matrix<f64>> = Vec::new();
    for ad in &p.adapters {
        for (_, a) in ad {
            out.push(&a.a);
            out.push(&a.b);
        }
    }
    out.extend([
        &p.mask_embedder.projection,
        &p.text_embedder.projection,
        &p.img_in,
        &p.img_out,
        &p.final_mod,
        &p.final_mod_b,
    ]);
    out
}

/// Mean squared velocity error over `batch`, evaluated with the plain
/// forward pass.
pub fn flow_loss_value<T: Real>(params: &ModelParams<T>, batch: &[(FlowSample<T>, Conditions<T>)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(rejected("empty batch"));
    }
    let model = Model::new(params)?;
    let mut total = 0.0;
    for (s, cond) in batch {
        let v = model.velocity(&s.x_t, s.t, cond, StaticSource::Recompute, &Meter::off())?;
        let diff = v.sub(&s.u_target);
        let n = diff.as_slice().len().max(1) as f64;
        total += diff.as_slice().iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>() / n;
    }
    Ok(total / batch.len() as f64)
}

/// Taped copy of a model's weights.
struct TapedModel {
    trainable: Vec<Var>,
    img_in: Var,
    img_out: Var,
    final_mod: Var,
    final_mod_b: Var,
    mask_proj: Var,
    text_table: Var,
    concat_proj: Var,
    blocks: Vec<TapedBlock>,
}

struct TapedBlock {
    /// `[stream][q, k, v]`.
    qkv: [[Var; 3]; 3],
    w_o: Var,
    mlp: [[Var; 2]; 3],
    w_mod: Var,
    b_mod: Var,
}

impl TapedModel {
    fn load(tape: &mut Tape, p: &ModelParams<f64>) -> Self {
        let trainable: Vec<Var> = trainables(p).into_iter().map(|m| tape.param(m.clone())).collect();
        let n_ad: usize = p.adapters.iter().map(|a| 2 * a.len()).sum();
        let mut next = n_ad;
        let mut take = || {
            next += 1;
            trainable[next - 1]
        };
        let (mask_proj, text_table, img_in, img_out, final_mod, final_mod_b) =
            (take(), take(), take(), take(), take(), take());
        let concat_proj = tape.constant(p.concat_proj.clone());
        let mut blocks = Vec::new();
        let mut k = 0;
        for (b, ad) in p.blocks.iter().zip(&p.adapters) {
            let base = b.reset_lora();
            let weight = |tape: &mut Tape, id: LinearId| -> Var {
                let w = tape.constant(base.linear(id).clone());
                match ad.iter().position(|(i, _)| *i == id) {
                    None => w,
                    Some(j) => {
                        let (a, bv) = (trainable[k + 2 * j], trainable[k + 2 * j + 1]);
                        let ba = tape.matmul(bv, a);
                        let s = tape.scale(ba, ad[j].1.scaling());
                        tape.add(w, s)
                    }
                }
            };
            let qkv = Stream::ALL.map(|s| {
                [
                    weight(tape, LinearId::Q(s)),
                    weight(tape, LinearId::K(s)),
                    weight(tape, LinearId::V(s)),
                ]
            });
            let w_o = weight(tape, LinearId::O);
            let mlp = Stream::ALL.map(|s| [weight(tape, LinearId::MlpUp(s)), weight(tape, LinearId::MlpDown(s))]);
            let w_mod = tape.constant(b.w_mod.clone());
            let b_mod = tape.constant(Matrix::row_vector(b.b_mod.clone()));
            blocks.push(TapedBlock {
                qkv,
                w_o,
                mlp,
                w_mod,
                b_mod,
            });
            k += 2 * ad.len();
        }
        Self {
            trainable,
            img_in,
            img_out,
            final_mod,
            final_mod_b,
            mask_proj,
            text_table,
            concat_proj,
            blocks,
        }
    }
}

/// A token stream on the tape with its positions.
#[derive(Clone)]
struct TSeq {
    x: Var,
    rows: usize,
    rope: Arc<RopeTable<f64>>,
}

struct TCtx<'a> {
    p: &'a ModelParams<f64>,
    heads: usize,
    d: usize,
}

impl TCtx<'_> {
    fn seq(&self, tape: &mut Tape, x: Var, positions: &[(i64, i64)]) -> Result<TSeq> {
        let rope = RopeTable::new(positions, &self.p.blocks[0].attn.rope)?;
        Ok(TSeq {
            x,
            rows: tape.shape(x).0,
            rope: Arc::new(rope),
        })
    }

    fn empty(&self, tape: &mut Tape) -> Result<TSeq> {
        let x = tape.constant(Matrix::zeros(0, self.d));
        self.seq(tape, x, &[])
    }

    fn project(&self, tape: &mut Tape, s: &TSeq, w: [Var; 3]) -> [Var; 3] {
        if s.rows == 0 {
            let z = tape.constant(Matrix::zeros(0, self.d));
            return [z, z, z];
        }
        let q = tape.matmul(s.x, w[0]);
        let k = tape.matmul(s.x, w[1]);
        let v = tape.matmul(s.x, w[2]);
        [tape.rope(q, s.rope.clone()), tape.rope(k, s.rope.clone()), v]
    }

    fn sdpa(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, scale);
            let pr = tape.softmax_rows(s);
            heads.push(tape.matmul(pr, vh));
        }
        tape.concat_cols(&heads)
    }

    fn out_proj(&self, tape: &mut Tape, o: Var, w_o: Var) -> Var {
        if tape.shape(o).0 == 0 {
            return tape.constant(Matrix::zeros(0, self.d));
        }
        tape.matmul(o, w_o)
    }

    fn mlp(&self, tape: &mut Tape, x: Var, w: [Var; 2]) -> Var {
        if tape.shape(x).0 == 0 {
            return tape.constant(Matrix::zeros(0, self.d));
        }
        let h = tape.matmul(x, w[0]);
        let h = tape.gelu(h);
        tape.matmul(h, w[1])
    }

    fn modulate(&self, tape: &mut Tape, x: Var, scale: Var, shift: Var) -> Var {
        let one_plus = tape.add_scalar(scale, 1.0);
        let y = tape.mul_row(x, one_plus);
        tape.add_row(y, shift)
    }

    /// `[shift1, scale1, gate1, shift2, scale2, gate2]` of one stream.
    fn stream_mods(&self, tape: &mut Tape, raw: Var, stream: usize) -> [Var; 6] {
        let d = self.d;
        let mut out = [raw; 6];
        for (i, o) in out.iter_mut().enumerate() {
            let part = tape.slice_cols(raw, (stream * 6 + i) * d, d);
            *o = if i == 2 || i == 5 {
                tape.add_scalar(part, 1.0)
            } else {
                part
            };
        }
        out
    }

    fn pre_attention(&self, tape: &mut Tape, s: &TSeq, m: &[Var; 6]) -> TSeq {
        let ln = tape.layer_norm(s.x);
        let x = self.modulate(tape, ln, m[1], m[0]);
        TSeq { x, ..s.clone() }
    }

    fn gated(&self, tape: &mut Tape, x: Var, attn: Var, mlp: [Var; 2], m: &[Var; 6]) -> Var {
        let ga = tape.mul_row(attn, m[2]);
        let h = tape.add(x, ga);
        let ln = tape.layer_norm(h);
        let mo = self.modulate(tape, ln, m[4], m[3]);
        let f = self.mlp(tape, mo, mlp);
        let gf = tape.mul_row(f, m[5]);
        tape.add(h, gf)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        b: &TapedBlock,
        variant: Variant,
        text: &TSeq,
        image: &TSeq,
        mask: &TSeq,
        text_cond: &TSeq,
        s_temb: Var,
    ) -> Result<(TSeq, TSeq, TSeq)> {
        let raw = tape.matmul(s_temb, b.w_mod);
        let raw = tape.add_row(raw, b.b_mod);
        let mt = self.stream_mods(tape, raw, 0);
        let mx = self.stream_mods(tape, raw, 1);
        let mm = self.stream_mods(tape, raw, 2);
        let t_in = self.pre_attention(tape, text, &mt);
        let x_in = self.pre_attention(tape, image, &mx);
        let (l, n) = (text.rows, image.rows);
        let mut mask_next = mask.clone();
        let (t_out, x_out) = match variant {
            Variant::Vanilla | Variant::ChannelConcat | Variant::Holistic => {
                let m_in = if variant == Variant::Holistic {
                    self.pre_attention(tape, mask, &mm)
                } else {
                    if mask.rows > 0 {
                        return Err(rejected("dual-stream layout got mask tokens"));
                    }
                    mask.clone()
                };
                let pt = self.project(tape, &t_in, b.qkv[0]);
                let px = self.project(tape, &x_in, b.qkv[1]);
                let pm = self.project(tape, &m_in, b.qkv[2]);
                let q = tape.concat_rows(&[pt[0], px[0], pm[0]]);
                let k = tape.concat_rows(&[pt[1], px[1], pm[1]]);
                let v = tape.concat_rows(&[pt[2], px[2], pm[2]]);
                let o = self.sdpa(tape, q, k, v);
                let o = self.out_proj(tape, o, b.w_o);
                let to = tape.slice_rows(o, 0, l);
                let xo = tape.slice_rows(o, l, n);
                if variant == Variant::Holistic && mask.rows > 0 {
                    let mo = tape.slice_rows(o, l + n, mask.rows);
                    let next = self.gated(tape, mask.x, mo, b.mlp[2], &mm);
                    mask_next = TSeq { x: next, ..mask.clone() };
                }
                (to, xo)
            }
            Variant::HardDecoupled | Variant::Decoupled => {
                let (mk, mv) = if mask.rows == 0 {
                    let z = tape.constant(Matrix::zeros(0, self.d));
                    (z, z)
                } else {
                    let mw = if self.p.blocks[0].attn.mask_uses_text_weights {
                        b.qkv[0]
                    } else {
                        b.qkv[2]
                    };
                    let m_ln = tape.layer_norm(mask.x);
                    let m_in = TSeq { x: m_ln, ..mask.clone() };
                    let pm = self.project(tape, &m_in, mw);
                    let (q, k, v) = if variant == Variant::Decoupled && text_cond.rows > 0 {
                        let c_ln = tape.layer_norm(text_cond.x);
                        let c_in = TSeq { x: c_ln, ..text_cond.clone() };
                        let pc = self.project(tape, &c_in, b.qkv[0]);
                        (
                            tape.concat_rows(&[pm[0], pc[0]]),
                            tape.concat_rows(&[pm[1], pc[1]]),
                            tape.concat_rows(&[pm[2], pc[2]]),
                        )
                    } else {
                        (pm[0], pm[1], pm[2])
                    };
                    let o = self.sdpa(tape, q, k, v);
                    let om = tape.slice_rows(o, 0, mask.rows);
                    let mo = self.out_proj(tape, om, b.w_o);
                    let h = tape.add(mask.x, mo);
                    let hl = tape.layer_norm(h);
                    let f = self.mlp(tape, hl, b.mlp[2]);
                    let next = tape.add(h, f);
                    mask_next = TSeq { x: next, ..mask.clone() };
                    (pm[1], pm[2])
                };
                let pt = self.project(tape, &t_in, b.qkv[0]);
                let px = self.project(tape, &x_in, b.qkv[1]);
                let q = tape.concat_rows(&[pt[0], px[0]]);
                let k = tape.concat_rows(&[pt[1], px[1], mk]);
                let v = tape.concat_rows(&[pt[2], px[2], mv]);
                let o = self.sdpa(tape, q, k, v);
                let o = self.out_proj(tape, o, b.w_o);
                (tape.slice_rows(o, 0, l), tape.slice_rows(o, l, n))
            }
        };
        let t_next = self.gated(tape, text.x, t_out, b.mlp[0], &mt);
        let x_next = self.gated(tape, image.x, x_out, b.mlp[1], &mx);
        Ok((
            TSeq { x: t_next, ..text.clone() },
            TSeq { x: x_next, ..image.clone() },
            mask_next,
        ))
    }
}

fn taped_conditions(
    tape: &mut Tape,
    tm: &TapedModel,
    ctx: &TCtx,
    cond: &CondInput,
    null: NullStyle,
) -> Result<(TSeq, TSeq)> {
    let p = ctx.p;
    let d = ctx.d;
    let null_seq = |tape: &mut Tape| -> Result<TSeq> {
        match null {
            NullStyle::Empty => ctx.empty(tape),
            NullStyle::ZeroToken => {
                let z = tape.constant(Matrix::zeros(1, d));
                ctx.seq(tape, z, &[(0, 0)])
            }
        }
    };
    let text = match &cond.text {
        None => null_seq(tape)?,
        Some(ids) => {
            // validates ids and length
            embed_text(ids, &p.text_embedder)?;
            let vocab = p.cfg.vocab;
            let onehot = Matrix::from_fn(ids.len(), vocab, |r, c| if ids[r] as usize == c { 1.0 } else { 0.0 });
            let oh = tape.constant(onehot);
            let x = if ids.is_empty() {
                tape.constant(Matrix::zeros(0, d))
            } else {
                tape.matmul(oh, tm.text_table)
            };
            ctx.seq(tape, x, &vec![(0, 0); ids.len()])?
        }
    };
    let mask = match &cond.mask {
        None => null_seq(tape)?,
        Some(g) => {
            let (ph, pw, features) = patch_feature_indices(g, p.cfg.patch_size, p.cfg.classes)?;
            let in_dim = p.mask_embedder.projection.rows();
            let mut f = Matrix::zeros(features.len(), in_dim);
            for (r, active) in features.iter().enumerate() {
                for &k in active {
                    f[(r, k)] += 1.0;
                }
            }
            let fv = tape.constant(f);
            let x = tape.matmul(fv, tm.mask_proj);
            ctx.seq(tape, x, &grid_positions(ph, pw))?
        }
    };
    Ok((text, mask))
}

fn taped_velocity(
    tape: &mut Tape,
    tm: &TapedModel,
    p: &ModelParams<f64>,
    x_t: &Matrix<f64>,
    t: f64,
    cond: &CondInput,
    null: NullStyle,
) -> Result<Var> {
    let cfg = &p.cfg;
    let ctx = TCtx {
        p,
        heads: cfg.heads,
        d: cfg.d,
    };
    let t_emb = p.time.embed(t, &Meter::off());
    let s_temb = tape.constant(Matrix::row_vector(t_emb.vector.iter().map(|&v| silu(v)).collect()));
    let xt = tape.constant(x_t.clone());
    let x = tape.matmul(xt, tm.img_in);
    let positions = grid_positions(cfg.grid.0, cfg.grid.1);
    let mut image = ctx.seq(tape, x, &positions)?;
    let (text, cond_mask) = taped_conditions(tape, tm, &ctx, cond, null)?;
    let mut mask = match cfg.variant {
        Variant::Holistic | Variant::HardDecoupled | Variant::Decoupled => cond_mask,
        Variant::Vanilla => ctx.empty(tape)?,
        Variant::ChannelConcat => {
            let m = if cond_mask.rows == image.rows {
                cond_mask.x
            } else {
                tape.constant(Matrix::zeros(image.rows, cfg.d))
            };
            let cat = tape.concat_cols(&[image.x, m]);
            image.x = tape.matmul(cat, tm.concat_proj);
            ctx.empty(tape)?
        }
    };
    let text_cond = text.clone();
    let mut text = text;
    for b in &tm.blocks {
        let (t2, x2, m2) = ctx.block(tape, b, cfg.variant, &text, &image, &mask, &text_cond, s_temb)?;
        text = t2;
        image = x2;
        mask = m2;
    }
    let fm = tape.matmul(s_temb, tm.final_mod);
    let fm = tape.add_row(fm, tm.final_mod_b);
    let shift = tape.slice_cols(fm, 0, cfg.d);
    let scale = tape.slice_cols(fm, cfg.d, cfg.d);
    let h = ctx.modulate(tape, image.x, scale, shift);
    Ok(tape.matmul(h, tm.img_out))
}

/// Flow-matching loss of `batch` and its gradients with respect to the
/// trainable parameters.
pub fn flow_loss(params: &ModelParams<f64>, batch: &[TrainExample], null: NullStyle) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(rejected("empty batch"));
    }
    let mut tape = Tape::new();
    let tm = TapedModel::load(&mut tape, params);
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let v = taped_velocity(&mut tape, &tm, params, &ex.sample.x_t, ex.sample.t, &ex.cond, null)?;
        let u = tape.constant(ex.sample.u_target.clone());
        let diff = tape.sub(v, u);
        terms.push(tape.mean_square(diff));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    let loss = tape.scale(total, 1.0 / batch.len() as f64);
    let value = tape.value(loss)[(0, 0)];
    let grads = tape.backward(loss);
    let values = tm
        .trainable
        .iter()
        .map(|&v| grads.get(v, tape.shape(v)))
        .collect();
    Ok((
        value,
        Gradients {
            names: trainable_names(params),
            values,
        },
    ))
}

/// Outcome of comparing taped gradients with central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Denominator floor of the relative error in [`gradient_check`]; entries
/// whose true gradient is below it are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares [`flow_loss`] gradients against central differences of
/// [`flow_loss_value`] for every trainable entry.
pub fn gradient_check(params: &ModelParams<f64>, batch: &[TrainExample], null: NullStyle, h: f64) -> Result<GradCheck> {
    let (_, grads) = flow_loss(params, batch, null)?;
    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let embedded = batch
            .iter()
            .map(|ex| Ok((ex.sample.clone(), p.embed_conditions(&ex.cond, null)?)))
            .collect::<Result<Vec<_>>>()?;
        flow_loss_value(p, &embedded)
    };
    let mut out = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let names = trainable_names(params);
    for (pi, name) in names.iter().enumerate() {
        let len = grads.values[pi].as_slice().len();
        for e in 0..len {
            let mut plus = params.clone();
            trainables_mut(&mut plus)[pi].as_mut_slice()[e] += h;
            let mut minus = params.clone();
            trainables_mut(&mut minus)[pi].as_mut_slice()[e] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let an = grads.values[pi].as_slice()[e];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_CHECK_FLOOR);
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = format!("{name}[{e}]: analytic {an:e}, numeric {fd:e}");
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Region levels a text symbol can select.
pub const TOY_LEVELS: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];
/// Number of labelled (non-background) regions.
pub const TOY_REGIONS: usize = 3;

/// One synthetic example: a quadrant label grid and a three-symbol text
/// that sets the level of each labelled region.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyExample {
    pub mask: LabelGrid,
    pub text: Vec<u32>,
}

impl ToyExample {
    /// Draws quadrants split at a random interior row and column, with the
    /// four labels assigned to the quadrants in random order.
    pub fn random(rng: &mut impl Rng, side: usize) -> Self {
        let lo = (side / 4).max(1);
        let hi = (side - lo).max(lo + 1);
        let sr = rng.random_range(lo..hi);
        let sc = rng.random_range(lo..hi);
        let mut labels = [0u32, 1, 2, 3];
        for i in (1..4).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        let grid: Vec<u32> = (0..side * side)
            .map(|k| {
                let (r, c) = (k / side, k % side);
                labels[2 * usize::from(r >= sr) + usize::from(c >= sc)]
            })
            .collect();
        let text = (0..TOY_REGIONS as u32)
            .map(|l| l * TOY_LEVELS.len() as u32 + rng.random_range(0..TOY_LEVELS.len() as u32))
            .collect();
        Self {
            mask: LabelGrid::new(side, side, grid).expect("square grid"),
            text,
        }
    }

    /// Target mean per label; background is 0.
    pub fn region_means(&self) -> [f64; TOY_REGIONS + 1] {
        let mut m = [0.0; TOY_REGIONS + 1];
        for (l, &id) in self.text.iter().enumerate().take(TOY_REGIONS) {
            m[l + 1] = TOY_LEVELS[id as usize % TOY_LEVELS.len()];
        }
        m
    }

    /// Clean tokens: the region mean on every channel plus `0.1·N(0,1)`.
    pub fn x0(&self, d_in: usize, rng: &mut impl Rng) -> Matrix<f64> {
        let means = self.region_means();
        let labels = self.mask.labels();
        Matrix::from_fn(labels.len(), d_in, |r, _| {
            means[labels[r] as usize] + 0.1 * rng.sample::<f64, _>(StandardNormal)
        })
    }

    pub fn cond(&self) -> CondInput {
        CondInput {
            mask: Some(self.mask.clone()),
            text: Some(self.text.clone()),
        }
    }
}

/// `1 − mean_ℓ |ŝ_ℓ − m_ℓ| / 3` over the labelled regions present, where
/// `ŝ_ℓ` is the mean generated value in region `ℓ`.
pub fn mask_consistency<T: Real>(sample: &Matrix<T>, ex: &ToyExample) -> f64 {
    let means = ex.region_means();
    let labels = ex.mask.labels();
    let mut err = 0.0;
    let mut regions = 0;
    for (l, &target) in means.iter().enumerate().skip(1) {
        let rows: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] as usize == l).collect();
        if rows.is_empty() {
            continue;
        }
        let mut s = 0.0;
        for &r in &rows {
            s += sample.row(r).iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        let got = s / (rows.len() * sample.cols()) as f64;
        err += (got - target).abs();
        regions += 1;
    }
    if regions == 0 {
        return 1.0;
    }
    1.0 - err / regions as f64 / 3.0
}

/// Toy trainer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub policy: DropoutPolicy,
    /// Held-out probe loss is recorded every this many steps.
    pub eval_every: usize,
    pub eval_batch: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Rescale the step when the global gradient norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 8,
            lr: 0.3,
            seed: 42,
            policy: DropoutPolicy::default(),
            eval_every: 50,
            eval_batch: 8,
            checkpoint_dir: None,
            checkpoint_every: 100,
            clip_norm: Some(1.0),
        }
    }
}

/// One line of the training report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    pub dropped_text: usize,
    pub dropped_mask: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// Mean training loss over the first [`SMOOTHING_WINDOW`] steps.
    pub initial_smoothed: f64,
    /// Mean training loss over the last [`SMOOTHING_WINDOW`] steps.
    pub final_smoothed: f64,
    pub last_checkpoint: Option<PathBuf>,
}

pub const SMOOTHING_WINDOW: usize = 25;

impl TrainReport {
    /// One JSON object per step.
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Generator for one subsystem of a run, derived from the run seed.
pub fn subsystem_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_DATA: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_PROBE: u64 = 3;

/// Draws a training example: a dataset item, its clean tokens, noise, a
/// uniform `t`, and a dropout decision.
fn draw_example(
    dataset: &[ToyExample],
    d_in: usize,
    data: &mut ChaCha8Rng,
    drops: &mut ChaCha8Rng,
    p: f64,
) -> Result<(TrainExample, DropEvents)> {
    let ex = &dataset[data.random_range(0..dataset.len())];
    let x0 = ex.x0(d_in, data);
    let eps = normal(data, x0.rows(), x0.cols(), 1.0);
    let t: f64 = data.random();
    let ev = draw_drops(p, drops);
    let cond = CondInput {
        mask: (!ev.mask).then(|| ex.mask.clone()),
        text: (!ev.text).then(|| ex.text.clone()),
    };
    Ok((
        TrainExample {
            sample: FlowSample::new(x0, eps, t)?,
            cond,
        },
        ev,
    ))
}

/// Plain SGD on the flow-matching loss over `dataset`, updating `params`
/// in place.
pub fn train_toy(params: &mut ModelParams<f64>, dataset: &[ToyExample], cfg: &TrainConfig) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(rejected("empty dataset"));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let d_in = params.cfg.d_in;
    let null = params.null_style(&cfg.policy);
    let mut data = subsystem_rng(cfg.seed, STREAM_DATA);
    let mut drops = subsystem_rng(cfg.seed, STREAM_DROPOUT);
    let mut probe_rng = subsystem_rng(cfg.seed, STREAM_PROBE);
    let mut no_drops = subsystem_rng(cfg.seed, STREAM_PROBE + 1);
    let probe: Vec<TrainExample> = (0..cfg.eval_batch)
        .map(|_| draw_example(dataset, d_in, &mut probe_rng, &mut no_drops, 0.0).map(|(e, _)| e))
        .collect::<Result<_>>()?;
    let probe_loss = |p: &ModelParams<f64>| -> Result<f64> {
        let embedded = probe
            .iter()
            .map(|ex| Ok((ex.sample.clone(), p.embed_conditions(&ex.cond, null)?)))
            .collect::<Result<Vec<_>>>()?;
        flow_loss_value(p, &embedded)
    };

    let mut records = Vec::with_capacity(cfg.steps);
    let mut last_checkpoint = None;
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        let (mut dt, mut dm) = (0, 0);
        for _ in 0..cfg.batch {
            let (ex, ev) = draw_example(dataset, d_in, &mut data, &mut drops, cfg.policy.p)?;
            dt += ev.text as usize;
            dm += ev.mask as usize;
            batch.push(ex);
        }
        let (loss, grads) = flow_loss(params, &batch, null)?;
        if !loss.is_finite() || grads.values.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged {
                step,
                loss,
                last_good_checkpoint: last_checkpoint,
            });
        }
        let eval_loss = if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            Some(probe_loss(params)?)
        } else {
            None
        };
        records.push(StepRecord {
            step,
            loss,
            eval_loss,
            dropped_text: dt,
            dropped_mask: dm,
        });
        let norm = grads
            .values
            .iter()
            .flat_map(|g| g.as_slice())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let step_size = match cfg.clip_norm {
            Some(c) if norm > c => cfg.lr * c / norm,
            _ => cfg.lr,
        };
        for (w, g) in trainables_mut(params).into_iter().zip(&grads.values) {
            for (x, gv) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *x -= step_size * gv;
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("step{:05}", step + 1));
                params.save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    let window = SMOOTHING_WINDOW.min(records.len()).max(1);
    let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len().max(1) as f64;
    Ok(TrainReport {
        initial_smoothed: mean(&records[..window.min(records.len())]),
        final_smoothed: mean(&records[records.len().saturating_sub(window)..]),
        records,
        last_checkpoint,
    })
}

impl<T: Real> ModelParams<T> {
    /// Null style used with this model: channel concatenation cannot align
    /// a single null token with the image grid, so it always uses empty
    /// nulls.
    pub fn null_style(&self, policy: &DropoutPolicy) -> NullStyle {
        if self.cfg.variant == Variant::ChannelConcat {
            NullStyle::Empty
        } else {
            policy.null
        }
    }
}

/// Mean mask-consistency of samples drawn for `cases`, one seed per case.
pub fn evaluate_consistency(params: &ModelParams<f64>, cases: &[ToyExample], steps: usize, seed: u64) -> Result<f64> {
    if cases.is_empty() {
        return Err(rejected("no evaluation cases"));
    }
    let model = Model::new(params)?;
    let mut total = 0.0;
    for (i, ex) in cases.iter().enumerate() {
        let cond = params.embed_conditions(&ex.cond(), NullStyle::ZeroToken)?;
        let cfg = SamplerConfig {
            steps,
            seed: seed.wrapping_add(i as u64),
            variant: params.cfg.variant,
            use_cache: true,
        };
        let cache = StaticCache::new();
        let x = sample_with(&model, &cond, &cfg, &cache, &Meter::off())?;
        total += mask_consistency(&x, ex);
    }
    Ok(total / cases.len() as f64)
}

/// Runs the sampler under a MAC counter at `dims` and compares the measured
/// block MACs with [`analytic_block_macs`]. `dims.n` must be a square.
pub fn instrumented_report(
    variant: Variant,
    dims: CostDims,
    use_cache: bool,
    seed: u64,
) -> Result<(CostReport, MacTally)> {
    let side = (dims.n as f64).sqrt().round() as usize;
    if side * side != dims.n as usize {
        return Err(Error::Config(format!("N = {} is not a square grid", dims.n)));
    }
    let l = dims.l as usize;
    let cfg = ModelConfig {
        d: dims.d as usize,
        heads: dims.heads as usize,
        depth: dims.depth as usize,
        variant,
        grid: (side, side),
        max_text_len: l.max(1),
        lora_rank: 2.min(dims.d as usize),
        ..ModelConfig::default()
    };
    let params = ModelParams::init(cfg, seed)?;
    let mut rng = subsystem_rng(seed, 9);
    let labels = (0..side * side).map(|_| rng.random_range(0..params.cfg.classes as u32)).collect();
    let cond = CondInput {
        mask: Some(LabelGrid::new(side, side, labels)?),
        text: Some((0..l as u32).map(|i| i % params.cfg.vocab as u32).collect()),
    };
    let null = params.null_style(&DropoutPolicy::default());
    let cond = params.embed_conditions(&cond, null)?;
    let counter = MacCounter::new();
    let sampler = SamplerConfig {
        steps: dims.t as usize,
        seed,
        variant,
        use_cache,
    };
    sample(&params, &cond, &sampler, &StaticCache::new(), &counter.meter(Pathway::Outside))?;
    let tally = counter.tally()?;
    let report = analytic_block_macs(variant, dims)?.with_measurement(tally.block_total() as u128);
    Ok((report, tally))
}

/// Fixed evaluation cases drawn from their own generator.
pub fn toy_cases(n: usize, side: usize, seed: u64) -> Vec<ToyExample> {
    let mut rng = subsystem_rng(seed, 7);
    (0..n).map(|_| ToyExample::random(&mut rng, side)).collect()
}

/// A reproducible synthetic dataset.
pub fn toy_dataset(n: usize, side: usize, seed: u64) -> Vec<ToyExample> {
    let mut rng = subsystem_rng(seed, 8);
    (0..n).map(|_| ToyExample::random(&mut rng, side)).collect()
}

/// Reads `NNNN.mask.csv` / `NNNN.text` pairs from a directory.
pub fn read_dataset(dir: &Path) -> Result<Vec<ToyExample>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".mask.csv").map(str::to_string)
        })
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for s in stems {
        let mask = LabelGrid::read_csv(&dir.join(format!("{s}.mask.csv")))?;
        let text = crate::tokens::read_token_ids(&dir.join(format!("{s}.text")))?;
        out.push(ToyExample { mask, text });
    }
    if out.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: "no *.mask.csv files".into(),
        });
    }
    Ok(out)
}

/// Writes a dataset in the layout [`read_dataset`] expects.
pub fn write_dataset(dir: &Path, data: &[ToyExample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, ex) in data.iter().enumerate() {
        std::fs::write(dir.join(format!("{i:04}.mask.csv")), ex.mask.to_csv())?;
        let ids: Vec<String> = ex.text.iter().map(u32::to_string).collect();
        std::fs::write(dir.join(format!("{i:04}.text")), ids.join(" ") + "\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            d_in: 3,
            d: 8,
            heads: 2,
            depth: 1,
            variant,
            grid: (4, 4),
            lora_rank: 2,
            ..ModelConfig::default()
        }
    }

    fn perturbed(cfg: ModelConfig, seed: u64) -> ModelParams<f64> {
        let mut p = ModelParams::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for m in trainables_mut(&mut p) {
            for v in m.as_mut_slice() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for b in &mut p.blocks {
            b.b_mod.iter_mut().for_each(|v| *v = 0.05 * rng.sample::<f64, _>(StandardNormal));
        }
        p
    }

    fn batch(p: &ModelParams<f64>, n: usize, seed: u64, drop: bool) -> Vec<TrainExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let ex = ToyExample::random(&mut rng, p.cfg.grid.0);
                let x0 = ex.x0(p.cfg.d_in, &mut rng);
                let eps = normal(&mut rng, x0.rows(), x0.cols(), 1.0);
                let mut cond = ex.cond();
                if drop && i % 2 == 1 {
                    cond.mask = None;
                }
                if drop && i % 3 == 2 {
                    cond.text = None;
                }
                TrainExample {
                    sample: FlowSample::new(x0, eps, rng.random()).unwrap(),
                    cond,
                }
            })
            .collect()
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = normal(&mut rng, 4, 3, 1.0);
        let eps = normal(&mut rng, 4, 3, 1.0);
        let s0 = FlowSample::new(x0.clone(), eps.clone(), 0.0).unwrap();
        let s1 = FlowSample::new(x0.clone(), eps.clone(), 1.0).unwrap();
        assert!(s0.x_t.bitwise_eq(&x0));
        assert!(s1.x_t.bitwise_eq(&eps));
        assert!(s0.u_target.bitwise_eq(&eps.sub(&x0)));
        assert!(FlowSample::new(x0, eps, 1.5).is_err());
    }

    #[test]
    fn taped_forward_matches_plain_forward() {
        for v in Variant::ALL {
            let p = perturbed(small_cfg(v), 3);
            let b = batch(&p, 4, 4, true);
            let null = p.null_style(&DropoutPolicy::default());
            let (taped, _) = flow_loss(&p, &b, null).unwrap();
            let embedded: Vec<_> = b
                .iter()
                .map(|e| (e.sample.clone(), p.embed_conditions(&e.cond, null).unwrap()))
                .collect();
            let plain = flow_loss_value(&p, &embedded).unwrap();
            assert!((taped - plain).abs() <= 1e-12 * plain.abs().max(1.0), "{v}: {taped} vs {plain}");
        }
    }

    #[test]
    fn zero_model_loss_is_mean_square_target() {
        let p = ModelParams::init(small_cfg(Variant::Decoupled), 5).unwrap();
        let b = batch(&p, 3, 6, false);
        let want = b
            .iter()
            .map(|e| e.sample.u_target.as_slice().iter().map(|x| x * x).sum::<f64>() / e.sample.u_target.as_slice().len() as f64)
            .sum::<f64>()
            / 3.0;
        let (loss, _) = flow_loss(&p, &b, NullStyle::ZeroToken).unwrap();
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_has_zero_loss_and_gradient() {
        let p = perturbed(small_cfg(Variant::Decoupled), 7);
        let mut b = batch(&p, 2, 8, false);
        let model = Model::new(&p).unwrap();
        for e in &mut b {
            let cond = p.embed_conditions(&e.cond, NullStyle::ZeroToken).unwrap();
            e.sample.u_target = model
                .velocity(&e.sample.x_t, e.sample.t, &cond, StaticSource::Recompute, &Meter::off())
                .unwrap();
        }
        let (loss, grads) = flow_loss(&p, &b, NullStyle::ZeroToken).unwrap();
        assert!(loss < 1e-24, "{loss}");
        assert!(grads.max_abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences_small() {
        let p = perturbed(small_cfg(Variant::Decoupled), 9);
        let b = batch(&p, 2, 10, true);
        let r = gradient_check(&p, &b, NullStyle::ZeroToken, 1e-4).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn dropout_boundaries_and_draw_count() {
        let text = TokenSequence::text(Matrix::filled(2, 4, 1.0));
        let mask = TokenSequence::new(Modality::Mask, Matrix::filled(1, 4, 2.0), vec![(0, 0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (t, m, ev) = drop_conditions(&text, &mask, &DropoutPolicy::new(0.0).unwrap(), &mut rng);
            assert!(!ev.text && !ev.mask);
            assert_eq!((t, m), (text.clone(), mask.clone()));
            let (t, m, ev) = drop_conditions(&text, &mask, &DropoutPolicy::new(1.0).unwrap(), &mut rng);
            assert!(ev.text && ev.mask);
            assert_eq!(t.count(), 1);
            assert!(t.embeddings().as_slice().iter().all(|&v| v == 0.0));
            assert!(m.embeddings().as_slice().iter().all(|&v| v == 0.0));
        }
        let mut a = ChaCha8Rng::seed_from_u64(2);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        drop_conditions(&text, &mask, &DropoutPolicy::default(), &mut a);
        b.random::<f64>();
        b.random::<f64>();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
        assert!(DropoutPolicy::new(1.5).is_err());
    }

    #[test]
    fn concat_fuse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let x = TokenSequence::new(Modality::Image, normal(&mut rng, 4, d, 1.0), grid_positions(2, 2)).unwrap();
        let zero = TokenSequence::new(Modality::Mask, Matrix::zeros(4, d), grid_positions(2, 2)).unwrap();
        let mut proj = Matrix::zeros(2 * d, d);
        for i in 0..d {
            proj[(i, i)] = 1.0;
        }
        let out = concat_baseline_fuse(&x, &zero, &proj, &Meter::off()).unwrap();
        assert!(out.embeddings().bitwise_eq(x.embeddings()));

        let five = TokenSequence::new(Modality::Mask, Matrix::zeros(5, d), grid_positions(1, 5)).unwrap();
        assert!(concat_baseline_fuse(&x, &five, &proj, &Meter::off()).is_err());

        let m = TokenSequence::new(Modality::Mask, normal(&mut rng, 4, d, 1.0), grid_positions(2, 2)).unwrap();
        let proj = normal(&mut rng, 2 * d, d, 1.0);
        let out = concat_baseline_fuse(&x, &m, &proj, &Meter::off()).unwrap();
        for r in 0..4 {
            for c in 0..d {
                let mut want = 0.0;
                for k in 0..d {
                    want += x.embeddings()[(r, k)] * proj[(k, c)];
                    want += m.embeddings()[(r, k)] * proj[(d + k, c)];
                }
                assert!((out.embeddings()[(r, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_step_sampler_closed_form() {
        let p = perturbed(small_cfg(Variant::Decoupled), 11);
        let ex = ToyExample::random(&mut ChaCha8Rng::seed_from_u64(12), 4);
        let cond = p.embed_conditions(&ex.cond(), NullStyle::ZeroToken).unwrap();
        let cfg = SamplerConfig {
            steps: 1,
            ..SamplerConfig::default()
        };
        let out = sample(&p, &cond, &cfg, &StaticCache::new(), &Meter::off()).unwrap();
        let x1 = initial_noise::<f64>(16, 3, cfg.seed);
        let model = Model::new(&p).unwrap();
        let v = model.velocity(&x1, 1.0, &cond, StaticSource::Recompute, &Meter::off()).unwrap();
        assert!(out.bitwise_eq(&x1.sub(&v)));
    }

    #[test]
    fn sampler_is_deterministic_and_cache_transparent() {
        let p = perturbed(small_cfg(Variant::Decoupled), 13);
        let ex = ToyExample::random(&mut ChaCha8Rng::seed_from_u64(14), 4);
        let cond = p.embed_conditions(&ex.cond(), NullStyle::ZeroToken).unwrap();
        let cfg = SamplerConfig::default();
        let cache = StaticCache::new();
        let a = sample(&p, &cond, &cfg, &cache, &Meter::off()).unwrap();
        let b = sample(&p, &cond, &cfg, &StaticCache::new(), &Meter::off()).unwrap();
        let off = sample(&p, &cond, &SamplerConfig { use_cache: false, ..cfg.clone() }, &StaticCache::new(), &Meter::off()).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(a.bitwise_eq(&off));
        assert_eq!(cache.stats().misses, 1);
        assert_eq!(cache.stats().hits, 27);
    }

    #[test]
    fn sampler_counts_static_work_once() {
        let p = perturbed(small_cfg(Variant::Decoupled), 15);
        let ex = ToyExample::random(&mut ChaCha8Rng::seed_from_u64(16), 4);
        let cond = p.embed_conditions(&ex.cond(), NullStyle::ZeroToken).unwrap();
        let run = |use_cache| {
            let counter = MacCounter::new();
            let cfg = SamplerConfig { use_cache, ..SamplerConfig::default() };
            sample(&p, &cond, &cfg, &StaticCache::new(), &counter.meter(Pathway::Outside)).unwrap();
            counter.tally().unwrap()
        };
        let on = run(true);
        let off = run(false);
        assert_eq!(on.path_total(Pathway::Static) * 28, off.path_total(Pathway::Static));
        assert_eq!(on.path_total(Pathway::Dynamic), off.path_total(Pathway::Dynamic));
    }

    #[test]
    fn instrumented_counts_match_analytic_exactly() {
        for dims in crate::cost::toy_grid().into_iter().take(6) {
            for v in Variant::ALL {
                let (r, _) = instrumented_report(v, dims, true, 1).unwrap();
                assert_eq!(r.measured_vs_analytic_rel_err, Some(0.0), "{v} {dims:?}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = perturbed(small_cfg(Variant::HardDecoupled), 17);
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let q = ModelParams::<f64>::load(dir.path()).unwrap();
        assert_eq!(q.cfg, p.cfg);
        let want: ModelParams<f64> = p.cast::<f32>().cast();
        assert_eq!(q, want);
    }

    #[test]
    fn toy_example_shape_and_proxy() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..20 {
            let ex = ToyExample::random(&mut rng, 8);
            let mut seen = [false; 4];
            for &l in ex.mask.labels() {
                seen[l as usize] = true;
            }
            assert!(seen.iter().all(|&s| s));
            assert_eq!(ex.text.len(), 3);
            for (l, &id) in ex.text.iter().enumerate() {
                assert_eq!(id as usize / 4, l);
            }
            let perfect = Matrix::from_fn(64, 8, |r, _| ex.region_means()[ex.mask.labels()[r] as usize]);
            assert!((mask_consistency(&perfect, &ex) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_zero_keeps_probe_loss_constant() {
        let mut p = perturbed(small_cfg(Variant::Decoupled), 19);
        let data = toy_dataset(8, 4, 1);
        let cfg = TrainConfig {
            steps: 6,
            batch: 2,
            lr: 0.0,
            eval_every: 1,
            eval_batch: 2,
            ..TrainConfig::default()
        };
        let before = p.clone();
        let r = train_toy(&mut p, &data, &cfg).unwrap();
        assert_eq!(p, before);
        let evals: Vec<f64> = r.records.iter().filter_map(|s| s.eval_loss).collect();
        assert_eq!(evals.len(), 6);
        assert!(evals.iter().all(|&e| e == evals[0]));
    }

    #[test]
    fn dataset_round_trip() {
        let data = toy_dataset(3, 8, 2);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);
    }
}
