//! The multivariate transformer block.
//!
//! A block modulates each stream with a timestep-conditioned shift/scale,
//! runs one of the attention layouts, and applies a gated feed-forward per
//! stream. In the decoupled layouts the mask stream never sees the
//! timestep: it is advanced by the static pathway, whose result can be
//! served from a [`StaticCache`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_dual, attend_dynamic, attend_holistic, attend_static, LowRankAdapter, ProjectionSet,
    StaticKv, Stream, StreamWeights,
};
use crate::cache::{ConditionFingerprint, StaticCache, StaticCacheEntry};
use crate::cost::{MacKind, Meter, Pathway, MODULATION_CHUNKS};
use crate::error::{rejected, Error, Result};
use crate::linalg::{c, gelu, layer_norm_rows, silu, Matrix, Real};
use crate::tokens::{Modality, TokenSequence};

/// Attention layout of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Dual-stream attention over text and image; no mask stream.
    #[serde(rename = "a")]
    Vanilla,
    /// One joint softmax over text, image and mask.
    #[serde(rename = "b")]
    Holistic,
    /// Static pathway over the mask alone.
    #[serde(rename = "c")]
    HardDecoupled,
    /// Static pathway over mask and text.
    #[serde(rename = "d")]
    Decoupled,
    /// Mask fused into the image stream by channel concatenation before the
    /// blocks, which then run the dual-stream layout.
    #[serde(rename = "concat")]
    ChannelConcat,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vanilla,
        Variant::Holistic,
        Variant::HardDecoupled,
        Variant::Decoupled,
        Variant::ChannelConcat,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Variant::Vanilla => "a",
            Variant::Holistic => "b",
            Variant::HardDecoupled => "c",
            Variant::Decoupled => "d",
            Variant::ChannelConcat => "concat",
        }
    }

    /// True for the layouts with a cacheable static pathway.
    pub fn is_decoupled(self) -> bool {
        matches!(self, Variant::HardDecoupled | Variant::Decoupled)
    }

    /// True when the blocks carry a mask stream at all.
    pub fn has_mask_stream(self) -> bool {
        matches!(
            self,
            Variant::Holistic | Variant::HardDecoupled | Variant::Decoupled
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.code() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (expected a, b, c, d or concat)")))
    }
}

/// Embedded timestep, shared by every block of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepEmbedding<T> {
    pub t: f64,
    pub vector: Vec<T>,
}

/// Sinusoidal features of `1000·t` followed by `Linear → SiLU → Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepEmbedder<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// `[cos(1000·t·f_k); sin(1000·t·f_k)]` with `f_k = 10000^(-k/half)`.
pub fn timestep_features<T: Real>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for k in 0..half {
        let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let a = 1000.0 * t * f;
        out[k] = c(a.cos());
        out[half + k] = c(a.sin());
    }
    out
}

impl<T: Real> TimestepEmbedder<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, d),
            b1: vec![T::zero(); d],
            w2: Matrix::zeros(d, d),
            b2: vec![T::zero(); d],
        }
    }

    pub fn d(&self) -> usize {
        self.w2.cols()
    }

    pub fn embed(&self, t: f64, meter: &Meter) -> TimestepEmbedding<T> {
        let f = Matrix::row_vector(timestep_features::<T>(t, self.w1.rows()));
        let h = meter
            .matmul(MacKind::Projection, &f, &self.w1)
            .add_row(&self.b1)
            .map(silu);
        let v = meter.matmul(MacKind::Projection, &h, &self.w2).add_row(&self.b2);
        TimestepEmbedding {
            t,
            vector: v.into_vec(),
        }
    }

    pub fn cast<U: Real>(&self) -> TimestepEmbedder<U> {
        TimestepEmbedder {
            w1: self.w1.cast(),
            b1: self.b1.iter().map(|v| c(v.to_f64_lossy())).collect(),
            w2: self.w2.cast(),
            b2: self.b2.iter().map(|v| c(v.to_f64_lossy())).collect(),
        }
    }
}

/// `d → 4d → d` feed-forward with tanh-GELU, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, 4 * d),
            w2: Matrix::zeros(4 * d, d),
        }
    }

    pub fn forward(&self, x: &Matrix<T>, meter: &Meter) -> Matrix<T> {
        if x.rows() == 0 {
            return Matrix::zeros(0, self.w2.cols());
        }
        let h = meter.matmul(MacKind::Mlp, x, &self.w1).map(gelu);
        meter.matmul(MacKind::Mlp, &h, &self.w2)
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
        }
    }
}

/// Modulation values of one stream. Gates are `1 + raw`, so a zero head
/// output is the identity modulation.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamModulation<T> {
    pub shift1: Vec<T>,
    pub scale1: Vec<T>,
    pub gate1: Vec<T>,
    pub shift2: Vec<T>,
    pub scale2: Vec<T>,
    pub gate2: Vec<T>,
}

impl<T: Real> StreamModulation<T> {
    pub fn identity(d: usize) -> Self {
        let z = vec![T::zero(); d];
        let o = vec![T::one(); d];
        Self {
            shift1: z.clone(),
            scale1: z.clone(),
            gate1: o.clone(),
            shift2: z.clone(),
            scale2: z,
            gate2: o,
        }
    }

    /// Splits a raw `6d` chunk laid out as
    /// `[shift1, scale1, gate1, shift2, scale2, gate2]`.
    pub fn from_raw(raw: &[T]) -> Self {
        let d = raw.len() / 6;
        let part = |i: usize| raw[i * d..(i + 1) * d].to_vec();
        let gate = |i: usize| part(i).into_iter().map(|g| T::one() + g).collect();
        Self {
            shift1: part(0),
            scale1: part(1),
            gate1: gate(2),
            shift2: part(3),
            scale2: part(4),
            gate2: gate(5),
        }
    }
}

/// `x ⊙ (1 + scale) + shift`, row by row.
pub fn modulate<T: Real>(x: &Matrix<T>, scale: &[T], shift: &[T]) -> Result<Matrix<T>> {
    if scale.len() != x.cols() || shift.len() != x.cols() {
        return Err(rejected(format!(
            "modulation vectors of length {}/{} for width {}",
            scale.len(),
            shift.len(),
            x.cols()
        )));
    }
    let one_plus: Vec<T> = scale.iter().map(|&s| T::one() + s).collect();
    Ok(x.mul_row(&one_plus).add_row(shift))
}

/// A linear map inside a block that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinearId {
    Q(Stream),
    K(Stream),
    V(Stream),
    O,
    MlpUp(Stream),
    MlpDown(Stream),
}

impl LinearId {
    pub fn name(self) -> String {
        match self {
            LinearId::Q(s) => format!("{}.q", s.name()),
            LinearId::K(s) => format!("{}.k", s.name()),
            LinearId::V(s) => format!("{}.v", s.name()),
            LinearId::O => "o".into(),
            LinearId::MlpUp(s) => format!("{}.mlp_up", s.name()),
            LinearId::MlpDown(s) => format!("{}.mlp_down", s.name()),
        }
    }

    pub fn shape(self, d: usize) -> (usize, usize) {
        match self {
            LinearId::MlpUp(_) => (d, 4 * d),
            LinearId::MlpDown(_) => (4 * d, d),
            _ => (d, d),
        }
    }
}

/// Which linears receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraTargets {
    /// Text-stream Q/K/V and the output projection: the matrices the
    /// decoupled static pathway reuses.
    TextAttention,
    /// Q/K/V of every stream plus the output projection.
    AllAttention,
}

impl LoraTargets {
    pub fn linears(self) -> Vec<LinearId> {
        let qkv = |s| [LinearId::Q(s), LinearId::K(s), LinearId::V(s)];
        match self {
            LoraTargets::TextAttention => {
                let mut v = qkv(Stream::Text).to_vec();
                v.push(LinearId::O);
                v
            }
            LoraTargets::AllAttention => {
                let mut v: Vec<_> = Stream::ALL.into_iter().flat_map(qkv).collect();
                v.push(LinearId::O);
                v
            }
        }
    }
}

/// Parameter count of one block: 9 stream projections, the output
/// projection, three feed-forwards and the modulation head with its bias.
pub fn block_param_count(d: u64) -> u64 {
    10 * d * d + 3 * 8 * d * d + MODULATION_CHUNKS * d * d + MODULATION_CHUNKS * d
}

/// Adapter parameters as a fraction of the block-stack parameters.
pub fn lora_parameter_fraction(d: u64, depth: u64, rank: u64, targets: LoraTargets) -> f64 {
    let per_block: u64 = targets
        .linears()
        .iter()
        .map(|l| {
            let (i, o) = l.shape(d as usize);
            rank * (i as u64 + o as u64)
        })
        .sum();
    (per_block * depth) as f64 / (block_param_count(d) * depth) as f64
}

/// Weights of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub attn: StreamWeights<T>,
    /// Indexed by [`Stream::index`].
    pub mlp: [Mlp<T>; 3],
    /// `d × 18d`, applied to `SiLU(t_emb)`.
    pub w_mod: Matrix<T>,
    pub b_mod: Vec<T>,
    pub variant: Variant,
    base: Option<Box<(StreamWeights<T>, [Mlp<T>; 3])>>,
}

impl<T: Real> BlockParams<T> {
    pub fn new(
        attn: StreamWeights<T>,
        mlp: [Mlp<T>; 3],
        w_mod: Matrix<T>,
        b_mod: Vec<T>,
        variant: Variant,
    ) -> Result<Self> {
        let p = Self {
            attn,
            mlp,
            w_mod,
            b_mod,
            variant,
            base: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero weights; the block is then an exact identity.
    pub fn zeros(d: usize, heads: usize, variant: Variant) -> Result<Self> {
        let attn = StreamWeights::new(
            [ProjectionSet::zeros(d), ProjectionSet::zeros(d), ProjectionSet::zeros(d)],
            Matrix::zeros(d, d),
            heads,
        )?;
        Self::new(
            attn,
            [Mlp::zeros(d), Mlp::zeros(d), Mlp::zeros(d)],
            Matrix::zeros(d, 18 * d),
            vec![T::zero(); 18 * d],
            variant,
        )
    }

    pub fn d(&self) -> usize {
        self.attn.d()
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        let d = self.d();
        for m in &self.mlp {
            if m.w1.shape() != (d, 4 * d) || m.w2.shape() != (4 * d, d) {
                return Err(Error::Config("feed-forward must be d → 4d → d".into()));
            }
        }
        if self.w_mod.shape() != (d, 18 * d) || self.b_mod.len() != 18 * d {
            return Err(Error::Config("modulation head must be d × 18d".into()));
        }
        Ok(())
    }

    /// Per-stream modulation for this block.
    pub fn modulation(&self, t_emb: &TimestepEmbedding<T>, meter: &Meter) -> Result<[StreamModulation<T>; 3]> {
        let d = self.d();
        if t_emb.vector.len() != d {
            return Err(rejected(format!(
                "timestep embedding has width {}, block has {d}",
                t_emb.vector.len()
            )));
        }
        let s = Matrix::row_vector(t_emb.vector.iter().map(|&v| silu(v)).collect());
        let raw = meter.matmul(MacKind::Projection, &s, &self.w_mod).add_row(&self.b_mod);
        let raw = raw.as_slice();
        Ok([0, 1, 2].map(|i| StreamModulation::from_raw(&raw[i * 6 * d..(i + 1) * 6 * d])))
    }

    pub fn linear(&self, id: LinearId) -> &Matrix<T> {
        match id {
            LinearId::Q(s) => &self.attn.stream(s).wq,
            LinearId::K(s) => &self.attn.stream(s).wk,
            LinearId::V(s) => &self.attn.stream(s).wv,
            LinearId::O => &self.attn.w_o,
            LinearId::MlpUp(s) => &self.mlp[s.index()].w1,
            LinearId::MlpDown(s) => &self.mlp[s.index()].w2,
        }
    }

    pub fn linear_mut(&mut self, id: LinearId) -> &mut Matrix<T> {
        match id {
            LinearId::Q(s) => &mut self.attn.stream_mut(s).wq,
            LinearId::K(s) => &mut self.attn.stream_mut(s).wk,
            LinearId::V(s) => &mut self.attn.stream_mut(s).wv,
            LinearId::O => &mut self.attn.w_o,
            LinearId::MlpUp(s) => &mut self.mlp[s.index()].w1,
            LinearId::MlpDown(s) => &mut self.mlp[s.index()].w2,
        }
    }

    /// True when adapters have been merged into these weights.
    pub fn has_lora(&self) -> bool {
        self.base.is_some()
    }

    /// Weights as they were before any adapter was merged.
    pub fn reset_lora(&self) -> Self {
        let mut p = self.clone();
        if let Some(base) = p.base.take() {
            let (attn, mlp) = *base;
            p.attn = attn;
            p.mlp = mlp;
        }
        p
    }

    /// Named matrices in a fixed order, for checkpoints and hashing.
    pub fn named_matrices(&self) -> Vec<(String, Matrix<T>)> {
        let mut out = Vec::new();
        for s in Stream::ALL {
            let set = self.attn.stream(s);
            out.push((format!("{}.wq", s.name()), set.wq.clone()));
            out.push((format!("{}.wk", s.name()), set.wk.clone()));
            out.push((format!("{}.wv", s.name()), set.wv.clone()));
        }
        out.push(("wo".into(), self.attn.w_o.clone()));
        for s in Stream::ALL {
            out.push((format!("{}.mlp1", s.name()), self.mlp[s.index()].w1.clone()));
            out.push((format!("{}.mlp2", s.name()), self.mlp[s.index()].w2.clone()));
        }
        out.push(("wmod".into(), self.w_mod.clone()));
        out.push(("bmod".into(), Matrix::row_vector(self.b_mod.clone())));
        out
    }

    /// Inverse of [`BlockParams::named_matrices`].
    pub fn from_named(
        mut get: impl FnMut(&str) -> Result<Matrix<T>>,
        heads: usize,
        variant: Variant,
    ) -> Result<Self> {
        let mut set = |s: Stream| -> Result<ProjectionSet<T>> {
            Ok(ProjectionSet {
                wq: get(&format!("{}.wq", s.name()))?,
                wk: get(&format!("{}.wk", s.name()))?,
                wv: get(&format!("{}.wv", s.name()))?,
            })
        };
        let streams = [set(Stream::Text)?, set(Stream::Image)?, set(Stream::Mask)?];
        let attn = StreamWeights::new(streams, get("wo")?, heads)?;
        let mut mlp = |s: Stream| -> Result<Mlp<T>> {
            Ok(Mlp {
                w1: get(&format!("{}.mlp1", s.name()))?,
                w2: get(&format!("{}.mlp2", s.name()))?,
            })
        };
        let mlps = [mlp(Stream::Text)?, mlp(Stream::Image)?, mlp(Stream::Mask)?];
        let w_mod = get("wmod")?;
        let b_mod = get("bmod")?.into_vec();
        Self::new(attn, mlps, w_mod, b_mod, variant)
    }

    pub fn cast<U: Real>(&self) -> BlockParams<U> {
        BlockParams {
            attn: self.attn.cast(),
            mlp: [self.mlp[0].cast(), self.mlp[1].cast(), self.mlp[2].cast()],
            w_mod: self.w_mod.cast(),
            b_mod: self.b_mod.iter().map(|v| c(v.to_f64_lossy())).collect(),
            variant: self.variant,
            base: self.base.as_ref().map(|b| {
                Box::new((b.0.cast(), [b.1[0].cast(), b.1[1].cast(), b.1[2].cast()]))
            }),
        }
    }
}

/// Merges `adapters` into `p`. The pre-merge weights are kept so that
/// [`BlockParams::reset_lora`] can restore them.
pub fn apply_lora<T: Real>(
    p: &BlockParams<T>,
    adapters: &[(LinearId, LowRankAdapter<T>)],
) -> Result<BlockParams<T>> {
    let mut out = p.clone();
    if out.base.is_none() {
        out.base = Some(Box::new((p.attn.clone(), p.mlp.clone())));
    }
    for (id, adapter) in adapters {
        let w = out.linear(*id);
        let merged = adapter.merge(w)?;
        *out.linear_mut(*id) = merged;
    }
    Ok(out)
}

/// Streams entering or leaving a block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState<T> {
    pub text: TokenSequence<T>,
    pub image: TokenSequence<T>,
    pub mask: TokenSequence<T>,
    pub t_emb: TimestepEmbedding<T>,
}

impl<T: Real> BlockState<T> {
    pub fn validate(&self) -> Result<()> {
        let d = self.image.d();
        for s in [&self.text, &self.mask] {
            if s.d() != d && !s.is_empty() {
                return Err(rejected(format!(
                    "{:?} stream has width {}, image stream {d}",
                    s.modality(),
                    s.d()
                )));
            }
        }
        if self.t_emb.vector.len() != d {
            return Err(rejected("timestep embedding width differs from the streams"));
        }
        Ok(())
    }
}

/// Where a decoupled block gets its static-pathway result.
#[derive(Clone, Copy)]
pub enum StaticSource<'a, T> {
    /// Run the static pathway now.
    Recompute,
    /// Serve from (or fill) a session cache keyed by the condition
    /// fingerprint.
    Cached {
        cache: &'a StaticCache<T>,
        fingerprint: ConditionFingerprint,
    },
}

/// Per-call context of [`forward_block`].
#[derive(Clone, Copy)]
pub struct BlockContext<'a, T> {
    pub block_id: usize,
    /// The embedded text condition as it entered the stack. The static
    /// pathway reads this rather than the evolving text stream, which keeps
    /// it independent of the timestep.
    pub text_condition: &'a TokenSequence<T>,
    pub source: StaticSource<'a, T>,
}

/// Static pathway of a decoupled block: unmodulated attention over the mask
/// (and text) followed by the mask feed-forward.
pub fn compute_static<T: Real>(
    block_id: usize,
    mask: &TokenSequence<T>,
    text_condition: &TokenSequence<T>,
    p: &BlockParams<T>,
    fingerprint: ConditionFingerprint,
    meter: &Meter,
) -> Result<StaticCacheEntry<T>> {
    let meter = meter.on(Pathway::Static);
    let m_in = mask.with_embeddings(layer_norm_rows(mask.embeddings()))?;
    let t_in = text_condition.with_embeddings(layer_norm_rows(text_condition.embeddings()))?;
    let include_text = p.variant == Variant::Decoupled;
    let out = attend_static(&m_in, &t_in, &p.attn, include_text, &meter)?
        .ok_or_else(|| rejected("static pathway needs mask tokens"))?;
    let h = mask.embeddings().add(&out.mask_out);
    let mask_next = h.add(&p.mlp[Stream::Mask.index()].forward(&layer_norm_rows(&h), &meter));
    Ok(StaticCacheEntry {
        block_id,
        kv: out.kv,
        mask_out: out.mask_out,
        mask_next,
        fingerprint,
    })
}

fn gated_update<T: Real>(
    x: &Matrix<T>,
    attn_out: &Matrix<T>,
    mlp: &Mlp<T>,
    m: &StreamModulation<T>,
    meter: &Meter,
) -> Result<Matrix<T>> {
    let h = x.add(&attn_out.mul_row(&m.gate1));
    let f = mlp.forward(&modulate(&layer_norm_rows(&h), &m.scale2, &m.shift2)?, meter);
    Ok(h.add(&f.mul_row(&m.gate2)))
}

fn pre_attention<T: Real>(s: &TokenSequence<T>, m: &StreamModulation<T>) -> Result<TokenSequence<T>> {
    s.with_embeddings(modulate(&layer_norm_rows(s.embeddings()), &m.scale1, &m.shift1)?)
}

/// One block step. Dynamic work is charged to [`Pathway::Dynamic`], static
/// work to [`Pathway::Static`].
pub fn forward_block<T: Real>(
    state: &BlockState<T>,
    p: &BlockParams<T>,
    ctx: &BlockContext<T>,
    meter: &Meter,
) -> Result<BlockState<T>> {
    state.validate()?;
    let dm = meter.on(Pathway::Dynamic);
    let mods = p.modulation(&state.t_emb, &dm)?;
    let [mt, mx, mm] = &mods;
    let text_in = pre_attention(&state.text, mt)?;
    let image_in = pre_attention(&state.image, mx)?;
    let d = p.d();

    let (attn, mask_next) = match p.variant {
        Variant::Vanilla | Variant::ChannelConcat => {
            if !state.mask.is_empty() {
                return Err(rejected(format!(
                    "variant {} has no mask stream but got {} mask tokens",
                    p.variant,
                    state.mask.count()
                )));
            }
            (attend_dual(&text_in, &image_in, &p.attn, &dm)?, state.mask.embeddings().clone())
        }
        Variant::Holistic => {
            let mask_in = pre_attention(&state.mask, mm)?;
            let out = attend_holistic(&text_in, &image_in, &mask_in, &p.attn, &dm)?;
            let next = if state.mask.is_empty() {
                Matrix::zeros(0, d)
            } else {
                gated_update(state.mask.embeddings(), &out.mask_out, &p.mlp[2], mm, &dm)?
            };
            (out, next)
        }
        Variant::HardDecoupled | Variant::Decoupled => {
            if state.mask.is_empty() {
                let out = attend_dynamic(&text_in, &image_in, &StaticKv::empty(d), &p.attn, &dm)?;
                (out, Matrix::zeros(0, d))
            } else {
                let entry = match ctx.source {
                    StaticSource::Recompute => std::sync::Arc::new(compute_static(
                        ctx.block_id,
                        &state.mask,
                        ctx.text_condition,
                        p,
                        ConditionFingerprint(0),
                        meter,
                    )?),
                    StaticSource::Cached { cache, fingerprint } => {
                        cache.get_or_compute(ctx.block_id, fingerprint, || {
                            compute_static(ctx.block_id, &state.mask, ctx.text_condition, p, fingerprint, meter)
                        })?
                    }
                };
                if entry.kv.rows() != state.mask.count() {
                    return Err(Error::CacheMismatch(format!(
                        "block {} cached {} mask rows, stream has {}",
                        ctx.block_id,
                        entry.kv.rows(),
                        state.mask.count()
                    )));
                }
                let out = attend_dynamic(&text_in, &image_in, &entry.kv, &p.attn, &dm)?;
                (out, entry.mask_next.clone())
            }
        }
    };

    let text = gated_update(state.text.embeddings(), &attn.text_out, &p.mlp[0], mt, &dm)?;
    let image = gated_update(state.image.embeddings(), &attn.image_out, &p.mlp[1], mx, &dm)?;
    Ok(BlockState {
        text: state.text.with_embeddings(text)?,
        image: state.image.with_embeddings(image)?,
        mask: if mask_next.rows() == 0 {
            TokenSequence::empty(Modality::Mask, d)
        } else {
            state.mask.with_embeddings(mask_next)?
        },
        t_emb: state.t_emb.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::MacCounter;
    use crate::tokens::grid_positions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rm(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
    }

    fn random_block(rng: &mut ChaCha8Rng, d: usize, heads: usize, variant: Variant) -> BlockParams<f64> {
        let s = 1.0 / (d as f64).sqrt();
        let set = |rng: &mut ChaCha8Rng| ProjectionSet {
            wq: rm(rng, d, d, s),
            wk: rm(rng, d, d, s),
            wv: rm(rng, d, d, s),
        };
        let streams = [set(rng), set(rng), set(rng)];
        let attn = StreamWeights::new(streams, rm(rng, d, d, s), heads).unwrap();
        let mlp = |rng: &mut ChaCha8Rng| Mlp {
            w1: rm(rng, d, 4 * d, s),
            w2: rm(rng, 4 * d, d, s / 2.0),
        };
        let mlps = [mlp(rng), mlp(rng), mlp(rng)];
        let w_mod = rm(rng, d, 18 * d, s);
        let b_mod = (0..18 * d).map(|_| rng.random_range(-0.1..0.1)).collect();
        BlockParams::new(attn, mlps, w_mod, b_mod, variant).unwrap()
    }

    fn state(rng: &mut ChaCha8Rng, d: usize, l: usize, side: usize, with_mask: bool, t: f64) -> BlockState<f64> {
        let text = TokenSequence::text(rm(rng, l, d, 1.0));
        let image = TokenSequence::new(Modality::Image, rm(rng, side * side, d, 1.0), grid_positions(side, side)).unwrap();
        let mask = if with_mask {
            TokenSequence::new(Modality::Mask, rm(rng, side * side, d, 1.0), grid_positions(side, side)).unwrap()
        } else {
            TokenSequence::empty(Modality::Mask, d)
        };
        let mut emb = TimestepEmbedder::zeros(d);
        emb.w1 = rm(rng, d, d, 0.3);
        emb.w2 = rm(rng, d, d, 0.3);
        let t_emb = emb.embed(t, &Meter::off());
        BlockState { text, image, mask, t_emb }
    }

    fn recompute(text: &TokenSequence<f64>) -> BlockContext<'_, f64> {
        BlockContext {
            block_id: 0,
            text_condition: text,
            source: StaticSource::Recompute,
        }
    }

    #[test]
    fn variant_codes_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.code().parse::<Variant>().unwrap(), v);
            let j = serde_json::to_string(&v).unwrap();
            assert_eq!(j, format!("\"{}\"", v.code()));
        }
        assert!("e".parse::<Variant>().is_err());
    }

    #[test]
    fn modulate_cases() {
        let x = Matrix::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]);
        let id = modulate(&x, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(id.bitwise_eq(&x));
        let z = Matrix::<f64>::zeros(3, 2);
        let sh = modulate(&z, &[0.7, -0.2], &[4.0, -1.0]).unwrap();
        for r in 0..3 {
            assert_eq!(sh.row(r), &[4.0, -1.0]);
        }
        let m = modulate(&x, &[0.5, -1.5], &[0.25, 2.0]).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let want = x[(r, c)] * (1.0 + [0.5, -1.5][c]) + [0.25, 2.0][c];
                assert_eq!(m[(r, c)], want);
            }
        }
        assert!(modulate(&x, &[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_head_is_identity_modulation() {
        let p = BlockParams::<f64>::zeros(8, 2, Variant::Decoupled).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = state(&mut rng, 8, 2, 2, true, 0.3);
        let mods = p.modulation(&st.t_emb, &Meter::off()).unwrap();
        for m in &mods {
            assert_eq!(*m, StreamModulation::identity(8));
        }
    }

    #[test]
    fn timestep_embeddings_distinct_on_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut emb = TimestepEmbedder::<f64>::zeros(16);
        emb.w1 = rm(&mut rng, 16, 16, 0.5);
        emb.w2 = rm(&mut rng, 16, 16, 0.5);
        let vs: Vec<_> = (0..=28).map(|k| emb.embed(k as f64 / 28.0, &Meter::off()).vector).collect();
        for i in 0..vs.len() {
            assert_eq!(vs[i], emb.embed(i as f64 / 28.0, &Meter::off()).vector);
            for j in 0..i {
                assert_ne!(vs[i], vs[j]);
            }
        }
    }

    #[test]
    fn zero_weights_zero_gates_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in [Variant::Holistic, Variant::HardDecoupled, Variant::Decoupled] {
            let mut p = BlockParams::<f64>::zeros(8, 2, v).unwrap();
            for (i, b) in p.b_mod.iter_mut().enumerate() {
                if (i / 8) % 3 == 2 {
                    *b = -1.0;
                }
            }
            let st = state(&mut rng, 8, 3, 2, true, 0.5);
            let out = forward_block(&st, &p, &recompute(&st.text), &Meter::off()).unwrap();
            assert!(out.text.embeddings().bitwise_eq(st.text.embeddings()));
            assert!(out.image.embeddings().bitwise_eq(st.image.embeddings()));
            assert!(out.mask.embeddings().bitwise_eq(st.mask.embeddings()));
        }
    }

    #[test]
    fn zero_gates_with_random_weights_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_block(&mut rng, 8, 2, Variant::Holistic);
        p.w_mod = Matrix::zeros(8, 144);
        for (i, b) in p.b_mod.iter_mut().enumerate() {
            if (i / 8) % 3 == 2 {
                *b = -1.0;
            }
        }
        let st = state(&mut rng, 8, 3, 2, true, 0.5);
        let out = forward_block(&st, &p, &recompute(&st.text), &Meter::off()).unwrap();
        assert!(out.text.embeddings().bitwise_eq(st.text.embeddings()));
        assert!(out.image.embeddings().bitwise_eq(st.image.embeddings()));
        assert!(out.mask.embeddings().bitwise_eq(st.mask.embeddings()));
    }

    #[test]
    fn empty_mask_matches_vanilla() {
        for heads in [1, 2, 4] {
            let mut rng = ChaCha8Rng::seed_from_u64(5 + heads as u64);
            let base = random_block(&mut rng, 8, heads, Variant::Vanilla);
            let st = state(&mut rng, 8, 3, 3, false, 0.4);
            let want = forward_block(&st, &base, &recompute(&st.text), &Meter::off()).unwrap();
            for v in [Variant::Holistic, Variant::HardDecoupled, Variant::Decoupled] {
                let p = BlockParams { variant: v, ..base.clone() };
                let got = forward_block(&st, &p, &recompute(&st.text), &Meter::off()).unwrap();
                assert_eq!(got, want, "variant {v}");
            }
        }
    }

    #[test]
    fn vanilla_rejects_mask_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_block(&mut rng, 8, 2, Variant::Vanilla);
        let st = state(&mut rng, 8, 2, 2, true, 0.5);
        assert!(forward_block(&st, &p, &recompute(&st.text), &Meter::off()).is_err());
    }

    #[test]
    fn cached_static_path_matches_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for v in [Variant::HardDecoupled, Variant::Decoupled] {
            let p = random_block(&mut rng, 8, 2, v);
            let st1 = state(&mut rng, 8, 3, 3, true, 0.9);
            let mut st2 = st1.clone();
            st2.t_emb = state(&mut rng, 8, 3, 3, true, 0.2).t_emb;
            let cache = StaticCache::new();
            let fp = ConditionFingerprint::new(&st1.mask, &st1.text, v, 1);
            let ctx = BlockContext {
                block_id: 0,
                text_condition: &st1.text,
                source: StaticSource::Cached { cache: &cache, fingerprint: fp },
            };
            forward_block(&st1, &p, &ctx, &Meter::off()).unwrap();
            let cached = forward_block(&st2, &p, &ctx, &Meter::off()).unwrap();
            let fresh = forward_block(&st2, &p, &recompute(&st1.text), &Meter::off()).unwrap();
            assert_eq!(cached, fresh);
            assert_eq!(cache.stats().misses, 1);
            assert_eq!(cache.stats().hits, 1);
        }
    }

    #[test]
    fn mask_stream_ignores_timestep_only_when_decoupled() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in [Variant::Holistic, Variant::HardDecoupled, Variant::Decoupled] {
            let p = random_block(&mut rng, 8, 2, v);
            let mut a = state(&mut rng, 8, 3, 2, true, 0.0);
            let mut b = a.clone();
            let mut emb = TimestepEmbedder::zeros(8);
            emb.w1 = rm(&mut rng, 8, 8, 0.5);
            emb.w2 = rm(&mut rng, 8, 8, 0.5);
            a.t_emb = emb.embed(0.0, &Meter::off());
            b.t_emb = emb.embed(27.0 / 28.0, &Meter::off());
            let oa = forward_block(&a, &p, &recompute(&a.text), &Meter::off()).unwrap();
            let ob = forward_block(&b, &p, &recompute(&b.text), &Meter::off()).unwrap();
            let same = oa.mask.embeddings().bitwise_eq(ob.mask.embeddings());
            assert_eq!(same, v.is_decoupled(), "variant {v}");
        }
    }

    #[test]
    fn lora_zero_b_is_noop_and_full_rank_matches_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = random_block(&mut rng, 8, 2, Variant::Decoupled);
        let st = state(&mut rng, 8, 3, 2, true, 0.5);
        let base = forward_block(&st, &p, &recompute(&st.text), &Meter::off()).unwrap();

        let ids = LoraTargets::AllAttention.linears();
        let zero: Vec<_> = ids
            .iter()
            .map(|&id| (id, LowRankAdapter::new(rm(&mut rng, 2, 8, 1.0), Matrix::zeros(8, 2), 4.0).unwrap()))
            .collect();
        let pz = apply_lora(&p, &zero).unwrap();
        assert!(pz.has_lora());
        assert_eq!(forward_block(&st, &pz, &recompute(&st.text), &Meter::off()).unwrap(), base);

        let delta = rm(&mut rng, 8, 8, 0.1);
        let full = LowRankAdapter::new(delta.clone(), Matrix::identity(8), 8.0).unwrap();
        let pf = apply_lora(&p, &[(LinearId::K(Stream::Image), full)]).unwrap();
        let mut direct = p.clone();
        direct.attn.stream_mut(Stream::Image).wk = p.attn.stream(Stream::Image).wk.add(&delta);
        assert!(pf.attn.stream(Stream::Image).wk.bitwise_eq(&direct.attn.stream(Stream::Image).wk));
        assert_eq!(pf.reset_lora(), p);

        let too_big = LowRankAdapter::new(rm(&mut rng, 9, 8, 1.0), rm(&mut rng, 8, 9, 1.0), 1.0);
        assert!(too_big.is_err());
    }

    #[test]
    fn lora_fraction_audit() {
        let flux = lora_parameter_fraction(3072, 19, 8, LoraTargets::TextAttention);
        assert!(flux < 1e-3, "{flux}");
        let toy = lora_parameter_fraction(64, 4, 8, LoraTargets::TextAttention);
        let per_block = 4.0 * 8.0 * 128.0;
        assert!((toy - per_block / block_param_count(64) as f64).abs() < 1e-15);
    }

    #[test]
    fn measured_block_macs_match_block_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (l, side, d) = (3usize, 3usize, 8usize);
        let n = side * side;
        for v in [Variant::Vanilla, Variant::Holistic, Variant::HardDecoupled, Variant::Decoupled] {
            let p = random_block(&mut rng, d, 2, v);
            let st = state(&mut rng, d, l, side, v != Variant::Vanilla, 0.5);
            let counter = MacCounter::new();
            forward_block(&st, &p, &recompute(&st.text), &counter.meter(Pathway::Outside)).unwrap();
            let tally = counter.tally().unwrap();
            let want = crate::cost::block_cost(v, n as u64, l as u64, d as u64).unwrap();
            assert_eq!(tally.path_total(Pathway::Dynamic) as u128, want.dynamic_total(), "{v}");
            assert_eq!(tally.path_total(Pathway::Static) as u128, want.static_total(), "{v}");
            assert_eq!(tally.path_total(Pathway::Outside), 0);
        }
    }

    #[test]
    fn named_matrices_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = random_block(&mut rng, 8, 2, Variant::Decoupled);
        let named = p.named_matrices();
        let q = BlockParams::from_named(
            |n| Ok(named.iter().find(|(k, _)| k == n).unwrap().1.clone()),
            2,
            Variant::Decoupled,
        )
        .unwrap();
        assert_eq!(p, q);
    }
}
