//! Scaled dot-product attention and the four attention layouts a block can
//! use: dual-stream (text + image), holistic tri-stream (text + image +
//! mask in one joint softmax), and the decoupled pair of a timestep-driven
//! dynamic pathway and a timestep-free static pathway.
//!
//! Every layout projects each stream with its own Q/K/V matrices, rotates
//! queries and keys by their grid positions, attends, and maps the result
//! through a shared output projection.

use serde::{Deserialize, Serialize};

use crate::cost::{MacKind, Meter};
use crate::error::{rejected, Error, Result};
use crate::linalg::{c, softmax_rows, Matrix, Real};
use crate::tokens::{Pos, RopeConfig, RopeTable, TokenSequence};

/// One of the three token streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    Text,
    Image,
    Mask,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Text, Stream::Image, Stream::Mask];

    pub fn index(self) -> usize {
        match self {
            Stream::Text => 0,
            Stream::Image => 1,
            Stream::Mask => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Text => "text",
            Stream::Image => "image",
            Stream::Mask => "mask",
        }
    }
}

/// Query/key/value matrices for one stream, each `d × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
}

impl<T: Real> ProjectionSet<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            wq: Matrix::identity(d),
            wk: Matrix::identity(d),
            wv: Matrix::identity(d),
        }
    }

    pub fn cast<U: Real>(&self) -> ProjectionSet<U> {
        ProjectionSet {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
        }
    }
}

/// Per-stream attention weights of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamWeights<T> {
    /// Indexed by [`Stream::index`].
    pub streams: [ProjectionSet<T>; 3],
    /// Shared output projection, `d × d`.
    pub w_o: Matrix<T>,
    pub heads: usize,
    pub rope: RopeConfig,
    /// In the decoupled layouts, project mask tokens with the text-stream
    /// matrices instead of the mask stream's own.
    pub mask_uses_text_weights: bool,
}

impl<T: Real> StreamWeights<T> {
    pub fn new(streams: [ProjectionSet<T>; 3], w_o: Matrix<T>, heads: usize) -> Result<Self> {
        let d = w_o.rows();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
        }
        let w = Self {
            streams,
            w_o,
            heads,
            rope: RopeConfig::new(d / heads),
            mask_uses_text_weights: true,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn d(&self) -> usize {
        self.w_o.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.heads
    }

    pub fn stream(&self, s: Stream) -> &ProjectionSet<T> {
        &self.streams[s.index()]
    }

    pub fn stream_mut(&mut self, s: Stream) -> &mut ProjectionSet<T> {
        &mut self.streams[s.index()]
    }

    /// Projections applied to mask tokens in the decoupled layouts.
    pub fn decoupled_mask_projection(&self) -> &ProjectionSet<T> {
        if self.mask_uses_text_weights {
            self.stream(Stream::Text)
        } else {
            self.stream(Stream::Mask)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.w_o.cols() != d {
            return Err(Error::Config("output projection must be square".into()));
        }
        for s in &self.streams {
            for m in [&s.wq, &s.wk, &s.wv] {
                if m.shape() != (d, d) {
                    return Err(Error::Config(format!(
                        "projection is {:?}, expected ({d}, {d})",
                        m.shape()
                    )));
                }
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("width {d} not divisible into {} heads", self.heads)));
        }
        if self.rope.head_dim != self.head_dim() {
            return Err(Error::Config("rope head_dim differs from attention head_dim".into()));
        }
        self.rope.validate()
    }

    pub fn cast<U: Real>(&self) -> StreamWeights<U> {
        StreamWeights {
            streams: [
                self.streams[0].cast(),
                self.streams[1].cast(),
                self.streams[2].cast(),
            ],
            w_o: self.w_o.cast(),
            heads: self.heads,
            rope: self.rope,
            mask_uses_text_weights: self.mask_uses_text_weights,
        }
    }
}

/// A low-rank update `W + (α/r)·B·A` for an `in × out` weight, with
/// `B: in × r` and `A: r × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter<T> {
    pub a: Matrix<T>,
    pub b: Matrix<T>,
    pub alpha: f64,
}

impl<T: Real> LowRankAdapter<T> {
    pub fn new(a: Matrix<T>, b: Matrix<T>, alpha: f64) -> Result<Self> {
        let r = a.rows();
        if r == 0 {
            return Err(rejected("adapter rank must be at least 1"));
        }
        if b.cols() != r {
            return Err(rejected(format!(
                "adapter B has {} columns, A has rank {r}",
                b.cols()
            )));
        }
        if r > b.rows().min(a.cols()) {
            return Err(rejected(format!(
                "adapter rank {r} exceeds the {}x{} weight it adapts",
                b.rows(),
                a.cols()
            )));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn param_count(&self) -> usize {
        self.a.as_slice().len() + self.b.as_slice().len()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// `(α/r)·B·A`.
    pub fn delta(&self) -> Matrix<T> {
        self.b.matmul(&self.a).scale(c(self.scaling()))
    }

    /// The effective weight `w + delta`.
    pub fn merge(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        if w.shape() != self.shape() {
            return Err(rejected(format!(
                "adapter shape {:?} does not match weight {:?}",
                self.shape(),
                w.shape()
            )));
        }
        Ok(w.add(&self.delta()))
    }

    pub fn cast<U: Real>(&self) -> LowRankAdapter<U> {
        LowRankAdapter {
            a: self.a.cast(),
            b: self.b.cast(),
            alpha: self.alpha,
        }
    }
}

/// Per-stream attention results, already through the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    pub text_out: Matrix<T>,
    pub image_out: Matrix<T>,
    pub mask_out: Matrix<T>,
    /// Per-head probability matrices, present only when the meter asked
    /// for them.
    pub attn_weights: Option<Vec<Matrix<T>>>,
}

/// Keys and values of the mask tokens, produced by the static pathway and
/// consumed by the dynamic one. Keys are already rotated.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticKv<T> {
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Real> StaticKv<T> {
    pub fn empty(d: usize) -> Self {
        Self {
            k: Matrix::zeros(0, d),
            v: Matrix::zeros(0, d),
        }
    }

    pub fn rows(&self) -> usize {
        self.k.rows()
    }
}

/// Result of the static pathway.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticOutput<T> {
    /// Mask-row attention output through the output projection.
    pub mask_out: Matrix<T>,
    pub kv: StaticKv<T>,
    pub attn_weights: Option<Vec<Matrix<T>>>,
}

/// Multi-head attention `softmax(QKᵀ/√d_h)·V`, heads concatenated.
pub fn sdpa<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    meter: &Meter,
) -> Result<Matrix<T>> {
    sdpa_with_weights(q, k, v, heads, meter).map(|(o, _)| o)
}

/// [`sdpa`] that also returns per-head probabilities when
/// `meter.capture_weights` is set.
pub fn sdpa_with_weights<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    meter: &Meter,
) -> Result<(Matrix<T>, Option<Vec<Matrix<T>>>)> {
    if k.rows() == 0 {
        return Err(Error::EmptyKeys);
    }
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(rejected(format!(
            "sdpa shapes Q{:?} K{:?} V{:?} do not line up",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::one() / c::<T>(dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut captured = meter.capture_weights.then(Vec::new);
    for h in 0..heads {
        let (qh, kh, vh) = (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh));
        let scores = meter.matmul_t(MacKind::Attention, &qh, &kh).scale(scale);
        let p = softmax_rows(&scores);
        let oh = meter.matmul(MacKind::Attention, &p, &vh);
        for r in 0..q.rows() {
            out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(r));
        }
        if let Some(ws) = captured.as_mut() {
            ws.push(p);
        }
    }
    Ok((out, captured))
}

/// Projected, rotated queries/keys and values of a joint sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

fn check_width<T: Real>(seqs: &[&TokenSequence<T>], d: usize) -> Result<()> {
    for s in seqs {
        if s.d() != d && !(s.is_empty() && s.d() == 0) {
            return Err(rejected(format!(
                "{:?} tokens have width {}, weights expect {d}",
                s.modality(),
                s.d()
            )));
        }
    }
    Ok(())
}

/// Projects one stream and rotates its queries and keys.
pub fn project_stream<T: Real>(
    x: &TokenSequence<T>,
    set: &ProjectionSet<T>,
    rope: &RopeConfig,
    meter: &Meter,
) -> Result<Qkv<T>> {
    let e = x.embeddings();
    if e.rows() == 0 {
        let d = set.wq.cols();
        return Ok(Qkv {
            q: Matrix::zeros(0, d),
            k: Matrix::zeros(0, d),
            v: Matrix::zeros(0, d),
        });
    }
    let q = meter.matmul(MacKind::Projection, e, &set.wq);
    let k = meter.matmul(MacKind::Projection, e, &set.wk);
    let v = meter.matmul(MacKind::Projection, e, &set.wv);
    let table = RopeTable::new(x.positions(), rope)?;
    Ok(Qkv {
        q: table.rotate(&q, false)?,
        k: table.rotate(&k, false)?,
        v,
    })
}

fn concat_qkv<T: Real>(parts: &[&Qkv<T>]) -> Qkv<T> {
    Qkv {
        q: Matrix::concat_rows(&parts.iter().map(|p| &p.q).collect::<Vec<_>>()),
        k: Matrix::concat_rows(&parts.iter().map(|p| &p.k).collect::<Vec<_>>()),
        v: Matrix::concat_rows(&parts.iter().map(|p| &p.v).collect::<Vec<_>>()),
    }
}

/// Tri-stream projection of `[text; image; mask]`, each block with its own
/// matrices, queries and keys rotated by position (text sits at the origin,
/// where the rotation is the identity).
pub fn project_tri<T: Real>(
    text: &TokenSequence<T>,
    image: &TokenSequence<T>,
    mask: &TokenSequence<T>,
    w: &StreamWeights<T>,
    meter: &Meter,
) -> Result<Qkv<T>> {
    check_width(&[text, image, mask], w.d())?;
    let t = project_stream(text, w.stream(Stream::Text), &w.rope, meter)?;
    let x = project_stream(image, w.stream(Stream::Image), &w.rope, meter)?;
    let m = project_stream(mask, w.stream(Stream::Mask), &w.rope, meter)?;
    Ok(concat_qkv(&[&t, &x, &m]))
}

fn output_projection<T: Real>(o: &Matrix<T>, w: &StreamWeights<T>, meter: &Meter) -> Matrix<T> {
    if o.rows() == 0 {
        return Matrix::zeros(0, w.d());
    }
    meter.matmul(MacKind::Projection, o, &w.w_o)
}

/// Full joint attention over `[text; image; mask]`; every stream is
/// updated. With an empty mask this is the dual-stream layout.
pub fn attend_holistic<T: Real>(
    text: &TokenSequence<T>,
    image: &TokenSequence<T>,
    mask: &TokenSequence<T>,
    w: &StreamWeights<T>,
    meter: &Meter,
) -> Result<AttentionOutput<T>> {
    let qkv = project_tri(text, image, mask, w, meter)?;
    let (o, attn_weights) = sdpa_with_weights(&qkv.q, &qkv.k, &qkv.v, w.heads, meter)?;
    let o = output_projection(&o, w, meter);
    let (l, n) = (text.count(), image.count());
    Ok(AttentionOutput {
        text_out: o.slice_rows(0, l),
        image_out: o.slice_rows(l, n),
        mask_out: o.slice_rows(l + n, mask.count()),
        attn_weights,
    })
}

/// Dual-stream attention over `[text; image]`.
pub fn attend_dual<T: Real>(
    text: &TokenSequence<T>,
    image: &TokenSequence<T>,
    w: &StreamWeights<T>,
    meter: &Meter,
) -> Result<AttentionOutput<T>> {
    let empty = TokenSequence::empty(crate::tokens::Modality::Mask, w.d());
    attend_holistic(text, image, &empty, w, meter)
}

/// Dynamic pathway: queries from `[text; image]`, keys and values from
/// `[text; image; mask]` with the mask part supplied by the static pathway.
pub fn attend_dynamic<T: Real>(
    text: &TokenSequence<T>,
    image: &TokenSequence<T>,
    static_kv: &StaticKv<T>,
    w: &StreamWeights<T>,
    meter: &Meter,
) -> Result<AttentionOutput<T>> {
    check_width(&[text, image], w.d())?;
    let d = w.d();
    if static_kv.rows() > 0
        && (static_kv.k.cols() != d || static_kv.v.cols() != d || static_kv.k.rows() != static_kv.v.rows())
    {
        return Err(Error::CacheMismatch(format!(
            "static K{:?}/V{:?} for width {d}",
            static_kv.k.shape(),
            static_kv.v.shape()
        )));
    }
    let t = project_stream(text, w.stream(Stream::Text), &w.rope, meter)?;
    let x = project_stream(image, w.stream(Stream::Image), &w.rope, meter)?;
    let q = Matrix::concat_rows(&[&t.q, &x.q]);
    let k = Matrix::concat_rows(&[&t.k, &x.k, &static_kv.k]);
    let v = Matrix::concat_rows(&[&t.v, &x.v, &static_kv.v]);
    let (o, attn_weights) = sdpa_with_weights(&q, &k, &v, w.heads, meter)?;
    let o = output_projection(&o, w, meter);
    let l = text.count();
    Ok(AttentionOutput {
        text_out: o.slice_rows(0, l),
        image_out: o.slice_rows(l, image.count()),
        mask_out: Matrix::zeros(0, d),
        attn_weights,
    })
}

/// Static pathway: self-attention over the mask tokens alone
/// (`include_text = false`) or over `[mask; text]` (`include_text = true`).
/// Returns `None` when there are no mask tokens, in which case the caller
/// drops the mask stream.
///
/// Only mask rows go through the output projection; text rows serve as
/// context.
pub fn attend_static<T: Real>(
    mask: &TokenSequence<T>,
    text: &TokenSequence<T>,
    w: &StreamWeights<T>,
    include_text: bool,
    meter: &Meter,
) -> Result<Option<StaticOutput<T>>> {
    if mask.is_empty() {
        return Ok(None);
    }
    check_width(&[mask, text], w.d())?;
    let m = project_stream(mask, w.decoupled_mask_projection(), &w.rope, meter)?;
    let joint = if include_text && !text.is_empty() {
        let t = project_stream(text, w.stream(Stream::Text), &w.rope, meter)?;
        concat_qkv(&[&m, &t])
    } else {
        m.clone()
    };
    let (o, attn_weights) = sdpa_with_weights(&joint.q, &joint.k, &joint.v, w.heads, meter)?;
    let n = mask.count();
    let mask_out = output_projection(&o.slice_rows(0, n), w, meter);
    Ok(Some(StaticOutput {
        mask_out,
        kv: StaticKv { k: m.k, v: m.v },
        attn_weights,
    }))
}

/// Rotated keys for arbitrary rows; exposed for tests and tooling.
pub fn rotate_keys<T: Real>(k: &Matrix<T>, positions: &[Pos], rope: &RopeConfig) -> Result<Matrix<T>> {
    RopeTable::new(positions, rope)?.rotate(k, false)
}
