//! Multiply-accumulate accounting.
//!
//! Two independent routes to the same numbers:
//!
//! * [`MacCounter`] / [`Meter`] tally the MACs that kernels actually execute,
//!   split by pathway (dynamic, static, outside the blocks) and by kind
//!   (attention scores, linear projections, feed-forward).
//! * [`analytic_attention_macs`] and [`analytic_block_macs`] evaluate closed
//!   forms for the same quantities without running anything.
//!
//! Softmax, normalization, RoPE and elementwise modulation are not counted
//! by either route.

use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::block::Variant;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

/// Where a MAC was spent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    /// Timestep-modulated computation, repeated every denoising step.
    Dynamic,
    /// Timestep-independent mask (and text) computation.
    Static,
    /// Embedders, timestep MLP and the output head.
    Outside,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacKind {
    /// `QKᵀ` and `PV` products.
    Attention,
    /// Q/K/V/output projections and modulation heads.
    Projection,
    /// Feed-forward layers.
    Mlp,
}

const PATHS: [Pathway; 3] = [Pathway::Dynamic, Pathway::Static, Pathway::Outside];
const KINDS: [MacKind; 3] = [MacKind::Attention, MacKind::Projection, MacKind::Mlp];

fn path_index(p: Pathway) -> usize {
    match p {
        Pathway::Dynamic => 0,
        Pathway::Static => 1,
        Pathway::Outside => 2,
    }
}

fn kind_index(k: MacKind) -> usize {
    match k {
        MacKind::Attention => 0,
        MacKind::Projection => 1,
        MacKind::Mlp => 2,
    }
}

/// A per-run MAC tally. Cheap to share across threads; a disabled counter
/// ignores every update.
#[derive(Debug)]
pub struct MacCounter {
    enabled: bool,
    counts: [[AtomicU64; 3]; 3],
    overflowed: AtomicBool,
}

static DISABLED: MacCounter = MacCounter::disabled();

impl Default for MacCounter {
    fn default() -> Self {
        Self::new()
    }
}

impl MacCounter {
    pub const fn new() -> Self {
        Self::with_enabled(true)
    }

    pub const fn disabled() -> Self {
        Self::with_enabled(false)
    }

    const fn with_enabled(enabled: bool) -> Self {
        Self {
            enabled,
            counts: [
                [AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0)],
                [AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0)],
                [AtomicU64::new(0), AtomicU64::new(0), AtomicU64::new(0)],
            ],
            overflowed: AtomicBool::new(false),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn add(&self, path: Pathway, kind: MacKind, macs: u64) {
        if !self.enabled {
            return;
        }
        let cell = &self.counts[path_index(path)][kind_index(kind)];
        if cell
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |v| v.checked_add(macs))
            .is_err()
        {
            self.overflowed.store(true, Ordering::Relaxed);
        }
    }

    /// Snapshot of the current counts.
    pub fn tally(&self) -> Result<MacTally> {
        if self.overflowed.load(Ordering::Relaxed) {
            return Err(Error::CounterOverflow);
        }
        let mut counts = [[0u64; 3]; 3];
        for (p, row) in self.counts.iter().enumerate() {
            for (k, cell) in row.iter().enumerate() {
                counts[p][k] = cell.load(Ordering::Relaxed);
            }
        }
        Ok(MacTally { counts })
    }

    pub fn reset(&self) {
        for row in &self.counts {
            for cell in row {
                cell.store(0, Ordering::Relaxed);
            }
        }
        self.overflowed.store(false, Ordering::Relaxed);
    }

    /// A meter that charges this counter under `path`.
    pub fn meter(&self, path: Pathway) -> Meter<'_> {
        Meter {
            counter: self,
            path,
            capture_weights: false,
        }
    }
}

/// Snapshot of a [`MacCounter`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacTally {
    counts: [[u64; 3]; 3],
}

impl MacTally {
    pub fn get(&self, path: Pathway, kind: MacKind) -> u64 {
        self.counts[path_index(path)][kind_index(kind)]
    }

    pub fn path_total(&self, path: Pathway) -> u64 {
        KINDS.iter().map(|&k| self.get(path, k)).sum()
    }

    pub fn kind_total(&self, kind: MacKind) -> u64 {
        PATHS.iter().map(|&p| self.get(p, kind)).sum()
    }

    /// MACs spent inside transformer blocks.
    pub fn block_total(&self) -> u64 {
        self.path_total(Pathway::Dynamic) + self.path_total(Pathway::Static)
    }

    pub fn total(&self) -> u64 {
        PATHS.iter().map(|&p| self.path_total(p)).sum()
    }

    /// Elementwise difference `self - earlier`.
    pub fn since(&self, earlier: &MacTally) -> MacTally {
        let mut counts = self.counts;
        for (p, row) in counts.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v -= earlier.counts[p][k];
            }
        }
        MacTally { counts }
    }
}

/// A borrowed view of a counter bound to one pathway. Every metered kernel
/// in the crate takes one.
#[derive(Clone, Copy, Debug)]
pub struct Meter<'a> {
    counter: &'a MacCounter,
    path: Pathway,
    /// When set, attention routines also return their probability matrices.
    pub capture_weights: bool,
}

impl Meter<'static> {
    /// A meter that counts nothing.
    pub fn off() -> Self {
        DISABLED.meter(Pathway::Outside)
    }
}

impl<'a> Meter<'a> {
    pub fn path(&self) -> Pathway {
        self.path
    }

    pub fn on(&self, path: Pathway) -> Meter<'a> {
        Meter { path, ..*self }
    }

    pub fn capturing(&self) -> Meter<'a> {
        Meter {
            capture_weights: true,
            ..*self
        }
    }

    pub fn charge(&self, kind: MacKind, macs: u64) {
        self.counter.add(self.path, kind, macs);
    }

    /// `a · b`, charging `rows(a)·cols(a)·cols(b)` MACs.
    pub fn matmul<T: Real>(&self, kind: MacKind, a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
        self.charge(kind, (a.rows() * a.cols() * b.cols()) as u64);
        a.matmul(b)
    }

    /// `a · bᵀ`, charging `rows(a)·rows(b)·cols(a)` MACs.
    pub fn matmul_t<T: Real>(&self, kind: MacKind, a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
        self.charge(kind, (a.rows() * b.rows() * a.cols()) as u64);
        a.matmul_t(b)
    }
}

/// Runs `run` against a fresh counter and returns its result with the tally.
pub fn measure_macs<R>(run: impl FnOnce(&MacCounter) -> R) -> Result<(R, MacTally)> {
    let counter = MacCounter::new();
    let out = run(&counter);
    Ok((out, counter.tally()?))
}

/// Problem size for the analytic model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostDims {
    /// Image tokens; the mask contributes the same number.
    pub n: u64,
    /// Text tokens.
    pub l: u64,
    /// Denoising steps.
    pub t: u64,
    /// Model width.
    pub d: u64,
    pub heads: u64,
    pub depth: u64,
}

impl CostDims {
    /// Reference dimensions for reconciling against large-model overhead
    /// figures. These are an assumption: 64×64 latent patches, 512 text
    /// tokens, 19 double-stream blocks of width 3072, 28 steps.
    pub const FLUX_LIKE: CostDims = CostDims {
        n: 4096,
        l: 512,
        t: 28,
        d: 3072,
        heads: 24,
        depth: 19,
    };

    /// Default toy dimensions.
    pub const TOY: CostDims = CostDims {
        n: 64,
        l: 8,
        t: 28,
        d: 64,
        heads: 4,
        depth: 4,
    };
}

/// Small configurations on which instrumented and analytic counts are
/// compared.
pub fn toy_grid() -> Vec<CostDims> {
    let mut out = Vec::new();
    for side in [2u64, 4, 8] {
        for l in [1u64, 3, 8] {
            for (d, heads) in [(8u64, 2u64), (16, 4)] {
                out.push(CostDims {
                    n: side * side,
                    l,
                    t: 3,
                    d,
                    heads,
                    depth: 2,
                });
            }
        }
    }
    out
}

fn mul(xs: &[u64]) -> Result<u128> {
    xs.iter().try_fold(1u128, |acc, &x| {
        acc.checked_mul(x as u128).ok_or(Error::CounterOverflow)
    })
}

fn sum(xs: &[u128]) -> Result<u128> {
    xs.iter()
        .try_fold(0u128, |acc, &x| acc.checked_add(x).ok_or(Error::CounterOverflow))
}

/// Attention-score MACs (`QKᵀ` plus `PV`) of one block over a full run.
///
/// | variant | MACs |
/// |---|---|
/// | vanilla, channel-concat | `T·2d·(N+L)²` |
/// | holistic | `T·2d·(2N+L)²` |
/// | hard-decoupled | `T·2d·(N+L)(2N+L) + 2d·N²` |
/// | decoupled | `T·2d·(N+L)(2N+L) + 2d·(N+L)²` |
///
/// The one-off static term vanishes when `N = 0`, since the static pathway
/// is skipped without mask tokens.
pub fn analytic_attention_macs(variant: Variant, n: u64, l: u64, t: u64, d: u64) -> Result<u128> {
    let two_d = 2 * d;
    Ok(match variant {
        Variant::Vanilla | Variant::ChannelConcat => mul(&[t, two_d, n + l, n + l])?,
        Variant::Holistic => mul(&[t, two_d, 2 * n + l, 2 * n + l])?,
        Variant::HardDecoupled | Variant::Decoupled => {
            let dynamic = mul(&[t, two_d, n + l, 2 * n + l])?;
            let stat = if n == 0 {
                0
            } else if variant == Variant::HardDecoupled {
                mul(&[two_d, n, n])?
            } else {
                mul(&[two_d, n + l, n + l])?
            };
            sum(&[dynamic, stat])?
        }
    })
}

/// Analytic cost of a whole block stack over one sampling run, with
/// per-step and one-off components kept apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub dims: CostDims,
    pub attn_macs_dynamic: u128,
    pub attn_macs_static: u128,
    /// Q/K/V/output projections plus the per-block modulation head (and the
    /// fusion projection for channel concatenation).
    pub proj_macs: u128,
    pub mlp_macs: u128,
    pub total_macs: u128,
    /// `total_macs` minus the vanilla total at the same dims.
    pub mask_overhead_macs: u128,
    /// `1 - overhead / overhead(holistic)`; 0 when the holistic overhead is 0.
    pub reduction_vs_b: f64,
    /// Linear-layer-only overhead (attention scores excluded).
    pub linear_overhead_macs: u128,
    /// Cumulative total MACs after each step; static work lands in step 1.
    pub cumulative_total: Vec<u128>,
    /// Cumulative mask overhead after each step.
    pub cumulative_overhead: Vec<u128>,
    /// Filled in when an instrumented run is compared against the model.
    pub measured_vs_analytic_rel_err: Option<f64>,
}

/// One block's MACs split into (attention, projection, mlp) for a single
/// step of the dynamic pathway, and for the one-off static pathway.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockCost {
    pub dynamic: [u128; 3],
    pub statik: [u128; 3],
}

impl BlockCost {
    pub fn dynamic_total(&self) -> u128 {
        self.dynamic.iter().sum()
    }
    pub fn static_total(&self) -> u128 {
        self.statik.iter().sum()
    }
}

/// Number of modulation values the per-block head emits: shift, scale and
/// gate for attention and feed-forward, for each of three streams.
pub const MODULATION_CHUNKS: u64 = 18;

/// MAC breakdown of a single block at the given dims.
pub fn block_cost(variant: Variant, n: u64, l: u64, d: u64) -> Result<BlockCost> {
    let d2 = d * d;
    let modulation = mul(&[MODULATION_CHUNKS, d2])?;
    let dyn_tokens = match variant {
        Variant::Holistic => 2 * n + l,
        _ => n + l,
    };
    let dyn_attn = analytic_attention_macs(variant, n, l, 1, d)?;
    let dyn_attn = match variant {
        // remove the static term from the T = 1 evaluation
        Variant::HardDecoupled | Variant::Decoupled => mul(&[2 * d, n + l, 2 * n + l])?,
        _ => dyn_attn,
    };
    let dynamic = [
        dyn_attn,
        sum(&[mul(&[dyn_tokens, 4, d2])?, modulation])?,
        mul(&[dyn_tokens, 8, d2])?,
    ];
    let statik = match variant {
        _ if n == 0 => [0; 3],
        Variant::HardDecoupled => [
            mul(&[2 * d, n, n])?,
            mul(&[n, 4, d2])?,
            mul(&[n, 8, d2])?,
        ],
        Variant::Decoupled => [
            mul(&[2 * d, n + l, n + l])?,
            // Q/K/V over mask and text rows, output projection for mask rows
            sum(&[mul(&[n + l, 3, d2])?, mul(&[n, d2])?])?,
            mul(&[n, 8, d2])?,
        ],
        _ => [0; 3],
    };
    Ok(BlockCost { dynamic, statik })
}

fn stack_totals(variant: Variant, dims: &CostDims) -> Result<([u128; 3], [u128; 3], u128)> {
    let b = block_cost(variant, dims.n, dims.l, dims.d)?;
    let depth = dims.depth as u128;
    let t = dims.t as u128;
    let ck = |x: u128, y: u128| x.checked_mul(y).ok_or(Error::CounterOverflow);
    let mut dynamic = [0u128; 3];
    let mut statik = [0u128; 3];
    for i in 0..3 {
        dynamic[i] = ck(ck(b.dynamic[i], t)?, depth)?;
        statik[i] = ck(b.statik[i], depth)?;
    }
    let fuse = if variant == Variant::ChannelConcat {
        mul(&[dims.t, dims.n, 2 * dims.d, dims.d])?
    } else {
        0
    };
    Ok((dynamic, statik, fuse))
}

fn linear_total(variant: Variant, dims: &CostDims) -> Result<u128> {
    let (dynamic, statik, fuse) = stack_totals(variant, dims)?;
    sum(&[dynamic[1], dynamic[2], statik[1], statik[2], fuse])
}

fn cumulative(variant: Variant, dims: &CostDims) -> Result<Vec<u128>> {
    let (dynamic, statik, fuse) = stack_totals(variant, dims)?;
    let per_step = if dims.t == 0 {
        0
    } else {
        (dynamic.iter().sum::<u128>() + fuse) / dims.t as u128
    };
    let once: u128 = statik.iter().sum();
    Ok((1..=dims.t as u128).map(|k| once + per_step * k).collect())
}

/// Full-block analytic cost of a `depth`-block stack over `T` steps.
///
/// Per token and step a block spends `3d²` on Q/K/V, `d²` on the output
/// projection and `8d²` on the feed-forward, plus `18d²` per step for its
/// modulation head. Static-pathway work is charged once, dynamic work `T`
/// times.
pub fn analytic_block_macs(variant: Variant, dims: CostDims) -> Result<CostReport> {
    let (dynamic, statik, fuse) = stack_totals(variant, &dims)?;
    let total = sum(&[
        dynamic.iter().sum(),
        statik.iter().sum(),
        fuse,
    ])?;
    let baseline = analytic_total(Variant::Vanilla, &dims)?;
    let holistic_overhead = analytic_total(Variant::Holistic, &dims)? - baseline;
    let overhead = total - baseline;
    let reduction_vs_b = if holistic_overhead == 0 {
        0.0
    } else {
        1.0 - overhead as f64 / holistic_overhead as f64
    };
    let linear_overhead = linear_total(variant, &dims)? - linear_total(Variant::Vanilla, &dims)?;
    let cumulative_total = cumulative(variant, &dims)?;
    let base_cum = cumulative(Variant::Vanilla, &dims)?;
    let cumulative_overhead = cumulative_total
        .iter()
        .zip(&base_cum)
        .map(|(a, b)| a - b)
        .collect();
    Ok(CostReport {
        variant,
        dims,
        attn_macs_dynamic: dynamic[0],
        attn_macs_static: statik[0],
        proj_macs: dynamic[1] + statik[1] + fuse,
        mlp_macs: dynamic[2] + statik[2],
        total_macs: total,
        mask_overhead_macs: overhead,
        reduction_vs_b,
        linear_overhead_macs: linear_overhead,
        cumulative_total,
        cumulative_overhead,
        measured_vs_analytic_rel_err: None,
    })
}

fn analytic_total(variant: Variant, dims: &CostDims) -> Result<u128> {
    let (dynamic, statik, fuse) = stack_totals(variant, dims)?;
    sum(&[dynamic.iter().sum(), statik.iter().sum(), fuse])
}

impl CostReport {
    /// Records the relative error of a measured block-MAC total.
    pub fn with_measurement(mut self, measured_block_macs: u128) -> Self {
        let analytic = self.total_macs as f64;
        let err = if analytic == 0.0 {
            if measured_block_macs == 0 { 0.0 } else { f64::INFINITY }
        } else {
            (measured_block_macs as f64 - analytic).abs() / analytic
        };
        self.measured_vs_analytic_rel_err = Some(err);
        self
    }

    /// The four analytic rows plotted against each other.
    pub fn csv_header() -> &'static str {
        "variant,N,L,T,d,depth,attn_dynamic,attn_static,proj,mlp,total,mask_overhead,reduction_vs_b"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.variant.code(),
            self.dims.n,
            self.dims.l,
            self.dims.t,
            self.dims.d,
            self.dims.depth,
            self.attn_macs_dynamic,
            self.attn_macs_static,
            self.proj_macs,
            self.mlp_macs,
            self.total_macs,
            self.mask_overhead_macs,
            self.reduction_vs_b
        )
    }

    /// JSON object with the CSV columns plus the cumulative series. MAC
    /// counts are emitted as decimal strings since they can exceed 2⁵³.
    pub fn to_json(&self) -> serde_json::Value {
        let s = |v: u128| serde_json::Value::String(v.to_string());
        serde_json::json!({
            "variant": self.variant.code(),
            "N": self.dims.n,
            "L": self.dims.l,
            "T": self.dims.t,
            "d": self.dims.d,
            "depth": self.dims.depth,
            "attn_dynamic": s(self.attn_macs_dynamic),
            "attn_static": s(self.attn_macs_static),
            "proj": s(self.proj_macs),
            "mlp": s(self.mlp_macs),
            "total": s(self.total_macs),
            "mask_overhead": s(self.mask_overhead_macs),
            "reduction_vs_b": self.reduction_vs_b,
            "cumulative_total": self.cumulative_total.iter().map(|&v| s(v)).collect::<Vec<_>>(),
            "cumulative_overhead": self.cumulative_overhead.iter().map(|&v| s(v)).collect::<Vec<_>>(),
        })
    }
}

/// The variants a sweep covers by default: baseline plus the three
/// mask-conditioned designs.
pub const SWEEP_VARIANTS: [Variant; 4] = [
    Variant::Vanilla,
    Variant::Holistic,
    Variant::HardDecoupled,
    Variant::Decoupled,
];

/// Evaluates the analytic model at every `(dims, variant)` pair, dims-major.
pub fn sweep(grid: &[CostDims], variants: &[Variant]) -> Result<Vec<CostReport>> {
    if grid.is_empty() || variants.is_empty() {
        return Err(Error::Rejected("empty sweep grid".into()));
    }
    let mut out = Vec::with_capacity(grid.len() * variants.len());
    for dims in grid {
        for &v in variants {
            out.push(analytic_block_macs(v, *dims)?);
        }
    }
    Ok(out)
}

pub fn write_csv(w: &mut impl Write, reports: &[CostReport]) -> Result<()> {
    writeln!(w, "{}", CostReport::csv_header())?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn write_json(w: &mut impl Write, reports: &[CostReport]) -> Result<()> {
    let rows: Vec<_> = reports.iter().map(CostReport::to_json).collect();
    serde_json::to_writer_pretty(&mut *w, &rows)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writeln!(w)?;
    Ok(())
}

/// Renders cumulative mask overhead per step as a line chart in SVG.
pub fn cumulative_overhead_svg(reports: &[CostReport]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let steps = reports.iter().map(|r| r.cumulative_overhead.len()).max().unwrap_or(0);
    let max = reports
        .iter()
        .flat_map(|r| r.cumulative_overhead.iter().copied())
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let colors = ["#888888", "#d62728", "#ff7f0e", "#1f77b4", "#2ca02c"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{yl}\" text-anchor=\"middle\" font-size=\"12\">denoising step</text>\n\
         <text x=\"12\" y=\"{pad}\" font-size=\"12\">cumulative mask overhead (max {max:.3e} MACs)</text>\n",
        y0 = h - pad,
        x1 = w - pad,
        cx = w / 2.0,
        yl = h - 15.0,
    );
    for (i, r) in reports.iter().enumerate() {
        let pts: Vec<String> = r
            .cumulative_overhead
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let x = pad + (w - 2.0 * pad) * (k + 1) as f64 / steps.max(1) as f64;
                let y = h - pad - (h - 2.0 * pad) * v as f64 / max;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let color = colors[i % colors.len()];
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">({})</text>\n",
            pts.join(" "),
            w - pad - 60.0,
            pad + 16.0 * (i as f64 + 1.0),
            r.variant.code()
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
