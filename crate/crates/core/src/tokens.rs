//! Unified tokenization: image, mask and text inputs become token sequences
//! in one `d`-wide latent space, and spatial tokens carry 2-axis rotary
//! position encoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{rejected, Error, Result};
use crate::linalg::{c, Matrix, Real};

/// Which input a token sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Mask,
    Text,
}

/// A `(row, col)` patch coordinate.
pub type Pos = (i64, i64);

/// Row-major coordinates of a `rows × cols` patch grid.
pub fn grid_positions(rows: usize, cols: usize) -> Vec<Pos> {
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r as i64, c as i64)))
        .collect()
}

/// A modality-tagged sequence of token embeddings with grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    modality: Modality,
    embeddings: Matrix<T>,
    positions: Vec<Pos>,
}

impl<T: Real> TokenSequence<T> {
    pub fn new(modality: Modality, embeddings: Matrix<T>, positions: Vec<Pos>) -> Result<Self> {
        if embeddings.rows() != positions.len() {
            return Err(rejected(format!(
                "{} embedding rows but {} positions",
                embeddings.rows(),
                positions.len()
            )));
        }
        if modality == Modality::Text && positions.iter().any(|&p| p != (0, 0)) {
            return Err(rejected("text tokens must sit at (0,0)"));
        }
        Ok(Self {
            modality,
            embeddings,
            positions,
        })
    }

    /// Text tokens, all at position `(0,0)`.
    pub fn text(embeddings: Matrix<T>) -> Self {
        let n = embeddings.rows();
        Self {
            modality: Modality::Text,
            embeddings,
            positions: vec![(0, 0); n],
        }
    }

    pub fn empty(modality: Modality, d: usize) -> Self {
        Self {
            modality,
            embeddings: Matrix::zeros(0, d),
            positions: Vec::new(),
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn positions(&self) -> &[Pos] {
        &self.positions
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn d(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Same positions and modality, new embeddings.
    pub fn with_embeddings(&self, embeddings: Matrix<T>) -> Result<Self> {
        Self::new(self.modality, embeddings, self.positions.clone())
    }

    pub fn cast<U: Real>(&self) -> TokenSequence<U> {
        TokenSequence {
            modality: self.modality,
            embeddings: self.embeddings.cast(),
            positions: self.positions.clone(),
        }
    }
}

/// Rotary position encoding over two spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    /// Fraction of each head's dims rotated by the row coordinate; the rest
    /// follow the column coordinate.
    pub axis_split: f64,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            base: 10_000.0,
            axis_split: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.axis_split) {
            return Err(Error::Config(format!(
                "rope axis split {} outside [0, 1]",
                self.axis_split
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::Config("rope base must exceed 1".into()));
        }
        Ok(())
    }

    /// Dims rotated by (row, column). The split is rounded to whole
    /// rotation pairs.
    pub fn axis_dims(&self) -> (usize, usize) {
        let pairs = self.head_dim / 2;
        let row = ((pairs as f64 * self.axis_split).round() as usize).min(pairs);
        (2 * row, 2 * (pairs - row))
    }

    /// Angular frequencies for one axis of width `dims`: `base^(-2k/dims)`.
    fn frequencies(&self, dims: usize) -> impl Iterator<Item = f64> + '_ {
        (0..dims / 2).map(move |k| self.base.powf(-2.0 * k as f64 / dims as f64))
    }
}

/// Precomputed `(cos, sin)` per token and rotation pair. Tables built from
/// equal position lists are bitwise equal.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable<T> {
    head_dim: usize,
    /// `[token][pair]`, pairs ordered row-axis first.
    cos: Vec<Vec<T>>,
    sin: Vec<Vec<T>>,
}

impl<T: Real> RopeTable<T> {
    pub fn new(positions: &[Pos], cfg: &RopeConfig) -> Result<Self> {
        cfg.validate()?;
        let (row_dims, col_dims) = cfg.axis_dims();
        let row_freqs: Vec<f64> = cfg.frequencies(row_dims).collect();
        let col_freqs: Vec<f64> = cfg.frequencies(col_dims).collect();
        let mut cos = Vec::with_capacity(positions.len());
        let mut sin = Vec::with_capacity(positions.len());
        for &(r, col) in positions {
            let angles = row_freqs
                .iter()
                .map(|f| r as f64 * f)
                .chain(col_freqs.iter().map(|f| col as f64 * f));
            let (cs, sn): (Vec<T>, Vec<T>) = angles.map(|a| (c::<T>(a.cos()), c::<T>(a.sin()))).unzip();
            cos.push(cs);
            sin.push(sn);
        }
        Ok(Self {
            head_dim: cfg.head_dim,
            cos,
            sin,
        })
    }

    pub fn len(&self) -> usize {
        self.cos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.is_empty()
    }

    /// `(cos, sin)` for a token and pair.
    pub fn get(&self, token: usize, pair: usize) -> (T, T) {
        (self.cos[token][pair], self.sin[token][pair])
    }

    /// Rotates every head of every row. With `inverse`, rotates by the
    /// negated angles.
    pub fn rotate(&self, m: &Matrix<T>, inverse: bool) -> Result<Matrix<T>> {
        if m.rows() != self.len() {
            return Err(rejected(format!(
                "rope table covers {} tokens, matrix has {} rows",
                self.len(),
                m.rows()
            )));
        }
        if m.cols() % self.head_dim != 0 {
            return Err(Error::Config(format!(
                "width {} is not a multiple of head_dim {}",
                m.cols(),
                self.head_dim
            )));
        }
        let mut out = m.clone();
        let pairs = self.head_dim / 2;
        for t in 0..m.rows() {
            let row = out.row_mut(t);
            for head in row.chunks_exact_mut(self.head_dim) {
                for p in 0..pairs {
                    let (cs, mut sn) = self.get(t, p);
                    if inverse {
                        sn = -sn;
                    }
                    let (x0, x1) = (head[2 * p], head[2 * p + 1]);
                    head[2 * p] = x0 * cs - x1 * sn;
                    head[2 * p + 1] = x0 * sn + x1 * cs;
                }
            }
        }
        Ok(out)
    }
}

/// Rotates the rows of `m`, one per position.
pub fn rope_rows<T: Real>(m: &Matrix<T>, positions: &[Pos], cfg: &RopeConfig) -> Result<Matrix<T>> {
    RopeTable::new(positions, cfg)?.rotate(m, false)
}

/// Applies rotary encoding to a token sequence's embeddings.
pub fn apply_rope<T: Real>(seq: &TokenSequence<T>, cfg: &RopeConfig) -> Result<TokenSequence<T>> {
    let rotated = rope_rows(seq.embeddings(), seq.positions(), cfg)?;
    seq.with_embeddings(rotated)
}

/// A grid of integer semantic labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(rejected(format!(
                "{} labels for a {height}x{width} grid",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.labels[r * self.width + c]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Parses comma-separated integer rows.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| rejected(format!("line {}: {e}", lineno + 1)))?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(rejected(format!(
                        "line {}: {} columns, expected {w}",
                        lineno + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            labels.extend(row);
            height += 1;
        }
        Self::new(height, width.unwrap_or(0), labels)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.height {
            let row: Vec<String> = (0..self.width).map(|c| self.get(r, c).to_string()).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Parses a whitespace-separated list of token ids.
pub fn parse_token_ids(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|e| rejected(format!("token id {t:?}: {e}"))))
        .collect()
}

pub fn read_token_ids(path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path)?;
    parse_token_ids(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbedderKind {
    /// Patchify a label grid into one-hot features, then project.
    Visual { patch_size: usize, classes: usize },
    /// Embedding-table lookup.
    Text { vocab: usize, max_len: usize },
}

/// A deterministic stand-in for a pretrained encoder plus its embedder.
#[derive(Clone, Debug, PartialEq)]
pub struct StubEmbedder<T> {
    pub kind: EmbedderKind,
    /// `in_dim × d`.
    pub projection: Matrix<T>,
}

impl<T: Real> StubEmbedder<T> {
    /// Feature width of a visual patch: label 0 is background and encodes
    /// as the zero vector, labels `1..classes` are one-hot.
    pub fn visual_in_dim(patch_size: usize, classes: usize) -> usize {
        patch_size * patch_size * classes.saturating_sub(1)
    }

    pub fn visual(patch_size: usize, classes: usize, projection: Matrix<T>) -> Result<Self> {
        if patch_size == 0 || classes == 0 {
            return Err(Error::Config("patch_size and classes must be positive".into()));
        }
        let in_dim = Self::visual_in_dim(patch_size, classes);
        if projection.rows() != in_dim {
            return Err(rejected(format!(
                "visual projection has {} rows, patch features have {in_dim}",
                projection.rows()
            )));
        }
        Ok(Self {
            kind: EmbedderKind::Visual {
                patch_size,
                classes,
            },
            projection,
        })
    }

    pub fn text(max_len: usize, table: Matrix<T>) -> Self {
        Self {
            kind: EmbedderKind::Text {
                vocab: table.rows(),
                max_len,
            },
            projection: table,
        }
    }

    pub fn d(&self) -> usize {
        self.projection.cols()
    }

    pub fn cast<U: Real>(&self) -> StubEmbedder<U> {
        StubEmbedder {
            kind: self.kind,
            projection: self.projection.cast(),
        }
    }
}

/// Indices of the active one-hot features for each patch, in feature order.
pub(crate) fn patch_feature_indices(
    grid: &LabelGrid,
    patch_size: usize,
    classes: usize,
) -> Result<(usize, usize, Vec<Vec<usize>>)> {
    if grid.height() % patch_size != 0 || grid.width() % patch_size != 0 {
        return Err(rejected(format!(
            "{}x{} grid is not divisible by patch size {patch_size}",
            grid.height(),
            grid.width()
        )));
    }
    let (ph, pw) = (grid.height() / patch_size, grid.width() / patch_size);
    let per_pixel = classes - 1;
    let mut out = Vec::with_capacity(ph * pw);
    for pr in 0..ph {
        for pc in 0..pw {
            let mut active = Vec::new();
            for dy in 0..patch_size {
                for dx in 0..patch_size {
                    let label = grid.get(pr * patch_size + dy, pc * patch_size + dx) as usize;
                    if label >= classes {
                        return Err(rejected(format!(
                            "label {label} outside the {classes}-class alphabet"
                        )));
                    }
                    if label > 0 {
                        active.push((dy * patch_size + dx) * per_pixel + label - 1);
                    }
                }
            }
            out.push(active);
        }
    }
    Ok((ph, pw, out))
}

/// Embeds a label grid as mask tokens on its patch grid.
pub fn embed_mask<T: Real>(mask: &LabelGrid, e: &StubEmbedder<T>) -> Result<TokenSequence<T>> {
    let EmbedderKind::Visual {
        patch_size,
        classes,
    } = e.kind
    else {
        return Err(rejected("embed_mask needs a visual embedder"));
    };
    let (ph, pw, features) = patch_feature_indices(mask, patch_size, classes)?;
    let d = e.d();
    let mut emb = Matrix::zeros(features.len(), d);
    for (t, active) in features.iter().enumerate() {
        let row = emb.row_mut(t);
        for &f in active {
            for (o, &w) in row.iter_mut().zip(e.projection.row(f)) {
                *o = *o + w;
            }
        }
    }
    TokenSequence::new(Modality::Mask, emb, grid_positions(ph, pw))
}

/// Embeds token ids by table lookup; every token sits at `(0,0)`.
pub fn embed_text<T: Real>(ids: &[u32], e: &StubEmbedder<T>) -> Result<TokenSequence<T>> {
    let EmbedderKind::Text { vocab, max_len } = e.kind else {
        return Err(rejected("embed_text needs a text embedder"));
    };
    if ids.len() > max_len {
        return Err(rejected(format!(
            "{} text tokens exceed the maximum of {max_len}",
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(rejected(format!("token id {bad} outside vocab of {vocab}")));
    }
    let d = e.d();
    let mut emb = Matrix::zeros(ids.len(), d);
    for (t, &id) in ids.iter().enumerate() {
        emb.row_mut(t).copy_from_slice(e.projection.row(id as usize));
    }
    Ok(TokenSequence::text(emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_grid_identity_projection() {
        let e = StubEmbedder::visual(1, 5, Matrix::<f64>::identity(4)).unwrap();
        let seq = embed_mask(&LabelGrid::filled(2, 2, 0), &e).unwrap();
        assert_eq!(seq.count(), 4);
        assert!(seq.embeddings().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(seq.positions(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(seq.modality(), Modality::Mask);
    }

    #[test]
    fn patch_count_arithmetic() {
        let e = StubEmbedder::visual(2, 3, Matrix::<f64>::zeros(8, 6)).unwrap();
        let seq = embed_mask(&LabelGrid::filled(4, 4, 1), &e).unwrap();
        assert_eq!(seq.count(), 4);
        assert_eq!(seq.d(), 6);
    }

    #[test]
    fn mask_embedding_matches_patchify_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w, p, classes, d) = (6, 4, 2, 4, 5);
        let labels: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..classes as u32)).collect();
        let grid = LabelGrid::new(h, w, labels).unwrap();
        let in_dim = StubEmbedder::<f64>::visual_in_dim(p, classes);
        let proj = random_matrix(&mut rng, in_dim, d);
        let e = StubEmbedder::visual(p, classes, proj.clone()).unwrap();
        let seq = embed_mask(&grid, &e).unwrap();

        // Oracle: explicit dense one-hot patch feature matrix, then matmul.
        let per_pixel = classes - 1;
        let mut feats = Matrix::<f64>::zeros((h / p) * (w / p), in_dim);
        for pr in 0..h / p {
            for pc in 0..w / p {
                for dy in 0..p {
                    for dx in 0..p {
                        let l = grid.get(pr * p + dy, pc * p + dx) as usize;
                        if l > 0 {
                            feats[(pr * (w / p) + pc, (dy * p + dx) * per_pixel + l - 1)] = 1.0;
                        }
                    }
                }
            }
        }
        let oracle = feats.matmul(&proj);
        assert!(seq.embeddings().max_abs_diff(&oracle) < 1e-12);
        assert_eq!(seq.positions(), grid_positions(3, 2).as_slice());
    }

    #[test]
    fn mask_rejects_bad_inputs() {
        let e = StubEmbedder::visual(2, 3, Matrix::<f64>::zeros(8, 4)).unwrap();
        assert!(matches!(
            embed_mask(&LabelGrid::filled(3, 4, 0), &e),
            Err(Error::Rejected(_))
        ));
        assert!(matches!(
            embed_mask(&LabelGrid::filled(4, 4, 3), &e),
            Err(Error::Rejected(_))
        ));
        let t = StubEmbedder::text(4, Matrix::<f64>::identity(4));
        assert!(embed_mask(&LabelGrid::filled(2, 2, 0), &t).is_err());
        assert!(StubEmbedder::visual(2, 3, Matrix::<f64>::zeros(7, 4)).is_err());
    }

    #[test]
    fn text_lookup() {
        let e = StubEmbedder::text(8, Matrix::<f64>::identity(5));
        let empty = embed_text(&[], &e).unwrap();
        assert_eq!(empty.count(), 0);
        let seq = embed_text(&[0, 1, 2], &e).unwrap();
        for (t, id) in [0, 1, 2].iter().enumerate() {
            assert_eq!(seq.embeddings().row(t), e.projection.row(*id));
        }
        assert!(seq.positions().iter().all(|&p| p == (0, 0)));
        assert!(matches!(embed_text(&[5], &e), Err(Error::Rejected(_))));
        assert!(matches!(embed_text(&[0; 9], &e), Err(Error::Rejected(_))));
    }

    #[test]
    fn text_sequence_rejects_nonzero_positions() {
        let m = Matrix::<f64>::zeros(1, 2);
        assert!(TokenSequence::new(Modality::Text, m.clone(), vec![(0, 1)]).is_err());
        assert!(TokenSequence::new(Modality::Mask, m, vec![]).is_err());
    }

    #[test]
    fn rope_origin_is_identity() {
        let cfg = RopeConfig::new(4);
        let m = Matrix::<f64>::from_rows(&[&[0.3, -1.2, 2.0, 0.7]]);
        let r = rope_rows(&m, &[(0, 0)], &cfg).unwrap();
        assert!(r.bitwise_eq(&m));
    }

    #[test]
    fn rope_quarter_turn() {
        // The first pair of each axis has frequency 1, so position (1,0)
        // turns it by exactly one radian.
        let table = RopeTable::<f64>::new(&[(1, 0)], &RopeConfig::new(4)).unwrap();
        assert_eq!(table.get(0, 0), (1f64.cos(), 1f64.sin()));

        let theta = std::f64::consts::FRAC_PI_2;
        let quarter = RopeTable {
            head_dim: 2,
            cos: vec![vec![theta.cos()]],
            sin: vec![vec![theta.sin()]],
        };
        let r = quarter
            .rotate(&Matrix::from_rows(&[&[1.0, 0.0]]), false)
            .unwrap();
        assert!(r[(0, 0)].abs() < 1e-12);
        assert!((r[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let cfg = RopeConfig::new(3);
        let m = Matrix::<f64>::zeros(1, 3);
        assert!(matches!(rope_rows(&m, &[(0, 0)], &cfg), Err(Error::Config(_))));
        let cfg = RopeConfig {
            axis_split: 1.5,
            ..RopeConfig::new(4)
        };
        assert!(cfg.validate().is_err());
        assert_eq!(RopeConfig::new(2).axis_dims(), (2, 0));
        assert_eq!(RopeConfig::new(16).axis_dims(), (8, 8));
        let quarter = RopeConfig {
            axis_split: 0.25,
            ..RopeConfig::new(16)
        };
        assert_eq!(quarter.axis_dims(), (4, 12));
    }

    #[test]
    fn rope_tables_align_for_equal_grids() {
        let cfg = RopeConfig::new(8);
        let img = RopeTable::<f32>::new(&grid_positions(4, 4), &cfg).unwrap();
        let mask = RopeTable::<f32>::new(&grid_positions(4, 4), &cfg).unwrap();
        assert_eq!(img, mask);
        for t in 0..img.len() {
            for p in 0..4 {
                let (a, b) = (img.get(t, p), mask.get(t, p));
                assert_eq!(a.0.to_bits(), b.0.to_bits());
                assert_eq!(a.1.to_bits(), b.1.to_bits());
            }
        }
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = RopeConfig::new(8);
        let m = random_matrix(&mut rng, 6, 16);
        let table = RopeTable::new(&grid_positions(2, 3), &cfg).unwrap();
        let back = table.rotate(&table.rotate(&m, false).unwrap(), true).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn embedders_are_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = StubEmbedder::visual(1, 4, random_matrix(&mut rng, 3, 8)).unwrap();
        let grid = LabelGrid::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let a = embed_mask(&grid, &e).unwrap();
        let b = embed_mask(&grid, &e).unwrap();
        assert!(a.embeddings().bitwise_eq(b.embeddings()));
    }

    #[test]
    fn csv_and_id_parsing() {
        let g = LabelGrid::parse_csv("0,1,2\n3, 4 ,5\n").unwrap();
        assert_eq!((g.height(), g.width()), (2, 3));
        assert_eq!(g.get(1, 1), 4);
        assert_eq!(LabelGrid::parse_csv(&g.to_csv()).unwrap(), g);
        assert!(LabelGrid::parse_csv("0,1\n2\n").is_err());
        assert!(LabelGrid::parse_csv("0,x\n").is_err());
        assert_eq!(parse_token_ids(" 3 1\n4\t1 ").unwrap(), vec![3, 1, 4, 1]);
        assert!(parse_token_ids("3 -1").is_err());
    }

    proptest! {
        #[test]
        fn rope_preserves_norms(
            vals in proptest::collection::vec(-10.0f64..10.0, 16),
            r in -50i64..50, col in -50i64..50,
        ) {
            let cfg = RopeConfig::new(8);
            let m = Matrix::from_vec(1, 16, vals);
            let out = rope_rows(&m, &[(r, col)], &cfg).unwrap();
            let n0: f64 = m.as_slice().iter().map(|v| v * v).sum();
            let n1: f64 = out.as_slice().iter().map(|v| v * v).sum();
            prop_assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-9);
        }

        #[test]
        fn rope_dot_depends_on_offset_only(
            q in proptest::collection::vec(-1.0f64..1.0, 8),
            k in proptest::collection::vec(-1.0f64..1.0, 8),
            pi in (-20i64..20, -20i64..20),
            pj in (-20i64..20, -20i64..20),
            shift in (-30i64..30, -30i64..30),
        ) {
            let cfg = RopeConfig::new(8);
            let (q, k) = (Matrix::from_vec(1, 8, q), Matrix::from_vec(1, 8, k));
            let dot_at = |a: Pos, b: Pos| {
                let rq = rope_rows(&q, &[a], &cfg).unwrap();
                let rk = rope_rows(&k, &[b], &cfg).unwrap();
                crate::linalg::dot(rq.row(0), rk.row(0))
            };
            let base = dot_at(pi, pj);
            let shifted = dot_at((pi.0 + shift.0, pi.1 + shift.1), (pj.0 + shift.0, pj.1 + shift.1));
            prop_assert!((base - shifted).abs() < 1e-9);
        }
    }
}
