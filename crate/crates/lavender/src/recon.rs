//! From flat attention rows to spatially coherent maps.
//!
//! Patch tokens arrive in a flat order that may interleave tiles; turning a
//! per-word attention row into an image-shaped map means undoing that order,
//! placing tiles so spatial neighbors stay adjacent, and resizing to the
//! standard 32x32 raster. A naive row-major reshape of a tiled row scrambles
//! the picture — `tests` below carry the inequality witness.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::teacher::{SaliencyMap, MAP_SIDE};
use crate::tensor::{Graph, Tensor, Var};

/// Tiles of patches: `tiles` counts tiles per axis, `patch` counts patches
/// per tile axis. Token order is tile-major, row-major within each tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLayout {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
}

impl TileLayout {
    pub fn n_patches(&self) -> usize {
        self.tile_rows * self.tile_cols * self.patch_rows * self.patch_cols
    }

    /// Assembled map dimensions.
    pub fn dims(&self) -> (usize, usize) {
        (self.tile_rows * self.patch_rows, self.tile_cols * self.patch_cols)
    }

    /// Spatial (row, col) of the k-th token.
    pub fn position_of(&self, k: usize) -> (usize, usize) {
        let per_tile = self.patch_rows * self.patch_cols;
        let tile = k / per_tile;
        let within = k % per_tile;
        let (tr, tc) = (tile / self.tile_cols, tile % self.tile_cols);
        let (pr, pc) = (within / self.patch_cols, within % self.patch_cols);
        (tr * self.patch_rows + pr, tc * self.patch_cols + pc)
    }

    /// Token index at spatial (row, col); inverse of [`position_of`].
    pub fn token_at(&self, r: usize, c: usize) -> usize {
        let (tr, pr) = (r / self.patch_rows, r % self.patch_rows);
        let (tc, pc) = (c / self.patch_cols, c % self.patch_cols);
        let tile = tr * self.tile_cols + tc;
        tile * self.patch_rows * self.patch_cols + pr * self.patch_cols + pc
    }
}

/// How a flat patch row maps onto 2-D space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Plain row-major grid.
    Simple { rows: usize, cols: usize },
    Tiled(TileLayout),
}

impl Layout {
    pub fn n_patches(&self) -> usize {
        match self {
            Layout::Simple { rows, cols } => rows * cols,
            Layout::Tiled(t) => t.n_patches(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            Layout::Simple { rows, cols } => (*rows, *cols),
            Layout::Tiled(t) => t.dims(),
        }
    }

    /// Token index for each spatial position, row-major over the output map.
    fn gather_order(&self) -> Vec<usize> {
        let (h, w) = self.dims();
        match self {
            Layout::Simple { .. } => (0..h * w).collect(),
            Layout::Tiled(t) => {
                let mut order = Vec::with_capacity(h * w);
                for r in 0..h {
                    for c in 0..w {
                        order.push(t.token_at(r, c));
                    }
                }
                order
            }
        }
    }
}

/// Rearrange a flat per-word attention row into its 2-D map.
pub fn row_to_grid(row: &[f64], layout: &Layout) -> Result<Tensor> {
    if row.len() != layout.n_patches() {
        return Err(Error::Invalid {
            op: "row_to_grid",
            detail: format!("row has {} entries, layout expects {}", row.len(), layout.n_patches()),
        });
    }
    let (h, w) = layout.dims();
    let data: Vec<f64> = layout.gather_order().into_iter().map(|k| row[k]).collect();
    Tensor::from_vec(vec![h, w], data)
}

/// Graph version of [`row_to_grid`]; input is a [1, n_patch] node.
pub fn row_to_grid_var(g: &mut Graph, row: Var, layout: &Layout) -> Result<Var> {
    let shape = g.value(row).shape().to_vec();
    if shape.len() != 2 || shape[0] != 1 || shape[1] != layout.n_patches() {
        return Err(Error::Invalid {
            op: "row_to_grid",
            detail: format!("row shape {:?}, layout expects [1, {}]", shape, layout.n_patches()),
        });
    }
    let (h, w) = layout.dims();
    match layout {
        Layout::Simple { .. } => g.reshape(row, vec![h, w]),
        Layout::Tiled(_) => {
            let col = g.reshape(row, vec![layout.n_patches(), 1])?;
            let ordered = g.gather_rows(col, &layout.gather_order())?;
            g.reshape(ordered, vec![h, w])
        }
    }
}

/// Recover the flat token-order row from an assembled map (inverse of
/// [`row_to_grid`]).
pub fn grid_to_row(map: &Tensor, layout: &Layout) -> Result<Vec<f64>> {
    let (h, w) = layout.dims();
    if map.shape() != [h, w] {
        return Err(Error::Invalid {
            op: "grid_to_row",
            detail: format!("map shape {:?}, layout dims ({h}, {w})", map.shape()),
        });
    }
    let mut row = vec![0.0; layout.n_patches()];
    for r in 0..h {
        for c in 0..w {
            let k = match layout {
                Layout::Simple { .. } => r * w + c,
                Layout::Tiled(t) => t.token_at(r, c),
            };
            row[k] = map.at2(r, c);
        }
    }
    Ok(row)
}

/// Pad a row of arbitrary length with zeros up to the next perfect square
/// and reshape row-major. The fallback when no layout metadata exists.
pub fn row_to_grid_padded(row: &[f64]) -> Tensor {
    let mut side = (row.len() as f64).sqrt().ceil() as usize;
    if side == 0 {
        side = 1;
    }
    let mut data = row.to_vec();
    data.resize(side * side, 0.0);
    Tensor::from_vec(vec![side, side], data).unwrap()
}

/// Bilinear-resize a 2-D map to the 32x32 standard and renormalize it to
/// unit mass. Differentiable in the input values.
pub fn resize_to_standard_var(g: &mut Graph, map: Var) -> Result<Var> {
    if !g.value(map).is_finite() {
        return Err(Error::NonFinite { op: "resize_to_standard", node: map.index() });
    }
    let resized = g.bilinear_resize(map, MAP_SIDE, MAP_SIDE)?;
    let flat = g.reshape(resized, vec![1, MAP_SIDE * MAP_SIDE])?;
    let normed = g.normalize_rows(flat)?;
    g.reshape(normed, vec![MAP_SIDE, MAP_SIDE])
}

/// Value-level companion of [`resize_to_standard_var`].
pub fn resize_to_standard(map: &Tensor, word: &str) -> Result<SaliencyMap> {
    let mut g = Graph::new();
    let v = g.input(map);
    let out = resize_to_standard_var(&mut g, v)?;
    SaliencyMap::from_f64(word, g.value(out).data())
}

/// Which positions of an interleaved sequence are text and which are patches.
#[derive(Debug, Clone)]
pub struct TokenIndexMap {
    pub text: Vec<usize>,
    pub patch: Vec<usize>,
}

impl TokenIndexMap {
    /// Contiguous [patches ∥ text] ordering.
    pub fn patches_then_text(n_patch: usize, n_text: usize) -> Self {
        TokenIndexMap {
            text: (n_patch..n_patch + n_text).collect(),
            patch: (0..n_patch).collect(),
        }
    }

    pub fn validate(&self, seq_len: usize) -> Result<()> {
        for &i in self.text.iter().chain(&self.patch) {
            if i >= seq_len {
                return Err(Error::BadIndexMap(format!("index {i} outside sequence of {seq_len}")));
            }
        }
        let overlap = self.text.iter().any(|t| self.patch.contains(t));
        if overlap {
            return Err(Error::BadIndexMap("text and patch index sets overlap".into()));
        }
        Ok(())
    }
}

/// Pull the text-to-patch block out of a full self-attention matrix and
/// renormalize each row over patches (sub-rows of a causal softmax do not
/// sum to 1 on their own). With `mask_aware`, entries a causal mask forbids
/// (patch position after the text position) are zeroed first.
pub fn extract_text_to_patch(
    g: &mut Graph,
    weights: Var,
    idx: &TokenIndexMap,
    mask_aware: bool,
) -> Result<Var> {
    let shape = g.value(weights).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Invalid {
            op: "extract_text_to_patch",
            detail: format!("expected square matrix, got {:?}", shape),
        });
    }
    idx.validate(shape[0])?;
    let rows = g.gather_rows(weights, &idx.text)?;
    let sub = g.gather_cols(rows, &idx.patch)?;
    let sub = if mask_aware {
        let mut keep = Tensor::zeros(vec![idx.text.len(), idx.patch.len()]);
        for (r, &ti) in idx.text.iter().enumerate() {
            for (c, &pi) in idx.patch.iter().enumerate() {
                if pi <= ti {
                    keep.data_mut()[r * idx.patch.len() + c] = 1.0;
                }
            }
        }
        let keep = g.input(&keep);
        g.mul(sub, keep)?
    } else {
        sub
    };
    g.normalize_rows(sub)
}

/// Raw (un-renormalized) text-to-patch sub-rows; the per-layer input the
/// flow fold operates on when mass differences across rows matter.
pub fn extract_text_to_patch_raw(g: &mut Graph, weights: Var, idx: &TokenIndexMap) -> Result<Var> {
    let shape = g.value(weights).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Invalid {
            op: "extract_text_to_patch_raw",
            detail: format!("expected square matrix, got {:?}", shape),
        });
    }
    idx.validate(shape[0])?;
    let rows = g.gather_rows(weights, &idx.text)?;
    g.gather_cols(rows, &idx.patch)
}

// ── Map export ───────────────────────────────────────────────────────

/// Write a map as an 8-bit max-scaled binary PGM (P5).
pub fn write_pgm(map: &Tensor, path: &Path) -> Result<()> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::Invalid { op: "write_pgm", detail: format!("expected rank 2, got {:?}", shape) });
    }
    let (h, w) = (shape[0], shape[1]);
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for v in map.data() {
        out.push((v * scale).round().clamp(0.0, 255.0) as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Write a map as a comma-separated raster.
pub fn write_csv_raster(map: &Tensor, path: &Path) -> Result<()> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::Invalid { op: "write_csv_raster", detail: format!("expected rank 2, got {:?}", shape) });
    }
    let (h, w) = (shape[0], shape[1]);
    let mut s = String::new();
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| format!("{}", map.at2(r, c))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tensor::mask_blocked;
    use rand::Rng;

    #[test]
    fn simple_grid_reshape() {
        let layout = Layout::Simple { rows: 2, cols: 2 };
        let m = row_to_grid(&[1.0, 2.0, 3.0, 4.0], &layout).unwrap();
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.shape(), &[2, 2]);
    }

    #[test]
    fn tiled_assembly_places_tiles_spatially() {
        // 2x1 tiles of 2x2 patches: row [t0: a,b,c,d | t1: e,f,g,h]
        // assembles to [[a,b],[c,d],[e,f],[g,h]].
        let layout = Layout::Tiled(TileLayout { tile_rows: 2, tile_cols: 1, patch_rows: 2, patch_cols: 2 });
        let row: Vec<f64> = (1..=8).map(|v| v as f64).collect();
        let m = row_to_grid(&row, &layout).unwrap();
        assert_eq!(m.shape(), &[4, 2]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);

        // The naive reshape of the same row differs for a 2x2-of-2x2 layout.
        let layout2 = Layout::Tiled(TileLayout { tile_rows: 1, tile_cols: 2, patch_rows: 2, patch_cols: 2 });
        let assembled = row_to_grid(&row, &layout2).unwrap();
        let naive = row_to_grid(&row, &Layout::Simple { rows: 2, cols: 4 }).unwrap();
        assert_eq!(assembled.shape(), naive.shape());
        assert_ne!(assembled.data(), naive.data(), "naive reshape must differ from tile assembly");
    }

    #[test]
    fn tiled_roundtrip_is_exact_on_random_layouts() {
        let mut rng = stream(1, Stream::Other(20));
        for _ in 0..50 {
            let layout = TileLayout {
                tile_rows: rng.random_range(1..4),
                tile_cols: rng.random_range(1..4),
                patch_rows: rng.random_range(1..5),
                patch_cols: rng.random_range(1..5),
            };
            let n = layout.n_patches();
            let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let l = Layout::Tiled(layout);
            let m = row_to_grid(&row, &l).unwrap();
            let back = grid_to_row(&m, &l).unwrap();
            assert_eq!(back, row);
        }
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let layout = Layout::Simple { rows: 2, cols: 2 };
        assert!(row_to_grid(&[1.0, 2.0, 3.0], &layout).is_err());
    }

    #[test]
    fn resize_constant_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::filled(vec![4, 4], 3.0));
        let out = resize_to_standard_var(&mut g, x).unwrap();
        for v in g.value(out).data() {
            assert!((v - 1.0 / 1024.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_of_standard_size_is_identity_up_to_norm() {
        let mut rng = stream(2, Stream::Other(21));
        let mut t = Tensor::rand_uniform(vec![32, 32], 0.0, 1.0, &mut rng);
        let sum = t.sum();
        for v in t.data_mut() {
            *v /= sum;
        }
        let mut g = Graph::new();
        let x = g.input(&t);
        let out = resize_to_standard_var(&mut g, x).unwrap();
        for (a, b) in g.value(out).data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn corner_mass_stays_in_quadrant() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let out = resize_to_standard_var(&mut g, x).unwrap();
        let m = g.value(out);
        let mut q = 0.0;
        for r in 0..16 {
            for c in 0..16 {
                q += m.at2(r, c);
            }
        }
        assert!(q > 0.5, "top-left quadrant mass {q}");
    }

    #[test]
    fn resize_preserves_mass_within_two_percent() {
        let mut rng = stream(3, Stream::Other(22));
        for _ in 0..20 {
            let h = rng.random_range(4..9);
            let w = rng.random_range(4..9);
            let t = Tensor::rand_uniform(vec![h, w], 0.1, 1.0, &mut rng);
            let mass_in: f64 = t.sum();
            let mut g = Graph::new();
            let x = g.input(&t);
            let resized = g.bilinear_resize(x, 32, 32).unwrap();
            // Compare mean density rather than raw sums (cell counts differ).
            let mean_in = mass_in / (h * w) as f64;
            let mean_out = g.value(resized).sum() / 1024.0;
            assert!(
                (mean_out - mean_in).abs() / mean_in < 0.02,
                "density drift {mean_in} -> {mean_out}"
            );
        }
    }

    #[test]
    fn extraction_matches_brute_force() {
        // Random 6x6 causal matrix, 2 text / 4 patch tokens.
        let mut rng = stream(4, Stream::Other(23));
        let mut g = Graph::new();
        let logits = Tensor::randn(vec![6, 6], 1.0, &mut rng);
        let x = g.input(&logits);
        let mut mask = Tensor::zeros(vec![6, 6]);
        for i in 0..6 {
            for j in (i + 1)..6 {
                mask.data_mut()[i * 6 + j] = mask_blocked();
            }
        }
        let w = g.softmax(x, Some(&mask)).unwrap();
        let idx = TokenIndexMap::patches_then_text(4, 2);
        let got = extract_text_to_patch(&mut g, w, &idx, true).unwrap();

        let wv = g.value(w).clone();
        for (r, &ti) in idx.text.iter().enumerate() {
            let mut row: Vec<f64> = idx.patch.iter().map(|&pi| wv.at2(ti, pi)).collect();
            let s: f64 = row.iter().sum();
            assert!(s < 1.0, "sub-row of causal softmax should sum below 1");
            for v in row.iter_mut() {
                *v /= s;
            }
            for (c, expect) in row.iter().enumerate() {
                let actual = g.value(got).at2(r, c);
                assert!((actual - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_single_text_token() {
        // 1 text token attending uniformly over 4 patches + itself.
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![5, 5]));
        let mut mask = Tensor::zeros(vec![5, 5]);
        for i in 0..5 {
            for j in (i + 1)..5 {
                mask.data_mut()[i * 5 + j] = mask_blocked();
            }
        }
        let w = g.softmax(x, Some(&mask)).unwrap();
        let idx = TokenIndexMap::patches_then_text(4, 1);
        let got = extract_text_to_patch(&mut g, w, &idx, true).unwrap();
        for c in 0..4 {
            assert!((g.value(got).at2(0, c) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn overlapping_index_sets_rejected() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![4, 4]));
        let w = g.softmax(x, None).unwrap();
        let idx = TokenIndexMap { text: vec![1, 2], patch: vec![2, 3] };
        assert!(extract_text_to_patch(&mut g, w, &idx, false).is_err());
    }

    #[test]
    fn padded_reshape_handles_non_square() {
        let m = row_to_grid_padded(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m.shape(), &[3, 3]);
        assert_eq!(&m.data()[..5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(&m.data()[5..], &[0.0; 4]);
    }

    #[test]
    fn pgm_export_writes_header_and_payload() {
        let dir = std::env::temp_dir().join("recon_pgm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.pgm");
        let m = Tensor::from_vec(vec![2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        write_pgm(&m, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
    }
}
