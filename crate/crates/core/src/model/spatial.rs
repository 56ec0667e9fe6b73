//! Spatial aggregation over the tile grid: a residual block of parallel
//! 3×3 / 5×5 / 7×7 convolutions followed by one pre-norm self-attention
//! encoder layer.
//!
//! The three kernels are averaged, which is the same as one 7×7 kernel built
//! from the zero-padded 3×3 and 5×5 kernels plus the 7×7 kernel, divided by
//! three. The forward pass uses that folded kernel with an im2col product
//! over occupied cells only, and the backward pass splits its gradient back
//! onto the three kernels.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::corpus::SlideRecord;
use crate::error::{config, invalid, Result};
use crate::nn;
use crate::optim::Parameters;

pub const KERNEL_SIZES: [usize; 3] = [3, 5, 7];
const FOLDED: usize = 7;

/// Raster-order placement of a slide's tiles on its grid.
#[derive(Clone, Debug)]
pub struct GridLayout {
    pub height: usize,
    pub width: usize,
    /// `order[p]` is the tile index at raster position `p`.
    pub order: Vec<usize>,
    /// Raster position of the tile in each grid cell, if any.
    cells: Vec<Option<usize>>,
}

impl GridLayout {
    pub fn new(slide: &SlideRecord) -> Result<Self> {
        let (height, width) = (slide.grid_h as usize, slide.grid_w as usize);
        let order = slide.raster_order();
        let mut cells = vec![None; height * width];
        for (pos, &ti) in order.iter().enumerate() {
            let t = &slide.tiles[ti];
            let (r, c) = (t.row as usize, t.col as usize);
            if r >= height || c >= width {
                return invalid(format!("slide `{}`: tile ({r}, {c}) outside the grid", slide.slide_id));
            }
            if cells[r * width + c].replace(pos).is_some() {
                return invalid(format!("slide `{}`: duplicate tile at ({r}, {c})", slide.slide_id));
            }
        }
        Ok(Self { height, width, order, cells })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn position_of(&self, r: isize, c: isize) -> Option<usize> {
        if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
            return None;
        }
        self.cells[r as usize * self.width + c as usize]
    }

    /// `M × (7·7·d)` neighbourhood matrix of raster-ordered features `x`;
    /// empty and out-of-grid cells contribute zeros.
    fn im2col(&self, x: &Array2<f64>, tiles: &SlideRecord) -> Array2<f64> {
        let d = x.ncols();
        let half = (FOLDED / 2) as isize;
        let mut patches = Array2::zeros((self.len(), FOLDED * FOLDED * d));
        for (pos, mut row) in patches.rows_mut().into_iter().enumerate() {
            let t = &tiles.tiles[self.order[pos]];
            let (r, c) = (t.row as isize, t.col as isize);
            for ky in 0..FOLDED {
                for kx in 0..FOLDED {
                    if let Some(q) = self.position_of(r + ky as isize - half, c + kx as isize - half) {
                        let off = (ky * FOLDED + kx) * d;
                        row.slice_mut(s![off..off + d]).assign(&x.row(q));
                    }
                }
            }
        }
        patches
    }
}

/// Trainable tensors of the spatial module. Convolution kernels are stored
/// im2col-style: row `(ky·k + kx)·d + c_in`, column `c_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialParams {
    pub heads: usize,
    pub conv3: Array2<f64>,
    pub conv5: Array2<f64>,
    pub conv7: Array2<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl SpatialParams {
    /// Residual-identity initialisation: convolutions, the attention output
    /// projection and the second feed-forward layer start at zero.
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return config(format!("attention heads ({heads}) must divide the feature width ({dim})"));
        }
        let hidden = 2 * dim;
        Ok(Self {
            heads,
            conv3: Array2::zeros((9 * dim, dim)),
            conv5: Array2::zeros((25 * dim, dim)),
            conv7: Array2::zeros((49 * dim, dim)),
            ln1_gamma: Array1::ones(dim),
            ln1_beta: Array1::zeros(dim),
            wq: nn::xavier(rng, dim, dim),
            bq: Array1::zeros(dim),
            wk: nn::xavier(rng, dim, dim),
            bk: Array1::zeros(dim),
            wv: nn::xavier(rng, dim, dim),
            bv: Array1::zeros(dim),
            wo: Array2::zeros((dim, dim)),
            bo: Array1::zeros(dim),
            ln2_gamma: Array1::ones(dim),
            ln2_beta: Array1::zeros(dim),
            w1: nn::xavier(rng, dim, hidden),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, dim)),
            b2: Array1::zeros(dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, p| p.fill(0.0));
        z
    }

    fn kernel(&self, size: usize) -> &Array2<f64> {
        match size {
            3 => &self.conv3,
            5 => &self.conv5,
            _ => &self.conv7,
        }
    }

    fn folded_kernel(&self) -> Array2<f64> {
        let d = self.dim();
        let mut k = Array2::zeros((FOLDED * FOLDED * d, d));
        for size in KERNEL_SIZES {
            let src = self.kernel(size);
            let off = (FOLDED - size) / 2;
            for ky in 0..size {
                for kx in 0..size {
                    let from = (ky * size + kx) * d;
                    let to = ((ky + off) * FOLDED + kx + off) * d;
                    k.slice_mut(s![to..to + d, ..]).scaled_add(1.0 / 3.0, &src.slice(s![from..from + d, ..]));
                }
            }
        }
        k
    }

    /// Contextualised features, one row per tile in tile order.
    pub fn forward(&self, slide: &SlideRecord, features: &Array2<f64>) -> Result<(Array2<f64>, SpatialCache)> {
        let d = self.dim();
        if features.ncols() != d {
            return invalid(format!("slide `{}`: feature width {} != model width {d}", slide.slide_id, features.ncols()));
        }
        let layout = GridLayout::new(slide)?;
        let x = features.select(Axis(0), &layout.order);
        let patches = layout.im2col(&x, slide);
        let u = &x + &patches.dot(&self.folded_kernel());

        let (h1, ln1) = nn::layer_norm(&u, &self.ln1_gamma, &self.ln1_beta);
        let q = nn::affine(&h1, &self.wq, &self.bq);
        let k = nn::affine(&h1, &self.wk, &self.bk);
        let v = nn::affine(&h1, &self.wv, &self.bv);
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Array2::zeros(u.raw_dim());
        let mut attn = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            nn::softmax_rows_inplace(&mut a);
            ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let y = &u + &nn::affine(&ctx, &self.wo, &self.bo);

        let (h2, ln2) = nn::layer_norm(&y, &self.ln2_gamma, &self.ln2_beta);
        let pre = nn::affine(&h2, &self.w1, &self.b1);
        let act = pre.mapv(nn::gelu);
        let z = &y + &nn::affine(&act, &self.w2, &self.b2);

        let mut out = Array2::zeros(z.raw_dim());
        for (pos, &ti) in layout.order.iter().enumerate() {
            out.row_mut(ti).assign(&z.row(pos));
        }
        let cache = SpatialCache { order: layout.order, patches, ln1, h1, q, k, v, attn, ctx, ln2, h2, pre, act };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients into `grads` given the gradient of the
    /// output (tile order). The raw features are frozen, so no input gradient
    /// is produced.
    pub fn backward(&self, cache: &SpatialCache, d_out: &Array2<f64>, grads: &mut SpatialParams) {
        let d = self.dim();
        let dz = d_out.select(Axis(0), &cache.order);

        let mut dy = dz.clone();
        let d_act = nn::affine_backward(&cache.act, &self.w2, &dz, &mut grads.w2, &mut grads.b2);
        let d_pre = d_act * &cache.pre.mapv(nn::gelu_grad);
        let d_h2 = nn::affine_backward(&cache.h2, &self.w1, &d_pre, &mut grads.w1, &mut grads.b1);
        let (d_y2, dg2, db2) = nn::layer_norm_backward(&cache.ln2, &self.ln2_gamma, &d_h2);
        grads.ln2_gamma += &dg2;
        grads.ln2_beta += &db2;
        dy += &d_y2;

        let mut du = dy.clone();
        let d_ctx = nn::affine_backward(&cache.ctx, &self.wo, &dy, &mut grads.wo, &mut grads.bo);
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (head, a) in cache.attn.iter().enumerate() {
            let cols = s![.., head * dh..(head + 1) * dh];
            let dc = d_ctx.slice(cols);
            let da = dc.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dc));
            let ds = nn::softmax_rows_backward(a, &da) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let mut d_h1 = nn::affine_backward(&cache.h1, &self.wq, &dq, &mut grads.wq, &mut grads.bq);
        d_h1 += &nn::affine_backward(&cache.h1, &self.wk, &dk, &mut grads.wk, &mut grads.bk);
        d_h1 += &nn::affine_backward(&cache.h1, &self.wv, &dv, &mut grads.wv, &mut grads.bv);
        let (d_u1, dg1, db1) = nn::layer_norm_backward(&cache.ln1, &self.ln1_gamma, &d_h1);
        grads.ln1_gamma += &dg1;
        grads.ln1_beta += &db1;
        du += &d_u1;

        let d_folded = cache.patches.t().dot(&du);
        for size in KERNEL_SIZES {
            let off = (FOLDED - size) / 2;
            let dst = match size {
                3 => &mut grads.conv3,
                5 => &mut grads.conv5,
                _ => &mut grads.conv7,
            };
            for ky in 0..size {
                for kx in 0..size {
                    let to = (ky * size + kx) * d;
                    let from = ((ky + off) * FOLDED + kx + off) * d;
                    dst.slice_mut(s![to..to + d, ..]).scaled_add(1.0 / 3.0, &d_folded.slice(s![from..from + d, ..]));
                }
            }
        }
    }
}

/// Activations of one spatial forward pass, in raster order.
#[derive(Clone, Debug)]
pub struct SpatialCache {
    order: Vec<usize>,
    patches: Array2<f64>,
    ln1: nn::LayerNormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: nn::LayerNormCache,
    h2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

macro_rules! spatial_tensors {
    ($self:ident, $f:ident, $as:ident) => {{
        $f("spatial.conv3", $self.conv3.$as().unwrap());
        $f("spatial.conv5", $self.conv5.$as().unwrap());
        $f("spatial.conv7", $self.conv7.$as().unwrap());
        $f("spatial.ln1_gamma", $self.ln1_gamma.$as().unwrap());
        $f("spatial.ln1_beta", $self.ln1_beta.$as().unwrap());
        $f("spatial.wq", $self.wq.$as().unwrap());
        $f("spatial.bq", $self.bq.$as().unwrap());
        $f("spatial.wk", $self.wk.$as().unwrap());
        $f("spatial.bk", $self.bk.$as().unwrap());
        $f("spatial.wv", $self.wv.$as().unwrap());
        $f("spatial.bv", $self.bv.$as().unwrap());
        $f("spatial.wo", $self.wo.$as().unwrap());
        $f("spatial.bo", $self.bo.$as().unwrap());
        $f("spatial.ln2_gamma", $self.ln2_gamma.$as().unwrap());
        $f("spatial.ln2_beta", $self.ln2_beta.$as().unwrap());
        $f("spatial.w1", $self.w1.$as().unwrap());
        $f("spatial.b1", $self.b1.$as().unwrap());
        $f("spatial.w2", $self.w2.$as().unwrap());
        $f("spatial.b2", $self.b2.$as().unwrap());
    }};
}

impl Parameters for SpatialParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        spatial_tensors!(self, f, as_slice);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        spatial_tensors!(self, f, as_slice_mut);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, Tile};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_slide(rng: &mut ChaCha8Rng, h: u32, w: u32, d: usize, keep: f64) -> SlideRecord {
        let mut tiles = Vec::new();
        for row in 0..h {
            for col in 0..w {
                if tiles.is_empty() || rng.gen::<f64>() < keep {
                    let feature = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                    tiles.push(Tile { row, col, feature, gt_label: None });
                }
            }
        }
        // tile order deliberately differs from raster order
        tiles.reverse();
        SlideRecord { slide_id: "r".into(), grid_h: h, grid_w: w, tiles, slide_label: 1, split: Split::Train }
    }

    #[test]
    fn zero_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let slide = random_slide(&mut rng, 5, 4, 8, 0.7);
        let p = SpatialParams::new(8, 4, &mut rng).unwrap();
        let x = slide.features();
        let (out, _) = p.forward(&slide, &x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn single_tile_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let slide = random_slide(&mut rng, 1, 1, 8, 1.0);
        let mut p = SpatialParams::new(8, 2, &mut rng).unwrap();
        p.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3)));
        let (out, _) = p.forward(&slide, &slide.features()).unwrap();
        assert_eq!(out.dim(), (1, 8));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SpatialParams::new(6, 4, &mut rng).is_err());
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 3;
        let slide = random_slide(&mut rng, 6, 5, d, 0.6);
        let mut p = SpatialParams::new(d, 1, &mut rng).unwrap();
        for k in [&mut p.conv3, &mut p.conv5, &mut p.conv7] {
            k.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        }
        let x = slide.features();
        let layout = GridLayout::new(&slide).unwrap();
        let xr = x.select(Axis(0), &layout.order);
        let conv = layout.im2col(&xr, &slide).dot(&p.folded_kernel());
        for (pos, &ti) in layout.order.iter().enumerate() {
            let t = &slide.tiles[ti];
            let mut expect = Array1::<f64>::zeros(d);
            for size in KERNEL_SIZES {
                let half = (size / 2) as i64;
                for ky in 0..size {
                    for kx in 0..size {
                        let (r, c) = (t.row as i64 + ky as i64 - half, t.col as i64 + kx as i64 - half);
                        let Some(src) = slide.tiles.iter().position(|u| u.row as i64 == r && u.col as i64 == c) else {
                            continue;
                        };
                        let base = (ky * size + kx) * d;
                        for co in 0..d {
                            for ci in 0..d {
                                expect[co] += x[[src, ci]] * p.kernel(size)[[base + ci, co]] / 3.0;
                            }
                        }
                    }
                }
            }
            for co in 0..d {
                assert!((conv[[pos, co]] - expect[co]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_tiles_outside_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut slide = random_slide(&mut rng, 3, 3, 8, 1.0);
        slide.tiles[0].row = 3;
        let p = SpatialParams::new(8, 4, &mut rng).unwrap();
        assert!(p.forward(&slide, &slide.features()).is_err());
    }
}
