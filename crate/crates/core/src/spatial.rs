//! Resampling and neighborhood unfolding for channel-last `(h*w) x c` maps.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Spatial extent of a feature map stored as `(h*w) x c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Grid { h, w }
    }

    pub fn square(n: usize) -> Self {
        Grid { h: n, w: n }
    }

    pub fn positions(self) -> usize {
        self.h * self.w
    }

    pub fn halved(self) -> Grid {
        Grid {
            h: self.h / 2,
            w: self.w / 2,
        }
    }

    pub fn doubled(self) -> Grid {
        Grid {
            h: self.h * 2,
            w: self.w * 2,
        }
    }

    /// Output extent of a 3x3 convolution with padding 1.
    pub fn conv_out(self, stride: usize) -> Grid {
        Grid {
            h: (self.h - 1) / stride + 1,
            w: (self.w - 1) / stride + 1,
        }
    }
}

fn check_map<T: Real>(op: &'static str, x: &Tensor<T>, grid: Grid) -> Result<()> {
    if x.rows() != grid.positions() {
        return Err(Error::dims(op, x.shape(), &[grid.h, grid.w]));
    }
    Ok(())
}

/// Gathers each 3x3 zero-padded neighborhood into one row, giving a
/// `(ho*wo) x (9*c)` matrix whose product with a `(9*c) x c_out` weight is a
/// strided convolution. Columns are ordered `(ky, kx, channel)`.
pub fn unfold3x3<T: Real>(x: &Tensor<T>, grid: Grid, stride: usize) -> Result<Tensor<T>> {
    check_map("unfold3x3", x, grid)?;
    let c = x.cols();
    let out_grid = grid.conv_out(stride);
    let mut out = Tensor::zeros(&[out_grid.positions(), 9 * c]);
    let src = x.data();
    let dst = out.data_mut();
    for oy in 0..out_grid.h {
        for ox in 0..out_grid.w {
            let row = (oy * out_grid.w + ox) * 9 * c;
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= grid.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= grid.w as isize {
                        continue;
                    }
                    let s = (iy as usize * grid.w + ix as usize) * c;
                    let d = row + (ky * 3 + kx) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`unfold3x3`]: scatter-adds unfolded rows back onto the map.
pub fn fold3x3<T: Real>(cols: &Tensor<T>, grid: Grid, stride: usize, channels: usize) -> Result<Tensor<T>> {
    let out_grid = grid.conv_out(stride);
    if cols.rows() != out_grid.positions() || cols.cols() != 9 * channels {
        return Err(Error::dims("fold3x3", cols.shape(), &[out_grid.positions(), 9 * channels]));
    }
    let c = channels;
    let mut out = Tensor::zeros(&[grid.positions(), c]);
    let src = cols.data();
    let dst = out.data_mut();
    for oy in 0..out_grid.h {
        for ox in 0..out_grid.w {
            let row = (oy * out_grid.w + ox) * 9 * c;
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= grid.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= grid.w as isize {
                        continue;
                    }
                    let d = (iy as usize * grid.w + ix as usize) * c;
                    let s = row + (ky * 3 + kx) * c;
                    for ch in 0..c {
                        dst[d + ch] += src[s + ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor x2 upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>, grid: Grid) -> Result<Tensor<T>> {
    check_map("upsample2", x, grid)?;
    let c = x.cols();
    let big = grid.doubled();
    let mut out = Tensor::zeros(&[big.positions(), c]);
    let src = x.data();
    let dst = out.data_mut();
    for y in 0..big.h {
        for xx in 0..big.w {
            let s = ((y / 2) * grid.w + xx / 2) * c;
            let d = (y * big.w + xx) * c;
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        }
    }
    Ok(out)
}

/// 2x2 block sum; the adjoint of [`upsample2`] on the finer grid `grid`.
pub fn block_sum2<T: Real>(x: &Tensor<T>, grid: Grid) -> Result<Tensor<T>> {
    check_map("block_sum2", x, grid)?;
    if !grid.h.is_multiple_of(2) || !grid.w.is_multiple_of(2) {
        return Err(Error::dims("block_sum2", &[grid.h, grid.w], &[2, 2]));
    }
    let c = x.cols();
    let small = grid.halved();
    let mut out = Tensor::zeros(&[small.positions(), c]);
    let src = x.data();
    let dst = out.data_mut();
    for y in 0..grid.h {
        for xx in 0..grid.w {
            let s = (y * grid.w + xx) * c;
            let d = ((y / 2) * small.w + xx / 2) * c;
            for ch in 0..c {
                dst[d + ch] += src[s + ch];
            }
        }
    }
    Ok(out)
}

/// 2x2 average pooling.
pub fn avg_pool2<T: Real>(x: &Tensor<T>, grid: Grid) -> Result<Tensor<T>> {
    let mut out = block_sum2(x, grid)?;
    let q = T::from_f64(0.25);
    for v in out.data_mut() {
        *v *= q;
    }
    Ok(out)
}

/// Repeated 2x2 average pooling down to `target`.
pub fn resize_down<T: Real>(x: &Tensor<T>, grid: Grid, target: Grid) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    let mut g = grid;
    while g != target {
        if g.h < target.h * 2 || g.w < target.w * 2 {
            return Err(Error::dims("resize_down", &[grid.h, grid.w], &[target.h, target.w]));
        }
        cur = avg_pool2(&cur, g)?;
        g = g.halved();
    }
    Ok(cur)
}

/// Downsamples a binary `(h*w) x 1` mask by average pooling then `> 0.5`
/// binarization at every halving.
pub fn downsample_mask<T: Real>(mask: &Tensor<T>, grid: Grid, target: Grid) -> Result<Tensor<T>> {
    let mut cur = mask.clone();
    let mut g = grid;
    let half = T::from_f64(0.5);
    while g != target {
        if g.h < target.h * 2 || g.w < target.w * 2 {
            return Err(Error::dims("downsample_mask", &[grid.h, grid.w], &[target.h, target.w]));
        }
        cur = avg_pool2(&cur, g)?.map(|v| if v > half { T::one() } else { T::zero() });
        g = g.halved();
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(seed: u64, grid: Grid, c: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[grid.positions(), c], |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn unfold_fold_are_adjoint() {
        for stride in [1, 2] {
            let grid = Grid::new(6, 5);
            let x = rand_map(1, grid, 3);
            let cols = unfold3x3(&x, grid, stride).unwrap();
            let y = rand_map(2, grid.conv_out(stride), 27);
            let back = fold3x3(&y, grid, stride, 3).unwrap();
            assert!((dot(&cols, &y) - dot(&x, &back)).abs() < 1e-12);
        }
    }

    #[test]
    fn unfold_center_tap_is_input() {
        let grid = Grid::square(4);
        let x = rand_map(3, grid, 2);
        let cols = unfold3x3(&x, grid, 1).unwrap();
        for p in 0..16 {
            assert_eq!(&cols.row(p)[8..10], x.row(p));
        }
        assert_eq!(grid.conv_out(2), Grid::square(2));
        assert_eq!(Grid::square(64).conv_out(2), Grid::square(32));
    }

    #[test]
    fn upsample_and_block_sum_are_adjoint() {
        let grid = Grid::new(3, 4);
        let x = rand_map(4, grid, 2);
        let y = rand_map(5, grid.doubled(), 2);
        let up = upsample2(&x, grid).unwrap();
        let down = block_sum2(&y, grid.doubled()).unwrap();
        assert!((dot(&up, &y) - dot(&x, &down)).abs() < 1e-12);
    }

    #[test]
    fn pooling_preserves_constants() {
        let grid = Grid::square(8);
        let x = Tensor::full(&[64, 3], 0.3);
        let small = resize_down(&x, grid, Grid::square(2)).unwrap();
        assert_eq!(small.shape(), &[4, 3]);
        assert!(small.data().iter().all(|v: &f64| (v - 0.3).abs() < 1e-15));
        assert!(avg_pool2(&Tensor::<f64>::zeros(&[15, 1]), Grid::new(3, 5)).is_err());
    }

    #[test]
    fn mask_downsampling_is_idempotent_on_solid_regions() {
        let grid = Grid::square(8);
        let mask = Tensor::from_fn(&[64, 1], |i| if (i % 8) < 4 { 1.0 } else { 0.0 }).unwrap();
        let small = downsample_mask(&mask, grid, Grid::square(4)).unwrap();
        let again = downsample_mask(&upsample2(&small, Grid::square(4)).unwrap(), grid, Grid::square(4)).unwrap();
        assert_eq!(small, again);
        assert_eq!(small.sum(), 8.0);
    }
}
