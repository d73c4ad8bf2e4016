//! Lowering of 2-D cross-correlation onto matrix multiplication.
//!
//! One image at a time: the caller loops (or parallelizes) over the batch.

use ndarray::{Array2, ArrayView2};

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        k_h: usize,
        k_w: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Option<Self> {
        let eff_h = in_h + 2 * pad.0;
        let eff_w = in_w + 2 * pad.1;
        if eff_h < k_h || eff_w < k_w || stride.0 == 0 || stride.1 == 0 {
            return None;
        }
        Some(ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            k_h,
            k_w,
            stride,
            pad,
            out_h: (eff_h - k_h) / stride.0 + 1,
            out_w: (eff_w - k_w) / stride.1 + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one `[C,H,W]` image into a `[C*kH*kW, oH*oW]` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((g.col_rows(), g.out_len()));
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = (c * g.k_h + kh) * g.k_w + kw;
                let mut out = cols.row_mut(row);
                for oh in 0..g.out_h {
                    let ih = (oh * sh + kh) as isize - ph as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let base = ih as usize * g.in_w;
                    for ow in 0..g.out_w {
                        let iw = (ow * sw + kw) as isize - pw as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        out[oh * g.out_w + ow] = plane[base + iw as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Fold a `[C*kH*kW, oH*oW]` patch-gradient matrix back onto a `[C,H,W]`
/// image gradient (scatter-add, the adjoint of [`im2col`]).
pub fn col2im(cols: &ArrayView2<f64>, g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.in_c * g.in_h * g.in_w];
    let (sh, sw) = g.stride;
    let (ph, pw) = g.pad;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = (c * g.k_h + kh) * g.k_w + kw;
                let src = cols.row(row);
                for oh in 0..g.out_h {
                    let ih = (oh * sh + kh) as isize - ph as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let base = ih as usize * g.in_w;
                    for ow in 0..g.out_w {
                        let iw = (ow * sw + kw) as isize - pw as isize;
                        if iw < 0 || iw >= g.in_w as isize {
                            continue;
                        }
                        plane[base + iw as usize] += src[oh * g.out_w + ow];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_matches_floor_formula() {
        let g = ConvGeom::new(1, 5, 7, 1, 3, 3, (2, 2), (1, 1)).unwrap();
        assert_eq!((g.out_h, g.out_w), ((5 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        assert!(ConvGeom::new(1, 2, 2, 1, 5, 5, (1, 1), (1, 1)).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let g = ConvGeom::new(2, 4, 5, 1, 3, 3, (2, 1), (1, 0)).unwrap();
        let x: Vec<f64> = (0..g.in_c * g.in_h * g.in_w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = Array2::from_shape_fn((g.col_rows(), g.out_len()), |_| rng.gen_range(-1.0..1.0));
        let cols = im2col(&x, &g);
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let folded = col2im(&y.view(), &g);
        let rhs: f64 = x.iter().zip(folded.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
