use super::ops::gemm_acc;
use super::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// For column row `r` and output pixel `(oy, ox)`, the input offset (if
    /// inside the zero-padded border).
    fn source(&self, spec: Conv2dSpec, r: usize, oy: usize, ox: usize) -> Option<usize> {
        let c = r / (self.kh * self.kw);
        let ky = (r / self.kw) % self.kh;
        let kx = r % self.kw;
        let y = (oy * spec.stride + ky) as isize - spec.padding as isize;
        let x = (ox * spec.stride + kx) as isize - spec.padding as isize;
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            return None;
        }
        Some((c * self.h + y as usize) * self.w + x as usize)
    }
}

fn im2col(x: &Tensor, g: &Geometry, spec: Conv2dSpec) -> Vec<f64> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                if let Some(s) = g.source(spec, r, oy, ox) {
                    out[r * cols + oy * g.w_out + ox] = x.data()[s];
                }
            }
        }
    }
    out
}

impl<'t> Var<'t> {
    /// 2-D convolution of a `[C_in, H, W]` input with a
    /// `[C_out, C_in, kh, kw]` kernel and `[C_out]` bias, zero padded.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, spec: Conv2dSpec) -> Result<Var<'t>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || spec.stride == 0 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::shape("conv2d bias", &ws, &bias.shape()));
        }
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let (hp, wp) = (xs[1] + 2 * spec.padding, xs[2] + 2 * spec.padding);
        if hp < kh || wp < kw {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geo = Geometry {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            kh,
            kw,
            h_out: (hp - kh) / spec.stride + 1,
            w_out: (wp - kw) / spec.stride + 1,
        };
        let cols = im2col(&self.value(), &geo, spec);
        let (rows, ncols) = (geo.col_rows(), geo.col_cols());
        let out = {
            let wv = weight.value();
            let bv = bias.value();
            let mut out = vec![0.0; c_out * ncols];
            for (co, row) in out.chunks_mut(ncols).enumerate() {
                row.fill(bv.data()[co]);
            }
            gemm_acc(wv.data(), &cols, &mut out, c_out, rows, ncols);
            Tensor::new([c_out, geo.h_out, geo.w_out], out)?
        };
        Ok(self.tape.custom(
            &[self, weight, bias],
            out,
            Box::new(move |ctx| {
                let (g, wv) = (ctx.grad.data(), ctx.inputs[1].data());
                let dx = ctx.needs[0].then(|| {
                    let mut dcols = vec![0.0; rows * ncols];
                    for co in 0..c_out {
                        let grow = &g[co * ncols..(co + 1) * ncols];
                        for r in 0..rows {
                            let wr = wv[co * rows + r];
                            if wr == 0.0 {
                                continue;
                            }
                            for (d, &gv) in dcols[r * ncols..(r + 1) * ncols].iter_mut().zip(grow) {
                                *d += wr * gv;
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(ctx.inputs[0].shape().to_vec());
                    for r in 0..rows {
                        for oy in 0..geo.h_out {
                            for ox in 0..geo.w_out {
                                if let Some(s) = geo.source(spec, r, oy, ox) {
                                    dx.data_mut()[s] += dcols[r * ncols + oy * geo.w_out + ox];
                                }
                            }
                        }
                    }
                    dx
                });
                let dw = ctx.needs[1].then(|| {
                    let mut dw = Tensor::zeros(ctx.inputs[1].shape().to_vec());
                    for co in 0..c_out {
                        let grow = &g[co * ncols..(co + 1) * ncols];
                        for r in 0..rows {
                            let crow = &cols[r * ncols..(r + 1) * ncols];
                            dw.data_mut()[co * rows + r] =
                                grow.iter().zip(crow).map(|(a, b)| a * b).sum();
                        }
                    }
                    dw
                });
                let db = ctx.needs[2].then(|| {
                    Tensor::from_fn([c_out], |co| g[co * ncols..(co + 1) * ncols].iter().sum())
                });
                vec![dx, dw, db]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn stride_and_padding_arithmetic() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([3, 8, 8]));
        let w = tape.constant(Tensor::ones([4, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros([4]));
        let y = x.conv2d(w, b, Conv2dSpec { stride: 2, padding: 1 }).unwrap();
        assert_eq!(y.shape(), vec![4, 4, 4]);
        let y = y.to_tensor();
        // corner sees a 2x2 window per channel, interior sees 3x3
        assert_eq!(y.at(&[0, 0, 0]), 12.0);
        assert_eq!(y.at(&[0, 1, 1]), 27.0);
    }

    #[test]
    fn matches_direct_convolution() {
        let tape = Tape::new();
        let x = Tensor::from_fn([2, 5, 4], |i| ((i * 7) % 11) as f64 - 5.0);
        let w = Tensor::from_fn([3, 2, 3, 3], |i| ((i * 5) % 7) as f64 * 0.1 - 0.3);
        let b = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let spec = Conv2dSpec { stride: 1, padding: 1 };
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), tape.constant(b.clone()), spec)
            .unwrap()
            .to_tensor();
        for co in 0..3 {
            for oy in 0..5 {
                for ox in 0..4 {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    acc += w.at(&[co, ci, ky, kx]) * x.at(&[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[co, oy, ox]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
