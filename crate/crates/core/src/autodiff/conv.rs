use super::linalg::gemm;
use super::{Tensor, Var};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Output columns `oj` whose input column `oj·stride + kj - pad` lies in `[0, w)`.
fn valid_cols(g: &Geometry, kj: usize) -> (usize, usize) {
    let first = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let last = if g.w + g.pad > kj { (g.w + g.pad - kj - 1) / g.stride + 1 } else { 0 };
    (first.min(g.ow), last.min(g.ow).max(first.min(g.ow)))
}

fn im2col(x: &[Real], g: &Geometry) -> Vec<Real> {
    let cols = g.oh * g.ow;
    let mut out = vec![0.0; g.c * g.k * g.k * cols];
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.oh {
                    let i = (oi * g.stride + ki) as isize - g.pad as isize;
                    if i < 0 || i >= g.h as isize || lo == hi {
                        continue;
                    }
                    let src = &x[(ch * g.h + i as usize) * g.w..][..g.w];
                    let d = &mut dst[oi * g.ow + lo..oi * g.ow + hi];
                    let j0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        d.copy_from_slice(&src[j0..j0 + d.len()]);
                    } else {
                        for (t, v) in d.iter_mut().enumerate() {
                            *v = src[j0 + t * g.stride];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols: &[Real], g: &Geometry) -> Vec<Real> {
    let n = g.oh * g.ow;
    let mut out = vec![0.0; g.c * g.h * g.w];
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.oh {
                    let i = (oi * g.stride + ki) as isize - g.pad as isize;
                    if i < 0 || i >= g.h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut out[(ch * g.h + i as usize) * g.w..][..g.w];
                    let j0 = lo * g.stride + kj - g.pad;
                    for (t, v) in src[oi * g.ow + lo..oi * g.ow + hi].iter().enumerate() {
                        dst[j0 + t * g.stride] += v;
                    }
                }
            }
        }
    }
    out
}

impl<'t> Var<'t> {
    /// 2D cross-correlation of a `[C, H, W]` input with a `[C', C, k, k]`
    /// kernel, plus an optional `[C']` bias.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let wt = kernel.value();
        let (&[c, h, w], &[co, ci, k, k2]) = (x.shape(), wt.shape()) else {
            return Err(Error::Shape(format!(
                "conv2d expects [C,H,W] input and [C',C,k,k] kernel, got {:?} and {:?}",
                x.shape(),
                wt.shape()
            )));
        };
        if ci != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                c, ci
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!("conv2d needs an odd square kernel, got {}x{}", k, k2)));
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Shape("conv2d stride/padding leave no output".into()));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::Shape(format!("conv2d bias {:?} for {} outputs", b.shape(), co)));
            }
        }
        let g = Geometry {
            c,
            h,
            w,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let n = g.oh * g.ow;
        let kk = c * k * k;
        let cols = im2col(x.data(), &g);
        let mut out = vec![0.0; co * n];
        if let Some(b) = bias {
            let bv = b.value();
            for o in 0..co {
                out[o * n..(o + 1) * n].fill(bv.data()[o]);
            }
        }
        gemm(co, kk, n, wt.data(), false, &cols, false, &mut out, if bias.is_some() { 1.0 } else { 0.0 });
        // kept for the kernel gradient
        let cols = kernel.requires_grad().then_some(cols);

        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let x_req = self.requires_grad();
        let has_bias = bias.is_some();
        Ok(self.tape().record(
            Tensor::from_parts(vec![co, g.oh, g.ow], out),
            &parents,
            move |gout| {
                let gd = gout.data();
                let gx = x_req.then(|| {
                    let mut gcols = vec![0.0; kk * n];
                    gemm(kk, co, n, wt.data(), true, gd, false, &mut gcols, 0.0);
                    Tensor::from_parts(vec![c, h, w], col2im(&gcols, &g))
                });
                let gk = cols.as_ref().map(|cols| {
                    let mut gk = vec![0.0; co * kk];
                    gemm(co, n, kk, gd, false, cols, true, &mut gk, 0.0);
                    Tensor::from_parts(vec![co, c, k, k], gk)
                });
                let mut grads = vec![gx, gk];
                if has_bias {
                    let gb = (0..co).map(|o| gd[o * n..(o + 1) * n].iter().sum()).collect();
                    grads.push(Some(Tensor::from_parts(vec![co], gb)));
                }
                grads
            },
        ))
    }
}
