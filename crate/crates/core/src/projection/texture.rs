use crate::primitives::TextureLayout;
use crate::Real;

/// Bilinear taps into a `[faces, rows, cols, channels]` texel grid.
///
/// Texel centres sit at `(j + 0.5) / cols` in u and `(i + 0.5) / rows` in v.
/// Rows always clamp; columns wrap when the layout says so.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    /// Offsets of the first channel of each tap.
    pub base: [usize; 4],
    pub weight: [Real; 4],
    pub d_du: [Real; 4],
    pub d_dv: [Real; 4],
}

fn axis(c: Real, n: usize, wrap: bool) -> (usize, usize, Real, Real) {
    let s = c * n as Real - 0.5;
    if wrap {
        let f0 = s.floor();
        let frac = s - f0;
        let i0 = (f0 as i64).rem_euclid(n as i64) as usize;
        return (i0, (i0 + 1) % n, frac, n as Real);
    }
    if n == 1 || s <= 0.0 {
        return (0, 0, 0.0, 0.0);
    }
    if s >= (n - 1) as Real {
        return (n - 1, n - 1, 0.0, 0.0);
    }
    let i0 = s.floor() as usize;
    (i0, i0 + 1, s - i0 as Real, n as Real)
}

pub(crate) fn bilinear_taps(layout: &TextureLayout, face: usize, u: Real, v: Real) -> Taps {
    let (x0, x1, fx, dfx) = axis(u, layout.cols, layout.wrap_u);
    let (y0, y1, fy, dfy) = axis(v, layout.rows, false);
    let idx = |y: usize, x: usize| ((face * layout.rows + y) * layout.cols + x) * layout.channels;
    Taps {
        base: [idx(y0, x0), idx(y0, x1), idx(y1, x0), idx(y1, x1)],
        weight: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        d_du: [-(1.0 - fy) * dfx, (1.0 - fy) * dfx, -fy * dfx, fy * dfx],
        d_dv: [-(1.0 - fx) * dfy, -fx * dfy, (1.0 - fx) * dfy, fx * dfy],
    }
}

/// Offset of the texel whose cell contains `(u, v)`.
pub(crate) fn nearest_texel(layout: &TextureLayout, face: usize, u: Real, v: Real) -> usize {
    let pick = |c: Real, n: usize, wrap: bool| {
        let i = (c * n as Real).floor() as i64;
        if wrap {
            i.rem_euclid(n as i64) as usize
        } else {
            i.clamp(0, n as i64 - 1) as usize
        }
    };
    let x = pick(u, layout.cols, layout.wrap_u);
    let y = pick(v, layout.rows, false);
    ((face * layout.rows + y) * layout.cols + x) * layout.channels
}

impl Taps {
    pub fn sample(&self, texels: &[Real], channels: usize, out: &mut [Real]) {
        out.fill(0.0);
        for t in 0..4 {
            let w = self.weight[t];
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&texels[self.base[t]..self.base[t] + channels]) {
                *o += w * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(rows: usize, cols: usize, wrap_u: bool) -> TextureLayout {
        TextureLayout {
            faces: 1,
            rows,
            cols,
            channels: 1,
            wrap_u,
        }
    }

    #[test]
    fn texel_centres_are_exact() {
        let l = layout(2, 4, false);
        let tex: Vec<Real> = (0..8).map(|v| v as Real).collect();
        let mut out = [0.0];
        for i in 0..2 {
            for j in 0..4 {
                let t = bilinear_taps(&l, 0, (j as Real + 0.5) / 4.0, (i as Real + 0.5) / 2.0);
                t.sample(&tex, 1, &mut out);
                assert_eq!(out[0], (i * 4 + j) as Real);
            }
        }
    }

    #[test]
    fn wrapping_blends_last_and_first_columns() {
        let l = layout(1, 4, true);
        let tex = [0.0, 1.0, 2.0, 3.0];
        let mut out = [0.0];
        bilinear_taps(&l, 0, 0.0, 0.5).sample(&tex, 1, &mut out);
        assert!((out[0] - 1.5).abs() < 1e-12);
        bilinear_taps(&l, 0, 1.0, 0.5).sample(&tex, 1, &mut out);
        assert!((out[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn clamped_border_has_zero_derivative() {
        let l = layout(3, 3, false);
        let t = bilinear_taps(&l, 0, 0.05, 0.5);
        assert!(t.d_du.iter().all(|&d| d == 0.0));
    }
}
