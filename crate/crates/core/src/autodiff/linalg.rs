use super::{Tensor, Var};
use crate::{Error, Real, Result};

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as gemm_raw;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as gemm_raw;

/// C (m×n) = alpha · op(A) · op(B) + beta · C for row-major buffers.
///
/// `a` is stored as m×k (or k×m when `trans_a`), `b` as k×n (or n×k).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    trans_a: bool,
    b: &[Real],
    trans_b: bool,
    c: &mut [Real],
    beta: Real,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe buffers whose lengths were asserted above.
    unsafe {
        gemm_raw(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'t> Var<'t> {
    /// Matrix product of `[m, k]` and `[k, n]` variables.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::Shape(format!(
                "matmul needs 2D operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} · {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        let (a_req, b_req) = (self.requires_grad(), other.requires_grad());
        Ok(self
            .tape()
            .record(Tensor::from_parts(vec![m, n], out), &[self, other], move |g| {
                let ga = a_req.then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, 0.0);
                    Tensor::from_parts(vec![m, k], ga)
                });
                let gb = b_req.then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, 0.0);
                    Tensor::from_parts(vec![k, n], gb)
                });
                vec![ga, gb]
            }))
    }
}

/// Plain 3×3 helpers used by the geometry code.
pub type Mat3 = [[Real; 3]; 3];
pub type Vec3 = [Real; 3];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat3_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn mat3_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_det(a: &Mat3) -> Real {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn mat3_identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat3_to_tensor(a: &Mat3) -> Tensor {
    Tensor::from_parts(vec![3, 3], a.iter().flatten().copied().collect())
}

pub fn tensor_to_mat3(t: &Tensor) -> Mat3 {
    let d = t.data();
    [[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]
}

pub fn vec3_sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vec3_add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vec3_dot(a: &Vec3, b: &Vec3) -> Real {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn vec3_cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn vec3_norm(a: &Vec3) -> Real {
    vec3_dot(a, a).sqrt()
}

pub fn vec3_scale(a: &Vec3, s: Real) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
