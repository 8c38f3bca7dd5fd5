//! Fixed-size vector and matrix helpers over [`Real`].

use crate::scalar::Real;

pub type Vec3<T> = [T; 3];

/// Row-major matrix operand: `data` holds `rows×cols`, read transposed when
/// `t` is set.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub t: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Self {
            data,
            rows,
            cols,
            t: false,
        }
    }

    pub fn t(self) -> Self {
        Self { t: !self.t, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.t {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let ld = self.cols as isize;
        if self.t {
            (1, ld)
        } else {
            (ld, 1)
        }
    }
}

/// `c ← α·a·b + β·c` with `c` row-major of shape rows(a)×cols(b).
pub fn gemm<T: Real>(alpha: T, a: MatRef<T>, b: MatRef<T>, beta: T, c: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions");
    assert_eq!(c.len(), m * n, "output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: shapes and strides were checked against the buffer lengths
    // above, and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
pub type Mat3<T> = [[T; 3]; 3];
pub type Mat2<T> = [[T; 2]; 2];

#[inline]
pub fn dot3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub3<T: Real>(a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm3<T: Real>(a: &Vec3<T>) -> T {
    dot3(a, a).sqrt()
}

#[inline]
pub fn mat3_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}

#[inline]
pub fn mat3_t_vec<T: Real>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    let mut out = [T::zero(); 3];
    for (i, row) in m.iter().enumerate() {
        for j in 0..3 {
            out[j] += row[j] * v[i];
        }
    }
    out
}

#[inline]
pub fn mat3_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

#[inline]
pub fn transpose3<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// 2×3 times 3×3.
#[inline]
pub fn mul23_33<T: Real>(a: &[[T; 3]; 2], b: &Mat3<T>) -> [[T; 3]; 2] {
    let mut out = [[T::zero(); 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// `a · b · aᵀ` for a 2×3 `a` and 3×3 `b`.
#[inline]
pub fn sandwich23<T: Real>(a: &[[T; 3]; 2], b: &Mat3<T>) -> Mat2<T> {
    let ab = mul23_33(a, b);
    let mut out = [[T::zero(); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = ab[i][0] * a[j][0] + ab[i][1] * a[j][1] + ab[i][2] * a[j][2];
        }
    }
    out
}

#[inline]
pub fn mat2_mul<T: Real>(a: &Mat2<T>, b: &Mat2<T>) -> Mat2<T> {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// Rotation matrix of a unit quaternion stored as (w, x, y, z).
pub fn quat_to_mat<T: Real>(q: &[T; 4]) -> Mat3<T> {
    let two = T::lit(2.0);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            T::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            T::one() - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            T::one() - two * (x * x + y * y),
        ],
    ]
}

/// Pulls a gradient on the rotation matrix back to the (unit) quaternion
/// components, treating (w, x, y, z) as independent.
pub fn quat_to_mat_backward<T: Real>(q: &[T; 4], g: &Mat3<T>) -> [T; 4] {
    let two = T::lit(2.0);
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gw = two * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = two
        * (y * g[0][1] + z * g[0][2] + y * g[1][0] - two * x * g[1][1] - w * g[1][2] + z * g[2][0] + w * g[2][1]
            - two * x * g[2][2]);
    let gy = two
        * (-two * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1]
            - two * y * g[2][2]);
    let gz = two
        * (-two * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - two * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]);
    [gw, gx, gy, gz]
}

/// Backward of `v / |v|`: maps a gradient on the normalized vector to `v`.
pub fn normalize_backward<T: Real, const N: usize>(v: &[T; N], g: &[T; N]) -> [T; N] {
    let n2: T = v.iter().map(|&x| x * x).sum();
    let n = n2.sqrt();
    let mut u = [T::zero(); N];
    for i in 0..N {
        u[i] = v[i] / n;
    }
    let proj: T = (0..N).map(|i| u[i] * g[i]).sum();
    let mut out = [T::zero(); N];
    for i in 0..N {
        out[i] = (g[i] - u[i] * proj) / n;
    }
    out
}

/// Dot product with eight independent accumulators so the compiler can
/// keep several lanes in flight. Summation order is fixed.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha · x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
