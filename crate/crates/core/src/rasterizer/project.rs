use crate::camera::Camera;
use crate::linalg::{
    mat3_mul, mat3_t_vec, mul23_33, quat_to_mat, quat_to_mat_backward, sandwich23, transpose3, Mat2, Mat3, Vec3,
};
use crate::rasterizer::{Splat2D, LOW_PASS};
use crate::scalar::Real;

/// World covariance R S Sᵀ Rᵀ from a unit quaternion and log-scales.
fn covariance3<T: Real>(q: &[T; 4], log_scale: &Vec3<T>) -> (Mat3<T>, Mat3<T>, Vec3<T>) {
    let r = quat_to_mat(q);
    let s2 = log_scale.map(|l| (l + l).exp());
    let mut rs2 = r;
    for row in rs2.iter_mut() {
        for j in 0..3 {
            row[j] *= s2[j];
        }
    }
    (mat3_mul(&rs2, &transpose3(&r)), r, s2)
}

/// Jacobian of the perspective projection at a camera-frame point.
fn jacobian<T: Real>(cam: &Camera<T>, p: &Vec3<T>) -> [[T; 3]; 2] {
    let z = p[2];
    let z2 = z * z;
    [
        [cam.fx / z, T::zero(), -cam.fx * p[0] / z2],
        [T::zero(), cam.fy / z, -cam.fy * p[1] / z2],
    ]
}

/// Projects one Gaussian; `None` when it is culled.
pub fn project_gaussian<T: Real>(
    mean: &Vec3<T>,
    rotation: &[T; 4],
    log_scale: &Vec3<T>,
    alpha_base: T,
    rgb: [T; 3],
    source_index: usize,
    cam: &Camera<T>,
) -> Option<Splat2D<T>> {
    let p = cam.world_to_cam(mean);
    let z = p[2];
    if !(z > cam.near && z < cam.far) {
        return None;
    }
    let center = [cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy];
    let (sigma, _, _) = covariance3(rotation, log_scale);
    let jw = mul23_33(&jacobian(cam, &p), &cam.rotation());
    let c2 = sandwich23(&jw, &sigma);
    let lp = T::lit(LOW_PASS);
    let cov2d = [c2[0][0] + lp, c2[0][1], c2[1][1] + lp];
    let splat = Splat2D::new(center, cov2d, z, rgb, alpha_base, source_index)?;
    let (w, h) = (T::lit(cam.width as f64), T::lit(cam.height as f64));
    if center[0] + splat.extent[0] < T::zero()
        || center[0] - splat.extent[0] > w
        || center[1] + splat.extent[1] < T::zero()
        || center[1] - splat.extent[1] > h
    {
        return None;
    }
    Some(splat)
}

/// Gradients of one projection with respect to its geometric inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectGrads<T> {
    pub mean: Vec3<T>,
    pub rotation: [T; 4],
    pub log_scale: Vec3<T>,
}

/// Pulls splat-space gradients (center, conic as a full symmetric matrix
/// with `g_conic[1]` the gradient of each off-diagonal entry, view depth)
/// back through the projection.
pub fn project_backward<T: Real>(
    mean: &Vec3<T>,
    rotation: &[T; 4],
    log_scale: &Vec3<T>,
    cam: &Camera<T>,
    g_center: [T; 2],
    g_conic: [T; 3],
    g_depth: T,
) -> ProjectGrads<T> {
    let two = T::lit(2.0);
    let p = cam.world_to_cam(mean);
    let (x, y, z) = (p[0], p[1], p[2]);
    let (sigma, r, s2) = covariance3(rotation, log_scale);
    let wr = cam.rotation();
    let j = jacobian(cam, &p);
    let jw = mul23_33(&j, &wr);
    let c2 = sandwich23(&jw, &sigma);
    let lp = T::lit(LOW_PASS);
    let cov: Mat2<T> = [[c2[0][0] + lp, c2[0][1]], [c2[1][0], c2[1][1] + lp]];
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let q: Mat2<T> = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
    let gq: Mat2<T> = [[g_conic[0], g_conic[1]], [g_conic[1], g_conic[2]]];
    // d(Σ⁻¹) = −Σ⁻¹ dΣ Σ⁻¹
    let qgq = mat2_mul3(&q, &gq, &q);
    let g_cov: Mat2<T> = [[-qgq[0][0], -qgq[0][1]], [-qgq[1][0], -qgq[1][1]]];

    // cov = T Σ Tᵀ with T = J W
    let mut g_t = [[T::zero(); 3]; 2];
    let t_sigma = mul23_33(&jw, &sigma);
    for a in 0..2 {
        for b in 0..3 {
            let mut acc = T::zero();
            for c in 0..2 {
                acc += (g_cov[a][c] + g_cov[c][a]) * t_sigma[c][b];
            }
            g_t[a][b] = acc;
        }
    }
    let mut g_sigma = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = T::zero();
            for c in 0..2 {
                for d in 0..2 {
                    acc += jw[c][a] * g_cov[c][d] * jw[d][b];
                }
            }
            g_sigma[a][b] = acc;
        }
    }
    // T = J W  →  ∂L/∂J = ∂L/∂T Wᵀ
    let mut g_j = [[T::zero(); 3]; 2];
    for a in 0..2 {
        for b in 0..3 {
            g_j[a][b] = (0..3).map(|c| g_t[a][c] * wr[b][c]).sum();
        }
    }
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_p = [T::zero(); 3];
    // jacobian entries
    g_p[2] += g_j[0][0] * (-cam.fx / z2);
    g_p[0] += g_j[0][2] * (-cam.fx / z2);
    g_p[2] += g_j[0][2] * (two * cam.fx * x / z3);
    g_p[2] += g_j[1][1] * (-cam.fy / z2);
    g_p[1] += g_j[1][2] * (-cam.fy / z2);
    g_p[2] += g_j[1][2] * (two * cam.fy * y / z3);
    // center
    g_p[0] += g_center[0] * cam.fx / z;
    g_p[2] -= g_center[0] * cam.fx * x / z2;
    g_p[1] += g_center[1] * cam.fy / z;
    g_p[2] -= g_center[1] * cam.fy * y / z2;
    g_p[2] += g_depth;

    let g_mean = mat3_t_vec(&wr, &g_p);

    // Σ = R diag(s²) Rᵀ
    let gsym: Mat3<T> = std::array::from_fn(|a| std::array::from_fn(|b| g_sigma[a][b] + g_sigma[b][a]));
    let mut g_r = [[T::zero(); 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            g_r[a][b] = (0..3).map(|c| gsym[a][c] * r[c][b]).sum::<T>() * s2[b];
        }
    }
    let rt_g_r = mat3_mul(&transpose3(&r), &mat3_mul(&g_sigma, &r));
    let g_log_scale = std::array::from_fn(|k| rt_g_r[k][k] * two * s2[k]);
    ProjectGrads {
        mean: g_mean,
        rotation: quat_to_mat_backward(rotation, &g_r),
        log_scale: g_log_scale,
    }
}

fn mat2_mul3<T: Real>(a: &Mat2<T>, b: &Mat2<T>, c: &Mat2<T>) -> Mat2<T> {
    let ab = crate::linalg::mat2_mul(a, b);
    crate::linalg::mat2_mul(&ab, c)
}
