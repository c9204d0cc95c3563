//! 3D Gaussian primitive math: covariance composition, EWA projection to the
//! image plane, and 2D density evaluation, each with an analytic backward.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Isotropic dilation added to every projected covariance, in px².
pub const LOW_PASS: f64 = 0.3;
/// Projected covariances with a smaller determinant are skipped.
pub const MIN_DET: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("singular 2D covariance (det {0:e})")]
    SingularCovariance(f64),
}

/// Quaternion, w first.
pub type Quat = [f64; 4];

/// A renderable anisotropic Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian3D {
    pub mean: Vector3<f64>,
    pub rotation: Quat,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Gaussian3D {
    /// Builds a Gaussian from unconstrained parameters: the quaternion is
    /// normalized, scales go through `exp` and opacity through a sigmoid.
    pub fn from_raw(
        mean: Vector3<f64>,
        rotation: Quat,
        log_scale: Vector3<f64>,
        opacity_logit: f64,
        color: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        Ok(Self {
            mean,
            rotation: normalize_quat(&rotation)?,
            scale: log_scale.map(f64::exp),
            opacity: crate::autodiff::sigmoid(opacity_logit),
            color,
        })
    }
}

pub fn normalize_quat(q: &Quat) -> Result<Quat, GeometryError> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 || !n.is_finite() {
        return Err(GeometryError::ZeroQuaternion);
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on `R(q)` back to the components of a unit `q`.
fn rotation_matrix_backward(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// `Σ = R(q) S Sᵀ R(q)ᵀ` with `S = diag(s)`. `q` need not be unit length;
/// it is normalized first.
pub fn covariance3d(q: &Quat, s: &Vector3<f64>) -> Result<Matrix3<f64>, GeometryError> {
    let qn = normalize_quat(q)?;
    let m = rotation_matrix(&qn) * Matrix3::from_diagonal(s);
    Ok(m * m.transpose())
}

/// Gradients of a scalar with respect to the raw quaternion and the scale,
/// given `dΣ` (treated as a full-matrix gradient).
pub fn covariance3d_backward(
    q: &Quat,
    s: &Vector3<f64>,
    d_sigma: &Matrix3<f64>,
) -> Result<(Quat, Vector3<f64>), GeometryError> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let qn = normalize_quat(q)?;
    let r = rotation_matrix(&qn);
    let m = r * Matrix3::from_diagonal(s);
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let mut d_s = Vector3::zeros();
    let mut d_r = Matrix3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            d_s[i] += d_m[(j, i)] * r[(j, i)];
            d_r[(j, i)] = d_m[(j, i)] * s[i];
        }
    }
    let d_qn = rotation_matrix_backward(&qn, &d_r);
    let dot: f64 = (0..4).map(|i| qn[i] * d_qn[i]).sum();
    let d_q = [
        (d_qn[0] - qn[0] * dot) / norm,
        (d_qn[1] - qn[1] * dot) / norm,
        (d_qn[2] - qn[2] * dot) / norm,
        (d_qn[3] - qn[3] * dot) / norm,
    ];
    Ok((d_q, d_s))
}

/// Pinhole camera. `rotation`/`translation` map world to camera space
/// (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        near: f64,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            rotation: rotation.transpose().into(),
            translation: translation.into(),
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with vertical field of view in
    /// radians and the principal point at the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("eye equals target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidCamera("up parallel to view".into()))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self::new(
            r,
            t,
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            0.01,
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = self.rotation_matrix();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err < 1e-6) {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation not orthonormal (error {err:e})"
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0) {
            return Err(GeometryError::InvalidCamera("near plane must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// Camera position in world space, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vector())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vector()
    }

    /// Applies a rigid world transform `p -> rot·p + trans` to the camera, so
    /// that it sees transformed geometry exactly as before.
    pub fn transformed(&self, rot: &Matrix3<f64>, trans: &Vector3<f64>) -> Self {
        let r = self.rotation_matrix() * rot.transpose();
        let t = self.translation_vector() - r * trans;
        Self {
            rotation: r.transpose().into(),
            translation: t.into(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl Splat2D {
    pub fn conic(&self) -> Result<Matrix2<f64>, GeometryError> {
        let det = self.cov.determinant();
        if det.abs() < MIN_DET || !det.is_finite() {
            return Err(GeometryError::SingularCovariance(det));
        }
        Ok(Matrix2::new(self.cov[(1, 1)], -self.cov[(0, 1)], -self.cov[(1, 0)], self.cov[(0, 0)]) / det)
    }

    /// Radius (px) that contains the `k`-sigma ellipse.
    pub fn radius(&self, k: f64) -> f64 {
        let (a, b, c) = (self.cov[(0, 0)], self.cov[(0, 1)], self.cov[(1, 1)]);
        let mid = 0.5 * (a + c);
        let lambda = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        k * lambda.max(0.0).sqrt()
    }
}

/// Intermediate values of one projection, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct Projection {
    pub splat: Splat2D,
    cam_point: Vector3<f64>,
    jw: Matrix2x3<f64>,
    sigma: Matrix3<f64>,
}

fn jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    )
}

/// Projects a Gaussian; `Ok(None)` when its center is not beyond the near plane.
pub fn project(g: &Gaussian3D, cam: &Camera) -> Result<Option<Projection>, GeometryError> {
    let p = cam.to_camera(&g.mean);
    if p.z <= cam.near {
        return Ok(None);
    }
    let sigma = covariance3d(&g.rotation, &g.scale)?;
    let jw = jacobian(cam, &p) * cam.rotation_matrix();
    let cov = jw * sigma * jw.transpose() + Matrix2::identity() * LOW_PASS;
    let mean = Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy);
    Ok(Some(Projection {
        splat: Splat2D {
            mean,
            cov,
            depth: p.z,
            opacity: g.opacity,
            color: g.color,
        },
        cam_point: p,
        jw,
        sigma,
    }))
}

/// Gradients of a projection with respect to the 3D mean, raw quaternion and
/// scale, given gradients on the 2D mean and 2D covariance.
pub fn project_backward(
    g: &Gaussian3D,
    cam: &Camera,
    proj: &Projection,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> Result<(Vector3<f64>, Quat, Vector3<f64>), GeometryError> {
    let d_cov = 0.5 * (d_cov2d + d_cov2d.transpose());
    let jw = &proj.jw;
    let d_sigma = jw.transpose() * d_cov * jw;
    let (d_q, d_s) = covariance3d_backward(&g.rotation, &g.scale, &d_sigma)?;

    let d_jw = 2.0 * d_cov * jw * proj.sigma;
    let d_j = d_jw * cam.rotation_matrix().transpose();
    let (x, y, z) = (proj.cam_point.x, proj.cam_point.y, proj.cam_point.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let (z2, z3) = (z * z, z * z * z);
    let mut d_p = Vector3::zeros();
    // J00 = fx/z, J02 = -fx x/z², J11 = fy/z, J12 = -fy y/z²
    d_p.z += d_j[(0, 0)] * (-fx / z2) + d_j[(1, 1)] * (-fy / z2);
    d_p.x += d_j[(0, 2)] * (-fx / z2);
    d_p.z += d_j[(0, 2)] * (2.0 * fx * x / z3);
    d_p.y += d_j[(1, 2)] * (-fy / z2);
    d_p.z += d_j[(1, 2)] * (2.0 * fy * y / z3);
    // u = fx x/z + cx, v = fy y/z + cy
    d_p.x += d_mean2d.x * fx / z;
    d_p.y += d_mean2d.y * fy / z;
    d_p.z += -d_mean2d.x * fx * x / z2 - d_mean2d.y * fy * y / z2;

    let d_mean = cam.rotation_matrix().transpose() * d_p;
    Ok((d_mean, d_q, d_s))
}

/// `G'(p) = exp(-½ dᵀ Σ⁻¹ d)` with `d = p - mean`.
pub fn eval_splat(sp: &Splat2D, p: &Vector2<f64>) -> Result<f64, GeometryError> {
    let q = sp.conic()?;
    let d = p - sp.mean;
    Ok((-0.5 * d.dot(&(q * d))).exp())
}

/// Density and its gradients with respect to the 2D mean and the (full)
/// 2D covariance, given a precomputed conic.
pub fn eval_splat_grad(
    sp: &Splat2D,
    conic: &Matrix2<f64>,
    p: &Vector2<f64>,
) -> (f64, Vector2<f64>, Matrix2<f64>) {
    let d = p - sp.mean;
    let qd = conic * d;
    let val = (-0.5 * d.dot(&qd)).exp();
    let d_mean = qd * val;
    let d_cov = qd * qd.transpose() * (0.5 * val);
    (val, d_mean, d_cov)
}
