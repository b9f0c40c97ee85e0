//! Pinhole intrinsics, SE(3) poses and the depth/pose -> sampling-grid warp.

use mtl_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const DEPTH_MIN: f64 = 0.1;
pub const DEPTH_MAX: f64 = 100.0;
/// Offset of the disparity-to-depth map, `1 / DEPTH_MAX`.
pub const DISP_OFFSET: f64 = 1.0 / DEPTH_MAX;
/// Slope of the disparity-to-depth map, `1 / DEPTH_MIN - 1 / DEPTH_MAX`.
pub const DISP_SLOPE: f64 = 1.0 / DEPTH_MIN - 1.0 / DEPTH_MAX;

/// Transformed points closer than this to the camera plane are invalid.
const MIN_PROJECTED_Z: f64 = 1e-3;
/// Where invalid points are sent; sampling clamps them to the border.
const OFF_GRID: f64 = -1.0;

pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "intrinsics need positive finite focal lengths, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics for pyramid level `scale` (all entries divided by `2^scale`).
    pub fn at_scale(&self, scale: usize) -> Self {
        let f = (1u64 << scale) as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
        }
    }

    /// Intrinsics of the horizontally mirrored image of width `width`.
    pub fn flipped(&self, width: usize) -> Self {
        Self {
            cx: (width - 1) as f64 - self.cx,
            ..*self
        }
    }
}

/// Rigid transform as axis-angle rotation (radians times unit axis) plus
/// translation. Maps points from the source camera frame to the target.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        axis_angle: [0.0; 3],
        translation: [0.0; 3],
    };

    pub fn new(axis_angle: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            axis_angle,
            translation,
        }
    }

    /// `[rx, ry, rz, tx, ty, tz]`, the layout used by the pose network.
    pub fn from_slice(v: &[f64]) -> Self {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (r, t) = (self.axis_angle, self.translation);
        [r[0], r[1], r[2], t[0], t[1], t[2]]
    }

    pub fn rotation(&self) -> Mat3 {
        rodrigues(self.axis_angle)
    }

    pub fn to_matrix(&self) -> Mat4 {
        let r = self.rotation();
        let t = self.translation;
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn from_rotation(r: &Mat3, translation: [f64; 3]) -> Self {
        Self::new(log_rotation(r), translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.rotation());
        let t = mat_vec(&rt, self.translation);
        Self::from_rotation(&rt, [-t[0], -t[1], -t[2]])
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Pose) -> Self {
        let (r2, r1) = (self.rotation(), first.rotation());
        let t = mat_vec(&r2, first.translation);
        Self::from_rotation(
            &mat_mul(&r2, &r1),
            [
                t[0] + self.translation[0],
                t[1] + self.translation[1],
                t[2] + self.translation[2],
            ],
        )
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = mat_vec(&self.rotation(), p);
        [
            q[0] + self.translation[0],
            q[1] + self.translation[1],
            q[2] + self.translation[2],
        ]
    }
}

/// Rodrigues coefficients `sin t / t`, `(1 - cos t) / t^2` and their
/// derivatives divided by `t`, with series expansions near zero.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-2 {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

fn skew(w: [f64; 3]) -> Mat3 {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn norm3(w: [f64; 3]) -> f64 {
    (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt()
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[j][i];
        }
    }
    m
}

/// Rotation matrix `I + A K + B K^2` for `K = [w]x`.
pub fn rodrigues(w: [f64; 3]) -> Mat3 {
    let (a, b, _, _) = rodrigues_coeffs(norm3(w));
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

/// Partial derivatives of [`rodrigues`] with respect to each axis-angle
/// component.
pub fn rodrigues_jacobian(w: [f64; 3]) -> [Mat3; 3] {
    let (a, b, c, d) = rodrigues_coeffs(norm3(w));
    let k = skew(w);
    let k2 = mat_mul(&k, &k);
    let mut out = [[[0.0; 3]; 3]; 3];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = skew(e);
        let ek = mat_mul(&ei, &k);
        let ke = mat_mul(&k, &ei);
        for r in 0..3 {
            for col in 0..3 {
                slot[r][col] = c * w[i] * k[r][col]
                    + a * ei[r][col]
                    + d * w[i] * k2[r][col]
                    + b * (ek[r][col] + ke[r][col]);
            }
        }
    }
    out
}

/// Axis-angle vector of a rotation matrix.
pub fn log_rotation(r: &Mat3) -> [f64; 3] {
    let cos = ((r[0][0] + r[1][1] + r[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if theta < 1e-6 {
        return [v[0] / 2.0, v[1] / 2.0, v[2] / 2.0];
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near a half turn: recover the axis from the symmetric part.
        let diag = [r[0][0], r[1][1], r[2][2]];
        let i = (0..3).fold(0, |m, j| if diag[j] > diag[m] { j } else { m });
        let mut axis = [0.0; 3];
        axis[i] = ((diag[i] + 1.0) / 2.0).max(0.0).sqrt();
        for j in 0..3 {
            if j != i {
                axis[j] = (r[i][j] + r[j][i]) / (4.0 * axis[i]);
            }
        }
        let n = norm3(axis);
        return [axis[0] / n * theta, axis[1] / n * theta, axis[2] / n * theta];
    }
    let s = theta / (2.0 * theta.sin());
    [v[0] * s, v[1] * s, v[2] * s]
}

/// `N x H x W x 2` grid of integer pixel coordinates `(x, y)`.
pub fn identity_grid(n: usize, h: usize, w: usize) -> Tensor {
    let mut g = Vec::with_capacity(n * h * w * 2);
    for _ in 0..n {
        for y in 0..h {
            for x in 0..w {
                g.push(x as f64);
                g.push(y as f64);
            }
        }
    }
    Tensor::new(&[n, h, w, 2], g).expect("grid shape")
}

/// Validated dense depth in scene units, shape `N x 1 x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Tensor);

impl DepthMap {
    pub fn new(depth: Tensor) -> Result<Self> {
        let (_, c, _, _) = depth.dims4()?;
        if c != 1 {
            return Err(Error::Contract(format!("depth must have one channel, got {c}")));
        }
        if let Some(v) = depth
            .data()
            .iter()
            .find(|v| !(DEPTH_MIN..=DEPTH_MAX).contains(*v))
        {
            return Err(Error::Contract(format!(
                "depth {v} outside [{DEPTH_MIN}, {DEPTH_MAX}]"
            )));
        }
        Ok(Self(depth))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

pub fn disparity_to_depth_value(sigma: f64) -> f64 {
    1.0 / (DISP_SLOPE * sigma + DISP_OFFSET)
}

/// Inverse depth `a * sigma + b` for a sigmoid map.
pub fn sigmoid_to_disparity(tape: &Tape, sigma: Var) -> Var {
    tape.add_scalar(tape.mul_scalar(sigma, DISP_SLOPE), DISP_OFFSET)
}

/// Depth `1 / (a * sigma + b)`, inside `[DEPTH_MIN, DEPTH_MAX]` for sigma in `[0, 1]`.
pub fn disparity_to_depth(tape: &Tape, sigma: Var) -> Var {
    tape.recip(sigmoid_to_disparity(tape, sigma))
}

/// Per-pixel validity of a reprojection: false where the point landed
/// behind (or on) the target camera plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask(pub Vec<bool>);

impl ValidityMask {
    pub fn fraction_valid(&self) -> f64 {
        self.0.iter().filter(|&&v| v).count() as f64 / self.0.len().max(1) as f64
    }
}

struct Projection {
    ray: [f64; 3],
    rotated_ray: [f64; 3],
    point: [f64; 3],
}

fn project_pixel(k: &Intrinsics, r: &Mat3, t: [f64; 3], u: usize, v: usize, depth: f64) -> Projection {
    let ray = [(u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0];
    let rotated_ray = mat_vec(r, ray);
    let point = [
        depth * rotated_ray[0] + t[0],
        depth * rotated_ray[1] + t[1],
        depth * rotated_ray[2] + t[2],
    ];
    Projection {
        ray,
        rotated_ray,
        point,
    }
}

/// Sampling grid that pulls source-frame pixels into the target frame.
///
/// `depth` is `N x 1 x H x W` target-frame depth, `pose` holds `N` six-vectors
/// `[rx, ry, rz, tx, ty, tz]` mapping target-camera points into the source
/// camera. Each target pixel is back-projected with its depth, transformed,
/// and projected with `k`. Differentiable in both depth and pose.
pub fn reproject_grid(
    tape: &Tape,
    depth: Var,
    pose: Var,
    k: Intrinsics,
) -> Result<(Var, ValidityMask)> {
    let dv = tape.value(depth);
    let pv = tape.value(pose);
    let (n, c, h, w) = dv.dims4()?;
    if c != 1 || pv.len() != 6 * n {
        return Err(Error::Tensor(mtl_tensor::TensorError::Shape {
            op: "reproject_grid",
            detail: format!("depth {:?} with pose {:?}", dv.shape(), pv.shape()),
        }));
    }
    let mut grid = vec![0.0; n * h * w * 2];
    let mut valid = vec![true; n * h * w];
    for b in 0..n {
        let p = Pose::from_slice(&pv.data()[b * 6..b * 6 + 6]);
        let r = p.rotation();
        for v in 0..h {
            for u in 0..w {
                let i = (b * h + v) * w + u;
                let pr = project_pixel(&k, &r, p.translation, u, v, dv.data()[i]);
                let [x, y, z] = pr.point;
                if z > MIN_PROJECTED_Z {
                    grid[2 * i] = k.fx * x / z + k.cx;
                    grid[2 * i + 1] = k.fy * y / z + k.cy;
                } else {
                    grid[2 * i] = OFF_GRID;
                    grid[2 * i + 1] = OFF_GRID;
                    valid[i] = false;
                }
            }
        }
    }
    let out = Tensor::new(&[n, h, w, 2], grid)?;
    let mask = valid.clone();
    let var = tape.custom(
        &[depth, pose],
        out,
        Box::new(move |g, inputs, _| {
            let (dv, pv) = (inputs[0], inputs[1]);
            let mut gd = vec![0.0; dv.len()];
            let mut gp = vec![0.0; pv.len()];
            for b in 0..n {
                let p = Pose::from_slice(&pv.data()[b * 6..b * 6 + 6]);
                let r = p.rotation();
                let jac = rodrigues_jacobian(p.axis_angle);
                for v in 0..h {
                    for u in 0..w {
                        let i = (b * h + v) * w + u;
                        if !mask[i] {
                            continue;
                        }
                        let d = dv.data()[i];
                        let pr = project_pixel(&k, &r, p.translation, u, v, d);
                        let [x, y, z] = pr.point;
                        let (gu, gv) = (g.data()[2 * i], g.data()[2 * i + 1]);
                        // dL/d(point)
                        let q = [
                            gu * k.fx / z,
                            gv * k.fy / z,
                            -(gu * k.fx * x + gv * k.fy * y) / (z * z),
                        ];
                        let dot = |a: [f64; 3]| q[0] * a[0] + q[1] * a[1] + q[2] * a[2];
                        gd[i] = dot(pr.rotated_ray);
                        for (j, jm) in jac.iter().enumerate() {
                            gp[b * 6 + j] += d * dot(mat_vec(jm, pr.ray));
                        }
                        for j in 0..3 {
                            gp[b * 6 + 3 + j] += q[j];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(dv.shape(), gd).unwrap()),
                Some(Tensor::new(pv.shape(), gp).unwrap()),
            ]
        }),
    );
    Ok((var, ValidityMask(valid)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() < tol))
    }

    #[test]
    fn zero_pose_is_identity_matrix() {
        let m = Pose::IDENTITY.to_matrix();
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let expected = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(close(&r, &expected, 1e-15));
    }

    #[test]
    fn log_inverts_rodrigues_including_half_turn() {
        for w in [[0.3, -0.2, 0.1], [1e-9, 0.0, 2e-9], [0.0, std::f64::consts::PI, 0.0]] {
            let back = log_rotation(&rodrigues(w));
            assert!(close(&rodrigues(back), &rodrigues(w), 1e-9), "{w:?} -> {back:?}");
        }
    }

    #[test]
    fn scaled_intrinsics_halve_per_level() {
        let k = Intrinsics::new(100.0, 80.0, 63.5, 47.5).unwrap();
        let k2 = k.at_scale(2);
        assert_eq!((k2.fx, k2.fy, k2.cx, k2.cy), (25.0, 20.0, 15.875, 11.875));
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn depth_map_rejects_out_of_range_values() {
        assert!(DepthMap::new(Tensor::full(&[1, 1, 2, 2], 0.05)).is_err());
        assert!(DepthMap::new(Tensor::full(&[1, 1, 2, 2], 50.0)).is_ok());
        assert!(DepthMap::new(Tensor::full(&[1, 2, 2, 2], 50.0)).is_err());
    }
}
