//! Input normalization: depth back-projection, view normalization,
//! bounding-box normalization, point sampling, augmentation and the
//! inverse transform for network outputs.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::RespelError;

/// Flattened (x, y, z) per joint, J = 3 * joint count.
pub type PoseVector = Vec<f64>;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, RespelError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(RespelError::Config(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Millimetres in the camera coordinate system.
    CameraMm,
    /// Millimetres after rotation by R_cam.
    ViewNormalizedMm,
    /// Unitless after centroid subtraction and division by the box radius.
    UnitNormalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, frame: Frame) -> Result<Self, RespelError> {
        if points.is_empty() {
            return Err(RespelError::Numeric("point cloud must be non-empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RespelError::Numeric(
                "point cloud contains non-finite coordinates".into(),
            ));
        }
        Ok(Self { points, frame })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }
}

/// Everything needed to map a unit-normalized pose back to camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationRecord {
    /// View-normalization rotation; orthonormal, det +1.
    pub rotation: Mat3,
    /// Centroid subtracted by the box normalization (view-normalized mm).
    pub centroid: [f64; 3],
    /// Box radius divided out by the box normalization (mm).
    pub scale: f64,
}

impl NormalizationRecord {
    pub fn identity() -> Self {
        Self {
            rotation: MAT3_IDENTITY,
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }
}

pub const MAT3_IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: Mat3, b: Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

pub fn mat3_transpose(a: Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn mat3_apply(a: Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn rot_x(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rotate_pose(pose: &[f64], r: Mat3) -> PoseVector {
    pose.chunks(3)
        .flat_map(|j| mat3_apply(r, [j[0], j[1], j[2]]))
        .collect()
}

/// Pinhole back-projection of a depth map; pixels with `valid` false or
/// non-positive depth are dropped.
pub fn depth_to_points(
    depth: &[f64],
    height: usize,
    width: usize,
    intrinsics: &CameraIntrinsics,
    valid: Option<&[bool]>,
) -> Result<PointCloud, RespelError> {
    if depth.len() != height * width {
        return Err(RespelError::Numeric(format!(
            "depth buffer {} != {}x{}",
            depth.len(),
            height,
            width
        )));
    }
    let mut points = Vec::new();
    for v in 0..height {
        for u in 0..width {
            let i = v * width + u;
            if valid.is_some_and(|m| !m[i]) {
                continue;
            }
            let z = depth[i];
            if z <= 0.0 {
                continue;
            }
            let x = (u as f64 - intrinsics.cx) * z / intrinsics.fx;
            let y = (v as f64 - intrinsics.cy) * z / intrinsics.fy;
            points.push([x, y, z]);
        }
    }
    if points.is_empty() {
        return Err(RespelError::Numeric(
            "no valid depth pixels to back-project".into(),
        ));
    }
    PointCloud::new(points, Frame::CameraMm)
}

/// Rotation aligning the view direction towards the cloud centroid with
/// the z-axis: alpha_y = atan2(c_x, c_z) removes the x component, then
/// alpha_x = atan2(c~_y, c~_z) removes the y component. The combined
/// rotation maps the centroid onto (0, 0, |c|).
pub fn view_rotation(centroid: [f64; 3]) -> Result<Mat3, RespelError> {
    if centroid[2] <= 0.0 {
        return Err(RespelError::Numeric(format!(
            "view normalization needs a centroid in front of the camera, got z={}",
            centroid[2]
        )));
    }
    let alpha_y = centroid[0].atan2(centroid[2]);
    let ry = rot_y(-alpha_y);
    let c_tilde = mat3_apply(ry, centroid);
    let alpha_x = c_tilde[1].atan2(c_tilde[2]);
    Ok(mat3_mul(rot_x(alpha_x), ry))
}

pub fn view_normalize(
    cloud: &PointCloud,
    pose: &[f64],
) -> Result<(PointCloud, PoseVector, NormalizationRecord), RespelError> {
    let r_cam = view_rotation(cloud.centroid())?;
    let points = cloud.points.iter().map(|&p| mat3_apply(r_cam, p)).collect();
    let cloud = PointCloud {
        points,
        frame: Frame::ViewNormalizedMm,
    };
    let pose = rotate_pose(pose, r_cam);
    let record = NormalizationRecord {
        rotation: r_cam,
        centroid: [0.0; 3],
        scale: 1.0,
    };
    Ok((cloud, pose, record))
}

/// Centroid-centering plus division by a fixed box radius (mm). The box
/// extent is not dictated by the data; a fixed metric radius keeps units
/// consistent across samples.
pub fn normalize_box(
    cloud: &PointCloud,
    pose: &[f64],
    r_norm: f64,
    record: &mut NormalizationRecord,
) -> (PointCloud, PoseVector) {
    let c = cloud.centroid();
    record.centroid = c;
    record.scale = r_norm;
    let points = cloud
        .points
        .iter()
        .map(|p| {
            [
                (p[0] - c[0]) / r_norm,
                (p[1] - c[1]) / r_norm,
                (p[2] - c[2]) / r_norm,
            ]
        })
        .collect();
    let pose = pose
        .chunks(3)
        .flat_map(|j| [(j[0] - c[0]) / r_norm, (j[1] - c[1]) / r_norm, (j[2] - c[2]) / r_norm])
        .collect();
    (
        PointCloud {
            points,
            frame: Frame::UnitNormalized,
        },
        pose,
    )
}

/// Inverse of `normalize_box` followed by the inverse view rotation;
/// output is camera-frame mm.
pub fn denormalize_pose(pose: &[f64], record: &NormalizationRecord) -> PoseVector {
    let rt = mat3_transpose(record.rotation);
    pose.chunks(3)
        .flat_map(|j| {
            let view = [
                j[0] * record.scale + record.centroid[0],
                j[1] * record.scale + record.centroid[1],
                j[2] * record.scale + record.centroid[2],
            ];
            mat3_apply(rt, view)
        })
        .collect()
}

/// Resamples the cloud to exactly `n` points: without replacement when
/// enough points exist (avoids duplicate-point degeneracy in the column
/// max), with replacement otherwise.
pub fn sample_points(cloud: &PointCloud, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cloud.points.len();
    let points = if m >= n {
        index_sample(&mut rng, m, n)
            .into_iter()
            .map(|i| cloud.points[i])
            .collect()
    } else {
        let mut pts = cloud.points.clone();
        while pts.len() < n {
            pts.push(cloud.points[rng.gen_range(0..m)]);
        }
        pts
    };
    PointCloud {
        points,
        frame: cloud.frame,
    }
}

/// Augmentation ranges; collapsing each range to a point disables it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentRanges {
    pub translation_mm: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub rotation_z: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            translation_mm: 15.0,
            scale_lo: 0.85,
            scale_hi: 1.15,
            rotation_z: std::f64::consts::PI,
        }
    }
}

/// Shared random rigid/scale transform applied to points and pose in the
/// view-normalized frame: rotation about the z-axis, isotropic scale
/// about the centroid, then translation.
pub fn augment(
    cloud: &PointCloud,
    pose: &[f64],
    ranges: &AugmentRanges,
    seed: u64,
) -> (PointCloud, PoseVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = if ranges.rotation_z > 0.0 {
        rng.gen_range(-ranges.rotation_z..=ranges.rotation_z)
    } else {
        0.0
    };
    let scale = if ranges.scale_hi > ranges.scale_lo {
        rng.gen_range(ranges.scale_lo..=ranges.scale_hi)
    } else {
        ranges.scale_lo
    };
    let t: [f64; 3] = if ranges.translation_mm > 0.0 {
        [
            rng.gen_range(-ranges.translation_mm..=ranges.translation_mm),
            rng.gen_range(-ranges.translation_mm..=ranges.translation_mm),
            rng.gen_range(-ranges.translation_mm..=ranges.translation_mm),
        ]
    } else {
        [0.0; 3]
    };
    let rz = rot_z(theta);
    let centroid = mat3_apply(rz, cloud.centroid());
    let map = |p: [f64; 3]| {
        let r = mat3_apply(rz, p);
        [
            (r[0] - centroid[0]) * scale + centroid[0] + t[0],
            (r[1] - centroid[1]) * scale + centroid[1] + t[1],
            (r[2] - centroid[2]) * scale + centroid[2] + t[2],
        ]
    };
    let points = cloud.points.iter().map(|&p| map(p)).collect();
    let pose = pose.chunks(3).flat_map(|j| map([j[0], j[1], j[2]])).collect();
    (
        PointCloud {
            points,
            frame: cloud.frame,
        },
        pose,
    )
}
