//! Synthetic articulated-hand generator: a palm quad plus five two-segment
//! fingers, rendered as points on capsule surfaces, with ground-truth
//! joint positions and oracle part labels.
//!
//! The oracle labels exist only for evaluating segmentation; training
//! reads clouds and poses exclusively.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::RespelError;
use crate::io;
use crate::preprocess::{mat3_apply, mat3_mul, rot_x, rot_y, rot_z, Frame, Mat3, PointCloud};

pub const PALM_JOINTS: usize = 4;
pub const FINGERS: usize = 5;
pub const JOINTS_PER_FINGER: usize = 3;
pub const JOINT_COUNT: usize = PALM_JOINTS + FINGERS * JOINTS_PER_FINGER;
pub const POSE_DIMS: usize = JOINT_COUNT * 3;

/// Part ids in the oracle label files (background never appears there).
pub const PART_PALM: u8 = 0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FingerSpec {
    /// Attachment point on the palm, rest frame (mm).
    pub base: [f64; 3],
    /// Unit rest direction the finger points in.
    pub direction: [f64; 3],
    /// Proximal and distal segment lengths (mm).
    pub lengths: [f64; 2],
    /// Capsule radius (mm).
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SkeletonSpec {
    /// Rigid palm quad corners, rest frame (mm).
    pub palm: [[f64; 3]; PALM_JOINTS],
    pub palm_radius: f64,
    /// Thumb first, then index, middle, ring, pinky.
    pub fingers: [FingerSpec; FINGERS],
    /// Camera-frame translation ranges (mm).
    pub xy_range: f64,
    pub z_range: [f64; 2],
    /// Global orientation bounds (radians) about x/y and z.
    pub tilt_bound: f64,
    pub roll_bound: f64,
    /// Flexion bound per finger joint (radians) and abduction bound.
    pub flexion_bound: f64,
    pub abduction_bound: f64,
    /// Keep only points on the camera-facing half of the hand.
    pub half_space_culling: bool,
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        let finger = |base: [f64; 3], direction: [f64; 3], l1: f64, l2: f64, radius: f64| {
            let norm = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
            FingerSpec {
                base,
                direction: [direction[0] / norm, direction[1] / norm, direction[2] / norm],
                lengths: [l1, l2],
                radius,
            }
        };
        Self {
            // ~80mm wide, ~70mm tall palm; fingers push the full span
            // toward 160mm
            palm: [
                [-35.0, -45.0, 0.0],
                [35.0, -45.0, 0.0],
                [40.0, 20.0, 0.0],
                [-40.0, 20.0, 0.0],
            ],
            palm_radius: 14.0,
            fingers: [
                finger([-42.0, -15.0, 0.0], [-0.8, 0.6, 0.0], 32.0, 26.0, 9.0),
                finger([-28.0, 22.0, 0.0], [-0.15, 1.0, 0.0], 38.0, 28.0, 7.0),
                finger([-9.0, 24.0, 0.0], [0.0, 1.0, 0.0], 42.0, 31.0, 7.0),
                finger([10.0, 24.0, 0.0], [0.1, 1.0, 0.0], 38.0, 28.0, 6.5),
                finger([28.0, 21.0, 0.0], [0.25, 1.0, 0.0], 30.0, 22.0, 6.0),
            ],
            xy_range: 80.0,
            z_range: [450.0, 750.0],
            tilt_bound: std::f64::consts::FRAC_PI_6,
            roll_bound: std::f64::consts::FRAC_PI_4,
            flexion_bound: 1.2,
            abduction_bound: 0.18,
            half_space_culling: false,
        }
    }
}

/// Joint layout: palm corners 0..4, then per finger (base, mid, tip).
pub fn finger_joint(f: usize, j: usize) -> usize {
    PALM_JOINTS + f * JOINTS_PER_FINGER + j
}

/// Part id of each joint: palm 0, fingers 1..=5 in spec order.
pub fn joint_part(joint: usize) -> u8 {
    if joint < PALM_JOINTS {
        PART_PALM
    } else {
        ((joint - PALM_JOINTS) / JOINTS_PER_FINGER + 1) as u8
    }
}

fn rodrigues(axis: [f64; 3], angle: f64, v: [f64; 3]) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    let dot = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    [
        v[0] * c + cross[0] * s + axis[0] * dot * (1.0 - c),
        v[1] * c + cross[1] * s + axis[1] * dot * (1.0 - c),
        v[2] * c + cross[2] * s + axis[2] * dot * (1.0 - c),
    ]
}

/// One posed hand: 19 joints in camera mm.
pub fn sample_pose(spec: &SkeletonSpec, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut joints = vec![[0.0; 3]; JOINT_COUNT];
    joints[..PALM_JOINTS].copy_from_slice(&spec.palm);

    for (f, finger) in spec.fingers.iter().enumerate() {
        let abduction = rng.gen_range(-spec.abduction_bound..=spec.abduction_bound);
        let flex1 = rng.gen_range(0.0..=spec.flexion_bound);
        let flex2 = rng.gen_range(0.0..=spec.flexion_bound);
        // abduction swings the rest direction in the palm plane; flexion
        // curls about the in-plane axis perpendicular to the finger,
        // bending toward -z
        let d0 = mat3_apply(rot_z(abduction), finger.direction);
        let curl_axis = {
            let a = [d0[1], -d0[0], 0.0];
            let n = (a[0] * a[0] + a[1] * a[1]).sqrt();
            [a[0] / n, a[1] / n, 0.0]
        };
        let d1 = rodrigues(curl_axis, flex1, d0);
        let d2 = rodrigues(curl_axis, flex1 + flex2, d0);
        let base = finger.base;
        let mid = [
            base[0] + d1[0] * finger.lengths[0],
            base[1] + d1[1] * finger.lengths[0],
            base[2] + d1[2] * finger.lengths[0],
        ];
        let tip = [
            mid[0] + d2[0] * finger.lengths[1],
            mid[1] + d2[1] * finger.lengths[1],
            mid[2] + d2[2] * finger.lengths[1],
        ];
        joints[finger_joint(f, 0)] = base;
        joints[finger_joint(f, 1)] = mid;
        joints[finger_joint(f, 2)] = tip;
    }

    let rx = rng.gen_range(-spec.tilt_bound..=spec.tilt_bound);
    let ry = rng.gen_range(-spec.tilt_bound..=spec.tilt_bound);
    let rz = rng.gen_range(-spec.roll_bound..=spec.roll_bound);
    let r: Mat3 = mat3_mul(rot_z(rz), mat3_mul(rot_y(ry), rot_x(rx)));
    let t = [
        rng.gen_range(-spec.xy_range..=spec.xy_range),
        rng.gen_range(-spec.xy_range..=spec.xy_range),
        rng.gen_range(spec.z_range[0]..=spec.z_range[1]),
    ];
    for j in &mut joints {
        let v = mat3_apply(r, *j);
        *j = [v[0] + t[0], v[1] + t[1], v[2] + t[2]];
    }
    joints
}

/// Bone capsule: segment between two joints plus a radius and part id.
#[derive(Debug, Clone, Copy)]
pub struct Bone {
    pub a: usize,
    pub b: usize,
    pub radius: f64,
    pub part: u8,
}

pub fn bones(spec: &SkeletonSpec) -> Vec<Bone> {
    let mut out = Vec::new();
    // palm: quad edges plus one diagonal to fill the interior
    for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)] {
        out.push(Bone {
            a,
            b,
            radius: spec.palm_radius,
            part: PART_PALM,
        });
    }
    for (f, finger) in spec.fingers.iter().enumerate() {
        for seg in 0..2 {
            out.push(Bone {
                a: finger_joint(f, seg),
                b: finger_joint(f, seg + 1),
                radius: finger.radius,
                part: (f + 1) as u8,
            });
        }
    }
    out
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Distance from a point to the segment [a, b].
pub fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    };
    norm([
        p[0] - (a[0] + ab[0] * t),
        p[1] - (a[1] + ab[1] * t),
        p[2] - (a[2] + ab[2] * t),
    ])
}

fn capsule_area(length: f64, radius: f64) -> f64 {
    use std::f64::consts::PI;
    2.0 * PI * radius * length + 4.0 * PI * radius * radius
}

fn unit_sphere_point(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = norm(v);
        if n > 1e-3 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

pub struct SyntheticSample {
    pub cloud: PointCloud,
    /// Flattened joints, camera mm (J = 57 by default).
    pub pose: Vec<f64>,
    /// Oracle part label per point (nearest bone's part).
    pub labels: Vec<u8>,
}

/// Uniform surface sampling over all bone capsules, point count exactly
/// `n`; labels come from the nearest bone so overlap regions are assigned
/// deterministically.
pub fn render_points(
    joints: &[[f64; 3]],
    spec: &SkeletonSpec,
    n: usize,
    seed: u64,
) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bones = bones(spec);
    let areas: Vec<f64> = bones
        .iter()
        .map(|b| capsule_area(norm(sub(joints[b.b], joints[b.a])), b.radius))
        .collect();
    let total_area: f64 = areas.iter().sum();

    let centroid_z = {
        let s: f64 = joints.iter().map(|j| j[2]).sum();
        s / joints.len() as f64
    };

    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let mut pick = rng.gen_range(0.0..total_area);
        let mut bi = 0;
        while bi + 1 < bones.len() && pick > areas[bi] {
            pick -= areas[bi];
            bi += 1;
        }
        let bone = &bones[bi];
        let (a, b) = (joints[bone.a], joints[bone.b]);
        let ab = sub(b, a);
        let length = norm(ab);
        let cyl_area = 2.0 * std::f64::consts::PI * bone.radius * length;
        let p = if rng.gen_range(0.0..capsule_area(length, bone.radius)) < cyl_area {
            // lateral surface: uniform along the axis, uniform angle
            let t = rng.gen_range(0.0..=1.0);
            let axis = [ab[0] / length, ab[1] / length, ab[2] / length];
            // any unit vector orthogonal to the axis
            let ortho = {
                let ref_v = if axis[0].abs() < 0.9 {
                    [1.0, 0.0, 0.0]
                } else {
                    [0.0, 1.0, 0.0]
                };
                let c = [
                    axis[1] * ref_v[2] - axis[2] * ref_v[1],
                    axis[2] * ref_v[0] - axis[0] * ref_v[2],
                    axis[0] * ref_v[1] - axis[1] * ref_v[0],
                ];
                let cn = norm(c);
                [c[0] / cn, c[1] / cn, c[2] / cn]
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let radial = rodrigues(axis, angle, ortho);
            [
                a[0] + ab[0] * t + radial[0] * bone.radius,
                a[1] + ab[1] * t + radial[1] * bone.radius,
                a[2] + ab[2] * t + radial[2] * bone.radius,
            ]
        } else {
            // spherical caps: uniform on the sphere, attached to the
            // endpoint whose hemisphere the direction falls in
            let dir = unit_sphere_point(&mut rng);
            let toward_b = dir[0] * ab[0] + dir[1] * ab[1] + dir[2] * ab[2] > 0.0;
            let e = if toward_b { b } else { a };
            [
                e[0] + dir[0] * bone.radius,
                e[1] + dir[1] * bone.radius,
                e[2] + dir[2] * bone.radius,
            ]
        };
        if spec.half_space_culling && p[2] > centroid_z {
            continue;
        }
        points.push(p);
    }

    let labels = points
        .iter()
        .map(|&p| {
            let mut best = f64::MAX;
            let mut part = PART_PALM;
            for bone in &bones {
                let d = segment_distance(p, joints[bone.a], joints[bone.b]) - bone.radius;
                if d < best {
                    best = d;
                    part = bone.part;
                }
            }
            part
        })
        .collect();

    SyntheticSample {
        cloud: PointCloud::new(points, Frame::CameraMm).expect("n >= 1 finite points"),
        pose: joints.iter().flatten().copied().collect(),
        labels,
    }
}

pub fn generate_sample(spec: &SkeletonSpec, n: usize, seed: u64) -> SyntheticSample {
    let joints = sample_pose(spec, seed);
    // independent stream for surface sampling
    render_points(&joints, spec, n, seed ^ 0x9e3779b97f4a7c15)
}

/// FNV-1a over the serialized spec, recorded in the manifest so a dataset
/// can be tied back to its generator settings.
pub fn spec_hash(spec: &SkeletonSpec) -> u64 {
    let json = serde_json::to_string(spec).expect("spec serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Writes `count` samples (`sample_%06d.pts/.pose/.labels`) plus a
/// manifest recording seed, count, point count and spec hash.
pub fn generate_dataset(
    dir: &Path,
    spec: &SkeletonSpec,
    count: usize,
    points_per_sample: usize,
    seed: u64,
) -> Result<(), RespelError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| RespelError::Io(format!("{}: {e}", dir.display())))?;
    for i in 0..count {
        let sample = generate_sample(spec, points_per_sample, seed.wrapping_add(i as u64));
        let stem = format!("sample_{i:06}");
        io::write_points(&dir.join(format!("{stem}.pts")), &sample.cloud)?;
        io::write_pose(&dir.join(format!("{stem}.pose")), &sample.pose)?;
        io::write_labels(&dir.join(format!("{stem}.labels")), &sample.labels)?;
    }
    let manifest = format!(
        "seed = {seed}\ncount = {count}\npoints = {points_per_sample}\nspec_hash = {:016x}\n",
        spec_hash(spec)
    );
    std::fs::write(dir.join("manifest.txt"), manifest)
        .map_err(|e| RespelError::Io(format!("{}: {e}", dir.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rest_pose_is_canonical() {
        let spec = SkeletonSpec {
            tilt_bound: 0.0,
            roll_bound: 0.0,
            flexion_bound: 0.0,
            abduction_bound: 0.0,
            xy_range: 0.0,
            z_range: [500.0, 500.0],
            ..SkeletonSpec::default()
        };
        let joints = sample_pose(&spec, 1);
        for (j, &p) in joints[..PALM_JOINTS].iter().enumerate() {
            let rest = spec.palm[j];
            assert!((p[0] - rest[0]).abs() < 1e-9);
            assert!((p[1] - rest[1]).abs() < 1e-9);
            assert!((p[2] - rest[2] - 500.0).abs() < 1e-9);
        }
        // flat hand: fingers stay in the palm plane
        for j in &joints {
            assert!((j[2] - 500.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_pose() {
        let spec = SkeletonSpec::default();
        assert_eq!(sample_pose(&spec, 42), sample_pose(&spec, 42));
        assert_ne!(sample_pose(&spec, 42), sample_pose(&spec, 43));
    }

    #[test]
    fn bone_lengths_are_rigid() {
        let spec = SkeletonSpec::default();
        for seed in 0..1000 {
            let joints = sample_pose(&spec, seed);
            for (f, finger) in spec.fingers.iter().enumerate() {
                for seg in 0..2 {
                    let a = joints[finger_joint(f, seg)];
                    let b = joints[finger_joint(f, seg + 1)];
                    let len = norm(sub(b, a));
                    assert!(
                        (len - finger.lengths[seg]).abs() < 1e-9,
                        "seed {seed} finger {f} segment {seg}: {len}"
                    );
                }
            }
            // palm quad edges rigid as well
            for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
                let rest = norm(sub(spec.palm[b], spec.palm[a]));
                let posed = norm(sub(joints[b], joints[a]));
                assert!((rest - posed).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hand_span_is_hand_sized() {
        let spec = SkeletonSpec::default();
        let joints = sample_pose(&spec, 7);
        let mut span = 0.0f64;
        for a in &joints[..] {
            for b in &joints[..] {
                span = span.max(norm(sub(*a, *b)));
            }
        }
        assert!(span > 120.0 && span < 220.0, "span {span}");
    }

    #[test]
    fn single_bone_points_on_capsule_surface() {
        let spec = SkeletonSpec {
            half_space_culling: false,
            ..SkeletonSpec::default()
        };
        let joints = sample_pose(&spec, 3);
        let bones = bones(&spec);
        let sample = render_points(&joints, &spec, 512, 9);
        for p in &sample.cloud.points {
            // every point lies exactly on some bone's capsule surface
            let on_surface = bones.iter().any(|b| {
                (segment_distance(*p, joints[b.a], joints[b.b]) - b.radius).abs() < 1e-9
            });
            assert!(on_surface);
        }
    }

    #[test]
    fn part_counts_track_capsule_areas() {
        let spec = SkeletonSpec::default();
        let joints = sample_pose(&spec, 5);
        let bones = bones(&spec);
        let n = 20000;
        let sample = render_points(&joints, &spec, n, 11);
        let mut area_by_part = [0.0f64; 6];
        for b in &bones {
            let len = norm(sub(joints[b.b], joints[b.a]));
            area_by_part[b.part as usize] += capsule_area(len, b.radius);
        }
        let total: f64 = area_by_part.iter().sum();
        let mut count_by_part = [0usize; 6];
        for &l in &sample.labels {
            count_by_part[l as usize] += 1;
        }
        // labels are nearest-bone, so overlap regions shift mass toward
        // thicker parts; allow a generous band around area proportions
        for part in 0..6 {
            let expect = area_by_part[part] / total;
            let got = count_by_part[part] as f64 / n as f64;
            assert!(
                (got - expect).abs() < 0.05,
                "part {part}: expected ~{expect:.3}, got {got:.3}"
            );
        }
    }

    #[test]
    fn culling_keeps_front_half() {
        let spec = SkeletonSpec {
            half_space_culling: true,
            ..SkeletonSpec::default()
        };
        let joints = sample_pose(&spec, 13);
        let centroid_z: f64 = joints.iter().map(|j| j[2]).sum::<f64>() / joints.len() as f64;
        let sample = render_points(&joints, &spec, 256, 17);
        assert_eq!(sample.cloud.len(), 256);
        for p in &sample.cloud.points {
            assert!(p[2] <= centroid_z);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_loadable() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let spec = SkeletonSpec::default();
        generate_dataset(dir_a.path(), &spec, 2, 64, 99).unwrap();
        generate_dataset(dir_b.path(), &spec, 2, 64, 99).unwrap();
        for stem in ["sample_000000", "sample_000001"] {
            for ext in ["pts", "pose", "labels"] {
                let a = std::fs::read(dir_a.path().join(format!("{stem}.{ext}"))).unwrap();
                let b = std::fs::read(dir_b.path().join(format!("{stem}.{ext}"))).unwrap();
                assert_eq!(a, b, "{stem}.{ext}");
            }
            let cloud = io::read_points(&dir_a.path().join(format!("{stem}.pts"))).unwrap();
            let pose = io::read_pose(&dir_a.path().join(format!("{stem}.pose"))).unwrap();
            let labels = io::read_labels(&dir_a.path().join(format!("{stem}.labels"))).unwrap();
            assert_eq!(cloud.len(), 64);
            assert_eq!(pose.len(), POSE_DIMS);
            assert_eq!(labels.len(), 64);
        }
        let manifest =
            std::fs::read_to_string(dir_a.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("seed = 99"));
        assert!(manifest.contains(&format!("{:016x}", spec_hash(&spec))));
    }

    #[test]
    fn labels_match_nearest_bone_recomputation() {
        let spec = SkeletonSpec::default();
        let joints = sample_pose(&spec, 21);
        let bones = bones(&spec);
        let sample = render_points(&joints, &spec, 256, 23);
        for (p, &label) in sample.cloud.points.iter().zip(&sample.labels) {
            let mut best = f64::MAX;
            let mut part = PART_PALM;
            for b in &bones {
                let d = segment_distance(*p, joints[b.a], joints[b.b]) - b.radius;
                if d < best {
                    best = d;
                    part = b.part;
                }
            }
            assert_eq!(label, part);
        }
    }
}
