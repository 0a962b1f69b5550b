//! Synthetic pose/video task, temporal pose sampling and the Procrustes-based
//! dynamicity measure.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::posegraph::SkeletonTopology;

/// 3D joint positions over time, stored frame-major as `[T][J][xyz]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    joints: usize,
    frames: usize,
    coords: Vec<f64>,
}

impl PoseSequence {
    pub fn new(joints: usize, coords: Vec<f64>) -> Result<Self> {
        if joints == 0 || coords.is_empty() || coords.len() % (3 * joints) != 0 {
            return Err(Error::Data(format!("{} coordinates do not form frames of {joints} joints", coords.len())));
        }
        Self::with_frames(joints, coords.len() / (3 * joints), coords)
    }

    /// Like [`PoseSequence::new`] but also accepts a skeleton without joints.
    pub fn with_frames(joints: usize, frames: usize, coords: Vec<f64>) -> Result<Self> {
        if frames == 0 || coords.len() != frames * joints * 3 {
            return Err(Error::Data(format!("{} coordinates for {frames} frames of {joints} joints", coords.len())));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("pose coordinates must be finite".into()));
        }
        Ok(Self { joints, frames, coords })
    }

    pub fn from_frames(frames: &[Vec<[f64; 3]>]) -> Result<Self> {
        let joints = frames.first().map_or(0, |f| f.len());
        if frames.iter().any(|f| f.len() != joints) {
            return Err(Error::Data("frames disagree on the joint count".into()));
        }
        Self::new(joints, frames.iter().flatten().flatten().copied().collect())
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f64; 3] {
        let o = (frame * self.joints + joint) * 3;
        [self.coords[o], self.coords[o + 1], self.coords[o + 2]]
    }

    /// `3 × J` matrix of one frame, row-major by coordinate.
    pub fn frame_matrix(&self, frame: usize) -> Vec<f64> {
        let j = self.joints;
        (0..3 * j).map(|i| self.joint(frame, i % j)[i / j]).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let stride = 3 * self.joints;
        let coords = indices.iter().flat_map(|&i| self.coords[i * stride..(i + 1) * stride].iter().copied()).collect();
        Self { joints: self.joints, frames: indices.len(), coords }
    }

    pub fn reversed(&self) -> Self {
        let idx: Vec<usize> = (0..self.frames()).rev().collect();
        self.select(&idx)
    }
}

/// `T × H × W × C` volume with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Video {
    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self { frames, height, width, channels, data: vec![0.0; frames * height * width * channels] }
    }

    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(Error::Data(format!(
                "video {frames}x{height}x{width}x{channels} needs {} values, got {}",
                frames * height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("video values must be finite".into()));
        }
        Ok(Self { frames, height, width, channels, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub video: Video,
    pub poses: PoseSequence,
}

/// Joint colours; mirrored limbs share a colour so only geometry tells them apart.
pub fn joint_palette(joints: usize) -> Vec<[f32; 3]> {
    const BODY8: [[f32; 3]; 8] = [
        [0.9, 0.3, 0.2],
        [0.3, 0.9, 0.3],
        [0.3, 0.4, 1.0],
        [0.9, 0.8, 0.2],
        [0.2, 0.9, 0.9],
        [0.9, 0.8, 0.2],
        [0.2, 0.9, 0.9],
        [0.9, 0.3, 0.9],
    ];
    (0..joints).map(|j| BODY8[j % BODY8.len()]).collect()
}

pub const BLOB_SIGMA_PX: f64 = 1.5;

/// Orthographic projection of the world box `[-1, 1]²` (x right, y up) to
/// continuous pixel coordinates `(row, col)`; pixel `i` has its centre at `i + 0.5`.
pub fn project_to_pixels(x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
    ((1.0 - y) / 2.0 * height as f64, (x + 1.0) / 2.0 * width as f64)
}

/// Draws every joint of every frame as an additive Gaussian blob in its
/// palette colour, clamped to `[0, 1]`. Coordinates outside the world box are
/// clamped onto it; the second value counts such joints.
pub fn render_video(poses: &PoseSequence, height: usize, width: usize) -> (Video, usize) {
    let palette = joint_palette(poses.joints());
    let mut video = Video::zeros(poses.frames(), height, width, 3);
    let mut clamped = 0;
    let reach = libm::ceil(4.0 * BLOB_SIGMA_PX) as isize;
    let inv = 1.0 / (2.0 * BLOB_SIGMA_PX * BLOB_SIGMA_PX);
    let mut frame_acc = vec![0.0f64; height * width * 3];
    for t in 0..poses.frames() {
        frame_acc.iter_mut().for_each(|v| *v = 0.0);
        for (j, colour) in palette.iter().enumerate() {
            let [x, y, _] = poses.joint(t, j);
            if !(-1.0..=1.0).contains(&x) || !(-1.0..=1.0).contains(&y) {
                clamped += 1;
            }
            let (row, col) = project_to_pixels(x.clamp(-1.0, 1.0), y.clamp(-1.0, 1.0), height, width);
            let (r0, c0) = (libm::floor(row) as isize, libm::floor(col) as isize);
            for r in (r0 - reach).max(0)..(r0 + reach + 1).min(height as isize) {
                let dr = r as f64 + 0.5 - row;
                for c in (c0 - reach).max(0)..(c0 + reach + 1).min(width as isize) {
                    let dc = c as f64 + 0.5 - col;
                    let g = libm::exp(-(dr * dr + dc * dc) * inv);
                    let o = (r as usize * width + c as usize) * 3;
                    for ch in 0..3 {
                        frame_acc[o + ch] += g * colour[ch] as f64;
                    }
                }
            }
        }
        let base = t * height * width * 3;
        for (dst, &v) in video.data[base..base + height * width * 3].iter_mut().zip(&frame_acc) {
            *dst = v.clamp(0.0, 1.0) as f32;
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} joint positions outside the world box were clamped");
    }
    (video, clamped)
}

/// Frame indices `round(k (T−1) / (t_p−1))` (ties to even), the middle frame
/// for `t_p = 1`, and every frame followed by repeats of the last when `T < t_p`.
pub fn sample_indices(frames: usize, t_p: usize) -> Result<Vec<usize>> {
    if frames == 0 || t_p == 0 {
        return Err(Error::Data(format!("cannot sample {t_p} frames from a sequence of {frames}")));
    }
    if frames < t_p {
        return Ok((0..t_p).map(|k| k.min(frames - 1)).collect());
    }
    if t_p == 1 {
        return Ok(vec![(frames - 1) / 2]);
    }
    let den = t_p - 1;
    Ok((0..t_p)
        .map(|k| {
            let num = k * (frames - 1);
            let (q, r) = (num / den, num % den);
            match (2 * r).cmp(&den) {
                core::cmp::Ordering::Greater => q + 1,
                core::cmp::Ordering::Equal => q + q % 2,
                core::cmp::Ordering::Less => q,
            }
        })
        .collect())
}

pub fn uniform_sample_poses(sequence: &PoseSequence, t_p: usize) -> Result<PoseSequence> {
    Ok(sequence.select(&sample_indices(sequence.frames(), t_p)?))
}

/// Default temporal pose length per benchmark family.
pub fn dataset_t_p(family: &str) -> Option<usize> {
    match family {
        "ntu60" | "ntu120" => Some(20),
        "smarthome" => Some(30),
        "nucla" => Some(5),
        _ => None,
    }
}

fn centred_unit(points: &[f64], j: usize) -> Option<Vec<f64>> {
    let mut p = points.to_vec();
    for d in 0..3 {
        let mean = p[d * j..(d + 1) * j].iter().sum::<f64>() / j as f64;
        p[d * j..(d + 1) * j].iter_mut().for_each(|v| *v -= mean);
    }
    let norm = libm::sqrt(p.iter().map(|v| v * v).sum::<f64>());
    if !(norm > 1e-12) {
        return None;
    }
    p.iter_mut().for_each(|v| *v /= norm);
    Some(p)
}

/// Eigen-decomposition of a symmetric 4×4 matrix by cyclic Jacobi rotations;
/// eigenvector `k` is column `k` of the returned matrix.
fn symmetric_eigen(mut a: [[f64; 4]; 4]) -> ([f64; 4], [[f64; 4]; 4]) {
    let mut v = [[0.0; 4]; 4];
    (0..4).for_each(|i| v[i][i] = 1.0);
    for _ in 0..100 {
        let off: f64 = (0..4).flat_map(|i| (0..4).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-32 {
            break;
        }
        for p in 0..3 {
            for q in p + 1..4 {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 { 1.0 } else { theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0)) };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..4 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
                for k in 0..4 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    ([a[0][0], a[1][1], a[2][2], a[3][3]], v)
}

fn quaternion_rotation([w, x, y, z]: [f64; 4]) -> [[f64; 3]; 3] {
    [
        [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (y * x + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
        [2.0 * (z * x - w * y), 2.0 * (z * y + w * x), w * w - x * x - y * y + z * z],
    ]
}

/// Procrustes distance between two `3 × J` poses (row-major by coordinate):
/// both are centred and scaled to unit Frobenius norm, `B` is optimally
/// rotated onto `A` (proper rotations, via the quaternion form), and the
/// residual Frobenius norm is returned. A degenerate pose gives 0.
pub fn procrustes_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() % 3 != 0 || a.len() < 6 {
        return Err(Error::Data(format!("procrustes needs two 3xJ poses with J >= 2 ({} vs {} values)", a.len(), b.len())));
    }
    let j = a.len() / 3;
    let (Some(x), Some(y)) = (centred_unit(a, j), centred_unit(b, j)) else {
        log::warn!("degenerate pose in procrustes_distance");
        return Ok(0.0);
    };
    // S[r][c] = Σ_k y_r[k] x_c[k]; the top eigenvector of N is the rotation taking y onto x.
    let mut s = [[0.0; 3]; 3];
    for (r, row) in s.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..j).map(|k| y[r * j + k] * x[c * j + k]).sum();
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    let n = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let (values, vectors) = symmetric_eigen(n);
    let top = (0..4).fold(0, |best, k| if values[k] > values[best] { k } else { best });
    let q = [vectors[0][top], vectors[1][top], vectors[2][top], vectors[3][top]];
    let norm = libm::sqrt(q.iter().map(|v| v * v).sum::<f64>());
    let r = quaternion_rotation(q.map(|v| v / norm));
    let mut residual = 0.0;
    for k in 0..j {
        for d in 0..3 {
            let rotated: f64 = (0..3).map(|e| r[d][e] * y[e * j + k]).sum();
            let diff = x[d * j + k] - rotated;
            residual += diff * diff;
        }
    }
    Ok(libm::sqrt(residual))
}

/// Mean Procrustes distance between consecutive frames (0 for one frame).
pub fn dynamicity(sequence: &PoseSequence) -> Result<f64> {
    let t = sequence.frames();
    if t < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for f in 1..t {
        total += procrustes_distance(&sequence.frame_matrix(f - 1), &sequence.frame_matrix(f))?;
    }
    Ok(total / (t - 1) as f64)
}

/// Parameters of the synthetic action task.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SyntheticTaskSpec {
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Per-joint jitter std (world units); also scales the per-sample
    /// displacement (uniform in `±4σ_n`) and speed variation.
    pub noise: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Index of the first generated sample; splits use disjoint ranges.
    pub first_index: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            frames: 16,
            height: 56,
            width: 56,
            noise: 0.03,
            samples_per_class: 10,
            seed: 0,
            first_index: 0,
        }
    }
}

/// Class names of the synthetic task, by label.
pub const CLASS_NAMES: [&str; 8] = [
    "raise_hands",
    "lower_hands",
    "wave_right",
    "wave_right_nod",
    "crouch",
    "step_right",
    "kick",
    "clap",
];

/// Labels of the pair whose pose sets coincide frame by frame in reversed order.
pub const REVERSED_PAIR: (usize, usize) = (0, 1);
/// Labels of the pair that differ only in one joint's motion.
pub const FINE_GRAINED_PAIR: (usize, usize) = (2, 3);

pub const SYNTHETIC_JOINTS: usize = 8;

pub fn synthetic_topology() -> SkeletonTopology {
    SkeletonTopology::body8()
}

const REST: [[f64; 3]; 8] = [
    [0.0, -0.1, 0.0],
    [0.0, 0.3, 0.0],
    [0.0, 0.5, 0.0],
    [-0.2, 0.15, 0.02],
    [-0.3, -0.05, 0.05],
    [0.2, 0.15, 0.02],
    [0.3, -0.05, 0.05],
    [0.0, -0.6, 0.0],
];

fn smooth(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

/// Noise-free body8 pose of class `label` at phase `u ∈ [0, 1]`.
pub fn class_template(label: usize, u: f64) -> Result<[[f64; 3]; 8]> {
    let mut p = REST;
    match label {
        0 | 1 => {
            let s = smooth(if label == 0 { u } else { 1.0 - u });
            for (elbow, hand) in [(3, 4), (5, 6)] {
                p[elbow][1] = 0.15 + 0.25 * s;
                p[hand][1] = -0.05 + 0.65 * s;
                p[hand][0] *= 1.0 - 0.3 * s;
            }
        }
        2 | 3 => {
            p[5] = [0.25, 0.35, 0.02];
            p[6] = [0.3 + 0.15 * libm::sin(4.0 * PI * u), 0.55, 0.05];
            if label == 3 {
                p[2][1] = 0.5 + 0.08 * libm::sin(4.0 * PI * u);
            }
        }
        4 => {
            let d = 0.3 * libm::sin(PI * u);
            for joint in p.iter_mut().take(7) {
                joint[1] -= d;
            }
        }
        5 => {
            let d = 0.3 * smooth(u);
            for joint in p.iter_mut() {
                joint[0] += d;
            }
        }
        6 => {
            let k = libm::sin(PI * u);
            p[7] = [0.3 * k, -0.6 + 0.25 * k, 0.1 * k];
        }
        7 => {
            let open = libm::fabs(libm::cos(2.0 * PI * u));
            for (elbow, hand, sign) in [(3, 4, -1.0), (5, 6, 1.0)] {
                p[elbow] = [sign * (0.1 + 0.1 * open), 0.25, 0.1];
                p[hand] = [sign * (0.03 + 0.25 * open), 0.25, 0.25];
            }
        }
        _ => return Err(Error::Data(format!("unknown synthetic class {label}"))),
    }
    Ok(p)
}

/// Per-sample variation drawn from the sample's own stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleVariation {
    pub offset: [f64; 2],
    /// Time-warp exponent; 1 is uniform speed.
    pub warp: f64,
}

impl SampleVariation {
    pub const NONE: SampleVariation = SampleVariation { offset: [0.0, 0.0], warp: 1.0 };
}

/// Noise-free trajectory of `label` under `variation`.
pub fn class_trajectory(label: usize, frames: usize, variation: SampleVariation) -> Result<PoseSequence> {
    let mut coords = Vec::with_capacity(frames * SYNTHETIC_JOINTS * 3);
    let phase = |t: usize| if frames == 1 { 0.5 } else { libm::pow(t as f64 / (frames - 1) as f64, variation.warp) };
    for t in 0..frames {
        // The reversed class replays the other one's clock backwards, so the
        // two share every frame exactly.
        let pose = if label == 1 { class_template(0, phase(frames - 1 - t))? } else { class_template(label, phase(t))? };
        for joint in pose {
            coords.extend_from_slice(&[joint[0] + variation.offset[0], joint[1] + variation.offset[1], joint[2]]);
        }
    }
    PoseSequence::new(SYNTHETIC_JOINTS, coords)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
}

/// Sample `index` of the task: label `index mod classes`, drawn from the
/// stream `(seed, first_index + index)`.
pub fn generate_sample(spec: &SyntheticTaskSpec, index: u64) -> Result<SampleRecord> {
    let label = (index % spec.classes as u64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(spec.first_index + index);
    let s = spec.noise;
    let variation = SampleVariation {
        offset: [rng.gen_range(-1.0..=1.0) * 4.0 * s, rng.gen_range(-1.0..=1.0) * 2.0 * s],
        warp: libm::exp(rng.gen_range(-1.0..=1.0) * 4.0 * s),
    };
    let clean = class_trajectory(label, spec.frames, variation)?;
    let coords = clean.coords().iter().map(|&v| v + s * gaussian(&mut rng)).collect();
    let poses = PoseSequence::new(SYNTHETIC_JOINTS, coords)?;
    let (video, _) = render_video(&poses, spec.height, spec.width);
    Ok(SampleRecord { id: format!("s{:06}", spec.first_index + index), label, video, poses })
}

pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Vec<SampleRecord>> {
    if spec.classes == 0 || spec.classes > CLASS_NAMES.len() {
        return Err(Error::Data(format!("synthetic task supports 1..={} classes, got {}", CLASS_NAMES.len(), spec.classes)));
    }
    if spec.frames == 0 || spec.height == 0 || spec.width == 0 || !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(Error::Data("synthetic task needs positive extents and a finite noise >= 0".into()));
    }
    let total = (spec.classes * spec.samples_per_class) as u64;
    (0..total).map(|i| generate_sample(spec, i)).collect()
}

/// Model inputs for a list of samples: video `[B, T, H, W, 3]`, poses
/// `[B, 3, J, t_p]` after uniform temporal sampling, and labels.
pub fn make_batch(samples: &[&SampleRecord], t_p: usize) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let [t, h, w, c] = first.video.shape();
    let j = first.poses.joints();
    let mut video = Vec::with_capacity(samples.len() * t * h * w * c);
    let mut poses = Vec::with_capacity(samples.len() * 3 * j * t_p);
    for s in samples {
        if s.video.shape() != [t, h, w, c] || s.poses.joints() != j {
            return Err(Error::Data(format!("sample {} does not match the batch geometry", s.id)));
        }
        if s.poses.frames() != s.video.frames {
            return Err(Error::Data(format!(
                "sample {}: {} pose frames for {} video frames",
                s.id,
                s.poses.frames(),
                s.video.frames
            )));
        }
        video.extend(s.video.data.iter().map(|&v| v as f64));
        let sampled = uniform_sample_poses(&s.poses, t_p)?;
        for d in 0..3 {
            for joint in 0..j {
                for f in 0..t_p {
                    poses.push(sampled.joint(f, joint)[d]);
                }
            }
        }
    }
    let labels = samples.iter().map(|s| s.label).collect();
    Ok((Tensor::new(&[samples.len(), t, h, w, c], video)?, Tensor::new(&[samples.len(), 3, j, t_p], poses)?, labels))
}
