//! Skeleton graph, per-frame graph convolution and the pose backbones that
//! turn a pose sequence into the feature vector `h*`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::diff::{BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Training uses batch statistics and dropout; evaluation uses running
/// statistics and no dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Joint count plus the undirected bone list.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SkeletonTopology {
    joints: usize,
    bones: Vec<(usize, usize)>,
}

impl SkeletonTopology {
    /// Bones are stored with `i < j`, deduplicated. A disconnected graph is
    /// accepted with a warning.
    pub fn new(joints: usize, bones: &[(usize, usize)]) -> Result<Self> {
        if joints == 0 {
            return Err(Error::Data("skeleton needs at least one joint".into()));
        }
        let mut list = Vec::with_capacity(bones.len());
        for &(a, b) in bones {
            if a == b {
                return Err(Error::Data(format!("bone ({a}, {b}) joins a joint to itself")));
            }
            if a >= joints || b >= joints {
                return Err(Error::Data(format!("bone ({a}, {b}) out of range for {joints} joints")));
            }
            let pair = (a.min(b), a.max(b));
            if !list.contains(&pair) {
                list.push(pair);
            }
        }
        let topo = Self { joints, bones: list };
        if !topo.is_connected() {
            log::warn!("skeleton with {joints} joints is not connected");
        }
        Ok(topo)
    }

    /// Eight-joint body used by the synthetic task:
    /// pelvis, neck, head, left elbow, left hand, right elbow, right hand, feet.
    pub fn body8() -> Self {
        Self::new(8, &[(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (0, 7)]).expect("valid skeleton")
    }

    /// Simple path 0-1-…-(n-1).
    pub fn chain(joints: usize) -> Result<Self> {
        let bones: Vec<_> = (1..joints).map(|j| (j - 1, j)).collect();
        Self::new(joints, &bones)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn connected(&self, i: usize, j: usize) -> bool {
        self.bones.contains(&(i.min(j), i.max(j)))
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.joints];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(a, b) in &self.bones {
                let next = if a == v { b } else if b == v { a } else { continue };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// `E[i][j]` is 0 on the diagonal, `alpha` for bone pairs and `beta` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedAdjacency {
    pub e: Tensor,
    pub alpha: f64,
    pub beta: f64,
}

pub fn build_adjacency(topology: &SkeletonTopology, alpha: f64, beta: f64) -> Result<WeightedAdjacency> {
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Config(format!("adjacency weights must be finite, got {alpha}, {beta}")));
    }
    let j = topology.joints();
    let e = Tensor::from_fn(&[j, j], |k| {
        let (r, c) = (k / j, k % j);
        if r == c {
            0.0
        } else if topology.connected(r, c) {
            alpha
        } else {
            beta
        }
    })?;
    Ok(WeightedAdjacency { e, alpha, beta })
}

/// `D^{-1/2} (E + I) D^{-1/2}` with `D_ii = sum_j (E_ij + I_ij)`.
pub fn normalize_adjacency(adj: &WeightedAdjacency) -> Result<Tensor> {
    let j = adj.e.shape()[0];
    let e = adj.e.data();
    let mut inv_sqrt = Vec::with_capacity(j);
    for r in 0..j {
        let deg: f64 = (0..j).map(|c| e[r * j + c] + if r == c { 1.0 } else { 0.0 }).sum();
        if !(deg > 0.0) {
            return Err(Error::Data(format!("joint {r} has non-positive degree {deg}")));
        }
        inv_sqrt.push(1.0 / libm::sqrt(deg));
    }
    Tensor::from_fn(&[j, j], |k| {
        let (r, c) = (k / j, k % j);
        let w = e[k] + if r == c { 1.0 } else { 0.0 };
        inv_sqrt[r] * w * inv_sqrt[c]
    })
}

/// One frame of graph convolution: `Â · P_tᵀ · W_t`.
///
/// `frame` is `3×J` (coordinate-major, as stored in a pose sequence); its
/// transpose is the `J×3` joint-feature matrix.
pub fn gcn_frame(tape: &mut Tape, frame: Var, a_hat: Var, w: Var) -> Result<Var> {
    let g = tape.transpose(frame)?;
    let ag = tape.matmul(a_hat, g)?;
    tape.matmul(ag, w)
}

/// Which network encodes the pose sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PoseBackboneKind {
    Gcn,
    Recurrent,
}

/// Geometry of the pose backbones.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseBackboneShape {
    pub joints: usize,
    pub frames: usize,
    pub gcn_width: usize,
    pub conv_channels: [usize; 3],
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
}

impl PoseBackboneShape {
    /// Width of `h*` for the given backbone.
    pub fn feature_width(&self, kind: PoseBackboneKind) -> usize {
        match kind {
            PoseBackboneKind::Gcn => self.joints * self.frames * self.conv_channels[2],
            PoseBackboneKind::Recurrent => self.frames * self.lstm_hidden,
        }
    }
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

pub fn init_gcn_params(store: &mut ParamStore, shape: &PoseBackboneShape, seed: u64) {
    let d = shape.gcn_width;
    for t in 0..shape.frames {
        store.insert_glorot(&format!("pose.gcn.w{t}"), &[3, d], 3, d, seed);
    }
    store.insert_glorot("pose.residual.w", &[3, d], 3, d, seed);
    let mut c_in = d;
    for (l, &c_out) in shape.conv_channels.iter().enumerate() {
        store.insert_glorot(&format!("pose.conv{l}.k"), &[3, 3, c_in, c_out], 9 * c_in, 9 * c_out, seed);
        init_batch_norm(store, &format!("pose.bn{l}"), c_out);
        c_in = c_out;
    }
}

pub fn init_lstm_params(store: &mut ParamStore, shape: &PoseBackboneShape, seed: u64) {
    let h = shape.lstm_hidden;
    let mut input = 3 * shape.joints;
    for l in 0..shape.lstm_layers {
        for gate in GATES {
            store.insert_glorot(&format!("pose.lstm{l}.{gate}.wx"), &[input, h], input, h, seed);
            store.insert_glorot(&format!("pose.lstm{l}.{gate}.wh"), &[h, h], h, h, seed);
            store.insert_zeros(&format!("pose.lstm{l}.{gate}.b"), &[h]);
        }
        input = h;
    }
}

fn check_poses(poses: &Tensor, shape: &PoseBackboneShape) -> Result<(usize, usize, usize)> {
    let s = poses.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != shape.joints || s[3] != shape.frames {
        return Err(Error::shape(
            "pose_backbone",
            format!("poses {s:?}, expected [batch, 3, {}, {}]", shape.joints, shape.frames),
        ));
    }
    Ok((s[0], s[2], s[3]))
}

/// `{prefix}.gamma`, `{prefix}.beta` and the untrainable running statistics.
pub fn init_batch_norm(store: &mut ParamStore, prefix: &str, channels: usize) {
    store.insert(&format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0), true);
    store.insert_zeros(&format!("{prefix}.beta"), &[channels]);
    store.insert(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false);
    store.insert(&format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0), false);
}

/// Running-statistics update for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    /// Parameter prefix, e.g. `pose.bn0`.
    pub layer: String,
    pub stats: BatchStats,
}

/// Per-channel (last axis) batch norm with affine parameters under `prefix`.
/// Training normalizes with batch statistics and reports them; evaluation
/// uses the running statistics.
pub fn batch_norm_layer(
    tape: &mut Tape,
    params: &Bound,
    store: &ParamStore,
    x: Var,
    prefix: &str,
    mode: Mode,
) -> Result<(Var, Option<BnUpdate>)> {
    let rank = tape.value(x).shape().len();
    let outer: Vec<usize> = (0..rank.saturating_sub(1)).collect();
    let (x, update) = match mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm(x, BN_EPS)?;
            (y, Some(BnUpdate { layer: prefix.to_string(), stats }))
        }
        Mode::Eval => {
            let mean = store.get(&format!("{prefix}.running_mean"))?;
            let var = store.get(&format!("{prefix}.running_var"))?;
            let shift = tape.constant(mean.map(|m| -m)?);
            let inv = tape.constant(var.map(|v| 1.0 / libm::sqrt(v + BN_EPS))?);
            let centred = tape.broadcast_add(x, shift, &outer)?;
            (tape.broadcast_mul(centred, inv, &outer)?, None)
        }
    };
    let x = tape.broadcast_mul(x, params.var(&format!("{prefix}.gamma"))?, &outer)?;
    let x = tape.broadcast_add(x, params.var(&format!("{prefix}.beta"))?, &outer)?;
    Ok((x, update))
}

/// Applies `running = m * running + (1 - m) * batch` for every recorded layer.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        for (suffix, batch) in [("running_mean", &u.stats.mean), ("running_var", &u.stats.var)] {
            let name = format!("{}.{suffix}", u.layer);
            let cur = store.get(&name)?;
            let next = cur
                .data()
                .iter()
                .zip(batch)
                .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b)
                .collect();
            store.set(&name, Tensor::new(cur.shape(), next)?)?;
        }
    }
    Ok(())
}

/// `Â · G_t` for every sample and frame, laid out as `[frames][batch * J, 3]`.
fn propagate(a_hat: &Tensor, poses: &Tensor) -> Result<Vec<Tensor>> {
    let (b, j, t) = (poses.shape()[0], poses.shape()[2], poses.shape()[3]);
    let a = a_hat.data();
    let p = poses.data();
    let at = |s: usize, d: usize, k: usize, f: usize| p[((s * 3 + d) * j + k) * t + f];
    (0..t)
        .map(|f| {
            Tensor::from_fn(&[b * j, 3], |idx| {
                let (row, d) = (idx / 3, idx % 3);
                let (s, r) = (row / j, row % j);
                (0..j).map(|k| a[r * j + k] * at(s, d, k, f)).sum()
            })
        })
        .collect()
}

/// GCN pose backbone: per-frame graph convolution with distinct weights,
/// stacked over time, plus a projected residual of the raw joints, then three
/// conv → batch-norm → ReLU layers over the (joint × time) plane.
///
/// `poses` is `[batch, 3, J, t_p]`; returns `h*` as `[batch, J·t_p·C3]`.
pub fn gcn_backbone_forward(
    tape: &mut Tape,
    params: &Bound,
    store: &ParamStore,
    a_hat: &Tensor,
    poses: &Tensor,
    shape: &PoseBackboneShape,
    mode: Mode,
) -> Result<(Var, Vec<BnUpdate>)> {
    let (b, j, t) = check_poses(poses, shape)?;
    let d = shape.gcn_width;
    let mut frames = Vec::with_capacity(t);
    for (f, x) in propagate(a_hat, poses)?.into_iter().enumerate() {
        let x = tape.constant(x);
        let y = tape.matmul(x, params.var(&format!("pose.gcn.w{f}"))?)?;
        frames.push(tape.reshape(y, &[b, j, 1, d])?);
    }
    let stacked = tape.concat(&frames, 2)?;

    // raw joints as [batch, J, t_p, 3]
    let p = poses.data();
    let raw = Tensor::from_fn(&[b * j * t, 3], |idx| {
        let (row, dd) = (idx / 3, idx % 3);
        let (s, rest) = (row / (j * t), row % (j * t));
        let (k, f) = (rest / t, rest % t);
        p[((s * 3 + dd) * j + k) * t + f]
    })?;
    let raw = tape.constant(raw);
    let residual = tape.matmul(raw, params.var("pose.residual.w")?)?;
    let residual = tape.reshape(residual, &[b, j, t, d])?;
    let mut x = tape.add(stacked, residual)?;

    let mut updates = Vec::new();
    for (l, &c) in shape.conv_channels.iter().enumerate() {
        x = tape.conv2d(x, params.var(&format!("pose.conv{l}.k"))?)?;
        let (y, update) = batch_norm_layer(tape, params, store, x, &format!("pose.bn{l}"), mode)?;
        updates.extend(update);
        x = tape.relu(y)?;
        debug_assert_eq!(tape.value(x).shape()[3], c);
    }
    let h = tape.reshape(x, &[b, shape.feature_width(PoseBackboneKind::Gcn)])?;
    Ok((h, updates))
}

/// Stacked LSTM over the flattened per-frame joint vectors; `h*` is the
/// concatenation of the top layer's outputs over time, `[batch, t_p·H]`.
pub fn recurrent_backbone_forward(tape: &mut Tape, params: &Bound, poses: &Tensor, shape: &PoseBackboneShape) -> Result<Var> {
    let (b, j, t) = check_poses(poses, shape)?;
    let h = shape.lstm_hidden;
    let p = poses.data();
    let mut inputs: Vec<Var> = (0..t)
        .map(|f| {
            let x = Tensor::from_fn(&[b, 3 * j], |idx| {
                let (s, k) = (idx / (3 * j), idx % (3 * j));
                p[(s * 3 * j + k) * t + f]
            })?;
            Ok(tape.constant(x))
        })
        .collect::<Result<_>>()?;

    for l in 0..shape.lstm_layers {
        let w = |gate: &str, part: &str| params.var(&format!("pose.lstm{l}.{gate}.{part}"));
        let mut hidden = tape.constant(Tensor::zeros(&[b, h]));
        let mut cell = tape.constant(Tensor::zeros(&[b, h]));
        let mut outputs = Vec::with_capacity(t);
        for &x in &inputs {
            let mut gates = [hidden; 4];
            for (slot, gate) in gates.iter_mut().zip(GATES) {
                let a = tape.matmul(x, w(gate, "wx")?)?;
                let r = tape.matmul(hidden, w(gate, "wh")?)?;
                let s = tape.add(a, r)?;
                let s = tape.broadcast_add(s, w(gate, "b")?, &[0])?;
                *slot = if gate == "g" { tape.tanh(s)? } else { tape.sigmoid(s)? };
            }
            let [i, f, g, o] = gates;
            let keep = tape.mul(f, cell)?;
            let write = tape.mul(i, g)?;
            cell = tape.add(keep, write)?;
            let squashed = tape.tanh(cell)?;
            hidden = tape.mul(o, squashed)?;
            outputs.push(hidden);
        }
        inputs = outputs;
    }
    tape.concat(&inputs, 1)
}
