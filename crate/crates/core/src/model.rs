//! Full network: visual backbone stub, pose branch with attention and
//! embedding, classifier, the training objective and fully-convolutional
//! inference.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_weights, couple, dissociated_modulate, init_attention_params, latent_vectors, modulate, resize_bilinear,
    AttentionShape, AttentionWeights, LatentVectors,
};
use crate::diff::{finite_difference_check, FdReport, Tape, Tensor, Var};
use crate::embedding::{embedding_loss, init_embedding_params, project_bound, spatial_pool, EmbeddedPair, EmbeddingLossKind};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::posegraph::{
    batch_norm_layer, build_adjacency, gcn_backbone_forward, init_batch_norm, init_gcn_params, init_lstm_params, normalize_adjacency,
    recurrent_backbone_forward, BnUpdate, Mode, PoseBackboneKind, PoseBackboneShape, SkeletonTopology,
};

/// Floor applied to the true-class probability before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub joints: usize,
    pub bones: Vec<(usize, usize)>,
    pub t_p: usize,
    pub t_c: usize,
    pub m: usize,
    pub n: usize,
    /// Channels of the visual feature map.
    pub c: usize,
    pub d_g: usize,
    pub d_a: usize,
    pub d_e: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub dropout_rate: f64,
    pub pose_backbone_kind: PoseBackboneKind,
    /// Off gives the visual backbone alone (no pose branch at all).
    pub attention_enabled: bool,
    pub coupler_enabled: bool,
    pub embedding_enabled: bool,
    pub embedding_loss_kind: EmbeddingLossKind,
    pub pose_conv_channels: [usize; 3],
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Training clip extent `T × H × W` (3 colour channels).
    pub video_frames: usize,
    pub video_height: usize,
    pub video_width: usize,
    /// Channels of the first visual conv layer.
    pub visual_hidden: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 8,
            bones: SkeletonTopology::body8().bones().to_vec(),
            t_p: 8,
            t_c: 4,
            m: 7,
            n: 7,
            c: 32,
            d_g: 64,
            d_a: 128,
            d_e: 256,
            alpha: 5.0,
            beta: 2.0,
            lambda1: 0.8,
            lambda2: 1e-5,
            dropout_rate: 0.3,
            pose_backbone_kind: PoseBackboneKind::Gcn,
            attention_enabled: true,
            coupler_enabled: true,
            embedding_enabled: true,
            embedding_loss_kind: EmbeddingLossKind::Ne,
            pose_conv_channels: [64, 64, 128],
            lstm_hidden: 64,
            lstm_layers: 3,
            video_frames: 16,
            video_height: 56,
            video_width: 56,
            visual_hidden: 16,
            classes: 8,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration used for end-to-end gradient checks.
    pub fn gradcheck_toy() -> Self {
        Self {
            joints: 4,
            bones: vec![(0, 1), (1, 2), (1, 3)],
            t_p: 3,
            t_c: 2,
            m: 2,
            n: 2,
            c: 3,
            d_g: 4,
            d_a: 4,
            d_e: 4,
            pose_conv_channels: [3, 3, 4],
            lstm_hidden: 3,
            lstm_layers: 2,
            video_frames: 4,
            video_height: 4,
            video_width: 4,
            visual_hidden: 3,
            classes: 3,
            ..Self::default()
        }
    }

    pub fn topology(&self) -> Result<SkeletonTopology> {
        SkeletonTopology::new(self.joints, &self.bones)
    }

    pub fn pose_shape(&self) -> PoseBackboneShape {
        PoseBackboneShape {
            joints: self.joints,
            frames: self.t_p,
            gcn_width: self.d_g,
            conv_channels: self.pose_conv_channels,
            lstm_hidden: self.lstm_hidden,
            lstm_layers: self.lstm_layers,
        }
    }

    pub fn attention_shape(&self) -> AttentionShape {
        AttentionShape {
            feature_width: self.pose_shape().feature_width(self.pose_backbone_kind),
            latent_width: self.d_a,
            t_c: self.t_c,
            m: self.m,
            n: self.n,
        }
    }

    /// Non-overlapping average-pooling window that brings the clip to twice
    /// the feature-map extent before the two conv layers.
    pub fn stem_window(&self) -> [usize; 3] {
        [self.video_frames / (2 * self.t_c), self.video_height / (2 * self.m), self.video_width / (2 * self.n)]
    }

    /// Channels entering the classifier.
    pub fn classifier_width(&self) -> usize {
        if self.attention_enabled && !self.coupler_enabled {
            2 * self.c
        } else {
            self.c
        }
    }

    /// Weight of the classification term; the embedding term gets `1 − λ1`.
    pub fn effective_lambda1(&self) -> f64 {
        if self.embedding_enabled {
            self.lambda1
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let extents = [
            ("joints", self.joints),
            ("t_p", self.t_p),
            ("t_c", self.t_c),
            ("m", self.m),
            ("n", self.n),
            ("c", self.c),
            ("d_g", self.d_g),
            ("d_a", self.d_a),
            ("d_e", self.d_e),
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("visual_hidden", self.visual_hidden),
            ("classes", self.classes),
        ];
        for (name, v) in extents {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.pose_conv_channels.contains(&0) {
            return bad("pose_conv_channels must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda1) {
            return bad(format!("lambda1 = {} must lie in [0, 1]", self.lambda1));
        }
        if !(self.lambda2 >= 0.0) || !self.lambda2.is_finite() {
            return bad(format!("lambda2 = {} must be >= 0", self.lambda2));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate = {} must lie in [0, 1)", self.dropout_rate));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be finite and >= 0".into());
        }
        if self.embedding_enabled && !self.attention_enabled {
            return bad("the embedding needs the attention branch (attention_enabled = true)".into());
        }
        let fits = |total: usize, out: usize| total > 0 && total % (2 * out) == 0;
        if !fits(self.video_frames, self.t_c) || !fits(self.video_height, self.m) || !fits(self.video_width, self.n) {
            return bad(format!(
                "video {}x{}x{} is not an even multiple of the feature map {}x{}x{}",
                self.video_frames, self.video_height, self.video_width, self.t_c, self.m, self.n
            ));
        }
        self.topology().map(|_| ()).map_err(|e| Error::Config(format!("{e}")))
    }
}

/// Configuration, parameters and the derived graph operator.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    a_hat: Tensor,
}

impl Model {
    /// Glorot-initialized model. Every parameter group is created whatever the
    /// ablation switches, so switching a branch off never perturbs the others.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let cfg = &config;
        let [k1, k2] = [cfg.visual_hidden, cfg.c];
        store_conv3d(&mut params, 0, 3, k1, seed);
        store_conv3d(&mut params, 1, k1, k2, seed);
        let pose = cfg.pose_shape();
        match cfg.pose_backbone_kind {
            PoseBackboneKind::Gcn => init_gcn_params(&mut params, &pose, seed),
            PoseBackboneKind::Recurrent => init_lstm_params(&mut params, &pose, seed),
        }
        init_attention_params(&mut params, &cfg.attention_shape(), seed);
        init_embedding_params(&mut params, cfg.m * cfg.n * cfg.c, cfg.m * cfg.n, cfg.d_e, seed)?;
        let width = cfg.classifier_width();
        params.insert_glorot("cls.w", &[width, cfg.classes], width, cfg.classes, seed);
        params.insert_zeros("cls.b", &[cfg.classes]);
        Self::from_parts(config, params)
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh initialization.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let a_hat = normalize_adjacency(&build_adjacency(&config.topology()?, config.alpha, config.beta)?)?;
        Ok(Self { config, params, a_hat })
    }

    pub fn check_params_against(&self, reference: &ParamStore) -> Result<()> {
        if reference.len() != self.params.len() {
            return Err(Error::Config(format!(
                "parameter count {} does not match the configuration ({})",
                self.params.len(),
                reference.len()
            )));
        }
        for e in reference.entries() {
            let got = self.params.get(&e.name)?;
            if got.shape() != e.value.shape() {
                return Err(Error::shape("checkpoint", format!("{}: {:?} vs {:?}", e.name, got.shape(), e.value.shape())));
            }
        }
        Ok(())
    }

    pub fn a_hat(&self) -> &Tensor {
        &self.a_hat
    }
}

fn store_conv3d(store: &mut ParamStore, layer: usize, c_in: usize, c_out: usize, seed: u64) {
    store.insert_glorot(&format!("visual.conv{layer}.k"), &[3, 3, 3, c_in, c_out], 27 * c_in, 27 * c_out, seed);
    init_batch_norm(store, &format!("visual.bn{layer}"), c_out);
}

fn check_video(video: &Tensor, cfg: &ModelConfig, exact: bool) -> Result<()> {
    let s = video.shape();
    let [wt, wh, ww] = cfg.stem_window();
    let ok = s.len() == 5
        && s[4] == 3
        && if exact {
            s[1..4] == [cfg.video_frames, cfg.video_height, cfg.video_width]
        } else {
            s[1] == cfg.video_frames
                && s[2] >= cfg.video_height
                && s[3] >= cfg.video_width
                && s[2] % (2 * wh) == 0
                && s[3] % (2 * ww) == 0
                && wt > 0
        };
    if !ok {
        return Err(Error::shape(
            "visual_backbone",
            format!(
                "video {s:?} vs training extent [batch, {}, {}, {}, 3]",
                cfg.video_frames, cfg.video_height, cfg.video_width
            ),
        ));
    }
    Ok(())
}

fn conv3d_bn_relu(
    tape: &mut Tape,
    params: &Bound,
    store: &ParamStore,
    x: Var,
    layer: usize,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let y = tape.conv3d(x, params.var(&format!("visual.conv{layer}.k"))?)?;
    let (y, update) = batch_norm_layer(tape, params, store, y, &format!("visual.bn{layer}"), mode)?;
    updates.extend(update);
    tape.relu(y)
}

/// Stub 3D backbone: fixed average-pooling stem, 3×3×3 conv → batch norm →
/// ReLU, 2×2×2 average pooling, 3×3×3 conv → batch norm → ReLU.
/// `[B, T, H, W, 3]` → `[B, t_c, m, n, c]` at the training extent (larger
/// frames give a proportionally larger map).
pub fn visual_backbone_forward(
    tape: &mut Tape,
    params: &Bound,
    store: &ParamStore,
    video: &Tensor,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(Var, Vec<BnUpdate>)> {
    check_video(video, cfg, false)?;
    let mut updates = Vec::new();
    let x = tape.constant(video.clone());
    let x = tape.avg_pool3d(x, cfg.stem_window())?;
    let x = conv3d_bn_relu(tape, params, store, x, 0, mode, &mut updates)?;
    let x = tape.avg_pool3d(x, [2, 2, 2])?;
    let f = conv3d_bn_relu(tape, params, store, x, 1, mode, &mut updates)?;
    Ok((f, updates))
}

/// Pose branch up to the attention weights.
#[derive(Clone, Debug)]
pub struct PoseAttention {
    pub h: Var,
    pub latent: LatentVectors,
    pub weights: AttentionWeights,
    pub bn_updates: Vec<BnUpdate>,
}

pub fn pose_attention(tape: &mut Tape, model: &Model, params: &Bound, poses: &Tensor, mode: Mode) -> Result<PoseAttention> {
    let cfg = &model.config;
    let shape = cfg.pose_shape();
    let (h, bn_updates) = match cfg.pose_backbone_kind {
        PoseBackboneKind::Gcn => gcn_backbone_forward(tape, params, &model.params, &model.a_hat, poses, &shape, mode)?,
        PoseBackboneKind::Recurrent => (recurrent_backbone_forward(tape, params, poses, &shape)?, Vec::new()),
    };
    let latent = latent_vectors(tape, params, h)?;
    let weights = attention_weights(tape, latent, cfg.m, cfg.n)?;
    Ok(PoseAttention { h, latent, weights, bn_updates })
}

#[derive(Clone, Debug)]
pub struct VpnOutputs {
    pub pose: Option<PoseAttention>,
    /// Coupled space-time weights (absent for the dissociated baseline).
    pub coupled: Option<Var>,
    pub f_prime: Var,
    pub embedding: Option<EmbeddedPair>,
}

/// Pose-driven modulation of `f` (`[B, t_c, m, n, c]`), plus the embedding pair.
pub fn vpn_forward(tape: &mut Tape, model: &Model, params: &Bound, f: Var, poses: &Tensor, mode: Mode) -> Result<VpnOutputs> {
    let cfg = &model.config;
    let expect = [cfg.t_c, cfg.m, cfg.n, cfg.c];
    let fs = tape.value(f).shape();
    if fs.len() != 5 || fs[1..] != expect || poses.shape().first() != fs.first() {
        return Err(Error::shape("vpn_forward", format!("f {fs:?}, poses {:?}", poses.shape())));
    }
    if !cfg.attention_enabled {
        return Ok(VpnOutputs { pose: None, coupled: None, f_prime: f, embedding: None });
    }
    let pose = pose_attention(tape, model, params, poses, mode)?;
    let (coupled, f_prime) = if cfg.coupler_enabled {
        let st = couple(tape, pose.weights.spatial, pose.weights.temporal)?;
        (Some(st), modulate(tape, f, st)?)
    } else {
        (None, dissociated_modulate(tape, f, pose.weights.spatial, pose.weights.temporal)?)
    };
    let embedding = if cfg.embedding_enabled {
        let f_s = spatial_pool(tape, f)?;
        Some(project_bound(tape, params, f_s, pose.latent.z1)?)
    } else {
        None
    };
    Ok(VpnOutputs { pose: Some(pose), coupled, f_prime, embedding })
}

/// Global average pooling, optional dropout, affine map and softmax.
/// Returns `(logits, probs)`, each `[B, classes]`.
pub fn classify(
    tape: &mut Tape,
    params: &Bound,
    f_prime: Var,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(Var, Var)> {
    let s = tape.value(f_prime).shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape("classify", format!("{s:?}")));
    }
    let flat = tape.reshape(f_prime, &[s[0], s[1] * s[2] * s[3], s[4]])?;
    let mut pooled = tape.mean_axis(flat, 1)?;
    if let Some((rate, rng)) = dropout {
        pooled = tape.dropout(pooled, rate, rng)?;
    }
    let logits = tape.matmul(pooled, params.var("cls.w")?)?;
    let logits = tape.broadcast_add(logits, params.var("cls.b")?, &[0])?;
    let probs = tape.softmax_lastdim(logits)?;
    Ok((logits, probs))
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub f: Var,
    /// Batch statistics of the visual stub (empty in evaluation mode).
    pub visual_bn: Vec<BnUpdate>,
    pub vpn: VpnOutputs,
    pub logits: Var,
    pub probs: Var,
}

impl ForwardOutputs {
    /// Every batch-norm statistics update of this pass, visual layers first.
    pub fn bn_updates(&self) -> Vec<BnUpdate> {
        let pose = self.vpn.pose.as_ref().map_or(&[][..], |p| &p.bn_updates);
        self.visual_bn.iter().chain(pose).cloned().collect()
    }
}

/// Whole network on a batch. `dropout_rng` enables dropout (training only).
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    params: &Bound,
    video: &Tensor,
    poses: &Tensor,
    mode: Mode,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardOutputs> {
    check_video(video, &model.config, true)?;
    let (f, visual_bn) = visual_backbone_forward(tape, params, &model.params, video, &model.config, mode)?;
    let vpn = vpn_forward(tape, model, params, f, poses, mode)?;
    let dropout = dropout_rng.map(|rng| (model.config.dropout_rate, rng));
    let (logits, probs) = classify(tape, params, vpn.f_prime, dropout)?;
    Ok(ForwardOutputs { f, visual_bn, vpn, logits, probs })
}

/// Per-sample `Σ A_S + Σ (1 − A_T)²`.
pub fn attention_regularizer(tape: &mut Tape, spatial: Var, temporal: Var) -> Result<Var> {
    let s = tape.value(spatial).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("attention_regularizer", format!("{s:?}")));
    }
    let flat = tape.reshape(spatial, &[s[0], s[1] * s[2]])?;
    let spatial_term = tape.sum_axis(flat, 1)?;
    let gap = tape.scale(temporal, -1.0)?;
    let gap = tape.add_scalar(gap, 1.0)?;
    let sq = tape.mul(gap, gap)?;
    let temporal_term = tape.sum_axis(sq, 1)?;
    tape.add(spatial_term, temporal_term)
}

/// Per-sample `−ln max(p[label], 1e-12)`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.value(probs).shape().to_vec();
    if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
        return Err(Error::shape("cross_entropy", format!("probs {s:?}, labels {labels:?}")));
    }
    let one_hot = Tensor::from_fn(&s, |i| if labels[i / s[1]] == i % s[1] { 1.0 } else { 0.0 })?;
    let mask = tape.constant(one_hot);
    let picked = tape.mul(probs, mask)?;
    let picked = tape.sum_axis(picked, 1)?;
    let floored = tape.clamp_min(picked, PROB_FLOOR)?;
    let logp = tape.log(floored)?;
    tape.scale(logp, -1.0)
}

/// Batch-mean loss terms and their weighted combination.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub classification: Var,
    pub embedding: Var,
    pub attention: Var,
}

fn batch_mean(tape: &mut Tape, v: Var) -> Result<Var> {
    let b = tape.value(v).len();
    let s = tape.sum(v)?;
    tape.scale(s, 1.0 / b as f64)
}

/// `L = λ1·L_C + (1 − λ1)·L_e + λ2·L_a` on scalar terms.
pub fn total_loss(tape: &mut Tape, l_c: Var, l_e: Var, l_a: Var, lambda1: f64, lambda2: f64) -> Result<Var> {
    let wc = tape.scale(l_c, lambda1)?;
    let we = tape.scale(l_e, 1.0 - lambda1)?;
    let ce = tape.add(wc, we)?;
    let wa = tape.scale(l_a, lambda2)?;
    tape.add(ce, wa)
}

/// Absent branches contribute a constant zero term, so the arithmetic of the
/// total is the same in every configuration.
pub fn losses(tape: &mut Tape, model: &Model, out: &ForwardOutputs, labels: &[usize]) -> Result<LossTerms> {
    let cfg = &model.config;
    let ce = cross_entropy(tape, out.probs, labels)?;
    let classification = batch_mean(tape, ce)?;
    let embedding = match &out.vpn.embedding {
        Some(pair) => {
            let l = embedding_loss(tape, pair, cfg.embedding_loss_kind)?;
            batch_mean(tape, l)?
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let attention = match &out.vpn.pose {
        Some(p) => {
            let l = attention_regularizer(tape, p.weights.spatial, p.weights.temporal)?;
            batch_mean(tape, l)?
        }
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let total = total_loss(tape, classification, embedding, attention, cfg.effective_lambda1(), cfg.lambda2)?;
    Ok(LossTerms { total, classification, embedding, attention })
}

/// Class probabilities for clips wider or taller than the training extent:
/// the backbone runs on the whole frame, the spatial attention is bilinearly
/// resized to the larger map, the classifier scores every stride-1 window of
/// the training size, and the window softmaxes are max-pooled and renormalized.
pub fn fully_convolutional_inference(model: &Model, video: &Tensor, poses: &Tensor) -> Result<Tensor> {
    let cfg = &model.config;
    check_video(video, cfg, false)?;
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape, false);
    let (f, _) = visual_backbone_forward(&mut tape, &params, &model.params, video, cfg, Mode::Eval)?;
    let fs = tape.value(f).shape().to_vec();
    let (b, big_m, big_n) = (fs[0], fs[2], fs[3]);
    let f_prime = if cfg.attention_enabled {
        let pose = pose_attention(&mut tape, model, &params, poses, Mode::Eval)?;
        let resized = resize_bilinear(tape.value(pose.weights.spatial), big_m, big_n)?;
        let spatial = tape.constant(resized);
        if cfg.coupler_enabled {
            let st = couple(&mut tape, spatial, pose.weights.temporal)?;
            modulate(&mut tape, f, st)?
        } else {
            dissociated_modulate(&mut tape, f, spatial, pose.weights.temporal)?
        }
    } else {
        f
    };
    let mut windows = Vec::with_capacity((big_m - cfg.m + 1) * (big_n - cfg.n + 1));
    for i in 0..=big_m - cfg.m {
        for j in 0..=big_n - cfg.n {
            let rows = tape.slice(f_prime, 2, i, cfg.m)?;
            let window = tape.slice(rows, 3, j, cfg.n)?;
            let (_, probs) = classify(&mut tape, &params, window, None)?;
            windows.push(tape.value(probs).clone());
        }
    }
    debug_assert_eq!(windows[0].shape(), &[b, cfg.classes]);
    max_pool_scores(&windows)
}

/// Elementwise max over per-window class scores `[B, K]`, renormalized per
/// row. A single window is returned unchanged.
pub fn max_pool_scores(windows: &[Tensor]) -> Result<Tensor> {
    let first = windows.first().ok_or_else(|| Error::shape("max_pool_scores", "no window".into()))?;
    if windows.len() == 1 {
        return Ok(first.clone());
    }
    let s = first.shape();
    if s.len() != 2 || windows.iter().any(|w| w.shape() != s) {
        return Err(Error::shape("max_pool_scores", format!("{s:?}")));
    }
    let mut scores = first.data().to_vec();
    for w in &windows[1..] {
        scores.iter_mut().zip(w.data()).for_each(|(a, &v)| *a = a.max(v));
    }
    for row in scores.chunks_mut(s[1]) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(s, scores)
}

/// Finite-difference report keyed by parameter name.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub report: FdReport,
    pub names: Vec<String>,
}

impl GradientCheck {
    /// Max relative error per parameter group (`visual.conv0`, `pose.gcn`,
    /// `attn.r1`, `embed.tv`, `cls.w`, …), in first-seen order.
    pub fn by_group(&self) -> Vec<(String, f64)> {
        let mut groups: Vec<(String, f64)> = Vec::new();
        for (name, &err) in self.names.iter().zip(&self.report.per_param) {
            let group: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some(slot) => slot.1 = slot.1.max(err),
                None => groups.push((group, err)),
            }
        }
        groups
    }
}

/// Compares the tape gradient of the total training loss (train-mode batch
/// norm, seeded dropout) against central differences for every trainable
/// parameter of `model`.
pub fn end_to_end_gradient_check(
    model: &Model,
    video: &Tensor,
    poses: &Tensor,
    labels: &[usize],
    step: f64,
    max_coords_per_param: Option<usize>,
) -> Result<GradientCheck> {
    let names: Vec<String> = model.params.trainable().map(|e| e.name.clone()).collect();
    let values: Vec<Tensor> = model.params.trainable().map(|e| e.value.clone()).collect();
    let report = finite_difference_check(
        |tape, vars| {
            let bound = Bound::from_vars(&names, vars);
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let out = forward(tape, model, &bound, video, poses, Mode::Train, Some(&mut rng))?;
            Ok(losses(tape, model, &out, labels)?.total)
        },
        &values,
        step,
        max_coords_per_param,
    )?;
    Ok(GradientCheck { report, names })
}
