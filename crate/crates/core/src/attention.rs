//! Pose-driven spatial and temporal attention, their coupling into a joint
//! space-time weighting, and modulation of the visual feature map.
//!
//! Layouts: the feature map is `[batch, t_c, m, n, c]`; spatial weights are
//! `[batch, m, n]`, temporal weights `[batch, t_c]` and coupled weights
//! `[batch, t_c, m, n]` (one weight per space-time cell, shared by channels).

use alloc::format;
use alloc::vec::Vec;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionShape {
    /// Width of `h*`.
    pub feature_width: usize,
    /// Width of the tanh hidden layer of each head.
    pub latent_width: usize,
    pub t_c: usize,
    pub m: usize,
    pub n: usize,
}

impl AttentionShape {
    fn head_out(&self, head: usize) -> usize {
        if head == 1 {
            self.m * self.n
        } else {
            self.t_c
        }
    }
}

/// Each head `r` owns its own trunk: `z_r = W_z tanh(W_h h + b_h) + b_z`.
pub fn init_attention_params(store: &mut ParamStore, shape: &AttentionShape, seed: u64) {
    let (d, a) = (shape.feature_width, shape.latent_width);
    for r in [1, 2] {
        let out = shape.head_out(r);
        store.insert_glorot(&format!("attn.r{r}.wh"), &[d, a], d, a, seed);
        store.insert_zeros(&format!("attn.r{r}.bh"), &[a]);
        store.insert_glorot(&format!("attn.r{r}.wz"), &[a, out], a, out, seed);
        store.insert_zeros(&format!("attn.r{r}.bz"), &[out]);
    }
}

/// Latent spatial (`z1`, `[batch, m·n]`) and temporal (`z2`, `[batch, t_c]`) vectors.
#[derive(Clone, Copy, Debug)]
pub struct LatentVectors {
    pub z1: Var,
    pub z2: Var,
}

pub fn latent_vectors(tape: &mut Tape, params: &Bound, h: Var) -> Result<LatentVectors> {
    let mut z = [h; 2];
    for (slot, r) in z.iter_mut().zip([1, 2]) {
        let hidden = tape.matmul(h, params.var(&format!("attn.r{r}.wh"))?)?;
        let hidden = tape.broadcast_add(hidden, params.var(&format!("attn.r{r}.bh"))?, &[0])?;
        let hidden = tape.tanh(hidden)?;
        let out = tape.matmul(hidden, params.var(&format!("attn.r{r}.wz"))?)?;
        *slot = tape.broadcast_add(out, params.var(&format!("attn.r{r}.bz"))?, &[0])?;
    }
    Ok(LatentVectors { z1: z[0], z2: z[1] })
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    /// `[batch, m, n]`, each entry in (0, 1).
    pub spatial: Var,
    /// `[batch, t_c]`, each row on the simplex.
    pub temporal: Var,
}

/// `A_S = sigmoid(z1)` reshaped to `m×n`; `A_T = softmax(z2)`.
pub fn attention_weights(tape: &mut Tape, z: LatentVectors, m: usize, n: usize) -> Result<AttentionWeights> {
    let s = tape.value(z.z1).shape().to_vec();
    if s.len() != 2 || s[1] != m * n {
        return Err(Error::shape("attention_weights", format!("z1 {s:?} for a {m}x{n} grid")));
    }
    let a_s = tape.sigmoid(z.z1)?;
    let spatial = tape.reshape(a_s, &[s[0], m, n])?;
    let temporal = tape.softmax_lastdim(z.z2)?;
    Ok(AttentionWeights { spatial, temporal })
}

/// `A_ST[b,t,i,j] = A_S[b,i,j] · A_T[b,t]`: both are inflated to the full
/// space-time grid by duplication and multiplied elementwise.
pub fn couple(tape: &mut Tape, spatial: Var, temporal: Var) -> Result<Var> {
    let ss = tape.value(spatial).shape().to_vec();
    let ts = tape.value(temporal).shape().to_vec();
    if ss.len() != 3 || ts.len() != 2 || ss[0] != ts[0] {
        return Err(Error::shape("couple", format!("{ss:?} vs {ts:?}")));
    }
    let full = [ss[0], ts[1], ss[1], ss[2]];
    let inflated_s = tape.expand(spatial, &full, &[1])?;
    let inflated_t = tape.expand(temporal, &full, &[2, 3])?;
    tape.mul(inflated_s, inflated_t)
}

/// `f' = A_ST ⊙ f + f`, with `A_ST` shared across channels.
pub fn modulate(tape: &mut Tape, f: Var, coupled: Var) -> Result<Var> {
    let weighted = tape.broadcast_mul(f, coupled, &[4])?;
    tape.add(weighted, f)
}

/// Two-stream baseline without coupling: spatial weights (constant over time)
/// and temporal weights (constant over space) each modulate `f` with a
/// residual, and the streams are concatenated along channels (`2c`).
pub fn dissociated_modulate(tape: &mut Tape, f: Var, spatial: Var, temporal: Var) -> Result<Var> {
    let ws = tape.broadcast_mul(f, spatial, &[1, 4])?;
    let s_stream = tape.add(ws, f)?;
    let wt = tape.broadcast_mul(f, temporal, &[2, 3, 4])?;
    let t_stream = tape.add(wt, f)?;
    tape.concat(&[s_stream, t_stream], 4)
}

/// Bilinear resize of `[batch, m, n]` maps to `[batch, rows, cols]` with
/// corner-aligned sampling. Same-size input is returned unchanged.
pub fn resize_bilinear(maps: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let s = maps.shape();
    if s.len() != 3 || rows == 0 || cols == 0 {
        return Err(Error::shape("resize_bilinear", format!("{s:?} to {rows}x{cols}")));
    }
    let (b, m, n) = (s[0], s[1], s[2]);
    if (m, n) == (rows, cols) {
        return Ok(maps.clone());
    }
    let coord = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        if out == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (src - 1) as f64 / (out - 1) as f64;
        let lo = (libm::floor(x) as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    let d = maps.data();
    let mut out = Vec::with_capacity(b * rows * cols);
    for bi in 0..b {
        let at = |r: usize, c: usize| d[(bi * m + r) * n + c];
        for r in 0..rows {
            let (r0, r1, fr) = coord(r, rows, m);
            for c in 0..cols {
                let (c0, c1, fc) = coord(c, cols, n);
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                out.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    Tensor::new(&[b, rows, cols], out)
}
