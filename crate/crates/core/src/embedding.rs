//! Spatial embedding of the time-pooled visual features and the pose spatial
//! latent vector into a shared space, with the losses that align them.
//!
//! Everything is batched along axis 0; losses are returned per sample.

use alloc::format;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

/// `ε` of the stabilized norm `v / sqrt(Σ v² + ε)`.
pub const HYPERSPHERE_EPS: f64 = 1e-12;
/// Probability floor of the softmax adapter feeding the KL losses.
pub const KL_FLOOR: f64 = 1e-8;

pub const VISUAL_PROJECTION: &str = "embed.tv";
pub const POSE_PROJECTION: &str = "embed.tp";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EmbeddingLossKind {
    /// Squared distance of the unit-normalized embeddings.
    Ne,
    /// `KL(f_e ‖ P_e)`
    KlFp,
    /// `KL(P_e ‖ f_e)`
    KlPf,
    /// Sum of both directions.
    KlBi,
}

impl EmbeddingLossKind {
    pub const ALL: [EmbeddingLossKind; 4] = [Self::Ne, Self::KlFp, Self::KlPf, Self::KlBi];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ne => "ne",
            Self::KlFp => "kl_fp",
            Self::KlPf => "kl_pf",
            Self::KlBi => "kl_bi",
        }
    }
}

/// `T_v` is `[d_e, d_v]` and `T_p` is `[d_e, d_p]`; both start at unit Frobenius norm.
pub fn init_embedding_params(store: &mut ParamStore, d_v: usize, d_p: usize, d_e: usize, seed: u64) -> Result<()> {
    store.insert_glorot(VISUAL_PROJECTION, &[d_e, d_v], d_v, d_e, seed);
    store.insert_glorot(POSE_PROJECTION, &[d_e, d_p], d_p, d_e, seed);
    enforce_norm_constraint(store)
}

/// Sums `[batch, t, m, n, c]` over time and flattens to `[batch, m·n·c]`.
pub fn spatial_pool(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.value(f).shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape("spatial_pool", format!("{s:?}")));
    }
    let pooled = tape.sum_axis(f, 1)?;
    tape.reshape(pooled, &[s[0], s[2] * s[3] * s[4]])
}

pub fn hypersphere_normalize(tape: &mut Tape, v: Var, eps: f64) -> Result<Var> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("hypersphere eps {eps} must be > 0")));
    }
    tape.l2_normalize_eps(v, eps)
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddedPair {
    pub f_e: Var,
    pub p_e: Var,
    pub f_hat: Var,
    pub p_hat: Var,
}

/// `f_e = T_v f_s`, `P_e = T_p z1` (row-vector form `x Tᵀ`) and their unit versions.
pub fn project(tape: &mut Tape, f_s: Var, z1: Var, t_v: Var, t_p: Var) -> Result<EmbeddedPair> {
    let tv = tape.transpose(t_v)?;
    let f_e = tape.matmul(f_s, tv)?;
    let tp = tape.transpose(t_p)?;
    let p_e = tape.matmul(z1, tp)?;
    if tape.value(f_e).shape() != tape.value(p_e).shape() {
        let shapes = format!("{:?} vs {:?}", tape.value(f_e).shape(), tape.value(p_e).shape());
        return Err(Error::shape("project", shapes));
    }
    let f_hat = hypersphere_normalize(tape, f_e, HYPERSPHERE_EPS)?;
    let p_hat = hypersphere_normalize(tape, p_e, HYPERSPHERE_EPS)?;
    Ok(EmbeddedPair { f_e, p_e, f_hat, p_hat })
}

pub fn project_bound(tape: &mut Tape, params: &Bound, f_s: Var, z1: Var) -> Result<EmbeddedPair> {
    let (tv, tp) = (params.var(VISUAL_PROJECTION)?, params.var(POSE_PROJECTION)?);
    project(tape, f_s, z1, tv, tp)
}

/// `‖f̂ − P̂‖²` per sample, in `[0, 4]`.
pub fn embedding_loss_ne(tape: &mut Tape, pair: &EmbeddedPair) -> Result<Var> {
    let d = tape.sub(pair.f_hat, pair.p_hat)?;
    let sq = tape.mul(d, d)?;
    tape.sum_axis(sq, 1)
}

/// Softmax over the embedding coordinates, floored: `(softmax(v) + δ) / (1 + D·δ)`.
pub fn to_distribution(tape: &mut Tape, v: Var) -> Result<Var> {
    let d = *tape.value(v).shape().last().unwrap_or(&1) as f64;
    let p = tape.softmax_lastdim(v)?;
    let p = tape.add_scalar(p, KL_FLOOR)?;
    tape.scale(p, 1.0 / (1.0 + d * KL_FLOOR))
}

/// `Σ_i p_i (ln p_i − ln q_i)` along the last axis.
pub fn kl_divergence(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    let lp = tape.log(p)?;
    let lq = tape.log(q)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let last = tape.value(terms).rank() - 1;
    tape.sum_axis(terms, last)
}

/// Per-sample embedding loss of the requested kind. KL kinds compare the
/// softmax distributions of the raw embeddings `f_e` and `P_e`.
pub fn embedding_loss(tape: &mut Tape, pair: &EmbeddedPair, kind: EmbeddingLossKind) -> Result<Var> {
    if kind == EmbeddingLossKind::Ne {
        return embedding_loss_ne(tape, pair);
    }
    let p = to_distribution(tape, pair.f_e)?;
    let q = to_distribution(tape, pair.p_e)?;
    match kind {
        EmbeddingLossKind::KlFp => kl_divergence(tape, p, q),
        EmbeddingLossKind::KlPf => kl_divergence(tape, q, p),
        _ => {
            let fp = kl_divergence(tape, p, q)?;
            let pf = kl_divergence(tape, q, p)?;
            tape.add(fp, pf)
        }
    }
}

pub fn unit_frobenius(t: &Tensor) -> Result<Tensor> {
    let norm = t.frobenius_norm();
    if !(norm > 0.0) {
        return Err(Error::InvalidTensor("cannot normalize a zero projection matrix".into()));
    }
    t.map(|v| v / norm)
}

/// Rescales `T_v` and `T_p` in `store` to unit Frobenius norm.
pub fn enforce_norm_constraint(store: &mut ParamStore) -> Result<()> {
    for name in [VISUAL_PROJECTION, POSE_PROJECTION] {
        let unit = unit_frobenius(store.get(name)?)?;
        store.set(name, unit)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_difference_check;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::new(&[1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn spatial_pool_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_tensor(&mut rng, &[1, 1, 2, 3, 2]);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let s = spatial_pool(&mut tape, fv).unwrap();
        assert_eq!(tape.value(s).data(), f.data());
        let ones = tape.constant(Tensor::full(&[1, 2, 1, 1, 1], 1.0));
        let s = spatial_pool(&mut tape, ones).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0]);
        let zero = tape.constant(Tensor::zeros(&[2, 3, 2, 2, 2]));
        let s = spatial_pool(&mut tape, zero).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 8]);
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hypersphere_cases() {
        let mut tape = Tape::new();
        let v = row(&mut tape, &[3.0, 4.0]);
        let u = hypersphere_normalize(&mut tape, v, HYPERSPHERE_EPS).unwrap();
        let got = tape.value(u).data();
        assert!((got[0] - 0.6).abs() < 1e-12 && (got[1] - 0.8).abs() < 1e-12);
        let z = row(&mut tape, &[0.0, 0.0]);
        let u = hypersphere_normalize(&mut tape, z, HYPERSPHERE_EPS).unwrap();
        assert_eq!(tape.value(u).data(), &[0.0, 0.0]);
        assert!(hypersphere_normalize(&mut tape, v, 0.0).is_err());
    }

    #[test]
    fn projection_matches_hand_product() {
        let mut tape = Tape::new();
        let tv = tape.constant(Tensor::identity(3).map(|v| 2.0 * v).unwrap());
        let tp_vals = [0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let tp = tape.constant(Tensor::new(&[3, 2], tp_vals.to_vec()).unwrap());
        let f_s = row(&mut tape, &[1.0, -2.0, 0.5]);
        let z1 = row(&mut tape, &[0.3, -0.7]);
        let pair = project(&mut tape, f_s, z1, tv, tp).unwrap();
        assert_eq!(tape.value(pair.f_e).data(), &[2.0, -4.0, 1.0]);
        let want = [0.5 * 0.3 + 1.0 * 0.7, 2.0 * 0.3 - 0.25 * 0.7, -0.75 * 0.3 - 1.5 * 0.7];
        for (g, w) in tape.value(pair.p_e).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }

        let zero = row(&mut tape, &[0.0, 0.0]);
        let pair = project(&mut tape, f_s, zero, tv, tp).unwrap();
        assert!(tape.value(pair.p_hat).data().iter().all(|&v| v == 0.0));

        let wrong = row(&mut tape, &[1.0, 2.0, 3.0]);
        assert!(project(&mut tape, f_s, wrong, tv, tp).is_err());
    }

    #[test]
    fn ne_loss_cases() {
        let mut tape = Tape::new();
        let cases = [([1.0, 0.0], [1.0, 0.0], 0.0), ([1.0, 0.0], [-1.0, 0.0], 4.0), ([1.0, 0.0], [0.0, 1.0], 2.0)];
        for (a, b, want) in cases {
            let (fa, pb) = (row(&mut tape, &a), row(&mut tape, &b));
            let pair = EmbeddedPair { f_e: fa, p_e: pb, f_hat: fa, p_hat: pb };
            let l = embedding_loss_ne(&mut tape, &pair).unwrap();
            assert_eq!(tape.value(l).data(), &[want]);
        }
    }

    #[test]
    fn kl_scalar_evaluation() {
        let mut tape = Tape::new();
        let p = row(&mut tape, &[0.9, 0.1]);
        let q = row(&mut tape, &[0.5, 0.5]);
        let d = kl_divergence(&mut tape, p, q).unwrap();
        let want = 0.9 * libm::log(1.8) + 0.1 * libm::log(0.2);
        assert!((tape.value(d).item() - want).abs() < 1e-15);
        assert!((tape.value(d).item() - 0.3681).abs() < 5e-5);
        let same = kl_divergence(&mut tape, p, p).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    fn raw_pair(tape: &mut Tape, a: &[f64], b: &[f64]) -> EmbeddedPair {
        let (fa, pb) = (row(tape, a), row(tape, b));
        let f_hat = hypersphere_normalize(tape, fa, HYPERSPHERE_EPS).unwrap();
        let p_hat = hypersphere_normalize(tape, pb, HYPERSPHERE_EPS).unwrap();
        EmbeddedPair { f_e: fa, p_e: pb, f_hat, p_hat }
    }

    #[test]
    fn kl_losses_vanish_on_identical_embeddings() {
        let mut tape = Tape::new();
        let pair = raw_pair(&mut tape, &[0.3, -1.2, 2.0], &[0.3, -1.2, 2.0]);
        for kind in EmbeddingLossKind::ALL {
            let l = embedding_loss(&mut tape, &pair, kind).unwrap();
            assert_eq!(tape.value(l).item(), 0.0, "{kind:?}");
        }
    }

    #[test]
    fn norm_constraint_cases() {
        let t = Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(unit_frobenius(&t).unwrap().data(), &[0.5; 4]);
        let u = unit_frobenius(&unit_frobenius(&t).unwrap()).unwrap();
        assert!(u.max_abs_diff(&t.map(|v| v / 2.0).unwrap()) < 1e-12);
        assert!(unit_frobenius(&Tensor::zeros(&[2, 2])).is_err());

        let mut store = ParamStore::new();
        init_embedding_params(&mut store, 12, 4, 5, 3).unwrap();
        for name in [VISUAL_PROJECTION, POSE_PROJECTION] {
            assert!((store.get(name).unwrap().frobenius_norm() - 1.0).abs() < 1e-12);
        }
        store.set(POSE_PROJECTION, Tensor::zeros(&[5, 4])).unwrap();
        assert!(enforce_norm_constraint(&mut store).is_err());
    }

    #[test]
    fn loss_gradients_flow_to_both_modalities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tv, tp) = (rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[4, 3]));
        let (fs, z1) = (rand_tensor(&mut rng, &[2, 6]), rand_tensor(&mut rng, &[2, 3]));
        for kind in EmbeddingLossKind::ALL {
            let mut tape = Tape::new();
            let vars: Vec<Var> = [&fs, &z1, &tv, &tp].iter().map(|t| tape.param((*t).clone())).collect();
            let pair = project(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();
            let l = embedding_loss(&mut tape, &pair, kind).unwrap();
            let l = tape.sum(l).unwrap();
            let g = tape.backward(l).unwrap();
            for v in &vars {
                let grad = g.get(*v).unwrap();
                assert!(grad.data().iter().filter(|x| x.abs() > 1e-9).count() == grad.len(), "{kind:?}");
            }
        }
    }

    #[test]
    fn every_loss_kind_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params: Vec<Tensor> = [[2, 6], [2, 3], [4, 6], [4, 3]].iter().map(|s| rand_tensor(&mut rng, s)).collect();
        for kind in EmbeddingLossKind::ALL {
            let report = finite_difference_check(
                |tape, v| {
                    let pair = project(tape, v[0], v[1], v[2], v[3])?;
                    let l = embedding_loss(tape, &pair, kind)?;
                    tape.sum(l)
                },
                &params,
                1e-6,
                None,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{kind:?}: {report:?}");
        }
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n).prop_filter("away from zero", |v| {
            v.iter().map(|x| x * x).sum::<f64>() > 1e-2
        })
    }

    proptest! {
        #[test]
        fn ne_loss_is_bounded_and_equals_cosine_form(a in vec_strategy(5), b in vec_strategy(5)) {
            let mut tape = Tape::new();
            let pair = raw_pair(&mut tape, &a, &b);
            let l = embedding_loss_ne(&mut tape, &pair).unwrap();
            let l = tape.value(l).item();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
            let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
            prop_assert!((0.0..=4.0).contains(&l));
            prop_assert!((l - (2.0 - 2.0 * dot / (na * nb))).abs() < 1e-9);
            for hat in [pair.f_hat, pair.p_hat] {
                let n = libm::sqrt(tape.value(hat).data().iter().map(|x| x * x).sum::<f64>());
                prop_assert!(n <= 1.0 && n >= 1.0 - 1e-6);
            }
        }

        #[test]
        fn ne_loss_ignores_positive_rescaling(
            fs in vec_strategy(6), z1 in vec_strategy(3), k1 in 0.01f64..100.0, k2 in 0.01f64..100.0, seed in 0u64..1000
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (tv, tp) = (rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[4, 3]));
            let eval = |a: f64, b: f64| {
                let mut tape = Tape::new();
                let f = row(&mut tape, &fs.iter().map(|x| x * a).collect::<Vec<_>>());
                let z = row(&mut tape, &z1.iter().map(|x| x * b).collect::<Vec<_>>());
                let (tvv, tpv) = (tape.constant(tv.clone()), tape.constant(tp.clone()));
                let pair = project(&mut tape, f, z, tvv, tpv).unwrap();
                let l = embedding_loss_ne(&mut tape, &pair).unwrap();
                let norms = [pair.f_e, pair.p_e].map(|v| tape.value(v).frobenius_norm());
                (tape.value(l).item(), norms)
            };
            let (base, norms) = eval(1.0, 1.0);
            prop_assume!(norms.iter().all(|&n| n > 1e-3));
            prop_assert!((eval(k1, k2).0 - base).abs() < 1e-9);
        }

        #[test]
        fn kl_losses_are_nonnegative_and_bidirectional_is_symmetric(a in vec_strategy(4), b in vec_strategy(4)) {
            let mut tape = Tape::new();
            let pair = raw_pair(&mut tape, &a, &b);
            let swapped = raw_pair(&mut tape, &b, &a);
            for kind in [EmbeddingLossKind::KlFp, EmbeddingLossKind::KlPf, EmbeddingLossKind::KlBi] {
                let l = embedding_loss(&mut tape, &pair, kind).unwrap();
                prop_assert!(tape.value(l).item() >= -1e-15);
            }
            let x = embedding_loss(&mut tape, &pair, EmbeddingLossKind::KlBi).unwrap();
            let y = embedding_loss(&mut tape, &swapped, EmbeddingLossKind::KlBi).unwrap();
            prop_assert!((tape.value(x).item() - tape.value(y).item()).abs() < 1e-12);
        }
    }
}
