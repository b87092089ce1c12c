//! Final fusion, scoring and the training objectives.

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, norm, Tensor};
use crate::Rng;

/// Loss weights and the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Contrastive term.
    pub lambda2: f64,
    /// Generator term.
    pub lambda3: f64,
    /// Squared-norm regularization.
    pub lambda4: f64,
    pub tau_prime: f64,
    /// Weight of the normalized modality embeddings in the final embedding.
    pub omega: f64,
    /// Keep the contrastive log-ratio un-negated.
    pub literal_log_ratio: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda2: 0.05,
            lambda3: 0.1,
            lambda4: 1e-5,
            tau_prime: 0.085,
            omega: 0.2,
            literal_log_ratio: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.lambda2", self.lambda2),
            ("loss.lambda3", self.lambda3),
            ("loss.lambda4", self.lambda4),
            ("loss.omega", self.omega),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be >= 0")));
            }
        }
        if !(self.tau_prime > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss.tau_prime = {} must be > 0",
                self.tau_prime
            )));
        }
        Ok(())
    }
}

/// `h = e + omega * sum_m f^m / ||f^m||` per row; zero rows of `f^m` add nothing.
pub fn fuse_final(tape: &mut Tape, collab: Var, modal: &[Var], omega: f64) -> Result<Var> {
    if omega == 0.0 || modal.is_empty() {
        return Ok(collab);
    }
    let mut acc = collab;
    for &f in modal {
        let n = tape.l2_normalize_rows(f)?;
        let n = tape.scale(n, omega)?;
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

/// `h_u . h_i`.
pub fn predict(h_u: &[f64], h_i: &[f64]) -> Result<f64> {
    if h_u.len() != h_i.len() {
        return Err(shape_err("predict", format!("{} vs {}", h_u.len(), h_i.len())));
    }
    Ok(dot(h_u, h_i))
}

/// Row-aligned scores `h_u[users] . h_i[items]`, `B x 1`.
pub fn pair_scores(tape: &mut Tape, h_u: Var, h_i: Var, users: &[usize], items: &[usize]) -> Result<Var> {
    let u = tape.gather_rows(h_u, users)?;
    let i = tape.gather_rows(h_i, items)?;
    tape.row_dot(u, i)
}

/// `mean(-log sigmoid(pos - neg))`.
pub fn bpr_loss(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    if tape.value(pos).is_empty() {
        return Err(Error::EmptyBatch("bpr_loss"));
    }
    let diff = tape.sub(pos, neg)?;
    let ls = tape.log_sigmoid(diff)?;
    let m = tape.mean(ls)?;
    tape.scale(m, -1.0)
}

/// Per-user contrastive terms for one modality, `n x 1`:
/// `-s(h_u, e_u) + log sum_{u'} (exp s(h_{u'}, e_u) + exp s(e_{u'}, e_u))`
/// with `s` the cosine divided by `tau`.
pub fn infonce_terms(tape: &mut Tape, h: Var, view: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("contrastive temperature {tau} must be > 0")));
    }
    if tape.value(h).shape() != tape.value(view).shape() {
        return Err(shape_err(
            "infonce",
            format!("{:?} vs {:?}", tape.value(h).shape(), tape.value(view).shape()),
        ));
    }
    let hn = tape.l2_normalize_rows(h)?;
    let en = tape.l2_normalize_rows(view)?;
    let pos = tape.row_dot(hn, en)?;
    let pos = tape.scale(pos, 1.0 / tau)?;
    let cross = tape.matmul_t(en, hn)?;
    let selfs = tape.matmul_t(en, en)?;
    let all = tape.concat_cols(&[cross, selfs])?;
    let all = tape.scale(all, 1.0 / tau)?;
    let lse = tape.logsumexp_rows(all)?;
    tape.sub(lse, pos)
}

/// Contrastive loss averaged over users and modalities. `h` and every view
/// hold the same users in the same row order.
pub fn infonce_loss(tape: &mut Tape, h: Var, views: &[Var], tau: f64, literal_log_ratio: bool) -> Result<Var> {
    if views.is_empty() || tape.value(h).rows() == 0 {
        return Err(Error::EmptyBatch("infonce_loss"));
    }
    let mut total: Option<Var> = None;
    for &v in views {
        let t = infonce_terms(tape, h, v, tau)?;
        let s = tape.sum(t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let n = (tape.value(h).rows() * views.len()) as f64;
    let sign = if literal_log_ratio { -1.0 } else { 1.0 };
    tape.scale(total.expect("non-empty"), sign / n)
}

/// `sqrt(1 - x^2) * exp(x / tau)`.
pub fn hard_negative_profile(x: f64, tau: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!("similarity {x} outside [-1, 1]")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be > 0")));
    }
    Ok(libm::sqrt(1.0 - x * x) * libm::exp(x / tau))
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Measured gradient norms of one anchor's contrastive term with respect to
/// each negative's final embedding.
///
/// The anchor view `e` is a random unit vector. Negative `j` has a unit final
/// embedding at cosine `sims[j]` to `e`; its own view is random. All
/// negatives share one denominator, as in a single batch.
pub fn negative_gradient_norms(sims: &[f64], tau: f64, dim: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::InvalidArgument("need at least two dimensions".into()));
    }
    if let Some(&x) = sims.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
        return Err(Error::InvalidArgument(format!("similarity {x} outside [-1, 1]")));
    }
    let n = sims.len() + 1;
    let anchor = random_unit(dim, rng);
    let mut h = Tensor::zeros(n, dim);
    let mut views = Tensor::zeros(n, dim);
    h.row_mut(0).copy_from_slice(&random_unit(dim, rng));
    views.row_mut(0).copy_from_slice(&anchor);
    for (j, &x) in sims.iter().enumerate() {
        // orthogonal direction by Gram-Schmidt
        let mut v = random_unit(dim, rng);
        let p = dot(&v, &anchor);
        v.iter_mut().zip(&anchor).for_each(|(a, b)| *a -= p * b);
        let vn = norm(&v);
        v.iter_mut().for_each(|a| *a /= vn);
        let s = libm::sqrt(1.0 - x * x);
        for (c, out) in h.row_mut(j + 1).iter_mut().enumerate() {
            *out = x * anchor[c] + s * v[c];
        }
        views.row_mut(j + 1).copy_from_slice(&random_unit(dim, rng));
    }
    let mut tape = Tape::new();
    let hv = tape.input(h)?;
    let ev = tape.constant(views)?;
    let terms = infonce_terms(&mut tape, hv, ev, tau)?;
    let anchor_term = tape.gather_rows(terms, &[0])?;
    let loss = tape.sum(anchor_term)?;
    let grads = tape.backward(loss)?;
    let g = grads
        .wrt(hv)
        .ok_or(Error::InvalidArgument("embedding does not reach the loss".into()))?;
    Ok((1..n).map(|r| norm(g.row(r))).collect())
}

/// `sum of squares` of the given nodes.
pub fn squared_norm(tape: &mut Tape, params: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &p in params {
        let sq = tape.square(p)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

/// `bpr + lambda2 * cl + lambda3 * g + lambda4 * reg`; absent terms are skipped.
pub fn total_loss(
    tape: &mut Tape,
    bpr: Var,
    cl: Option<Var>,
    g: Option<Var>,
    reg: Var,
    w: &LossWeights,
) -> Result<Var> {
    let mut acc = bpr;
    for (term, weight) in [(cl, w.lambda2), (g, w.lambda3), (Some(reg), w.lambda4)] {
        if let Some(t) = term {
            if weight != 0.0 {
                let s = tape.scale(t, weight)?;
                acc = tape.add(acc, s)?;
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn rand_tensor(r: usize, c: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .unwrap()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    #[test]
    fn fusion_examples() {
        let mut t = Tape::new();
        let e = t.constant(Tensor::row_vector(&[1.0, 2.0])).unwrap();
        let f = t.constant(Tensor::row_vector(&[0.6, 0.8])).unwrap();
        let z = t.constant(Tensor::zeros(1, 2)).unwrap();
        let h = fuse_final(&mut t, e, &[f], 0.0).unwrap();
        assert_eq!(t.value(h).data(), &[1.0, 2.0]);
        let h = fuse_final(&mut t, z, &[f], 1.0).unwrap();
        assert!(t.value(h).max_abs_diff(t.value(f)) < 1e-15);
        let g = t.constant(Tensor::row_vector(&[0.0, -3.0])).unwrap();
        let h = fuse_final(&mut t, e, &[f, g, z], 0.5).unwrap();
        assert!(t.value(h).max_abs_diff(&Tensor::row_vector(&[1.3, 1.9])) < 1e-15);
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(predict(&[0.6, 0.8], &[0.6, 0.8]).unwrap(), 1.0);
        let (a, b) = ([0.3, -1.2, 2.5], [1.5, 0.25, -4.0]);
        let oracle = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        assert_eq!(predict(&a, &b).unwrap(), oracle);
        assert!(predict(&a, &b[..2]).is_err());
    }

    #[test]
    fn bpr_examples() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::from_vec(3, 1, alloc::vec![0.4, 20.0, -1.0]).unwrap()).unwrap();
        let n = t.constant(Tensor::from_vec(3, 1, alloc::vec![0.4, 0.0, 2.0]).unwrap()).unwrap();
        let l = bpr_loss(&mut t, p, p).unwrap();
        assert!((t.value(l).item() - core::f64::consts::LN_2).abs() < 1e-15);
        let l = bpr_loss(&mut t, p, n).unwrap();
        let oracle: f64 = [0.0f64, 20.0, -3.0]
            .iter()
            .map(|d| -libm::log(1.0 / (1.0 + libm::exp(-d))))
            .sum::<f64>()
            / 3.0;
        assert!((t.value(l).item() - oracle).abs() < 1e-14);
        let one_p = t.constant(Tensor::scalar(20.0)).unwrap();
        let one_n = t.constant(Tensor::scalar(0.0)).unwrap();
        let l = bpr_loss(&mut t, one_p, one_n).unwrap();
        assert!(t.value(l).item() < 1e-6);
        let e = t.constant(Tensor::zeros(0, 1)).unwrap();
        assert!(bpr_loss(&mut t, e, e).is_err());
    }

    #[test]
    fn infonce_single_user_is_log_two() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::row_vector(&[0.3, -0.4])).unwrap();
        let l = infonce_loss(&mut t, h, &[h], 0.085, false).unwrap();
        assert!((t.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
        let l = infonce_loss(&mut t, h, &[h], 0.085, true).unwrap();
        assert!((t.value(l).item() + core::f64::consts::LN_2).abs() < 1e-12);
        assert!(infonce_loss(&mut t, h, &[h], 0.0, false).is_err());
        assert_eq!(LossWeights::default().tau_prime, 0.085);
    }

    #[test]
    fn infonce_matches_double_loop() {
        let mut rng = crate::seeded_rng(13);
        let tau = 0.3;
        let h = rand_tensor(3, 4, &mut rng);
        let views = [rand_tensor(3, 4, &mut rng), rand_tensor(3, 4, &mut rng)];
        let mut oracle = 0.0;
        for v in &views {
            for u in 0..3 {
                let num = libm::exp(cos(h.row(u), v.row(u)) / tau);
                let mut den = 0.0;
                for up in 0..3 {
                    den += libm::exp(cos(h.row(up), v.row(u)) / tau);
                    den += libm::exp(cos(v.row(up), v.row(u)) / tau);
                }
                oracle -= libm::log(num / den);
            }
        }
        oracle /= 6.0;
        let mut t = Tape::new();
        let hv = t.constant(h).unwrap();
        let vs: Vec<Var> = views.iter().map(|v| t.constant(v.clone()).unwrap()).collect();
        let l = infonce_loss(&mut t, hv, &vs, tau, false).unwrap();
        assert!((t.value(l).item() - oracle).abs() < 1e-10);
    }

    #[test]
    fn profile_examples() {
        assert_eq!(hard_negative_profile(0.0, 0.1).unwrap(), 1.0);
        assert_eq!(hard_negative_profile(1.0, 0.1).unwrap(), 0.0);
        assert_eq!(hard_negative_profile(-1.0, 0.1).unwrap(), 0.0);
        assert!(hard_negative_profile(1.5, 0.1).is_err());
        assert!(hard_negative_profile(0.5, 0.0).is_err());
    }

    #[test]
    fn measured_negative_gradients_follow_profile_shape() {
        let mut rng = crate::seeded_rng(21);
        let sims = [-0.8, -0.2, 0.3, 0.7];
        let g = negative_gradient_norms(&sims, 0.1, 16, &mut rng).unwrap();
        // monotone where the profile is
        assert!(g[0] < g[1] && g[1] < g[2] && g[2] < g[3]);
        let ratio = g[3] / g[2];
        let want = hard_negative_profile(0.7, 0.1).unwrap() / hard_negative_profile(0.3, 0.1).unwrap();
        assert!((ratio / want - 1.0).abs() < 1e-9);
    }

    #[test]
    fn total_loss_examples() {
        let mut t = Tape::new();
        let bpr = t.constant(Tensor::scalar(0.7)).unwrap();
        let cl = t.constant(Tensor::scalar(3.0)).unwrap();
        let g = t.constant(Tensor::scalar(-0.5)).unwrap();
        let theta = t.constant(Tensor::row_vector(&[3.0, 4.0])).unwrap();
        let reg = squared_norm(&mut t, &[theta]).unwrap();
        assert_eq!(t.value(reg).item(), 25.0);
        let w0 = LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
            ..Default::default()
        };
        let l = total_loss(&mut t, bpr, Some(cl), Some(g), reg, &w0).unwrap();
        assert_eq!(t.value(l).item(), 0.7);
        let w4 = LossWeights { lambda4: 0.01, ..w0 };
        let l = total_loss(&mut t, bpr, Some(cl), Some(g), reg, &w4).unwrap();
        assert!((t.value(l).item() - (0.7 + 0.25)).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn infonce_scale_invariant(seed in 0u64..500, row in 0usize..4, c in 0.01f64..100.0) {
                let mut rng = crate::seeded_rng(seed);
                let h = rand_tensor(4, 3, &mut rng);
                let v = rand_tensor(4, 3, &mut rng);
                let mut hs = h.clone();
                hs.row_mut(row).iter_mut().for_each(|x| *x *= c);
                let mut t = Tape::new();
                let (a, b, e) = (t.constant(h).unwrap(), t.constant(hs).unwrap(), t.constant(v).unwrap());
                let la = infonce_loss(&mut t, a, &[e], 0.2, false).unwrap();
                let lb = infonce_loss(&mut t, b, &[e], 0.2, false).unwrap();
                prop_assert!((t.value(la).item() - t.value(lb).item()).abs() < 1e-9);
            }

            #[test]
            fn infonce_terms_positive(seed in 0u64..500, tau in 0.05f64..2.0) {
                let mut rng = crate::seeded_rng(seed);
                let mut t = Tape::new();
                let h = t.constant(rand_tensor(5, 3, &mut rng)).unwrap();
                let v = t.constant(rand_tensor(5, 3, &mut rng)).unwrap();
                let terms = infonce_terms(&mut t, h, v, tau).unwrap();
                prop_assert!(t.value(terms).data().iter().all(|&x| x > 0.0));
            }

            #[test]
            fn bpr_strictly_decreasing(a in -30.0f64..30.0, step in 0.01f64..5.0) {
                let mut t = Tape::new();
                let z = t.constant(Tensor::scalar(0.0)).unwrap();
                let p1 = t.constant(Tensor::scalar(a)).unwrap();
                let p2 = t.constant(Tensor::scalar(a + step)).unwrap();
                let l1 = bpr_loss(&mut t, p1, z).unwrap();
                let l2 = bpr_loss(&mut t, p2, z).unwrap();
                prop_assert!(t.value(l2).item() < t.value(l1).item());
            }

            #[test]
            fn negative_gradient_grows_with_similarity(seed in 0u64..200, tau in 0.02f64..0.5) {
                // increasing branch of the profile: x < x* where phi'(x*) = 0
                let peak = (libm::sqrt(tau * tau + 4.0) - tau) / 2.0;
                let lo = -0.9f64;
                let xs: Vec<f64> = (0..6).map(|k| lo + (peak - lo) * k as f64 / 6.0).collect();
                let mut rng = crate::seeded_rng(seed);
                let g = negative_gradient_norms(&xs, tau, 8, &mut rng).unwrap();
                for w in g.windows(2) {
                    prop_assert!(w[0] <= w[1] * (1.0 + 1e-9));
                }
            }
        }
    }
}
