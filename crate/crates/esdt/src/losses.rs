//! Training objectives: flow matching, output- and feature-level knowledge
//! distillation, and the timestep-aware combination of the two.
//!
//! Convention used throughout: `x_t = (1-t) x_0 + t eps`, target velocity
//! `eps - x_0`, and `sigma_t = t`, so `x_t - sigma_t (eps - x_0) = x_0`
//! exactly.

use crate::error::{EsdtError, Result};
use crate::numerics::{ops, Scalar, Tape, Tensor, TensorRef};

/// A noised batch: clean latents, the noise that made them, per-sample
/// timesteps, the interpolants and the regression targets.
#[derive(Debug, Clone)]
pub struct DiffusionBatch<F: Scalar> {
    pub x0: Tensor<F>,
    pub eps: Tensor<F>,
    pub t: Vec<F>,
    pub x_t: Tensor<F>,
    /// `eps - x0`.
    pub target: Tensor<F>,
}

/// Build the linear interpolant `x_t = (1-t) x_0 + t eps` per sample.
/// Leading axis of `x0`/`eps` is the batch; `t` values must lie in `[0, 1]`.
pub fn sample_xt<F: Scalar>(x0: &Tensor<F>, eps: &Tensor<F>, t: &[F]) -> Result<DiffusionBatch<F>> {
    if x0.shape() != eps.shape() {
        return Err(EsdtError::shape(
            "sample_xt",
            format!("{:?} vs {:?}", x0.shape(), eps.shape()),
        ));
    }
    let b = x0.shape().first().copied().unwrap_or(0);
    if b == 0 || t.len() != b {
        return Err(EsdtError::shape(
            "sample_xt",
            format!("batch {b} vs {} timesteps", t.len()),
        ));
    }
    for &tv in t {
        let tv = tv.to_f64_();
        if !(0.0..=1.0).contains(&tv) {
            return Err(EsdtError::Numeric(format!("sample_xt: t = {tv} outside [0, 1]")));
        }
    }
    let inner = x0.numel() / b;
    let mut xt = vec![F::zero(); x0.numel()];
    let mut target = vec![F::zero(); x0.numel()];
    for i in 0..b {
        let tv = t[i];
        let a = F::one() - tv;
        for d in 0..inner {
            let idx = i * inner + d;
            xt[idx] = a * x0.data()[idx] + tv * eps.data()[idx];
            target[idx] = eps.data()[idx] - x0.data()[idx];
        }
    }
    Ok(DiffusionBatch {
        x0: x0.clone(),
        eps: eps.clone(),
        t: t.to_vec(),
        x_t: Tensor::new(x0.shape(), xt),
        target: Tensor::new(x0.shape(), target),
    })
}

/// Mean squared error between predicted velocity and `eps - x0` (Eq. 4 form),
/// averaged over batch and elements.
pub fn flow_matching_loss<F: Scalar>(
    tape: &mut Tape<F>,
    v_pred: TensorRef,
    target: &Tensor<F>,
) -> Result<TensorRef> {
    if tape.shape(v_pred) != target.shape() {
        return Err(EsdtError::shape(
            "flow_matching_loss",
            format!("{:?} vs {:?}", tape.shape(v_pred), target.shape()),
        ));
    }
    if !tape.value(v_pred).all_finite() {
        return Err(EsdtError::Numeric("flow_matching_loss: non-finite prediction".into()));
    }
    let tgt = tape.constant(target.clone());
    tape.mse(v_pred, tgt)
}

/// Mean squared difference between teacher and student velocities (Eq. 6
/// form). Teacher values enter as constants.
pub fn output_kd_loss<F: Scalar>(
    tape: &mut Tape<F>,
    teacher_v: &Tensor<F>,
    student_v: TensorRef,
) -> Result<TensorRef> {
    if tape.shape(student_v) != teacher_v.shape() {
        return Err(EsdtError::shape(
            "output_kd_loss",
            format!("{:?} vs {:?}", teacher_v.shape(), tape.shape(student_v)),
        ));
    }
    let t = tape.constant(teacher_v.clone());
    tape.mse(student_v, t)
}

/// Per-sample mean squared error `[B]` between two values of shape `[B, ...]`.
pub fn per_sample_sq_error<F: Scalar>(
    tape: &mut Tape<F>,
    a: TensorRef,
    b: TensorRef,
) -> Result<TensorRef> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    tape.mean_tail(sq)
}

/// Feature distillation (Eq. 7 form): student features are projected into
/// the teacher's feature width by the jointly trained affine `phi`, then
/// compared in mean square. Features are channel-first `[B, d, H, W]`.
pub fn feature_kd_loss<F: Scalar>(
    tape: &mut Tape<F>,
    teacher_feat: &Tensor<F>,
    student_feat: TensorRef,
    phi_w: TensorRef,
    phi_b: TensorRef,
) -> Result<TensorRef> {
    let ts = teacher_feat.shape().to_vec();
    let ss = tape.shape(student_feat).to_vec();
    if ts.len() != 4 || ss.len() != 4 || ts[0] != ss[0] || ts[2..] != ss[2..] {
        return Err(EsdtError::shape(
            "feature_kd_loss",
            format!("teacher {:?} vs student {:?}", ts, ss),
        ));
    }
    let (b, dt) = (ts[0], ts[1]);
    let ds = ss[1];
    let n = ts[2] * ts[3];
    if tape.shape(phi_w) != [dt, ds] {
        return Err(EsdtError::shape(
            "feature_kd_loss",
            format!("phi {:?} vs [{dt}, {ds}]", tape.shape(phi_w)),
        ));
    }
    // tokens-last so the affine applies over the channel dim
    let s_tok = tape.permute(student_feat, &[0, 2, 3, 1])?;
    let s_tok = tape.reshape(s_tok, &[b, n, ds])?;
    let projected = tape.linear(s_tok, phi_w, Some(phi_b))?;
    let t_tok = ops::permute(teacher_feat, &[0, 2, 3, 1])?.reshaped(&[b, n, dt])?;
    let t_ref = tape.constant(t_tok);
    tape.mse(t_ref, projected)
}

/// Timestep-dependent weight `w(t)` for the Eq. 8 combination.
#[derive(Debug, Clone)]
pub enum KdSchedule {
    Constant(f64),
    /// Piecewise-linear over sorted `(t, w)` knots; clamped at the ends.
    Table(Vec<(f64, f64)>),
}

impl KdSchedule {
    pub fn validate(&self) -> Result<()> {
        let check = |w: f64| {
            if !(0.0..=1.0).contains(&w) {
                Err(EsdtError::Config(format!("kd schedule weight {w} outside [0, 1]")))
            } else {
                Ok(())
            }
        };
        match self {
            KdSchedule::Constant(w) => check(*w),
            KdSchedule::Table(knots) => {
                if knots.is_empty() {
                    return Err(EsdtError::Config("kd schedule table is empty".into()));
                }
                if knots.windows(2).any(|p| p[0].0 >= p[1].0) {
                    return Err(EsdtError::Config("kd schedule knots must be strictly increasing".into()));
                }
                knots.iter().try_for_each(|&(_, w)| check(w))
            }
        }
    }

    pub fn weight(&self, t: f64) -> f64 {
        match self {
            KdSchedule::Constant(w) => *w,
            KdSchedule::Table(knots) => {
                if t <= knots[0].0 {
                    return knots[0].1;
                }
                for pair in knots.windows(2) {
                    let ((t0, w0), (t1, w1)) = (pair[0], pair[1]);
                    if t <= t1 {
                        let f = (t - t0) / (t1 - t0);
                        return w0 + f * (w1 - w0);
                    }
                }
                knots.last().unwrap().1
            }
        }
    }
}

/// Eq. 8 combination: per-sample `w(t) L_out + (1 - w(t)) L_diff`, averaged
/// over the batch. The caller adds `L_feat` on top to complete the
/// objective. Inputs are per-sample losses `[B]`.
pub fn timestep_scaled_kd<F: Scalar>(
    tape: &mut Tape<F>,
    l_diff_per_sample: TensorRef,
    l_out_per_sample: TensorRef,
    t: &[F],
    schedule: &KdSchedule,
) -> Result<TensorRef> {
    schedule.validate()?;
    let b = t.len();
    if tape.shape(l_diff_per_sample) != [b] || tape.shape(l_out_per_sample) != [b] {
        return Err(EsdtError::shape(
            "timestep_scaled_kd",
            format!(
                "per-sample losses {:?}/{:?} vs batch {b}",
                tape.shape(l_diff_per_sample),
                tape.shape(l_out_per_sample)
            ),
        ));
    }
    let w: Vec<F> = t.iter().map(|&tv| F::c(schedule.weight(tv.to_f64_()))).collect();
    let one_minus: Vec<F> = w.iter().map(|&x| F::one() - x).collect();
    let wt = tape.constant(Tensor::new(&[b], w));
    let wc = tape.constant(Tensor::new(&[b], one_minus));
    let a = tape.mul(wt, l_out_per_sample)?;
    let c = tape.mul(wc, l_diff_per_sample)?;
    let combined = tape.add(a, c)?;
    Ok(tape.mean_all(combined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::StreamRng;

    #[test]
    fn interpolant_endpoints() {
        let x0 = Tensor::<f64>::new(&[1, 3], vec![1.0, 2.0, 3.0]);
        let eps = Tensor::<f64>::new(&[1, 3], vec![-1.0, 0.0, 1.0]);
        let b0 = sample_xt(&x0, &eps, &[0.0]).unwrap();
        assert_eq!(b0.x_t.data(), x0.data());
        let b1 = sample_xt(&x0, &eps, &[1.0]).unwrap();
        assert_eq!(b1.x_t.data(), eps.data());
    }

    #[test]
    fn scalar_interpolant_arithmetic() {
        let x0 = Tensor::<f64>::new(&[1, 1], vec![2.0]);
        let eps = Tensor::<f64>::new(&[1, 1], vec![-1.0]);
        let b = sample_xt(&x0, &eps, &[0.25]).unwrap();
        assert_eq!(b.x_t.item(), 1.25);
        assert_eq!(b.target.item(), -3.0);
    }

    #[test]
    fn interpolant_consistency_with_x0_recovery() {
        // x_t - sigma_t (eps - x0) = x0 exactly, for random batches.
        let mut rng = StreamRng::new(1, 0);
        let x0: Tensor<f64> = rng.normal_tensor(&[4, 6]);
        let eps: Tensor<f64> = rng.normal_tensor(&[4, 6]);
        let t: Vec<f64> = (0..4).map(|_| rng.uniform(0.0, 1.0)).collect();
        let b = sample_xt(&x0, &eps, &t).unwrap();
        for i in 0..4 {
            for d in 0..6 {
                let idx = i * 6 + d;
                let rec = b.x_t.data()[idx] - t[i] * b.target.data()[idx];
                assert!((rec - x0.data()[idx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_t_outside_unit_interval() {
        let x0 = Tensor::<f64>::zeros(&[1, 2]);
        let eps = Tensor::<f64>::zeros(&[1, 2]);
        assert!(sample_xt(&x0, &eps, &[1.5]).is_err());
        assert!(sample_xt(&x0, &eps, &[-0.1]).is_err());
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let mut rng = StreamRng::new(2, 0);
        let x0: Tensor<f64> = rng.normal_tensor(&[3, 4]);
        let eps: Tensor<f64> = rng.normal_tensor(&[3, 4]);
        let b = sample_xt(&x0, &eps, &[0.3, 0.5, 0.9]).unwrap();
        let mut tape = Tape::new();
        let pred = tape.constant(b.target.clone());
        let loss = flow_matching_loss(&mut tape, pred, &b.target).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn zero_predictor_unit_loss() {
        let x0 = Tensor::<f64>::new(&[1, 1], vec![0.0]);
        let eps = Tensor::<f64>::new(&[1, 1], vec![1.0]);
        let b = sample_xt(&x0, &eps, &[0.5]).unwrap();
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::zeros(&[1, 1]));
        let loss = flow_matching_loss(&mut tape, pred, &b.target).unwrap();
        assert_eq!(tape.value(loss).item(), 1.0);
    }

    #[test]
    fn flow_matching_matches_scalar_loop() {
        let mut rng = StreamRng::new(3, 0);
        let pred: Tensor<f64> = rng.normal_tensor(&[5, 7]);
        let tgt: Tensor<f64> = rng.normal_tensor(&[5, 7]);
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let loss = flow_matching_loss(&mut tape, p, &tgt).unwrap();
        let mut want = 0.0;
        for i in 0..35 {
            let d = pred.data()[i] - tgt.data()[i];
            want += d * d;
        }
        want /= 35.0;
        assert!((tape.value(loss).item() - want).abs() <= 1e-7);
    }

    #[test]
    fn output_kd_fixed_points() {
        let mut rng = StreamRng::new(4, 0);
        let v: Tensor<f64> = rng.normal_tensor(&[2, 3]);
        let mut tape = Tape::new();
        let s = tape.constant(v.clone());
        let l = output_kd_loss(&mut tape, &v, s).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let shifted = v.map(|x| x + 2.0);
        let l2 = output_kd_loss(&mut tape, &shifted, s).unwrap();
        assert!((tape.value(l2).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn feature_kd_identity_projector_and_zero_map() {
        let mut rng = StreamRng::new(5, 0);
        let feat: Tensor<f64> = rng.normal_tensor(&[2, 3, 2, 2]);
        let mut tape = Tape::new();
        let s = tape.constant(feat.clone());
        let eye = tape.constant(Tensor::eye(3));
        let zb = tape.constant(Tensor::zeros(&[3]));
        let l = feature_kd_loss(&mut tape, &feat, s, eye, zb).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);

        let zw = tape.constant(Tensor::zeros(&[3, 3]));
        let l0 = feature_kd_loss(&mut tape, &feat, s, zw, zb).unwrap();
        let want = feat.sq_norm() / feat.numel() as f64;
        assert!((tape.value(l0).item() - want).abs() < 1e-12);
    }

    #[test]
    fn feature_kd_gradient_matches_finite_differences() {
        use crate::numerics::{finite_diff_grad, rel_l2_error, ParamStore};
        let mut rng = StreamRng::new(6, 0);
        let teacher: Tensor<f64> = rng.normal_tensor(&[2, 3, 2, 2]);
        let student: Tensor<f64> = rng.normal_tensor(&[2, 2, 2, 2]);
        let mut store = ParamStore::<f64>::new();
        store.insert("phi.w", rng.normal_tensor(&[3, 2]));
        store.insert("phi.b", rng.normal_tensor(&[3]));

        let eval = |p: &ParamStore<f64>| -> (Tape<f64>, TensorRef) {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape).unwrap();
            let s = tape.constant(student.clone());
            let l = feature_kd_loss(&mut tape, &teacher, s, bound.get("phi.w"), bound.get("phi.b"))
                .unwrap();
            (tape, l)
        };
        let (tape, l) = eval(&store);
        let grads = tape.backward(l).unwrap();
        let fd = finite_diff_grad(&mut store, 1e-6, |p| {
            let (t, l) = eval(p);
            Ok(t.value(l).item())
        })
        .unwrap();
        for (name, g) in grads.iter() {
            assert!(rel_l2_error(g, &fd[name]) <= 1e-6, "{name}");
        }
    }

    #[test]
    fn schedule_extremes_select_single_terms() {
        let mut tape = Tape::<f64>::new();
        let ld = tape.constant(Tensor::new(&[2], vec![2.0, 2.0]));
        let lo = tape.constant(Tensor::new(&[2], vec![4.0, 4.0]));
        let t = [0.3, 0.8];
        let pure_diff =
            timestep_scaled_kd(&mut tape, ld, lo, &t, &KdSchedule::Constant(0.0)).unwrap();
        assert_eq!(tape.value(pure_diff).item(), 2.0);
        let pure_out =
            timestep_scaled_kd(&mut tape, ld, lo, &t, &KdSchedule::Constant(1.0)).unwrap();
        assert_eq!(tape.value(pure_out).item(), 4.0);
        let half = timestep_scaled_kd(&mut tape, ld, lo, &t, &KdSchedule::Constant(0.5)).unwrap();
        assert_eq!(tape.value(half).item(), 3.0);
    }

    #[test]
    fn per_sample_scaling_commutes_with_batch_mean() {
        // With constant w the combination is linear, so scaling per sample
        // then averaging equals averaging then scaling.
        let mut rng = StreamRng::new(7, 0);
        let ld_t: Tensor<f64> = rng.uniform_tensor(&[6], 0.0, 2.0);
        let lo_t: Tensor<f64> = rng.uniform_tensor(&[6], 0.0, 2.0);
        let t = [0.1, 0.3, 0.5, 0.6, 0.8, 0.9];
        let w = 0.35;
        let mut tape = Tape::new();
        let ld = tape.constant(ld_t.clone());
        let lo = tape.constant(lo_t.clone());
        let got = timestep_scaled_kd(&mut tape, ld, lo, &t, &KdSchedule::Constant(w)).unwrap();
        let want = w * lo_t.data().iter().sum::<f64>() / 6.0
            + (1.0 - w) * ld_t.data().iter().sum::<f64>() / 6.0;
        assert!((tape.value(got).item() - want).abs() < 1e-12);
    }

    #[test]
    fn schedule_table_interpolates_and_validates() {
        let s = KdSchedule::Table(vec![(0.0, 0.2), (0.5, 0.8), (1.0, 0.2)]);
        s.validate().unwrap();
        assert!((s.weight(0.25) - 0.5).abs() < 1e-12);
        assert_eq!(s.weight(0.0), 0.2);
        assert!((s.weight(1.0) - 0.2).abs() < 1e-12);
        assert!(KdSchedule::Constant(1.2).validate().is_err());
        assert!(KdSchedule::Table(vec![(0.5, 0.2), (0.5, 0.4)]).validate().is_err());
    }
}
