//! Linear flow-matching schedule `x_t = (1 − t)·x + t·ε`, the consistency
//! parameterization `f(x_t, t) = x_t − t·F(x_t, t)`, and the velocity-to-score
//! identity.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default lower end of the training time range.
pub const T_MIN: f64 = 0.002;
/// Default upper end of the training time range.
pub const T_MAX: f64 = 0.998;

/// A time in `[0, 1]`; `0` is data, `1` is pure noise.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&t) {
            Ok(Self(t))
        } else {
            Err(Error::invalid(format!("time {t} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Signal coefficient α(t) = 1 − t.
pub fn alpha(t: f64) -> f64 {
    1.0 - t
}

/// Noise coefficient σ(t) = t.
pub fn sigma(t: f64) -> f64 {
    t
}

pub fn interpolate(x: &Tensor, eps: &Tensor, t: TimePoint) -> Result<Tensor> {
    let t = t.get();
    x.zip_map(eps, "interpolate", |a, e| alpha(t) * a + sigma(t) * e)
}

/// Per-row interpolation: row `i` uses time `t[i]`.
pub fn interpolate_rows(x: &Tensor, eps: &Tensor, t: &[f64]) -> Result<Tensor> {
    x.check_same_shape(eps, "interpolate")?;
    check_rows(x, t, "interpolate")?;
    let c = x.cols();
    let mut out = x.clone();
    for (r, &tr) in t.iter().enumerate() {
        let o = &mut out.data_mut()[r * c..(r + 1) * c];
        o.iter_mut()
            .zip(eps.row(r))
            .for_each(|(a, e)| *a = alpha(tr) * *a + sigma(tr) * e);
    }
    Ok(out)
}

/// Flow-matching regression target `ε − x`.
pub fn velocity_target(x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    x.zip_map(eps, "velocity_target", |a, e| e - a)
}

/// Consistency output `x_t − t·F`.
pub fn cm_apply(f_out: &Tensor, x_t: &Tensor, t: TimePoint) -> Result<Tensor> {
    let t = t.get();
    if t == 0.0 {
        x_t.check_same_shape(f_out, "cm_apply")?;
        return Ok(x_t.clone());
    }
    x_t.zip_map(f_out, "cm_apply", |x, f| x - t * f)
}

/// Differentiable consistency output with per-row times.
pub fn cm_apply_var<'t>(f_out: Var<'t>, x_t: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
    let neg_t: Vec<f64> = t.iter().map(|&v| -v).collect();
    x_t.add(f_out.scale_rows(&neg_t)?)
}

/// Score of the marginal `∇log p(x_t) = −(x_t + (1 − t)·F)/t`.
pub fn score_from_velocity(f_out: &Tensor, x_t: &Tensor, t: TimePoint) -> Result<Tensor> {
    let t = t.get();
    if t == 0.0 {
        return Err(Error::invalid("score_from_velocity is undefined at t = 0"));
    }
    x_t.zip_map(f_out, "score_from_velocity", |x, f| -(x + (1.0 - t) * f) / t)
}

pub(crate) fn check_rows(x: &Tensor, t: &[f64], op: &'static str) -> Result<()> {
    if x.rows() != t.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: vec![t.len()],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f64) -> TimePoint {
        TimePoint::new(v).unwrap()
    }

    fn v(d: &[f64]) -> Tensor {
        Tensor::new(vec![d.len()], d.to_vec()).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!((alpha(0.0), alpha(1.0), sigma(0.0), sigma(1.0)), (1.0, 0.0, 0.0, 1.0));
        assert!(TimePoint::new(1.5).is_err());
        assert!(TimePoint::new(-0.1).is_err());
    }

    #[test]
    fn interpolate_cases() {
        let x = v(&[2.0, -1.0]);
        let e = v(&[0.0, 4.0]);
        assert_eq!(interpolate(&x, &e, t(0.0)).unwrap(), x);
        assert_eq!(interpolate(&x, &e, t(1.0)).unwrap(), e);
        assert_eq!(interpolate(&v(&[2.0]), &v(&[0.0]), t(0.25)).unwrap().data(), &[1.5]);
        assert!(interpolate(&x, &v(&[1.0]), t(0.5)).is_err());
    }

    #[test]
    fn interpolation_is_affine_in_t() {
        let x = v(&[0.3, -1.7, 2.2]);
        let e = v(&[1.1, 0.4, -0.9]);
        let h = 0.01;
        for k in 1..99 {
            let tc = k as f64 / 100.0;
            let lo = interpolate(&x, &e, t(tc - h * 0.5)).unwrap();
            let mid = interpolate(&x, &e, t(tc)).unwrap();
            let hi = interpolate(&x, &e, t(tc + h * 0.5)).unwrap();
            for i in 0..3 {
                let second = hi.data()[i] - 2.0 * mid.data()[i] + lo.data()[i];
                assert!(second.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn velocity_target_is_time_derivative() {
        let x = v(&[1.0]);
        let e = v(&[3.0]);
        assert_eq!(velocity_target(&x, &e).unwrap().data(), &[2.0]);
        assert_eq!(velocity_target(&e, &e).unwrap().data(), &[0.0]);
        let h = 1e-6;
        for tc in [0.1, 0.5, 0.9] {
            let d = (interpolate(&x, &e, t(tc + h)).unwrap().data()[0]
                - interpolate(&x, &e, t(tc - h)).unwrap().data()[0])
                / (2.0 * h);
            assert!((d - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn cm_apply_cases() {
        let x_t = v(&[0.5, -2.0]);
        let f = v(&[9.0, 3.0]);
        assert_eq!(cm_apply(&f, &x_t, t(0.0)).unwrap(), x_t);
        assert_eq!(cm_apply(&Tensor::zeros(vec![2]), &x_t, t(0.4)).unwrap(), x_t);
        // t = 1, x_1 = ε, F = ε − x recovers x
        let x = v(&[1.25, -0.5]);
        let eps = v(&[0.75, 2.0]);
        let f = velocity_target(&x, &eps).unwrap();
        assert_eq!(cm_apply(&f, &eps, t(1.0)).unwrap(), x);
    }

    #[test]
    fn score_cases() {
        let x_t = v(&[1.5, -0.25]);
        assert_eq!(
            score_from_velocity(&v(&[7.0, 7.0]), &x_t, t(1.0)).unwrap(),
            x_t.scale(-1.0)
        );
        let tc = 0.3;
        let f = x_t.scale(-1.0 / (1.0 - tc));
        let s = score_from_velocity(&f, &x_t, t(tc)).unwrap();
        assert!(s.max_abs() < 1e-15);
        assert!(score_from_velocity(&f, &x_t, t(0.0)).is_err());
    }

    #[test]
    fn score_of_gaussian_optimal_velocity() {
        for &tc in &[0.05, 0.3, 0.5, 0.77, 0.99] {
            let den = (1.0 - tc) * (1.0 - tc) + tc * tc;
            let x_t = v(&[0.8, -1.3]);
            let f = x_t.scale((2.0 * tc - 1.0) / den);
            let s = score_from_velocity(&f, &x_t, t(tc)).unwrap();
            let expect = x_t.scale(-1.0 / den);
            for (a, b) in s.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
