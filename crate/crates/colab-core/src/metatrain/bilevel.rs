//! The two-level optimization core: one plain gradient step on the inner
//! objective, then a central-difference estimate of the outer gradient with
//! respect to the label-generator parameters.

use crate::error::{Error, Result};
use crate::ndtensor::{GradMap, NetworkParams};

/// The three derivative oracles the estimator needs. Implementations exist
/// for the conv training stack and for closed-form toy problems, so the
/// same estimator code is exercised by both.
pub trait BilevelProblem {
    /// Inner objective and its gradient in the segmenter parameters.
    fn seg_loss_grad_theta(
        &self,
        theta: &NetworkParams,
        omega: &NetworkParams,
    ) -> Result<(f64, GradMap)>;

    /// Inner objective's gradient in the generator parameters.
    fn seg_loss_grad_omega(
        &self,
        theta: &NetworkParams,
        omega: &NetworkParams,
    ) -> Result<(f64, GradMap)>;

    /// Outer objective and its gradient in the segmenter parameters.
    fn roi_loss_grad_theta(&self, theta: &NetworkParams) -> Result<(f64, GradMap)>;
}

pub fn grad_l2(g: &GradMap) -> f64 {
    g.values().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// base + scale * dir, leaving `base` untouched. Entries of `base` missing
/// from `dir` are copied unchanged.
pub fn params_axpy(base: &NetworkParams, dir: &GradMap, scale: f64) -> Result<NetworkParams> {
    let mut out = base.clone_params();
    for (name, d) in dir {
        let p = out
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("direction names unknown parameter {name:?}")))?;
        if p.shape() != d.shape() {
            return Err(Error::shape("params_axpy", format!("{name}: {:?} vs {:?}", p.shape(), d.shape())));
        }
        for (pv, dv) in p.data_mut().iter_mut().zip(d.data()) {
            *pv += scale * dv;
        }
    }
    Ok(out)
}

fn check_finite(g: &GradMap, what: &str) -> Result<()> {
    for (name, t) in g {
        if t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} gradient for {name} is not finite")));
        }
    }
    Ok(())
}

/// One plain (momentum-free) gradient step on the inner objective:
/// theta* = theta - alpha * d L_seg / d theta, computed on this batch.
/// `theta` itself is untouched.
pub fn inner_step(
    problem: &dyn BilevelProblem,
    theta: &NetworkParams,
    omega: &NetworkParams,
    alpha: f64,
) -> Result<NetworkParams> {
    if alpha < 0.0 {
        return Err(Error::invalid(format!("inner step size must be >= 0, got {alpha}")));
    }
    let (_, g) = problem.seg_loss_grad_theta(theta, omega)?;
    check_finite(&g, "inner")?;
    params_axpy(theta, &g, -alpha)
}

/// How the probe size is chosen.
#[derive(Debug, Clone, Copy)]
pub enum EpsRule {
    /// 0.01 / ||d L_ROI / d theta*||, the default.
    Auto,
    /// Fixed value, used by convergence-order tests.
    Fixed(f64),
}

/// Outer-gradient estimate plus diagnostics.
#[derive(Debug, Clone)]
pub struct HyperGrad {
    pub grad: GradMap,
    /// Probe size used; 0 when the outer gradient vanished.
    pub eps: f64,
    pub outer_grad_norm: f64,
    /// True when the outer gradient was zero and the estimate is zero.
    pub vanished: bool,
}

/// Central-difference estimate of d L_ROI(theta*) / d omega through the
/// one-step inner update:
///
///   g      = d L_ROI / d theta at theta*
///   theta+-= theta +- eps * g
///   grad   = -alpha * [dL_seg/domega(theta+) - dL_seg/domega(theta-)] / 2eps
///
/// The sign is such that a descent step on `grad` reduces the outer loss.
/// A vanishing g yields a zero estimate with the `vanished` flag set.
pub fn hypergradient(
    problem: &dyn BilevelProblem,
    theta: &NetworkParams,
    theta_star: &NetworkParams,
    omega: &NetworkParams,
    alpha: f64,
    rule: EpsRule,
) -> Result<HyperGrad> {
    let (_, g) = problem.roi_loss_grad_theta(theta_star)?;
    check_finite(&g, "outer")?;
    let gnorm = grad_l2(&g);
    if gnorm == 0.0 {
        let zeros: GradMap = omega
            .iter()
            .map(|(n, t)| (n.clone(), crate::ndtensor::Tensor::zeros(t.shape().to_vec())))
            .collect();
        return Ok(HyperGrad { grad: zeros, eps: 0.0, outer_grad_norm: 0.0, vanished: true });
    }
    let eps = match rule {
        EpsRule::Auto => 0.01 / gnorm,
        EpsRule::Fixed(e) => {
            if e <= 0.0 {
                return Err(Error::invalid("fixed probe size must be positive"));
            }
            e
        }
    };
    let theta_plus = params_axpy(theta, &g, eps)?;
    let theta_minus = params_axpy(theta, &g, -eps)?;
    let (_, gp) = problem.seg_loss_grad_omega(&theta_plus, omega)?;
    let (_, gm) = problem.seg_loss_grad_omega(&theta_minus, omega)?;
    check_finite(&gp, "probe+")?;
    check_finite(&gm, "probe-")?;

    let mut grad = GradMap::new();
    for (name, p) in &gp {
        let m = gm
            .get(name)
            .ok_or_else(|| Error::invalid(format!("probe gradients disagree on {name:?}")))?;
        let mut t = p.clone();
        for (tv, mv) in t.data_mut().iter_mut().zip(m.data()) {
            *tv = -alpha * (*tv - mv) / (2.0 * eps);
        }
        grad.insert(name.clone(), t);
    }
    check_finite(&grad, "hyper")?;
    Ok(HyperGrad { grad, eps, outer_grad_norm: gnorm, vanished: false })
}

#[cfg(test)]
pub(crate) mod toy {
    use super::*;
    use crate::ndtensor::Tensor;

    /// L_seg = 0.5 (theta - omega)^2, L_ROI = 0.5 theta^2, both scalars.
    pub struct Quadratic;

    fn scalar(p: &NetworkParams, name: &str) -> f64 {
        p.get(name).unwrap().item()
    }

    fn gmap(name: &str, v: f64) -> GradMap {
        let mut g = GradMap::new();
        g.insert(name.to_string(), Tensor::scalar(v));
        g
    }

    impl BilevelProblem for Quadratic {
        fn seg_loss_grad_theta(
            &self,
            theta: &NetworkParams,
            omega: &NetworkParams,
        ) -> Result<(f64, GradMap)> {
            let d = scalar(theta, "theta") - scalar(omega, "omega");
            Ok((0.5 * d * d, gmap("theta", d)))
        }

        fn seg_loss_grad_omega(
            &self,
            theta: &NetworkParams,
            omega: &NetworkParams,
        ) -> Result<(f64, GradMap)> {
            let d = scalar(theta, "theta") - scalar(omega, "omega");
            Ok((0.5 * d * d, gmap("omega", -d)))
        }

        fn roi_loss_grad_theta(&self, theta: &NetworkParams) -> Result<(f64, GradMap)> {
            let t = scalar(theta, "theta");
            Ok((0.5 * t * t, gmap("theta", t)))
        }
    }

    pub fn param(name: &str, v: f64) -> NetworkParams {
        let mut p = NetworkParams::new();
        p.insert(name.to_string(), Tensor::scalar(v));
        p
    }
}

#[cfg(test)]
mod tests {
    use super::toy::{param, Quadratic};
    use super::*;

    /// d L_ROI(theta - alpha dL_seg/dtheta) / d omega by central differences
    /// of the full composite, the independent oracle for the estimator.
    fn composite_oracle(theta0: f64, omega0: f64, alpha: f64, h: f64) -> f64 {
        let eval = |w: f64| {
            let p = Quadratic;
            let theta = param("theta", theta0);
            let omega = param("omega", w);
            let star = inner_step(&p, &theta, &omega, alpha).unwrap();
            p.roi_loss_grad_theta(&star).unwrap().0
        };
        (eval(omega0 + h) - eval(omega0 - h)) / (2.0 * h)
    }

    #[test]
    fn zero_alpha_keeps_theta() {
        let p = Quadratic;
        let star = inner_step(&p, &param("theta", 2.0), &param("omega", 0.0), 0.0).unwrap();
        assert_eq!(star.get("theta").unwrap().item(), 2.0);
    }

    #[test]
    fn quadratic_inner_step_hand_value() {
        let p = Quadratic;
        let star = inner_step(&p, &param("theta", 2.0), &param("omega", 0.0), 0.5).unwrap();
        assert_eq!(star.get("theta").unwrap().item(), 1.0);
    }

    #[test]
    fn step_length_equals_alpha_times_grad_norm() {
        let p = Quadratic;
        let theta = param("theta", 3.0);
        let omega = param("omega", 1.0);
        let (_, g) = p.seg_loss_grad_theta(&theta, &omega).unwrap();
        let star = inner_step(&p, &theta, &omega, 0.25).unwrap();
        let moved = (star.get("theta").unwrap().item() - 3.0).abs();
        assert!((moved - 0.25 * grad_l2(&g)).abs() < 1e-15);
    }

    #[test]
    fn toy_hypergradient_matches_hand_value_and_oracle() {
        let p = Quadratic;
        let (theta0, omega0, alpha) = (2.0, 0.0, 0.5);
        let theta = param("theta", theta0);
        let omega = param("omega", omega0);
        let star = inner_step(&p, &theta, &omega, alpha).unwrap();
        let hg = hypergradient(&p, &theta, &star, &omega, alpha, EpsRule::Auto).unwrap();
        let est = hg.grad.get("omega").unwrap().item();

        // composite is exactly linear in omega here, so the hand value is
        // alpha * theta* = 0.5
        assert!((est - 0.5).abs() <= 1e-9, "estimate {est}");

        let oracle = composite_oracle(theta0, omega0, alpha, 1e-6);
        let rel = (est - oracle).abs() / oracle.abs();
        assert!(rel <= 1e-3, "estimate {est}, oracle {oracle}");
        assert!(!hg.vanished);
    }

    #[test]
    fn descent_on_hypergradient_reduces_outer_loss() {
        let p = Quadratic;
        let alpha = 0.5;
        let mut omega = param("omega", 0.0);
        let theta = param("theta", 2.0);
        let outer = |w: &NetworkParams| {
            let star = inner_step(&p, &theta, w, alpha).unwrap();
            p.roi_loss_grad_theta(&star).unwrap().0
        };
        let before = outer(&omega);
        for _ in 0..200 {
            let star = inner_step(&p, &theta, &omega, alpha).unwrap();
            let hg = hypergradient(&p, &theta, &star, &omega, alpha, EpsRule::Auto).unwrap();
            omega = params_axpy(&omega, &hg.grad, -1e-1).unwrap();
        }
        let after = outer(&omega);
        assert!(after < 1e-3 * before, "outer loss {before} -> {after}");
    }

    #[test]
    fn vanished_outer_gradient_returns_zeros() {
        let p = Quadratic;
        // theta* = 0 exactly: theta=2, omega=-2, alpha=0.5 gives
        // theta* = 2 - 0.5*4 = 0, so dL_ROI/dtheta* = 0
        let theta = param("theta", 2.0);
        let omega = param("omega", -2.0);
        let star = inner_step(&p, &theta, &omega, 0.5).unwrap();
        assert_eq!(star.get("theta").unwrap().item(), 0.0);
        let hg = hypergradient(&p, &theta, &star, &omega, 0.5, EpsRule::Auto).unwrap();
        assert!(hg.vanished);
        assert_eq!(hg.grad.get("omega").unwrap().item(), 0.0);
    }

    #[test]
    fn estimator_error_shrinks_like_eps_squared() {
        // on a problem with curvature in omega the probe error is O(eps^2);
        // halving eps must shrink the deviation by about 4 (Richardson)
        struct Cubic;
        impl BilevelProblem for Cubic {
            fn seg_loss_grad_theta(
                &self,
                theta: &NetworkParams,
                omega: &NetworkParams,
            ) -> Result<(f64, GradMap)> {
                let t = theta.get("theta").unwrap().item();
                let w = omega.get("omega").unwrap().item();
                // dL_seg/dtheta = t - w^3: nonlinear coupling
                let mut g = GradMap::new();
                g.insert("theta".into(), crate::ndtensor::Tensor::scalar(t - w * w * w));
                Ok((0.0, g))
            }
            fn seg_loss_grad_omega(
                &self,
                theta: &NetworkParams,
                omega: &NetworkParams,
            ) -> Result<(f64, GradMap)> {
                let t = theta.get("theta").unwrap().item();
                let w = omega.get("omega").unwrap().item();
                // cubic in theta so the central difference carries a genuine
                // O(eps^2) term
                let mut g = GradMap::new();
                g.insert(
                    "omega".into(),
                    crate::ndtensor::Tensor::scalar(-3.0 * w * w * t * t * t + w),
                );
                Ok((0.0, g))
            }
            fn roi_loss_grad_theta(&self, theta: &NetworkParams) -> Result<(f64, GradMap)> {
                let t = theta.get("theta").unwrap().item();
                let mut g = GradMap::new();
                g.insert("theta".into(), crate::ndtensor::Tensor::scalar(t));
                Ok((0.5 * t * t, g))
            }
        }
        let p = Cubic;
        let alpha = 0.3;
        let theta = param("theta", 1.3);
        let omega = param("omega", 0.7);
        let star = inner_step(&p, &theta, &omega, alpha).unwrap();

        let est = |eps: f64| {
            hypergradient(&p, &theta, &star, &omega, alpha, EpsRule::Fixed(eps))
                .unwrap()
                .grad
                .get("omega")
                .unwrap()
                .item()
        };
        let e1 = est(1e-2);
        let e2 = est(5e-3);
        let e3 = est(2.5e-3);
        // second difference ratio ~= 4 for an O(eps^2) estimator
        let r = (e1 - e2) / (e2 - e3);
        assert!((r - 4.0).abs() <= 0.5, "Richardson ratio {r}");
    }
}
