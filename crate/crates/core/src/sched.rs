//! Learning-rate and loss-weight schedules: the per-iteration linear
//! decay used with FedSWA local training, its polynomial replacement,
//! and the linear distillation-weight decay.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// eta(i) = eta0 (1 - i/N) + (i/N) delta eta0 over local iterations
    FedswaLinear,
    /// eta(s) = eta [ (1-s)^p + rho (1 - (1-s)^p) ] over progress s
    Polynomial,
    Constant,
}

/// Parameters for all schedule kinds. `eta` is eta0 for the linear
/// decay and eta_ell for the polynomial one; `horizon` is the local
/// iteration count N for the linear decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta: f64,
    /// final-LR factor of the linear decay, in [0, 1]
    pub delta: f64,
    /// polynomial power, >= 0.5 (the equation form asks for >= 1; 0.9
    /// is in common use, so the range is relaxed and recorded)
    pub power: f64,
    /// polynomial floor factor rho, in [0, 1]
    pub rho: f64,
    pub horizon: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Polynomial,
            eta: 5e-5,
            delta: 0.1,
            power: 0.9,
            rho: 0.0,
            horizon: 1,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta {} must be > 0", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::InvalidArgument(format!(
                "delta {} outside [0, 1]",
                self.delta
            )));
        }
        if self.power < 0.5 {
            return Err(Error::InvalidArgument(format!(
                "power {} below 0.5",
                self.power
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear per-iteration decay from eta0 down to delta * eta0 across
/// `spec.horizon` local iterations.
pub fn fedswa_lr(spec: &ScheduleSpec, i: usize) -> Result<f64> {
    if i >= spec.horizon {
        return Err(Error::InvalidArgument(format!(
            "iteration {i} outside [0, {})",
            spec.horizon
        )));
    }
    let frac = i as f64 / spec.horizon as f64;
    Ok(spec.eta * (1.0 - frac) + frac * spec.delta * spec.eta)
}

/// Polynomial decay over a progress fraction in [0, 1]: eta at s = 0,
/// rho * eta at s = 1.
pub fn poly_lr(spec: &ScheduleSpec, progress: f64) -> f64 {
    let s = progress.clamp(0.0, 1.0);
    let base = (1.0 - s).powf(spec.power);
    spec.eta * (base + spec.rho * (1.0 - base))
}

/// Distillation weight: lambda0 at round 0 decaying linearly to 0 at
/// round `total`.
pub fn lambda_mclip(round: usize, total: usize, lambda0: f64) -> f64 {
    if total == 0 {
        return lambda0;
    }
    lambda0 * (1.0 - round as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear(eta: f64, delta: f64, horizon: usize) -> ScheduleSpec {
        ScheduleSpec {
            kind: ScheduleKind::FedswaLinear,
            eta,
            delta,
            horizon,
            ..Default::default()
        }
    }

    fn poly(eta: f64, power: f64, rho: f64) -> ScheduleSpec {
        ScheduleSpec {
            kind: ScheduleKind::Polynomial,
            eta,
            power,
            rho,
            ..Default::default()
        }
    }

    #[test]
    fn fedswa_lr_substitutions() {
        let s = linear(1.0, 0.1, 10);
        assert_eq!(fedswa_lr(&s, 0).unwrap(), 1.0);
        assert!((fedswa_lr(&s, 5).unwrap() - 0.55).abs() < 1e-15);
        assert!((fedswa_lr(&s, 9).unwrap() - 0.19).abs() < 1e-15);
        assert!(fedswa_lr(&s, 10).is_err());
    }

    #[test]
    fn poly_lr_substitutions() {
        let s = poly(2.0, 1.0, 0.0);
        assert!((poly_lr(&s, 0.5) - 1.0).abs() < 1e-15);
        assert_eq!(poly_lr(&s, 0.0), 2.0);
        assert_eq!(poly_lr(&s, 1.0), 0.0);

        let s = poly(1.0, 2.0, 0.1);
        assert!((poly_lr(&s, 0.5) - 0.325).abs() < 1e-15);
        assert!((poly_lr(&s, 1.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lambda_mclip_linear_decay() {
        assert_eq!(lambda_mclip(0, 200, 0.1), 0.1);
        assert_eq!(lambda_mclip(200, 200, 0.1), 0.0);
        assert!((lambda_mclip(100, 200, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn poly_equals_linear_at_power_one() {
        // with p = 1 and rho = delta the polynomial form reduces to the
        // linear one at matched fractions
        let lin = linear(0.7, 0.23, 1000);
        let pol = poly(0.7, 1.0, 0.23);
        for i in 0..1000 {
            let a = fedswa_lr(&lin, i).unwrap();
            let b = poly_lr(&pol, i as f64 / 1000.0);
            assert!((a - b).abs() < 1e-12, "i = {i}: {a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn schedules_monotone_non_increasing(
            eta in 1e-6f64..10.0,
            delta in 0.0f64..1.0,
            power in 0.5f64..4.0,
            rho in 0.0f64..1.0,
            horizon in 2usize..50,
        ) {
            let lin = linear(eta, delta, horizon);
            let mut prev = f64::INFINITY;
            for i in 0..horizon {
                let v = fedswa_lr(&lin, i).unwrap();
                prop_assert!(v <= prev + 1e-15);
                prev = v;
            }
            let pol = poly(eta, power, rho);
            let mut prev = f64::INFINITY;
            for step in 0..=40 {
                let v = poly_lr(&pol, step as f64 / 40.0);
                prop_assert!(v <= prev + 1e-15);
                prev = v;
            }
        }
    }
}
