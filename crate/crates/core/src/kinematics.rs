//! Kinematic bicycle model shared by augmentation and the ego vehicle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::geometry::Point;
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds<T = f64> {
    pub kappa_max: T,
    pub accel_max: T,
    pub kappa_rate_max: T,
}

impl<T: Scalar> Default for Bounds<T> {
    fn default() -> Self {
        Self { kappa_max: T::lit(0.2), accel_max: T::lit(4.0), kappa_rate_max: T::lit(0.1) }
    }
}

/// Integration state. `psi` and `v` close the {p, κ, a} triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BicycleState<T = f64> {
    pub p: Point<T>,
    pub psi: T,
    pub v: T,
    pub kappa: T,
    pub a: T,
}

/// Per-step curvature rate and acceleration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence<T = f64> {
    pub kappa_rate: Vec<T>,
    pub accel: Vec<T>,
}

impl<T: Scalar> ControlSequence<T> {
    pub fn zeros(steps: usize) -> Self {
        Self { kappa_rate: vec![T::zero(); steps], accel: vec![T::zero(); steps] }
    }

    pub fn len(&self) -> usize {
        self.accel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accel.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("step {step}: {what} = {value} exceeds bound {bound}")]
    Bound { step: usize, what: &'static str, value: f64, bound: f64 },
    #[error("step {step}: speed became negative ({value})")]
    NegativeSpeed { step: usize, value: f64 },
    #[error("control sequence lengths differ: kappa_rate {kappa_rate}, accel {accel}")]
    Length { kappa_rate: usize, accel: usize },
    #[error("initial state out of bounds: {0}")]
    Initial(String),
}

const SLACK: f64 = 1e-12;

/// One forward-Euler step: v, then ψ, then κ, then p.
#[inline]
pub fn step<T: Scalar>(s: &BicycleState<T>, kappa_rate: T, accel: T, dt: T) -> BicycleState<T> {
    let v = s.v + accel * dt;
    let psi = s.psi + v * s.kappa * dt;
    let kappa = s.kappa + kappa_rate * dt;
    let p = [s.p[0] + v * psi.cos() * dt, s.p[1] + v * psi.sin() * dt];
    BicycleState { p, psi, v, kappa, a: accel }
}

fn check<T: Scalar>(step: usize, what: &'static str, value: T, bound: T) -> Result<(), KinematicsError> {
    if value.abs().as_f64() > bound.as_f64() + SLACK {
        return Err(KinematicsError::Bound { step, what, value: value.as_f64(), bound: bound.as_f64() });
    }
    Ok(())
}

/// Rolls the controls out from `init`, returning `len + 1` states
/// (the initial state first). Every control and every visited state is
/// checked against `bounds`.
pub fn rollout<T: Scalar>(
    init: &BicycleState<T>,
    controls: &ControlSequence<T>,
    dt: T,
    bounds: &Bounds<T>,
) -> Result<Vec<BicycleState<T>>, KinematicsError> {
    if controls.kappa_rate.len() != controls.accel.len() {
        return Err(KinematicsError::Length { kappa_rate: controls.kappa_rate.len(), accel: controls.accel.len() });
    }
    if init.kappa.abs().as_f64() > bounds.kappa_max.as_f64() + SLACK || init.v < T::zero() {
        return Err(KinematicsError::Initial(format!("kappa {}, v {}", init.kappa, init.v)));
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*init);
    let mut s = *init;
    for (t, (&kr, &a)) in controls.kappa_rate.iter().zip(&controls.accel).enumerate() {
        check(t, "kappa_rate", kr, bounds.kappa_rate_max)?;
        check(t, "accel", a, bounds.accel_max)?;
        s = step(&s, kr, a, dt);
        if s.v.as_f64() < -SLACK {
            return Err(KinematicsError::NegativeSpeed { step: t, value: s.v.as_f64() });
        }
        check(t, "kappa", s.kappa, bounds.kappa_max)?;
        states.push(s);
    }
    Ok(states)
}

pub fn positions<T: Scalar>(states: &[BicycleState<T>]) -> Vec<Point<T>> {
    states.iter().map(|s| s.p).collect()
}

/// Clamps controls so the rollout stays inside `bounds`: controls are
/// clipped to their boxes, acceleration is raised where speed would go
/// negative, and curvature rate is limited so |κ| never leaves its bound.
pub fn make_feasible<T: Scalar>(init: &BicycleState<T>, controls: &mut ControlSequence<T>, dt: T, bounds: &Bounds<T>) {
    let mut s = *init;
    for t in 0..controls.len() {
        let mut a = controls.accel[t].max(-bounds.accel_max).min(bounds.accel_max);
        if s.v + a * dt < T::zero() {
            a = (-s.v / dt).max(-bounds.accel_max);
        }
        let mut kr = controls.kappa_rate[t].max(-bounds.kappa_rate_max).min(bounds.kappa_rate_max);
        let hi = (bounds.kappa_max - s.kappa) / dt;
        let lo = (-bounds.kappa_max - s.kappa) / dt;
        kr = kr.max(lo).min(hi);
        controls.accel[t] = a;
        controls.kappa_rate[t] = kr;
        s = step(&s, kr, a, dt);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feasible_projection_is_accepted_by_rollout() {
        let init: BicycleState = BicycleState { p: [0.0, 0.0], psi: 0.0, v: 1.0, kappa: 0.19, a: 0.0 };
        let mut c = ControlSequence { kappa_rate: vec![5.0; 20], accel: vec![-9.0; 20] };
        let b = Bounds::default();
        assert!(rollout(&init, &c, 0.5, &b).is_err());
        make_feasible(&init, &mut c, 0.5, &b);
        let states = rollout(&init, &c, 0.5, &b).unwrap();
        assert!(states.iter().all(|s| s.v >= 0.0 && s.kappa.abs() <= 0.2 + 1e-12));
    }
}
