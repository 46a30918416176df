//! Kinematically feasible data augmentation: every augmented trajectory is
//! the rollout of a bounded control sequence, optimized to deviate along a
//! chosen direction while keeping away from the other agents.

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::kinematics::{self, BicycleState, Bounds, ControlSequence, KinematicsError};
use crate::nn::{Adam, AdamConfig};
use crate::scene::geometry::{on_road, Point};
use crate::scene::{AgentControls, Scene, SceneError};
use crate::{seed, Graph, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum AugError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("direction {0:?} is not a unit vector")]
    NonUnitDirection([f64; 2]),
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, AugError>;

/// Deviation directions in the agent's initial heading frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
    Left,
    Right,
}

impl Direction {
    pub fn unit(self, heading: f64) -> [f64; 2] {
        let (s, c) = heading.sin_cos();
        match self {
            Direction::Forward => [c, s],
            Direction::Backward => [-c, -s],
            Direction::Left => [-s, c],
            Direction::Right => [s, -c],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub gamma: f64,
    pub directions: Vec<Direction>,
    /// Per-coordinate bound on |X_aug − X| in meters.
    pub clip: f64,
    pub steps: usize,
    pub fit_steps: usize,
    /// Initial step in normalized control units.
    pub step_size: f64,
    pub bounds: Bounds,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            directions: vec![Direction::Forward, Direction::Backward, Direction::Left, Direction::Right],
            clip: 1.0,
            steps: 60,
            fit_steps: 300,
            step_size: 0.2,
            bounds: Bounds::default(),
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(AugError::Config("gamma must be >= 0".into()));
        }
        if !(self.clip > 0.0) {
            return Err(AugError::Config("clip must be > 0".into()));
        }
        if self.directions.is_empty() {
            return Err(AugError::Config("direction set is empty".into()));
        }
        Ok(())
    }
}

fn scalar(g: &mut Graph, v: f64) -> Var {
    g.constant(Tensor::full(&[1, 1], v))
}

/// Differentiable rollout: positions `[L + 1, 2]` from controls given as
/// `[1, L]` rows. Same update order as [`kinematics::step`].
pub fn rollout_graph(g: &mut Graph, init: &BicycleState, kappa_rate: Var, accel: Var, dt: f64) -> Result<Var> {
    Ok(rollout_graph_with_speed(g, init, kappa_rate, accel, dt)?.0)
}

/// As [`rollout_graph`], also returning speeds `[L + 1, 1]`.
pub fn rollout_graph_with_speed(g: &mut Graph, init: &BicycleState, kappa_rate: Var, accel: Var, dt: f64) -> Result<(Var, Var)> {
    let steps = g.shape(accel)[1];
    let mut v = scalar(g, init.v);
    let mut psi = scalar(g, init.psi);
    let mut kappa = scalar(g, init.kappa);
    let mut px = scalar(g, init.p[0]);
    let mut py = scalar(g, init.p[1]);
    let first = g.concat(&[px, py], 1)?;
    let mut rows = vec![first];
    let mut speeds = vec![v];
    for t in 0..steps {
        let a = g.slice(accel, 1, t, 1)?;
        let kr = g.slice(kappa_rate, 1, t, 1)?;
        let adt = g.scale(a, dt);
        v = g.add(v, adt)?;
        speeds.push(v);
        let vk = g.mul(v, kappa)?;
        let dpsi = g.scale(vk, dt);
        psi = g.add(psi, dpsi)?;
        let dk = g.scale(kr, dt);
        kappa = g.add(kappa, dk)?;
        let c = g.cos(psi);
        let s = g.sin(psi);
        let vc = g.mul(v, c)?;
        let vs = g.mul(v, s)?;
        let dx = g.scale(vc, dt);
        let dy = g.scale(vs, dt);
        px = g.add(px, dx)?;
        py = g.add(py, dy)?;
        rows.push(g.concat(&[px, py], 1)?);
    }
    Ok((g.concat(&rows, 0)?, g.concat(&speeds, 0)?))
}

fn check_unit(d: [f64; 2]) -> Result<()> {
    if ((d[0] * d[0] + d[1] * d[1]).sqrt() - 1.0).abs() > 1e-9 {
        return Err(AugError::NonUnitDirection(d));
    }
    Ok(())
}

/// `Σ_t (X_t − X_aug,t) · d̄` for `X_aug` of shape `[L, 2]`.
pub fn loss_deviation(g: &mut Graph, x: &[Point], x_aug: Var, d: [f64; 2]) -> Result<Var> {
    check_unit(d)?;
    let base: f64 = x.iter().map(|p| p[0] * d[0] + p[1] * d[1]).sum();
    let dv = g.constant(Tensor::matrix(2, 1, d.to_vec())?);
    let proj = g.matmul(x_aug, dv)?;
    let s = g.sum(proj);
    let n = g.neg(s);
    Ok(g.offset(n, base))
}

/// `(1/(n−1)) Σ_i 1/(mean_t ‖X_aug,t − X_i,t‖ + 1)`; zero without others.
pub fn loss_collision(g: &mut Graph, x_aug: Var, others: &[Vec<Point>]) -> Result<Var> {
    let rows = g.shape(x_aug)[0];
    if others.is_empty() {
        return Ok(scalar(g, 0.0));
    }
    let mut acc: Option<Var> = None;
    for o in others {
        let ov = g.constant(Tensor::matrix(rows, 2, o.iter().flatten().copied().collect())?);
        let diff = g.sub(x_aug, ov)?;
        let mut dsum: Option<Var> = None;
        for t in 0..rows {
            let r = g.slice(diff, 0, t, 1)?;
            let n = g.norm(r);
            dsum = Some(match dsum {
                None => n,
                Some(s) => g.add(s, n)?,
            });
        }
        let mean = g.scale(dsum.unwrap(), 1.0 / rows as f64);
        let shifted = g.offset(mean, 1.0);
        let l = g.log(shifted)?;
        let nl = g.neg(l);
        let inv = g.exp(nl)?;
        acc = Some(match acc {
            None => inv,
            Some(a) => g.add(a, inv)?,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / others.len() as f64))
}

fn positions_var(g: &mut Graph, pts: &[Point]) -> Result<Var> {
    Ok(g.constant(Tensor::matrix(pts.len(), 2, pts.iter().flatten().copied().collect())?))
}

/// Value-only deviation loss.
pub fn deviation_value(x: &[Point], x_aug: &[Point], d: [f64; 2]) -> Result<f64> {
    let mut g = Graph::new();
    let xa = positions_var(&mut g, x_aug)?;
    let l = loss_deviation(&mut g, x, xa, d)?;
    Ok(g.scalar(l))
}

/// Value-only collision loss.
pub fn collision_value(x_aug: &[Point], others: &[Vec<Point>]) -> Result<f64> {
    let mut g = Graph::new();
    let xa = positions_var(&mut g, x_aug)?;
    let l = loss_collision(&mut g, xa, others)?;
    Ok(g.scalar(l))
}

/// Initial state read off the first three positions.
pub fn initial_state(traj: &[Point], dt: f64, bounds: &Bounds) -> BicycleState {
    let d0 = [traj[1][0] - traj[0][0], traj[1][1] - traj[0][1]];
    let v = d0[0].hypot(d0[1]) / dt;
    let psi = d0[1].atan2(d0[0]);
    let kappa = if traj.len() > 2 && v > 1e-6 {
        let d1 = [traj[2][0] - traj[1][0], traj[2][1] - traj[1][1]];
        let mut dpsi = d1[1].atan2(d1[0]) - psi;
        dpsi = (dpsi + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
        (dpsi / (v * dt)).clamp(-bounds.kappa_max, bounds.kappa_max)
    } else {
        0.0
    };
    BicycleState { p: traj[0], psi, v, kappa, a: 0.0 }
}

/// Controls in normalized units `u = control / bound`.
struct Unit {
    kr: Vec<f64>,
    a: Vec<f64>,
}

impl Unit {
    fn from_controls(c: &ControlSequence, b: &Bounds) -> Self {
        Self {
            kr: c.kappa_rate.iter().map(|v| v / b.kappa_rate_max).collect(),
            a: c.accel.iter().map(|v| v / b.accel_max).collect(),
        }
    }

    fn to_controls(&self, b: &Bounds) -> ControlSequence {
        ControlSequence {
            kappa_rate: self.kr.iter().map(|v| v * b.kappa_rate_max).collect(),
            accel: self.a.iter().map(|v| v * b.accel_max).collect(),
        }
    }
}

/// Value and control gradient (in normalized units) of `loss(positions)`.
fn value_grad(
    init: &BicycleState,
    c: &ControlSequence,
    dt: f64,
    b: &Bounds,
    loss: &dyn Fn(&mut Graph, Var) -> Result<Var>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let l = c.len();
    let kr = g.leaf(Tensor::matrix(1, l, c.kappa_rate.clone())?);
    let a = g.leaf(Tensor::matrix(1, l, c.accel.clone())?);
    let pos = rollout_graph(&mut g, init, kr, a, dt)?;
    let v = loss(&mut g, pos)?;
    let grads = g.backward(v)?;
    let gk = grads.wrt(&g, kr).data().iter().map(|x| x * b.kappa_rate_max).collect();
    let ga = grads.wrt(&g, a).data().iter().map(|x| x * b.accel_max).collect();
    Ok((g.scalar(v), gk, ga))
}

fn sq_error_loss(target: &[Point]) -> impl Fn(&mut Graph, Var) -> Result<Var> + '_ {
    move |g: &mut Graph, pos: Var| {
        let t = positions_var(g, target)?;
        let d = g.sub(pos, t)?;
        Ok(g.sqnorm(d))
    }
}

/// Least-squares fit of bounded controls to `traj` from its initial state.
pub fn fit_controls(traj: &[Point], dt: f64, cfg: &AugConfig) -> Result<(BicycleState, ControlSequence)> {
    let b = &cfg.bounds;
    let init = initial_state(traj, dt, b);
    let l = traj.len() - 1;
    let speeds: Vec<f64> = traj.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) / dt).collect();
    let mut c = ControlSequence::zeros(l);
    for t in 1..l {
        c.accel[t] = (speeds[t] - speeds[t - 1]) / dt;
    }
    kinematics::make_feasible(&init, &mut c, dt, b);
    let mut opt: Adam = Adam::new(AdamConfig { lr: 0.02, ..AdamConfig::default() });
    let loss = sq_error_loss(traj);
    let mut best = (value_grad(&init, &c, dt, b, &loss)?.0, c.clone());
    for _ in 0..cfg.fit_steps {
        let (v, gk, ga) = value_grad(&init, &c, dt, b, &loss)?;
        if v < best.0 {
            best = (v, c.clone());
        }
        let mut u = Unit::from_controls(&c, b);
        opt.update("kr", &mut u.kr, &gk);
        opt.update("a", &mut u.a, &ga);
        c = u.to_controls(b);
        kinematics::make_feasible(&init, &mut c, dt, b);
    }
    let (v, _, _) = value_grad(&init, &c, dt, b, &loss)?;
    if v < best.0 {
        best = (v, c);
    }
    Ok((init, best.1))
}

fn max_coord_dev(a: &[Point], b: &[Point]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).abs().max((p[1] - q[1]).abs())).fold(0.0, f64::max)
}

/// Off-road points are only allowed where the original was off-road too.
fn stays_on_road(aug: &[Point], orig: &[Point], lanes: &[Vec<Point>]) -> bool {
    lanes.is_empty() || aug.iter().zip(orig).all(|(p, q)| on_road(*p, lanes) || !on_road(*q, lanes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentAug {
    pub agent: usize,
    pub direction: Direction,
    pub modified: bool,
    pub warm_loss: f64,
    pub final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub scene: Scene,
    pub agents: Vec<AgentAug>,
}

impl Augmented {
    pub fn warm_loss(&self) -> f64 {
        self.agents.iter().map(|a| a.warm_loss).sum()
    }

    pub fn final_loss(&self) -> f64 {
        self.agents.iter().map(|a| a.final_loss).sum()
    }
}

/// Augments every agent of `scene`: warm-start fit, seeded direction, then
/// descent on `L_d + γ L_col` over the controls. Iterates are accepted
/// only when they lower the loss, stay within the clip and do not leave
/// the road, so the result is never worse than the warm start. Other
/// agents enter the collision term with their original trajectories.
pub fn augment_scene(scene: &Scene, cfg: &AugConfig, seed: u64) -> Result<Augmented> {
    cfg.validate()?;
    let dt = scene.dt();
    let b = &cfg.bounds;
    let h = scene.history_len();
    let n = scene.num_agents();
    let trajs: Vec<Vec<Point>> = (0..n).map(|i| scene.trajectory(i)).collect();
    let mut new_trajs = trajs.clone();
    let mut controls = vec![None; n];
    let mut agents = Vec::with_capacity(n);
    for i in 0..n {
        use rand::Rng as _;
        let direction = cfg.directions[seed::rng_for(seed, "direction", i as u64).random_range(0..cfg.directions.len())];
        let x = &trajs[i];
        let others: Vec<Vec<Point>> = trajs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, t)| t.clone()).collect();
        let (init, mut c) = fit_controls(x, dt, cfg)?;
        let d = direction.unit(init.psi);
        let loss = |g: &mut Graph, pos: Var| -> Result<Var> {
            let ld = loss_deviation(g, x, pos, d)?;
            let lc = loss_collision(g, pos, &others)?;
            let lc = g.scale(lc, cfg.gamma);
            Ok(g.add(ld, lc)?)
        };
        let warm_pos = kinematics::positions(&kinematics::rollout(&init, &c, dt, b)?);
        let warm_dev = max_coord_dev(&warm_pos, x);
        let (warm_loss, _, _) = value_grad(&init, &c, dt, b, &loss)?;
        if warm_dev > cfg.clip || !stays_on_road(&warm_pos, x, scene.lanes()) {
            let warning = format!("agent {i}: warm start deviates {warm_dev:.3} m or leaves the road; left unmodified");
            log::warn!("{warning}");
            let orig = deviation_value(x, x, d)? + cfg.gamma * collision_value(x, &others)?;
            agents.push(AgentAug { agent: i, direction, modified: false, warm_loss: orig, final_loss: orig, warning: Some(warning) });
            continue;
        }
        let mut best = warm_loss;
        let mut step = cfg.step_size;
        for _ in 0..cfg.steps {
            let (_, gk, ga) = value_grad(&init, &c, dt, b, &loss)?;
            let scale = gk.iter().chain(&ga).fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 || step < 1e-6 {
                break;
            }
            let mut u = Unit::from_controls(&c, b);
            u.kr.iter_mut().zip(&gk).for_each(|(v, g)| *v -= step * g / scale);
            u.a.iter_mut().zip(&ga).for_each(|(v, g)| *v -= step * g / scale);
            let mut cand = u.to_controls(b);
            kinematics::make_feasible(&init, &mut cand, dt, b);
            let pos = kinematics::positions(&kinematics::rollout(&init, &cand, dt, b)?);
            let (val, _, _) = value_grad(&init, &cand, dt, b, &loss)?;
            if val < best && max_coord_dev(&pos, x) <= cfg.clip && stays_on_road(&pos, x, scene.lanes()) {
                best = val;
                c = cand;
            } else {
                step *= 0.5;
            }
        }
        let pos = kinematics::positions(&kinematics::rollout(&init, &c, dt, b)?);
        new_trajs[i] = pos;
        controls[i] = Some(AgentControls { init, controls: c });
        agents.push(AgentAug { agent: i, direction, modified: true, warm_loss, final_loss: best, warning: None });
    }
    let history = new_trajs.iter().map(|t| t[..h].to_vec()).collect();
    let future = new_trajs.iter().map(|t| t[h..].to_vec()).collect();
    let out = scene.with_trajectories(history, future)?.with_controls(controls)?;
    Ok(Augmented { scene: out, agents })
}

/// Re-rolls stored controls and returns the largest position error.
pub fn verify_controls(scene: &Scene, bounds: &Bounds) -> Result<f64> {
    let mut worst = 0.0f64;
    if let Some(ctrls) = scene.controls() {
        for (i, c) in ctrls.iter().enumerate() {
            if let Some(ac) = c {
                let pos = kinematics::positions(&kinematics::rollout(&ac.init, &ac.controls, scene.dt(), bounds)?);
                let traj = scene.trajectory(i);
                if pos.len() != traj.len() {
                    return Err(AugError::Config(format!("agent {i}: {} controls for {} positions", ac.controls.len(), traj.len())));
                }
                worst = worst.max(pos.iter().zip(&traj).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).fold(0.0, f64::max));
            }
        }
    }
    Ok(worst)
}
