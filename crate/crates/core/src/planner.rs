//! Closed-loop planning harness: lattice sampling along a route, risk
//! scoring against predicted futures, MPC tracking and ground-truth replay
//! of the other agents.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{pgd, AttackConfig, SequenceObjective};
use crate::augmentation::{rollout_graph_with_speed, AugError};
use crate::autodiff::AutodiffError;
use crate::kinematics::{self, BicycleState, Bounds, ControlSequence, KinematicsError};
use crate::nn::{Adam, AdamConfig};
use crate::predictor::{predict_batch, Batch, Predictor, PredictorError};
use crate::scene::geometry::{dist, line, on_road, Point, Polyline};
use crate::scene::{PredictionSet, Scene, SceneError};
use crate::{seed, Graph, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Aug(#[from] AugError),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("invalid planner config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PlannerError>;

/// Ego state: position, heading, speed (plus curvature and the last
/// acceleration for the bicycle integration).
pub type EgoState = BicycleState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Lateral offsets per speed level; must be odd.
    pub num_offsets: usize,
    pub offset_spacing: f64,
    /// Arclength over which a path blends to its terminal offset.
    pub lookahead: f64,
    /// Speed levels as fractions of the target speed.
    pub speed_factors: Vec<f64>,
    pub profile_accel: f64,
    /// Planning horizon in steps.
    pub horizon: usize,
    pub mpc_horizon: usize,
    pub mpc_iters: usize,
    pub mpc_lr: f64,
    pub w_c: f64,
    pub w_p: f64,
    pub w_o: f64,
    pub sigma_c: f64,
    /// Disc radius of every vehicle.
    pub radius: f64,
    pub bounds: Bounds,
    /// Predicted candidates per step.
    pub k: usize,
    pub lp: usize,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            num_offsets: 5,
            offset_spacing: 0.5,
            lookahead: 15.0,
            speed_factors: vec![1.0, 0.5, 0.0],
            profile_accel: 3.0,
            horizon: 12,
            mpc_horizon: 6,
            mpc_iters: 60,
            mpc_lr: 0.1,
            w_c: 10.0,
            w_p: 1.0,
            w_o: 100.0,
            sigma_c: 2.0,
            radius: 1.0,
            bounds: Bounds { kappa_max: 0.2, accel_max: 4.0, kappa_rate_max: 0.4 },
            k: 5,
            lp: 6,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PlannerError::Config(m.into()));
        if self.num_offsets % 2 == 0 {
            return bad("num_offsets must be odd");
        }
        if self.speed_factors.len() % 2 == 0 || self.speed_factors.iter().any(|f| !(0.0..=1.5).contains(f)) {
            return bad("speed_factors needs an odd count of values in [0, 1.5]");
        }
        if self.horizon == 0 || self.mpc_horizon == 0 || self.mpc_horizon > self.horizon || self.k == 0 {
            return bad("horizons and k must be positive, mpc_horizon <= horizon");
        }
        if !(self.sigma_c > 0.0 && self.radius > 0.0 && self.lookahead > 0.0 && self.profile_accel > 0.0) {
            return bad("sigma_c, radius, lookahead and profile_accel must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticePath {
    /// Spatial samples at 1 m spacing, starting at the ego.
    pub geometry: Vec<Point>,
    /// Time-indexed positions, `horizon + 1` of them (ego first).
    pub waypoints: Vec<Point>,
    pub speeds: Vec<f64>,
    pub offset_idx: usize,
    pub speed_idx: usize,
    pub terminal_offset: f64,
    pub feasible: bool,
}

/// Menger curvature of consecutive triples.
pub fn discrete_curvature(pts: &[Point]) -> Vec<f64> {
    pts.windows(3)
        .map(|w| {
            let (a, b, c) = (dist(w[0], w[1]), dist(w[1], w[2]), dist(w[0], w[2]));
            let cross = (w[1][0] - w[0][0]) * (w[2][1] - w[0][1]) - (w[1][1] - w[0][1]) * (w[2][0] - w[0][0]);
            if a * b * c == 0.0 {
                0.0
            } else {
                2.0 * cross.abs() / (a * b * c)
            }
        })
        .collect()
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Route frame with the tangent taken over a 2 m chord so normals turn
/// smoothly across polyline vertices.
fn frame(route: &Polyline, s: f64) -> (Point, Point) {
    let (a, b) = (route.point_at(s - 1.0), route.point_at(s + 1.0));
    let d = dist(a, b);
    let t = [(b[0] - a[0]) / d, (b[1] - a[1]) / d];
    (route.point_at(s), [-t[1], t[0]])
}

/// Candidate paths: cubic lateral blends from the ego's offset to each
/// terminal offset, each paired with every speed level. Returns an empty
/// list and a diagnostic when the ego is off the mapped route.
pub fn sample_lattice(ego: &EgoState, route: &Polyline, target_speed: f64, dt: f64, cfg: &PlannerConfig) -> (Vec<LatticePath>, Option<String>) {
    let (s0, d0) = route.project(ego.p);
    let half = (cfg.num_offsets / 2) as f64 * cfg.offset_spacing;
    if d0.abs() > half + 2.0 || s0 <= 0.0 || s0 >= route.length() {
        return (Vec::new(), Some(format!("ego at {:?} is off the route (s = {s0:.2}, d = {d0:.2})", ego.p)));
    }
    let v_top = cfg.speed_factors.iter().fold(0.0f64, |m, f| m.max(f * target_speed)).max(ego.v);
    let len = cfg.lookahead.max(v_top * cfg.horizon as f64 * dt) + 5.0;
    let n = len.ceil() as usize;
    let mut out = Vec::with_capacity(cfg.num_offsets * cfg.speed_factors.len());
    for j in 0..cfg.num_offsets {
        let target = (j as f64 - (cfg.num_offsets / 2) as f64) * cfg.offset_spacing;
        let geometry: Vec<Point> = (0..=n)
            .map(|i| {
                let s = s0 + i as f64;
                let d = d0 + (target - d0) * smoothstep(i as f64 / cfg.lookahead);
                let (c, nrm) = frame(route, s);
                [c[0] + d * nrm[0], c[1] + d * nrm[1]]
            })
            .collect();
        let feasible = discrete_curvature(&geometry).iter().all(|&k| k <= cfg.bounds.kappa_max);
        let poly = Polyline::new(geometry.clone());
        for (si, f) in cfg.speed_factors.iter().enumerate() {
            let v_ref = f * target_speed;
            let (mut v, mut s) = (ego.v, 0.0);
            let mut waypoints = vec![poly.point_at(0.0)];
            let mut speeds = vec![v];
            for _ in 0..cfg.horizon {
                v += (v_ref - v).clamp(-cfg.bounds.accel_max * dt, cfg.profile_accel * dt);
                s += v * dt;
                waypoints.push(poly.point_at(s));
                speeds.push(v);
            }
            out.push(LatticePath {
                geometry: geometry.clone(),
                waypoints,
                speeds,
                offset_idx: j,
                speed_idx: si,
                terminal_offset: target,
                feasible,
            });
        }
    }
    (out, None)
}

/// Soft collision risk of a path: Σ over agents and steps of
/// exp(−d²/σ²), taking the worst candidate. `d` is the closest approach
/// between the ego's step and the agent's predicted segments one step
/// earlier, concurrent and one step later, found on interpolated
/// substeps. The time buffer absorbs predicted-timing errors of up to one
/// step. `current` holds the agents' observed positions at planning time
/// and starts the first predicted segment.
pub fn path_risk(path: &LatticePath, predictions: &PredictionSet, current: &[Point], sigma: f64) -> f64 {
    let steps = path.waypoints.len() - 1;
    predictions
        .candidates()
        .iter()
        .map(|cand| {
            cand.iter()
                .zip(current)
                .map(|(agent, &now)| {
                    let seg = |t: usize| (if t == 0 { now } else { agent[t - 1] }, agent[t]);
                    let n = steps.min(agent.len());
                    (0..n)
                        .map(|t| {
                            let (e0, e1) = (path.waypoints[t], path.waypoints[t + 1]);
                            let d = (t.saturating_sub(1)..=(t + 1).min(agent.len() - 1))
                                .map(|u| {
                                    let (a0, a1) = seg(u);
                                    min_gap(e0, e1, a0, a1)
                                })
                                .fold(f64::INFINITY, f64::min);
                            (-d * d / (sigma * sigma)).exp()
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn min_gap(e0: Point, e1: Point, a0: Point, a1: Point) -> f64 {
    (0..=COLLISION_SUBSTEPS)
        .map(|i| {
            let u = i as f64 / COLLISION_SUBSTEPS as f64;
            dist(lerp(e0, e1, u), lerp(a0, a1, u))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Path cost: weighted risk, negative normalized route progress and an
/// off-road indicator. Infeasible paths cost infinity.
pub fn score_path(
    path: &LatticePath,
    predictions: &PredictionSet,
    current: &[Point],
    lanes: &[Vec<Point>],
    route: &Polyline,
    nominal: f64,
    cfg: &PlannerConfig,
) -> f64 {
    if !path.feasible {
        return f64::INFINITY;
    }
    let risk = path_risk(path, predictions, current, cfg.sigma_c);
    let s0 = route.project(path.waypoints[0]).0;
    let s1 = route.project(*path.waypoints.last().unwrap()).0;
    let progress = (s1 - s0) / nominal.max(1e-9);
    let offroad = !lanes.is_empty() && path.waypoints.iter().any(|p| !on_road(*p, lanes));
    cfg.w_c * risk - cfg.w_p * progress + if offroad { cfg.w_o } else { 0.0 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcResult {
    pub kappa_rate: f64,
    pub accel: f64,
    /// Whole optimized control horizon, used to warm-start the next call.
    pub plan: ControlSequence,
    pub fallback: bool,
}

/// Full brake with curvature rate pulling κ back toward zero.
pub fn brake_fallback(ego: &EgoState, dt: f64, b: &Bounds) -> MpcResult {
    let accel = (-ego.v / dt).max(-b.accel_max);
    let kappa_rate = (-ego.kappa / dt).clamp(-b.kappa_rate_max, b.kappa_rate_max);
    MpcResult { kappa_rate, accel, plan: ControlSequence { kappa_rate: vec![kappa_rate], accel: vec![accel] }, fallback: true }
}

const MPC_SPEED_WEIGHT: f64 = 1.0;
const MPC_EFFORT_WEIGHT: f64 = 1e-2;

/// Receding-horizon tracking of `path` by projected gradient descent over
/// bound-normalized controls. `warm` seeds the iterate; `None` paths fall
/// back to full braking.
pub fn mpc_track(ego: &EgoState, path: Option<&LatticePath>, dt: f64, cfg: &PlannerConfig, warm: Option<&ControlSequence>) -> Result<MpcResult> {
    let b = &cfg.bounds;
    let Some(path) = path else {
        return Ok(brake_fallback(ego, dt, b));
    };
    let hc = cfg.mpc_horizon.min(path.waypoints.len() - 1);
    if hc == 0 {
        return Ok(brake_fallback(ego, dt, b));
    }
    let mut c = ControlSequence::zeros(hc);
    if let Some(w) = warm {
        for t in 0..hc {
            if let (Some(&k), Some(&a)) = (w.kappa_rate.get(t + 1), w.accel.get(t + 1)) {
                c.kappa_rate[t] = k;
                c.accel[t] = a;
            }
        }
    }
    kinematics::make_feasible(ego, &mut c, dt, b);
    let target = Tensor::matrix(hc, 2, path.waypoints[1..=hc].iter().flatten().copied().collect())
        .map_err(PlannerError::from_autodiff)?;
    let vref = Tensor::matrix(hc, 1, path.speeds[1..=hc].to_vec()).map_err(PlannerError::from_autodiff)?;
    let eval = |c: &ControlSequence, grad: bool| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let uk = g.leaf(Tensor::matrix(1, hc, c.kappa_rate.iter().map(|v| v / b.kappa_rate_max).collect())?);
        let ua = g.leaf(Tensor::matrix(1, hc, c.accel.iter().map(|v| v / b.accel_max).collect())?);
        let kr = g.scale(uk, b.kappa_rate_max);
        let a = g.scale(ua, b.accel_max);
        let (pos, spd) = rollout_graph_with_speed(&mut g, ego, kr, a, dt)?;
        let p = g.slice(pos, 0, 1, hc)?;
        let tp = g.constant(target.clone());
        let dp = g.sub(p, tp)?;
        let lp = g.sqnorm(dp);
        let v = g.slice(spd, 0, 1, hc)?;
        let tv = g.constant(vref.clone());
        let dv = g.sub(v, tv)?;
        let lv = g.sqnorm(dv);
        let lv = g.scale(lv, MPC_SPEED_WEIGHT);
        let ek = g.sqnorm(uk);
        let ea = g.sqnorm(ua);
        let e = g.add(ek, ea)?;
        let e = g.scale(e, MPC_EFFORT_WEIGHT);
        let l = g.add(lp, lv)?;
        let l = g.add(l, e)?;
        if !grad {
            return Ok((g.scalar(l), vec![], vec![]));
        }
        let gr = g.backward(l)?;
        Ok((g.scalar(l), gr.wrt(&g, uk).data().to_vec(), gr.wrt(&g, ua).data().to_vec()))
    };
    let mut opt: Adam = Adam::new(AdamConfig { lr: cfg.mpc_lr, ..AdamConfig::default() });
    let mut best = (eval(&c, false)?.0, c.clone());
    for _ in 0..cfg.mpc_iters {
        let (val, gk, ga) = eval(&c, true)?;
        if val < best.0 {
            best = (val, c.clone());
        }
        let mut uk: Vec<f64> = c.kappa_rate.iter().map(|v| v / b.kappa_rate_max).collect();
        let mut ua: Vec<f64> = c.accel.iter().map(|v| v / b.accel_max).collect();
        opt.update("kr", &mut uk, &gk);
        opt.update("a", &mut ua, &ga);
        c.kappa_rate = uk.iter().map(|u| u * b.kappa_rate_max).collect();
        c.accel = ua.iter().map(|u| u * b.accel_max).collect();
        kinematics::make_feasible(ego, &mut c, dt, b);
    }
    let val = eval(&c, false)?.0;
    if val < best.0 {
        best = (val, c);
    }
    let plan = best.1;
    Ok(MpcResult { kappa_rate: plan.kappa_rate[0], accel: plan.accel[0], plan, fallback: false })
}

impl PlannerError {
    fn from_autodiff(e: AutodiffError) -> Self {
        PlannerError::Autodiff(e)
    }
}

/// Closed-loop scenario: agent ground truth (history `H + L_p`, future at
/// least `T`), the ego's route and initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannerScenario {
    pub id: String,
    pub scene: Scene,
    pub route: Polyline,
    pub ego: EgoState,
    pub target_speed: f64,
    pub adversary: usize,
}

pub enum PredictorSource<'a> {
    /// Ground-truth futures as a single candidate.
    Oracle,
    Model(&'a dyn Predictor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceAttackConfig {
    pub eps: f64,
    #[serde(default)]
    pub attack: AttackConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub ego: EgoState,
    pub chosen_path_idx: Option<usize>,
    pub predictions_digest: String,
    pub collision_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub scenario_id: String,
    pub collided: bool,
    pub collision_step: Option<usize>,
    pub offroad: bool,
    pub progress: f64,
    pub log: Vec<StepLog>,
    /// Other agents' replayed positions per step, for audits.
    #[serde(skip)]
    pub replay: Vec<Vec<Point>>,
}

pub fn predictions_digest(p: &PredictionSet) -> String {
    let mut h = Sha256::new();
    for v in p.candidates().iter().flatten().flatten().flatten() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Open-loop sequence-attack perturbation of the adversary's long history,
/// computed against the frozen predictor. Shape `[1, 2(H + L_p)]`.
pub fn precompute_attack(model: &dyn Predictor, sc: &PlannerScenario, lp: usize, atk: &SequenceAttackConfig) -> Result<Tensor> {
    let obj = SequenceObjective::new(model, &sc.scene, lp, sc.adversary, &atk.attack)?;
    Ok(pgd(&obj, atk.eps, &atk.attack)?.delta)
}

fn check_scenario(sc: &PlannerScenario, h: usize, t: usize, lp: usize) -> Result<()> {
    if sc.scene.history_len() != h + lp || sc.scene.future_len() < t {
        return Err(PlannerError::Scenario(format!(
            "{}: needs history {} and future >= {t}, has {} and {}",
            sc.id,
            h + lp,
            sc.scene.history_len(),
            sc.scene.future_len()
        )));
    }
    if sc.adversary >= sc.scene.num_agents() {
        return Err(PlannerError::Scenario(format!("{}: adversary {} out of range", sc.id, sc.adversary)));
    }
    Ok(())
}

fn lerp(a: Point, b: Point, u: f64) -> Point {
    [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])]
}

const COLLISION_SUBSTEPS: usize = 4;

/// Disc overlap at the step end points and linearly interpolated substeps.
fn collides(e0: Point, e1: Point, a0: Point, a1: Point, radius: f64) -> bool {
    min_gap(e0, e1, a0, a1) < 2.0 * radius
}

/// Runs `L_p + 1` planning steps. With an attack, the adversary's observed
/// history is shifted by a precomputed δ; the replayed ground truth is
/// never touched.
pub fn run_episode(sc: &PlannerScenario, predictor: PredictorSource<'_>, cfg: &PlannerConfig, attack: Option<&SequenceAttackConfig>) -> Result<SimOutcome> {
    let delta = match (&predictor, attack) {
        (PredictorSource::Model(m), Some(a)) => Some(precompute_attack(*m, sc, cfg.lp, a)?),
        (PredictorSource::Oracle, Some(_)) => return Err(PlannerError::Config("the oracle predictor cannot be attacked".into())),
        _ => None,
    };
    run_episode_with_delta(sc, predictor, cfg, delta.as_ref())
}

pub fn run_episode_with_delta(sc: &PlannerScenario, predictor: PredictorSource<'_>, cfg: &PlannerConfig, delta: Option<&Tensor>) -> Result<SimOutcome> {
    cfg.validate()?;
    let lp = cfg.lp;
    let n = sc.scene.num_agents();
    let h = sc.scene.history_len().checked_sub(lp).ok_or_else(|| PlannerError::Scenario(format!("{}: history shorter than L_p", sc.id)))?;
    let t = match &predictor {
        PredictorSource::Model(m) => {
            let a = m.arch();
            if a.history_len != h {
                return Err(PlannerError::Scenario(format!("{}: model history {} vs scenario {h}", sc.id, a.history_len)));
            }
            a.future_len
        }
        PredictorSource::Oracle => cfg.horizon,
    };
    check_scenario(sc, h, t, lp)?;
    let dt = sc.scene.dt();
    let truth: Vec<Vec<Point>> = (0..n).map(|i| sc.scene.trajectory(i)).collect();
    let mut observed = truth.clone();
    if let Some(d) = delta {
        if d.shape() != [1, 2 * (h + lp)] {
            return Err(PlannerError::Scenario(format!("delta shape {:?}", d.shape())));
        }
        for (j, p) in observed[sc.adversary][..h + lp].iter_mut().enumerate() {
            p[0] += d.data()[2 * j];
            p[1] += d.data()[2 * j + 1];
        }
    }
    let lanes = sc.scene.lanes();
    let nominal = sc.target_speed * cfg.horizon as f64 * dt;
    let s_start = sc.route.project(sc.ego.p).0;
    let mut ego = sc.ego;
    let mut warm: Option<ControlSequence> = None;
    let mut log = Vec::with_capacity(lp + 1);
    let mut replay = Vec::with_capacity(lp + 1);
    let (mut collided, mut collision_step, mut offroad) = (false, None, false);
    for w in 0..=lp {
        let now = h - 1 + w;
        let preds = match &predictor {
            PredictorSource::Oracle => {
                let fut = truth.iter().map(|p| p[now + 1..now + 1 + t].to_vec()).collect();
                PredictionSet::new(vec![fut])?
            }
            PredictorSource::Model(m) => {
                let hist = observed.iter().map(|p| p[w..w + h].to_vec()).collect();
                let fut = truth.iter().map(|p| p[now + 1..now + 1 + t].to_vec()).collect();
                let window = Scene::new(dt, hist, fut, vec![])?;
                let b = Batch::new(&[&window])?;
                predict_batch(*m, &b, &b.x, cfg.k, seed::derive(cfg.seed, "plan-predict", w as u64))?.remove(0)
            }
        };
        let current: Vec<Point> = observed.iter().map(|p| p[now]).collect();
        let (paths, diag) = sample_lattice(&ego, &sc.route, sc.target_speed, dt, cfg);
        if let Some(d) = diag {
            log::warn!("{}: {d}", sc.id);
        }
        let chosen = paths
            .iter()
            .enumerate()
            .map(|(i, p)| (i, score_path(p, &preds, &current, lanes, &sc.route, nominal, cfg)))
            .filter(|(_, c)| c.is_finite())
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i);
        let ctrl = mpc_track(&ego, chosen.map(|i| &paths[i]), dt, cfg, warm.as_ref())?;
        warm = Some(ctrl.plan.clone());
        let next = kinematics::rollout(&ego, &ControlSequence { kappa_rate: vec![ctrl.kappa_rate], accel: vec![ctrl.accel] }, dt, &cfg.bounds)?[1];
        let others: Vec<Point> = truth.iter().map(|p| p[now + 1]).collect();
        let hit = truth.iter().any(|p| collides(ego.p, next.p, p[now], p[now + 1], cfg.radius));
        if !lanes.is_empty() && !on_road(next.p, lanes) {
            offroad = true;
        }
        ego = next;
        replay.push(others);
        log.push(StepLog { step: w, ego, chosen_path_idx: chosen, predictions_digest: predictions_digest(&preds), collision_flag: hit });
        if hit {
            collided = true;
            collision_step = Some(w);
            break;
        }
    }
    let progress = sc.route.project(ego.p).0 - s_start;
    Ok(SimOutcome { scenario_id: sc.id.clone(), collided, collision_step, offroad, progress, log, replay })
}

pub fn episode_jsonl(outcome: &SimOutcome) -> String {
    outcome.log.iter().map(|s| serde_json::to_string(s).expect("step log serializes") + "\n").collect()
}

pub const OUTCOME_HEADER: &str = "scenario_id,regime,attack,collided,offroad,progress";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub scenario_id: String,
    pub regime: String,
    pub attack: String,
    pub collided: bool,
    pub offroad: bool,
    pub progress: f64,
}

pub fn outcome_csv(rows: &[OutcomeRow]) -> String {
    let mut out = String::from(OUTCOME_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.scenario_id, r.regime, r.attack, r.collided, r.offroad, r.progress));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// Adversary crosses the ego lane from the right.
    CrossingRight,
    CrossingLeft,
}

impl SuiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::CrossingRight => "crossing_right",
            SuiteKind::CrossingLeft => "crossing_left",
        }
    }
}

const LANE_WIDTH: f64 = 3.5;

fn shift_scenario(mut sc: PlannerScenario, h: usize) -> Result<PlannerScenario> {
    // Center on the agents' last observed positions, like the generator.
    let n = sc.scene.num_agents();
    let c = (0..n).fold([0.0, 0.0], |acc, i| {
        let p = sc.scene.history()[i][h - 1];
        [acc[0] + p[0] / n as f64, acc[1] + p[1] / n as f64]
    });
    let tf = |p: Point| [p[0] - c[0], p[1] - c[1]];
    let hist = sc.scene.history().iter().map(|a| a.iter().map(|&p| tf(p)).collect()).collect();
    let fut = sc.scene.future().iter().map(|a| a.iter().map(|&p| tf(p)).collect()).collect();
    let lanes = sc.scene.lanes().iter().map(|l| l.iter().map(|&p| tf(p)).collect()).collect();
    sc.scene = Scene::new(sc.scene.dt(), hist, fut, lanes)?;
    sc.route = sc.route.transformed(tf);
    sc.ego.p = tf(sc.ego.p);
    Ok(sc)
}

/// Ten seeded closed-loop scenarios: a vehicle (the adversary, agent 0)
/// crosses the ego lane so that it would meet an ego that keeps its speed,
/// alternately from the right and from the left. A second agent cruises
/// ahead in the neighboring lane.
pub fn scenario_suite(h: usize, t: usize, lp: usize, dt: f64, seed: u64) -> Result<Vec<PlannerScenario>> {
    (0..10)
        .map(|i| {
            let kind = if i % 2 == 0 { SuiteKind::CrossingRight } else { SuiteKind::CrossingLeft };
            suite_scenario(kind, h, t, lp, dt, seed::derive(seed, "suite", i as u64), i)
        })
        .collect()
}

pub fn suite_scenario(kind: SuiteKind, h: usize, t: usize, lp: usize, dt: f64, seed: u64, idx: usize) -> Result<PlannerScenario> {
    let mut rng = seed::rng(seed);
    let steps = h + lp + t;
    // time of sample j relative to the first planning step
    let tau = |j: usize| (j as f64 - (h as f64 - 1.0)) * dt;
    let v_ego = rng.random_range(8.0..10.0);
    let xc = rng.random_range(18.0..24.0);
    let va = rng.random_range(6.0..8.0);
    let t_cross = rng.random_range(2.5..3.0);
    let arrival = t_cross + rng.random_range(-0.1..0.1);
    let (dir, heading) = match kind {
        SuiteKind::CrossingRight => (1.0, std::f64::consts::FRAC_PI_2),
        SuiteKind::CrossingLeft => (-1.0, -std::f64::consts::FRAC_PI_2),
    };
    let ego_lane = Polyline::new(line([-150.0, 0.0], 0.0, 300.0, 10.0));
    let neighbor = ego_lane.offset(LANE_WIDTH);
    let cross = Polyline::new(line([xc, -150.0 * dir], heading, 300.0, 10.0));
    let lanes = vec![ego_lane.lane_polygon(LANE_WIDTH), neighbor.lane_polygon(LANE_WIDTH), cross.lane_polygon(LANE_WIDTH)];
    let adversary: Vec<Point> = (0..steps).map(|j| [xc, dir * va * (tau(j) - t_cross)]).collect();
    let v_nb = rng.random_range(9.0..12.0);
    let nb0 = xc - v_ego * arrival + rng.random_range(25.0..40.0);
    let other: Vec<Point> = (0..steps).map(|j| [nb0 + v_nb * tau(j), LANE_WIDTH]).collect();
    let paths = [adversary, other];
    let hist = paths.iter().map(|p| p[..h + lp].to_vec()).collect();
    let fut = paths.iter().map(|p| p[h + lp..].to_vec()).collect();
    let scene = Scene::new(dt, hist, fut, lanes)?;
    let ego = EgoState { p: [xc - v_ego * arrival, 0.0], psi: 0.0, v: v_ego, kappa: 0.0, a: 0.0 };
    let route = Polyline::new(line([-150.0, 0.0], 0.0, 300.0, 1.0));
    let id = format!("{idx:02}_{}", kind.as_str());
    shift_scenario(PlannerScenario { id, scene, route, ego, target_speed: v_ego, adversary: 0 }, h)
}
