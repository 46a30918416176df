//! Seeded synthetic scenes on simple lane layouts.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::geometry::{self, arc, line, Point, Polyline};
use super::{Dataset, Provenance, Record, Scene, SceneError, Split};
use crate::seed::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneFamily {
    Straight,
    Curve,
    Intersection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Cruise,
    SlowDown,
    LaneChange,
    Turn,
}

/// Relative weights of each behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorMix {
    pub cruise: f64,
    pub slow_down: f64,
    pub lane_change: f64,
    pub turn: f64,
}

impl Default for BehaviorMix {
    fn default() -> Self {
        Self { cruise: 0.4, slow_down: 0.2, lane_change: 0.2, turn: 0.2 }
    }
}

impl BehaviorMix {
    pub fn only(b: Behavior) -> Self {
        let mut m = Self { cruise: 0.0, slow_down: 0.0, lane_change: 0.0, turn: 0.0 };
        match b {
            Behavior::Cruise => m.cruise = 1.0,
            Behavior::SlowDown => m.slow_down = 1.0,
            Behavior::LaneChange => m.lane_change = 1.0,
            Behavior::Turn => m.turn = 1.0,
        }
        m
    }

    fn weights(&self) -> [(Behavior, f64); 4] {
        [
            (Behavior::Cruise, self.cruise),
            (Behavior::SlowDown, self.slow_down),
            (Behavior::LaneChange, self.lane_change),
            (Behavior::Turn, self.turn),
        ]
    }

    fn draw(&self, rng: &mut Rng) -> Behavior {
        let w = self.weights();
        let total: f64 = w.iter().map(|x| x.1).sum();
        let mut u = rng.random_range(0.0..total);
        for (b, wt) in w {
            if u < wt {
                return b;
            }
            u -= wt;
        }
        Behavior::Cruise
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub min_agents: usize,
    pub max_agents: usize,
    pub history_len: usize,
    pub future_len: usize,
    pub dt: f64,
    pub families: Vec<LaneFamily>,
    pub behaviors: BehaviorMix,
    pub v_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub lane_width: f64,
    /// Per-coordinate Gaussian noise (m), truncated at three sigma.
    pub noise_std: f64,
    pub random_rotation: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            min_agents: 2,
            max_agents: 4,
            history_len: 4,
            future_len: 12,
            dt: 0.5,
            families: vec![LaneFamily::Straight, LaneFamily::Curve, LaneFamily::Intersection],
            behaviors: BehaviorMix::default(),
            v_max: 20.0,
            speed_min: 4.0,
            speed_max: 14.0,
            lane_width: 3.5,
            noise_std: 0.03,
            random_rotation: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Config(m));
        if self.history_len < 2 {
            return bad(format!("history_len must be >= 2, got {}", self.history_len));
        }
        if self.future_len < 1 {
            return bad("future_len must be >= 1".into());
        }
        if self.families.is_empty() {
            return bad("lane family list is empty".into());
        }
        if self.min_agents < 1 || self.max_agents < self.min_agents {
            return bad(format!("agent range [{}, {}] invalid", self.min_agents, self.max_agents));
        }
        if !(self.dt > 0.0 && self.v_max > 0.0 && self.lane_width > 0.0 && self.noise_std >= 0.0) {
            return bad("dt, v_max and lane_width must be positive, noise_std non-negative".into());
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max && self.speed_max < self.v_max) {
            return bad(format!("speed range [{}, {}] must lie in (0, v_max)", self.speed_min, self.speed_max));
        }
        let w = self.behaviors.weights();
        if w.iter().any(|x| !(x.1 >= 0.0)) || w.iter().map(|x| x.1).sum::<f64>() <= 0.0 {
            return bad("behavior weights must be non-negative with positive sum".into());
        }
        Ok(())
    }
}

struct Route {
    line: Polyline,
    /// Arclength near which agents end their observed history.
    focus: f64,
    /// Lateral offset to the neighboring lane, if there is one.
    neighbor: Option<f64>,
}

struct Road {
    routes: Vec<Route>,
    turn: Option<Route>,
    lanes: Vec<Vec<Point>>,
}

const STEP: f64 = 2.0;
const TURN_RADIUS: f64 = 15.0;

fn build_road(family: LaneFamily, w: f64, rng: &mut Rng) -> Road {
    match family {
        LaneFamily::Straight => {
            let l0 = Polyline::new(line([-150.0, 0.0], 0.0, 300.0, 10.0));
            let l1 = l0.offset(w);
            let lanes = vec![l0.lane_polygon(w), l1.lane_polygon(w)];
            Road {
                routes: vec![
                    Route { line: l0, focus: 150.0, neighbor: Some(w) },
                    Route { line: l1, focus: 150.0, neighbor: Some(-w) },
                ],
                turn: None,
                lanes,
            }
        }
        LaneFamily::Curve => {
            let r = rng.random_range(60.0..150.0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let l0 = Polyline::new(arc([0.0, 0.0], 0.0, sign / r, 300.0, STEP));
            let l1 = l0.offset(w);
            let lanes = vec![l0.lane_polygon(w), l1.lane_polygon(w)];
            Road {
                routes: vec![
                    Route { line: l0, focus: 150.0, neighbor: Some(w) },
                    Route { line: l1, focus: 150.0, neighbor: Some(-w) },
                ],
                turn: None,
                lanes,
            }
        }
        LaneFamily::Intersection => {
            let l0 = Polyline::new(line([-150.0, 0.0], 0.0, 300.0, 10.0));
            let l1 = l0.offset(w);
            let cross = Polyline::new(line([TURN_RADIUS, -150.0], std::f64::consts::FRAC_PI_2, 300.0, 10.0));
            let quarter = TURN_RADIUS * std::f64::consts::FRAC_PI_2;
            let mut pts = line([-150.0, 0.0], 0.0, 150.0, 10.0);
            pts.pop();
            let mut bend = arc([0.0, 0.0], 0.0, 1.0 / TURN_RADIUS, quarter, 1.0);
            bend.pop();
            pts.extend(bend);
            pts.extend(line([TURN_RADIUS, TURN_RADIUS], std::f64::consts::FRAC_PI_2, 135.0, 10.0));
            let turn = Polyline::new(pts);
            let lanes = vec![l0.lane_polygon(w), l1.lane_polygon(w), cross.lane_polygon(w), turn.lane_polygon(w)];
            Road {
                routes: vec![
                    Route { line: l0, focus: 150.0, neighbor: Some(w) },
                    Route { line: l1, focus: 150.0, neighbor: Some(-w) },
                    Route { line: cross, focus: 150.0, neighbor: None },
                ],
                turn: Some(Route { line: turn, focus: 150.0, neighbor: None }),
                lanes,
            }
        }
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Arclength after `t` steps under constant speed, optionally braking at a
/// constant rate from step `brake_at` until stopped.
fn arclength(s0: f64, v: f64, t: f64, dt: f64, brake: Option<(f64, f64)>) -> f64 {
    match brake {
        Some((t_b, d)) if t > t_b => {
            let s_b = s0 + v * t_b * dt;
            let tau = (t - t_b) * dt;
            let t_stop = v / d;
            if tau < t_stop {
                s_b + v * tau - 0.5 * d * tau * tau
            } else {
                s_b + v * v / (2.0 * d)
            }
        }
        _ => s0 + v * t * dt,
    }
}

fn agent_path(cfg: &GenConfig, road: &Road, behavior: Behavior, taken: &mut Vec<(usize, f64)>, rng: &mut Rng) -> Vec<Point> {
    let steps = cfg.history_len + cfg.future_len;
    let h = cfg.history_len as f64;
    let (route_ix, route) = match (behavior, &road.turn) {
        (Behavior::Turn, Some(turn)) => (usize::MAX, turn),
        (Behavior::LaneChange, _) => {
            let with_neighbor: Vec<usize> = (0..road.routes.len()).filter(|&i| road.routes[i].neighbor.is_some()).collect();
            let i = with_neighbor[rng.random_range(0..with_neighbor.len())];
            (i, &road.routes[i])
        }
        _ => {
            let i = rng.random_range(0..road.routes.len());
            (i, &road.routes[i])
        }
    };
    let v_hi = if route_ix == usize::MAX { cfg.speed_max.min(8.0).max(cfg.speed_min) } else { cfg.speed_max };
    let v = rng.random_range(cfg.speed_min..=v_hi);
    // Keep same-route agents apart at the last observed step.
    let mut s_last = route.focus + rng.random_range(-25.0..10.0);
    for _ in 0..20 {
        if taken.iter().all(|&(r, s)| r != route_ix || (s - s_last).abs() > 10.0) {
            break;
        }
        s_last = route.focus + rng.random_range(-25.0..10.0);
    }
    if route_ix == usize::MAX {
        // Place turning agents so the bend falls inside the future.
        s_last = route.focus - rng.random_range(0.0..(v * cfg.future_len as f64 * cfg.dt * 0.5).max(1.0));
    }
    taken.push((route_ix, s_last));
    let s0 = s_last - v * (h - 1.0) * cfg.dt;

    let brake = (behavior == Behavior::SlowDown)
        .then(|| (rng.random_range((h - 1.0)..(h + cfg.future_len as f64 / 2.0)), rng.random_range(1.0..3.0)));
    let lateral = match (behavior, route.neighbor) {
        (Behavior::LaneChange, Some(off)) => {
            Some((off, rng.random_range((h - 2.0)..(h + 4.0)), rng.random_range(6.0..9.0)))
        }
        _ => None,
    };
    (0..steps)
        .map(|t| {
            let tf = t as f64;
            let s = arclength(s0, v, tf, cfg.dt, brake);
            let l = lateral.map_or(0.0, |(off, start, len)| off * smoothstep((tf - start) / len));
            let c = route.line.point_at(s);
            let n = route.line.normal_at(s);
            [c[0] + l * n[0], c[1] + l * n[1]]
        })
        .collect()
}

fn plausible(paths: &[Vec<Point>], cfg: &GenConfig) -> bool {
    let limit = cfg.v_max * cfg.dt;
    paths.iter().all(|p| p.windows(2).all(|w| geometry::dist(w[0], w[1]) <= limit))
}

const MAX_ATTEMPTS: usize = 64;

/// Generates one scene. The world frame is centered on the mean of the
/// agents' last observed positions.
pub fn generate_synthetic(cfg: &GenConfig, seed: u64) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    for _ in 0..MAX_ATTEMPTS {
        let family = cfg.families[rng.random_range(0..cfg.families.len())];
        let road = build_road(family, cfg.lane_width, &mut rng);
        let n = rng.random_range(cfg.min_agents..=cfg.max_agents);
        let mut taken = Vec::new();
        let mut paths: Vec<Vec<Point>> = (0..n)
            .map(|_| {
                let b = cfg.behaviors.draw(&mut rng);
                agent_path(cfg, &road, b, &mut taken, &mut rng)
            })
            .collect();
        if cfg.noise_std > 0.0 {
            let cap = 3.0 * cfg.noise_std;
            for p in paths.iter_mut().flatten() {
                p[0] += noise.sample(&mut rng).clamp(-cap, cap);
                p[1] += noise.sample(&mut rng).clamp(-cap, cap);
            }
        }
        let theta = if cfg.random_rotation { rng.random_range(0.0..std::f64::consts::TAU) } else { 0.0 };
        let (c, s) = (theta.cos(), theta.sin());
        let rot = |p: Point| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let h = cfg.history_len;
        let centroid = paths.iter().fold([0.0, 0.0], |acc, p| {
            let q = rot(p[h - 1]);
            [acc[0] + q[0] / n as f64, acc[1] + q[1] / n as f64]
        });
        let tf = |p: Point| {
            let q = rot(p);
            [q[0] - centroid[0], q[1] - centroid[1]]
        };
        let paths: Vec<Vec<Point>> = paths.into_iter().map(|p| p.into_iter().map(tf).collect()).collect();
        if !plausible(&paths, cfg) {
            continue;
        }
        let lanes = road.lanes.into_iter().map(|l| l.into_iter().map(tf).collect()).collect();
        let history = paths.iter().map(|p| p[..h].to_vec()).collect();
        let future = paths.iter().map(|p| p[h..].to_vec()).collect();
        return Scene::new(cfg.dt, history, future, lanes);
    }
    Err(SceneError::Config(format!("no kinematically plausible scene after {MAX_ATTEMPTS} attempts")))
}

/// Train/val/test dataset with per-scene seeds derived from `seed`.
pub fn generate_dataset(cfg: &GenConfig, counts: [(Split, usize); 3], seed: u64) -> Result<Dataset, SceneError> {
    let mut ds = Dataset::default();
    let mut id = 0u64;
    for (split, count) in counts {
        for i in 0..count {
            let scene = generate_synthetic(cfg, seed::derive(seed, split.as_str(), i as u64))?;
            ds.push(Record { id, split, provenance: Provenance::Synthetic, scene });
            id += 1;
        }
    }
    Ok(ds)
}
