//! Best-of-K displacement metrics.
//!
//! ADE selects, per agent, the candidate with the smallest mean
//! displacement. FDE and MR take the per-agent minimum final displacement
//! over candidates, so every metric is monotone when candidates are
//! appended. ORR inspects the ADE-selected candidate. All metrics average
//! over every agent in the scene.

use serde::{Deserialize, Serialize};

use super::geometry::{dist, on_road, Point};
use super::SceneError;
use crate::Scalar;

pub const MISS_THRESHOLD: f64 = 2.0;

/// K candidate futures for every agent, indexed `[k][agent][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T = f64> {
    candidates: Vec<Vec<Vec<Point<T>>>>,
}

impl<T: Scalar> PredictionSet<T> {
    pub fn new(candidates: Vec<Vec<Vec<Point<T>>>>) -> Result<Self, SceneError> {
        let shape_err = |expected: String, found: String| SceneError::Shape { what: "prediction set", expected, found };
        let first = candidates.first().ok_or_else(|| shape_err("K >= 1".into(), "K = 0".into()))?;
        let n = first.len();
        let t = first.first().map_or(0, Vec::len);
        for (k, cand) in candidates.iter().enumerate() {
            if cand.len() != n || cand.iter().any(|a| a.len() != t) {
                return Err(shape_err(format!("{n} agents x {t} steps"), format!("candidate {k} differs")));
            }
            if cand.iter().flatten().flatten().any(|v| !v.is_finite()) {
                return Err(shape_err("finite values".into(), format!("non-finite value in candidate {k}")));
            }
        }
        Ok(Self { candidates })
    }

    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn num_agents(&self) -> usize {
        self.candidates[0].len()
    }

    pub fn horizon(&self) -> usize {
        self.candidates[0].first().map_or(0, Vec::len)
    }

    pub fn candidates(&self) -> &[Vec<Vec<Point<T>>>] {
        &self.candidates
    }

    pub fn candidate(&self, k: usize) -> &[Vec<Point<T>>] {
        &self.candidates[k]
    }

    pub fn into_candidates(self) -> Vec<Vec<Vec<Point<T>>>> {
        self.candidates
    }

    fn check_gt(&self, gt: &[Vec<Point<T>>]) -> Result<(), SceneError> {
        if gt.len() != self.num_agents() || gt.iter().any(|a| a.len() != self.horizon()) {
            return Err(SceneError::Shape {
                what: "ground truth",
                expected: format!("{} agents x {} steps", self.num_agents(), self.horizon()),
                found: format!("{} agents x {} steps", gt.len(), gt.first().map_or(0, Vec::len)),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ade: f64,
    pub fde: f64,
    pub mr: f64,
    pub orr: f64,
}

impl Metrics {
    /// Unweighted mean of per-scene metrics.
    pub fn mean(items: &[Metrics]) -> Metrics {
        if items.is_empty() {
            return Metrics::default();
        }
        let n = items.len() as f64;
        let s = items.iter().fold(Metrics::default(), |acc, m| Metrics {
            ade: acc.ade + m.ade,
            fde: acc.fde + m.fde,
            mr: acc.mr + m.mr,
            orr: acc.orr + m.orr,
        });
        Metrics { ade: s.ade / n, fde: s.fde / n, mr: s.mr / n, orr: s.orr / n }
    }
}

fn mean_disp<T: Scalar>(a: &[Point<T>], b: &[Point<T>]) -> T {
    let s = a.iter().zip(b).fold(T::zero(), |s, (&p, &q)| s + dist(p, q));
    s / T::from_usize(a.len()).unwrap()
}

fn final_disp<T: Scalar>(a: &[Point<T>], b: &[Point<T>]) -> T {
    dist(*a.last().unwrap(), *b.last().unwrap())
}

/// Per agent, index of the candidate with the smallest mean displacement
/// (lowest index on ties).
pub fn best_of_k<T: Scalar>(pred: &PredictionSet<T>, gt: &[Vec<Point<T>>]) -> Result<Vec<usize>, SceneError> {
    pred.check_gt(gt)?;
    Ok((0..pred.num_agents())
        .map(|i| {
            let mut best = (T::infinity(), 0);
            for k in 0..pred.k() {
                let d = mean_disp(&pred.candidates[k][i], &gt[i]);
                if d < best.0 {
                    best = (d, k);
                }
            }
            best.1
        })
        .collect())
}

fn agent_mean<T: Scalar>(values: impl Iterator<Item = T>, n: usize) -> T {
    values.fold(T::zero(), |s, v| s + v) / T::from_usize(n).unwrap()
}

pub fn ade<T: Scalar>(pred: &PredictionSet<T>, gt: &[Vec<Point<T>>]) -> Result<T, SceneError> {
    let best = best_of_k(pred, gt)?;
    Ok(agent_mean(best.iter().enumerate().map(|(i, &k)| mean_disp(&pred.candidates[k][i], &gt[i])), gt.len()))
}

/// Per agent, smallest final displacement over candidates.
pub fn min_final_displacements<T: Scalar>(pred: &PredictionSet<T>, gt: &[Vec<Point<T>>]) -> Result<Vec<T>, SceneError> {
    pred.check_gt(gt)?;
    Ok((0..pred.num_agents())
        .map(|i| {
            (0..pred.k())
                .map(|k| final_disp(&pred.candidates[k][i], &gt[i]))
                .fold(T::infinity(), |m, d| m.min(d))
        })
        .collect())
}

pub fn fde<T: Scalar>(pred: &PredictionSet<T>, gt: &[Vec<Point<T>>]) -> Result<T, SceneError> {
    let d = min_final_displacements(pred, gt)?;
    Ok(agent_mean(d.into_iter(), gt.len()))
}

pub fn miss_rate<T: Scalar>(pred: &PredictionSet<T>, gt: &[Vec<Point<T>>], threshold: T) -> Result<T, SceneError> {
    let d = min_final_displacements(pred, gt)?;
    let misses = d.iter().filter(|&&v| v > threshold).count();
    Ok(T::from_usize(misses).unwrap() / T::from_usize(gt.len()).unwrap())
}

/// Fraction of agents whose ADE-selected candidate leaves every lane
/// polygon at least once. Scenes without lanes report 0.
pub fn offroad_rate<T: Scalar>(pred: &PredictionSet<T>, gt: &[Vec<Point<T>>], lanes: &[Vec<Point<T>>]) -> Result<T, SceneError> {
    let best = best_of_k(pred, gt)?;
    if lanes.is_empty() {
        return Ok(T::zero());
    }
    let off = best
        .iter()
        .enumerate()
        .filter(|&(i, &k)| pred.candidates[k][i].iter().any(|&p| !on_road(p, lanes)))
        .count();
    Ok(T::from_usize(off).unwrap() / T::from_usize(gt.len()).unwrap())
}

pub fn evaluate<T: Scalar>(pred: &PredictionSet<T>, gt: &[Vec<Point<T>>], lanes: &[Vec<Point<T>>]) -> Result<Metrics, SceneError> {
    Ok(Metrics {
        ade: ade(pred, gt)?.as_f64(),
        fde: fde(pred, gt)?.as_f64(),
        mr: miss_rate(pred, gt, T::lit(MISS_THRESHOLD))?.as_f64(),
        orr: offroad_rate(pred, gt, lanes)?.as_f64(),
    })
}
