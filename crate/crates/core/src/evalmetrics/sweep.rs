//! Local grid search over a discrete hyperparameter space.
//!
//! Starting from an incumbent, every grid point within `radius` steps along
//! each axis is evaluated. If a neighbour beats the incumbent the grid is
//! re-centred there and the search repeats; otherwise the incumbent and its
//! neighbours are re-evaluated until each has `repeats` values, and every
//! point is scored by the minimum over its evaluations.
//!
//! The search is a deterministic function of the evaluations it sees, so a
//! saved state is resumed by replaying it: cached values are reused and only
//! missing evaluations call the objective.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Named axes, each a list of candidate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpace {
    pub names: Vec<String>,
    pub axes: Vec<Vec<f64>>,
}

impl SweepSpace {
    pub fn new(axes: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
            return Err(Error::invalid("sweep axes must be nonempty"));
        }
        let (names, axes) = axes.into_iter().unzip();
        Ok(Self { names, axes })
    }

    /// Guidance weights 1.00, 1.05, …, 3.50.
    pub fn weight_grid() -> Vec<f64> {
        (0..=50).map(|k| 1.0 + 0.05 * k as f64).collect()
    }

    pub fn params(&self, index: &[usize]) -> Vec<f64> {
        index.iter().zip(&self.axes).map(|(&i, a)| a[i]).collect()
    }

    pub fn size(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    /// Grid points within `radius` steps of `center` on every axis, in
    /// lexicographic order.
    fn neighborhood(&self, center: &[usize], radius: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for (axis, &c) in self.axes.iter().zip(center) {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius).min(axis.len() - 1);
            out = out
                .into_iter()
                .flat_map(|p| {
                    (lo..=hi).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Index of the first incumbent on each axis.
    pub start: Vec<usize>,
    pub radius: usize,
    /// Maximum number of objective evaluations, counting repeats.
    pub budget: usize,
    pub repeats: usize,
}

impl SweepConfig {
    pub fn new(start: Vec<usize>, budget: usize) -> Self {
        Self {
            start,
            radius: 1,
            budget,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: Vec<usize>,
    pub params: Vec<f64>,
    /// One value per evaluation, in repeat order.
    pub values: Vec<f64>,
}

impl SweepPoint {
    /// Best-of-k score: the minimum over all evaluations so far.
    pub fn best(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepState {
    pub space: SweepSpace,
    pub config: SweepConfig,
    /// Evaluated points in lexicographic index order.
    pub points: Vec<SweepPoint>,
    pub evaluations: usize,
    pub incumbent: Vec<usize>,
    pub best: Option<SweepPoint>,
    /// True once the local search and the re-evaluation pass have finished.
    pub converged: bool,
}

impl SweepState {
    pub fn new(space: SweepSpace, config: SweepConfig) -> Result<Self> {
        if config.start.len() != space.axes.len()
            || config
                .start
                .iter()
                .zip(&space.axes)
                .any(|(&i, a)| i >= a.len())
        {
            return Err(Error::invalid("sweep start index lies outside the grid"));
        }
        if config.repeats == 0 {
            return Err(Error::invalid("sweep repeats must be at least 1"));
        }
        Ok(Self {
            incumbent: config.start.clone(),
            space,
            config,
            points: vec![],
            evaluations: 0,
            best: None,
            converged: false,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Best point among everything evaluated.
    fn refresh_best(&mut self) {
        self.best = self
            .points
            .iter()
            .min_by(|a, b| a.best().total_cmp(&b.best()))
            .cloned();
    }
}

struct Runner<'a> {
    cache: BTreeMap<Vec<usize>, Vec<f64>>,
    evaluations: usize,
    budget: usize,
    space: &'a SweepSpace,
    objective: &'a mut dyn FnMut(&[f64], usize) -> Result<f64>,
}

impl Runner<'_> {
    /// Value of evaluation `repeat` at `index`, or `None` once the budget is
    /// spent.
    fn eval(&mut self, index: &[usize], repeat: usize) -> Result<Option<f64>> {
        if let Some(v) = self.cache.get(index).and_then(|v| v.get(repeat)) {
            return Ok(Some(*v));
        }
        if self.evaluations >= self.budget {
            return Ok(None);
        }
        let have = self.cache.get(index).map_or(0, Vec::len);
        debug_assert_eq!(have, repeat, "repeats are evaluated in order");
        let v = (self.objective)(&self.space.params(index), repeat)?;
        if v.is_nan() {
            return Err(Error::NonFiniteLoss {
                index: 0,
                detail: format!(
                    "sweep objective returned NaN at {:?}",
                    self.space.params(index)
                ),
            });
        }
        self.cache.entry(index.to_vec()).or_default().push(v);
        self.evaluations += 1;
        Ok(Some(v))
    }
}

/// Runs (or resumes) the local search. The objective receives the parameter
/// tuple and the repeat number.
pub fn sweep(
    objective: &mut dyn FnMut(&[f64], usize) -> Result<f64>,
    mut state: SweepState,
) -> Result<SweepState> {
    if state.converged {
        return Ok(state);
    }
    let space = state.space.clone();
    let config = state.config.clone();
    let mut run = Runner {
        cache: state
            .points
            .iter()
            .map(|p| (p.index.clone(), p.values.clone()))
            .collect(),
        evaluations: state.evaluations,
        budget: config.budget,
        space: &space,
        objective,
    };
    let mut incumbent = config.start.clone();
    let complete = 'search: {
        loop {
            let hood = space.neighborhood(&incumbent, config.radius);
            let mut first = Vec::with_capacity(hood.len());
            for idx in &hood {
                match run.eval(idx, 0)? {
                    Some(v) => first.push(v),
                    None => break 'search false,
                }
            }
            let inc_value = first[hood
                .iter()
                .position(|i| *i == incumbent)
                .expect("centre in hood")];
            let (k, v) = first
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("nonempty neighbourhood");
            if *v < inc_value {
                incumbent = hood[k].clone();
            } else {
                break;
            }
        }
        for idx in space.neighborhood(&incumbent, config.radius) {
            for rep in 1..config.repeats {
                if run.eval(&idx, rep)?.is_none() {
                    break 'search false;
                }
            }
        }
        true
    };
    state.evaluations = run.evaluations;
    state.points = run
        .cache
        .into_iter()
        .map(|(index, values)| SweepPoint {
            params: space.params(&index),
            index,
            values,
        })
        .collect();
    state.incumbent = incumbent;
    state.converged = complete;
    state.refresh_best();
    Ok(state)
}
