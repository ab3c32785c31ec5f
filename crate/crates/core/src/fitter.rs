//! Parameter fitting: sum-of-squares loss through the integrator, minimized by a
//! Nelder–Mead simplex over (by default) log-parameters, from seeded log-uniform starts.
//!
//! Simplex coefficients are fixed: reflection 1, expansion 2, contraction 0.5,
//! shrink 0.5. Box constraints are enforced by projecting every trial point.
//!
//! A fit runs in stages that follow the species dependency order. When the species
//! with no upstream dependencies (the mRNAs of an operon model) are observed, their
//! slots are fitted first on those species alone, then the next level's new slots
//! with the earlier ones held fixed, and finally every slot jointly from the staged
//! point (or from the start, if that is better).

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypothesis::{
    CompiledModel, EvalError, ModelStructure, NameRole, ParameterAssignment, SlotBoxes, SlotSpec,
};
use crate::kinetics::{Dataset, IntegratorControl, Rk4, SimError};
use crate::util::{derive_seed, loss_serde};

const REFLECT: f64 = 1.0;
const EXPAND: f64 = 2.0;
const CONTRACT: f64 = 0.5;
const SHRINK: f64 = 0.5;
/// Initial simplex edge in log space (a factor of e per slot).
const LOG_STEP: f64 = 1.0;
/// Simplex diameter (in optimizer coordinates) below which a descent stops.
const X_TOL: f64 = 1e-10;
const MAX_RESTARTS: usize = 3;
/// Simplex edge of restarts and of the joint polish after staging, relative to
/// `LOG_STEP`.
const LOCAL_SCALE: f64 = 0.1;
/// Seeded draws screened per stage; the simplex starts from the best of them.
const SCREEN_DRAWS: usize = 16;
/// Absolute part of the convergence test, as a fraction of the loss of an all-zero
/// prediction (scaled by the tolerance), so that exact fits terminate.
const SPREAD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("structure has no free parameters")]
    NoSlots,
    #[error("structure does not produce observed species `{0}`")]
    MissingSpecies(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid fit configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub n_starts: usize,
    /// Loss evaluations allowed per start, across all stages.
    pub max_evals: usize,
    /// Relative spread of simplex losses at which a descent counts as converged.
    pub tolerance: f64,
    pub seed: u64,
    pub log_space: bool,
    /// Extra starting points tried after the seeded ones.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warm_starts: Vec<ParameterAssignment>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_starts: 8,
            max_evals: 2000,
            tolerance: 1e-9,
            seed: 0,
            log_space: true,
            warm_starts: Vec::new(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.n_starts == 0 || self.max_evals == 0 {
            return Err(FitError::Config("n_starts and max_evals must be positive".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(FitError::Config("tolerance must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub assignment: ParameterAssignment,
    /// SSE recomputed at `assignment`; `inf` when no start produced a finite loss.
    #[serde(with = "loss_serde")]
    pub loss: f64,
    pub evals: usize,
    pub converged: bool,
    pub start_index: usize,
    /// (evaluation index, best loss so far) at every improvement of the final stage.
    #[serde(skip)]
    pub trace: Vec<(usize, f64)>,
}

impl FitResult {
    pub fn is_feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

struct Case<'d> {
    model: CompiledModel,
    times: &'d [f64],
    /// (model species index, trajectory column)
    observed: Vec<(usize, usize)>,
    values: &'d [Vec<f64>],
}

/// The loss of one structure against one dataset, with every design pre-compiled.
pub struct Objective<'d> {
    slots: Vec<SlotSpec>,
    n_species: usize,
    cases: Vec<Case<'d>>,
    control: IntegratorControl,
}

impl<'d> Objective<'d> {
    /// Loss over every observed species of the dataset.
    pub fn new(structure: &ModelStructure, dataset: &'d Dataset) -> Result<Self, FitError> {
        Self::for_species(structure, dataset, &dataset.observed_species())
    }

    /// Loss over the listed observed species only.
    pub fn for_species(
        structure: &ModelStructure,
        dataset: &'d Dataset,
        observed: &[String],
    ) -> Result<Self, FitError> {
        if dataset.is_empty() {
            return Err(FitError::EmptyDataset);
        }
        let mut cases = Vec::with_capacity(dataset.len());
        for traj in dataset.iter() {
            let mut pairs = Vec::with_capacity(observed.len());
            for sp in observed {
                let m = structure
                    .species_index(sp)
                    .ok_or_else(|| FitError::MissingSpecies(sp.clone()))?;
                let c = traj
                    .species
                    .iter()
                    .position(|s| s == sp)
                    .ok_or_else(|| FitError::MissingSpecies(sp.clone()))?;
                pairs.push((m, c));
            }
            cases.push(Case {
                model: CompiledModel::new(structure, &dataset.constants(traj))?,
                times: &traj.times,
                observed: pairs,
                values: &traj.values,
            });
        }
        Ok(Objective {
            slots: structure.slots().to_vec(),
            n_species: structure.species().len(),
            cases,
            control: IntegratorControl::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    /// SSE at `params` (slot order), or the divergence that prevented it.
    pub fn try_loss(&self, params: &[f64]) -> Result<f64, SimError> {
        self.try_loss_capped(params, f64::INFINITY)
    }

    /// As [`Objective::try_loss`], but gives up with `inf` as soon as the partial sum
    /// exceeds `cap`.
    fn try_loss_capped(&self, params: &[f64], cap: f64) -> Result<f64, SimError> {
        let mut rk = Rk4::new(self.n_species);
        let mut y = vec![0.0; self.n_species];
        let mut total = 0.0;
        for case in &self.cases {
            let bound = case.model.bind(params);
            y.iter_mut().for_each(|v| *v = 0.0);
            let mut over = false;
            rk.run(&bound, &mut y, case.times, self.control.substeps, |i, state| {
                let row = &case.values[i];
                for &(m, c) in &case.observed {
                    let r = state[m] - row[c];
                    total += r * r;
                }
                over = total > cap;
                !over
            })?;
            if over {
                return Ok(f64::INFINITY);
            }
        }
        Ok(total)
    }

    /// SSE at `params`; `inf` on divergence or a non-finite result.
    pub fn loss(&self, params: &[f64]) -> f64 {
        self.loss_capped(params, f64::INFINITY)
    }

    /// Exact SSE when it is at most `cap`; otherwise some value above `cap`.
    pub fn loss_capped(&self, params: &[f64], cap: f64) -> f64 {
        match self.try_loss_capped(params, cap) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                log::trace!("loss evaluation failed: {e}");
                f64::INFINITY
            }
        }
    }
}

/// Sum over designs, observed species and grid points of squared residuals between the
/// simulated structure (zero initial state) and the data; `inf` when integration diverges.
pub fn sse_loss(
    structure: &ModelStructure,
    assignment: &ParameterAssignment,
    dataset: &Dataset,
) -> Result<f64, FitError> {
    let obj = Objective::new(structure, dataset)?;
    let params = assignment.to_vec(structure).ok_or_else(|| {
        let missing = structure
            .slots()
            .iter()
            .find(|s| assignment.get(&s.name).is_none())
            .map(|s| s.name.clone())
            .unwrap_or_default();
        FitError::Eval(EvalError::UnboundSlot(missing))
    })?;
    match obj.try_loss(&params) {
        Ok(v) => Ok(v),
        Err(e) => {
            log::debug!("sse_loss: {e}");
            Ok(f64::INFINITY)
        }
    }
}

/// Optimizer coordinates for a subset of slots.
struct Space {
    lower: Vec<f64>,
    upper: Vec<f64>,
    log: bool,
}

impl Space {
    fn new(slots: &[&SlotSpec], log: bool) -> Self {
        let t = |v: f64| if log { v.ln() } else { v };
        Space {
            lower: slots.iter().map(|s| t(s.lower)).collect(),
            upper: slots.iter().map(|s| t(s.upper)).collect(),
            log,
        }
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    fn to_params(&self, x: &[f64]) -> Vec<f64> {
        if self.log {
            x.iter().map(|v| v.exp()).collect()
        } else {
            x.to_vec()
        }
    }

    fn from_params(&self, p: &[f64]) -> Vec<f64> {
        let mut x: Vec<f64> = if self.log {
            p.iter().map(|v| v.ln()).collect()
        } else {
            p.to_vec()
        };
        self.project(&mut x);
        x
    }

    fn initial_step(&self, i: usize, x0: f64, scale: f64) -> f64 {
        let step = scale
            * if self.log {
                LOG_STEP
            } else {
                0.1 * x0.abs().max(1e-3 * (self.upper[i] - self.lower[i]))
            };
        if x0 + step <= self.upper[i] {
            step
        } else {
            -step
        }
    }
}

/// Shared evaluation budget of one start.
struct Budget {
    used: usize,
    max: usize,
}

impl Budget {
    fn left(&self) -> bool {
        self.used < self.max
    }
}

/// Nelder–Mead over the coordinates of `space`; `f(params, cap)` must be exact when the
/// loss is at most `cap`.
struct Simplex<'a> {
    f: &'a dyn Fn(&[f64], f64) -> f64,
    space: Space,
    budget: &'a mut Budget,
    best: (Vec<f64>, f64),
    trace: Vec<(usize, f64)>,
    /// Added to `|best|` in the relative spread test.
    floor: f64,
}

impl Simplex<'_> {
    fn eval(&mut self, mut x: Vec<f64>, cap: f64) -> (Vec<f64>, f64) {
        self.space.project(&mut x);
        let f = (self.f)(&self.space.to_params(&x), cap);
        self.budget.used += 1;
        if f < self.best.1 {
            self.best = (x.clone(), f);
            self.trace.push((self.budget.used, f));
        }
        (x, f)
    }

    /// One descent from `x0`; returns whether it met the tolerance.
    fn descend(&mut self, x0: &[f64], f0: f64, tol: f64, scale: f64) -> bool {
        let n = x0.len();
        let mut pts: Vec<(Vec<f64>, f64)> = vec![(x0.to_vec(), f0)];
        for i in 0..n {
            if !self.budget.left() {
                return false;
            }
            let mut x = x0.to_vec();
            x[i] += self.space.initial_step(i, x0[i], scale);
            pts.push(self.eval(x, f64::INFINITY));
        }
        loop {
            pts.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (fb, fw) = (pts[0].1, pts[n].1);
            if !fb.is_finite() {
                // nowhere to go from an all-infeasible simplex
                return false;
            }
            let spread = fw - fb;
            let diameter = pts[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&pts[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0f64, f64::max);
            if spread <= tol * (fb.abs() + self.floor) || diameter <= X_TOL {
                return true;
            }
            if !self.budget.left() {
                return false;
            }
            let mut centroid = vec![0.0; n];
            for (x, _) in &pts[..n] {
                for (c, v) in centroid.iter_mut().zip(x) {
                    *c += v / n as f64;
                }
            }
            let along = |t: f64, from: &[f64]| -> Vec<f64> {
                centroid.iter().zip(from).map(|(c, w)| c + t * (c - w)).collect()
            };
            let worst = pts[n].0.clone();
            let (xr, fr) = self.eval(along(REFLECT, &worst), fw);
            if fr < fb {
                if !self.budget.left() {
                    pts[n] = (xr, fr);
                    continue;
                }
                let (xe, fe) = self.eval(along(EXPAND, &worst), fr);
                pts[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
                continue;
            }
            if fr < pts[n - 1].1 {
                pts[n] = (xr, fr);
                continue;
            }
            if !self.budget.left() {
                return false;
            }
            let (xc, fc) = if fr < fw {
                self.eval(along(CONTRACT * REFLECT, &worst), fr)
            } else {
                self.eval(along(-CONTRACT, &worst), fw)
            };
            if fc < fr.min(fw) {
                pts[n] = (xc, fc);
                continue;
            }
            let best = pts[0].0.clone();
            for p in pts.iter_mut().skip(1) {
                if !self.budget.left() {
                    return false;
                }
                let x: Vec<f64> = best
                    .iter()
                    .zip(&p.0)
                    .map(|(b, v)| b + SHRINK * (v - b))
                    .collect();
                *p = self.eval(x, f64::INFINITY);
            }
        }
    }

    /// Descents from `x0`, restarted from the best point with a smaller simplex until
    /// one finds nothing better. The first simplex has edge `scale` relative to the
    /// default. Returns whether the last descent converged without improvement.
    fn minimize(&mut self, x0: Vec<f64>, f0: f64, tol: f64, scale: f64) -> bool {
        if f0 < self.best.1 {
            self.best = (x0.clone(), f0);
        }
        let (mut x, mut f) = (x0, f0);
        for round in 0..=MAX_RESTARTS {
            let scale = if round == 0 { scale } else { LOCAL_SCALE };
            if !self.budget.left() || !self.descend(&x, f, tol, scale) {
                return false;
            }
            let (bx, bf) = self.best.clone();
            let stalled = f - bf <= tol * (bf.abs() + self.floor);
            x = bx;
            f = bf;
            if stalled {
                return true;
            }
        }
        false
    }
}

/// One fitting stage: a closed subsystem, the observed species it produces, and the
/// slots it introduces.
struct Stage<'d> {
    objective: Objective<'d>,
    /// Rendered subsystem and its observed species; identifies the stage across
    /// structures.
    key: String,
    /// Full-structure slot index of every stage slot.
    slot_map: Vec<usize>,
    /// Stage slot positions optimized in this stage.
    free: Vec<usize>,
}

/// Longest upstream path per species; `None` if species depend on each other cyclically.
fn species_levels(structure: &ModelStructure) -> Option<Vec<usize>> {
    let n = structure.species().len();
    let deps: Vec<Vec<usize>> = structure
        .rhs()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut d = Vec::new();
            e.visit_names(&mut |role, name| {
                if role == NameRole::Species {
                    if let Some(j) = structure.species_index(name) {
                        if j != i && !d.contains(&j) {
                            d.push(j);
                        }
                    }
                }
            });
            d
        })
        .collect();
    let mut level = vec![0usize; n];
    for _ in 0..=n {
        let mut changed = false;
        for i in 0..n {
            let l = deps[i].iter().map(|&j| level[j] + 1).max().unwrap_or(0);
            if l != level[i] {
                level[i] = l;
                changed = true;
            }
        }
        if !changed {
            return Some(level);
        }
    }
    None
}

fn plan_stages<'d>(structure: &ModelStructure, dataset: &'d Dataset) -> Result<Vec<Stage<'d>>, FitError> {
    let Some(levels) = species_levels(structure) else {
        return Ok(Vec::new());
    };
    let max_level = levels.iter().copied().max().unwrap_or(0);
    let observed = dataset.observed_species();
    let boxes: SlotBoxes = structure
        .slots()
        .iter()
        .map(|s| (s.name.clone(), (s.lower, s.upper)))
        .collect();
    let mut fixed: Vec<bool> = vec![false; structure.slots().len()];
    let mut stages = Vec::new();
    for level in 0..=max_level {
        let keep: Vec<usize> = (0..levels.len()).filter(|&i| levels[i] <= level).collect();
        let species: Vec<String> = keep.iter().map(|&i| structure.species()[i].clone()).collect();
        let seen: Vec<String> = observed.iter().filter(|s| species.contains(s)).cloned().collect();
        if seen.is_empty() {
            continue;
        }
        let rhs = keep.iter().map(|&i| structure.rhs()[i].clone()).collect();
        let sub = ModelStructure::new(species, structure.inputs().to_vec(), rhs, &boxes)
            .expect("closed subsystem of a valid structure is valid");
        let slot_map: Vec<usize> = sub
            .slots()
            .iter()
            .map(|s| structure.slots().iter().position(|f| f.name == s.name).expect("same slots"))
            .collect();
        let free: Vec<usize> = (0..slot_map.len()).filter(|&k| !fixed[slot_map[k]]).collect();
        if free.is_empty() {
            continue;
        }
        for &k in &free {
            fixed[slot_map[k]] = true;
        }
        stages.push(Stage {
            objective: Objective::for_species(&sub, dataset, &seen)?,
            key: format!("{}|{}", sub.render(), seen.join(",")),
            slot_map,
            free,
        });
    }
    if stages.len() == 1 && stages[0].free.len() == structure.slots().len() {
        stages.clear();
    }
    Ok(stages)
}

/// A start: a fixed point, or a seeded stream that supplies the screened draws.
enum Start {
    Fixed(Vec<f64>),
    /// Seeded start with this index.
    Seeded(usize),
}

fn draw(rng: &mut ChaCha8Rng, slots: &[SlotSpec]) -> Vec<f64> {
    slots
        .iter()
        .map(|s| {
            let u: f64 = rng.gen();
            (s.lower.ln() + u * (s.upper.ln() - s.lower.ln())).exp()
        })
        .collect()
}

fn start_stream(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("start-{index}")))
}

/// Screening draws of one stage of one seeded start; keyed by the stage so that equal
/// subsystems of different structures see the same draws.
fn stage_stream(seed: u64, index: usize, stage: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("start-{index}/{stage}")))
}

/// Stage results shared between the fits of structures with a common subsystem. A
/// seeded stage's outcome is a function of its cache key alone, so sharing never
/// changes a result (evaluations are still counted as if spent).
#[derive(Debug, Default)]
pub struct StageCache(Mutex<HashMap<String, StageOutcome>>);

#[derive(Debug, Clone)]
struct StageOutcome {
    free: Option<Vec<f64>>,
    used: usize,
}

impl StageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("stage cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// First seeded draw of each of the first `n` starts. Start `i` does not depend on `n`.
pub fn seeded_starts(structure: &ModelStructure, seed: u64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| draw(&mut start_stream(seed, i), structure.slots()))
        .collect()
}

struct Problem<'d> {
    full: Objective<'d>,
    stages: Vec<Stage<'d>>,
    assign: Box<dyn Fn(&[f64]) -> ParameterAssignment + Send + Sync>,
    /// Loss of an all-zero prediction.
    scale: f64,
}

impl Problem<'_> {
    /// Optimizes the free slots of `stage` with the others taken from `x`. Returns the
    /// new free values (`None` if no feasible point was found) and the budget used after.
    fn run_stage(
        &self,
        stage: &Stage,
        config: &FitConfig,
        x: &[f64],
        seeded: Option<usize>,
        used: usize,
    ) -> StageOutcome {
        let mut budget = Budget {
            used,
            max: config.max_evals,
        };
        let base: Vec<f64> = stage.slot_map.iter().map(|&j| x[j]).collect();
        let fill = |free: &[f64]| {
            let mut p = base.clone();
            for (&k, v) in stage.free.iter().zip(free) {
                p[k] = *v;
            }
            p
        };
        let f = |free: &[f64], cap: f64| stage.objective.loss_capped(&fill(free), cap);
        let slots: Vec<&SlotSpec> = stage.free.iter().map(|&k| &stage.objective.slots[k]).collect();
        let (mut p0, mut f0) = match seeded {
            Some(index) => {
                let specs: Vec<SlotSpec> = slots.iter().map(|s| (*s).clone()).collect();
                let mut rng = stage_stream(config.seed, index, &stage.key);
                let (mut p0, mut f0) = (Vec::new(), f64::INFINITY);
                for _ in 0..SCREEN_DRAWS {
                    if !budget.left() {
                        break;
                    }
                    let cand = draw(&mut rng, &specs);
                    let fc = f(&cand, f0);
                    budget.used += 1;
                    if fc < f0 || p0.is_empty() {
                        p0 = cand;
                        f0 = fc;
                    }
                }
                (p0, f0)
            }
            None => {
                let p0: Vec<f64> = stage.free.iter().map(|&k| base[k]).collect();
                budget.used += 1;
                let f0 = f(&p0, f64::INFINITY);
                (p0, f0)
            }
        };
        if !f0.is_finite() {
            return StageOutcome {
                free: None,
                used: budget.used,
            };
        }
        let space = Space::new(&slots, config.log_space);
        let x0 = space.from_params(&p0);
        let mut nm = Simplex {
            f: &f,
            space,
            budget: &mut budget,
            best: (x0.clone(), f0),
            trace: Vec::new(),
            floor: SPREAD_FLOOR * self.scale,
        };
        nm.minimize(x0, f0, config.tolerance, 1.0);
        (p0, f0) = (nm.space.to_params(&nm.best.0), nm.best.1);
        debug_assert!(f0.is_finite());
        StageOutcome {
            free: Some(p0),
            used: budget.used,
        }
    }

    fn stage_key(stage: &Stage, config: &FitConfig, x: &[f64], index: usize, used: usize) -> String {
        let mut key = format!(
            "{}|{index}|{}|{used}|{}|{:x}|{}",
            stage.key,
            config.seed,
            config.max_evals,
            config.tolerance.to_bits(),
            config.log_space
        );
        for (k, &j) in stage.slot_map.iter().enumerate() {
            if !stage.free.contains(&k) {
                key.push_str(&format!("|{:x}", x[j].to_bits()));
            }
        }
        key
    }

    fn solve(&self, config: &FitConfig, start: Start, start_index: usize, cache: Option<&StageCache>) -> FitResult {
        let all: Vec<&SlotSpec> = self.full.slots.iter().collect();
        let mut budget = Budget {
            used: 0,
            max: config.max_evals,
        };
        let (seeded, first) = match start {
            Start::Fixed(mut p) => {
                for (v, s) in p.iter_mut().zip(&all) {
                    *v = v.clamp(s.lower, s.upper);
                }
                (None, p)
            }
            Start::Seeded(index) => (Some(index), draw(&mut start_stream(config.seed, index), &self.full.slots)),
        };
        budget.used += 1;
        let f_first = self.full.loss(&first);
        let (mut x, mut fx) = (first.clone(), f_first);
        let mut staged = false;
        for stage in &self.stages {
            if !budget.left() {
                break;
            }
            let outcome = match (seeded, cache) {
                (Some(index), Some(cache)) => {
                    let key = Self::stage_key(stage, config, &x, index, budget.used);
                    let hit = cache.0.lock().expect("stage cache lock").get(&key).cloned();
                    match hit {
                        Some(o) => o,
                        None => {
                            let o = self.run_stage(stage, config, &x, seeded, budget.used);
                            cache.0.lock().expect("stage cache lock").insert(key, o.clone());
                            o
                        }
                    }
                }
                _ => self.run_stage(stage, config, &x, seeded, budget.used),
            };
            budget.used = outcome.used;
            if let Some(free) = outcome.free {
                for (&k, v) in stage.free.iter().zip(free) {
                    x[stage.slot_map[k]] = v;
                }
                staged = true;
            }
        }
        if staged && budget.left() {
            fx = self.full.loss(&x);
            budget.used += 1;
            if !(fx <= f_first) {
                x = first;
                fx = f_first;
            }
        } else if staged {
            x = first;
        }
        if let (true, Some(index)) = (self.stages.is_empty(), seeded) {
            let mut rng = start_stream(config.seed, index);
            draw(&mut rng, &self.full.slots);
            for _ in 1..SCREEN_DRAWS {
                if !budget.left() {
                    break;
                }
                let cand = draw(&mut rng, &self.full.slots);
                let fc = self.full.loss_capped(&cand, fx);
                budget.used += 1;
                if fc < fx {
                    x = cand;
                    fx = fc;
                }
            }
        }
        let f = |p: &[f64], cap: f64| self.full.loss_capped(p, cap);
        let space = Space::new(&all, config.log_space);
        let x0 = space.from_params(&x);
        let mut nm = Simplex {
            f: &f,
            space,
            budget: &mut budget,
            best: (x0.clone(), fx),
            trace: Vec::new(),
            floor: SPREAD_FLOOR * self.scale,
        };
        let scale = if staged { LOCAL_SCALE } else { 1.0 };
        let converged = fx.is_finite() && nm.minimize(x0, fx, config.tolerance, scale);
        let params = nm.space.to_params(&nm.best.0);
        let trace = std::mem::take(&mut nm.trace);
        let loss = self.full.loss(&params);
        FitResult {
            assignment: (self.assign)(&params),
            loss,
            evals: budget.used,
            converged: converged && loss.is_finite(),
            start_index,
            trace,
        }
    }
}

fn problem<'d>(structure: &ModelStructure, dataset: &'d Dataset, config: &FitConfig) -> Result<Problem<'d>, FitError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    if structure.slots().is_empty() {
        return Err(FitError::NoSlots);
    }
    let s = structure.clone();
    let scale = dataset.mean_squared_signal() * dataset.residual_count() as f64;
    Ok(Problem {
        full: Objective::new(structure, dataset)?,
        stages: plan_stages(structure, dataset)?,
        assign: Box::new(move |p| s.assignment_from_vec(p)),
        scale,
    })
}

/// Simplex fit from the first seeded start.
pub fn fit(structure: &ModelStructure, dataset: &Dataset, config: &FitConfig) -> Result<FitResult, FitError> {
    let p = problem(structure, dataset, config)?;
    Ok(p.solve(config, Start::Seeded(0), 0, None))
}

/// Simplex fit from an explicit starting assignment.
pub fn fit_from(
    structure: &ModelStructure,
    dataset: &Dataset,
    config: &FitConfig,
    start: &ParameterAssignment,
) -> Result<FitResult, FitError> {
    let p = problem(structure, dataset, config)?;
    let x = start
        .to_vec(structure)
        .ok_or_else(|| FitError::Config("start does not bind every slot".into()))?;
    Ok(p.solve(config, Start::Fixed(x), 0, None))
}

/// Best of `n_starts` seeded fits plus any warm starts, chosen by (loss, start index).
pub fn multi_start_fit(
    structure: &ModelStructure,
    dataset: &Dataset,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    multi_start_fit_cached(structure, dataset, config, &StageCache::new())
}

/// [`multi_start_fit`] sharing stage results through `cache`. Use one cache per
/// dataset and configuration.
pub fn multi_start_fit_cached(
    structure: &ModelStructure,
    dataset: &Dataset,
    config: &FitConfig,
    cache: &StageCache,
) -> Result<FitResult, FitError> {
    let p = problem(structure, dataset, config)?;
    let warm: Vec<Vec<f64>> = config.warm_starts.iter().filter_map(|w| w.to_vec(structure)).collect();
    let n = config.n_starts + warm.len();
    let results: Vec<FitResult> = (0..n)
        .into_par_iter()
        .map(|i| {
            let start = if i < config.n_starts {
                Start::Seeded(i)
            } else {
                Start::Fixed(warm[i - config.n_starts].clone())
            };
            p.solve(config, start, i, Some(cache))
        })
        .collect();
    let evals: usize = results.iter().map(|r| r.evals).sum();
    let mut best = results
        .into_iter()
        .min_by(|a, b| a.loss.total_cmp(&b.loss).then(a.start_index.cmp(&b.start_index)))
        .expect("at least one start");
    best.evals = evals;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSensitivity {
    pub slot: String,
    pub value: f64,
    /// Central difference of the loss with respect to ln(value).
    pub log_gradient: f64,
    #[serde(with = "loss_serde")]
    pub loss_up: f64,
    #[serde(with = "loss_serde")]
    pub loss_down: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    #[serde(with = "loss_serde")]
    pub loss: f64,
    pub slots: Vec<SlotSensitivity>,
    pub gradient_norm: f64,
}

/// Loss response to a ±`rel` perturbation of each slot, and a finite-difference
/// log-gradient from the same evaluations.
pub fn sensitivity(
    structure: &ModelStructure,
    assignment: &ParameterAssignment,
    dataset: &Dataset,
    rel: f64,
) -> Result<SensitivityReport, FitError> {
    let obj = Objective::new(structure, dataset)?;
    let p = assignment
        .to_vec(structure)
        .ok_or_else(|| FitError::Config("assignment does not bind every slot".into()))?;
    let loss = obj.loss(&p);
    let mut slots = Vec::with_capacity(p.len());
    for (i, spec) in structure.slots().iter().enumerate() {
        let mut up = p.clone();
        up[i] *= 1.0 + rel;
        let mut down = p.clone();
        down[i] *= 1.0 - rel;
        let (lu, ld) = (obj.loss(&up), obj.loss(&down));
        let dx = (1.0 + rel).ln() - (1.0 - rel).ln();
        slots.push(SlotSensitivity {
            slot: spec.name.clone(),
            value: p[i],
            log_gradient: (lu - ld) / dx,
            loss_up: lu,
            loss_down: ld,
        });
    }
    let gradient_norm = slots.iter().map(|s| s.log_gradient.powi(2)).sum::<f64>().sqrt();
    Ok(SensitivityReport {
        loss,
        slots,
        gradient_norm,
    })
}
