//! Closed design-build-test-learn loop: query-by-committee experiment selection over
//! the enumerable design pool, with re-induction after every measurement.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{decode_design, enumerate_designs, DesignCatalog, DesignGenome};
use crate::kinetics::{
    design_constants, integrate, simulate_design, Dataset, IntegratorControl, KineticParams,
    NoiseModel, Observation, SimError, SimState, Trajectory,
};
use crate::search::{induce, BackgroundKnowledge, Hypothesis, SearchConfig, SearchError};
use crate::util::{derive_seed, loss_serde};

pub const STATE_VERSION: u32 = 1;
/// Variance charged for a committee member whose simulation diverges on a design.
pub const DIVERGENCE_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoopError {
    #[error("untested pool is exhausted")]
    PoolExhausted,
    #[error("invalid loop configuration: {0}")]
    Config(String),
    #[error("run state: {0}")]
    State(String),
    #[error(transparent)]
    Search(#[from] SearchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    /// Largest committee disagreement.
    Committee,
    /// Uniform draw from the untested pool.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Designs measured before the first induction.
    pub n0: usize,
    /// Experiments allowed after the seed set.
    pub budget: usize,
    /// Rounds the top-1 structure must stay unchanged before stopping.
    pub stable_rounds: usize,
    /// Top-1 loss per residual, relative to the mean squared signal, needed to stop.
    pub threshold: f64,
    pub acquisition: Acquisition,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            n0: 4,
            budget: 20,
            stable_rounds: 2,
            threshold: 1e-8,
            acquisition: Acquisition::Committee,
        }
    }
}

impl LoopConfig {
    /// On failure returns the offending field name and a message.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.n0 == 0 {
            return Err(("n0", "must be at least 1".into()));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(("threshold", "must be positive".into()));
        }
        Ok(())
    }
}

/// How a design is measured: the catalog that gives it numeric inputs, the sampling
/// times and the species read out.
#[derive(Debug, Clone, PartialEq)]
pub struct Assay {
    pub catalog: DesignCatalog,
    pub times: Vec<f64>,
    pub observed: Vec<String>,
    pub control: IntegratorControl,
}

/// Source of measurements for proposed designs.
pub trait Oracle {
    fn measure(&self, design: &DesignGenome) -> Result<Trajectory, SimError>;
}

/// Measures designs by simulating the ground-truth model and adding noise.
#[derive(Debug, Clone)]
pub struct SimulatorOracle {
    pub params: KineticParams,
    pub catalog: DesignCatalog,
    pub times: Vec<f64>,
    pub noise: NoiseModel,
    pub observation: Observation,
    pub control: IntegratorControl,
}

impl Oracle for SimulatorOracle {
    fn measure(&self, design: &DesignGenome) -> Result<Trajectory, SimError> {
        simulate_design(
            design,
            &self.params,
            &self.catalog,
            &self.times,
            &self.noise,
            &self.observation,
            &self.control,
        )
    }
}

/// Top hypotheses of the latest induction, best first, weighted uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Committee {
    members: Vec<Hypothesis>,
}

impl Committee {
    /// Keeps feasible members; `None` when none remain.
    pub fn new(mut members: Vec<Hypothesis>) -> Option<Self> {
        members.retain(Hypothesis::is_feasible);
        if members.is_empty() {
            return None;
        }
        // stable, so equal scores keep their incoming order
        members.sort_by(|a, b| a.score.total_cmp(&b.score));
        Some(Committee { members })
    }

    pub fn members(&self) -> &[Hypothesis] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn top(&self) -> &Hypothesis {
        &self.members[0]
    }
}

/// Observed-species predictions of one hypothesis on a design, `None` on divergence.
fn predict(h: &Hypothesis, design: &DesignGenome, assay: &Assay) -> Option<Vec<f64>> {
    let consts = design_constants(design, &assay.catalog);
    let init = SimState::zeros(h.structure.species().len());
    let sol = integrate(&h.structure, &h.assignment, &consts, &init, &assay.times, &assay.control).ok()?;
    let idx: Vec<usize> = assay
        .observed
        .iter()
        .map(|s| h.structure.species_index(s))
        .collect::<Option<_>>()?;
    Some(
        sol.states
            .iter()
            .flat_map(|st| idx.iter().map(move |&j| st.0[j]))
            .collect(),
    )
}

/// Mean over positions of the population variance across the given prediction vectors.
pub(crate) fn mean_variance(preds: &[Vec<f64>]) -> f64 {
    if preds.len() < 2 {
        return 0.0;
    }
    let points = preds[0].len();
    let mut column = vec![0.0; preds.len()];
    let mut total = 0.0;
    for i in 0..points {
        for (c, p) in column.iter_mut().zip(preds) {
            *c = p[i];
        }
        // sorted so the result does not depend on member order
        column.sort_by(f64::total_cmp);
        // pairwise form: exactly zero when members agree
        let k = column.len() as f64;
        let mut sq = 0.0;
        for (j, a) in column.iter().enumerate() {
            for b in &column[j + 1..] {
                sq += (a - b) * (a - b);
            }
        }
        total += sq / (k * k);
    }
    total / points.max(1) as f64
}

/// Mean over sampling times and observed species of the across-member variance of the
/// predictions. Diverging members contribute [`DIVERGENCE_PENALTY`] with weight equal
/// to their share of the committee.
pub fn disagreement(committee: &Committee, design: &DesignGenome, assay: &Assay) -> f64 {
    let m = committee.len() as f64;
    let preds: Vec<Vec<f64>> = committee
        .members()
        .iter()
        .filter_map(|h| predict(h, design, assay))
        .collect();
    let diverged = committee.len() - preds.len();
    let var = mean_variance(&preds);
    (preds.len() as f64 / m) * var + (diverged as f64 / m) * DIVERGENCE_PENALTY
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Tested,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    BudgetExhausted,
    PoolExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub allowed: usize,
    pub spent: usize,
}

/// Result of one induction inside the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionRecord {
    pub n_designs: usize,
    /// `None` when no structure could be fitted.
    pub top_structure: Option<String>,
    #[serde(with = "loss_serde")]
    pub top_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub design: String,
    /// Acquisition value of the chosen design; `nan` under random selection.
    #[serde(with = "loss_serde")]
    pub acquisition: f64,
    pub outcome: Outcome,
    pub top_structure: Option<String>,
    #[serde(with = "loss_serde")]
    pub top_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub acquisition: Acquisition,
    pub budget: Budget,
    pub seed_designs: Vec<String>,
    pub tested: BTreeMap<String, Trajectory>,
    /// Untested design keys in canonical enumeration order.
    pub untested: Vec<String>,
    pub failed: Vec<String>,
    pub committee: Option<Committee>,
    pub inductions: Vec<InductionRecord>,
    pub history: Vec<RoundRecord>,
    pub stopped: Option<StopReason>,
}

impl RunState {
    pub fn from_json(text: &str) -> Result<Self, LoopError> {
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe =
            serde_json::from_str(text).map_err(|e| LoopError::State(format!("corrupt checkpoint: {e}")))?;
        if probe.format_version != STATE_VERSION {
            return Err(LoopError::State(format!(
                "checkpoint format version {} is not supported (expected {STATE_VERSION})",
                probe.format_version
            )));
        }
        serde_json::from_str(text).map_err(|e| LoopError::State(format!("corrupt checkpoint: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run state serializes")
    }

    pub fn round(&self) -> usize {
        self.history.len()
    }

    /// Designs measured so far, including failed attempts and the seed set.
    pub fn experiments(&self) -> usize {
        self.tested.len() + self.failed.len()
    }

    pub fn top_structure(&self) -> Option<&str> {
        self.inductions.last().and_then(|r| r.top_structure.as_deref())
    }

    pub fn dataset(&self, catalog: &DesignCatalog) -> Dataset {
        let mut d = Dataset::new(catalog.clone());
        for t in self.tested.values() {
            d.insert(t.clone());
        }
        d
    }

    fn mean_squared_signal(&self) -> (f64, usize) {
        let mut n = 0usize;
        let mut s = 0.0;
        for t in self.tested.values() {
            for v in t.values.iter().flatten() {
                s += v * v;
                n += 1;
            }
        }
        (if n == 0 { 0.0 } else { s / n as f64 }, n)
    }
}

/// True once the top-1 fit is exact (loss per residual below `threshold` times the
/// mean squared signal) and the top-1 structure has not changed over the last
/// `stable_rounds` rounds.
pub fn stopping_check(state: &RunState, config: &LoopConfig) -> bool {
    let Some(committee) = &state.committee else {
        return false;
    };
    let r = config.stable_rounds;
    if state.inductions.len() < r + 1 {
        return false;
    }
    let recent = &state.inductions[state.inductions.len() - (r + 1)..];
    let top = &recent[r].top_structure;
    if top.is_none() || recent.iter().any(|x| &x.top_structure != top) {
        return false;
    }
    let (mss, n) = state.mean_squared_signal();
    let loss = committee.top().loss;
    loss.is_finite() && loss / (n.max(1) as f64) < config.threshold * mss
}

/// The untested design with the largest disagreement; ties go to the earliest design
/// in canonical order.
pub fn propose_next(state: &RunState, assay: &Assay) -> Result<(DesignGenome, f64), LoopError> {
    if state.untested.is_empty() {
        return Err(LoopError::PoolExhausted);
    }
    let designs: Vec<DesignGenome> = state
        .untested
        .iter()
        .map(|k| decode_design(k, &assay.catalog))
        .collect::<Result<_, _>>()
        .map_err(|e| LoopError::State(e.to_string()))?;
    let Some(committee) = &state.committee else {
        log::warn!("no committee; proposing the first untested design");
        return Ok((designs[0].clone(), 0.0));
    };
    let scores: Vec<f64> = designs
        .par_iter()
        .map(|d| disagreement(committee, d, assay))
        .collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    Ok((designs[best].clone(), scores[best]))
}

fn random_pick(state: &RunState) -> Result<usize, LoopError> {
    if state.untested.is_empty() {
        return Err(LoopError::PoolExhausted);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, &format!("random-round-{}", state.round())));
    Ok(rng.gen_range(0..state.untested.len()))
}

/// Everything a loop needs besides its state.
pub struct Dbtl<'a> {
    pub assay: Assay,
    pub knowledge: &'a BackgroundKnowledge,
    pub search: &'a SearchConfig,
    pub config: &'a LoopConfig,
    pub oracle: &'a dyn Oracle,
    pub seed: u64,
    pub config_hash: String,
}

impl Dbtl<'_> {
    fn measure(&self, design: &DesignGenome) -> Option<Trajectory> {
        match self.oracle.measure(design) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("experiment on {} failed: {e}", design.key());
                None
            }
        }
    }

    fn reinduce(&self, state: &mut RunState) -> Result<(), LoopError> {
        let data = state.dataset(&self.assay.catalog);
        let n_designs = data.len();
        let committee = if data.is_empty() {
            None
        } else {
            match induce(&data, self.knowledge, self.search) {
                Ok(report) => Committee::new(report.ranked),
                Err(SearchError::NoModel { tried }) => {
                    log::warn!("no feasible structure among {tried} candidates");
                    None
                }
                Err(e) => return Err(e.into()),
            }
        };
        state.inductions.push(InductionRecord {
            n_designs,
            top_structure: committee.as_ref().map(|c| c.top().text()),
            top_loss: committee.as_ref().map_or(f64::INFINITY, |c| c.top().loss),
        });
        state.committee = committee;
        Ok(())
    }

    /// Draws and measures the seed set, then runs the first induction.
    pub fn start(&self) -> Result<RunState, LoopError> {
        self.config
            .validate()
            .map_err(|(f, m)| LoopError::Config(format!("{f}: {m}")))?;
        let pool = enumerate_designs(&self.assay.catalog);
        if self.config.n0 > pool.len() {
            return Err(LoopError::Config(format!("n0 = {} exceeds the pool of {}", self.config.n0, pool.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "seed-designs"));
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), self.config.n0).into_vec();
        picked.sort_unstable();
        let mut state = RunState {
            format_version: STATE_VERSION,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            acquisition: self.config.acquisition,
            budget: Budget {
                allowed: self.config.budget,
                spent: 0,
            },
            seed_designs: picked.iter().map(|&i| pool[i].key()).collect(),
            tested: BTreeMap::new(),
            untested: Vec::new(),
            failed: Vec::new(),
            committee: None,
            inductions: Vec::new(),
            history: Vec::new(),
            stopped: None,
        };
        let mut next = picked.iter().peekable();
        for (i, d) in pool.iter().enumerate() {
            if next.peek() == Some(&&i) {
                next.next();
                match self.measure(d) {
                    Some(t) => {
                        state.tested.insert(d.key(), t);
                    }
                    None => state.failed.push(d.key()),
                }
            } else {
                state.untested.push(d.key());
            }
        }
        self.reinduce(&mut state)?;
        Ok(state)
    }

    /// Runs one round. Returns `false` (and records why) once the loop has stopped.
    pub fn step(&self, state: &mut RunState) -> Result<bool, LoopError> {
        if state.stopped.is_some() {
            return Ok(false);
        }
        let stop = if stopping_check(state, self.config) {
            Some(StopReason::Converged)
        } else if state.budget.spent >= state.budget.allowed {
            Some(StopReason::BudgetExhausted)
        } else if state.untested.is_empty() {
            Some(StopReason::PoolExhausted)
        } else {
            None
        };
        if let Some(reason) = stop {
            log::info!("loop stopped after {} rounds: {reason:?}", state.round());
            state.stopped = Some(reason);
            return Ok(false);
        }
        let (index, acquisition) = match state.acquisition {
            Acquisition::Committee => {
                let (design, value) = propose_next(state, &self.assay)?;
                let key = design.key();
                let i = state.untested.iter().position(|k| *k == key).expect("proposal is untested");
                (i, value)
            }
            Acquisition::Random => (random_pick(state)?, f64::NAN),
        };
        let key = state.untested.remove(index);
        let design = decode_design(&key, &self.assay.catalog).map_err(|e| LoopError::State(e.to_string()))?;
        state.budget.spent += 1;
        let outcome = match self.measure(&design) {
            Some(t) => {
                state.tested.insert(key.clone(), t);
                Outcome::Tested
            }
            None => {
                state.failed.push(key.clone());
                Outcome::Failed
            }
        };
        self.reinduce(state)?;
        let last = state.inductions.last().expect("just induced");
        state.history.push(RoundRecord {
            round: state.history.len() + 1,
            design: key,
            acquisition,
            outcome,
            top_structure: last.top_structure.clone(),
            top_loss: last.top_loss,
        });
        log::info!(
            "round {}: tested {} (acquisition {acquisition:.4e}), top-1 loss {:.4e}",
            state.round(),
            design.key(),
            last.top_loss
        );
        Ok(true)
    }

    /// Steps until the loop stops or `max_rounds` more rounds have run, calling
    /// `checkpoint` after every change of state.
    pub fn run(
        &self,
        state: &mut RunState,
        max_rounds: Option<usize>,
        mut checkpoint: impl FnMut(&RunState),
    ) -> Result<(), LoopError> {
        let mut rounds = 0;
        while max_rounds.map_or(true, |m| rounds < m) {
            let progressed = self.step(state)?;
            checkpoint(state);
            if !progressed {
                break;
            }
            rounds += 1;
        }
        Ok(())
    }
}

/// Seeds, loops to completion and returns the final state.
pub fn run_dbtl(dbtl: &Dbtl) -> Result<RunState, LoopError> {
    let mut state = dbtl.start()?;
    dbtl.run(&mut state, None, |_| {})?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::{ModelStructure, SlotBoxes};
    use crate::kinetics::TimeGrid;

    fn hyp(text: &str, slots: &[(&str, f64)], score: f64) -> Hypothesis {
        let s = ModelStructure::parse(text, &crate::kinetics::design_input_names(3), &SlotBoxes::new()).unwrap();
        Hypothesis {
            complexity: s.complexity(),
            structure: s,
            assignment: slots.iter().copied().collect(),
            loss: 1.0,
            score,
            evals: 0,
            converged: true,
        }
    }

    fn assay(observed: &[&str]) -> Assay {
        Assay {
            catalog: DesignCatalog::default(),
            times: TimeGrid::default().times(),
            observed: observed.iter().map(|s| s.to_string()).collect(),
            control: IntegratorControl::default(),
        }
    }

    fn design() -> DesignGenome {
        decode_design("P1|g2,g1,g3|R0,R1,R2", &DesignCatalog::default()).unwrap()
    }

    #[test]
    fn identical_members_agree() {
        let h = hyp("x' = sum(ma(k, prom), neg(ma(d, x)))", &[("k", 1.0), ("d", 0.5)], 0.0);
        let c = Committee::new(vec![h.clone(), h.clone(), h]).unwrap();
        assert_eq!(disagreement(&c, &design(), &assay(&["x"])), 0.0);
    }

    #[test]
    fn constant_offset_gives_quarter_square() {
        let base: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let c = 0.75;
        let shifted: Vec<f64> = base.iter().map(|v| v + c).collect();
        let v = mean_variance(&[base, shifted]);
        assert!((v - c * c / 4.0).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_penalized() {
        let ok = hyp("x' = sum(ma(k, prom), neg(ma(d, x)))", &[("k", 1.0), ("d", 0.5)], 0.0);
        // from zero the quadratic term only blows up once the source has filled x
        let bad = hyp("x' = sum(ma(k, prom), ma(k, x, x))", &[("k", 1e4)], 1.0);
        let c = Committee::new(vec![ok, bad]).unwrap();
        assert_eq!(disagreement(&c, &design(), &assay(&["x"])), 0.5 * DIVERGENCE_PENALTY);
    }

    #[test]
    fn committee_drops_infeasible_and_sorts() {
        let mut a = hyp("x' = ma(k, prom)", &[("k", 1.0)], 3.0);
        let b = hyp("x' = ma(k, prom)", &[("k", 2.0)], 1.0);
        let mut c = hyp("x' = ma(k, prom)", &[("k", 3.0)], 2.0);
        c.loss = f64::INFINITY;
        a.loss = 0.5;
        let com = Committee::new(vec![a, b, c.clone()]).unwrap();
        assert_eq!(com.len(), 2);
        assert_eq!(com.top().score, 1.0);
        assert!(Committee::new(vec![c]).is_none());
    }

    #[test]
    fn loop_config_validation() {
        assert!(LoopConfig::default().validate().is_ok());
        let bad = LoopConfig {
            n0: 0,
            ..LoopConfig::default()
        };
        assert_eq!(bad.validate().unwrap_err().0, "n0");
    }

    #[test]
    fn state_version_is_checked() {
        let err = RunState::from_json(r#"{"format_version": 99}"#).unwrap_err();
        assert!(err.to_string().contains("99"));
        assert!(RunState::from_json("{not json").is_err());
    }
}
