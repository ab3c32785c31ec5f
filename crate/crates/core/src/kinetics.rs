//! Mechanistic operon expression simulator.
//!
//! Six-state model per three-gene operon (one mRNA and one protein per gene):
//!
//! ```text
//! dm_g/dt = k_tx * prom * rho^(pos_g - 1) - delta_m * m_g
//! dp_g/dt = k_tl * rbs_g * m_g / (K_R + sum_j rbs_j * m_j) - (delta_p + mu) * p_g
//! ```
//!
//! Translation saturates on a shared ribosome pool, so genes compete for ribosomes
//! through the denominator. Transcription decays geometrically with operon position.
//! The model is expressed in the rate-law language so that it is itself a member of
//! the hypothesis space searched by the learner.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::design::{DesignCatalog, DesignGenome, GeneId};
use crate::hypothesis::{
    BoundModel, CompetitionTerm, CompiledModel, DesignConstants, EvalError, Factor,
    ModelStructure, ParameterAssignment, RateExpr, Scalar, SlotBoxes, StructureError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("integration diverged at t = {time}")]
    Diverged { time: f64 },
    #[error(transparent)]
    Binding(#[from] EvalError),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("initial state: {0}")]
    Init(String),
    #[error("design {key}: {source}")]
    Design {
        key: String,
        #[source]
        source: Box<SimError>,
    },
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error("no designs given")]
    NoDesigns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticParams {
    pub k_tx: f64,
    pub delta_m: f64,
    pub k_tl: f64,
    #[serde(rename = "K_R")]
    pub k_r: f64,
    pub delta_p: f64,
    pub mu: f64,
    pub rho: f64,
}

impl Default for KineticParams {
    fn default() -> Self {
        KineticParams {
            k_tx: 10.0,
            delta_m: 1.0,
            k_tl: 5.0,
            k_r: 20.0,
            delta_p: 0.1,
            mu: 0.4,
            rho: 0.7,
        }
    }
}

impl KineticParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let rates = [
            ("k_tx", self.k_tx),
            ("delta_m", self.delta_m),
            ("k_tl", self.k_tl),
            ("K_R", self.k_r),
            ("delta_p", self.delta_p),
            ("mu", self.mu),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimError::Params(format!("{name} = {v} must be >= 0")));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(SimError::Params(format!("rho = {} must lie in (0, 1]", self.rho)));
        }
        if self.delta_p + self.mu <= 0.0 {
            return Err(SimError::Params("delta_p + mu must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_protein_loss(&self) -> f64 {
        self.delta_p + self.mu
    }

    /// Slot values of the ground-truth structure.
    pub fn assignment(&self) -> ParameterAssignment {
        [
            ("k_tx", self.k_tx),
            ("delta_m", self.delta_m),
            ("k_tl", self.k_tl),
            ("K_R", self.k_r),
            ("d_p_eff", self.effective_protein_loss()),
            ("rho", self.rho),
        ]
        .into_iter()
        .collect()
    }
}

pub fn mrna_species(gene: GeneId) -> String {
    format!("m_{}", gene.name())
}

pub fn protein_species(gene: GeneId) -> String {
    format!("p_{}", gene.name())
}

pub fn promoter_input() -> String {
    "prom".to_string()
}

pub fn rbs_input(gene: GeneId) -> String {
    format!("rbs_{}", gene.name())
}

/// Number of genes upstream of `gene`, used as the polarity exponent.
pub fn upstream_input(gene: GeneId) -> String {
    format!("up_{}", gene.name())
}

/// mRNAs first, then proteins, each in gene order.
pub fn operon_species(n_genes: usize) -> Vec<String> {
    let genes = (0..n_genes).map(GeneId);
    genes
        .clone()
        .map(mrna_species)
        .chain(genes.map(protein_species))
        .collect()
}

pub fn design_input_names(n_genes: usize) -> Vec<String> {
    let mut out = vec![promoter_input()];
    out.extend((0..n_genes).map(|g| rbs_input(GeneId(g))));
    out.extend((0..n_genes).map(|g| upstream_input(GeneId(g))));
    out
}

pub fn design_constants(genome: &DesignGenome, catalog: &DesignCatalog) -> DesignConstants {
    let mut c = BTreeMap::new();
    c.insert(promoter_input(), catalog.promoter_strength(genome));
    for g in catalog.genes() {
        c.insert(rbs_input(g), catalog.rbs_strength(genome, g));
        let pos = genome.position_of(g).expect("validated genome contains every gene");
        c.insert(upstream_input(g), (pos - 1) as f64);
    }
    DesignConstants(c)
}

pub fn default_slot_boxes() -> SlotBoxes {
    [("rho".to_string(), (1e-6, 1.0))].into_iter().collect()
}

pub(crate) fn gt_mrna_production(gene: GeneId) -> RateExpr {
    RateExpr::scale(
        Factor::pow("rho", Scalar::Name(upstream_input(gene))),
        RateExpr::ma("k_tx", &[&promoter_input()]),
    )
}

pub(crate) fn gt_translation(gene: GeneId, n_genes: usize) -> RateExpr {
    let competition = (0..n_genes)
        .map(GeneId)
        .map(|j| CompetitionTerm {
            weight: Factor::name(rbs_input(j)),
            species: mrna_species(j),
        })
        .collect();
    RateExpr::scale(
        Factor::name(rbs_input(gene)),
        RateExpr::mm("k_tl", "K_R", &mrna_species(gene), competition),
    )
}

pub(crate) fn first_order_loss(slot: &str, species: &str) -> RateExpr {
    RateExpr::neg(RateExpr::ma(slot, &[species]))
}

/// Design-generic ground-truth structure for an `n_genes` operon.
pub fn ground_truth_structure(n_genes: usize) -> ModelStructure {
    let genes: Vec<GeneId> = (0..n_genes).map(GeneId).collect();
    let mut rhs = Vec::with_capacity(2 * n_genes);
    for &g in &genes {
        rhs.push(RateExpr::sum(vec![
            gt_mrna_production(g),
            first_order_loss("delta_m", &mrna_species(g)),
        ]));
    }
    for &g in &genes {
        rhs.push(RateExpr::sum(vec![
            gt_translation(g, n_genes),
            first_order_loss("d_p_eff", &protein_species(g)),
        ]));
    }
    ModelStructure::new(
        operon_species(n_genes),
        design_input_names(n_genes),
        rhs,
        &default_slot_boxes(),
    )
    .expect("ground-truth structure is well formed")
}

/// The ground-truth ODE for `genome`. The structure is shared by every design; the
/// design enters through [`design_constants`] (promoter strength, RBS strengths and
/// the polarity exponents `up_g = position - 1`).
pub fn build_ground_truth(
    genome: &DesignGenome,
    params: &KineticParams,
    catalog: &DesignCatalog,
) -> Result<ModelStructure, SimError> {
    params.validate()?;
    catalog
        .validate(genome)
        .map_err(|e| SimError::Params(e.to_string()))?;
    Ok(ground_truth_structure(catalog.n_genes()))
}

/// Closed-form steady state of the ground-truth model, `(m, p)` per gene.
pub fn steady_state(
    genome: &DesignGenome,
    params: &KineticParams,
    catalog: &DesignCatalog,
) -> (Vec<f64>, Vec<f64>) {
    let prom = catalog.promoter_strength(genome);
    let m: Vec<f64> = catalog
        .genes()
        .map(|g| {
            let pos = genome.position_of(g).expect("valid genome");
            params.k_tx * prom * params.rho.powi(pos as i32 - 1) / params.delta_m
        })
        .collect();
    let load: f64 = catalog
        .genes()
        .map(|g| catalog.rbs_strength(genome, g) * m[g.0])
        .sum();
    let p = catalog
        .genes()
        .map(|g| {
            params.k_tl * catalog.rbs_strength(genome, g) * m[g.0]
                / (params.k_r + load)
                / params.effective_protein_loss()
        })
        .collect();
    (m, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState(pub Vec<f64>);

impl SimState {
    pub fn zeros(n: usize) -> Self {
        SimState(vec![0.0; n])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        TimeGrid {
            start: 0.0,
            end: 20.0,
            points: 41,
        }
    }
}

impl TimeGrid {
    pub fn times(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.start];
        }
        let step = (self.end - self.start) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.start + step * i as f64).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.points == 0 || !(self.start.is_finite() && self.end.is_finite()) {
            return Err(SimError::Grid("need at least one finite point".into()));
        }
        if self.points > 1 && self.end <= self.start {
            return Err(SimError::Grid("end must exceed start".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorControl {
    /// RK4 steps per grid interval.
    pub substeps: usize,
}

impl Default for IntegratorControl {
    fn default() -> Self {
        IntegratorControl { substeps: 10 }
    }
}

/// Raw output of [`integrate`]: every species at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub times: Vec<f64>,
    pub species: Vec<String>,
    pub states: Vec<SimState>,
    /// Total magnitude removed by clamping negative excursions to zero.
    pub clamped: f64,
}

fn check_times(times: &[f64]) -> Result<(), SimError> {
    if times.is_empty() {
        return Err(SimError::Grid("empty time grid".into()));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SimError::Grid("times must be finite and strictly increasing".into()));
    }
    Ok(())
}

/// Allocation-free fixed-step RK4 driver over a bound model.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(n: usize) -> Self {
        Rk4 {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    #[inline]
    fn step(&mut self, model: &BoundModel, y: &mut [f64], h: f64) {
        fn axpy(out: &mut [f64], y: &[f64], a: f64, k: &[f64]) {
            for ((o, y), k) in out.iter_mut().zip(y).zip(k) {
                *o = y + a * k;
            }
        }
        model.rhs(y, &mut self.k1);
        axpy(&mut self.tmp, y, 0.5 * h, &self.k1);
        model.rhs(&self.tmp, &mut self.k2);
        axpy(&mut self.tmp, y, 0.5 * h, &self.k2);
        model.rhs(&self.tmp, &mut self.k3);
        axpy(&mut self.tmp, y, h, &self.k3);
        model.rhs(&self.tmp, &mut self.k4);
        let w = h / 6.0;
        for ((((y, a), b), c), d) in y.iter_mut().zip(&self.k1).zip(&self.k2).zip(&self.k3).zip(&self.k4) {
            *y += w * (a + 2.0 * b + 2.0 * c + d);
        }
    }

    /// Integrates from `y` at `times[0]`, calling `visit(i, y)` at every grid time and
    /// stopping early once it returns `false`. Returns the clamp magnitude.
    pub(crate) fn run(
        &mut self,
        model: &BoundModel,
        y: &mut [f64],
        times: &[f64],
        substeps: usize,
        mut visit: impl FnMut(usize, &[f64]) -> bool,
    ) -> Result<f64, SimError> {
        let mut clamped = 0.0;
        if !visit(0, y) {
            return Ok(clamped);
        }
        for (i, w) in times.windows(2).enumerate() {
            let h = (w[1] - w[0]) / substeps as f64;
            for s in 0..substeps {
                self.step(model, y, h);
                for v in y.iter_mut() {
                    if !v.is_finite() {
                        return Err(SimError::Diverged {
                            time: w[0] + h * (s + 1) as f64,
                        });
                    }
                    if *v < 0.0 {
                        clamped -= *v;
                        *v = 0.0;
                    }
                }
            }
            if !visit(i + 1, y) {
                break;
            }
        }
        Ok(clamped)
    }
}

/// Fixed-step classical RK4 with `control.substeps` steps per grid interval; states are
/// clamped at zero after every step.
pub fn integrate(
    model: &ModelStructure,
    params: &ParameterAssignment,
    consts: &DesignConstants,
    init: &SimState,
    times: &[f64],
    control: &IntegratorControl,
) -> Result<Solution, SimError> {
    check_times(times)?;
    let n = model.species().len();
    if init.0.len() != n {
        return Err(SimError::Init(format!("{} values for {n} species", init.0.len())));
    }
    if init.0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SimError::Init("values must be finite and non-negative".into()));
    }
    let p = model.slots().iter().map(|s| {
        params
            .get(&s.name)
            .ok_or_else(|| SimError::Binding(EvalError::UnboundSlot(s.name.clone())))
    });
    let p = p.collect::<Result<Vec<f64>, _>>()?;
    let bound = CompiledModel::new(model, consts)?.bind(&p);
    let mut y = init.0.clone();
    let mut states = Vec::with_capacity(times.len());
    let clamped = Rk4::new(n).run(&bound, &mut y, times, control.substeps.max(1), |_, y| {
        states.push(SimState(y.to_vec()));
        true
    })?;
    if clamped > 0.0 {
        log::debug!("clamped negative excursions of total magnitude {clamped:e}");
    }
    Ok(Solution {
        times: times.to_vec(),
        species: model.species().to_vec(),
        states,
        clamped,
    })
}

/// Observed time series for one design. `values[i][j]` is species `j` at `times[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub design: DesignGenome,
    pub times: Vec<f64>,
    pub species: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn from_solution(design: DesignGenome, sol: &Solution, observed: &[String]) -> Self {
        let idx: Vec<usize> = observed
            .iter()
            .map(|s| {
                sol.species
                    .iter()
                    .position(|x| x == s)
                    .expect("observed species simulated")
            })
            .collect();
        Trajectory {
            design,
            times: sol.times.clone(),
            species: observed.to_vec(),
            values: sol
                .states
                .iter()
                .map(|st| idx.iter().map(|&j| st.0[j]).collect())
                .collect(),
        }
    }

    pub fn key(&self) -> String {
        self.design.key()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn column(&self, species: &str) -> Option<Vec<f64>> {
        let j = self.species.iter().position(|s| s == species)?;
        Some(self.values.iter().map(|r| r[j]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    GaussianRelative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            kind: NoiseKind::None,
            sigma: 0.0,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        NoiseModel {
            kind: NoiseKind::GaussianRelative,
            sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(SimError::Params(format!("noise sigma {} must be >= 0", self.sigma)));
        }
        Ok(())
    }
}

/// Seed of the noise stream for one (run seed, design, species) triple.
fn stream_seed(seed: u64, key: &str, species: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    h.update([0u8]);
    h.update(species.as_bytes());
    h.finalize().into()
}

/// Multiplies every observed value by `1 + sigma*z` and clamps at zero. The draw for
/// each value depends only on (seed, design key, species, time index).
pub fn apply_noise(traj: &Trajectory, noise: &NoiseModel) -> Trajectory {
    if noise.kind == NoiseKind::None || noise.sigma == 0.0 {
        return traj.clone();
    }
    let key = traj.key();
    let mut out = traj.clone();
    for (j, sp) in traj.species.iter().enumerate() {
        let mut rng = ChaCha8Rng::from_seed(stream_seed(noise.seed, &key, sp));
        for row in out.values.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            row[j] = (row[j] * (1.0 + noise.sigma * z)).max(0.0);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Observation {
    /// Report mRNA as well as protein levels.
    pub include_mrna: bool,
}

impl Observation {
    pub fn species(&self, n_genes: usize) -> Vec<String> {
        let genes = (0..n_genes).map(GeneId);
        if self.include_mrna {
            genes.clone().map(mrna_species).chain(genes.map(protein_species)).collect()
        } else {
            genes.map(protein_species).collect()
        }
    }
}

/// Observed trajectories keyed by design key, with the catalog that gives the designs
/// their numeric inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub catalog: DesignCatalog,
    pub trajectories: BTreeMap<String, Trajectory>,
}

impl Dataset {
    pub fn new(catalog: DesignCatalog) -> Self {
        Dataset {
            catalog,
            trajectories: BTreeMap::new(),
        }
    }

    pub fn constants(&self, traj: &Trajectory) -> DesignConstants {
        design_constants(&traj.design, &self.catalog)
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn insert(&mut self, traj: Trajectory) {
        self.trajectories.insert(traj.key(), traj);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.values()
    }

    /// Number of observed values (designs x times x species).
    pub fn residual_count(&self) -> usize {
        self.iter().map(|t| t.len() * t.species.len()).sum()
    }

    pub fn mean_squared_signal(&self) -> f64 {
        let n = self.residual_count();
        if n == 0 {
            return 0.0;
        }
        let s: f64 = self
            .iter()
            .flat_map(|t| t.values.iter().flatten())
            .map(|v| v * v)
            .sum();
        s / n as f64
    }

    pub fn observed_species(&self) -> Vec<String> {
        self.iter().next().map(|t| t.species.clone()).unwrap_or_default()
    }

    pub fn subset<'a>(&self, keys: impl IntoIterator<Item = &'a str>) -> Dataset {
        let mut d = Dataset::new(self.catalog.clone());
        for k in keys {
            if let Some(t) = self.trajectories.get(k) {
                d.insert(t.clone());
            }
        }
        d
    }
}

/// Simulates the ground truth for one design from a zero initial state, keeping only
/// the observed species, then applies measurement noise.
pub fn simulate_design(
    genome: &DesignGenome,
    params: &KineticParams,
    catalog: &DesignCatalog,
    times: &[f64],
    noise: &NoiseModel,
    observation: &Observation,
    control: &IntegratorControl,
) -> Result<Trajectory, SimError> {
    let model = build_ground_truth(genome, params, catalog)?;
    let sol = integrate(
        &model,
        &params.assignment(),
        &design_constants(genome, catalog),
        &SimState::zeros(model.species().len()),
        times,
        control,
    )?;
    let traj = Trajectory::from_solution(genome.clone(), &sol, &observation.species(catalog.n_genes()));
    Ok(apply_noise(&traj, noise))
}

pub fn generate_dataset(
    designs: &[DesignGenome],
    params: &KineticParams,
    grid: &TimeGrid,
    noise: &NoiseModel,
    catalog: &DesignCatalog,
    observation: &Observation,
) -> Result<Dataset, SimError> {
    if designs.is_empty() {
        return Err(SimError::NoDesigns);
    }
    params.validate()?;
    grid.validate()?;
    noise.validate()?;
    let times = grid.times();
    let control = IntegratorControl::default();
    let mut ds = Dataset::new(catalog.clone());
    for d in designs {
        let traj = simulate_design(d, params, catalog, &times, noise, observation, &control).map_err(|e| {
            SimError::Design {
                key: d.key(),
                source: Box::new(e),
            }
        })?;
        ds.insert(traj);
    }
    Ok(ds)
}
