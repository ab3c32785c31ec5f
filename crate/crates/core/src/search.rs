//! Structure search: background knowledge expands into candidate ODE structures, each
//! candidate gets its parameters abduced by the fitter, and candidates are ranked by
//! an MDL-style score.
//!
//! Background knowledge is gene-symmetric: one template choice per species kind is
//! instantiated for every gene of the operon, and slot names are shared across genes
//! unless listed in `per_gene_slots`.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::GeneId;
use crate::fitter::{multi_start_fit_cached, FitConfig, FitError, StageCache};
use crate::hypothesis::{
    CompetitionTerm, Factor, ModelStructure, ParameterAssignment, RateExpr, Scalar, SlotBoxes,
};
use crate::kinetics::{
    default_slot_boxes, design_input_names, mrna_species, promoter_input, protein_species,
    rbs_input, upstream_input, Dataset,
};
use crate::util::loss_serde;

pub const SCORE_EPS: f64 = 1e-12;
/// Loss per residual, relative to the mean squared signal, below which a fit counts as
/// an exact (noiseless) recovery.
pub const RECOVERY_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("invalid background knowledge: {0}")]
    Knowledge(String),
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no model found: all {tried} candidate structures were infeasible")]
    NoModel { tried: usize },
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeciesKind {
    Mrna,
    Protein,
}

/// Transcription templates for `m_g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transcription {
    /// `ma(k_tx, prom)`
    Constitutive,
    /// `const_scale(rho^up_g, ma(k_tx, prom))`
    Polar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    /// Saturation by the gene's own mRNA only.
    Own,
    /// Competition over every mRNA of the operon.
    Operon,
}

/// Translation templates for `p_g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Translation {
    /// `ma(k_tl, m_g)`, optionally scaled by `rbs_g`.
    MassAction { rbs_scaled: bool },
    /// `mm(k_tl, K_R, m_g; w*m_j, ...)` over the pool, optionally scaled by `rbs_g`,
    /// with weights `rbs_j` or 1.
    Saturating {
        rbs_scaled: bool,
        pool: Pool,
        rbs_weighted: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `neg(ma(d, x))`
    FirstOrder,
    /// `neg(mm(v, K, x; 1*x))`
    Saturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundKnowledge {
    pub n_genes: usize,
    /// Species kinds modelled; mRNAs precede proteins in every structure.
    pub kinds: Vec<SpeciesKind>,
    pub transcription: Vec<Transcription>,
    pub translation: Vec<Translation>,
    /// Loss primitives; each rhs carries a subset of these (possibly empty).
    pub losses: Vec<LossKind>,
    /// Slots that get a separate copy per gene (`name_g1`, ...) instead of one shared value.
    pub per_gene_slots: Vec<String>,
    pub max_terms: usize,
    pub max_competition: usize,
    pub boxes: SlotBoxes,
}

impl Default for BackgroundKnowledge {
    fn default() -> Self {
        Self::for_operon(3)
    }
}

const TRANSCRIPTION_SLOTS: [&str; 2] = ["k_tx", "rho"];
const TRANSLATION_SLOTS: [&str; 2] = ["k_tl", "K_R"];

fn loss_slots(kind: SpeciesKind, loss: LossKind) -> &'static [&'static str] {
    match (kind, loss) {
        (SpeciesKind::Mrna, LossKind::FirstOrder) => &["delta_m"],
        (SpeciesKind::Mrna, LossKind::Saturating) => &["v_dm", "K_dm"],
        (SpeciesKind::Protein, LossKind::FirstOrder) => &["d_p_eff"],
        (SpeciesKind::Protein, LossKind::Saturating) => &["v_dp", "K_dp"],
    }
}

impl BackgroundKnowledge {
    /// Default knowledge for an `n_genes` operon.
    pub fn for_operon(n_genes: usize) -> Self {
        let sat = |rbs_scaled, pool, rbs_weighted| Translation::Saturating {
            rbs_scaled,
            pool,
            rbs_weighted,
        };
        BackgroundKnowledge {
            n_genes,
            kinds: vec![SpeciesKind::Mrna, SpeciesKind::Protein],
            transcription: vec![Transcription::Constitutive, Transcription::Polar],
            translation: vec![
                Translation::MassAction { rbs_scaled: false },
                Translation::MassAction { rbs_scaled: true },
                sat(false, Pool::Own, false),
                sat(true, Pool::Own, false),
                sat(false, Pool::Operon, false),
                sat(true, Pool::Operon, false),
                sat(false, Pool::Operon, true),
                sat(true, Pool::Operon, true),
            ],
            losses: vec![LossKind::FirstOrder],
            per_gene_slots: Vec::new(),
            max_terms: 3,
            max_competition: n_genes,
            boxes: default_slot_boxes(),
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Knowledge(m.to_string()));
        if self.n_genes == 0 || self.max_terms == 0 || self.max_competition == 0 {
            return bad("n_genes, max_terms and max_competition must be positive");
        }
        if self.kinds.is_empty() {
            return bad("no species kinds");
        }
        let kinds: BTreeSet<_> = self.kinds.iter().collect();
        if kinds.len() != self.kinds.len() {
            return bad("duplicate species kind");
        }
        if self.has(SpeciesKind::Mrna) && self.transcription.is_empty() {
            return bad("mRNA species need at least one transcription template");
        }
        if self.has(SpeciesKind::Protein) {
            if self.translation.is_empty() {
                return bad("protein species need at least one translation template");
            }
            if !self.has(SpeciesKind::Mrna) {
                return bad("translation templates reference mRNA species, which are not declared");
            }
        }
        let losses: BTreeSet<_> = self.losses.iter().collect();
        if losses.len() != self.losses.len() {
            return bad("duplicate loss primitive");
        }
        let known = self.slot_vocabulary();
        if let Some(s) = self.per_gene_slots.iter().find(|s| !known.contains(s.as_str())) {
            return Err(SearchError::Knowledge(format!("per-gene slot `{s}` is not used by any template")));
        }
        for (name, (lo, hi)) in &self.boxes {
            if !(*lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(SearchError::Knowledge(format!("bad box for slot `{name}`")));
            }
        }
        Ok(())
    }

    fn has(&self, kind: SpeciesKind) -> bool {
        self.kinds.contains(&kind)
    }

    fn slot_vocabulary(&self) -> BTreeSet<&'static str> {
        let mut v: BTreeSet<&'static str> = TRANSCRIPTION_SLOTS.into_iter().chain(TRANSLATION_SLOTS).collect();
        for kind in [SpeciesKind::Mrna, SpeciesKind::Protein] {
            for loss in [LossKind::FirstOrder, LossKind::Saturating] {
                v.extend(loss_slots(kind, loss));
            }
        }
        v
    }

    fn species(&self) -> Vec<String> {
        let genes = (0..self.n_genes).map(GeneId);
        let mut out = Vec::new();
        if self.has(SpeciesKind::Mrna) {
            out.extend(genes.clone().map(mrna_species));
        }
        if self.has(SpeciesKind::Protein) {
            out.extend(genes.map(protein_species));
        }
        out
    }

    fn slot(&self, name: &str, gene: GeneId) -> String {
        if self.per_gene_slots.iter().any(|s| s == name) {
            format!("{name}_{gene}")
        } else {
            name.to_string()
        }
    }

    fn transcription_term(&self, t: Transcription, gene: GeneId) -> RateExpr {
        let source = RateExpr::ma(&self.slot("k_tx", gene), &[&promoter_input()]);
        match t {
            Transcription::Constitutive => source,
            Transcription::Polar => RateExpr::scale(
                Factor::pow(self.slot("rho", gene), Scalar::Name(upstream_input(gene))),
                source,
            ),
        }
    }

    /// `None` when the template needs more competition terms than allowed.
    fn translation_term(&self, t: Translation, gene: GeneId) -> Option<RateExpr> {
        let (k_tl, k_r) = (self.slot("k_tl", gene), self.slot("K_R", gene));
        let m = mrna_species(gene);
        let (core, scaled) = match t {
            Translation::MassAction { rbs_scaled } => (RateExpr::ma(&k_tl, &[&m]), rbs_scaled),
            Translation::Saturating {
                rbs_scaled,
                pool,
                rbs_weighted,
            } => {
                let members: Vec<GeneId> = match pool {
                    Pool::Own => vec![gene],
                    Pool::Operon => (0..self.n_genes).map(GeneId).collect(),
                };
                if members.len() > self.max_competition {
                    return None;
                }
                let competition = members
                    .into_iter()
                    .map(|j| CompetitionTerm {
                        weight: if rbs_weighted {
                            Factor::name(rbs_input(j))
                        } else {
                            Factor::num(1.0)
                        },
                        species: mrna_species(j),
                    })
                    .collect();
                (RateExpr::mm(&k_tl, &k_r, &m, competition), rbs_scaled)
            }
        };
        Some(if scaled {
            RateExpr::scale(Factor::name(rbs_input(gene)), core)
        } else {
            core
        })
    }

    fn loss_term(&self, kind: SpeciesKind, loss: LossKind, species: &str, gene: GeneId) -> RateExpr {
        let names = loss_slots(kind, loss);
        let inner = match loss {
            LossKind::FirstOrder => RateExpr::ma(&self.slot(names[0], gene), &[species]),
            LossKind::Saturating => RateExpr::mm(
                &self.slot(names[0], gene),
                &self.slot(names[1], gene),
                species,
                vec![CompetitionTerm {
                    weight: Factor::num(1.0),
                    species: species.to_string(),
                }],
            ),
        };
        RateExpr::neg(inner)
    }

    /// Loss subsets allowed next to one production term, smallest first.
    fn loss_subsets(&self) -> Vec<Vec<LossKind>> {
        let mut sorted = self.losses.clone();
        sorted.sort();
        let max = self.max_terms.saturating_sub(1).min(sorted.len());
        let mut out = Vec::new();
        for mask in 0u32..(1 << sorted.len()) {
            let subset: Vec<LossKind> = sorted
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, l)| *l)
                .collect();
            if subset.len() <= max {
                out.push(subset);
            }
        }
        out
    }

    fn equation(&self, production: RateExpr, kind: SpeciesKind, losses: &[LossKind], species: &str, gene: GeneId) -> RateExpr {
        if losses.is_empty() {
            return production;
        }
        let mut terms = vec![production];
        terms.extend(losses.iter().map(|&l| self.loss_term(kind, l, species, gene)));
        RateExpr::sum(terms)
    }
}

/// Template choice for one species kind: production template index and loss subset.
type Choice = (usize, Vec<LossKind>);

fn kind_choices(n_templates: usize, subsets: &[Vec<LossKind>]) -> Vec<Choice> {
    (0..n_templates)
        .flat_map(|t| subsets.iter().map(move |s| (t, s.clone())))
        .collect()
}

fn instantiate(
    bk: &BackgroundKnowledge,
    mrna: Option<&Choice>,
    protein: Option<&Choice>,
) -> Option<ModelStructure> {
    let genes: Vec<GeneId> = (0..bk.n_genes).map(GeneId).collect();
    let mut rhs = Vec::new();
    if let Some((t, losses)) = mrna {
        for &g in &genes {
            let m = mrna_species(g);
            let prod = bk.transcription_term(bk.transcription[*t], g);
            rhs.push(bk.equation(prod, SpeciesKind::Mrna, losses, &m, g));
        }
    }
    if let Some((t, losses)) = protein {
        for &g in &genes {
            let p = protein_species(g);
            let prod = bk.translation_term(bk.translation[*t], g)?;
            rhs.push(bk.equation(prod, SpeciesKind::Protein, losses, &p, g));
        }
    }
    match ModelStructure::new(bk.species(), design_input_names(bk.n_genes), rhs, &bk.boxes) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("background knowledge produced an invalid structure: {e}");
            None
        }
    }
}

/// Every structure the background knowledge admits with complexity at most `bound`,
/// each exactly once, ordered by complexity and then canonical rendering.
pub fn enumerate_structures(bk: &BackgroundKnowledge, bound: usize) -> Result<Vec<ModelStructure>, SearchError> {
    bk.validate()?;
    let subsets = bk.loss_subsets();
    let mrna: Vec<Option<Choice>> = if bk.has(SpeciesKind::Mrna) {
        kind_choices(bk.transcription.len(), &subsets).into_iter().map(Some).collect()
    } else {
        vec![None]
    };
    let protein: Vec<Option<Choice>> = if bk.has(SpeciesKind::Protein) {
        kind_choices(bk.translation.len(), &subsets).into_iter().map(Some).collect()
    } else {
        vec![None]
    };
    let mut out: Vec<(usize, String, ModelStructure)> = Vec::new();
    let mut seen = BTreeSet::new();
    for m in &mrna {
        for p in &protein {
            let Some(s) = instantiate(bk, m.as_ref(), p.as_ref()) else {
                continue;
            };
            let c = s.complexity();
            if c > bound {
                continue;
            }
            let text = s.render();
            // duplicate templates in the knowledge collapse to one structure
            if seen.insert(text.clone()) {
                out.push((c, text, s));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(out.into_iter().map(|(_, _, s)| s).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub structure: ModelStructure,
    pub assignment: ParameterAssignment,
    #[serde(with = "loss_serde")]
    pub loss: f64,
    pub complexity: usize,
    #[serde(with = "loss_serde")]
    pub score: f64,
    pub evals: usize,
    pub converged: bool,
}

impl Hypothesis {
    pub fn is_feasible(&self) -> bool {
        self.loss.is_finite()
    }

    pub fn text(&self) -> String {
        self.structure.render()
    }
}

/// `n * ln(loss / n + eps) + lambda * complexity` with `n` the residual count; `inf` for
/// an infeasible loss.
pub fn score_value(loss: f64, n_residuals: usize, complexity: usize, lambda: f64) -> f64 {
    if !loss.is_finite() {
        return f64::INFINITY;
    }
    let n = n_residuals.max(1) as f64;
    n * (loss / n + SCORE_EPS).ln() + lambda * complexity as f64
}

pub fn score(hyp: &Hypothesis, dataset: &Dataset, lambda: f64) -> f64 {
    score_value(hyp.loss, dataset.residual_count(), hyp.complexity, lambda)
}

/// Fits `structure` to the dataset. Divergence on every start yields an infeasible
/// hypothesis (`loss = inf`) rather than an error.
pub fn abduce_parameters(
    structure: &ModelStructure,
    dataset: &Dataset,
    fit_config: &FitConfig,
    lambda: f64,
) -> Result<Hypothesis, SearchError> {
    abduce_cached(structure, dataset, fit_config, lambda, &StageCache::new())
}

fn abduce_cached(
    structure: &ModelStructure,
    dataset: &Dataset,
    fit_config: &FitConfig,
    lambda: f64,
    cache: &StageCache,
) -> Result<Hypothesis, SearchError> {
    if dataset.is_empty() {
        return Err(SearchError::EmptyDataset);
    }
    let r = multi_start_fit_cached(structure, dataset, fit_config, cache)?;
    let complexity = structure.complexity();
    Ok(Hypothesis {
        structure: structure.clone(),
        assignment: r.assignment,
        loss: r.loss,
        complexity,
        score: score_value(r.loss, dataset.residual_count(), complexity, lambda),
        evals: r.evals,
        converged: r.converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Complexity bound on enumerated structures.
    pub bound: usize,
    /// Number of hypotheses kept.
    pub k: usize,
    pub lambda: f64,
    pub fit: FitConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            bound: 30,
            k: 5,
            lambda: 2.0,
            fit: FitConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.bound == 0 || self.k == 0 {
            return Err(SearchError::Config("bound and k must be positive".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(SearchError::Config("lambda must be finite and >= 0".into()));
        }
        self.fit.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub structure: String,
    pub complexity: usize,
    #[serde(with = "loss_serde")]
    pub loss: f64,
    #[serde(with = "loss_serde")]
    pub score: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub config: SearchConfig,
    pub n_designs: usize,
    pub n_residuals: usize,
    pub mean_squared_signal: f64,
    /// Candidates in enumeration order.
    pub candidates: Vec<CandidateRecord>,
    pub ranked: Vec<Hypothesis>,
    /// Top-1 loss per residual exceeds the noiseless-recovery threshold.
    pub above_recovery_threshold: bool,
}

impl SearchReport {
    pub fn best(&self) -> &Hypothesis {
        &self.ranked[0]
    }

    pub fn structures_tried(&self) -> usize {
        self.candidates.len()
    }
}

/// True when `loss` per residual is below the noiseless-recovery threshold for `dataset`.
pub fn is_exact_fit(loss: f64, dataset: &Dataset) -> bool {
    let n = dataset.residual_count().max(1) as f64;
    loss.is_finite() && loss / n < RECOVERY_THRESHOLD * dataset.mean_squared_signal()
}

/// Ranks fitted hypotheses by score; ties keep enumeration order.
pub fn rank(hyps: &[Hypothesis]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.sort_by(|&a, &b| hyps[a].score.total_cmp(&hyps[b].score).then(a.cmp(&b)));
    order
}

/// Enumerates, fits and ranks every structure; returns the best `k` with provenance.
pub fn induce(
    dataset: &Dataset,
    bk: &BackgroundKnowledge,
    config: &SearchConfig,
) -> Result<SearchReport, SearchError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(SearchError::EmptyDataset);
    }
    let structures = enumerate_structures(bk, config.bound)?;
    log::info!(
        "fitting {} structures to {} designs",
        structures.len(),
        dataset.len()
    );
    let cache = StageCache::new();
    let hyps = structures
        .par_iter()
        .map(|s| abduce_cached(s, dataset, &config.fit, config.lambda, &cache))
        .collect::<Result<Vec<_>, _>>()?;
    let candidates = hyps
        .iter()
        .map(|h| CandidateRecord {
            structure: h.text(),
            complexity: h.complexity,
            loss: h.loss,
            score: h.score,
            evals: h.evals,
            converged: h.converged,
        })
        .collect();
    let order = rank(&hyps);
    if order.first().map_or(true, |&i| !hyps[i].is_feasible()) {
        return Err(SearchError::NoModel { tried: hyps.len() });
    }
    let ranked: Vec<Hypothesis> = order
        .into_iter()
        .take(config.k)
        .map(|i| hyps[i].clone())
        .collect();
    Ok(SearchReport {
        config: config.clone(),
        n_designs: dataset.len(),
        n_residuals: dataset.residual_count(),
        mean_squared_signal: dataset.mean_squared_signal(),
        candidates,
        above_recovery_threshold: !is_exact_fit(ranked[0].loss, dataset),
        ranked,
    })
}
