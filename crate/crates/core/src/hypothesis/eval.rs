use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::expr::{Factor, RateExpr, Scalar};
use super::structure::{ModelStructure, ParameterAssignment};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("slot `{0}` is unbound")]
    UnboundSlot(String),
    #[error("unknown species `{0}`")]
    UnknownSpecies(String),
    #[error("design input `{0}` has no value")]
    MissingInput(String),
    #[error("state has {found} values for {expected} species")]
    StateLength { expected: usize, found: usize },
}

/// Values of the design inputs (promoter strength, RBS strengths, polarity powers)
/// for one design.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DesignConstants(pub BTreeMap<String, f64>);

impl DesignConstants {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }
}

impl<S: Into<String>> FromIterator<(S, f64)> for DesignConstants {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        DesignConstants(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

struct Env<'a> {
    species: &'a [String],
    state: &'a [f64],
    assignment: &'a ParameterAssignment,
    consts: &'a DesignConstants,
}

impl Env<'_> {
    fn species_value(&self, name: &str) -> Result<f64, EvalError> {
        if let Some(i) = self.species.iter().position(|s| s == name) {
            return Ok(self.state[i]);
        }
        self.consts
            .get(name)
            .ok_or_else(|| EvalError::UnknownSpecies(name.to_string()))
    }

    fn slot(&self, name: &str) -> Result<f64, EvalError> {
        self.assignment
            .get(name)
            .ok_or_else(|| EvalError::UnboundSlot(name.to_string()))
    }

    fn scalar(&self, s: &Scalar) -> Result<f64, EvalError> {
        match s {
            Scalar::Num(v) => Ok(*v),
            Scalar::Name(n) => match self.consts.get(n) {
                Some(v) => Ok(v),
                None => self.slot(n),
            },
        }
    }

    fn factor(&self, f: &Factor) -> Result<f64, EvalError> {
        let b = self.scalar(&f.base)?;
        match &f.exponent {
            None => Ok(b),
            Some(e) => Ok(b.powf(self.scalar(e)?)),
        }
    }

    fn eval(&self, e: &RateExpr) -> Result<f64, EvalError> {
        match e {
            RateExpr::MassAction { rate, reactants } => {
                let mut v = self.slot(rate)?;
                for r in reactants {
                    v *= self.species_value(r)?;
                }
                Ok(v)
            }
            RateExpr::Saturating {
                vmax,
                km,
                substrate,
                competition,
            } => {
                let mut denom = self.slot(km)?;
                for c in competition {
                    denom += self.factor(&c.weight)? * self.species_value(&c.species)?;
                }
                Ok(self.slot(vmax)? * self.species_value(substrate)? / denom)
            }
            RateExpr::Scale { factor, expr } => Ok(self.factor(factor)? * self.eval(expr)?),
            RateExpr::Neg(inner) => Ok(-self.eval(inner)?),
            RateExpr::Sum(children) => children.iter().map(|c| self.eval(c)).sum(),
        }
    }
}

/// Evaluates one rate expression directly from its tree.
pub fn eval_rate(
    expr: &RateExpr,
    species: &[String],
    state: &[f64],
    assignment: &ParameterAssignment,
    consts: &DesignConstants,
) -> Result<f64, EvalError> {
    if state.len() != species.len() {
        return Err(EvalError::StateLength {
            expected: species.len(),
            found: state.len(),
        });
    }
    Env {
        species,
        state,
        assignment,
        consts,
    }
    .eval(expr)
}

/// Per-species derivatives, in species order.
pub fn rhs_vector(
    structure: &ModelStructure,
    state: &[f64],
    assignment: &ParameterAssignment,
    consts: &DesignConstants,
) -> Result<Vec<f64>, EvalError> {
    structure
        .rhs()
        .iter()
        .map(|e| eval_rate(e, structure.species(), state, assignment, consts))
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum CFactor {
    Const(f64),
    Slot(usize),
    SlotPow(usize, f64),
    ConstPowSlot(f64, usize),
    SlotPowSlot(usize, usize),
}

#[derive(Debug, Clone, Copy)]
enum Operand {
    Species(usize),
    Const(f64),
}

#[derive(Debug, Clone)]
enum CPrim {
    MassAction {
        rate: usize,
        species: Vec<usize>,
        const_product: f64,
    },
    Saturating {
        vmax: usize,
        km: usize,
        substrate: Operand,
        competition: Vec<(Vec<CFactor>, Operand)>,
    },
}

#[derive(Debug, Clone)]
struct CTerm {
    target: usize,
    coef: Vec<CFactor>,
    prim: CPrim,
}

/// A structure resolved against one design's inputs, with slots as indices into the
/// structure's slot order. Every right-hand side is flattened into a signed sum of
/// primitive terms.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    n_species: usize,
    n_slots: usize,
    terms: Vec<CTerm>,
}

struct Resolver<'a> {
    structure: &'a ModelStructure,
    consts: &'a DesignConstants,
}

impl Resolver<'_> {
    fn slot(&self, name: &str) -> usize {
        self.structure
            .slots()
            .iter()
            .position(|s| s.name == name)
            .expect("structure validated every slot name")
    }

    fn input(&self, name: &str) -> Result<f64, EvalError> {
        self.consts
            .get(name)
            .ok_or_else(|| EvalError::MissingInput(name.to_string()))
    }

    fn is_input(&self, name: &str) -> bool {
        self.structure.inputs().iter().any(|i| i == name)
    }

    fn operand(&self, name: &str) -> Result<Operand, EvalError> {
        match self.structure.species_index(name) {
            Some(i) => Ok(Operand::Species(i)),
            None => Ok(Operand::Const(self.input(name)?)),
        }
    }

    /// `Ok(Err(v))` for a known constant, `Ok(Ok(i))` for a slot index.
    fn scalar(&self, s: &Scalar) -> Result<Result<usize, f64>, EvalError> {
        match s {
            Scalar::Num(v) => Ok(Err(*v)),
            Scalar::Name(n) if self.is_input(n) => Ok(Err(self.input(n)?)),
            Scalar::Name(n) => Ok(Ok(self.slot(n))),
        }
    }

    fn factor(&self, f: &Factor) -> Result<CFactor, EvalError> {
        let base = self.scalar(&f.base)?;
        Ok(match (&f.exponent, base) {
            (None, Err(c)) => CFactor::Const(c),
            (None, Ok(i)) => CFactor::Slot(i),
            (Some(e), b) => match (b, self.scalar(e)?) {
                (Err(c), Err(x)) => CFactor::Const(c.powf(x)),
                (Ok(i), Err(x)) => CFactor::SlotPow(i, x),
                (Err(c), Ok(j)) => CFactor::ConstPowSlot(c, j),
                (Ok(i), Ok(j)) => CFactor::SlotPowSlot(i, j),
            },
        })
    }

    fn flatten(
        &self,
        target: usize,
        e: &RateExpr,
        coef: &mut Vec<CFactor>,
        out: &mut Vec<CTerm>,
    ) -> Result<(), EvalError> {
        match e {
            RateExpr::Sum(children) => {
                for c in children {
                    self.flatten(target, c, coef, out)?;
                }
            }
            RateExpr::Neg(inner) => {
                coef.push(CFactor::Const(-1.0));
                self.flatten(target, inner, coef, out)?;
                coef.pop();
            }
            RateExpr::Scale { factor, expr } => {
                coef.push(self.factor(factor)?);
                self.flatten(target, expr, coef, out)?;
                coef.pop();
            }
            RateExpr::MassAction { rate, reactants } => {
                let mut species = Vec::new();
                let mut const_product = 1.0;
                for r in reactants {
                    match self.operand(r)? {
                        Operand::Species(i) => species.push(i),
                        Operand::Const(c) => const_product *= c,
                    }
                }
                out.push(CTerm {
                    target,
                    coef: coef.clone(),
                    prim: CPrim::MassAction {
                        rate: self.slot(rate),
                        species,
                        const_product,
                    },
                });
            }
            RateExpr::Saturating {
                vmax,
                km,
                substrate,
                competition,
            } => {
                let competition = competition
                    .iter()
                    .map(|c| Ok((vec![self.factor(&c.weight)?], self.operand(&c.species)?)))
                    .collect::<Result<Vec<_>, EvalError>>()?;
                out.push(CTerm {
                    target,
                    coef: coef.clone(),
                    prim: CPrim::Saturating {
                        vmax: self.slot(vmax),
                        km: self.slot(km),
                        substrate: self.operand(substrate)?,
                        competition,
                    },
                });
            }
        }
        Ok(())
    }
}

fn factor_value(f: CFactor, p: &[f64]) -> f64 {
    match f {
        CFactor::Const(c) => c,
        CFactor::Slot(i) => p[i],
        CFactor::SlotPow(i, x) => p[i].powf(x),
        CFactor::ConstPowSlot(c, j) => c.powf(p[j]),
        CFactor::SlotPowSlot(i, j) => p[i].powf(p[j]),
    }
}

fn product(fs: &[CFactor], p: &[f64]) -> f64 {
    fs.iter().map(|&f| factor_value(f, p)).product()
}

impl CompiledModel {
    pub fn new(structure: &ModelStructure, consts: &DesignConstants) -> Result<Self, EvalError> {
        let r = Resolver { structure, consts };
        let mut terms = Vec::new();
        let mut coef = Vec::new();
        for (target, e) in structure.rhs().iter().enumerate() {
            r.flatten(target, e, &mut coef, &mut terms)?;
        }
        Ok(CompiledModel {
            n_species: structure.species().len(),
            n_slots: structure.slots().len(),
            terms,
        })
    }

    pub fn n_species(&self) -> usize {
        self.n_species
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    /// Folds parameter values (in slot order) into numeric coefficients.
    pub fn bind(&self, params: &[f64]) -> BoundModel {
        assert_eq!(params.len(), self.n_slots, "parameter vector length");
        let mut m = BoundModel {
            constant: vec![0.0; self.n_species],
            linear: Vec::new(),
            general: Vec::new(),
            general_species: Vec::new(),
            groups: Vec::new(),
            weights: Vec::new(),
            saturating: Vec::new(),
        };
        // saturating terms grouped by denominator before flattening
        let mut groups: Vec<(f64, Vec<(f64, usize)>, Vec<(usize, f64, Option<usize>)>)> = Vec::new();
        for t in &self.terms {
            let coef = product(&t.coef, params);
            match &t.prim {
                CPrim::MassAction {
                    rate,
                    species,
                    const_product,
                } => {
                    let k = coef * params[*rate] * const_product;
                    match species.as_slice() {
                        [] => m.constant[t.target] += k,
                        [i] => m.linear.push((t.target, k, *i)),
                        many => {
                            let start = m.general_species.len();
                            m.general_species.extend_from_slice(many);
                            m.general.push((t.target, k, start, m.general_species.len()));
                        }
                    }
                }
                CPrim::Saturating {
                    vmax,
                    km,
                    substrate,
                    competition,
                } => {
                    let mut km_eff = params[*km];
                    let mut weights = Vec::new();
                    for (w, op) in competition {
                        let wv = product(w, params);
                        match *op {
                            Operand::Const(c) => km_eff += wv * c,
                            Operand::Species(i) => weights.push((wv, i)),
                        }
                    }
                    let term = match *substrate {
                        Operand::Const(c) => (t.target, coef * params[*vmax] * c, None),
                        Operand::Species(i) => (t.target, coef * params[*vmax], Some(i)),
                    };
                    let same = |g: &(f64, Vec<(f64, usize)>, _)| {
                        g.0.to_bits() == km_eff.to_bits()
                            && g.1.len() == weights.len()
                            && g.1.iter().zip(&weights).all(|(a, b)| a.0.to_bits() == b.0.to_bits() && a.1 == b.1)
                    };
                    match groups.iter_mut().find(|g| same(g)) {
                        Some(g) => g.2.push(term),
                        None => groups.push((km_eff, weights, vec![term])),
                    }
                }
            }
        }
        for (km, weights, terms) in groups {
            m.weights.extend(weights);
            m.saturating.extend(terms);
            m.groups.push((km, m.weights.len(), m.saturating.len()));
        }
        m
    }
}

/// A compiled model with every parameter folded in; evaluation is plain arithmetic.
#[derive(Debug, Clone)]
pub struct BoundModel {
    /// State-independent rate per species.
    constant: Vec<f64>,
    /// First-order terms `(target, k, species)`.
    linear: Vec<(usize, f64, usize)>,
    /// Higher-order terms `(target, k, start, end)` over `general_species`.
    general: Vec<(usize, f64, usize, usize)>,
    general_species: Vec<usize>,
    /// Distinct saturating denominators `(km, weights end, saturating end)`; each
    /// denominator is computed once per evaluation.
    groups: Vec<(f64, usize, usize)>,
    weights: Vec<(f64, usize)>,
    /// `(target, numerator, substrate)`, contiguous per group.
    saturating: Vec<(usize, f64, Option<usize>)>,
}

impl BoundModel {
    pub fn n_species(&self) -> usize {
        self.constant.len()
    }

    #[inline]
    pub fn rhs(&self, y: &[f64], dy: &mut [f64]) {
        for (d, c) in dy.iter_mut().zip(&self.constant) {
            *d = *c;
        }
        for &(t, k, i) in &self.linear {
            dy[t] += k * y[i];
        }
        for &(t, k, a, b) in &self.general {
            let mut v = k;
            for &i in &self.general_species[a..b] {
                v *= y[i];
            }
            dy[t] += v;
        }
        let (mut w0, mut s0) = (0, 0);
        for &(km, w1, s1) in &self.groups {
            let mut d = km;
            for &(w, i) in &self.weights[w0..w1] {
                d += w * y[i];
            }
            for &(t, num, sub) in &self.saturating[s0..s1] {
                let s = sub.map_or(1.0, |i| y[i]);
                dy[t] += num * s / d;
            }
            w0 = w1;
            s0 = s1;
        }
    }
}
