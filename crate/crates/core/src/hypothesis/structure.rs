use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::expr::{NameRole, RateExpr};
use super::parser::{parse_equations, ParseError};

pub const DEFAULT_SLOT_BOX: (f64, f64) = (1e-6, 1e4);
pub const DEFAULT_MAX_DEPTH: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StructureError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("structure has no species")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

impl SlotSpec {
    pub fn contains(&self, v: f64) -> bool {
        v.is_finite() && v >= self.lower && v <= self.upper
    }
}

/// Per-slot box overrides; slots not listed get [`DEFAULT_SLOT_BOX`].
pub type SlotBoxes = BTreeMap<String, (f64, f64)>;

/// A set of ODE right-hand sides over named species.
///
/// Names in species positions resolve to a species or a declared design input. Names
/// in factor positions resolve to a design input when declared, otherwise to a free
/// slot. Rate positions (`ma` rate, `mm` vmax/km) are always slots. Equal slot names
/// across equations denote one shared parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StructureRepr", into = "StructureRepr")]
pub struct ModelStructure {
    species: Vec<String>,
    inputs: Vec<String>,
    rhs: Vec<RateExpr>,
    slots: Vec<SlotSpec>,
}

#[derive(Serialize, Deserialize)]
struct StructureRepr {
    species: Vec<String>,
    inputs: Vec<String>,
    equations: Vec<String>,
    slots: Vec<SlotSpec>,
}

impl TryFrom<StructureRepr> for ModelStructure {
    type Error = StructureError;

    fn try_from(r: StructureRepr) -> Result<Self, Self::Error> {
        let mut rhs = Vec::with_capacity(r.equations.len());
        for eq in &r.equations {
            rhs.push(super::parser::parse_rate_expr(eq)?);
        }
        let boxes: SlotBoxes = r
            .slots
            .iter()
            .map(|s| (s.name.clone(), (s.lower, s.upper)))
            .collect();
        let s = ModelStructure::new(r.species, r.inputs, rhs, &boxes)?;
        if s.slots != r.slots {
            return Err(StructureError::Invalid(
                "declared slots do not match the equations".into(),
            ));
        }
        Ok(s)
    }
}

impl From<ModelStructure> for StructureRepr {
    fn from(s: ModelStructure) -> Self {
        StructureRepr {
            equations: s.rhs.iter().map(RateExpr::render).collect(),
            species: s.species,
            inputs: s.inputs,
            slots: s.slots,
        }
    }
}

fn valid_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl ModelStructure {
    pub fn new(
        species: Vec<String>,
        inputs: Vec<String>,
        rhs: Vec<RateExpr>,
        boxes: &SlotBoxes,
    ) -> Result<Self, StructureError> {
        Self::with_max_depth(species, inputs, rhs, boxes, DEFAULT_MAX_DEPTH)
    }

    pub fn with_max_depth(
        species: Vec<String>,
        inputs: Vec<String>,
        rhs: Vec<RateExpr>,
        boxes: &SlotBoxes,
        max_depth: usize,
    ) -> Result<Self, StructureError> {
        if species.is_empty() {
            return Err(StructureError::Empty);
        }
        if rhs.len() != species.len() {
            return Err(StructureError::Invalid(format!(
                "{} species but {} right-hand sides",
                species.len(),
                rhs.len()
            )));
        }
        let species_set: BTreeSet<&str> = species.iter().map(String::as_str).collect();
        let input_set: BTreeSet<&str> = inputs.iter().map(String::as_str).collect();
        if species_set.len() != species.len() || input_set.len() != inputs.len() {
            return Err(StructureError::Invalid("duplicate species or input name".into()));
        }
        if let Some(bad) = species.iter().chain(&inputs).find(|s| !valid_ident(s)) {
            return Err(StructureError::Invalid(format!("`{bad}` is not an identifier")));
        }
        if let Some(clash) = species_set.intersection(&input_set).next() {
            return Err(StructureError::Invalid(format!(
                "`{clash}` is both a species and a design input"
            )));
        }
        let rhs: Vec<RateExpr> = rhs.into_iter().map(RateExpr::canonical).collect();
        let mut slot_names = BTreeSet::new();
        let mut problem = None;
        for (sp, e) in species.iter().zip(&rhs) {
            if e.depth() > max_depth {
                return Err(StructureError::Invalid(format!(
                    "rhs of `{sp}` exceeds depth bound {max_depth}"
                )));
            }
            if let RateExpr::Sum(c) = e {
                if c.len() < 2 {
                    return Err(StructureError::Invalid(format!("rhs of `{sp}`: sum of fewer than 2 terms")));
                }
            }
            e.visit_names(&mut |role, name| {
                let is_species = species_set.contains(name);
                let is_input = input_set.contains(name);
                match role {
                    NameRole::Species => {
                        if !is_species && !is_input {
                            problem.get_or_insert(format!("rhs of `{sp}` references unknown species `{name}`"));
                        }
                    }
                    NameRole::Rate => {
                        if is_species || is_input {
                            problem.get_or_insert(format!("`{name}` used as a rate slot in rhs of `{sp}`"));
                        } else {
                            slot_names.insert(name.to_string());
                        }
                    }
                    NameRole::Factor => {
                        if is_species {
                            problem.get_or_insert(format!("species `{name}` used as a factor in rhs of `{sp}`"));
                        } else if !is_input {
                            slot_names.insert(name.to_string());
                        }
                    }
                }
            });
        }
        if let Some(p) = problem {
            return Err(StructureError::Invalid(p));
        }
        let mut slots = Vec::with_capacity(slot_names.len());
        for name in slot_names {
            let (lower, upper) = boxes.get(&name).copied().unwrap_or(DEFAULT_SLOT_BOX);
            if !(lower > 0.0 && lower < upper && upper.is_finite()) {
                return Err(StructureError::Invalid(format!("bad box for slot `{name}`")));
            }
            slots.push(SlotSpec { name, lower, upper });
        }
        Ok(ModelStructure {
            species,
            inputs,
            rhs,
            slots,
        })
    }

    /// Parses `species' = expr` equations; species are taken in equation order.
    pub fn parse(text: &str, inputs: &[String], boxes: &SlotBoxes) -> Result<Self, StructureError> {
        let eqs = parse_equations(text)?;
        let (species, rhs): (Vec<String>, Vec<RateExpr>) = eqs.into_iter().unzip();
        ModelStructure::new(species, inputs.to_vec(), rhs, boxes)
    }

    pub fn species(&self) -> &[String] {
        &self.species
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn rhs(&self) -> &[RateExpr] {
        &self.rhs
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s == name)
    }

    /// Free parameter slots in canonical (sorted) order, each listed once.
    pub fn free_parameters(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.name.clone()).collect()
    }

    pub fn complexity(&self) -> usize {
        self.rhs.iter().map(RateExpr::complexity).sum()
    }

    /// Canonical single-line text: `x' = expr; y' = expr`.
    pub fn render(&self) -> String {
        self.species
            .iter()
            .zip(&self.rhs)
            .map(|(s, e)| format!("{s}' = {}", e.render()))
            .collect::<Vec<_>>()
            .join("; ")
    }

    pub fn render_multiline(&self) -> String {
        self.species
            .iter()
            .zip(&self.rhs)
            .map(|(s, e)| format!("{s}' = {}", e.render()))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn check_assignment(&self, a: &ParameterAssignment) -> Result<(), StructureError> {
        for slot in &self.slots {
            match a.get(&slot.name) {
                None => {
                    return Err(StructureError::Invalid(format!("slot `{}` is unbound", slot.name)))
                }
                Some(v) if !slot.contains(v) => {
                    return Err(StructureError::Invalid(format!(
                        "slot `{}` = {v} outside [{}, {}]",
                        slot.name, slot.lower, slot.upper
                    )))
                }
                _ => {}
            }
        }
        if a.len() != self.slots.len() {
            return Err(StructureError::Invalid("assignment binds unknown slots".into()));
        }
        Ok(())
    }

    pub fn assignment_from_vec(&self, values: &[f64]) -> ParameterAssignment {
        ParameterAssignment(
            self.slots
                .iter()
                .zip(values)
                .map(|(s, &v)| (s.name.clone(), v))
                .collect(),
        )
    }
}

pub fn free_parameters(structure: &ModelStructure) -> Vec<String> {
    structure.free_parameters()
}

/// Slot name to value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterAssignment(pub BTreeMap<String, f64>);

impl ParameterAssignment {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: f64) {
        self.0.insert(name.into(), v);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Values in the structure's slot order; `None` if a slot is unbound.
    pub fn to_vec(&self, structure: &ModelStructure) -> Option<Vec<f64>> {
        structure.slots().iter().map(|s| self.get(&s.name)).collect()
    }
}

impl<S: Into<String>> FromIterator<(S, f64)> for ParameterAssignment {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        ParameterAssignment(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::parse_rate_expr;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn shared_slot_listed_once() {
        let s = ModelStructure::parse(
            "x' = sum(ma(k, u), neg(ma(d, x))); y' = sum(ma(k, x), neg(ma(d, y)))",
            &names(&["u"]),
            &SlotBoxes::new(),
        )
        .unwrap();
        assert_eq!(s.free_parameters(), names(&["d", "k"]));
        assert_eq!(s.complexity(), 8);
    }

    #[test]
    fn unknown_species_rejected() {
        let err = ModelStructure::parse("x' = ma(k, zz)", &[], &SlotBoxes::new()).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn empty_structure_rejected() {
        assert_eq!(
            ModelStructure::new(vec![], vec![], vec![], &SlotBoxes::new()).unwrap_err(),
            StructureError::Empty
        );
    }

    #[test]
    fn factor_names_split_into_inputs_and_slots() {
        let s = ModelStructure::parse(
            "x' = const_scale(rho^up, ma(k, prom))",
            &names(&["prom", "up"]),
            &[("rho".to_string(), (1e-6, 1.0))].into_iter().collect(),
        )
        .unwrap();
        assert_eq!(s.free_parameters(), names(&["k", "rho"]));
        assert_eq!(s.slots()[1].upper, 1.0);
    }

    #[test]
    fn depth_bound_enforced() {
        let e = parse_rate_expr("neg(neg(neg(ma(k, x))))").unwrap();
        let r = ModelStructure::with_max_depth(names(&["x"]), vec![], vec![e], &SlotBoxes::new(), 3);
        assert!(r.is_err());
    }

    #[test]
    fn serde_round_trip() {
        let s = ModelStructure::parse(
            "x' = sum(neg(ma(d, x)), ma(k, u))",
            &names(&["u"]),
            &SlotBoxes::new(),
        )
        .unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: ModelStructure = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.render(), "x' = sum(ma(k, u), neg(ma(d, x)))");
    }

    #[test]
    fn assignment_checks() {
        let s = ModelStructure::parse("x' = ma(k, x)", &[], &SlotBoxes::new()).unwrap();
        let ok: ParameterAssignment = [("k", 2.0)].into_iter().collect();
        assert!(s.check_assignment(&ok).is_ok());
        let missing = ParameterAssignment::default();
        assert!(s.check_assignment(&missing).is_err());
        let out: ParameterAssignment = [("k", 1e9)].into_iter().collect();
        assert!(s.check_assignment(&out).is_err());
    }
}
