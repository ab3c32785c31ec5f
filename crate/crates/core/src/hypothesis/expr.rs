use std::fmt;

/// A number or a name. Names resolve to design inputs when the structure declares
/// them as such, otherwise to free parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub enum Scalar {
    Num(f64),
    Name(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Num(v) => write!(f, "{v}"),
            Scalar::Name(n) => f.write_str(n),
        }
    }
}

/// `base` or `base^exponent`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub base: Scalar,
    pub exponent: Option<Scalar>,
}

impl Factor {
    pub fn num(v: f64) -> Self {
        Factor {
            base: Scalar::Num(v),
            exponent: None,
        }
    }

    pub fn name(n: impl Into<String>) -> Self {
        Factor {
            base: Scalar::Name(n.into()),
            exponent: None,
        }
    }

    pub fn pow(base: impl Into<String>, exponent: Scalar) -> Self {
        Factor {
            base: Scalar::Name(base.into()),
            exponent: Some(exponent),
        }
    }

    pub(crate) fn names(&self) -> impl Iterator<Item = &str> {
        let b = match &self.base {
            Scalar::Name(n) => Some(n.as_str()),
            Scalar::Num(_) => None,
        };
        let e = match &self.exponent {
            Some(Scalar::Name(n)) => Some(n.as_str()),
            _ => None,
        };
        b.into_iter().chain(e)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.exponent {
            None => write!(f, "{}", self.base),
            Some(e) => write!(f, "{}^{}", self.base, e),
        }
    }
}

/// One `weight*species` term in a saturating denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct CompetitionTerm {
    pub weight: Factor,
    pub species: String,
}

impl fmt::Display for CompetitionTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}*{}", self.weight, self.species)
    }
}

/// Rate-law expression tree.
///
/// * `ma(k, x, y)` mass action: `k*x*y`
/// * `mm(vmax, km, x; w1*y1, w2*y2)` saturating: `vmax*x/(km + w1*y1 + w2*y2)`
/// * `const_scale(c, e)`: `c*e`
/// * `neg(e)`: `-e`
/// * `sum(e1, e2, ...)`
#[derive(Debug, Clone, PartialEq)]
pub enum RateExpr {
    MassAction {
        rate: String,
        reactants: Vec<String>,
    },
    Saturating {
        vmax: String,
        km: String,
        substrate: String,
        competition: Vec<CompetitionTerm>,
    },
    Scale {
        factor: Factor,
        expr: Box<RateExpr>,
    },
    Neg(Box<RateExpr>),
    Sum(Vec<RateExpr>),
}

impl RateExpr {
    pub fn ma(rate: &str, reactants: &[&str]) -> Self {
        RateExpr::MassAction {
            rate: rate.to_string(),
            reactants: reactants.iter().map(|s| s.to_string()).collect(),
        }
        .canonical()
    }

    pub fn mm(vmax: &str, km: &str, substrate: &str, competition: Vec<CompetitionTerm>) -> Self {
        RateExpr::Saturating {
            vmax: vmax.to_string(),
            km: km.to_string(),
            substrate: substrate.to_string(),
            competition,
        }
        .canonical()
    }

    pub fn scale(factor: Factor, expr: RateExpr) -> Self {
        RateExpr::Scale {
            factor,
            expr: Box::new(expr),
        }
    }

    pub fn neg(expr: RateExpr) -> Self {
        RateExpr::Neg(Box::new(expr))
    }

    pub fn sum(children: Vec<RateExpr>) -> Self {
        RateExpr::Sum(children).canonical()
    }

    /// Sorts commutative children (sum operands, mass-action reactants, competition
    /// terms) by their rendered text, recursively.
    pub fn canonical(self) -> Self {
        match self {
            RateExpr::MassAction {
                rate,
                mut reactants,
            } => {
                reactants.sort();
                RateExpr::MassAction { rate, reactants }
            }
            RateExpr::Saturating {
                vmax,
                km,
                substrate,
                mut competition,
            } => {
                competition.sort_by_cached_key(|c| c.to_string());
                RateExpr::Saturating {
                    vmax,
                    km,
                    substrate,
                    competition,
                }
            }
            RateExpr::Scale { factor, expr } => RateExpr::Scale {
                factor,
                expr: Box::new(expr.canonical()),
            },
            RateExpr::Neg(e) => RateExpr::Neg(Box::new(e.canonical())),
            RateExpr::Sum(children) => {
                let mut c: Vec<RateExpr> = children.into_iter().map(RateExpr::canonical).collect();
                c.sort_by_cached_key(|e| e.render());
                RateExpr::Sum(c)
            }
        }
    }

    pub fn is_canonical(&self) -> bool {
        self.clone().canonical() == *self
    }

    /// Canonical text; commutative children are emitted in sorted order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.write_canonical(&mut out);
        out
    }

    fn write_canonical(&self, out: &mut String) {
        use std::fmt::Write;
        match self {
            RateExpr::MassAction { rate, reactants } => {
                let mut r: Vec<&String> = reactants.iter().collect();
                r.sort();
                out.push_str("ma(");
                out.push_str(rate);
                for s in r {
                    out.push_str(", ");
                    out.push_str(s);
                }
                out.push(')');
            }
            RateExpr::Saturating {
                vmax,
                km,
                substrate,
                competition,
            } => {
                let _ = write!(out, "mm({vmax}, {km}, {substrate}");
                if !competition.is_empty() {
                    let mut terms: Vec<String> = competition.iter().map(|c| c.to_string()).collect();
                    terms.sort();
                    out.push_str("; ");
                    out.push_str(&terms.join(", "));
                }
                out.push(')');
            }
            RateExpr::Scale { factor, expr } => {
                let _ = write!(out, "const_scale({factor}, ");
                expr.write_canonical(out);
                out.push(')');
            }
            RateExpr::Neg(e) => {
                out.push_str("neg(");
                e.write_canonical(out);
                out.push(')');
            }
            RateExpr::Sum(children) => {
                let mut parts: Vec<String> = children.iter().map(|c| c.render()).collect();
                parts.sort();
                out.push_str("sum(");
                out.push_str(&parts.join(", "));
                out.push(')');
            }
        }
    }

    /// Number of primitive nodes (`ma`, `mm`, `const_scale`, `neg`, `sum`).
    pub fn complexity(&self) -> usize {
        match self {
            RateExpr::MassAction { .. } | RateExpr::Saturating { .. } => 1,
            RateExpr::Scale { expr, .. } => 1 + expr.complexity(),
            RateExpr::Neg(e) => 1 + e.complexity(),
            RateExpr::Sum(c) => 1 + c.iter().map(RateExpr::complexity).sum::<usize>(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            RateExpr::MassAction { .. } | RateExpr::Saturating { .. } => 1,
            RateExpr::Scale { expr, .. } => 1 + expr.depth(),
            RateExpr::Neg(e) => 1 + e.depth(),
            RateExpr::Sum(c) => 1 + c.iter().map(RateExpr::depth).max().unwrap_or(0),
        }
    }

    /// Calls `f` for every name with its syntactic role.
    pub fn visit_names<'a>(&'a self, f: &mut impl FnMut(NameRole, &'a str)) {
        match self {
            RateExpr::MassAction { rate, reactants } => {
                f(NameRole::Rate, rate);
                for r in reactants {
                    f(NameRole::Species, r);
                }
            }
            RateExpr::Saturating {
                vmax,
                km,
                substrate,
                competition,
            } => {
                f(NameRole::Rate, vmax);
                f(NameRole::Rate, km);
                f(NameRole::Species, substrate);
                for c in competition {
                    for n in c.weight.names() {
                        f(NameRole::Factor, n);
                    }
                    f(NameRole::Species, &c.species);
                }
            }
            RateExpr::Scale { factor, expr } => {
                for n in factor.names() {
                    f(NameRole::Factor, n);
                }
                expr.visit_names(f);
            }
            RateExpr::Neg(e) => e.visit_names(f),
            RateExpr::Sum(c) => c.iter().for_each(|e| e.visit_names(f)),
        }
    }

    /// True when every `neg` wraps a loss term (a first-order or saturating term on
    /// the species `own`) and no `neg` is nested inside another.
    pub fn negations_are_losses(&self, own: &str) -> bool {
        fn is_loss(e: &RateExpr, own: &str) -> bool {
            match e {
                RateExpr::MassAction { reactants, .. } => reactants.iter().any(|r| r == own),
                RateExpr::Saturating { substrate, .. } => substrate == own,
                RateExpr::Scale { expr, .. } => is_loss(expr, own),
                _ => false,
            }
        }
        match self {
            RateExpr::Neg(e) => is_loss(e, own),
            RateExpr::Sum(c) => c.iter().all(|e| match e {
                RateExpr::Neg(inner) => is_loss(inner, own),
                other => !other.contains_neg(),
            }),
            other => !other.contains_neg(),
        }
    }

    fn contains_neg(&self) -> bool {
        match self {
            RateExpr::Neg(_) => true,
            RateExpr::Scale { expr, .. } => expr.contains_neg(),
            RateExpr::Sum(c) => c.iter().any(RateExpr::contains_neg),
            _ => false,
        }
    }
}

impl fmt::Display for RateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NameRole {
    /// `ma` rate constant, `mm` vmax / km: always a slot.
    Rate,
    /// Species position: a species or a design input.
    Species,
    /// Scale factor or competition weight: a design input or a slot.
    Factor,
}

pub fn render_rate_expr(expr: &RateExpr) -> String {
    expr.render()
}
