//! Random rate-expression generator, used to exercise the parser and renderer.

use rand::Rng;

use super::expr::{CompetitionTerm, Factor, RateExpr, Scalar};

const SLOTS: &[&str] = &["k", "k_tx", "K_R", "d_p_eff", "v1", "_w"];
const SPECIES: &[&str] = &["x", "m_g1", "m_g2", "p_g3", "prom", "rbs_g2"];

fn pick<'a, R: Rng>(rng: &mut R, from: &[&'a str]) -> &'a str {
    from[rng.gen_range(0..from.len())]
}

fn number<R: Rng>(rng: &mut R) -> f64 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(0..100) as f64,
        1 => rng.gen_range(0.0..10.0),
        2 => 10f64.powi(rng.gen_range(-9..9)) * rng.gen_range(1.0..10.0),
        _ => 0.5,
    }
}

fn scalar<R: Rng>(rng: &mut R) -> Scalar {
    if rng.gen_bool(0.3) {
        Scalar::Num(number(rng))
    } else {
        Scalar::Name(pick(rng, SLOTS).to_string())
    }
}

fn factor<R: Rng>(rng: &mut R) -> Factor {
    Factor {
        base: scalar(rng),
        exponent: rng.gen_bool(0.3).then(|| scalar(rng)),
    }
}

/// A canonical random expression of depth at most `max_depth`.
pub fn random_expr<R: Rng>(rng: &mut R, max_depth: usize) -> RateExpr {
    raw(rng, max_depth.max(1)).canonical()
}

fn raw<R: Rng>(rng: &mut R, depth: usize) -> RateExpr {
    let choice = if depth <= 1 { rng.gen_range(0..2) } else { rng.gen_range(0..5) };
    match choice {
        0 => RateExpr::MassAction {
            rate: pick(rng, SLOTS).to_string(),
            reactants: (0..rng.gen_range(1..4)).map(|_| pick(rng, SPECIES).to_string()).collect(),
        },
        1 => RateExpr::Saturating {
            vmax: pick(rng, SLOTS).to_string(),
            km: pick(rng, SLOTS).to_string(),
            substrate: pick(rng, SPECIES).to_string(),
            competition: (0..rng.gen_range(0..4))
                .map(|_| CompetitionTerm {
                    weight: factor(rng),
                    species: pick(rng, SPECIES).to_string(),
                })
                .collect(),
        },
        2 => RateExpr::Scale {
            factor: factor(rng),
            expr: Box::new(raw(rng, depth - 1)),
        },
        3 => RateExpr::Neg(Box::new(raw(rng, depth - 1))),
        _ => RateExpr::Sum((0..rng.gen_range(2..5)).map(|_| raw(rng, depth - 1)).collect()),
    }
}
