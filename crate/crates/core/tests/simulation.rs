use operon_dbtl::design::{decode_design, enumerate_designs, DesignCatalog, DesignGenome, GeneId};
use operon_dbtl::hypothesis::rhs_vector;
use operon_dbtl::kinetics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The ground-truth ODE written out by hand, independent of the rate language.
struct HandModel {
    k_tx: f64,
    delta_m: f64,
    k_tl: f64,
    k_r: f64,
    d_p: f64,
    prom: f64,
    rbs: [f64; 3],
    polar: [f64; 3],
}

impl HandModel {
    fn new(genome: &DesignGenome, params: &KineticParams, catalog: &DesignCatalog) -> Self {
        let mut rbs = [0.0; 3];
        let mut polar = [0.0; 3];
        for g in 0..3 {
            rbs[g] = catalog.rbs_strength(genome, GeneId(g));
            let pos = genome.position_of(GeneId(g)).unwrap();
            polar[g] = params.rho.powi(pos as i32 - 1);
        }
        HandModel {
            k_tx: params.k_tx,
            delta_m: params.delta_m,
            k_tl: params.k_tl,
            k_r: params.k_r,
            d_p: params.delta_p + params.mu,
            prom: catalog.promoter_strength(genome),
            rbs,
            polar,
        }
    }

    fn rhs(&self, y: &[f64; 6]) -> [f64; 6] {
        let load: f64 = (0..3).map(|j| self.rbs[j] * y[j]).sum();
        let mut d = [0.0; 6];
        for g in 0..3 {
            d[g] = self.k_tx * self.prom * self.polar[g] - self.delta_m * y[g];
            d[3 + g] = self.k_tl * self.rbs[g] * y[g] / (self.k_r + load) - self.d_p * y[3 + g];
        }
        d
    }

    /// Explicit Euler with step `h`, sampled every `per_sample` steps.
    fn euler(&self, h: f64, samples: usize, per_sample: usize) -> Vec<[f64; 6]> {
        let mut y = [0.0; 6];
        let mut out = vec![y];
        for _ in 1..samples {
            for _ in 0..per_sample {
                let d = self.rhs(&y);
                for i in 0..6 {
                    y[i] = (y[i] + h * d[i]).max(0.0);
                }
            }
            out.push(y);
        }
        out
    }
}

fn catalog() -> DesignCatalog {
    DesignCatalog::default()
}

fn solve(genome: &DesignGenome, params: &KineticParams, times: &[f64]) -> Solution {
    let cat = catalog();
    let model = build_ground_truth(genome, params, &cat).unwrap();
    integrate(
        &model,
        &params.assignment(),
        &design_constants(genome, &cat),
        &SimState::zeros(6),
        times,
        &IntegratorControl::default(),
    )
    .unwrap()
}

fn suite() -> Vec<DesignGenome> {
    let cat = catalog();
    ["P0|g1,g2,g3|R0,R1,R2", "P1|g3,g1,g2|R2,R2,R0", "P0|g2,g3,g1|R1,R0,R1", "P1|g1,g3,g2|R0,R0,R0", "P1|g2,g1,g3|R2,R1,R2"]
        .iter()
        .map(|k| decode_design(k, &cat).unwrap())
        .collect()
}

#[test]
fn rk4_matches_fine_euler() {
    let params = KineticParams::default();
    let grid = TimeGrid::default();
    let times = grid.times();
    let h = (times[1] - times[0]) / IntegratorControl::default().substeps as f64;
    for d in suite() {
        let sol = solve(&d, &params, &times);
        let hand = HandModel::new(&d, &params, &catalog());
        let per_sample = 100 * IntegratorControl::default().substeps;
        let reference = hand.euler(h / 100.0, times.len(), per_sample);
        for s in 0..6 {
            let (mut num, mut den) = (0.0, 0.0);
            for (st, r) in sol.states.iter().zip(&reference) {
                num += (st.0[s] - r[s]).powi(2);
                den += r[s].powi(2);
            }
            let rel = (num / den).sqrt();
            assert!(rel < 1e-4, "{} species {s}: relative rms {rel:e}", d.key());
        }
    }
}

#[test]
fn mrna_reaches_closed_form() {
    let params = KineticParams::default();
    let cat = catalog();
    let t_end = 10.0 / params.delta_m;
    let times: Vec<f64> = (0..=20).map(|i| t_end * i as f64 / 20.0).collect();
    for d in enumerate_designs(&cat) {
        let sol = solve(&d, &params, &times);
        let last = &sol.states.last().unwrap().0;
        for g in 0..3 {
            let pos = d.position_of(GeneId(g)).unwrap() as i32;
            let expect = params.k_tx * cat.promoter_strength(&d) * params.rho.powi(pos - 1) / params.delta_m;
            assert!((last[g] - expect).abs() <= 0.01 * expect, "{} m_g{}", d.key(), g + 1);
        }
    }
}

#[test]
fn rhs_agrees_with_hand_model() {
    let params = KineticParams::default();
    let cat = catalog();
    let structure = ground_truth_structure(3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let designs = enumerate_designs(&cat);
    for _ in 0..100 {
        let d = &designs[rng.gen_range(0..designs.len())];
        let y: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..50.0));
        let got = rhs_vector(&structure, &y, &params.assignment(), &design_constants(d, &cat)).unwrap();
        let want = HandModel::new(d, &params, &cat).rhs(&y);
        for i in 0..6 {
            assert!((got[i] - want[i]).abs() < 1e-12, "{} component {i}", d.key());
        }
    }
}

#[test]
fn zero_transcription_gives_zero_dynamics() {
    let cat = catalog();
    let d = decode_design("P1|g1,g2,g3|R0,R1,R0", &cat).unwrap();
    let params = KineticParams {
        k_tx: 0.0,
        ..KineticParams::default()
    };
    let model = build_ground_truth(&d, &params, &cat).unwrap();
    let sol = integrate(
        &model,
        &params.assignment(),
        &design_constants(&d, &cat),
        &SimState::zeros(6),
        &TimeGrid::default().times(),
        &IntegratorControl::default(),
    )
    .unwrap();
    assert!(sol.states.iter().all(|s| s.0.iter().all(|&v| v == 0.0)));
}

#[test]
fn steady_state_orderings() {
    let cat = catalog();
    let params = KineticParams::default();
    for d in enumerate_designs(&cat) {
        // polarity: equal RBS strengths give position-ordered protein levels
        if d.key().ends_with("R1,R1,R1") {
            let (_, p) = steady_state(&d, &params, &cat);
            let mut by_pos = [0.0; 3];
            for g in 0..3 {
                by_pos[d.position_of(GeneId(g)).unwrap() - 1] = p[g];
            }
            assert!(by_pos[0] >= by_pos[1] && by_pos[1] >= by_pos[2], "{}", d.key());
        }
        // a stronger promoter never lowers a steady-state protein level
        if d.key().starts_with("P0") {
            let strong = decode_design(&d.key().replacen("P0", "P1", 1), &cat).unwrap();
            let (_, weak_p) = steady_state(&d, &params, &cat);
            let (_, strong_p) = steady_state(&strong, &params, &cat);
            assert!(weak_p.iter().zip(&strong_p).all(|(a, b)| b >= a), "{}", d.key());
        }
    }
}

#[test]
fn trajectories_stay_bounded() {
    let cat = catalog();
    let params = KineticParams::default();
    let times = TimeGrid::default().times();
    for d in suite() {
        let sol = solve(&d, &params, &times);
        let prom = cat.promoter_strength(&d);
        let m_max = params.k_tx * prom / params.delta_m * 1.01;
        let rbs_sum: f64 = (0..3).map(|g| cat.rbs_strength(&d, GeneId(g))).sum();
        let p_max = params.k_tl * rbs_sum * m_max / (params.effective_protein_loss() * params.k_r) * 1.01;
        for s in &sol.states {
            assert!(s.0[..3].iter().all(|&m| m <= m_max));
            assert!(s.0[3..].iter().all(|&p| p <= p_max));
        }
    }
}

#[test]
fn noise_is_replayable() {
    let cat = catalog();
    let designs = suite();
    let gen = |seed| {
        generate_dataset(
            &designs,
            &KineticParams::default(),
            &TimeGrid::default(),
            &NoiseModel::gaussian(0.05, seed),
            &cat,
            &Observation::default(),
        )
        .unwrap()
    };
    assert_eq!(gen(3), gen(3));
    assert_ne!(gen(3), gen(4));
    let clean = generate_dataset(
        &designs,
        &KineticParams::default(),
        &TimeGrid::default(),
        &NoiseModel::gaussian(0.0, 3),
        &cat,
        &Observation::default(),
    )
    .unwrap();
    let t = clean.iter().next().unwrap();
    assert_eq!(&apply_noise(t, &NoiseModel::default()), t);
}

#[test]
fn dataset_ignores_design_order() {
    let cat = catalog();
    let mut designs = suite();
    let gen = |ds: &[DesignGenome]| {
        let d = generate_dataset(
            ds,
            &KineticParams::default(),
            &TimeGrid::default(),
            &NoiseModel::gaussian(0.1, 9),
            &cat,
            &Observation { include_mrna: true },
        )
        .unwrap();
        serde_json::to_string(&d).unwrap()
    };
    let forward = gen(&designs);
    designs.reverse();
    assert_eq!(forward, gen(&designs));
}

#[test]
fn single_design_small_grid() {
    let cat = catalog();
    let grid = TimeGrid {
        start: 0.0,
        end: 10.0,
        points: 11,
    };
    let ds = generate_dataset(
        &suite()[..1],
        &KineticParams::default(),
        &grid,
        &NoiseModel::default(),
        &cat,
        &Observation::default(),
    )
    .unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.iter().next().unwrap().len(), 11);
    assert_eq!(ds.observed_species(), vec!["p_g1", "p_g2", "p_g3"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn concentrations_never_negative(
        design in 0usize..324,
        k_tx in 0.1f64..50.0,
        delta_m in 0.05f64..5.0,
        k_tl in 0.1f64..50.0,
        k_r in 0.5f64..100.0,
        rho in 0.05f64..1.0,
    ) {
        let cat = catalog();
        let d = &enumerate_designs(&cat)[design];
        let params = KineticParams { k_tx, delta_m, k_tl, k_r, rho, ..KineticParams::default() };
        let sol = solve(d, &params, &TimeGrid::default().times());
        prop_assert!(sol.states.iter().all(|s| s.0.iter().all(|&v| v >= 0.0 && v.is_finite())));
    }
}
