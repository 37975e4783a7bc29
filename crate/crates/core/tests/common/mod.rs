#![allow(dead_code)]

use std::time::{Duration, Instant};

use capmkt::network::{build_ptdf, exact_projection_feasible, Line, Network};
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Nodal feasibility of zonal net positions from a voltage-angle LP that
/// never forms a PTDF: dispatch within caps, nodal balance through line
/// flows b (theta_from - theta_to) within thermal limits.
pub fn nodal_lp_feasible(net: &Network, np: &[f64], caps: &[f64], demand: &[f64]) -> bool {
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let g: Vec<_> = caps.iter().map(|&c| p.add_var(0.0, (0.0, c))).collect();
    let theta: Vec<_> = (0..net.num_nodes())
        .map(|n| {
            if n == 0 {
                p.add_var(0.0, (0.0, 0.0))
            } else {
                p.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))
            }
        })
        .collect();
    let flow: Vec<_> = net
        .lines()
        .iter()
        .map(|l| p.add_var(0.0, (-l.f_max, l.f_max)))
        .collect();
    for (l, line) in net.lines().iter().enumerate() {
        p.add_constraint(
            &[(flow[l], 1.0), (theta[line.from], -line.susceptance), (theta[line.to], line.susceptance)],
            ComparisonOp::Eq,
            0.0,
        );
    }
    for n in 0..net.num_nodes() {
        let mut coefs = vec![(g[n], 1.0)];
        for (l, line) in net.lines().iter().enumerate() {
            if line.from == n {
                coefs.push((flow[l], -1.0));
            } else if line.to == n {
                coefs.push((flow[l], 1.0));
            }
        }
        p.add_constraint(&coefs, ComparisonOp::Eq, demand[n]);
    }
    for z in 0..net.num_zones() {
        let coefs: Vec<_> = net.zone_nodes(z).iter().map(|&n| (g[n], 1.0)).collect();
        let d: f64 = net.zone_nodes(z).iter().map(|&n| demand[n]).sum();
        p.add_constraint(&coefs, ComparisonOp::Eq, np[z] + d);
    }
    match p.solve() {
        Ok(_) => true,
        Err(minilp::Error::Infeasible) => false,
        Err(e) => panic!("LP oracle failed: {e}"),
    }
}

/// Zone X = {x1, x2}, zone Y = {y}; a triangle with unequal limits.
pub fn three_node() -> Network {
    let line = |id: &str, from, to, susceptance, f_max| Line {
        id: id.into(),
        from,
        to,
        susceptance,
        f_max,
    };
    Network::new(
        vec!["x1".into(), "x2".into(), "y".into()],
        vec!["X".into(), "Y".into()],
        vec![0, 0, 1],
        vec![
            line("x1-x2", 0, 1, 1.0, 100.0),
            line("x1-y", 0, 2, 2.0, 200.0),
            line("x2-y", 1, 2, 1.0, 150.0),
        ],
        vec![0.5, 0.5, 1.0],
    )
    .unwrap()
}

pub struct ProjectionAgreement {
    pub queries: usize,
    pub feasible: usize,
    pub disagreements: usize,
    pub elapsed: Duration,
}

/// Random two-zone membership queries answered by the projection and by the LP.
pub fn projection_agreement(net: &Network, queries: usize, seed: u64) -> ProjectionAgreement {
    let ptdf = build_ptdf(net, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let (mut feasible, mut disagreements) = (0, 0);
    for _ in 0..queries {
        let caps: Vec<f64> = (0..net.num_nodes()).map(|_| rng.random_range(0.0..500.0)).collect();
        let demand: Vec<f64> = (0..net.num_nodes()).map(|_| rng.random_range(0.0..300.0)).collect();
        let mut np: Vec<f64> = (0..net.num_zones()).map(|_| rng.random_range(-400.0..400.0)).collect();
        let mean = np.iter().sum::<f64>() / np.len() as f64;
        np.iter_mut().for_each(|v| *v -= mean);
        let ours = exact_projection_feasible(net, &ptdf, &np, &caps, &demand)
            .unwrap()
            .is_feasible();
        let oracle = nodal_lp_feasible(net, &np, &caps, &demand);
        feasible += usize::from(oracle);
        disagreements += usize::from(ours != oracle);
    }
    ProjectionAgreement {
        queries,
        feasible,
        disagreements,
        elapsed: start.elapsed(),
    }
}

/// Whether zonal net positions can be written as bilateral exchanges inside
/// the box, allowing `slack` MW of mismatch per zone.
pub fn box_contains(net: &Network, ntc: &capmkt::network::NtcBox, np: &[f64], slack: f64) -> bool {
    let idx = ntc.border_indices(net).unwrap();
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let e: Vec<_> = (0..idx.len())
        .map(|b| p.add_var(0.0, (-ntc.atc_minus[b], ntc.atc_plus[b])))
        .collect();
    for (z, &target) in np.iter().enumerate() {
        let coefs: Vec<_> = idx
            .iter()
            .enumerate()
            .filter_map(|(b, &(from, to))| match z {
                _ if z == from => Some((e[b], 1.0)),
                _ if z == to => Some((e[b], -1.0)),
                _ => None,
            })
            .collect();
        p.add_constraint(&coefs, ComparisonOp::Le, target + slack);
        p.add_constraint(&coefs, ComparisonOp::Ge, target - slack);
    }
    match p.solve() {
        Ok(_) => true,
        Err(minilp::Error::Infeasible) => false,
        Err(e) => panic!("LP oracle failed: {e}"),
    }
}
