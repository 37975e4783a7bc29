//! Centralized welfare maximization over the constraint set of each market
//! design, solved as one convex QP. Its duals are the market prices that a
//! competitive equilibrium must reproduce.

use serde::{Deserialize, Serialize};

use crate::case::{CaseData, DesignSetup};
use crate::equilibrium::{assemble, Allocation, Decisions, EquilibriumSolution, MarketPrices};
use crate::error::{Error, Result};
use crate::market_clearing::operators::{CapacityOperatorDecision, EnergyOperatorDecision};
use crate::market_clearing::CapacityCoupling;
use crate::network::build_ptdf;
use crate::participants::{ConsumerDecision, GeneratorDecision};
use crate::qp::{solve_qp, QpProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareSolution {
    pub allocation: Allocation,
    pub prices: MarketPrices,
    /// Consumer utility (unserved energy valued at the willingness to pay)
    /// minus generation and investment cost, in EUR/year.
    pub welfare: f64,
}

/// Consumer utility minus generation and investment cost of an allocation.
/// Unserved inelastic demand forfeits the willingness to pay.
pub fn social_welfare(case: &CaseData, allocation: &Allocation) -> f64 {
    let grid = &case.grid;
    let mut w = 0.0;
    for (c, d) in case.consumers.iter().zip(&allocation.consumers) {
        let block = crate::participants::ConsumerBlock {
            curtailment_value: c.wtp,
            ..c.clone()
        };
        for t in 0..grid.len() {
            w += grid.weight(t) * block.utility(c.ref_demand[t], d.elastic[t], d.ens[t]);
        }
    }
    for (g, d) in case.generators.iter().zip(&allocation.generators) {
        for t in 0..grid.len() {
            w -= grid.weight(t) * g.variable_cost(d.dispatch[t]);
        }
        w -= g.capex * (d.capacity - g.existing);
    }
    w
}

/// Welfare-maximizing allocation of one design and the duals of its
/// market-clearing constraints.
pub fn solve_welfare_max(case: &CaseData, setup: &DesignSetup) -> Result<WelfareSolution> {
    case.validate()?;
    setup.validate(case)?;
    let net = &case.network;
    let grid = &case.grid;
    let ptdf = build_ptdf(net, 0)?;
    let nz = net.num_zones();
    let nn = net.num_nodes();
    let steps = grid.len();
    let inf = f64::INFINITY;
    let multi: Vec<bool> = (0..nz).map(|z| net.zone_nodes(z).len() > 1).collect();
    let consumers = case.consumers_under_cap(setup.price_cap);
    let has_cm = setup.capacity.is_some();
    let mut qp = QpProblem::new();

    // generators
    let mut g = Vec::new();
    let mut y = Vec::new();
    let mut offer = Vec::new();
    for tech in &case.generators {
        let yi = qp.add_var(0.0, tech.capex, tech.existing, inf);
        let gi: Vec<usize> = (0..steps)
            .map(|t| {
                let w = grid.weight(t);
                let j = qp.add_var(w * tech.a_quad, w * tech.b_lin, 0.0, inf);
                qp.add_row(vec![(j, 1.0), (yi, -tech.availability[t])], -inf, 0.0);
                j
            })
            .collect();
        let oi = has_cm.then(|| {
            let j = qp.add_var(0.0, 0.0, 0.0, inf);
            qp.add_row(vec![(j, 1.0), (yi, -1.0)], -inf, 0.0);
            j
        });
        g.push(gi);
        y.push(yi);
        offer.push(oi);
    }

    // consumers: elastic block and unserved inelastic demand
    let mut elastic = Vec::new();
    let mut ens = Vec::new();
    for c in &consumers {
        let mut e_c = Vec::new();
        let mut u_c = Vec::new();
        for t in 0..steps {
            let w = grid.weight(t);
            let cap = c.elastic_share * c.ref_demand[t];
            let quad = if cap > 0.0 { w * c.wtp / cap } else { 0.0 };
            e_c.push(qp.add_var(quad, -w * c.wtp, 0.0, cap));
            u_c.push(qp.add_var(0.0, w * c.curtailment_value, 0.0, (1.0 - c.elastic_share) * c.ref_demand[t]));
        }
        elastic.push(e_c);
        ens.push(u_c);
    }

    // energy market: net positions, curtailment, nodal dispatch and allocation
    let yhat: Vec<Option<usize>> = (0..nn)
        .map(|n| multi[net.zone_of(n)].then(|| qp.add_var(0.0, 0.0, 0.0, inf)))
        .collect();
    let mut np = vec![vec![0; steps]; nz];
    let mut curt = vec![vec![0; steps]; nz];
    let mut ghat = vec![vec![None; steps]; nn];
    let mut energy_rows = vec![vec![0; steps]; nz];
    let mut generation_rows = vec![vec![None; steps]; nz];
    for t in 0..steps {
        for z in 0..nz {
            np[z][t] = qp.add_var(0.0, 0.0, -inf, inf);
            curt[z][t] = qp.add_var(0.0, 0.0, 0.0, case.renewables[z][t]);
        }
        for n in 0..nn {
            if let Some(yh) = yhat[n] {
                let j = qp.add_var(0.0, 0.0, 0.0, inf);
                qp.add_row(vec![(j, 1.0), (yh, -1.0)], -inf, 0.0);
                ghat[n][t] = Some(j);
            }
        }
        qp.add_eq((0..nz).map(|z| (np[z][t], 1.0)).collect(), 0.0);
        // nodal injection: single-node zones inject their net position; in a
        // multi-node zone node n injects ghat_n - share_n (sum ghat - NP)
        for (l, line) in net.lines().iter().enumerate() {
            let mut coefs = Vec::new();
            for n in 0..nn {
                let p = ptdf.get(l, n);
                if p == 0.0 {
                    continue;
                }
                let z = net.zone_of(n);
                if !multi[z] {
                    coefs.push((np[z][t], p));
                    continue;
                }
                let share = net.demand_share(n);
                coefs.push((np[z][t], p * share));
                for &m in net.zone_nodes(z) {
                    let own = if m == n { 1.0 } else { 0.0 };
                    coefs.push((ghat[m][t].unwrap(), p * (own - share)));
                }
            }
            qp.add_row(coefs, -line.f_max, line.f_max);
        }
        for z in 0..nz {
            let mut coefs = vec![(curt[z][t], -1.0), (np[z][t], -1.0)];
            let mut rhs = -case.renewables[z][t];
            for (ci, c) in consumers.iter().enumerate() {
                if c.zone == z {
                    coefs.push((ens[ci][t], 1.0));
                    coefs.push((elastic[ci][t], -1.0));
                    rhs += (1.0 - c.elastic_share) * c.ref_demand[t];
                }
            }
            let gens: Vec<(usize, f64)> = case
                .generators
                .iter()
                .enumerate()
                .filter(|(_, tech)| tech.zone == z)
                .map(|(i, _)| (g[i][t], 1.0))
                .collect();
            if multi[z] {
                coefs.extend(net.zone_nodes(z).iter().map(|&n| (ghat[n][t].unwrap(), 1.0)));
                let mut gen_row = gens;
                gen_row.extend(net.zone_nodes(z).iter().map(|&n| (ghat[n][t].unwrap(), -1.0)));
                generation_rows[z][t] = Some(qp.add_eq(gen_row, 0.0));
            } else {
                coefs.extend(gens);
            }
            energy_rows[z][t] = qp.add_eq(coefs, rhs);
        }
    }
    let alloc_e_rows: Vec<Option<usize>> = (0..nz)
        .map(|z| {
            multi[z].then(|| {
                let mut coefs: Vec<(usize, f64)> = case
                    .generators
                    .iter()
                    .enumerate()
                    .filter(|(_, tech)| tech.zone == z)
                    .map(|(i, _)| (y[i], 1.0))
                    .collect();
                coefs.extend(net.zone_nodes(z).iter().map(|&n| (yhat[n].unwrap(), -1.0)));
                qp.add_row(coefs, 0.0, inf)
            })
        })
        .collect();

    // capacity market
    let mut capacity_rows: Vec<Vec<usize>> = vec![Vec::new(); nz];
    let mut alloc_cm_rows = vec![None; nz];
    let mut firm_rows = vec![None; nn];
    let mut p_vars: Option<Vec<usize>> = None;
    let mut yr_vars: Vec<usize> = Vec::new();
    let mut gsc_vars: Vec<Vec<usize>> = Vec::new();
    let mut ex_vars: Vec<usize> = Vec::new();
    if let Some(cm) = &setup.capacity {
        let zone_offers = |z: usize| -> Vec<(usize, f64)> {
            case.generators
                .iter()
                .enumerate()
                .filter(|(_, tech)| tech.zone == z)
                .map(|(i, _)| (offer[i].unwrap(), 1.0))
                .collect()
        };
        match &cm.coupling {
            CapacityCoupling::Isolated => {
                for z in 0..nz {
                    capacity_rows[z].push(qp.add_row(zone_offers(z), cm.demand[z], inf));
                }
            }
            CapacityCoupling::Ntc { ntc, scenarios } => {
                let borders = ntc.border_indices(net)?;
                ex_vars = (0..borders.len())
                    .map(|b| qp.add_var(0.0, 0.0, -ntc.atc_minus[b], ntc.atc_plus[b]))
                    .collect();
                let export_terms = |z: usize| -> Vec<(usize, f64)> {
                    borders
                        .iter()
                        .zip(&ex_vars)
                        .filter_map(|(&(a, b), &j)| {
                            if a == z {
                                Some((j, -1.0))
                            } else if b == z {
                                Some((j, 1.0))
                            } else {
                                None
                            }
                        })
                        .collect()
                };
                for z in 0..nz {
                    // offers - net exports >= demand, and the same for each scenario
                    let mut coefs = zone_offers(z);
                    coefs.extend(export_terms(z));
                    capacity_rows[z].push(qp.add_row(coefs.clone(), cm.demand[z], inf));
                    for sc in scenarios {
                        let dz = sc.zonal_demand(net)[z];
                        capacity_rows[z].push(qp.add_row(coefs.clone(), dz, inf));
                    }
                }
            }
            CapacityCoupling::FlowBased { scenarios } => {
                let p: Vec<usize> = (0..nz).map(|_| qp.add_var(0.0, 0.0, -inf, inf)).collect();
                qp.add_eq(p.iter().map(|&j| (j, 1.0)).collect(), 0.0);
                yr_vars = (0..nn).map(|_| qp.add_var(0.0, 0.0, 0.0, inf)).collect();
                for z in 0..nz {
                    let mut coefs = zone_offers(z);
                    coefs.push((p[z], -1.0));
                    capacity_rows[z].push(qp.add_row(coefs, cm.demand[z], inf));
                    let mut alloc = zone_offers(z);
                    alloc.extend(net.zone_nodes(z).iter().map(|&n| (yr_vars[n], -1.0)));
                    alloc_cm_rows[z] = Some(qp.add_row(alloc, 0.0, inf));
                }
                for n in 0..nn {
                    if let Some(yh) = yhat[n] {
                        firm_rows[n] = Some(qp.add_row(vec![(yh, 1.0), (yr_vars[n], -1.0)], 0.0, inf));
                    }
                }
                for sc in scenarios {
                    let d = &sc.nodal_capacity_demand;
                    let gs: Vec<usize> = (0..nn).map(|_| qp.add_var(0.0, 0.0, 0.0, inf)).collect();
                    for n in 0..nn {
                        qp.add_row(vec![(gs[n], 1.0), (yr_vars[n], -1.0)], -inf, 0.0);
                    }
                    for z in 0..nz {
                        let mut coefs = vec![(p[z], 1.0)];
                        coefs.extend(net.zone_nodes(z).iter().map(|&n| (gs[n], -1.0)));
                        let dz: f64 = net.zone_nodes(z).iter().map(|&n| d[n]).sum();
                        qp.add_row(coefs, -inf, -dz);
                    }
                    qp.add_eq(gs.iter().map(|&j| (j, 1.0)).collect(), d.iter().sum());
                    for (l, line) in net.lines().iter().enumerate() {
                        let offset: f64 = (0..nn).map(|n| ptdf.get(l, n) * d[n]).sum();
                        let coefs = (0..nn)
                            .filter(|&n| ptdf.get(l, n) != 0.0)
                            .map(|n| (gs[n], ptdf.get(l, n)))
                            .collect();
                        qp.add_row(coefs, -line.f_max + offset, line.f_max + offset);
                    }
                    gsc_vars.push(gs);
                }
                p_vars = Some(p);
            }
        }
    }

    let sol = solve_qp(&qp).map_err(|e| match e {
        Error::Infeasible { detail, .. } => {
            Error::CapacityInfeasible(format!("no allocation satisfies every constraint of {}: {detail}", setup.design))
        }
        other => other,
    })?;
    let x = &sol.x;
    let dual = |r: usize| sol.row_duals[r];

    let decisions = Decisions {
        generators: (0..case.generators.len())
            .map(|i| GeneratorDecision {
                dispatch: g[i].iter().map(|&j| x[j].max(0.0)).collect(),
                capacity: x[y[i]],
                cm_offer: offer[i].map_or(0.0, |j| x[j].max(0.0)),
            })
            .collect(),
        consumers: consumers
            .iter()
            .enumerate()
            .map(|(ci, c)| {
                let e: Vec<f64> = elastic[ci].iter().map(|&j| x[j].max(0.0)).collect();
                let u: Vec<f64> = ens[ci].iter().map(|&j| x[j].max(0.0)).collect();
                let inelastic: Vec<f64> = (0..steps)
                    .map(|t| ((1.0 - c.elastic_share) * c.ref_demand[t] - u[t]).max(0.0))
                    .collect();
                ConsumerDecision {
                    demand: (0..steps).map(|t| inelastic[t] + e[t]).collect(),
                    elastic: e,
                    inelastic,
                    ens: u,
                }
            })
            .collect(),
        energy_operator: EnergyOperatorDecision {
            net_positions: np.iter().map(|r| r.iter().map(|&j| x[j]).collect()).collect(),
            curtailment: curt.iter().map(|r| r.iter().map(|&j| x[j].max(0.0)).collect()).collect(),
            nodal_dispatch: ghat
                .iter()
                .map(|r| r.iter().map(|j| j.map_or(0.0, |j| x[j].max(0.0))).collect())
                .collect(),
            nodal_caps: yhat.iter().map(|j| j.map_or(0.0, |j| x[j].max(0.0))).collect(),
        },
        capacity_operator: setup.capacity.as_ref().and_then(|cm| match &cm.coupling {
            CapacityCoupling::Isolated => None,
            CapacityCoupling::Ntc { ntc, .. } => {
                let exchanges: Vec<f64> = ex_vars.iter().map(|&j| x[j]).collect();
                Some(CapacityOperatorDecision {
                    net_obligation: ntc.net_positions(net, &exchanges).unwrap_or_else(|_| vec![0.0; nz]),
                    exchanges,
                    ..Default::default()
                })
            }
            CapacityCoupling::FlowBased { .. } => Some(CapacityOperatorDecision {
                net_obligation: p_vars.as_ref().map_or(vec![0.0; nz], |p| p.iter().map(|&j| x[j]).collect()),
                nodal_allocation: yr_vars.iter().map(|&j| x[j].max(0.0)).collect(),
                scarcity_dispatch: gsc_vars
                    .iter()
                    .map(|gs| gs.iter().map(|&j| x[j].max(0.0)).collect())
                    .collect(),
                exchanges: Vec::new(),
            }),
        }),
        slacks: Vec::new(),
    };

    let prices = MarketPrices {
        energy: (0..nz)
            .map(|z| {
                (0..steps)
                    .map(|t| (dual(energy_rows[z][t]) / grid.weight(t)).clamp(0.0, setup.price_cap))
                    .collect()
            })
            .collect(),
        generation: (0..nz)
            .map(|z| {
                (0..steps)
                    .filter_map(|t| generation_rows[z][t].map(|r| dual(r) / grid.weight(t)))
                    .collect()
            })
            .collect(),
        energy_allocation: alloc_e_rows.iter().map(|r| r.map_or(0.0, |r| dual(r).max(0.0))).collect(),
        capacity: if has_cm {
            capacity_rows.iter().map(|rs| rs.iter().map(|&r| dual(r)).sum::<f64>().max(0.0)).collect()
        } else {
            vec![0.0; nz]
        },
        capacity_allocation: alloc_cm_rows.iter().map(|r| r.map_or(0.0, |r| dual(r).max(0.0))).collect(),
        firm: firm_rows.iter().map(|r| r.map_or(0.0, |r| dual(r).max(0.0))).collect(),
    };
    let allocation = assemble(case, setup, &decisions, &prices)?;
    let welfare = social_welfare(case, &allocation);
    Ok(WelfareSolution {
        allocation,
        prices,
        welfare,
    })
}

/// Largest gaps between an equilibrium and a welfare optimum. Each gap is the
/// largest absolute difference within a variable class divided by the largest
/// magnitude of that class in the welfare optimum (at least 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub dispatch: f64,
    pub investment: f64,
    pub demand: f64,
    pub energy_prices: f64,
    pub capacity_prices: f64,
    pub net_positions: f64,
    /// Oracle welfare minus equilibrium welfare, relative to oracle welfare.
    pub welfare: f64,
}

impl Divergence {
    pub fn max_primal(&self) -> f64 {
        self.dispatch.max(self.investment).max(self.demand).max(self.net_positions)
    }
}

fn class_gap<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for (x, y) in a.zip(b) {
        diff = diff.max((x - y).abs());
        scale = scale.max(y.abs());
    }
    diff / scale
}

pub fn compare_solutions(eq: &EquilibriumSolution, wf: &WelfareSolution, case: &CaseData) -> Divergence {
    let (ea, wa) = (&eq.allocation, &wf.allocation);
    let flat_steps = |a: &Allocation, f: fn(&crate::market_clearing::EnergyStep) -> &Vec<f64>| -> Vec<f64> {
        a.energy.steps.iter().flat_map(|s| f(s).iter().copied()).collect()
    };
    let cm = |a: &Allocation| a.capacity.as_ref().map_or(Vec::new(), |c| c.prices.clone());
    let ew = social_welfare(case, ea);
    Divergence {
        dispatch: class_gap(
            ea.generators.iter().flat_map(|g| g.dispatch.iter()),
            wa.generators.iter().flat_map(|g| g.dispatch.iter()),
        ),
        investment: class_gap(
            ea.generators.iter().map(|g| &g.capacity),
            wa.generators.iter().map(|g| &g.capacity),
        ),
        demand: class_gap(
            ea.consumers.iter().flat_map(|c| c.demand.iter()),
            wa.consumers.iter().flat_map(|c| c.demand.iter()),
        ),
        energy_prices: class_gap(
            flat_steps(ea, |s| &s.prices).iter(),
            flat_steps(wa, |s| &s.prices).iter(),
        ),
        capacity_prices: class_gap(cm(ea).iter(), cm(wa).iter()),
        net_positions: class_gap(
            flat_steps(ea, |s| &s.net_positions).iter(),
            flat_steps(wa, |s| &s.net_positions).iter(),
        ),
        welfare: (wf.welfare - ew) / wf.welfare.abs().max(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_equilibrium, AdmmConfig};
    use crate::market_clearing::MarketDesign;
    use crate::network::Network;
    use crate::participants::{ConsumerBlock, GeneratorTech, TimeGrid};
    use crate::scenario::toy_case;

    fn single_zone(demand: f64, existing: f64, capex: f64) -> CaseData {
        CaseData {
            network: Network::new(vec!["n".into()], vec!["Z".into()], vec![0], vec![], vec![1.0]).unwrap(),
            grid: TimeGrid::new(vec![8760.0]).unwrap(),
            generators: vec![GeneratorTech {
                id: "g".into(),
                zone: 0,
                a_quad: 0.0,
                b_lin: 40.0,
                capex,
                existing,
                availability: vec![1.0],
            }],
            consumers: vec![ConsumerBlock {
                zone: 0,
                ref_demand: vec![demand],
                elastic_share: 0.5,
                wtp: 1000.0,
                curtailment_value: 1000.0,
            }],
            renewables: vec![vec![0.0]],
        }
    }

    fn eom(design: MarketDesign, price_cap: f64) -> DesignSetup {
        DesignSetup {
            design,
            price_cap,
            capacity: None,
        }
    }

    #[test]
    fn single_zone_matches_closed_form() {
        // price = b + capex / hours, elastic demand = e (1 - price / wtp)
        let case = single_zone(1000.0, 0.0, 87_600.0);
        let sol = solve_welfare_max(&case, &eom(MarketDesign::EomRef, 1000.0)).unwrap();
        let price = 40.0 + 10.0;
        let demand = 500.0 + 500.0 * (1.0 - price / 1000.0);
        let got = sol.allocation.energy.steps[0].prices[0];
        assert!((got - price).abs() < 1e-4 * price, "price {got}");
        assert!((sol.allocation.generators[0].capacity - demand).abs() < 1e-4 * demand);
        assert!((sol.allocation.consumers[0].demand[0] - demand).abs() < 1e-4 * demand);
        let analytic = 8760.0 * (1000.0 * 500.0 + 1000.0 * 475.0 - 1000.0 / 1000.0 * 475.0 * 475.0 - 40.0 * demand)
            - 87_600.0 * demand;
        assert!((sol.welfare - analytic).abs() < 1e-6 * analytic.abs(), "{} vs {analytic}", sol.welfare);
    }

    #[test]
    fn zero_demand_builds_nothing() {
        let case = single_zone(0.0, 0.0, 87_600.0);
        let sol = solve_welfare_max(&case, &eom(MarketDesign::EomRef, 1000.0)).unwrap();
        assert!(sol.allocation.generators[0].capacity.abs() < 1e-6);
        assert!(sol.welfare.abs() < 1e-3);
    }

    #[test]
    fn capped_design_never_beats_uncapped_welfare() {
        let case = toy_case(8).unwrap();
        let reference = solve_welfare_max(&case, &eom(MarketDesign::EomRef, 20_000.0)).unwrap();
        let capped = solve_welfare_max(
            &case,
            &DesignSetup {
                design: MarketDesign::EomCap,
                price_cap: 3000.0,
                capacity: None,
            },
        )
        .unwrap();
        assert!(capped.welfare <= reference.welfare * (1.0 + 1e-7));
        assert!(capped.allocation.energy.max_price() <= 3000.0 + 1e-6);
    }

    #[test]
    fn equilibrium_matches_oracle_on_toy_case() {
        let case = toy_case(24).unwrap();
        for setup in [
            eom(MarketDesign::EomRef, 20_000.0),
            DesignSetup {
                design: MarketDesign::EomCap,
                price_cap: 3000.0,
                capacity: None,
            },
        ] {
            let cfg = AdmmConfig {
                primal_tol: 1e-8,
                dual_tol: 1e-8,
                ..Default::default()
            };
            let eq = solve_equilibrium(&case, &setup, &cfg).unwrap();
            let wf = solve_welfare_max(&case, &setup).unwrap();
            let gap = compare_solutions(&eq, &wf, &case);
            eprintln!("{}: {gap:?} ({} iterations)", setup.design, eq.iterations);
            assert!(gap.max_primal() < 1e-4, "{gap:?}");
            assert!(gap.energy_prices < 1e-3, "{gap:?}");
            assert!(gap.welfare.abs() < 1e-4, "{gap:?}");
        }
    }

    #[test]
    fn identical_solutions_have_no_gaps() {
        let case = toy_case(6).unwrap();
        let setup = eom(MarketDesign::EomRef, 20_000.0);
        let wf = solve_welfare_max(&case, &setup).unwrap();
        let eq = EquilibriumSolution {
            design: setup.design,
            allocation: wf.allocation.clone(),
            prices: wf.prices.clone(),
            energy_operator: Default::default(),
            capacity_operator: None,
            residuals: Vec::new(),
            converged: true,
            verified: true,
            iterations: 0,
            final_rho: 0.0,
        };
        let d = compare_solutions(&eq, &wf, &case);
        assert_eq!(d.max_primal(), 0.0);
        assert_eq!((d.energy_prices, d.capacity_prices, d.welfare), (0.0, 0.0, 0.0));
    }

    #[test]
    fn capped_duals_stay_within_the_cap() {
        let case = toy_case(24).unwrap();
        let sol = solve_welfare_max(&case, &eom(MarketDesign::EomCap, 3000.0)).unwrap();
        for step in &sol.allocation.energy.steps {
            assert!(step.prices.iter().all(|&p| (0.0..=3000.0).contains(&p)), "{:?}", step.prices);
        }
    }

    #[test]
    fn more_line_capacity_never_lowers_welfare() {
        let case = toy_case(24).unwrap();
        let setup = eom(MarketDesign::EomRef, 20_000.0);
        let base = solve_welfare_max(&case, &setup).unwrap().welfare;
        for line in 0..case.network.num_lines() {
            let mut spec = case.network.to_spec();
            spec.lines[line].f_max_mw *= 1.5;
            let wider = CaseData {
                network: crate::network::Network::from_spec(&spec).unwrap(),
                ..case.clone()
            };
            let w = solve_welfare_max(&wider, &setup).unwrap().welfare;
            assert!(w >= base - 1e-7 * base.abs(), "line {line}: {w} < {base}");
        }
    }
}
