//! Price-taking problems of the energy and capacity market operators.
//!
//! Each operator maximizes the value of its market contributions at given
//! prices (plus optional augmentation terms) over its own feasible set. At an
//! equilibrium these problems reproduce the clearing conditions of the
//! coupled markets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, PtdfMatrix};
use crate::participants::Penalty;
use crate::qp::{solve_qp, QpProblem};

use super::energy::injection_terms;
use super::CapacityCoupling;

/// Adds `penalty.value(expr)` to a maximization objective held as a
/// minimization QP, introducing an auxiliary variable when the term is
/// quadratic.
fn add_term(qp: &mut QpProblem, expr: &[(usize, f64)], penalty: Penalty) {
    if penalty.quad > 0.0 {
        let v = qp.add_var(penalty.quad, -penalty.lin, f64::NEG_INFINITY, f64::INFINITY);
        let mut coefs = vec![(v, 1.0)];
        coefs.extend(expr.iter().map(|&(j, a)| (j, -a)));
        qp.add_eq(coefs, 0.0);
    } else if penalty.lin != 0.0 {
        for &(j, a) in expr {
            qp.lin[j] -= penalty.lin * a;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyOperatorTerms {
    /// Per zone and step, on `sum(ghat) - curtailment - net_position`.
    pub energy: Vec<Vec<Penalty>>,
    /// Per multi-node zone and step, on `-sum(ghat)`.
    pub generation: Vec<Vec<Penalty>>,
    /// Per multi-node zone, on `-sum(yhat)`.
    pub allocation: Vec<Penalty>,
    /// Per node of a multi-node zone, on `yhat`.
    pub firm: Vec<Penalty>,
    pub max_nodal_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyOperatorDecision {
    /// `[zone][step]`
    pub net_positions: Vec<Vec<f64>>,
    pub curtailment: Vec<Vec<f64>>,
    /// `[node][step]`, zero for nodes of single-node zones.
    pub nodal_dispatch: Vec<Vec<f64>>,
    pub nodal_caps: Vec<f64>,
}

impl EnergyOperatorDecision {
    pub fn energy_contribution(&self, network: &Network, z: usize, t: usize) -> f64 {
        let gen: f64 = if network.zone_nodes(z).len() > 1 {
            network.zone_nodes(z).iter().map(|&n| self.nodal_dispatch[n][t]).sum()
        } else {
            0.0
        };
        gen - self.curtailment[z][t] - self.net_positions[z][t]
    }

    pub fn zonal_dispatch(&self, network: &Network, z: usize, t: usize) -> f64 {
        network.zone_nodes(z).iter().map(|&n| self.nodal_dispatch[n][t]).sum()
    }

    pub fn zonal_caps(&self, network: &Network, z: usize) -> f64 {
        network.zone_nodes(z).iter().map(|&n| self.nodal_caps[n]).sum()
    }
}

/// Value of the energy operator's contributions under the given terms.
pub fn energy_operator_objective(network: &Network, terms: &EnergyOperatorTerms, d: &EnergyOperatorDecision) -> f64 {
    let steps = d.curtailment.first().map_or(0, Vec::len);
    let mut v = 0.0;
    for z in 0..network.num_zones() {
        let multi = network.zone_nodes(z).len() > 1;
        for t in 0..steps {
            v += terms.energy[z][t].value(d.energy_contribution(network, z, t));
            if multi {
                v += terms.generation[z][t].value(-d.zonal_dispatch(network, z, t));
            }
        }
        if multi {
            v += terms.allocation[z].value(-d.zonal_caps(network, z));
            for &n in network.zone_nodes(z) {
                v += terms.firm[n].value(d.nodal_caps[n]);
            }
        }
    }
    v
}

/// Best response of the energy market operator: zonal net positions inside
/// the flow-based domain, renewable curtailment, and the auxiliary nodal
/// dispatch and capacity allocation of multi-node zones.
pub fn energy_operator_best_response(
    network: &Network,
    ptdf: &PtdfMatrix,
    renewables: &[Vec<f64>],
    terms: &EnergyOperatorTerms,
) -> Result<EnergyOperatorDecision> {
    let nz = network.num_zones();
    let nn = network.num_nodes();
    let steps = renewables.first().map_or(0, Vec::len);
    if renewables.len() != nz || terms.energy.len() != nz || terms.generation.len() != nz {
        return Err(Error::Dimension {
            what: "energy operator zones",
            expected: nz,
            got: renewables.len().min(terms.energy.len()),
        });
    }
    if terms.allocation.len() != nz || terms.firm.len() != nn {
        return Err(Error::Dimension {
            what: "energy operator terms",
            expected: nn,
            got: terms.firm.len(),
        });
    }
    let multi: Vec<bool> = (0..nz).map(|z| network.zone_nodes(z).len() > 1).collect();
    let mut qp = QpProblem::new();
    let cap = terms.max_nodal_cap;
    let yhat: Vec<Option<usize>> = (0..nn)
        .map(|n| multi[network.zone_of(n)].then(|| qp.add_var(0.0, 0.0, 0.0, cap)))
        .collect();
    let mut np = vec![vec![0; steps]; nz];
    let mut curt = vec![vec![0; steps]; nz];
    let mut ghat = vec![vec![None; steps]; nn];
    for t in 0..steps {
        let np_t: Vec<usize> = (0..nz)
            .map(|_| qp.add_var(0.0, 0.0, f64::NEG_INFINITY, f64::INFINITY))
            .collect();
        let g_t: Vec<Option<usize>> = (0..nn)
            .map(|n| yhat[n].map(|_| qp.add_var(0.0, 0.0, 0.0, cap)))
            .collect();
        for z in 0..nz {
            np[z][t] = np_t[z];
            curt[z][t] = qp.add_var(0.0, 0.0, 0.0, renewables[z][t].max(0.0));
        }
        for n in 0..nn {
            ghat[n][t] = g_t[n];
            if let (Some(g), Some(y)) = (g_t[n], yhat[n]) {
                qp.add_row(vec![(g, 1.0), (y, -1.0)], f64::NEG_INFINITY, 0.0);
            }
        }
        qp.add_eq(np_t.iter().map(|&j| (j, 1.0)).collect(), 0.0);
        let injection = injection_terms(network, &np_t, &g_t);
        for (l, line) in network.lines().iter().enumerate() {
            let mut coefs = Vec::new();
            for (n, inj) in injection.iter().enumerate() {
                let p = ptdf.get(l, n);
                if p != 0.0 {
                    coefs.extend(inj.iter().map(|&(j, a)| (j, p * a)));
                }
            }
            qp.add_row(coefs, -line.f_max, line.f_max);
        }
        for z in 0..nz {
            let mut expr = vec![(curt[z][t], -1.0), (np[z][t], -1.0)];
            if multi[z] {
                let gens: Vec<(usize, f64)> = network
                    .zone_nodes(z)
                    .iter()
                    .map(|&n| (g_t[n].unwrap(), 1.0))
                    .collect();
                expr.extend(gens.iter().copied());
                let neg: Vec<(usize, f64)> = gens.iter().map(|&(j, _)| (j, -1.0)).collect();
                add_term(&mut qp, &neg, terms.generation[z][t]);
            }
            add_term(&mut qp, &expr, terms.energy[z][t]);
        }
    }
    for z in (0..nz).filter(|&z| multi[z]) {
        let expr: Vec<(usize, f64)> = network
            .zone_nodes(z)
            .iter()
            .map(|&n| (yhat[n].unwrap(), -1.0))
            .collect();
        add_term(&mut qp, &expr, terms.allocation[z]);
        for &n in network.zone_nodes(z) {
            add_term(&mut qp, &[(yhat[n].unwrap(), 1.0)], terms.firm[n]);
        }
    }

    let sol = solve_qp(&qp)?;
    let x = &sol.x;
    let read = |j: usize| x[j];
    Ok(EnergyOperatorDecision {
        net_positions: np.iter().map(|row| row.iter().map(|&j| read(j)).collect()).collect(),
        curtailment: curt
            .iter()
            .enumerate()
            .map(|(z, row)| {
                row.iter()
                    .enumerate()
                    .map(|(t, &j)| read(j).clamp(0.0, renewables[z][t].max(0.0)))
                    .collect()
            })
            .collect(),
        nodal_dispatch: ghat
            .iter()
            .map(|row| row.iter().map(|j| j.map_or(0.0, |j| read(j).max(0.0))).collect())
            .collect(),
        nodal_caps: yhat.iter().map(|j| j.map_or(0.0, |j| read(j).max(0.0))).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CapacityOperatorTerms {
    /// Per zone, on `-net_obligation`.
    pub capacity: Vec<Penalty>,
    /// Per zone, on `-sum(nodal_allocation)` (flow-based coupling only).
    pub allocation: Vec<Penalty>,
    /// Per node of a multi-node zone, on `-nodal_allocation` (flow-based only).
    pub firm: Vec<Penalty>,
    pub max_nodal_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CapacityOperatorDecision {
    pub net_obligation: Vec<f64>,
    pub nodal_allocation: Vec<f64>,
    /// `[scenario][node]`
    pub scarcity_dispatch: Vec<Vec<f64>>,
    pub exchanges: Vec<f64>,
}

impl CapacityOperatorDecision {
    pub fn zonal_allocation(&self, network: &Network, z: usize) -> f64 {
        network
            .zone_nodes(z)
            .iter()
            .map(|&n| self.nodal_allocation.get(n).copied().unwrap_or(0.0))
            .sum()
    }
}

pub fn capacity_operator_objective(
    network: &Network,
    coupling: &CapacityCoupling,
    terms: &CapacityOperatorTerms,
    d: &CapacityOperatorDecision,
) -> f64 {
    let mut v: f64 = (0..network.num_zones())
        .map(|z| terms.capacity[z].value(-d.net_obligation[z]))
        .sum();
    if matches!(coupling, CapacityCoupling::FlowBased { .. }) {
        for z in 0..network.num_zones() {
            v += terms.allocation[z].value(-d.zonal_allocation(network, z));
            if network.zone_nodes(z).len() > 1 {
                for &n in network.zone_nodes(z) {
                    v += terms.firm[n].value(-d.nodal_allocation[n]);
                }
            }
        }
    }
    v
}

/// Best response of the capacity market operator for a coupled design.
pub fn capacity_operator_best_response(
    network: &Network,
    ptdf: &PtdfMatrix,
    coupling: &CapacityCoupling,
    terms: &CapacityOperatorTerms,
) -> Result<CapacityOperatorDecision> {
    let nz = network.num_zones();
    let nn = network.num_nodes();
    if terms.capacity.len() != nz {
        return Err(Error::Dimension {
            what: "capacity operator terms",
            expected: nz,
            got: terms.capacity.len(),
        });
    }
    let mut qp = QpProblem::new();
    match coupling {
        CapacityCoupling::Isolated => Ok(CapacityOperatorDecision {
            net_obligation: vec![0.0; nz],
            ..Default::default()
        }),
        CapacityCoupling::Ntc { ntc, .. } => {
            let borders = ntc.border_indices(network)?;
            let e: Vec<usize> = (0..borders.len())
                .map(|b| qp.add_var(0.0, 0.0, -ntc.atc_minus[b], ntc.atc_plus[b]))
                .collect();
            for z in 0..nz {
                let expr: Vec<(usize, f64)> = borders
                    .iter()
                    .zip(&e)
                    .filter_map(|(&(za, zb), &j)| {
                        if za == z {
                            Some((j, -1.0))
                        } else if zb == z {
                            Some((j, 1.0))
                        } else {
                            None
                        }
                    })
                    .collect();
                add_term(&mut qp, &expr, terms.capacity[z]);
            }
            let sol = solve_qp(&qp)?;
            let exchanges: Vec<f64> = e.iter().map(|&j| sol.x[j]).collect();
            Ok(CapacityOperatorDecision {
                net_obligation: ntc.net_positions(network, &exchanges)?,
                exchanges,
                ..Default::default()
            })
        }
        CapacityCoupling::FlowBased { scenarios } => {
            if terms.allocation.len() != nz || terms.firm.len() != nn {
                return Err(Error::Dimension {
                    what: "capacity operator terms",
                    expected: nn,
                    got: terms.firm.len(),
                });
            }
            let cap = terms.max_nodal_cap;
            let p: Vec<usize> = (0..nz)
                .map(|_| qp.add_var(0.0, 0.0, f64::NEG_INFINITY, f64::INFINITY))
                .collect();
            let yr: Vec<usize> = (0..nn).map(|_| qp.add_var(0.0, 0.0, 0.0, cap)).collect();
            qp.add_eq(p.iter().map(|&j| (j, 1.0)).collect(), 0.0);
            let mut gsc = Vec::with_capacity(scenarios.len());
            for sc in scenarios {
                let d = &sc.nodal_capacity_demand;
                let g: Vec<usize> = (0..nn).map(|_| qp.add_var(0.0, 0.0, 0.0, cap)).collect();
                for n in 0..nn {
                    qp.add_row(vec![(g[n], 1.0), (yr[n], -1.0)], f64::NEG_INFINITY, 0.0);
                }
                for z in 0..nz {
                    let mut coefs = vec![(p[z], 1.0)];
                    coefs.extend(network.zone_nodes(z).iter().map(|&n| (g[n], -1.0)));
                    let dz: f64 = network.zone_nodes(z).iter().map(|&n| d[n]).sum();
                    qp.add_row(coefs, f64::NEG_INFINITY, -dz);
                }
                let total: f64 = d.iter().sum();
                qp.add_eq(g.iter().map(|&j| (j, 1.0)).collect(), total);
                for (l, line) in network.lines().iter().enumerate() {
                    let offset: f64 = (0..nn).map(|n| ptdf.get(l, n) * d[n]).sum();
                    let coefs = (0..nn)
                        .filter(|&n| ptdf.get(l, n) != 0.0)
                        .map(|n| (g[n], ptdf.get(l, n)))
                        .collect();
                    qp.add_row(coefs, -line.f_max + offset, line.f_max + offset);
                }
                gsc.push(g);
            }
            for z in 0..nz {
                add_term(&mut qp, &[(p[z], -1.0)], terms.capacity[z]);
                let alloc: Vec<(usize, f64)> = network.zone_nodes(z).iter().map(|&n| (yr[n], -1.0)).collect();
                add_term(&mut qp, &alloc, terms.allocation[z]);
                if network.zone_nodes(z).len() > 1 {
                    for &n in network.zone_nodes(z) {
                        add_term(&mut qp, &[(yr[n], -1.0)], terms.firm[n]);
                    }
                }
            }
            let sol = solve_qp(&qp)?;
            let x = &sol.x;
            Ok(CapacityOperatorDecision {
                net_obligation: p.iter().map(|&j| x[j]).collect(),
                nodal_allocation: yr.iter().map(|&j| x[j].max(0.0)).collect(),
                scarcity_dispatch: gsc
                    .iter()
                    .map(|g| g.iter().map(|&j| x[j].max(0.0)).collect())
                    .collect(),
                exchanges: Vec::new(),
            })
        }
    }
}
