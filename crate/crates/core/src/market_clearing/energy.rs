//! Single-step energy market clearing with flow-based coupling through an
//! auxiliary nodal dispatch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, PtdfMatrix};
use crate::qp::{solve_qp, QpProblem};

use super::EnergyStep;

/// Quadratic supply schedule of one generator for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupplyOffer {
    pub zone: usize,
    /// Available output in MW.
    pub available: f64,
    pub a_quad: f64,
    pub b_lin: f64,
}

/// Zonal demand schedule for one step: inelastic block plus linear elastic block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandBid {
    pub zone: usize,
    pub reference: f64,
    pub elastic_share: f64,
    pub wtp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyStepClearing {
    pub step: EnergyStep,
    pub dispatch: Vec<f64>,
    pub demand: Vec<f64>,
    pub ens: Vec<f64>,
}

/// Clear one timestep of the coupled zonal energy markets.
///
/// `installed` is the conventional capacity per zone that the operator may
/// allocate over the zone's nodes; prices lie in `[0, price_cap]` and reach
/// the cap only when inelastic demand is rationed.
pub fn clear_energy_market_step(
    offers: &[SupplyOffer],
    bids: &[DemandBid],
    renewables: &[f64],
    network: &Network,
    ptdf: &PtdfMatrix,
    installed: &[f64],
    price_cap: f64,
) -> Result<EnergyStepClearing> {
    let nz = network.num_zones();
    let nn = network.num_nodes();
    if !(price_cap > 0.0) {
        return Err(Error::InvalidParameter("price cap must be positive".into()));
    }
    if renewables.len() != nz || installed.len() != nz {
        return Err(Error::Dimension {
            what: "zonal step data",
            expected: nz,
            got: renewables.len().min(installed.len()),
        });
    }
    for (z, y) in installed.iter().enumerate() {
        if !(*y >= 0.0) {
            return Err(Error::NodalAllocation {
                zone: network.zones()[z].clone(),
            });
        }
    }

    let mut qp = QpProblem::new();
    let g: Vec<usize> = offers
        .iter()
        .map(|o| qp.add_var(o.a_quad, o.b_lin, 0.0, o.available.max(0.0)))
        .collect();
    let mut reference = vec![0.0; nz];
    let mut elastic_cap = vec![0.0; nz];
    let mut wtp = vec![price_cap; nz];
    for b in bids {
        reference[b.zone] += b.reference;
        elastic_cap[b.zone] += b.elastic_share * b.reference;
        wtp[b.zone] = b.wtp;
    }
    let mut de = Vec::with_capacity(nz);
    let mut ens = Vec::with_capacity(nz);
    let mut curt = Vec::with_capacity(nz);
    let mut np = Vec::with_capacity(nz);
    for z in 0..nz {
        let e = elastic_cap[z];
        de.push(if e > 0.0 {
            qp.add_var(wtp[z] / e, -wtp[z], 0.0, e)
        } else {
            qp.add_var(0.0, 0.0, 0.0, 0.0)
        });
        ens.push(qp.add_var(0.0, wtp[z].min(price_cap), 0.0, reference[z] - e));
        curt.push(qp.add_var(0.0, 0.0, 0.0, renewables[z].max(0.0)));
        np.push(qp.add_var(0.0, 0.0, f64::NEG_INFINITY, f64::INFINITY));
    }
    let multi: Vec<bool> = (0..nz).map(|z| network.zone_nodes(z).len() > 1).collect();
    let mut ghat = vec![None; nn];
    let mut yhat = vec![None; nn];
    for z in (0..nz).filter(|&z| multi[z]) {
        for &n in network.zone_nodes(z) {
            ghat[n] = Some(qp.add_var(0.0, 0.0, 0.0, f64::INFINITY));
            yhat[n] = Some(qp.add_var(0.0, 0.0, 0.0, f64::INFINITY));
        }
    }

    let mut balance_rows = Vec::with_capacity(nz);
    for z in 0..nz {
        let mut coefs = vec![(curt[z], -1.0), (ens[z], 1.0), (de[z], -1.0), (np[z], -1.0)];
        if multi[z] {
            coefs.extend(network.zone_nodes(z).iter().map(|&n| (ghat[n].unwrap(), 1.0)));
        } else {
            coefs.extend(offers.iter().zip(&g).filter(|(o, _)| o.zone == z).map(|(_, &j)| (j, 1.0)));
        }
        let inelastic = reference[z] - elastic_cap[z];
        balance_rows.push(qp.add_eq(coefs, inelastic - renewables[z]));
    }
    let mut zone_rows = Vec::new();
    for z in (0..nz).filter(|&z| multi[z]) {
        let mut coefs: Vec<(usize, f64)> = offers
            .iter()
            .zip(&g)
            .filter(|(o, _)| o.zone == z)
            .map(|(_, &j)| (j, 1.0))
            .collect();
        coefs.extend(network.zone_nodes(z).iter().map(|&n| (ghat[n].unwrap(), -1.0)));
        zone_rows.push((qp.add_eq(coefs, 0.0), z));
        for &n in network.zone_nodes(z) {
            zone_rows.push((
                qp.add_row(vec![(ghat[n].unwrap(), 1.0), (yhat[n].unwrap(), -1.0)], f64::NEG_INFINITY, 0.0),
                z,
            ));
        }
        let alloc = network.zone_nodes(z).iter().map(|&n| (yhat[n].unwrap(), 1.0)).collect();
        zone_rows.push((qp.add_eq(alloc, installed[z]), z));
    }
    qp.add_eq(np.iter().map(|&j| (j, 1.0)).collect(), 0.0);
    let injection = injection_terms(network, &np, &ghat);
    for (l, line) in network.lines().iter().enumerate() {
        let mut coefs = Vec::new();
        for (n, terms) in injection.iter().enumerate() {
            let p = ptdf.get(l, n);
            if p != 0.0 {
                coefs.extend(terms.iter().map(|&(j, a)| (j, p * a)));
            }
        }
        qp.add_row(coefs, -line.f_max, line.f_max);
    }

    let sol = match solve_qp(&qp) {
        Ok(s) => s,
        Err(Error::Infeasible { rows, .. }) => {
            let zone = rows
                .iter()
                .find_map(|r| zone_rows.iter().find(|(zr, _)| zr == r).map(|(_, z)| *z))
                .unwrap_or(0);
            return Err(Error::NodalAllocation {
                zone: network.zones()[zone].clone(),
            });
        }
        Err(e) => return Err(e),
    };
    let x = &sol.x;

    let prices: Vec<f64> = balance_rows.iter().map(|&r| sol.row_duals[r].clamp(0.0, price_cap)).collect();
    let net_positions: Vec<f64> = np.iter().map(|&j| x[j]).collect();
    let dispatch: Vec<f64> = g.iter().map(|&j| x[j]).collect();
    let demand: Vec<f64> = (0..nz)
        .map(|z| reference[z] - elastic_cap[z] - x[ens[z]] + x[de[z]])
        .collect();
    let curtailment: Vec<f64> = curt.iter().map(|&j| x[j]).collect();
    let mut zonal_gen = vec![0.0; nz];
    for (o, v) in offers.iter().zip(&dispatch) {
        zonal_gen[o.zone] += v;
    }
    let mut nodal_dispatch = vec![0.0; nn];
    let mut nodal_demand = vec![0.0; nn];
    for n in 0..nn {
        let z = network.zone_of(n);
        let net_load = demand[z] - renewables[z] + curtailment[z];
        nodal_dispatch[n] = match ghat[n] {
            Some(j) => x[j],
            None => zonal_gen[z],
        };
        nodal_demand[n] = network.demand_share(n) * net_load;
    }
    let nodal_injections: Vec<f64> = nodal_dispatch.iter().zip(&nodal_demand).map(|(g, d)| g - d).collect();
    let flows = ptdf.flows_unchecked(&nodal_injections);
    Ok(EnergyStepClearing {
        step: EnergyStep {
            prices,
            net_positions,
            flows,
            nodal_dispatch,
            nodal_injections,
            nodal_demand,
            curtailment,
        },
        dispatch,
        demand,
        ens: ens.iter().map(|&j| x[j]).collect(),
    })
}

/// Nodal injection of each node as a linear combination of zonal net
/// positions and auxiliary nodal dispatch. In a multi-node zone the net load
/// `sum(ghat) - NP` is spread over nodes with the demand shares.
pub(crate) fn injection_terms(network: &Network, np: &[usize], ghat: &[Option<usize>]) -> Vec<Vec<(usize, f64)>> {
    (0..network.num_nodes())
        .map(|n| {
            let z = network.zone_of(n);
            let members = network.zone_nodes(z);
            if members.len() == 1 {
                return vec![(np[z], 1.0)];
            }
            let share = network.demand_share(n);
            let mut terms = vec![(np[z], share)];
            for &m in members {
                let own = if m == n { 1.0 } else { 0.0 };
                terms.push((ghat[m].expect("multi-node zones carry nodal dispatch"), own - share));
            }
            terms
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_ptdf, Line};

    fn two_zone(f_max: f64) -> Network {
        Network::new(
            vec!["a".into(), "b".into()],
            vec!["A".into(), "B".into()],
            vec![0, 1],
            vec![Line {
                id: "ab".into(),
                from: 0,
                to: 1,
                susceptance: 1.0,
                f_max,
            }],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    fn offers(b_a: f64, b_b: f64) -> Vec<SupplyOffer> {
        vec![
            SupplyOffer {
                zone: 0,
                available: 10_000.0,
                a_quad: 0.01,
                b_lin: b_a,
            },
            SupplyOffer {
                zone: 1,
                available: 10_000.0,
                a_quad: 0.01,
                b_lin: b_b,
            },
        ]
    }

    fn bids(d: f64) -> Vec<DemandBid> {
        (0..2)
            .map(|z| DemandBid {
                zone: z,
                reference: d,
                elastic_share: 0.2,
                wtp: 20_000.0,
            })
            .collect()
    }

    #[test]
    fn uncongested_single_price() {
        let net = two_zone(1e5);
        let ptdf = build_ptdf(&net, 0).unwrap();
        let out = clear_energy_market_step(&offers(20.0, 50.0), &bids(3_000.0), &[0.0, 0.0], &net, &ptdf, &[1e4, 1e4], 4_000.0)
            .unwrap();
        let p = &out.step.prices;
        assert!((p[0] - p[1]).abs() < 1e-4 * p[0], "{p:?}");
        assert!(out.step.net_positions[0] > 0.0);
        // both generators at the common marginal cost
        assert!((0.01 * out.dispatch[0] + 20.0 - p[0]).abs() < 1e-3);
    }

    #[test]
    fn congested_border_splits_prices() {
        let net = two_zone(500.0);
        let ptdf = build_ptdf(&net, 0).unwrap();
        let out = clear_energy_market_step(&offers(20.0, 50.0), &bids(3_000.0), &[0.0, 0.0], &net, &ptdf, &[1e4, 1e4], 4_000.0)
            .unwrap();
        let p = &out.step.prices;
        assert!((out.step.net_positions[0] - 500.0).abs() < 1e-4);
        // exporter price equals its marginal cost, importer higher
        assert!((0.01 * out.dispatch[0] + 20.0 - p[0]).abs() < 1e-3);
        assert!(p[1] > p[0] + 1.0);
        let rent = -(p[0] * out.step.net_positions[0] + p[1] * out.step.net_positions[1]);
        assert!(rent > 0.0);
        assert!((rent - (p[1] - p[0]) * 500.0).abs() < 1e-3 * rent);
    }

    #[test]
    fn capped_scarcity_hits_cap() {
        let net = two_zone(1e5);
        let ptdf = build_ptdf(&net, 0).unwrap();
        let mut small = offers(90.0, 90.0);
        for o in &mut small {
            o.available = 1_000.0;
        }
        let out = clear_energy_market_step(&small, &bids(3_000.0), &[0.0, 0.0], &net, &ptdf, &[1e4, 1e4], 4_000.0).unwrap();
        for (z, p) in out.step.prices.iter().enumerate() {
            assert!((p - 4_000.0).abs() < 1e-3, "{p}");
            assert!(out.ens[z] > 0.0);
        }
    }
}
