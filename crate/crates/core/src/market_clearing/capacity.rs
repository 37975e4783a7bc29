//! Annual capacity auctions: isolated zonal clearing, flow-based coupling
//! with scarcity deliverability, and NTC-bounded bilateral trade.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NtcBox, PtdfMatrix};
use crate::qp::{solve_qp, QpProblem};

use super::{CapacityMarketOutcome, ScarcityScenario};

/// A price-quantity capacity offer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityOffer {
    pub zone: usize,
    pub quantity: f64,
    /// EUR/MW-year.
    pub price: f64,
}

fn check_inputs(offers: &[CapacityOffer], demand: &[f64], nz: usize) -> Result<()> {
    if demand.len() != nz {
        return Err(Error::Dimension {
            what: "capacity demand",
            expected: nz,
            got: demand.len(),
        });
    }
    for o in offers {
        if o.zone >= nz || !(o.quantity >= 0.0) || !o.price.is_finite() {
            return Err(Error::InvalidParameter(format!("malformed capacity offer {o:?}")));
        }
    }
    Ok(())
}

/// Zonal merit-order clearing without cross-border participation. The price
/// is the offer price of the last accepted MW.
pub fn clear_capacity_market_nocbp(
    offers: &[CapacityOffer],
    demand: &[f64],
    zonal_caps: &[f64],
) -> Result<CapacityMarketOutcome> {
    let nz = demand.len();
    check_inputs(offers, demand, nz)?;
    let mut out = CapacityMarketOutcome {
        prices: vec![0.0; nz],
        zonal_demand: demand.to_vec(),
        cleared_offers: vec![0.0; offers.len()],
        zonal_cleared: vec![0.0; nz],
        net_obligation: vec![0.0; nz],
        ..Default::default()
    };
    for z in 0..nz {
        let mut order: Vec<usize> = (0..offers.len()).filter(|&i| offers[i].zone == z).collect();
        order.sort_by(|&a, &b| offers[a].price.total_cmp(&offers[b].price).then(a.cmp(&b)));
        let cap = zonal_caps.get(z).copied().unwrap_or(f64::INFINITY);
        let mut remaining = demand[z];
        for i in order {
            if remaining <= 0.0 {
                break;
            }
            let take = offers[i].quantity.min(remaining).min(cap - out.zonal_cleared[z]);
            if take <= 0.0 {
                continue;
            }
            out.cleared_offers[i] = take;
            out.zonal_cleared[z] += take;
            out.prices[z] = offers[i].price.max(0.0);
            remaining -= take;
        }
        if remaining > 1e-9 * demand[z].max(1.0) {
            return Err(Error::CapacityInfeasible(format!(
                "zone {z} lacks {remaining:.3} MW of offers to meet its demand"
            )));
        }
    }
    Ok(out)
}

struct Auction {
    qp: QpProblem,
    names: Vec<String>,
    offers: Vec<usize>,
    /// Rows whose duals add up to the price a cleared MW earns in each zone.
    price_rows: Vec<Vec<(usize, f64)>>,
}

impl Auction {
    fn new(offers: &[CapacityOffer]) -> Self {
        let mut qp = QpProblem::new();
        let vars = offers.iter().map(|o| qp.add_var(0.0, o.price, 0.0, o.quantity)).collect();
        Auction {
            qp,
            names: Vec::new(),
            offers: vars,
            price_rows: Vec::new(),
        }
    }

    fn row(&mut self, name: String, coefs: Vec<(usize, f64)>, lo: f64, hi: f64) -> usize {
        self.names.push(name);
        self.qp.add_row(coefs, lo, hi)
    }

    fn zone_offers(&self, offers: &[CapacityOffer], z: usize) -> Vec<(usize, f64)> {
        offers
            .iter()
            .zip(&self.offers)
            .filter(|(o, _)| o.zone == z)
            .map(|(_, &j)| (j, 1.0))
            .collect()
    }

    fn solve(&self) -> Result<crate::qp::QpSolution> {
        solve_qp(&self.qp).map_err(|e| match e {
            Error::Infeasible { rows, .. } => {
                let binding: Vec<&str> = rows.iter().filter_map(|&r| self.names.get(r)).map(String::as_str).collect();
                Error::CapacityInfeasible(format!("insufficient deliverable capacity; binding: {}", binding.join(", ")))
            }
            other => other,
        })
    }
}

/// Flow-based coupled capacity auction.
///
/// Zonal prices are the value of one more cleared MW in the zone: the dual
/// of the zonal clearing row net of the nodal allocation row. When a zonal
/// scarcity scenario coincides with the zonal demand the two rows are
/// parallel and only their combination is unique. Cleared firm capacity must admit, in
/// every scarcity scenario, a nodal dispatch within the nodal allocation that
/// meets nodal capacity demand and respects every line limit.
pub fn clear_capacity_market_fbmc(
    offers: &[CapacityOffer],
    demand: &[f64],
    scenarios: &[ScarcityScenario],
    network: &Network,
    ptdf: &PtdfMatrix,
    nodal_caps: &[f64],
) -> Result<CapacityMarketOutcome> {
    let nz = network.num_zones();
    let nn = network.num_nodes();
    check_inputs(offers, demand, nz)?;
    if scenarios.is_empty() {
        return Err(Error::InvalidParameter("flow-based clearing needs scarcity scenarios".into()));
    }
    if nodal_caps.len() != nn {
        return Err(Error::Dimension {
            what: "nodal caps",
            expected: nn,
            got: nodal_caps.len(),
        });
    }
    let mut a = Auction::new(offers);
    let p: Vec<usize> = (0..nz)
        .map(|_| a.qp.add_var(0.0, 0.0, f64::NEG_INFINITY, f64::INFINITY))
        .collect();
    let yr: Vec<usize> = (0..nn).map(|n| a.qp.add_var(0.0, 0.0, 0.0, nodal_caps[n].max(0.0))).collect();
    for z in 0..nz {
        let mut coefs = a.zone_offers(offers, z);
        coefs.push((p[z], -1.0));
        let r = a.row(format!("clearing {}", network.zones()[z]), coefs, demand[z], f64::INFINITY);
        let mut alloc: Vec<(usize, f64)> = network.zone_nodes(z).iter().map(|&n| (yr[n], 1.0)).collect();
        alloc.extend(a.zone_offers(offers, z).into_iter().map(|(j, _)| (j, -1.0)));
        let ra = a.row(format!("allocation {}", network.zones()[z]), alloc, 0.0, 0.0);
        a.price_rows.push(vec![(r, 1.0), (ra, -1.0)]);
    }
    a.row("obligation balance".into(), p.iter().map(|&j| (j, 1.0)).collect(), 0.0, 0.0);
    let mut gsc = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let d = &sc.nodal_capacity_demand;
        if d.len() != nn {
            return Err(Error::Dimension {
                what: "scenario nodal demand",
                expected: nn,
                got: d.len(),
            });
        }
        let g: Vec<usize> = (0..nn).map(|_| a.qp.add_var(0.0, 0.0, 0.0, f64::INFINITY)).collect();
        for n in 0..nn {
            a.row(
                format!("{} node {} firm limit", sc.id, network.nodes()[n]),
                vec![(g[n], 1.0), (yr[n], -1.0)],
                f64::NEG_INFINITY,
                0.0,
            );
        }
        for z in 0..nz {
            let mut coefs = vec![(p[z], 1.0)];
            coefs.extend(network.zone_nodes(z).iter().map(|&n| (g[n], -1.0)));
            let dz: f64 = network.zone_nodes(z).iter().map(|&n| d[n]).sum();
            a.row(
                format!("{} zone {} deliverability", sc.id, network.zones()[z]),
                coefs,
                f64::NEG_INFINITY,
                -dz,
            );
        }
        a.row(
            format!("{} balance", sc.id),
            g.iter().map(|&j| (j, 1.0)).collect(),
            d.iter().sum(),
            d.iter().sum(),
        );
        for (l, line) in network.lines().iter().enumerate() {
            let offset: f64 = (0..nn).map(|n| ptdf.get(l, n) * d[n]).sum();
            let coefs = (0..nn)
                .filter(|&n| ptdf.get(l, n) != 0.0)
                .map(|n| (g[n], ptdf.get(l, n)))
                .collect();
            a.row(
                format!("{} line {}", sc.id, line.id),
                coefs,
                -line.f_max + offset,
                line.f_max + offset,
            );
        }
        gsc.push(g);
    }
    let sol = a.solve()?;
    let x = &sol.x;
    let mut out = finish(offers, demand, &a, &sol.row_duals, x, nz);
    out.net_obligation = p.iter().map(|&j| x[j]).collect();
    out.nodal_allocation = yr.iter().map(|&j| x[j]).collect();
    for (sc, g) in scenarios.iter().zip(&gsc) {
        let dispatch: Vec<f64> = g.iter().map(|&j| x[j]).collect();
        let inj: Vec<f64> = dispatch.iter().zip(&sc.nodal_capacity_demand).map(|(g, d)| g - d).collect();
        out.scarcity_flows.push(ptdf.flows_unchecked(&inj));
        out.scarcity_dispatch.push(dispatch);
        out.scarcity_injections.push(inj);
    }
    Ok(out)
}

/// NTC-coupled capacity auction: bilateral exchanges within the box and
/// zonal deliverability in every scenario.
pub fn clear_capacity_market_ntc(
    offers: &[CapacityOffer],
    demand: &[f64],
    scenarios: &[ScarcityScenario],
    ntc: &NtcBox,
    network: &Network,
    zonal_caps: &[f64],
) -> Result<CapacityMarketOutcome> {
    let nz = network.num_zones();
    check_inputs(offers, demand, nz)?;
    let borders = ntc.border_indices(network)?;
    let mut a = Auction::new(offers);
    let e: Vec<usize> = (0..borders.len())
        .map(|b| a.qp.add_var(0.0, 0.0, -ntc.atc_minus[b], ntc.atc_plus[b]))
        .collect();
    let net_terms = |z: usize| -> Vec<(usize, f64)> {
        borders
            .iter()
            .zip(&e)
            .filter_map(|(&(za, zb), &j)| {
                if za == z {
                    Some((j, 1.0))
                } else if zb == z {
                    Some((j, -1.0))
                } else {
                    None
                }
            })
            .collect()
    };
    for z in 0..nz {
        let mut coefs = a.zone_offers(offers, z);
        coefs.extend(net_terms(z).into_iter().map(|(j, c)| (j, -c)));
        let r = a.row(format!("clearing {}", network.zones()[z]), coefs.clone(), demand[z], f64::INFINITY);
        let mut price_rows = vec![(r, 1.0)];
        for sc in scenarios {
            let dz = sc.zonal_demand(network)[z];
            let rs = a.row(
                format!("{} zone {} deliverability", sc.id, network.zones()[z]),
                coefs.clone(),
                dz,
                f64::INFINITY,
            );
            price_rows.push((rs, 1.0));
        }
        a.price_rows.push(price_rows);
        if let Some(&cap) = zonal_caps.get(z) {
            if cap.is_finite() {
                a.row(format!("zonal cap {}", network.zones()[z]), a.zone_offers(offers, z), f64::NEG_INFINITY, cap);
            }
        }
    }
    let sol = a.solve()?;
    let x = &sol.x;
    let mut out = finish(offers, demand, &a, &sol.row_duals, x, nz);
    out.bilateral_exchanges = e.iter().map(|&j| x[j]).collect();
    out.net_obligation = ntc.net_positions(network, &out.bilateral_exchanges)?;
    Ok(out)
}

fn finish(
    offers: &[CapacityOffer],
    demand: &[f64],
    a: &Auction,
    duals: &[f64],
    x: &[f64],
    nz: usize,
) -> CapacityMarketOutcome {
    let cleared: Vec<f64> = a.offers.iter().map(|&j| x[j].max(0.0)).collect();
    let mut zonal = vec![0.0; nz];
    for (o, q) in offers.iter().zip(&cleared) {
        zonal[o.zone] += q;
    }
    CapacityMarketOutcome {
        prices: a
            .price_rows
            .iter()
            .map(|rows| rows.iter().map(|&(r, s)| s * duals[r]).sum::<f64>().max(0.0))
            .collect(),
        zonal_demand: demand.to_vec(),
        cleared_offers: cleared,
        zonal_cleared: zonal,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_clearing::{build_scarcity_scenarios, capacity_revenue_gap, ScarcityRule};
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

    fn peakers() -> Vec<CapacityOffer> {
        [60_000.0, 70_000.0, 80_000.0]
            .iter()
            .enumerate()
            .map(|(z, &p)| CapacityOffer {
                zone: z,
                quantity: 1e5,
                price: p,
            })
            .collect()
    }

    #[test]
    fn nocbp_cone_prices() {
        let out = clear_capacity_market_nocbp(&peakers(), &[19_000.0, 16_000.0, 18_000.0], &[]).unwrap();
        assert_eq!(out.prices, vec![60_000.0, 70_000.0, 80_000.0]);
        let zero = clear_capacity_market_nocbp(&peakers(), &[0.0; 3], &[]).unwrap();
        assert_eq!(zero.prices, vec![0.0; 3]);
        assert!(zero.cleared_offers.iter().all(|q| *q == 0.0));
    }

    #[test]
    fn nocbp_merit_order_exhausts_cheaper_first() {
        let offers = [
            CapacityOffer {
                zone: 0,
                quantity: 100.0,
                price: 50.0,
            },
            CapacityOffer {
                zone: 0,
                quantity: 100.0,
                price: 80.0,
            },
        ];
        let below = clear_capacity_market_nocbp(&offers, &[60.0], &[]).unwrap();
        assert_eq!(below.prices[0], 50.0);
        let above = clear_capacity_market_nocbp(&offers, &[150.0], &[]).unwrap();
        assert_eq!(above.prices[0], 80.0);
        assert_eq!(above.cleared_offers, vec![100.0, 50.0]);
        assert!(clear_capacity_market_nocbp(&offers, &[250.0], &[]).is_err());
    }

    fn two_zone_offers() -> Vec<CapacityOffer> {
        vec![
            CapacityOffer {
                zone: 0,
                quantity: 1e5,
                price: 60_000.0,
            },
            CapacityOffer {
                zone: 1,
                quantity: 1e5,
                price: 60_000.0,
            },
        ]
    }

    #[test]
    fn fbmc_huge_line_single_price() {
        let net = two_zone(1e6);
        let ptdf = build_ptdf(&net, 0).unwrap();
        let demand = [1_000.0, 2_000.0];
        let sc = build_scarcity_scenarios(&net, &demand, &ScarcityRule::default()).unwrap();
        let out = clear_capacity_market_fbmc(&two_zone_offers(), &demand, &sc, &net, &ptdf, &[1e6, 1e6]).unwrap();
        assert!((out.prices[0] - 60_000.0).abs() < 1.0 && (out.prices[1] - 60_000.0).abs() < 1.0);
        assert!((out.zonal_cleared.iter().sum::<f64>() - 3_000.0).abs() < 1e-3);
        assert!(capacity_revenue_gap(&out).abs() < 1e-3 * 60_000.0 * 3_000.0);
    }

    #[test]
    fn fbmc_tiny_line_matches_nocbp() {
        let net = two_zone(1e-6);
        let ptdf = build_ptdf(&net, 0).unwrap();
        let offers = [
            CapacityOffer {
                zone: 0,
                quantity: 1e5,
                price: 60_000.0,
            },
            CapacityOffer {
                zone: 1,
                quantity: 1e5,
                price: 70_000.0,
            },
        ];
        let demand = [1_000.0, 2_000.0];
        let sc = build_scarcity_scenarios(&net, &demand, &ScarcityRule::default()).unwrap();
        let fb = clear_capacity_market_fbmc(&offers, &demand, &sc, &net, &ptdf, &[1e6, 1e6]).unwrap();
        let iso = clear_capacity_market_nocbp(&offers, &demand, &[]).unwrap();
        for z in 0..2 {
            assert!((fb.prices[z] - iso.prices[z]).abs() < 1e-3 * iso.prices[z], "{:?}", fb.prices);
        }
    }

    #[test]
    fn ntc_zero_box_matches_nocbp() {
        let net = two_zone(1_000.0);
        let offers = [
            CapacityOffer {
                zone: 0,
                quantity: 1e5,
                price: 60_000.0,
            },
            CapacityOffer {
                zone: 1,
                quantity: 1e5,
                price: 70_000.0,
            },
        ];
        let demand = [1_000.0, 2_000.0];
        let sc = build_scarcity_scenarios(&net, &demand, &ScarcityRule::default()).unwrap();
        let out = clear_capacity_market_ntc(&offers, &demand, &sc, &NtcBox::zero(&net), &net, &[]).unwrap();
        let iso = clear_capacity_market_nocbp(&offers, &demand, &[]).unwrap();
        for z in 0..2 {
            assert!((out.prices[z] - iso.prices[z]).abs() < 1e-3 * iso.prices[z]);
            assert!((out.zonal_cleared[z] - iso.zonal_cleared[z]).abs() < 1e-3);
        }
    }

    #[test]
    fn fbmc_undeliverable_reports_binding() {
        let net = two_zone(100.0);
        let ptdf = build_ptdf(&net, 0).unwrap();
        let offers = [CapacityOffer {
            zone: 0,
            quantity: 1e5,
            price: 60_000.0,
        }];
        let demand = [0.0, 2_000.0];
        let sc = build_scarcity_scenarios(&net, &demand, &ScarcityRule::default()).unwrap();
        let err = clear_capacity_market_fbmc(&offers, &demand, &sc, &net, &ptdf, &[1e6, 1e6]).unwrap_err();
        assert!(matches!(err, Error::CapacityInfeasible(_)), "{err}");
    }
}
