//! Energy and capacity market clearing: outcome types, scarcity scenarios,
//! capacity demand, standalone clearings and the operators' price-taking
//! problems used inside the equilibrium loop.
//!
//! Net positions (energy) and net capacity obligations are net exports: a
//! zone with `net_position > 0` sells to its neighbours.

pub mod capacity;
pub mod energy;
pub mod operators;

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NtcBox};
use crate::participants::ConsumerBlock;

pub use capacity::{
    clear_capacity_market_fbmc, clear_capacity_market_nocbp, clear_capacity_market_ntc, CapacityOffer,
};
pub use energy::{clear_energy_market_step, DemandBid, SupplyOffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MarketDesign {
    #[serde(rename = "EOM-ref")]
    EomRef,
    #[serde(rename = "EOM-cap")]
    EomCap,
    #[serde(rename = "CM-NoCBP")]
    CmNoCbp,
    #[serde(rename = "CM-FBMC")]
    CmFbmc,
    #[serde(rename = "CM-NTC")]
    CmNtc,
    #[serde(rename = "CM-Implicit")]
    CmImplicit,
}

impl MarketDesign {
    /// All designs in dependency order (flow-based before NTC and implicit).
    pub const ALL: [MarketDesign; 6] = [
        MarketDesign::EomRef,
        MarketDesign::EomCap,
        MarketDesign::CmNoCbp,
        MarketDesign::CmFbmc,
        MarketDesign::CmNtc,
        MarketDesign::CmImplicit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MarketDesign::EomRef => "EOM-ref",
            MarketDesign::EomCap => "EOM-cap",
            MarketDesign::CmNoCbp => "CM-NoCBP",
            MarketDesign::CmFbmc => "CM-FBMC",
            MarketDesign::CmNtc => "CM-NTC",
            MarketDesign::CmImplicit => "CM-Implicit",
        }
    }

    pub fn has_capacity_market(self) -> bool {
        !matches!(self, MarketDesign::EomRef | MarketDesign::EomCap)
    }

    /// Designs that need a prior flow-based capacity market solution.
    pub fn requires_fbmc(self) -> bool {
        matches!(self, MarketDesign::CmNtc | MarketDesign::CmImplicit)
    }

    /// Whether the energy price is capped administratively below the
    /// willingness to pay.
    pub fn is_capped(self) -> bool {
        self != MarketDesign::EomRef
    }
}

impl fmt::Display for MarketDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MarketDesign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MarketDesign::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown market design {s}")))
    }
}

/// Energy market result for one timestep.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyStep {
    /// Zonal prices in EUR/MWh.
    pub prices: Vec<f64>,
    pub net_positions: Vec<f64>,
    pub flows: Vec<f64>,
    pub nodal_dispatch: Vec<f64>,
    pub nodal_injections: Vec<f64>,
    pub nodal_demand: Vec<f64>,
    pub curtailment: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyMarketOutcome {
    pub steps: Vec<EnergyStep>,
    /// Nodal allocation of zonal installed capacity.
    pub nodal_caps: Vec<f64>,
}

impl EnergyMarketOutcome {
    pub fn max_price(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.prices.iter().copied())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScarcityKind {
    Simultaneous,
    /// Critical scarcity in the given zone.
    Zonal(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScarcityScenario {
    pub id: String,
    pub kind: ScarcityKind,
    pub nodal_capacity_demand: Vec<f64>,
}

impl ScarcityScenario {
    pub fn zonal_demand(&self, network: &Network) -> Vec<f64> {
        network.zonal_from_nodal(&self.nodal_capacity_demand)
    }
}

/// Shares of peak residual demand used to build scarcity scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScarcityRule {
    pub simultaneous_share: f64,
    pub zonal_peak_share: f64,
    pub zonal_other_share: f64,
}

impl Default for ScarcityRule {
    fn default() -> Self {
        ScarcityRule {
            simultaneous_share: 0.95,
            zonal_peak_share: 1.0,
            zonal_other_share: 0.90,
        }
    }
}

/// One simultaneous scenario followed by one zonal scenario per zone.
pub fn build_scarcity_scenarios(
    network: &Network,
    peak_residual: &[f64],
    rule: &ScarcityRule,
) -> Result<Vec<ScarcityScenario>> {
    if peak_residual.len() != network.num_zones() {
        return Err(Error::Dimension {
            what: "peak residual demand",
            expected: network.num_zones(),
            got: peak_residual.len(),
        });
    }
    if peak_residual.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::InvalidParameter("peak residual demand must be nonnegative".into()));
    }
    let scale = |shares: Vec<f64>| {
        let zonal: Vec<f64> = shares.iter().zip(peak_residual).map(|(s, p)| s * p).collect();
        network.nodal_from_zonal(&zonal)
    };
    let nz = network.num_zones();
    let mut out = vec![ScarcityScenario {
        id: "simultaneous".into(),
        kind: ScarcityKind::Simultaneous,
        nodal_capacity_demand: scale(vec![rule.simultaneous_share; nz]),
    }];
    for z in 0..nz {
        let shares = (0..nz)
            .map(|k| if k == z { rule.zonal_peak_share } else { rule.zonal_other_share })
            .collect();
        out.push(ScarcityScenario {
            id: format!("zonal-{}", network.zones()[z]),
            kind: ScarcityKind::Zonal(z),
            nodal_capacity_demand: scale(shares),
        });
    }
    Ok(out)
}

/// Peak over time of the zonal residual demand served at `reference_price`.
pub fn peak_residual_demand(consumers: &[ConsumerBlock], renewables: &[Vec<f64>], reference_price: f64) -> Vec<f64> {
    let nz = renewables.len();
    let mut peak = vec![0.0f64; nz];
    for c in consumers {
        for (t, &d) in c.ref_demand.iter().enumerate() {
            let served = (1.0 - c.elastic_share) * d + c.elastic_demand(d, reference_price);
            peak[c.zone] = peak[c.zone].max(served - renewables[c.zone][t]);
        }
    }
    peak
}

/// Administrative zonal demand for firm capacity.
///
/// `reference_price` fixes the elastic block at which residual demand is
/// evaluated. Implicit participation subtracts `expected_imports`, the imports
/// a zone relies on during its own scarcity event.
pub fn compute_capacity_demand(
    design: MarketDesign,
    consumers: &[ConsumerBlock],
    renewables: &[Vec<f64>],
    reference_price: f64,
    expected_imports: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let nz = renewables.len();
    if !design.has_capacity_market() {
        return Ok(vec![0.0; nz]);
    }
    let mut demand = peak_residual_demand(consumers, renewables, reference_price);
    if design == MarketDesign::CmImplicit {
        let imports = expected_imports.ok_or_else(|| {
            Error::MissingPrerequisite("implicit participation needs the flow-based capacity market outcome".into())
        })?;
        if imports.len() != nz {
            return Err(Error::Dimension {
                what: "expected imports",
                expected: nz,
                got: imports.len(),
            });
        }
        for (d, i) in demand.iter_mut().zip(imports) {
            *d -= i.max(0.0);
        }
    }
    for (z, d) in demand.iter_mut().enumerate() {
        if *d < 0.0 {
            warn!("capacity demand of zone {z} is negative ({d:.1} MW), floored at zero");
            *d = 0.0;
        }
    }
    Ok(demand)
}

/// How the capacity market couples zones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CapacityCoupling {
    /// No cross-border participation.
    Isolated,
    FlowBased { scenarios: Vec<ScarcityScenario> },
    Ntc { ntc: NtcBox, scenarios: Vec<ScarcityScenario> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityMarketSetup {
    pub demand: Vec<f64>,
    pub coupling: CapacityCoupling,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CapacityMarketOutcome {
    /// Zonal prices in EUR/MW-year.
    pub prices: Vec<f64>,
    pub zonal_demand: Vec<f64>,
    pub cleared_offers: Vec<f64>,
    pub zonal_cleared: Vec<f64>,
    pub net_obligation: Vec<f64>,
    /// Scenario-by-node dispatch of firm capacity.
    pub scarcity_dispatch: Vec<Vec<f64>>,
    pub scarcity_injections: Vec<Vec<f64>>,
    pub scarcity_flows: Vec<Vec<f64>>,
    pub nodal_allocation: Vec<f64>,
    pub bilateral_exchanges: Vec<f64>,
}

impl CapacityMarketOutcome {
    /// Imports a zone draws on during its own zonal scarcity scenario.
    pub fn expected_scarcity_imports(&self, network: &Network, scenarios: &[ScarcityScenario]) -> Vec<f64> {
        let mut imports = vec![0.0; network.num_zones()];
        for (s, sc) in scenarios.iter().enumerate() {
            if let ScarcityKind::Zonal(z) = sc.kind {
                let net = match self.scarcity_injections.get(s) {
                    Some(inj) if !inj.is_empty() => network.zonal_from_nodal(inj)[z],
                    _ => self.net_obligation.get(z).copied().unwrap_or(0.0),
                };
                imports[z] = (-net).max(0.0);
            }
        }
        imports
    }

    /// Sum of zonal net exports, which is half the gross cross-border trade.
    pub fn gross_trade(&self) -> f64 {
        self.net_obligation.iter().map(|p| p.abs()).sum::<f64>() / 2.0
    }

    pub fn congestion_revenue(&self) -> f64 {
        -self
            .prices
            .iter()
            .zip(&self.net_obligation)
            .map(|(l, p)| l * p)
            .sum::<f64>()
    }
}

/// Revenue adequacy of the energy market at one step:
/// consumer payments minus generator revenue minus congestion revenue.
pub fn energy_revenue_gap(prices: &[f64], demand: &[f64], supply: &[f64], net_positions: &[f64]) -> f64 {
    let paid: f64 = prices.iter().zip(demand).map(|(l, d)| l * d).sum();
    let earned: f64 = prices.iter().zip(supply).map(|(l, g)| l * g).sum();
    let congestion: f64 = -prices.iter().zip(net_positions).map(|(l, p)| l * p).sum::<f64>();
    paid - earned - congestion
}

/// Revenue adequacy of the capacity market:
/// consumer payments minus generator revenue minus congestion revenue.
pub fn capacity_revenue_gap(outcome: &CapacityMarketOutcome) -> f64 {
    let paid: f64 = outcome
        .prices
        .iter()
        .zip(&outcome.zonal_demand)
        .map(|(l, d)| l * d)
        .sum();
    let earned: f64 = outcome
        .prices
        .iter()
        .zip(&outcome.zonal_cleared)
        .map(|(l, y)| l * y)
        .sum();
    paid - earned - outcome.congestion_revenue()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Line;

    fn four_node() -> Network {
        let l = |id: &str, a, b, f| Line {
            id: id.into(),
            from: a,
            to: b,
            susceptance: 1.0,
            f_max: f,
        };
        Network::new(
            vec!["n1".into(), "n2".into(), "n3".into(), "n4".into()],
            vec!["A".into(), "B".into(), "C".into()],
            vec![0, 0, 1, 2],
            vec![l("l12", 0, 1, 500.0), l("l13", 0, 2, 3000.0), l("l24", 1, 3, 3000.0), l("l34", 2, 3, 3000.0)],
            vec![0.6, 0.4, 1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn four_node_scarcity_targets() {
        let net = four_node();
        let sc = build_scarcity_scenarios(&net, &[19_000.0, 16_000.0, 18_000.0], &ScarcityRule::default()).unwrap();
        assert_eq!(sc.len(), 4);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9);
        assert!(close(&sc[0].zonal_demand(&net), &[18_050.0, 15_200.0, 17_100.0]));
        assert!(close(&sc[1].zonal_demand(&net), &[19_000.0, 14_400.0, 16_200.0]));
        assert!((sc[1].nodal_capacity_demand[0] - 0.6 * 19_000.0).abs() < 1e-9);
        let zero = build_scarcity_scenarios(&net, &[0.0; 3], &ScarcityRule::default()).unwrap();
        assert!(zero.iter().all(|s| s.nodal_capacity_demand.iter().all(|v| *v == 0.0)));
    }

    fn flat_consumer(zone: usize, d: f64) -> ConsumerBlock {
        ConsumerBlock {
            zone,
            ref_demand: vec![d; 4],
            elastic_share: 0.2,
            wtp: 20_000.0,
            curtailment_value: 4_000.0,
        }
    }

    #[test]
    fn capacity_demand_at_cap_closed_form() {
        let consumers = [flat_consumer(0, 10_000.0)];
        let res = vec![vec![0.0; 4]];
        let d = compute_capacity_demand(MarketDesign::CmNoCbp, &consumers, &res, 4_000.0, None).unwrap();
        let expected = 0.8 * 10_000.0 + 0.2 * 10_000.0 * (1.0 - 4_000.0 / 20_000.0);
        assert!((d[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn implicit_demand_subtracts_imports() {
        let consumers = [flat_consumer(0, 10_000.0), flat_consumer(1, 5_000.0)];
        let res = vec![vec![0.0; 4], vec![1_000.0; 4]];
        let base = compute_capacity_demand(MarketDesign::CmNoCbp, &consumers, &res, 0.0, None).unwrap();
        let none = compute_capacity_demand(MarketDesign::CmImplicit, &consumers, &res, 0.0, Some(&[0.0, 0.0])).unwrap();
        assert_eq!(base, none);
        let some = compute_capacity_demand(MarketDesign::CmImplicit, &consumers, &res, 0.0, Some(&[0.0, 500.0])).unwrap();
        assert!(some[1] < base[1] && some[0] == base[0]);
        assert!(matches!(
            compute_capacity_demand(MarketDesign::CmImplicit, &consumers, &res, 0.0, None),
            Err(Error::MissingPrerequisite(_))
        ));
    }

    #[test]
    fn design_names_round_trip() {
        for d in MarketDesign::ALL {
            assert_eq!(d.name().parse::<MarketDesign>().unwrap(), d);
            let json = serde_json::to_string(&d).unwrap();
            assert_eq!(json, format!("\"{}\"", d.name()));
        }
    }
}
