//! Competitive equilibrium of the coupled markets by ADMM price coordination.
//!
//! Every agent (generators, consumers, the energy market operator, the
//! capacity market operator and one slack per inequality row) repeatedly
//! solves its own problem at the current prices plus a quadratic penalty that
//! pulls its contribution towards a share of the current market imbalance.
//! Prices move against the imbalance. Coupling constraints that involve
//! several agents (nodal allocations, flow-based deliverability) are priced
//! like any other row, which selects the variational equilibrium.

mod admm;
pub(crate) mod model;
mod verify;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::case::{CaseData, DesignSetup};
use crate::error::{Error, Result};
use crate::market_clearing::operators::{CapacityOperatorDecision, EnergyOperatorDecision};
use crate::market_clearing::{
    CapacityCoupling, CapacityMarketOutcome, EnergyMarketOutcome, EnergyStep, MarketDesign,
};
use crate::participants::{ConsumerDecision, GeneratorDecision};

pub use model::{Decisions, Market, MarketPrices};
pub use verify::{check_no_profitable_deviation, AgentDeviation, DeviationReport};

use model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    /// All agents respond to the same iterate.
    Jacobi,
    /// Agents respond in turn to the imbalance left by their predecessors.
    GaussSeidel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    /// Penalty weight in EUR/MWh per MW of imbalance.
    pub rho: f64,
    /// Market imbalance tolerance relative to the system peak demand.
    pub primal_tol: f64,
    /// Iterate-change tolerance relative to the system peak demand.
    pub dual_tol: f64,
    pub max_iter: usize,
    pub sweep: Sweep,
    pub seed: u64,
    /// Iterations between residual-balancing checks; 0 disables rescaling.
    pub balance_every: usize,
    /// Iterations without a new best residual before reporting oscillation.
    pub oscillation_window: usize,
    /// Times the tolerances are divided by ten when the residuals are met
    /// but some agent still has a profitable deviation.
    pub max_tightenings: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 0.1,
            primal_tol: 1e-6,
            dual_tol: 1e-6,
            max_iter: 20_000,
            sweep: Sweep::GaussSeidel,
            seed: 0,
            balance_every: 20,
            oscillation_window: 500,
            max_tightenings: 4,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.primal_tol > 0.0) || !(self.dual_tol > 0.0) {
            return Err(Error::InvalidParameter("ADMM tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Primal decisions and market outcomes common to the equilibrium and the
/// welfare optimum.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Allocation {
    pub generators: Vec<GeneratorDecision>,
    pub consumers: Vec<ConsumerDecision>,
    pub energy: EnergyMarketOutcome,
    pub capacity: Option<CapacityMarketOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub iteration: usize,
    pub market: Market,
    /// Largest imbalance in MW.
    pub primal: f64,
    /// Largest change of a contribution since the previous iteration in MW.
    pub dual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub design: MarketDesign,
    pub allocation: Allocation,
    pub prices: MarketPrices,
    pub energy_operator: EnergyOperatorDecision,
    pub capacity_operator: Option<CapacityOperatorDecision>,
    pub residuals: Vec<ResidualRecord>,
    pub converged: bool,
    /// Whether the stopping rule confirmed that no agent gains by deviating.
    pub verified: bool,
    pub iterations: usize,
    pub final_rho: f64,
}

impl EquilibriumSolution {
    /// Final primal and dual residual, relative to the system peak.
    pub fn final_residuals(&self, case: &CaseData) -> (f64, f64) {
        let Some(last) = self.residuals.last().map(|r| r.iteration) else {
            return (f64::INFINITY, f64::INFINITY);
        };
        let peak = case.system_peak();
        self.residuals
            .iter()
            .filter(|r| r.iteration == last)
            .fold((0.0, 0.0), |(p, d), r| (f64::max(p, r.primal / peak), f64::max(d, r.dual / peak)))
    }

    /// Writes the residual history as `iteration,market,primal,dual`.
    pub fn write_residuals_csv(&self, path: &Path) -> Result<()> {
        write_residuals(&self.residuals, path)
    }

    pub(crate) fn decisions(&self) -> Decisions {
        Decisions {
            generators: self.allocation.generators.clone(),
            consumers: self.allocation.consumers.clone(),
            energy_operator: self.energy_operator.clone(),
            capacity_operator: self.capacity_operator.clone(),
            slacks: Vec::new(),
        }
    }
}

pub(crate) fn write_residuals(records: &[ResidualRecord], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iteration", "market", "primal", "dual"]).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            r.market.name().to_string(),
            format!("{:e}", r.primal),
            format!("{:e}", r.dual),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One projected price step per market: `clamp(price + rho * imbalance, 0,
/// cap)`, where `imbalance` is excess demand in MW.
pub fn price_update(prices: &[f64], imbalance: &[f64], rho: f64, caps: &[f64]) -> Vec<f64> {
    prices
        .iter()
        .zip(imbalance)
        .zip(caps)
        .map(|((p, e), c)| (p + rho * e).clamp(0.0, *c))
        .collect()
}

/// Computes the market equilibrium of one design.
///
/// Once the residuals meet the tolerances every agent's best response is
/// checked; while some agent can still gain, the tolerances are tightened.
/// Hitting `max_iter` returns a solution with `converged = false`; a residual
/// that stops improving for `oscillation_window` iterations before the first
/// convergence is an error.
pub fn solve_equilibrium(case: &CaseData, setup: &DesignSetup, cfg: &AdmmConfig) -> Result<EquilibriumSolution> {
    cfg.validate()?;
    let model = Model::new(case, setup)?;
    let run = admm::run(&model, cfg)?;
    let prices = model.market_prices(&run.lambda);
    Ok(EquilibriumSolution {
        design: setup.design,
        allocation: assemble(case, setup, &run.decisions, &prices)?,
        prices,
        energy_operator: run.decisions.energy_operator,
        capacity_operator: run.decisions.capacity_operator,
        residuals: run.residuals,
        converged: run.converged,
        verified: run.verified,
        iterations: run.iterations,
        final_rho: run.rho,
    })
}

/// Market outcomes implied by agent decisions and prices.
pub(crate) fn assemble(
    case: &CaseData,
    setup: &DesignSetup,
    d: &Decisions,
    prices: &MarketPrices,
) -> Result<Allocation> {
    let net = &case.network;
    let ptdf = crate::network::build_ptdf(net, 0)?;
    let nz = net.num_zones();
    let nn = net.num_nodes();
    let steps = case.grid.len();
    let op = &d.energy_operator;

    let mut zonal_gen = vec![vec![0.0; steps]; nz];
    let mut zonal_cap = vec![0.0; nz];
    for (tech, g) in case.generators.iter().zip(&d.generators) {
        for t in 0..steps {
            zonal_gen[tech.zone][t] += g.dispatch[t];
        }
        zonal_cap[tech.zone] += g.capacity;
    }
    let mut zonal_demand = vec![vec![0.0; steps]; nz];
    for (c, cd) in case.consumers.iter().zip(&d.consumers) {
        for t in 0..steps {
            zonal_demand[c.zone][t] += cd.demand[t];
        }
    }
    let multi = |z: usize| net.zone_nodes(z).len() > 1;
    let mut out_steps = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut nodal_dispatch = vec![0.0; nn];
        let mut nodal_demand = vec![0.0; nn];
        for n in 0..nn {
            let z = net.zone_of(n);
            nodal_dispatch[n] = if multi(z) { op.nodal_dispatch[n][t] } else { zonal_gen[z][t] };
            let net_load = zonal_demand[z][t] - case.renewables[z][t] + op.curtailment[z][t];
            nodal_demand[n] = net.demand_share(n) * net_load;
        }
        let nodal_injections: Vec<f64> = nodal_dispatch.iter().zip(&nodal_demand).map(|(g, l)| g - l).collect();
        out_steps.push(EnergyStep {
            prices: (0..nz).map(|z| prices.energy[z][t]).collect(),
            net_positions: (0..nz).map(|z| op.net_positions[z][t]).collect(),
            flows: ptdf.flows_unchecked(&nodal_injections),
            nodal_dispatch,
            nodal_injections,
            nodal_demand,
            curtailment: (0..nz).map(|z| op.curtailment[z][t]).collect(),
        });
    }
    let nodal_caps = (0..nn)
        .map(|n| {
            let z = net.zone_of(n);
            if multi(z) {
                op.nodal_caps[n]
            } else {
                zonal_cap[z]
            }
        })
        .collect();

    let capacity = setup.capacity.as_ref().map(|cm| {
        let cleared_offers: Vec<f64> = d.generators.iter().map(|g| g.cm_offer).collect();
        let mut zonal_cleared = vec![0.0; nz];
        for (tech, q) in case.generators.iter().zip(&cleared_offers) {
            zonal_cleared[tech.zone] += q;
        }
        let mut out = CapacityMarketOutcome {
            prices: prices.capacity_prices(),
            zonal_demand: cm.demand.clone(),
            cleared_offers,
            zonal_cleared,
            net_obligation: vec![0.0; nz],
            ..Default::default()
        };
        if let Some(cop) = &d.capacity_operator {
            out.net_obligation = cop.net_obligation.clone();
            out.nodal_allocation = cop.nodal_allocation.clone();
            out.bilateral_exchanges = cop.exchanges.clone();
            if let CapacityCoupling::FlowBased { scenarios } = &cm.coupling {
                out.scarcity_dispatch = cop.scarcity_dispatch.clone();
                out.scarcity_injections = scenarios
                    .iter()
                    .zip(&cop.scarcity_dispatch)
                    .map(|(sc, g)| g.iter().zip(&sc.nodal_capacity_demand).map(|(g, d)| g - d).collect())
                    .collect();
                out.scarcity_flows = out.scarcity_injections.iter().map(|r| ptdf.flows_unchecked(r)).collect();
            }
        }
        out
    });

    Ok(Allocation {
        generators: d.generators.clone(),
        consumers: d.consumers.clone(),
        energy: EnergyMarketOutcome {
            steps: out_steps,
            nodal_caps,
        },
        capacity,
    })
}
