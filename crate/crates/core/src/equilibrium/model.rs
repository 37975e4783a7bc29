//! Market-clearing rows shared by all agents and the mapping between agent
//! decisions and their contributions to each row.
//!
//! Every row reads `sum of contributions = rhs`; inequality rows (`>= rhs`)
//! carry a slack agent whose contribution is nonpositive. Hourly rows are
//! weighted by the step weight, annual rows by the total hours of the grid,
//! so all internal prices are in EUR/MWh.

use serde::{Deserialize, Serialize};

use crate::case::{CaseData, DesignSetup};
use crate::error::Result;
use crate::market_clearing::operators::{
    capacity_operator_best_response, capacity_operator_objective, energy_operator_best_response,
    energy_operator_objective, CapacityOperatorDecision, CapacityOperatorTerms, EnergyOperatorDecision,
    EnergyOperatorTerms,
};
use crate::market_clearing::CapacityCoupling;
use crate::network::{build_ptdf, PtdfMatrix};
use crate::participants::{
    consumer_best_response, consumer_objective, generator_best_response, generator_objective, ConsumerBlock,
    ConsumerDecision, GeneratorDecision, GeneratorTerms, Penalty,
};

/// Kind of a market-clearing row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Market {
    /// Zonal energy balance, priced at the consumer-facing energy price.
    Energy,
    /// Zonal dispatch matched by auxiliary nodal dispatch (multi-node zones).
    Generation,
    /// Zonal capacity covering the nodal capacity allocation (multi-node zones).
    EnergyAllocation,
    /// Zonal capacity demand.
    Capacity,
    /// Cleared capacity offers covering the nodal firm allocation.
    CapacityAllocation,
    /// Nodal firm allocation within the nodal capacity allocation.
    Firm,
}

impl Market {
    pub const ALL: [Market; 6] = [
        Market::Energy,
        Market::Generation,
        Market::EnergyAllocation,
        Market::Capacity,
        Market::CapacityAllocation,
        Market::Firm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Market::Energy => "energy",
            Market::Generation => "generation",
            Market::EnergyAllocation => "energy-allocation",
            Market::Capacity => "capacity",
            Market::CapacityAllocation => "capacity-allocation",
            Market::Firm => "firm",
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Row {
    pub market: Market,
    pub weight: f64,
    pub lo: f64,
    pub hi: f64,
    pub rhs: f64,
    pub inequality: bool,
    pub members: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Agent {
    Generator(usize),
    Consumer(usize),
    EnergyOperator,
    CapacityOperator,
    Slack(usize),
}

/// Prices of every market-clearing row: hourly rows in EUR/MWh, annual rows
/// in EUR/MW-year.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarketPrices {
    /// `[zone][step]`
    pub energy: Vec<Vec<f64>>,
    /// `[zone][step]`, empty rows for single-node zones.
    pub generation: Vec<Vec<f64>>,
    pub energy_allocation: Vec<f64>,
    pub capacity: Vec<f64>,
    pub capacity_allocation: Vec<f64>,
    pub firm: Vec<f64>,
}

impl MarketPrices {
    /// Value of one more MW of cleared capacity in each zone.
    pub fn capacity_prices(&self) -> Vec<f64> {
        self.capacity
            .iter()
            .enumerate()
            .map(|(z, p)| (p + self.capacity_allocation.get(z).copied().unwrap_or(0.0)).max(0.0))
            .collect()
    }
}

/// All agent decisions of one iterate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Decisions {
    pub generators: Vec<GeneratorDecision>,
    pub consumers: Vec<ConsumerDecision>,
    pub energy_operator: EnergyOperatorDecision,
    pub capacity_operator: Option<CapacityOperatorDecision>,
    /// Slack of each inequality row, in row order of the slack agents.
    pub slacks: Vec<f64>,
}

pub(crate) struct Model<'a> {
    pub case: &'a CaseData,
    pub setup: &'a DesignSetup,
    pub consumers: Vec<ConsumerBlock>,
    pub ptdf: PtdfMatrix,
    pub rows: Vec<Row>,
    pub energy: Vec<Vec<usize>>,
    pub generation: Vec<Vec<Option<usize>>>,
    pub alloc_e: Vec<Option<usize>>,
    pub capacity: Vec<Option<usize>>,
    pub alloc_cm: Vec<Option<usize>>,
    pub firm: Vec<Option<usize>>,
    pub slack_rows: Vec<usize>,
    pub multi: Vec<bool>,
    pub annual_weight: f64,
    /// Upper bound on any nodal capacity or installed capacity decision.
    pub capacity_bound: f64,
    coupled: bool,
}

fn push(rows: &mut Vec<Row>, market: Market, weight: f64, lo: f64, hi: f64, rhs: f64, inequality: bool) -> usize {
    rows.push(Row {
        market,
        weight,
        lo,
        hi,
        rhs,
        inequality,
        members: 0,
    });
    rows.len() - 1
}

impl<'a> Model<'a> {
    pub fn new(case: &'a CaseData, setup: &'a DesignSetup) -> Result<Self> {
        case.validate()?;
        setup.validate(case)?;
        let net = &case.network;
        let nz = net.num_zones();
        let nn = net.num_nodes();
        let steps = case.grid.len();
        let ptdf = build_ptdf(net, 0)?;
        let multi: Vec<bool> = (0..nz).map(|z| net.zone_nodes(z).len() > 1).collect();
        let annual_weight = case.grid.total_hours();
        let inf = f64::INFINITY;
        let mut rows = Vec::new();

        let mut energy = vec![vec![0; steps]; nz];
        let mut generation = vec![vec![None; steps]; nz];
        for z in 0..nz {
            for t in 0..steps {
                let w = case.grid.weight(t);
                energy[z][t] = push(&mut rows, Market::Energy, w, 0.0, setup.price_cap, -case.renewables[z][t], false);
                if multi[z] {
                    generation[z][t] = Some(push(&mut rows, Market::Generation, w, -inf, inf, 0.0, false));
                }
            }
        }
        let alloc_e: Vec<Option<usize>> = (0..nz)
            .map(|z| multi[z].then(|| push(&mut rows, Market::EnergyAllocation, annual_weight, 0.0, inf, 0.0, true)))
            .collect();

        let mut capacity = vec![None; nz];
        let mut alloc_cm = vec![None; nz];
        let mut firm = vec![None; nn];
        let mut coupled = false;
        if let Some(cm) = &setup.capacity {
            let mut demand = cm.demand.clone();
            match &cm.coupling {
                CapacityCoupling::Isolated => {}
                CapacityCoupling::Ntc { scenarios, .. } => {
                    coupled = true;
                    // zonal deliverability rows are parallel to the demand row
                    for sc in scenarios {
                        for (d, s) in demand.iter_mut().zip(sc.zonal_demand(net)) {
                            *d = d.max(s);
                        }
                    }
                }
                CapacityCoupling::FlowBased { .. } => coupled = true,
            }
            for z in 0..nz {
                capacity[z] = Some(push(&mut rows, Market::Capacity, annual_weight, 0.0, inf, demand[z], true));
            }
            if matches!(cm.coupling, CapacityCoupling::FlowBased { .. }) {
                for z in 0..nz {
                    alloc_cm[z] = Some(push(&mut rows, Market::CapacityAllocation, annual_weight, 0.0, inf, 0.0, true));
                }
                for n in 0..nn {
                    if multi[net.zone_of(n)] {
                        firm[n] = Some(push(&mut rows, Market::Firm, annual_weight, 0.0, inf, 0.0, true));
                    }
                }
            }
        }
        let slack_rows: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].inequality).collect();
        let capacity_bound = 2.0 * case.system_peak() + case.generators.iter().map(|g| g.existing).sum::<f64>();
        let mut model = Model {
            case,
            setup,
            consumers: case.consumers_under_cap(setup.price_cap),
            ptdf,
            rows,
            energy,
            generation,
            alloc_e,
            capacity,
            alloc_cm,
            firm,
            slack_rows,
            multi,
            annual_weight,
            capacity_bound,
            coupled,
        };
        for a in model.agents() {
            for r in model.agent_rows(a) {
                model.rows[r].members += 1;
            }
        }
        Ok(model)
    }

    pub fn agents(&self) -> Vec<Agent> {
        let mut out: Vec<Agent> = (0..self.case.generators.len()).map(Agent::Generator).collect();
        out.extend((0..self.consumers.len()).map(Agent::Consumer));
        out.push(Agent::EnergyOperator);
        if self.coupled {
            out.push(Agent::CapacityOperator);
        }
        out.extend((0..self.slack_rows.len()).map(Agent::Slack));
        out
    }

    pub fn agent_name(&self, a: Agent) -> String {
        match a {
            Agent::Generator(i) => format!("generator {}", self.case.generators[i].id),
            Agent::Consumer(c) => format!(
                "consumer {} ({})",
                c,
                self.case.network.zones()[self.consumers[c].zone]
            ),
            Agent::EnergyOperator => "energy operator".into(),
            Agent::CapacityOperator => "capacity operator".into(),
            Agent::Slack(s) => format!("slack of row {}", self.slack_rows[s]),
        }
    }

    /// Rows an agent contributes to, in a fixed order.
    pub fn agent_rows(&self, a: Agent) -> Vec<usize> {
        let steps = self.case.grid.len();
        match a {
            Agent::Generator(i) => {
                let z = self.case.generators[i].zone;
                let mut rows: Vec<usize> = (0..steps)
                    .map(|t| self.generation[z][t].unwrap_or(self.energy[z][t]))
                    .collect();
                rows.extend(self.alloc_e[z]);
                rows.extend(self.capacity[z]);
                rows.extend(self.alloc_cm[z]);
                rows
            }
            Agent::Consumer(c) => self.energy[self.consumers[c].zone].clone(),
            Agent::EnergyOperator => {
                let mut rows: Vec<usize> = self.energy.iter().flatten().copied().collect();
                rows.extend(self.generation.iter().flatten().flatten());
                rows.extend(self.alloc_e.iter().flatten());
                rows.extend(self.firm.iter().flatten());
                rows
            }
            Agent::CapacityOperator => {
                let mut rows: Vec<usize> = self.capacity.iter().flatten().copied().collect();
                rows.extend(self.alloc_cm.iter().flatten());
                rows.extend(self.firm.iter().flatten());
                rows
            }
            Agent::Slack(s) => vec![self.slack_rows[s]],
        }
    }

    pub fn initial_decisions(&self) -> Decisions {
        let net = &self.case.network;
        let steps = self.case.grid.len();
        let nz = net.num_zones();
        let nn = net.num_nodes();
        Decisions {
            generators: self
                .case
                .generators
                .iter()
                .map(|g| GeneratorDecision {
                    dispatch: vec![0.0; steps],
                    capacity: g.existing,
                    cm_offer: 0.0,
                })
                .collect(),
            consumers: self
                .consumers
                .iter()
                .map(|_| ConsumerDecision {
                    demand: vec![0.0; steps],
                    elastic: vec![0.0; steps],
                    inelastic: vec![0.0; steps],
                    ens: vec![0.0; steps],
                })
                .collect(),
            energy_operator: EnergyOperatorDecision {
                net_positions: vec![vec![0.0; steps]; nz],
                curtailment: vec![vec![0.0; steps]; nz],
                nodal_dispatch: vec![vec![0.0; steps]; nn],
                nodal_caps: vec![0.0; nn],
            },
            capacity_operator: self.coupled.then(|| {
                let scenarios = match &self.setup.capacity.as_ref().map(|c| &c.coupling) {
                    Some(CapacityCoupling::FlowBased { scenarios }) => scenarios.len(),
                    _ => 0,
                };
                CapacityOperatorDecision {
                    net_obligation: vec![0.0; nz],
                    nodal_allocation: vec![0.0; nn],
                    scarcity_dispatch: vec![vec![0.0; nn]; scenarios],
                    exchanges: Vec::new(),
                }
            }),
            slacks: vec![0.0; self.slack_rows.len()],
        }
    }

    /// Contributions of an agent to its rows, aligned with `agent_rows`.
    pub fn contributions(&self, a: Agent, d: &Decisions) -> Vec<f64> {
        let net = &self.case.network;
        let steps = self.case.grid.len();
        match a {
            Agent::Generator(i) => {
                let g = &d.generators[i];
                let z = self.case.generators[i].zone;
                let mut c = g.dispatch.clone();
                if self.alloc_e[z].is_some() {
                    c.push(g.capacity);
                }
                if self.capacity[z].is_some() {
                    c.push(g.cm_offer);
                }
                if self.alloc_cm[z].is_some() {
                    c.push(g.cm_offer);
                }
                c
            }
            Agent::Consumer(c) => d.consumers[c].demand.iter().map(|v| -v).collect(),
            Agent::EnergyOperator => {
                let op = &d.energy_operator;
                let nz = net.num_zones();
                let mut c = Vec::new();
                for z in 0..nz {
                    for t in 0..steps {
                        c.push(op.energy_contribution(net, z, t));
                    }
                }
                for z in 0..nz {
                    if self.multi[z] {
                        for t in 0..steps {
                            c.push(-op.zonal_dispatch(net, z, t));
                        }
                    }
                }
                for z in 0..nz {
                    if self.multi[z] {
                        c.push(-op.zonal_caps(net, z));
                    }
                }
                for (n, f) in self.firm.iter().enumerate() {
                    if f.is_some() {
                        c.push(op.nodal_caps[n]);
                    }
                }
                c
            }
            Agent::CapacityOperator => {
                let op = d.capacity_operator.as_ref().expect("coupled design carries a capacity operator");
                let nz = net.num_zones();
                let mut c: Vec<f64> = (0..nz)
                    .filter(|&z| self.capacity[z].is_some())
                    .map(|z| -op.net_obligation[z])
                    .collect();
                for z in 0..nz {
                    if self.alloc_cm[z].is_some() {
                        c.push(-op.zonal_allocation(net, z));
                    }
                }
                for (n, f) in self.firm.iter().enumerate() {
                    if f.is_some() {
                        c.push(-op.nodal_allocation[n]);
                    }
                }
                c
            }
            Agent::Slack(s) => vec![-d.slacks[s]],
        }
    }

    fn generator_terms(&self, i: usize, terms: &[Penalty]) -> GeneratorTerms {
        let steps = self.case.grid.len();
        let z = self.case.generators[i].zone;
        let mut k = steps;
        let mut next = |present: bool| {
            if present {
                k += 1;
                terms[k - 1]
            } else {
                Penalty::default()
            }
        };
        let capacity = next(self.alloc_e[z].is_some());
        let offer_a = next(self.capacity[z].is_some());
        let offer_b = next(self.alloc_cm[z].is_some());
        GeneratorTerms {
            energy: terms[..steps].to_vec(),
            capacity,
            offer: Penalty {
                lin: offer_a.lin + offer_b.lin,
                quad: offer_a.quad + offer_b.quad,
            },
            max_capacity: Some(self.capacity_bound),
        }
    }

    fn energy_operator_terms(&self, terms: &[Penalty]) -> EnergyOperatorTerms {
        let net = &self.case.network;
        let nz = net.num_zones();
        let steps = self.case.grid.len();
        let mut it = terms.iter().copied();
        let mut out = EnergyOperatorTerms {
            energy: vec![vec![Penalty::default(); steps]; nz],
            generation: vec![vec![Penalty::default(); steps]; nz],
            allocation: vec![Penalty::default(); nz],
            firm: vec![Penalty::default(); net.num_nodes()],
            max_nodal_cap: self.capacity_bound,
        };
        for z in 0..nz {
            for t in 0..steps {
                out.energy[z][t] = it.next().expect("energy term");
            }
        }
        for z in (0..nz).filter(|&z| self.multi[z]) {
            for t in 0..steps {
                out.generation[z][t] = it.next().expect("generation term");
            }
        }
        for z in (0..nz).filter(|&z| self.multi[z]) {
            out.allocation[z] = it.next().expect("allocation term");
        }
        for n in 0..net.num_nodes() {
            if self.firm[n].is_some() {
                out.firm[n] = it.next().expect("firm term");
            }
        }
        out
    }

    fn capacity_operator_terms(&self, terms: &[Penalty]) -> CapacityOperatorTerms {
        let net = &self.case.network;
        let nz = net.num_zones();
        let mut it = terms.iter().copied();
        let mut out = CapacityOperatorTerms {
            capacity: vec![Penalty::default(); nz],
            allocation: vec![Penalty::default(); nz],
            firm: vec![Penalty::default(); net.num_nodes()],
            max_nodal_cap: self.capacity_bound,
        };
        for z in 0..nz {
            if self.capacity[z].is_some() {
                out.capacity[z] = it.next().expect("capacity term");
            }
        }
        for z in 0..nz {
            if self.alloc_cm[z].is_some() {
                out.allocation[z] = it.next().expect("allocation term");
            }
        }
        for n in 0..net.num_nodes() {
            if self.firm[n].is_some() {
                out.firm[n] = it.next().expect("firm term");
            }
        }
        out
    }

    fn coupling(&self) -> &CapacityCoupling {
        &self
            .setup
            .capacity
            .as_ref()
            .expect("coupled design carries a capacity setup")
            .coupling
    }

    /// Best response of an agent to per-row terms aligned with `agent_rows`.
    /// Prices enter through the linear part of the terms.
    pub fn respond(&self, a: Agent, terms: &[Penalty], d: &mut Decisions) -> Result<()> {
        let grid = &self.case.grid;
        let zeros = vec![0.0; grid.len()];
        match a {
            Agent::Generator(i) => {
                let gt = self.generator_terms(i, terms);
                d.generators[i] = generator_best_response(&self.case.generators[i], grid, &zeros, 0.0, &gt)?;
            }
            Agent::Consumer(c) => {
                d.consumers[c] = consumer_best_response(&self.consumers[c], grid, &zeros, terms)?;
            }
            Agent::EnergyOperator => {
                let et = self.energy_operator_terms(terms);
                d.energy_operator =
                    energy_operator_best_response(&self.case.network, &self.ptdf, &self.case.renewables, &et)?;
            }
            Agent::CapacityOperator => {
                let ct = self.capacity_operator_terms(terms);
                d.capacity_operator = Some(capacity_operator_best_response(
                    &self.case.network,
                    &self.ptdf,
                    self.coupling(),
                    &ct,
                )?);
            }
            Agent::Slack(s) => {
                let p = terms[0];
                // maximize lin c - quad/2 c^2 over c <= 0
                let c = if p.quad > 0.0 { (p.lin / p.quad).min(0.0) } else { 0.0 };
                d.slacks[s] = -c;
            }
        }
        Ok(())
    }

    /// Objective of an agent under per-row terms aligned with `agent_rows`.
    pub fn objective(&self, a: Agent, terms: &[Penalty], d: &Decisions) -> f64 {
        let grid = &self.case.grid;
        let zeros = vec![0.0; grid.len()];
        match a {
            Agent::Generator(i) => generator_objective(
                &self.case.generators[i],
                grid,
                &zeros,
                0.0,
                &self.generator_terms(i, terms),
                &d.generators[i],
            ),
            Agent::Consumer(c) => consumer_objective(&self.consumers[c], grid, &zeros, terms, &d.consumers[c]),
            Agent::EnergyOperator => {
                energy_operator_objective(&self.case.network, &self.energy_operator_terms(terms), &d.energy_operator)
            }
            Agent::CapacityOperator => capacity_operator_objective(
                &self.case.network,
                self.coupling(),
                &self.capacity_operator_terms(terms),
                d.capacity_operator.as_ref().expect("coupled design carries a capacity operator"),
            ),
            Agent::Slack(s) => terms[0].value(-d.slacks[s]),
        }
    }

    /// Row prices in reporting units from internal EUR/MWh prices.
    pub fn market_prices(&self, lambda: &[f64]) -> MarketPrices {
        let annual = |r: &Option<usize>| r.map_or(0.0, |r| lambda[r].max(0.0) * self.annual_weight);
        let cap = self.setup.price_cap;
        MarketPrices {
            energy: self
                .energy
                .iter()
                .map(|row| row.iter().map(|&r| lambda[r].clamp(0.0, cap)).collect())
                .collect(),
            generation: self
                .generation
                .iter()
                .map(|row| row.iter().flatten().map(|&r| lambda[r]).collect())
                .collect(),
            energy_allocation: self.alloc_e.iter().map(annual).collect(),
            capacity: self.capacity.iter().map(annual).collect(),
            capacity_allocation: self.alloc_cm.iter().map(annual).collect(),
            firm: self.firm.iter().map(annual).collect(),
        }
    }

    /// Internal EUR/MWh row prices from reporting units.
    pub fn row_prices(&self, p: &MarketPrices) -> Vec<f64> {
        let mut lambda = vec![0.0; self.rows.len()];
        for (z, row) in self.energy.iter().enumerate() {
            for (t, &r) in row.iter().enumerate() {
                lambda[r] = p.energy[z][t];
            }
        }
        for (z, row) in self.generation.iter().enumerate() {
            for (k, &r) in row.iter().flatten().enumerate() {
                lambda[r] = p.generation[z][k];
            }
        }
        let mut annual = |rows: &[Option<usize>], v: &[f64]| {
            for (r, x) in rows.iter().zip(v) {
                if let Some(r) = r {
                    lambda[*r] = x / self.annual_weight;
                }
            }
        };
        annual(&self.alloc_e, &p.energy_allocation);
        annual(&self.capacity, &p.capacity);
        annual(&self.alloc_cm, &p.capacity_allocation);
        annual(&self.firm, &p.firm);
        lambda
    }
}
