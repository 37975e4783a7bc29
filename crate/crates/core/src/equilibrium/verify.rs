use serde::{Deserialize, Serialize};

use crate::case::{CaseData, DesignSetup};
use crate::error::Result;
use crate::participants::Penalty;

use super::model::{Agent, Decisions, Model};
use super::EquilibriumSolution;

/// Relative improvement below which an agent is considered at its best response.
pub const DEVIATION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDeviation {
    pub agent: String,
    pub stored: f64,
    pub best: f64,
    /// Improvement relative to the agent's objective scale.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub agents: Vec<AgentDeviation>,
    pub max_relative: f64,
    pub accepted: bool,
}

/// Re-solves every agent's problem at the solution prices without
/// augmentation and reports how much each could gain by deviating.
///
/// The objective scale of an agent is the larger of its objective and the
/// gross value of its market contributions.
pub fn check_no_profitable_deviation(
    solution: &EquilibriumSolution,
    case: &CaseData,
    setup: &DesignSetup,
) -> Result<DeviationReport> {
    let model = Model::new(case, setup)?;
    let lambda = model.row_prices(&solution.prices);
    deviation_report(&model, &lambda, &solution.decisions())
}

pub(super) fn deviation_report(model: &Model, lambda: &[f64], stored: &Decisions) -> Result<DeviationReport> {
    let mut agents = Vec::new();
    for a in model.agents() {
        if matches!(a, Agent::Slack(_)) {
            continue;
        }
        let rows = model.agent_rows(a);
        let terms: Vec<Penalty> = rows
            .iter()
            .map(|&r| Penalty {
                lin: model.rows[r].weight * lambda[r],
                quad: 0.0,
            })
            .collect();
        let value = model.objective(a, &terms, stored);
        let gross: f64 = terms
            .iter()
            .zip(model.contributions(a, stored))
            .map(|(p, c)| (p.lin * c).abs())
            .sum();
        let mut candidate = stored.clone();
        model.respond(a, &terms, &mut candidate)?;
        let best = model.objective(a, &terms, &candidate);
        let scale = value.abs().max(gross).max(1.0);
        agents.push(AgentDeviation {
            agent: model.agent_name(a),
            stored: value,
            best,
            relative: ((best - value) / scale).max(0.0),
        });
    }
    let max_relative = agents.iter().map(|a| a.relative).fold(0.0, f64::max);
    Ok(DeviationReport {
        agents,
        max_relative,
        accepted: max_relative <= DEVIATION_TOL,
    })
}
