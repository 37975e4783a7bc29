//! In-memory case data shared by the equilibrium solver, the welfare oracle
//! and reporting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_clearing::{CapacityCoupling, CapacityMarketSetup, MarketDesign};
use crate::network::Network;
use crate::participants::{ConsumerBlock, GeneratorTech, TimeGrid};

/// Network, time grid, agents and exogenous renewable in-feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseData {
    pub network: Network,
    pub grid: TimeGrid,
    pub generators: Vec<GeneratorTech>,
    pub consumers: Vec<ConsumerBlock>,
    /// Available renewable in-feed per zone and step in MW.
    pub renewables: Vec<Vec<f64>>,
}

impl CaseData {
    pub fn validate(&self) -> Result<()> {
        let nz = self.network.num_zones();
        let steps = self.grid.len();
        if self.renewables.len() != nz {
            return Err(Error::Dimension {
                what: "renewable zones",
                expected: nz,
                got: self.renewables.len(),
            });
        }
        for r in &self.renewables {
            if r.len() != steps {
                return Err(Error::Dimension {
                    what: "renewable steps",
                    expected: steps,
                    got: r.len(),
                });
            }
            if r.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidParameter("renewable in-feed must be nonnegative".into()));
            }
        }
        for g in &self.generators {
            g.validate(steps)?;
            if g.zone >= nz {
                return Err(Error::InvalidParameter(format!("generator {} has unknown zone {}", g.id, g.zone)));
            }
        }
        for c in &self.consumers {
            c.validate(steps)?;
            if c.zone >= nz {
                return Err(Error::InvalidParameter(format!("consumer has unknown zone {}", c.zone)));
            }
        }
        Ok(())
    }

    /// Reference demand per zone and step.
    pub fn zonal_demand(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.grid.len()]; self.network.num_zones()];
        for c in &self.consumers {
            for (t, v) in c.ref_demand.iter().enumerate() {
                d[c.zone][t] += v;
            }
        }
        d
    }

    /// Largest system-wide reference demand over all steps, at least 1 MW.
    pub fn system_peak(&self) -> f64 {
        let d = self.zonal_demand();
        (0..self.grid.len())
            .map(|t| d.iter().map(|z| z[t]).sum::<f64>())
            .fold(1.0, f64::max)
    }

    /// Consumers as seen by a market whose energy price is capped at `cap`:
    /// unserved inelastic demand is rationed at the cap.
    pub fn consumers_under_cap(&self, cap: f64) -> Vec<ConsumerBlock> {
        self.consumers
            .iter()
            .map(|c| ConsumerBlock {
                curtailment_value: c.wtp.min(cap),
                ..c.clone()
            })
            .collect()
    }
}

/// Design-specific market rules for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSetup {
    pub design: MarketDesign,
    /// Energy price cap in EUR/MWh (the willingness to pay when uncapped).
    pub price_cap: f64,
    pub capacity: Option<CapacityMarketSetup>,
}

impl DesignSetup {
    pub fn validate(&self, case: &CaseData) -> Result<()> {
        if !(self.price_cap > 0.0) {
            return Err(Error::InvalidParameter("price cap must be positive".into()));
        }
        if let Some(c) = case.consumers.iter().find(|c| self.price_cap > c.wtp) {
            return Err(Error::InvalidParameter(format!(
                "price cap {} exceeds the willingness to pay {}",
                self.price_cap, c.wtp
            )));
        }
        match (&self.capacity, self.design.has_capacity_market()) {
            (None, true) => Err(Error::MissingPrerequisite(format!("{} needs a capacity market setup", self.design))),
            (Some(_), false) => Err(Error::InvalidParameter(format!(
                "{} has no capacity market",
                self.design
            ))),
            (Some(cm), true) => {
                let nz = case.network.num_zones();
                if cm.demand.len() != nz {
                    return Err(Error::Dimension {
                        what: "capacity demand",
                        expected: nz,
                        got: cm.demand.len(),
                    });
                }
                let expected = match self.design {
                    MarketDesign::CmFbmc => matches!(cm.coupling, CapacityCoupling::FlowBased { .. }),
                    MarketDesign::CmNtc => matches!(cm.coupling, CapacityCoupling::Ntc { .. }),
                    _ => matches!(cm.coupling, CapacityCoupling::Isolated),
                };
                if !expected {
                    return Err(Error::InvalidParameter(format!(
                        "capacity coupling does not match design {}",
                        self.design
                    )));
                }
                Ok(())
            }
            (None, false) => Ok(()),
        }
    }
}
