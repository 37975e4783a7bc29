//! Metrics, output files and end-to-end runs of single designs and batches.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::case::{CaseData, DesignSetup};
use crate::equilibrium::{check_no_profitable_deviation, solve_equilibrium, DeviationReport, EquilibriumSolution};
use crate::error::{Error, Result};
use crate::market_clearing::{CapacityCoupling, MarketDesign};
use crate::network::{build_ptdf, NtcBox};
use crate::scenario::{build_design_setup, read_json, write_json, ScenarioConfig};

const MEUR: f64 = 1e6;
/// Relative line overload or box violation accepted by the deliverability check.
pub const DELIVERABILITY_TOL: f64 = 1e-4;
/// Relative distance to the cap below which a price counts as capped.
const CAP_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemCosts {
    pub served_gwh: f64,
    pub generation_meur: f64,
    pub investment_meur: f64,
    pub ens_meur: f64,
    pub total_meur: f64,
    /// Increase of the total cost over the baseline in percent.
    pub increase_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionRevenues {
    pub energy_meur: f64,
    pub capacity_meur: f64,
    pub total_meur: f64,
}

/// Average cost of a zone's consumers per MWh served.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerCost {
    pub zone: String,
    pub served_gwh: f64,
    pub energy: f64,
    pub capacity: f64,
    pub ens: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub design: MarketDesign,
    pub converged: bool,
    pub zones: Vec<String>,
    pub system_costs: SystemCosts,
    pub congestion: CongestionRevenues,
    pub consumer_costs: Vec<ConsumerCost>,
    /// Net export of capacity obligations per zone in MW.
    pub net_trade: Vec<f64>,
    /// Sum of zonal net capacity exports in MW.
    pub gross_capacity_trade: f64,
    /// EUR/MW-year per zone; empty without a capacity market.
    pub capacity_prices: Vec<f64>,
    pub ens_gwh: Vec<f64>,
    pub max_energy_price: f64,
    /// Zone-steps whose energy price is at the price cap.
    pub capped_steps: usize,
}

/// Annual costs, revenues and trade of a solution; `baseline` supplies the
/// reference total cost for the percentage increase.
pub fn compute_metrics(
    solution: &EquilibriumSolution,
    case: &CaseData,
    setup: &DesignSetup,
    baseline: Option<&RunReport>,
) -> RunReport {
    let grid = &case.grid;
    let net = &case.network;
    let nz = net.num_zones();
    let alloc = &solution.allocation;

    let mut generation = 0.0;
    let mut investment = 0.0;
    for (tech, g) in case.generators.iter().zip(&alloc.generators) {
        for t in 0..grid.len() {
            generation += grid.weight(t) * tech.variable_cost(g.dispatch[t]);
        }
        investment += tech.capex * (g.capacity - tech.existing);
    }

    let mut served = vec![0.0; nz];
    let mut ens = vec![0.0; nz];
    let mut ens_cost = vec![0.0; nz];
    let mut energy_paid = vec![0.0; nz];
    for (c, d) in case.consumers.iter().zip(&alloc.consumers) {
        let mut volume = 0.0;
        for t in 0..grid.len() {
            let w = grid.weight(t);
            served[c.zone] += w * d.demand[t];
            volume += w * d.ens[t];
            energy_paid[c.zone] += w * alloc.energy.steps[t].prices[c.zone] * d.demand[t];
        }
        ens[c.zone] += volume;
        ens_cost[c.zone] += c.wtp * volume;
    }

    let mut energy_congestion = 0.0;
    let mut max_price: f64 = 0.0;
    let mut capped_steps = 0;
    for (t, step) in alloc.energy.steps.iter().enumerate() {
        let rent: f64 = step.prices.iter().zip(&step.net_positions).map(|(l, p)| l * p).sum();
        energy_congestion -= grid.weight(t) * rent;
        for &p in &step.prices {
            max_price = max_price.max(p);
            if p >= setup.price_cap * (1.0 - CAP_TOL) {
                capped_steps += 1;
            }
        }
    }

    let (capacity_prices, net_trade, gross, capacity_congestion, capacity_paid) = match &alloc.capacity {
        Some(cm) => {
            let paid: Vec<f64> = (0..nz)
                .map(|z| cm.prices.get(z).copied().unwrap_or(0.0) * cm.zonal_demand.get(z).copied().unwrap_or(0.0))
                .collect();
            let mut trade = cm.net_obligation.clone();
            trade.resize(nz, 0.0);
            (cm.prices.clone(), trade, cm.gross_trade(), cm.congestion_revenue(), paid)
        }
        None => (Vec::new(), vec![0.0; nz], 0.0, 0.0, vec![0.0; nz]),
    };

    let consumer_costs = (0..nz)
        .filter(|&z| served[z] > 0.0)
        .map(|z| {
            let energy = energy_paid[z] / served[z];
            let capacity = capacity_paid[z] / served[z];
            let ens = ens_cost[z] / served[z];
            ConsumerCost {
                zone: net.zones()[z].clone(),
                served_gwh: served[z] / 1e3,
                energy,
                capacity,
                ens,
                total: energy + capacity + ens,
            }
        })
        .collect();

    let generation_meur = generation / MEUR;
    let investment_meur = investment / MEUR;
    let ens_meur = ens_cost.iter().sum::<f64>() / MEUR;
    let total_meur = generation_meur + investment_meur + ens_meur;
    let increase_pct = baseline
        .map(|b| b.system_costs.total_meur)
        .filter(|b| b.abs() > 0.0)
        .map(|b| 100.0 * (total_meur - b) / b);

    RunReport {
        design: solution.design,
        converged: solution.converged,
        zones: net.zones().to_vec(),
        system_costs: SystemCosts {
            served_gwh: served.iter().sum::<f64>() / 1e3,
            generation_meur,
            investment_meur,
            ens_meur,
            total_meur,
            increase_pct,
        },
        congestion: CongestionRevenues {
            energy_meur: energy_congestion / MEUR,
            capacity_meur: capacity_congestion / MEUR,
            total_meur: (energy_congestion + capacity_congestion) / MEUR,
        },
        consumer_costs,
        net_trade,
        gross_capacity_trade: gross,
        capacity_prices,
        ens_gwh: ens.iter().map(|e| e / 1e3).collect(),
        max_energy_price: max_price,
        capped_steps,
    }
}

/// Largest relative violation of line limits and border limits by the
/// energy flows and the capacity market's scarcity flows or exchanges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliverabilityReport {
    pub energy_flows: f64,
    pub capacity: f64,
    pub accepted: bool,
}

pub fn check_deliverability(
    solution: &EquilibriumSolution,
    case: &CaseData,
    setup: &DesignSetup,
) -> Result<DeliverabilityReport> {
    let net = &case.network;
    let overload = |flows: &[f64]| {
        net.lines()
            .iter()
            .zip(flows)
            .map(|(l, f)| ((f.abs() - l.f_max) / l.f_max).max(0.0))
            .fold(0.0, f64::max)
    };
    let energy_flows = solution
        .allocation
        .energy
        .steps
        .iter()
        .map(|s| overload(&s.flows))
        .fold(0.0, f64::max);

    let mut capacity: f64 = 0.0;
    if let (Some(cm), Some(outcome)) = (&setup.capacity, &solution.allocation.capacity) {
        let scale = cm.demand.iter().map(|d| d.abs()).fold(1.0, f64::max);
        match &cm.coupling {
            CapacityCoupling::Isolated => {
                for p in &outcome.net_obligation {
                    capacity = capacity.max(p.abs() / scale);
                }
            }
            CapacityCoupling::FlowBased { scenarios } => {
                let ptdf = build_ptdf(net, 0)?;
                if outcome.scarcity_injections.len() != scenarios.len() {
                    return Err(Error::Dimension {
                        what: "scarcity injections",
                        expected: scenarios.len(),
                        got: outcome.scarcity_injections.len(),
                    });
                }
                for inj in &outcome.scarcity_injections {
                    capacity = capacity.max(overload(&ptdf.flows_unchecked(inj)));
                }
            }
            CapacityCoupling::Ntc { ntc, .. } => {
                capacity = capacity.max(box_violation(ntc, &outcome.bilateral_exchanges, scale));
                let np = ntc.net_positions(net, &outcome.bilateral_exchanges)?;
                for (a, b) in np.iter().zip(&outcome.net_obligation) {
                    capacity = capacity.max((a - b).abs() / scale);
                }
            }
        }
    }
    Ok(DeliverabilityReport {
        energy_flows,
        capacity,
        accepted: energy_flows <= DELIVERABILITY_TOL && capacity <= DELIVERABILITY_TOL,
    })
}

fn box_violation(ntc: &NtcBox, exchanges: &[f64], scale: f64) -> f64 {
    exchanges
        .iter()
        .zip(ntc.atc_plus.iter().zip(&ntc.atc_minus))
        .map(|(e, (hi, lo))| ((e - hi).max(-lo - e).max(0.0)) / scale)
        .fold(0.0, f64::max)
}

/// Everything needed to reproduce, audit or build on a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: ScenarioConfig,
    pub case: CaseData,
    pub setup: DesignSetup,
    pub solution: EquilibriumSolution,
    pub report: RunReport,
    pub deviation: DeviationReport,
    pub deliverability: DeliverabilityReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Verified,
    /// Not converged, or an agent can still gain, or flows exceed limits.
    Unverified,
}

impl RunArtifact {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn status(&self) -> RunStatus {
        if self.solution.converged && self.deviation.accepted && self.deliverability.accepted {
            RunStatus::Verified
        } else {
            RunStatus::Unverified
        }
    }

    /// Re-runs the best-response and deliverability checks on the stored
    /// solution.
    pub fn reverify(&self) -> Result<(DeviationReport, DeliverabilityReport)> {
        Ok((
            check_no_profitable_deviation(&self.solution, &self.case, &self.setup)?,
            check_deliverability(&self.solution, &self.case, &self.setup)?,
        ))
    }
}

/// Largest deliverable NTC box given the investments of a flow-based run.
pub fn ntc_domain(fbmc: &RunArtifact) -> Result<NtcBox> {
    if fbmc.setup.design != MarketDesign::CmFbmc {
        return Err(Error::MissingPrerequisite(format!(
            "expected a CM-FBMC artifact, got {}",
            fbmc.setup.design
        )));
    }
    let cfg = &fbmc.config;
    let setup = build_design_setup(
        &fbmc.case,
        MarketDesign::CmNtc,
        cfg.price_cap,
        &cfg.scarcity,
        cfg.capacity_reference_price,
        Some(&fbmc.solution.allocation),
    )?;
    match setup.capacity.map(|c| c.coupling) {
        Some(CapacityCoupling::Ntc { ntc, .. }) => Ok(ntc),
        _ => unreachable!("an NTC design always has an NTC coupling"),
    }
}

/// Solves one scenario. NTC and implicit designs take the flow-based run of
/// the same case from `fbmc`, or else from the scenario's artifact path.
pub fn execute(cfg: &ScenarioConfig, fbmc: Option<&RunArtifact>, baseline: Option<&RunReport>) -> Result<RunArtifact> {
    cfg.validate()?;
    let case = cfg.case()?;
    let loaded;
    let fbmc = match (fbmc, &cfg.fbmc_artifact) {
        (Some(a), _) => Some(a),
        (None, Some(path)) if cfg.design.requires_fbmc() => {
            loaded = RunArtifact::load(path)?;
            Some(&loaded)
        }
        _ => None,
    };
    if let Some(a) = fbmc {
        if a.setup.design != MarketDesign::CmFbmc {
            return Err(Error::MissingPrerequisite(format!(
                "expected a CM-FBMC artifact, got {}",
                a.setup.design
            )));
        }
        if a.case != case {
            return Err(Error::MissingPrerequisite(
                "the CM-FBMC artifact was computed on a different case".into(),
            ));
        }
    }
    let setup = build_design_setup(
        &case,
        cfg.design,
        cfg.price_cap,
        &cfg.scarcity,
        cfg.capacity_reference_price,
        fbmc.map(|a| &a.solution.allocation),
    )?;
    info!("solving {}", cfg.design);
    let solution = solve_equilibrium(&case, &setup, &cfg.admm)?;
    let deviation = check_no_profitable_deviation(&solution, &case, &setup)?;
    let deliverability = check_deliverability(&solution, &case, &setup)?;
    let report = compute_metrics(&solution, &case, &setup, baseline);
    Ok(RunArtifact {
        config: cfg.clone(),
        case,
        setup,
        solution,
        report,
        deviation,
        deliverability,
    })
}

/// Output files with their SHA-256 checksums, keyed by path relative to the
/// output directory.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    fn add(&mut self, root: &Path, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let key = path
            .strip_prefix(root)
            .unwrap_or(path)
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        self.files.insert(key, hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }
}

fn csv_writer(path: &Path) -> Result<(csv::Writer<fs::File>, impl Fn(csv::Error) -> Error + '_)> {
    let err = move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let w = csv::Writer::from_path(path).map_err(err)?;
    Ok((w, err))
}

fn num(x: f64) -> String {
    format!("{}", x + 0.0)
}

/// Writes the CSV tables, the residual history, `run.json` and a manifest.
pub fn emit_outputs(artifact: &RunArtifact, out_dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let r = &artifact.report;
    let design = r.design.name();
    let mut written: Vec<PathBuf> = Vec::new();

    let path = out_dir.join("system_costs.csv");
    {
        let (mut w, err) = csv_writer(&path)?;
        w.write_record([
            "design",
            "served_gwh",
            "generation_meur",
            "investment_meur",
            "ens_meur",
            "total_meur",
            "increase_pct",
            "converged",
        ])
        .map_err(&err)?;
        let c = &r.system_costs;
        w.write_record([
            design.to_string(),
            num(c.served_gwh),
            num(c.generation_meur),
            num(c.investment_meur),
            num(c.ens_meur),
            num(c.total_meur),
            c.increase_pct.map(num).unwrap_or_default(),
            r.converged.to_string(),
        ])
        .map_err(&err)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    written.push(path);

    let path = out_dir.join("congestion_rents.csv");
    {
        let (mut w, err) = csv_writer(&path)?;
        w.write_record(["design", "energy_meur", "capacity_meur", "total_meur"])
            .map_err(&err)?;
        let c = &r.congestion;
        w.write_record([design.to_string(), num(c.energy_meur), num(c.capacity_meur), num(c.total_meur)])
            .map_err(&err)?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    written.push(path);

    let path = out_dir.join("consumer_costs.csv");
    {
        let (mut w, err) = csv_writer(&path)?;
        w.write_record([
            "zone",
            "served_gwh",
            "energy_eur_mwh",
            "capacity_eur_mwh",
            "ens_eur_mwh",
            "total_eur_mwh",
        ])
        .map_err(&err)?;
        for c in &r.consumer_costs {
            w.write_record([
                c.zone.clone(),
                num(c.served_gwh),
                num(c.energy),
                num(c.capacity),
                num(c.ens),
                num(c.total),
            ])
            .map_err(&err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    written.push(path);

    let path = out_dir.join("net_trade.csv");
    {
        let (mut w, err) = csv_writer(&path)?;
        w.write_record(["zone", "net_capacity_export_mw", "capacity_price_eur_mw", "ens_gwh"])
            .map_err(&err)?;
        if r.system_costs.served_gwh > 0.0 {
            for (z, zone) in r.zones.iter().enumerate() {
                w.write_record([
                    zone.clone(),
                    num(r.net_trade[z]),
                    r.capacity_prices.get(z).copied().map(num).unwrap_or_default(),
                    num(r.ens_gwh[z]),
                ])
                .map_err(&err)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    written.push(path);

    let path = out_dir.join("capacity_mix.csv");
    {
        let (mut w, err) = csv_writer(&path)?;
        w.write_record(["zone", "tech", "existing_mw", "capacity_mw", "cm_offer_mw"])
            .map_err(&err)?;
        let zones = artifact.case.network.zones();
        for (tech, g) in artifact.case.generators.iter().zip(&artifact.solution.allocation.generators) {
            if g.capacity <= 0.0 && tech.existing <= 0.0 {
                continue;
            }
            w.write_record([
                zones[tech.zone].clone(),
                tech.id.clone(),
                num(tech.existing),
                num(g.capacity),
                num(g.cm_offer),
            ])
            .map_err(&err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    written.push(path);

    let path = out_dir.join("residuals.csv");
    artifact.solution.write_residuals_csv(&path)?;
    written.push(path);

    let path = out_dir.join("run.json");
    write_json(&path, artifact)?;
    written.push(path);

    let mut manifest = Manifest::default();
    for p in &written {
        manifest.add(out_dir, p)?;
    }
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Runs the six designs in dependency order into one sub-directory each and
/// writes a cost summary and a manifest covering every file.
///
/// `base` supplies the data source, scarcity rule and solver settings; each
/// design gets its own price cap.
pub fn run_batch(base: &ScenarioConfig, out_dir: &Path) -> Result<(Vec<RunArtifact>, Manifest)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut runs: Vec<RunArtifact> = Vec::new();
    let mut manifest = Manifest::default();
    for design in MarketDesign::ALL {
        let mut cfg = ScenarioConfig::for_design(design, base.data.clone());
        cfg.wtp = base.wtp;
        if design.is_capped() {
            cfg.price_cap = base.price_cap.min(base.wtp);
        } else {
            cfg.price_cap = base.wtp;
        }
        cfg.elastic_share = base.elastic_share;
        cfg.scarcity = base.scarcity.clone();
        cfg.capacity_reference_price = base.capacity_reference_price;
        cfg.weights = base.weights.clone();
        cfg.admm = base.admm.clone();
        let fbmc = runs.iter().find(|a| a.setup.design == MarketDesign::CmFbmc);
        let baseline = runs.iter().find(|a| a.setup.design == MarketDesign::EomRef).map(|a| &a.report);
        let artifact = execute(&cfg, fbmc, baseline)?;
        let sub = out_dir.join(design.name());
        for (k, v) in emit_outputs(&artifact, &sub)?.files {
            manifest.files.insert(format!("{}/{k}", design.name()), v);
        }
        runs.push(artifact);
    }

    let path = out_dir.join("summary.csv");
    {
        let (mut w, err) = csv_writer(&path)?;
        w.write_record([
            "design",
            "total_meur",
            "generation_meur",
            "investment_meur",
            "ens_meur",
            "increase_pct",
            "energy_congestion_meur",
            "capacity_congestion_meur",
            "converged",
            "verified",
        ])
        .map_err(&err)?;
        for a in &runs {
            let c = &a.report.system_costs;
            w.write_record([
                a.report.design.name().to_string(),
                num(c.total_meur),
                num(c.generation_meur),
                num(c.investment_meur),
                num(c.ens_meur),
                c.increase_pct.map(num).unwrap_or_default(),
                num(a.report.congestion.energy_meur),
                num(a.report.congestion.capacity_meur),
                a.solution.converged.to_string(),
                (a.status() == RunStatus::Verified).to_string(),
            ])
            .map_err(&err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    manifest.add(out_dir, &path)?;
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok((runs, manifest))
}
