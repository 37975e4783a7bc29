//! Scenario configuration, profile ingestion and synthetic case generation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::case::{CaseData, DesignSetup};
use crate::equilibrium::{AdmmConfig, Allocation};
use crate::error::{Error, Result};
use crate::market_clearing::{
    build_scarcity_scenarios, compute_capacity_demand, peak_residual_demand, CapacityCoupling, CapacityMarketSetup,
    MarketDesign, ScarcityRule,
};
use crate::network::{build_ptdf, compute_max_ntc_box, Line, Network};
use crate::participants::{ConsumerBlock, GeneratorTech, TimeGrid};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "CAPMKT_DATA_DIR";

pub const NETWORK_FILE: &str = "network.json";
pub const TECHNOLOGIES_FILE: &str = "technologies.json";
pub const DEMAND_FILE: &str = "demand.csv";
pub const AVAILABILITY_FILE: &str = "availability.csv";
pub const RENEWABLES_FILE: &str = "renewable_capacity.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";

/// Default willingness to pay in EUR/MWh.
pub const DEFAULT_WTP: f64 = 20_000.0;
/// Default administrative price cap in EUR/MWh.
pub const DEFAULT_PRICE_CAP: f64 = 4_000.0;
pub const DEFAULT_ELASTIC_SHARE: f64 = 0.2;

/// Availability of one technology in one zone per timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityProfile {
    pub tech: String,
    pub zone: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewableCapacity {
    pub tech: String,
    pub zone: String,
    pub capacity_mw: f64,
}

/// Demand and availability profiles on a common time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub zones: Vec<String>,
    pub steps: usize,
    /// `[zone][step]` reference demand in MW.
    pub demand: Vec<Vec<f64>>,
    /// Sorted by (tech, zone).
    pub availability: Vec<AvailabilityProfile>,
    /// Exogenous renewable capacities; their availability rows give the in-feed.
    pub renewable_capacity: Vec<RenewableCapacity>,
}

impl ProfileSet {
    pub fn availability_of(&self, tech: &str, zone: &str) -> Option<&[f64]> {
        self.availability
            .iter()
            .find(|a| a.tech == tech && a.zone == zone)
            .map(|a| a.values.as_slice())
    }

    /// Renewable in-feed per zone and step.
    pub fn renewable_infeed(&self) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![vec![0.0; self.steps]; self.zones.len()];
        for rc in &self.renewable_capacity {
            let z = self
                .zones
                .iter()
                .position(|z| *z == rc.zone)
                .ok_or_else(|| Error::InvalidParameter(format!("renewable capacity in unknown zone {}", rc.zone)))?;
            let af = self.availability_of(&rc.tech, &rc.zone).ok_or_else(|| {
                Error::InvalidParameter(format!("no availability profile for renewable {} in {}", rc.tech, rc.zone))
            })?;
            for (t, a) in af.iter().enumerate() {
                out[z][t] += rc.capacity_mw * a;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct DemandRow {
    zone: String,
    timestep: usize,
    demand_mw: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct AvailabilityRow {
    tech: String,
    zone: String,
    timestep: usize,
    availability: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct WeightRow {
    timestep: usize,
    weight_h: f64,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path, problems: &mut Vec<String>) -> Result<Vec<(usize, T)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<T>().enumerate() {
        // header is line 1
        let line = i + 2;
        match rec {
            Ok(r) => rows.push((line, r)),
            Err(e) => problems.push(format!("row {line}: {e}")),
        }
    }
    Ok(rows)
}

fn schema_error(path: &Path, problems: Vec<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        problems,
    }
}

/// Reads `demand.csv`, `availability.csv` and `renewable_capacity.csv` from a
/// directory, reporting every schema violation with its row number.
pub fn load_profiles(dir: &Path) -> Result<ProfileSet> {
    let demand_path = dir.join(DEMAND_FILE);
    let mut problems = Vec::new();
    let rows: Vec<(usize, DemandRow)> = read_rows(&demand_path, &mut problems)?;
    let mut zones: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, usize), (usize, f64)> = BTreeMap::new();
    for (line, r) in rows {
        if !(r.demand_mw >= 0.0 && r.demand_mw.is_finite()) {
            problems.push(format!("row {line}: demand {} must be finite and nonnegative", r.demand_mw));
        }
        if !zones.contains(&r.zone) {
            zones.push(r.zone.clone());
        }
        if let Some((first, _)) = cells.insert((r.zone.clone(), r.timestep), (line, r.demand_mw)) {
            problems.push(format!("row {line}: duplicate (zone {}, timestep {}) first seen in row {first}", r.zone, r.timestep));
        }
    }
    let steps = cells.keys().map(|(_, t)| t + 1).max().unwrap_or(0);
    let mut demand = vec![vec![0.0; steps]; zones.len()];
    for (z, zone) in zones.iter().enumerate() {
        for (t, d) in demand[z].iter_mut().enumerate() {
            match cells.get(&(zone.clone(), t)) {
                Some(&(_, v)) => *d = v,
                None => problems.push(format!("missing demand for zone {zone} at timestep {t}")),
            }
        }
    }
    if !problems.is_empty() {
        return Err(schema_error(&demand_path, problems));
    }

    let av_path = dir.join(AVAILABILITY_FILE);
    let rows: Vec<(usize, AvailabilityRow)> = read_rows(&av_path, &mut problems)?;
    let mut series: BTreeMap<(String, String), Vec<Option<f64>>> = BTreeMap::new();
    for (line, r) in rows {
        if !(0.0..=1.0).contains(&r.availability) {
            problems.push(format!("row {line}: availability {} outside [0, 1]", r.availability));
            continue;
        }
        if !zones.contains(&r.zone) {
            problems.push(format!("row {line}: unknown zone {}", r.zone));
            continue;
        }
        if r.timestep >= steps {
            problems.push(format!("row {line}: timestep {} beyond the demand horizon {steps}", r.timestep));
            continue;
        }
        let s = series.entry((r.tech.clone(), r.zone.clone())).or_insert_with(|| vec![None; steps]);
        if s[r.timestep].replace(r.availability).is_some() {
            problems.push(format!("row {line}: duplicate (tech {}, zone {}, timestep {})", r.tech, r.zone, r.timestep));
        }
    }
    let mut availability = Vec::new();
    for ((tech, zone), values) in series {
        if let Some(t) = values.iter().position(Option::is_none) {
            problems.push(format!("missing availability for {tech} in {zone} at timestep {t}"));
            continue;
        }
        availability.push(AvailabilityProfile {
            tech,
            zone,
            values: values.into_iter().flatten().collect(),
        });
    }
    if !problems.is_empty() {
        return Err(schema_error(&av_path, problems));
    }

    let rc_path = dir.join(RENEWABLES_FILE);
    let rows: Vec<(usize, RenewableCapacity)> = read_rows(&rc_path, &mut problems)?;
    let mut seen = BTreeSet::new();
    let mut renewable_capacity = Vec::new();
    for (line, r) in rows {
        if !(r.capacity_mw >= 0.0 && r.capacity_mw.is_finite()) {
            problems.push(format!("row {line}: capacity {} must be finite and nonnegative", r.capacity_mw));
        }
        if !zones.contains(&r.zone) {
            problems.push(format!("row {line}: unknown zone {}", r.zone));
        }
        if !seen.insert((r.tech.clone(), r.zone.clone())) {
            problems.push(format!("row {line}: duplicate (tech {}, zone {})", r.tech, r.zone));
        }
        if !availability.iter().any(|a| a.tech == r.tech && a.zone == r.zone) {
            problems.push(format!("row {line}: no availability profile for {} in {}", r.tech, r.zone));
        }
        renewable_capacity.push(r);
    }
    if !problems.is_empty() {
        return Err(schema_error(&rc_path, problems));
    }
    Ok(ProfileSet {
        zones,
        steps,
        demand,
        availability,
        renewable_capacity,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_profiles(profiles: &ProfileSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        &dir.join(DEMAND_FILE),
        profiles.zones.iter().enumerate().flat_map(|(z, zone)| {
            profiles.demand[z].iter().enumerate().map(move |(t, &d)| DemandRow {
                zone: zone.clone(),
                timestep: t,
                demand_mw: d,
            })
        }),
    )?;
    write_csv(
        &dir.join(AVAILABILITY_FILE),
        profiles.availability.iter().flat_map(|a| {
            a.values.iter().enumerate().map(move |(t, &v)| AvailabilityRow {
                tech: a.tech.clone(),
                zone: a.zone.clone(),
                timestep: t,
                availability: v,
            })
        }),
    )?;
    write_csv(&dir.join(RENEWABLES_FILE), profiles.renewable_capacity.iter())
}

/// Dispatchable technology as stored in `technologies.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechnologySpec {
    pub id: String,
    pub zone: String,
    pub a_quad: f64,
    pub b_lin: f64,
    pub capex: f64,
    #[serde(default)]
    pub existing: f64,
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Everything a data directory holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseInputs {
    pub network: Network,
    pub technologies: Vec<TechnologySpec>,
    pub profiles: ProfileSet,
    /// Hours per timestep; `None` spreads 8760 h evenly.
    pub weights: Option<Vec<f64>>,
}

impl CaseInputs {
    pub fn load(dir: &Path) -> Result<Self> {
        let weights_path = dir.join(WEIGHTS_FILE);
        let weights = if weights_path.exists() {
            let mut problems = Vec::new();
            let rows: Vec<(usize, WeightRow)> = read_rows(&weights_path, &mut problems)?;
            let mut w = vec![None; rows.len()];
            for (line, r) in rows {
                match w.get_mut(r.timestep) {
                    Some(slot) if slot.is_none() => *slot = Some(r.weight_h),
                    Some(_) => problems.push(format!("row {line}: duplicate timestep {}", r.timestep)),
                    None => problems.push(format!("row {line}: timestep {} out of range", r.timestep)),
                }
            }
            if !problems.is_empty() || w.iter().any(Option::is_none) {
                problems.push("weights must cover every timestep once".into());
                return Err(schema_error(&weights_path, problems));
            }
            Some(w.into_iter().flatten().collect())
        } else {
            None
        };
        Ok(CaseInputs {
            network: Network::load(&dir.join(NETWORK_FILE))?,
            technologies: read_json(&dir.join(TECHNOLOGIES_FILE))?,
            profiles: load_profiles(dir)?,
            weights,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_profiles(&self.profiles, dir)?;
        self.network.save(&dir.join(NETWORK_FILE))?;
        write_json(&dir.join(TECHNOLOGIES_FILE), &self.technologies)?;
        if let Some(w) = &self.weights {
            write_csv(
                &dir.join(WEIGHTS_FILE),
                w.iter().enumerate().map(|(timestep, &weight_h)| WeightRow { timestep, weight_h }),
            )?;
        }
        Ok(())
    }

    /// Case data with one consumer per zone calibrated on the reference demand.
    pub fn to_case(&self, elastic_share: f64, wtp: f64, weights: Option<&[f64]>) -> Result<CaseData> {
        let p = &self.profiles;
        let net = &self.network;
        if p.zones.len() != net.num_zones() {
            return Err(Error::Dimension {
                what: "profile zones",
                expected: net.num_zones(),
                got: p.zones.len(),
            });
        }
        let zone_idx = |name: &str| {
            net.zone_index(name)
                .ok_or_else(|| Error::InvalidParameter(format!("zone {name} not in the network")))
        };
        // reorder profile zones to network order
        let mut demand = vec![Vec::new(); net.num_zones()];
        let mut renewables = vec![Vec::new(); net.num_zones()];
        let infeed = p.renewable_infeed()?;
        for (i, name) in p.zones.iter().enumerate() {
            let z = zone_idx(name)?;
            demand[z] = p.demand[i].clone();
            renewables[z] = infeed[i].clone();
        }
        let weights = match (weights, &self.weights) {
            (Some(w), _) => w.to_vec(),
            (None, Some(w)) => w.clone(),
            (None, None) => vec![8760.0 / p.steps as f64; p.steps],
        };
        let generators = self
            .technologies
            .iter()
            .map(|t| {
                Ok(GeneratorTech {
                    id: t.id.clone(),
                    zone: zone_idx(&t.zone)?,
                    a_quad: t.a_quad,
                    b_lin: t.b_lin,
                    capex: t.capex,
                    existing: t.existing,
                    availability: p
                        .availability_of(&t.id, &t.zone)
                        .map_or_else(|| vec![1.0; p.steps], <[f64]>::to_vec),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ordered = ProfileSet {
            zones: net.zones().to_vec(),
            demand,
            ..p.clone()
        };
        let case = CaseData {
            network: net.clone(),
            grid: TimeGrid::new(weights)?,
            generators,
            consumers: calibrate_demand(&ordered, elastic_share, wtp)?,
            renewables,
        };
        case.validate()?;
        Ok(case)
    }
}

/// One consumer per zone with elastic share `eps` of reference demand and
/// inverse demand slope `-wtp / (eps * D)`.
pub fn calibrate_demand(profiles: &ProfileSet, eps: f64, wtp: f64) -> Result<Vec<ConsumerBlock>> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!("elastic share must lie in (0, 1), got {eps}")));
    }
    if !(wtp > 0.0) {
        return Err(Error::InvalidParameter(format!("willingness to pay must be positive, got {wtp}")));
    }
    Ok(profiles
        .demand
        .iter()
        .enumerate()
        .map(|(zone, d)| ConsumerBlock {
            zone,
            ref_demand: d.clone(),
            elastic_share: eps,
            wtp,
            curtailment_value: wtp,
        })
        .collect())
}

/// Parameters of the synthetic three-zone, four-node case study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Zonal peak demand in MW.
    pub peaks: [f64; 3],
    /// Hour of each zone's peak.
    pub peak_hours: [usize; 3],
    /// Ratio of stressed to ordinary demand inside the scarcity window.
    pub peak_uplift: f64,
    /// First and last hour of the scarcity window.
    pub window: (usize, usize),
    /// Renewable availability cap inside the window.
    pub availability_cap: f64,
    /// Hours per year represented by each step of the window.
    pub window_weight: f64,
    pub cross_border_mw: f64,
    pub intra_zonal_mw: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            peaks: [19_000.0, 16_000.0, 18_000.0],
            peak_hours: [18, 19, 20],
            peak_uplift: 1.5,
            window: (17, 21),
            availability_cap: 0.10,
            window_weight: 1.0,
            cross_border_mw: 3000.0,
            intra_zonal_mw: 500.0,
            seed: 0,
        }
    }
}

/// Normalized winter-day load shape with its maximum at hour 18.
const WINTER_DAY: [f64; 24] = [
    0.62, 0.58, 0.56, 0.55, 0.56, 0.60, 0.68, 0.78, 0.85, 0.88, 0.89, 0.89, 0.88, 0.87, 0.86, 0.87, 0.90, 0.96,
    1.00, 0.98, 0.93, 0.85, 0.76, 0.68,
];

/// Three zones A, B, C; A holds nodes n1 and n2 (demand shares 0.6 and 0.4),
/// B holds n3 and C holds n4. Lines n1-n2 (intra-zonal), n1-n3, n2-n4 and
/// n3-n4, all with unit susceptance.
pub fn synthesize_case_study(params: &SynthParams) -> Result<CaseInputs> {
    let (w0, w1) = params.window;
    if w0 > w1 || w1 >= 24 {
        return Err(Error::InvalidParameter(format!("scarcity window {w0}..{w1} must lie within one day")));
    }
    if !(params.peak_uplift >= 1.0) {
        return Err(Error::InvalidParameter("peak uplift must be at least 1".into()));
    }
    let window_steps = (w1 - w0 + 1) as f64;
    if !(params.window_weight > 0.0 && params.window_weight * window_steps < 8760.0) {
        return Err(Error::InvalidParameter("window weight must leave hours for the other steps".into()));
    }
    let zones = ["A", "B", "C"];
    let line = |id: &str, from, to, f_max| Line {
        id: id.into(),
        from,
        to,
        susceptance: 1.0,
        f_max,
    };
    let network = Network::new(
        vec!["n1".into(), "n2".into(), "n3".into(), "n4".into()],
        zones.iter().map(|z| z.to_string()).collect(),
        vec![0, 0, 1, 2],
        vec![
            line("n1-n2", 0, 1, params.intra_zonal_mw),
            line("n1-n3", 0, 2, params.cross_border_mw),
            line("n2-n4", 1, 3, params.cross_border_mw),
            line("n3-n4", 2, 3, params.cross_border_mw),
        ],
        vec![0.6, 0.4, 1.0, 1.0],
    )?;

    let in_window = |h: usize| (w0..=w1).contains(&h);
    let demand: Vec<Vec<f64>> = (0..3)
        .map(|z| {
            let peak_hour = params.peak_hours[z];
            let shift = (peak_hour + 24 - 18) % 24;
            let ordinary = params.peaks[z] / params.peak_uplift;
            (0..24)
                .map(|h| {
                    let shape = WINTER_DAY[(h + 24 - shift) % 24];
                    if h == peak_hour {
                        params.peaks[z]
                    } else if in_window(h) {
                        ordinary * shape * params.peak_uplift
                    } else {
                        ordinary * shape
                    }
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut availability = Vec::new();
    let mut renewable_capacity = Vec::new();
    let capacities = [(15_400.0, 13_700.0), (8_800.0, 5_300.0), (18_700.0, 8_300.0)];
    for (z, zone) in zones.iter().enumerate() {
        let cap = |h: usize, v: f64| {
            let v = v.clamp(0.0, 1.0);
            if in_window(h) {
                v.min(params.availability_cap)
            } else {
                v
            }
        };
        let solar: Vec<f64> = (0..24)
            .map(|h| {
                let x = (h as f64 + 0.5 - 8.0) / 8.5;
                cap(h, if (0.0..=1.0).contains(&x) { 0.35 * (x * std::f64::consts::PI).sin() } else { 0.0 })
            })
            .collect();
        let phase = z as f64 * 0.7;
        let wind: Vec<f64> = (0..24)
            .map(|h| {
                let base = 0.32 + 0.10 * ((h as f64 + 3.0) / 24.0 * std::f64::consts::TAU + phase).sin();
                let noise: f64 = rng.random_range(-0.03..0.03);
                cap(h, base + noise)
            })
            .collect();
        for (tech, values, mw) in [("solar", solar, capacities[z].0), ("wind", wind, capacities[z].1)] {
            availability.push(AvailabilityProfile {
                tech: tech.into(),
                zone: zone.to_string(),
                values,
            });
            renewable_capacity.push(RenewableCapacity {
                tech: tech.into(),
                zone: zone.to_string(),
                capacity_mw: mw,
            });
        }
    }
    availability.sort_by(|a, b| (&a.tech, &a.zone).cmp(&(&b.tech, &b.zone)));

    let peak_costs = [(0.04, 60_000.0), (0.06, 70_000.0), (0.08, 80_000.0)];
    let mut technologies = Vec::new();
    for (z, zone) in zones.iter().enumerate() {
        let tech = |kind: &str, a_quad, b_lin, capex| TechnologySpec {
            id: format!("{kind}-{zone}"),
            zone: zone.to_string(),
            a_quad,
            b_lin,
            capex,
            existing: 0.0,
        };
        technologies.push(tech("base", 0.008, 20.0, 190_000.0));
        technologies.push(tech("mid", 0.032, 55.0, 110_000.0));
        technologies.push(tech("peak", peak_costs[z].0, 90.0, peak_costs[z].1));
    }

    let other = (8760.0 - params.window_weight * window_steps) / (24.0 - window_steps);
    let weights = (0..24)
        .map(|h| if in_window(h) { params.window_weight } else { other })
        .collect();
    Ok(CaseInputs {
        network,
        technologies,
        profiles: ProfileSet {
            zones: zones.iter().map(|z| z.to_string()).collect(),
            steps: 24,
            demand,
            availability,
            renewable_capacity,
        },
        weights: Some(weights),
    })
}

/// Where the case data of a scenario comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// A directory with network, technology and profile files; relative
    /// paths resolve against the scenario file and then `CAPMKT_DATA_DIR`.
    Directory(PathBuf),
    Synthetic(SynthParams),
}

/// One run: design, price rules, data and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub design: MarketDesign,
    /// Energy price cap in EUR/MWh; for an uncapped design this equals the WTP.
    pub price_cap: f64,
    #[serde(default = "default_wtp")]
    pub wtp: f64,
    #[serde(default = "default_elastic_share")]
    pub elastic_share: f64,
    #[serde(default)]
    pub scarcity: ScarcityRule,
    /// Price at which the elastic block enters the peak residual demand that
    /// sets the capacity demand.
    #[serde(default)]
    pub capacity_reference_price: f64,
    /// Hours per timestep, overriding the data source.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    pub data: DataSource,
    /// `run.json` of a flow-based capacity market run (NTC and implicit designs).
    #[serde(default)]
    pub fbmc_artifact: Option<PathBuf>,
    #[serde(default)]
    pub admm: AdmmConfig,
}

fn default_wtp() -> f64 {
    DEFAULT_WTP
}

fn default_elastic_share() -> f64 {
    DEFAULT_ELASTIC_SHARE
}

impl ScenarioConfig {
    /// Table of designs: uncapped energy-only at the WTP, all others at the
    /// default cap.
    pub fn for_design(design: MarketDesign, data: DataSource) -> Self {
        ScenarioConfig {
            design,
            price_cap: if design.is_capped() { DEFAULT_PRICE_CAP } else { DEFAULT_WTP },
            wtp: DEFAULT_WTP,
            elastic_share: DEFAULT_ELASTIC_SHARE,
            scarcity: ScarcityRule::default(),
            capacity_reference_price: 0.0,
            weights: None,
            data,
            fbmc_artifact: None,
            admm: AdmmConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ScenarioConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Directory(dir) = &mut cfg.data {
            *dir = resolve(base, dir);
        }
        if let Some(p) = &mut cfg.fbmc_artifact {
            *p = resolve(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.price_cap > 0.0 && self.price_cap <= self.wtp) {
            return Err(Error::InvalidParameter(format!(
                "price cap {} must be positive and at most the willingness to pay {}",
                self.price_cap, self.wtp
            )));
        }
        if !(self.elastic_share > 0.0 && self.elastic_share < 1.0) {
            return Err(Error::InvalidParameter("elastic share must lie in (0, 1)".into()));
        }
        self.admm.validate()?;
        Ok(())
    }

    pub fn inputs(&self) -> Result<CaseInputs> {
        match &self.data {
            DataSource::Directory(dir) => CaseInputs::load(dir),
            DataSource::Synthetic(p) => synthesize_case_study(p),
        }
    }

    pub fn case(&self) -> Result<CaseData> {
        self.inputs()?
            .to_case(self.elastic_share, self.wtp, self.weights.as_deref())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    let local = base.join(p);
    if local.exists() {
        return local;
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => PathBuf::from(root).join(p),
        None => local,
    }
}

/// Market rules of a design on a case. NTC and implicit designs derive their
/// border limits or expected imports from the allocation of a flow-based
/// capacity market run on the same case.
pub fn build_design_setup(
    case: &CaseData,
    design: MarketDesign,
    price_cap: f64,
    rule: &ScarcityRule,
    reference_price: f64,
    fbmc: Option<&Allocation>,
) -> Result<DesignSetup> {
    if !design.has_capacity_market() {
        return Ok(DesignSetup {
            design,
            price_cap,
            capacity: None,
        });
    }
    let net = &case.network;
    let peak = peak_residual_demand(&case.consumers, &case.renewables, reference_price);
    let scenarios = build_scarcity_scenarios(net, &peak, rule)?;
    let prerequisite = || {
        fbmc.ok_or_else(|| Error::MissingPrerequisite(format!("{design} needs the CM-FBMC solution of the same case")))
    };
    let (demand, coupling) = match design {
        MarketDesign::CmNoCbp => (
            compute_capacity_demand(design, &case.consumers, &case.renewables, reference_price, None)?,
            CapacityCoupling::Isolated,
        ),
        MarketDesign::CmFbmc => (
            compute_capacity_demand(design, &case.consumers, &case.renewables, reference_price, None)?,
            CapacityCoupling::FlowBased { scenarios },
        ),
        MarketDesign::CmNtc => {
            let sol = prerequisite()?;
            let ptdf = build_ptdf(net, 0)?;
            let demands: Vec<Vec<f64>> = scenarios.iter().map(|s| s.nodal_capacity_demand.clone()).collect();
            let ntc = compute_max_ntc_box(net, &ptdf, &sol.energy.nodal_caps, &demands)?;
            (
                compute_capacity_demand(design, &case.consumers, &case.renewables, reference_price, None)?,
                CapacityCoupling::Ntc { ntc, scenarios },
            )
        }
        MarketDesign::CmImplicit => {
            let sol = prerequisite()?;
            let outcome = sol
                .capacity
                .as_ref()
                .ok_or_else(|| Error::MissingPrerequisite("CM-FBMC solution has no capacity market outcome".into()))?;
            let imports = outcome.expected_scarcity_imports(net, &scenarios);
            (
                compute_capacity_demand(design, &case.consumers, &case.renewables, reference_price, Some(&imports))?,
                CapacityCoupling::Isolated,
            )
        }
        MarketDesign::EomRef | MarketDesign::EomCap => unreachable!("handled above"),
    };
    let setup = DesignSetup {
        design,
        price_cap,
        capacity: Some(CapacityMarketSetup { demand, coupling }),
    };
    setup.validate(case)?;
    Ok(setup)
}

/// Small two-zone, three-node case with base, mid and peak technologies.
///
/// Zone A holds nodes a1 and a2 joined by a 400 MW line; both connect to the
/// single node of zone B through 1.5 GW lines.
pub fn toy_case(steps: usize) -> Result<CaseData> {
    let line = |id: &str, from, to, f_max| Line {
        id: id.into(),
        from,
        to,
        susceptance: 1.0,
        f_max,
    };
    let network = Network::new(
        vec!["a1".into(), "a2".into(), "b1".into()],
        vec!["A".into(), "B".into()],
        vec![0, 0, 1],
        vec![
            line("a1-a2", 0, 1, 400.0),
            line("a1-b1", 0, 2, 1500.0),
            line("a2-b1", 1, 2, 1500.0),
        ],
        vec![0.6, 0.4, 1.0],
    )?;
    let grid = TimeGrid::new(vec![8760.0 / steps as f64; steps])?;
    let shape = |t: usize, peak_step: f64| {
        let x = (t as f64 - peak_step) / steps as f64 * std::f64::consts::TAU;
        0.75 + 0.25 * x.cos()
    };
    let peak = steps as f64 * 0.75;
    let demand_a: Vec<f64> = (0..steps).map(|t| 3000.0 * shape(t, peak)).collect();
    let demand_b: Vec<f64> = (0..steps).map(|t| 2500.0 * shape(t, peak + 1.0)).collect();
    let consumer = |zone, ref_demand| ConsumerBlock {
        zone,
        ref_demand,
        elastic_share: 0.2,
        wtp: 20_000.0,
        curtailment_value: 20_000.0,
    };
    let tech = |id: &str, zone, a_quad, b_lin, capex| GeneratorTech {
        id: id.into(),
        zone,
        a_quad,
        b_lin,
        capex,
        existing: 0.0,
        availability: vec![1.0; steps],
    };
    let solar = |t: usize| {
        let x = (t as f64 / steps as f64 - 0.5) * std::f64::consts::TAU;
        (x.cos()).max(0.0)
    };
    Ok(CaseData {
        network,
        grid,
        generators: vec![
            tech("base-A", 0, 0.008, 20.0, 190_000.0),
            tech("peak-A", 0, 0.04, 90.0, 60_000.0),
            tech("mid-B", 1, 0.032, 55.0, 110_000.0),
        ],
        consumers: vec![consumer(0, demand_a), consumer(1, demand_b)],
        renewables: vec![
            (0..steps).map(|t| 800.0 * solar(t)).collect(),
            (0..steps).map(|t| 300.0 * solar(t)).collect(),
        ],
    })
}

#[cfg(test)]
mod tests;
