//! DC load-flow network model: PTDFs, exact projection of nodal feasibility
//! onto zonal net positions, and the largest NTC box inside the flow-based
//! domain.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{solve_qp, QpProblem};

/// Relative tolerance on the balance of nodal injections and zonal net positions.
pub const BALANCE_TOL: f64 = 1e-6;

/// Relative tolerance when deciding that a projection LP has no violation left.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Network file layout, with string identifiers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkSpec {
    pub nodes: Vec<String>,
    pub zones: Vec<String>,
    pub node_zone: BTreeMap<String, String>,
    pub lines: Vec<LineSpec>,
    pub demand_share: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LineSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    pub susceptance: f64,
    pub f_max_mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
    pub f_max: f64,
}

/// Validated, index-based network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkSpec", into = "NetworkSpec")]
pub struct Network {
    nodes: Vec<String>,
    zones: Vec<String>,
    node_zone: Vec<usize>,
    zone_nodes: Vec<Vec<usize>>,
    lines: Vec<Line>,
    demand_share: Vec<f64>,
}

impl TryFrom<NetworkSpec> for Network {
    type Error = Error;
    fn try_from(spec: NetworkSpec) -> Result<Self> {
        Network::from_spec(&spec)
    }
}

impl From<Network> for NetworkSpec {
    fn from(net: Network) -> Self {
        net.to_spec()
    }
}

impl Network {
    pub fn from_spec(spec: &NetworkSpec) -> Result<Self> {
        let node_index: BTreeMap<&str, usize> = spec
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        if node_index.len() != spec.nodes.len() {
            return Err(Error::InvalidNetwork("duplicate node id".into()));
        }
        let zone_index: BTreeMap<&str, usize> = spec
            .zones
            .iter()
            .enumerate()
            .map(|(i, z)| (z.as_str(), i))
            .collect();
        if zone_index.len() != spec.zones.len() {
            return Err(Error::InvalidNetwork("duplicate zone id".into()));
        }

        let mut node_zone = Vec::with_capacity(spec.nodes.len());
        for n in &spec.nodes {
            let z = spec
                .node_zone
                .get(n)
                .ok_or_else(|| Error::InvalidNetwork(format!("node {n} has no zone")))?;
            let zi = *zone_index
                .get(z.as_str())
                .ok_or_else(|| Error::InvalidNetwork(format!("node {n} maps to unknown zone {z}")))?;
            node_zone.push(zi);
        }
        for n in spec.node_zone.keys() {
            if !node_index.contains_key(n.as_str()) {
                return Err(Error::InvalidNetwork(format!("zone map names unknown node {n}")));
            }
        }

        let mut demand_share = Vec::with_capacity(spec.nodes.len());
        for n in &spec.nodes {
            let s = *spec
                .demand_share
                .get(n)
                .ok_or_else(|| Error::InvalidNetwork(format!("node {n} has no demand share")))?;
            demand_share.push(s);
        }

        let mut lines = Vec::with_capacity(spec.lines.len());
        for l in &spec.lines {
            let from = *node_index
                .get(l.from.as_str())
                .ok_or_else(|| Error::InvalidNetwork(format!("line {} from unknown node", l.id)))?;
            let to = *node_index
                .get(l.to.as_str())
                .ok_or_else(|| Error::InvalidNetwork(format!("line {} to unknown node", l.id)))?;
            lines.push(Line {
                id: l.id.clone(),
                from,
                to,
                susceptance: l.susceptance,
                f_max: l.f_max_mw,
            });
        }
        Self::new(
            spec.nodes.clone(),
            spec.zones.clone(),
            node_zone,
            lines,
            demand_share,
        )
    }

    pub fn new(
        nodes: Vec<String>,
        zones: Vec<String>,
        node_zone: Vec<usize>,
        lines: Vec<Line>,
        demand_share: Vec<f64>,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::InvalidNetwork("no nodes".into()));
        }
        if node_zone.len() != n || demand_share.len() != n {
            return Err(Error::Dimension {
                what: "node attributes",
                expected: n,
                got: node_zone.len().min(demand_share.len()),
            });
        }
        let mut zone_nodes = vec![Vec::new(); zones.len()];
        for (node, &z) in node_zone.iter().enumerate() {
            if z >= zones.len() {
                return Err(Error::InvalidNetwork(format!("node {} has zone index {z}", nodes[node])));
            }
            zone_nodes[z].push(node);
        }
        for (z, members) in zone_nodes.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidNetwork(format!("zone {} has no nodes", zones[z])));
            }
            let total: f64 = members.iter().map(|&m| demand_share[m]).sum();
            if members.iter().any(|&m| demand_share[m] < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidNetwork(format!(
                    "demand shares of zone {} must be nonnegative and sum to 1 (got {total})",
                    zones[z]
                )));
            }
        }
        for l in &lines {
            if l.from >= n || l.to >= n || l.from == l.to {
                return Err(Error::InvalidNetwork(format!("line {} has invalid endpoints", l.id)));
            }
            if !(l.f_max > 0.0) {
                return Err(Error::InvalidNetwork(format!("line {} needs f_max > 0", l.id)));
            }
            if !(l.susceptance > 0.0) {
                return Err(Error::InvalidNetwork(format!("line {} needs susceptance > 0", l.id)));
            }
        }
        let net = Network {
            nodes,
            zones,
            node_zone,
            zone_nodes,
            lines,
            demand_share,
        };
        net.check_connected()?;
        Ok(net)
    }

    pub fn to_spec(&self) -> NetworkSpec {
        NetworkSpec {
            nodes: self.nodes.clone(),
            zones: self.zones.clone(),
            node_zone: self
                .nodes
                .iter()
                .zip(&self.node_zone)
                .map(|(n, &z)| (n.clone(), self.zones[z].clone()))
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineSpec {
                    id: l.id.clone(),
                    from: self.nodes[l.from].clone(),
                    to: self.nodes[l.to].clone(),
                    susceptance: l.susceptance,
                    f_max_mw: l.f_max,
                })
                .collect(),
            demand_share: self
                .nodes
                .iter()
                .zip(&self.demand_share)
                .map(|(n, &s)| (n.clone(), s))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: NetworkSpec = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_spec(&spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_spec()).expect("network serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            adj[l.from].push(l.to);
            adj[l.to].push(l.from);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(missing) => Err(Error::Disconnected {
                root: self.nodes[0].clone(),
                node: self.nodes[missing].clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
    pub fn num_zones(&self) -> usize {
        self.zones.len()
    }
    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }
    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }
    pub fn zones(&self) -> &[String] {
        &self.zones
    }
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }
    pub fn zone_of(&self, node: usize) -> usize {
        self.node_zone[node]
    }
    pub fn zone_nodes(&self, zone: usize) -> &[usize] {
        &self.zone_nodes[zone]
    }
    pub fn demand_share(&self, node: usize) -> f64 {
        self.demand_share[node]
    }
    pub fn zone_index(&self, name: &str) -> Option<usize> {
        self.zones.iter().position(|z| z == name)
    }
    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n == name)
    }

    /// Split zonal quantities over nodes with the demand-share coefficients.
    pub fn nodal_from_zonal(&self, zonal: &[f64]) -> Vec<f64> {
        (0..self.num_nodes())
            .map(|n| self.demand_share[n] * zonal[self.node_zone[n]])
            .collect()
    }

    pub fn zonal_from_nodal(&self, nodal: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_zones()];
        for (n, v) in nodal.iter().enumerate() {
            out[self.node_zone[n]] += v;
        }
        out
    }

    /// Zone pairs connected by at least one line, as (lower index, higher index).
    pub fn borders(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .lines
            .iter()
            .filter_map(|l| {
                let (a, b) = (self.node_zone[l.from], self.node_zone[l.to]);
                (a != b).then_some((a.min(b), a.max(b)))
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn with_line_limits_scaled(&self, factor: f64) -> Result<Self> {
        let mut net = self.clone();
        for l in &mut net.lines {
            l.f_max *= factor;
        }
        Self::new(net.nodes, net.zones, net.node_zone, net.lines, net.demand_share)
    }
}

/// Line-by-node power transfer distribution factors for one slack choice.
#[derive(Debug, Clone, PartialEq)]
pub struct PtdfMatrix {
    entries: Vec<Vec<f64>>,
    slack: usize,
}

impl PtdfMatrix {
    pub fn slack(&self) -> usize {
        self.slack
    }
    pub fn get(&self, line: usize, node: usize) -> f64 {
        self.entries[line][node]
    }
    pub fn row(&self, line: usize) -> &[f64] {
        &self.entries[line]
    }
    pub fn num_lines(&self) -> usize {
        self.entries.len()
    }
    pub fn num_nodes(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    /// Flow on each line for an injection vector, without the balance check.
    pub fn flows_unchecked(&self, injections: &[f64]) -> Vec<f64> {
        self.entries
            .iter()
            .map(|row| row.iter().zip(injections).map(|(p, r)| p * r).sum())
            .collect()
    }

    pub fn write_csv(&self, network: &Network, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["line_id", "node_id", "value"]).map_err(csv_err)?;
        for (l, line) in network.lines().iter().enumerate() {
            for (n, node) in network.nodes().iter().enumerate() {
                w.write_record([line.id.as_str(), node.as_str(), &format!("{:.12}", self.get(l, n))])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Build PTDFs from a DC load flow with `slack` as the reference node.
pub fn build_ptdf(network: &Network, slack: usize) -> Result<PtdfMatrix> {
    let n = network.num_nodes();
    if slack >= n {
        return Err(Error::InvalidParameter(format!("slack index {slack} out of range")));
    }
    network.check_connected()?;
    let mut bbus = DMatrix::<f64>::zeros(n, n);
    for l in network.lines() {
        let b = l.susceptance;
        bbus[(l.from, l.from)] += b;
        bbus[(l.to, l.to)] += b;
        bbus[(l.from, l.to)] -= b;
        bbus[(l.to, l.from)] -= b;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = keep.len();
    let mut reduced = DMatrix::<f64>::zeros(m, m);
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            reduced[(a, b)] = bbus[(i, j)];
        }
    }
    // reactance matrix with a zero row/column at the slack
    let mut x = DMatrix::<f64>::zeros(n, n);
    if m > 0 {
        let singular = || {
            let sv = reduced.clone().singular_values();
            let max = sv.max();
            let min = sv.min();
            Error::SingularSusceptance {
                condition: if min > 0.0 { max / min } else { f64::INFINITY },
            }
        };
        let chol = reduced.clone().cholesky().ok_or_else(singular)?;
        let inv = chol.inverse();
        let sv = reduced.singular_values();
        if sv.min() <= sv.max() * 1e-14 {
            return Err(singular());
        }
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                x[(i, j)] = inv[(a, b)];
            }
        }
    }
    let entries = network
        .lines()
        .iter()
        .map(|l| {
            (0..n)
                .map(|node| l.susceptance * (x[(l.from, node)] - x[(l.to, node)]))
                .collect()
        })
        .collect();
    Ok(PtdfMatrix { entries, slack })
}

/// Line flows for a balanced nodal injection vector.
pub fn compute_dc_flows(ptdf: &PtdfMatrix, injections: &[f64]) -> Result<Vec<f64>> {
    if injections.len() != ptdf.num_nodes() {
        return Err(Error::Dimension {
            what: "injections",
            expected: ptdf.num_nodes(),
            got: injections.len(),
        });
    }
    let sum: f64 = injections.iter().sum();
    let tol = BALANCE_TOL * injections.iter().map(|r| r.abs()).sum::<f64>();
    if sum.abs() > tol {
        return Err(Error::Unbalanced { sum, tol });
    }
    Ok(ptdf.flows_unchecked(injections))
}

/// Witness of a feasible nodal realization of zonal net positions.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalWitness {
    pub dispatch: Vec<f64>,
    pub injections: Vec<f64>,
    pub flows: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionCertificate {
    Feasible(NodalWitness),
    /// Smallest total violation (MW) of zonal balance and line limits.
    Infeasible { min_violation: f64 },
}

impl ProjectionCertificate {
    pub fn is_feasible(&self) -> bool {
        matches!(self, ProjectionCertificate::Feasible(_))
    }
}

/// Decide whether zonal net positions (positive = net export) can be realized
/// by a nodal dispatch within `nodal_caps` that meets `nodal_demand` and keeps
/// every line within its thermal limit.
pub fn exact_projection_feasible(
    network: &Network,
    ptdf: &PtdfMatrix,
    net_positions: &[f64],
    nodal_caps: &[f64],
    nodal_demand: &[f64],
) -> Result<ProjectionCertificate> {
    let nn = network.num_nodes();
    let nz = network.num_zones();
    for (what, len, expected) in [
        ("net positions", net_positions.len(), nz),
        ("nodal caps", nodal_caps.len(), nn),
        ("nodal demand", nodal_demand.len(), nn),
    ] {
        if len != expected {
            return Err(Error::Dimension { what, expected, got: len });
        }
    }
    if ptdf.num_nodes() != nn || ptdf.num_lines() != network.num_lines() {
        return Err(Error::Dimension {
            what: "ptdf",
            expected: nn,
            got: ptdf.num_nodes(),
        });
    }
    let np_sum: f64 = net_positions.iter().sum();
    let tol = BALANCE_TOL * net_positions.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    if np_sum.abs() > tol {
        return Err(Error::Unbalanced { sum: np_sum, tol });
    }

    // Phase-one LP: dispatch within caps, elastic slacks on zonal balance and line limits.
    let mut qp = QpProblem::new();
    let g: Vec<usize> = (0..nn)
        .map(|n| qp.add_var(0.0, 0.0, 0.0, nodal_caps[n].max(0.0)))
        .collect();
    let mut slacks = Vec::new();
    for z in 0..nz {
        let up = qp.add_var(0.0, 1.0, 0.0, f64::INFINITY);
        let dn = qp.add_var(0.0, 1.0, 0.0, f64::INFINITY);
        slacks.extend([up, dn]);
        let mut coefs: Vec<(usize, f64)> = network.zone_nodes(z).iter().map(|&n| (g[n], 1.0)).collect();
        coefs.push((up, 1.0));
        coefs.push((dn, -1.0));
        let demand: f64 = network.zone_nodes(z).iter().map(|&n| nodal_demand[n]).sum();
        qp.add_eq(coefs, net_positions[z] + demand);
    }
    for (l, line) in network.lines().iter().enumerate() {
        let s = qp.add_var(0.0, 1.0, 0.0, f64::INFINITY);
        slacks.push(s);
        let offset: f64 = (0..nn).map(|n| ptdf.get(l, n) * nodal_demand[n]).sum();
        let mut coefs: Vec<(usize, f64)> = (0..nn)
            .filter(|&n| ptdf.get(l, n) != 0.0)
            .map(|n| (g[n], ptdf.get(l, n)))
            .collect();
        let mut lo = coefs.clone();
        lo.push((s, 1.0));
        qp.add_row(lo, -line.f_max + offset, f64::INFINITY);
        coefs.push((s, -1.0));
        qp.add_row(coefs, f64::NEG_INFINITY, line.f_max + offset);
    }
    let sol = solve_qp(&qp)?;
    let violation: f64 = slacks.iter().map(|&s| sol.x[s].max(0.0)).sum();
    let scale = 1.0
        + net_positions.iter().map(|v| v.abs()).sum::<f64>()
        + nodal_demand.iter().map(|v| v.abs()).sum::<f64>();
    if violation > FEASIBILITY_TOL * scale {
        return Ok(ProjectionCertificate::Infeasible {
            min_violation: violation,
        });
    }
    let dispatch: Vec<f64> = g.iter().map(|&j| sol.x[j].clamp(0.0, nodal_caps[j - g[0]].max(0.0))).collect();
    let injections: Vec<f64> = dispatch.iter().zip(nodal_demand).map(|(g, d)| g - d).collect();
    let flows = ptdf.flows_unchecked(&injections);
    Ok(ProjectionCertificate::Feasible(NodalWitness {
        dispatch,
        injections,
        flows,
    }))
}

/// Bilateral transfer limits per border; a positive exchange flows from the
/// first zone of the pair to the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtcBox {
    pub borders: Vec<(String, String)>,
    pub atc_plus: Vec<f64>,
    pub atc_minus: Vec<f64>,
}

impl NtcBox {
    pub fn zero(network: &Network) -> Self {
        let borders = network.borders();
        NtcBox {
            borders: borders
                .iter()
                .map(|&(a, b)| (network.zones()[a].clone(), network.zones()[b].clone()))
                .collect(),
            atc_plus: vec![0.0; borders.len()],
            atc_minus: vec![0.0; borders.len()],
        }
    }

    pub fn border_indices(&self, network: &Network) -> Result<Vec<(usize, usize)>> {
        self.borders
            .iter()
            .map(|(a, b)| {
                let ia = network
                    .zone_index(a)
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown zone {a} in NTC box")))?;
                let ib = network
                    .zone_index(b)
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown zone {b} in NTC box")))?;
                Ok((ia, ib))
            })
            .collect()
    }

    /// Zonal net exports implied by a vector of bilateral exchanges.
    pub fn net_positions(&self, network: &Network, exchanges: &[f64]) -> Result<Vec<f64>> {
        let idx = self.border_indices(network)?;
        let mut np = vec![0.0; network.num_zones()];
        for (&(a, b), e) in idx.iter().zip(exchanges) {
            np[a] += e;
            np[b] -= e;
        }
        Ok(np)
    }

    /// All 2^k corners of the exchange box.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let k = self.borders.len();
        (0..1usize << k)
            .map(|mask| {
                (0..k)
                    .map(|b| {
                        if mask >> b & 1 == 1 {
                            self.atc_plus[b]
                        } else {
                            -self.atc_minus[b]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.atc_plus.iter().chain(&self.atc_minus).sum()
    }
}

/// Largest box of bilateral exchanges (maximum sum of directed limits) whose
/// every vertex is deliverable in every scarcity scenario with the given
/// nodal capacities.
///
/// The box certifies transmission, not adequacy: in the check a node may
/// dispatch up to its capacity and withdraw up to its scenario demand, so a
/// zone short of firm capacity can still take part in any exchange the
/// network carries. Adequacy is enforced by the auction's zonal balance.
pub fn compute_max_ntc_box(
    network: &Network,
    ptdf: &PtdfMatrix,
    nodal_caps: &[f64],
    scarcity_demands: &[Vec<f64>],
) -> Result<NtcBox> {
    if scarcity_demands.is_empty() {
        return Err(Error::InvalidParameter("at least one scarcity scenario is required".into()));
    }
    let nn = network.num_nodes();
    if nodal_caps.len() != nn {
        return Err(Error::Dimension {
            what: "nodal caps",
            expected: nn,
            got: nodal_caps.len(),
        });
    }
    let borders = network.borders();
    let k = borders.len();
    let mut out = NtcBox::zero(network);
    if k == 0 {
        return Ok(out);
    }

    let mut qp = QpProblem::new();
    let plus: Vec<usize> = (0..k).map(|_| qp.add_var(0.0, -1.0, 0.0, f64::INFINITY)).collect();
    let minus: Vec<usize> = (0..k).map(|_| qp.add_var(0.0, -1.0, 0.0, f64::INFINITY)).collect();
    for mask in 0..1usize << k {
        for demand in scarcity_demands {
            if demand.len() != nn {
                return Err(Error::Dimension {
                    what: "scarcity demand",
                    expected: nn,
                    got: demand.len(),
                });
            }
            let g: Vec<usize> = (0..nn)
                .map(|n| qp.add_var(0.0, 0.0, 0.0, nodal_caps[n].max(0.0) + demand[n]))
                .collect();
            for z in 0..network.num_zones() {
                // sum_n (g - D) - NP_z(vertex) = 0
                let mut coefs: Vec<(usize, f64)> =
                    network.zone_nodes(z).iter().map(|&n| (g[n], 1.0)).collect();
                for (b, &(za, zb)) in borders.iter().enumerate() {
                    let sign = if za == z {
                        -1.0
                    } else if zb == z {
                        1.0
                    } else {
                        continue;
                    };
                    if mask >> b & 1 == 1 {
                        coefs.push((plus[b], sign));
                    } else {
                        coefs.push((minus[b], -sign));
                    }
                }
                let d: f64 = network.zone_nodes(z).iter().map(|&n| demand[n]).sum();
                qp.add_eq(coefs, d);
            }
            for (l, line) in network.lines().iter().enumerate() {
                let offset: f64 = (0..nn).map(|n| ptdf.get(l, n) * demand[n]).sum();
                let coefs: Vec<(usize, f64)> = (0..nn)
                    .filter(|&n| ptdf.get(l, n) != 0.0)
                    .map(|n| (g[n], ptdf.get(l, n)))
                    .collect();
                qp.add_row(coefs, -line.f_max + offset, line.f_max + offset);
            }
        }
    }

    let sol = match solve_qp(&qp) {
        Ok(s) => s,
        Err(Error::Infeasible { detail, .. }) => {
            warn!("no feasible NTC box (even zero exchange fails): {detail}");
            return Ok(out);
        }
        Err(e) => return Err(e),
    };
    for b in 0..k {
        out.atc_plus[b] = sol.x[plus[b]].max(0.0);
        out.atc_minus[b] = sol.x[minus[b]].max(0.0);
    }
    // Trim interior-point slack so that every vertex re-checks feasible.
    let mut shrink = 1.0;
    for _ in 0..40 {
        let candidate = NtcBox {
            borders: out.borders.clone(),
            atc_plus: out.atc_plus.iter().map(|v| v * shrink).collect(),
            atc_minus: out.atc_minus.iter().map(|v| v * shrink).collect(),
        };
        if box_is_deliverable(network, ptdf, &candidate, nodal_caps, scarcity_demands)? {
            out = candidate;
            break;
        }
        shrink *= 1.0 - 1e-6 * 4f64.powi(3);
    }
    if out.total() <= 1e-9 {
        warn!("maximal NTC box has zero volume");
        return Ok(NtcBox::zero(network));
    }
    Ok(out)
}

/// Check every vertex of the box against the exact projection in every
/// scenario, with withdrawals allowed to fall short of the scenario demand.
pub fn box_is_deliverable(
    network: &Network,
    ptdf: &PtdfMatrix,
    ntc: &NtcBox,
    nodal_caps: &[f64],
    scarcity_demands: &[Vec<f64>],
) -> Result<bool> {
    let relaxed: Vec<Vec<f64>> = scarcity_demands
        .iter()
        .map(|d| nodal_caps.iter().zip(d).map(|(c, d)| c.max(0.0) + d).collect())
        .collect();
    for vertex in ntc.vertices() {
        let np = ntc.net_positions(network, &vertex)?;
        for (demand, caps) in scarcity_demands.iter().zip(&relaxed) {
            if !exact_projection_feasible(network, ptdf, &np, caps, demand)?.is_feasible() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_node(f_max: f64) -> Network {
        Network::new(
            vec!["n1".into(), "n2".into()],
            vec!["A".into(), "B".into()],
            vec![0, 1],
            vec![Line {
                id: "l12".into(),
                from: 0,
                to: 1,
                susceptance: 1.0,
                f_max,
            }],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn two_node_ptdf() {
        let net = two_node(100.0);
        let ptdf = build_ptdf(&net, 0).unwrap();
        assert_eq!(ptdf.row(0), &[0.0, -1.0]);
        let f = compute_dc_flows(&ptdf, &[-100.0, 100.0]).unwrap();
        assert!((f[0] + 100.0).abs() < 1e-12);
    }

    #[test]
    fn three_node_ring_split() {
        let line = |id: &str, a, b| Line {
            id: id.into(),
            from: a,
            to: b,
            susceptance: 1.0,
            f_max: 1000.0,
        };
        let net = Network::new(
            vec!["n1".into(), "n2".into(), "n3".into()],
            vec!["Z".into()],
            vec![0, 0, 0],
            vec![line("12", 0, 1), line("23", 1, 2), line("13", 0, 2)],
            vec![0.5, 0.25, 0.25],
        )
        .unwrap();
        let ptdf = build_ptdf(&net, 2).unwrap();
        let f = compute_dc_flows(&ptdf, &[300.0, -300.0, 0.0]).unwrap();
        assert!((f[0] - 200.0).abs() < 1e-9);
        assert!((f[1] + 100.0).abs() < 1e-9);
        assert!((f[2] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn disconnected_is_rejected() {
        let err = Network::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["Z".into()],
            vec![0, 0, 0],
            vec![Line {
                id: "ab".into(),
                from: 0,
                to: 1,
                susceptance: 1.0,
                f_max: 1.0,
            }],
            vec![0.4, 0.3, 0.3],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Disconnected { .. }));
    }

    #[test]
    fn unbalanced_injection_rejected() {
        let ptdf = build_ptdf(&two_node(1.0), 0).unwrap();
        assert!(matches!(compute_dc_flows(&ptdf, &[1.0, 0.0]), Err(Error::Unbalanced { .. })));
        assert_eq!(compute_dc_flows(&ptdf, &[0.0, 0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn projection_single_border() {
        let net = two_node(50.0);
        let ptdf = build_ptdf(&net, 0).unwrap();
        let caps = [500.0, 500.0];
        let demand = [100.0, 100.0];
        let ok = exact_projection_feasible(&net, &ptdf, &[50.0, -50.0], &caps, &demand).unwrap();
        match ok {
            ProjectionCertificate::Feasible(w) => assert!((w.flows[0].abs() - 50.0).abs() < 1e-6),
            _ => panic!("expected feasible"),
        }
        let bad = exact_projection_feasible(&net, &ptdf, &[51.0, -51.0], &caps, &demand).unwrap();
        assert!(!bad.is_feasible());
        let zero = exact_projection_feasible(&net, &ptdf, &[0.0, 0.0], &caps, &demand).unwrap();
        match zero {
            ProjectionCertificate::Feasible(w) => {
                assert!((w.dispatch[0] - 100.0).abs() < 1e-6 && (w.dispatch[1] - 100.0).abs() < 1e-6)
            }
            _ => panic!("expected feasible"),
        }
    }

    #[test]
    fn projection_dimension_mismatch() {
        let net = two_node(50.0);
        let ptdf = build_ptdf(&net, 0).unwrap();
        assert!(matches!(
            exact_projection_feasible(&net, &ptdf, &[0.0], &[1.0, 1.0], &[0.0, 0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn single_border_box_equals_thermal_limit() {
        let net = two_node(300.0);
        let ptdf = build_ptdf(&net, 0).unwrap();
        let b = compute_max_ntc_box(&net, &ptdf, &[5000.0, 5000.0], &[vec![1000.0, 1000.0]]).unwrap();
        assert!((b.atc_plus[0] - 300.0).abs() < 1e-3, "{b:?}");
        assert!((b.atc_minus[0] - 300.0).abs() < 1e-3, "{b:?}");
    }
}

#[cfg(test)]
mod network_properties {
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::scenario::{synthesize_case_study, SynthParams};

    fn four_node() -> Network {
        synthesize_case_study(&SynthParams::default()).unwrap().network
    }

    /// Flows from a dense solve of the susceptance system with node 0 grounded.
    fn dense_flows(net: &Network, injections: &[f64]) -> Vec<f64> {
        let n = net.num_nodes();
        let mut b = DMatrix::<f64>::zeros(n - 1, n - 1);
        for l in net.lines() {
            for (i, j) in [(l.from, l.to), (l.to, l.from)] {
                if i > 0 {
                    b[(i - 1, i - 1)] += l.susceptance;
                    if j > 0 {
                        b[(i - 1, j - 1)] -= l.susceptance;
                    }
                }
            }
        }
        let p = DVector::from_iterator(n - 1, injections[1..].iter().copied());
        let theta = b.lu().solve(&p).unwrap();
        let angle = |k: usize| if k == 0 { 0.0 } else { theta[k - 1] };
        net.lines()
            .iter()
            .map(|l| l.susceptance * (angle(l.from) - angle(l.to)))
            .collect()
    }

    fn balanced(raw: &[f64]) -> Vec<f64> {
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        raw.iter().map(|r| r - mean).collect()
    }

    #[test]
    fn four_node_ptdf_matches_dense_solve() {
        let net = four_node();
        let ptdf = build_ptdf(&net, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(-5000.0..5000.0)).collect();
            let inj = balanced(&raw);
            let f = compute_dc_flows(&ptdf, &inj).unwrap();
            let oracle = dense_flows(&net, &inj);
            let scale = oracle.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (a, b) in f.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-9 * scale, "{f:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn slack_column_is_zero() {
        let net = four_node();
        for slack in 0..4 {
            let ptdf = build_ptdf(&net, slack).unwrap();
            assert!((0..ptdf.num_lines()).all(|l| ptdf.get(l, slack) == 0.0));
        }
    }

    #[test]
    fn zone_a_export_to_b_respects_border_limits() {
        let net = four_node();
        let ptdf = build_ptdf(&net, 0).unwrap();
        // 3 GW from zone A split by demand share, withdrawn in zone B
        let inj = [1800.0, 1200.0, -3000.0, 0.0];
        let f = compute_dc_flows(&ptdf, &inj).unwrap();
        for (l, line) in net.lines().iter().enumerate() {
            if net.zone_of(line.from) != net.zone_of(line.to) {
                assert!(f[l].abs() <= 3000.0 + 1e-9, "{}: {}", line.id, f[l]);
            }
        }
        let reversed = compute_dc_flows(&ptdf, &inj.map(|v| -v)).unwrap();
        assert!(f.iter().zip(&reversed).all(|(a, b)| a == &-b));
        assert!(compute_dc_flows(&ptdf, &[0.0; 4]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn four_node_box_vertices_are_deliverable() {
        let net = four_node();
        let ptdf = build_ptdf(&net, 0).unwrap();
        let caps = [12_000.0, 8_000.0, 14_000.0, 13_000.0];
        let demands = vec![
            vec![10_830.0, 7_220.0, 15_200.0, 17_100.0],
            vec![11_400.0, 7_600.0, 14_400.0, 16_200.0],
            vec![10_260.0, 6_840.0, 16_000.0, 16_200.0],
            vec![10_260.0, 6_840.0, 14_400.0, 18_000.0],
        ];
        let ntc = compute_max_ntc_box(&net, &ptdf, &caps, &demands).unwrap();
        assert_eq!(ntc.borders.len(), 3);
        let vertices = ntc.vertices();
        assert_eq!(vertices.len(), 8);
        assert!(ntc.total() > 0.0);
        for v in &vertices {
            let np = ntc.net_positions(&net, v).unwrap();
            for d in &demands {
                let relaxed: Vec<f64> = caps.iter().zip(d).map(|(c, d)| c + d).collect();
                let cert = exact_projection_feasible(&net, &ptdf, &np, &relaxed, d).unwrap();
                assert!(cert.is_feasible(), "vertex {v:?} fails for {d:?}");
            }
        }
        assert!(box_is_deliverable(&net, &ptdf, &ntc, &caps, &demands).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn flows_do_not_depend_on_slack(raw in prop::collection::vec(-1e4f64..1e4, 4), slack in 1usize..4) {
            let net = four_node();
            let inj = balanced(&raw);
            let a = compute_dc_flows(&build_ptdf(&net, 0).unwrap(), &inj).unwrap();
            let b = compute_dc_flows(&build_ptdf(&net, slack).unwrap(), &inj).unwrap();
            let scale = a.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn flows_superpose(
            r1 in prop::collection::vec(-1e4f64..1e4, 4),
            r2 in prop::collection::vec(-1e4f64..1e4, 4),
            k in -3.0f64..3.0,
        ) {
            let net = four_node();
            let ptdf = build_ptdf(&net, 2).unwrap();
            let (p1, p2) = (balanced(&r1), balanced(&r2));
            let sum: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| a + k * b).collect();
            let f1 = compute_dc_flows(&ptdf, &p1).unwrap();
            let f2 = compute_dc_flows(&ptdf, &p2).unwrap();
            let f = compute_dc_flows(&ptdf, &sum).unwrap();
            let scale = f1.iter().chain(&f2).map(|v| v.abs()).fold(1.0, f64::max) * 4.0;
            for l in 0..f.len() {
                prop_assert!((f[l] - f1[l] - k * f2[l]).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn halving_a_line_never_enlarges_the_box(line in 0usize..4) {
            let net = four_node();
            let caps = [12_000.0, 8_000.0, 14_000.0, 13_000.0];
            let demands = vec![vec![10_830.0, 7_220.0, 15_200.0, 17_100.0]];
            let full = compute_max_ntc_box(&net, &build_ptdf(&net, 0).unwrap(), &caps, &demands).unwrap();
            let mut spec = net.to_spec();
            spec.lines[line].f_max_mw *= 0.5;
            let small_net = Network::from_spec(&spec).unwrap();
            let small = compute_max_ntc_box(&small_net, &build_ptdf(&small_net, 0).unwrap(), &caps, &demands).unwrap();
            prop_assert!(small.total() <= full.total() * (1.0 + 1e-6) + 1e-6);
        }

        #[test]
        fn single_border_limits_shrink_with_the_line(f in 10.0f64..5000.0, factor in 0.05f64..1.0) {
            let net = tests::two_node(f);
            let caps = [1e5, 1e5];
            let demands = vec![vec![1000.0, 1000.0]];
            let a = compute_max_ntc_box(&net, &build_ptdf(&net, 0).unwrap(), &caps, &demands).unwrap();
            let small_net = tests::two_node(f * factor);
            let b = compute_max_ntc_box(&small_net, &build_ptdf(&small_net, 0).unwrap(), &caps, &demands).unwrap();
            prop_assert!(b.atc_plus[0] <= a.atc_plus[0] * (1.0 + 1e-6) + 1e-6);
            prop_assert!(b.atc_minus[0] <= a.atc_minus[0] * (1.0 + 1e-6) + 1e-6);
        }
    }
}
