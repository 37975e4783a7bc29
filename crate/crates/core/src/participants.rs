//! Price-taking generators and consumers.
//!
//! Both best responses are solved exactly: the generator problem reduces to a
//! one-dimensional concave search over capacity with closed-form dispatch, and
//! the consumer problem to a two-variable box QP per timestep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Representative timesteps and their annual weight in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    weights: Vec<f64>,
}

impl TimeGrid {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidParameter("time grid needs at least one step".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidParameter(format!("timestep weight must be positive, got {w}")));
        }
        Ok(TimeGrid { weights })
    }

    /// One representative day of hourly steps, each weighted 365.
    pub fn representative_day() -> Self {
        TimeGrid {
            weights: vec![365.0; 24],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn weight(&self, t: usize) -> f64 {
        self.weights[t]
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn total_hours(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTech {
    pub id: String,
    pub zone: usize,
    /// Quadratic cost coefficient: marginal cost is `a_quad * g + b_lin`.
    pub a_quad: f64,
    pub b_lin: f64,
    /// Annualized investment cost per MW.
    pub capex: f64,
    pub existing: f64,
    pub availability: Vec<f64>,
}

impl GeneratorTech {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("generator {}: {what}", self.id)));
        if !(self.a_quad >= 0.0) || !self.a_quad.is_finite() {
            return bad("a_quad must be nonnegative");
        }
        if !(self.capex >= 0.0) || !self.b_lin.is_finite() {
            return bad("capex must be nonnegative and b_lin finite");
        }
        if !(self.existing >= 0.0) {
            return bad("existing capacity must be nonnegative");
        }
        if self.availability.len() != steps {
            return Err(Error::Dimension {
                what: "generator availability",
                expected: steps,
                got: self.availability.len(),
            });
        }
        if self.availability.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("availability must lie in [0, 1]");
        }
        Ok(())
    }

    /// Variable cost of producing `g` MW for one hour.
    pub fn variable_cost(&self, g: f64) -> f64 {
        0.5 * self.a_quad * g * g + self.b_lin * g
    }

    pub fn marginal_cost(&self, g: f64) -> f64 {
        self.a_quad * g + self.b_lin
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneratorDecision {
    pub dispatch: Vec<f64>,
    pub capacity: f64,
    pub cm_offer: f64,
}

/// Linear and quadratic terms added to an agent objective on one contribution
/// `c`: `lin * c - quad / 2 * c^2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Penalty {
    pub lin: f64,
    pub quad: f64,
}

impl Penalty {
    pub fn value(&self, c: f64) -> f64 {
        self.lin * c - 0.5 * self.quad * c * c
    }
}

/// Augmented terms for a generator: per-step dispatch, installed capacity and
/// capacity-market offer. `max_capacity` bounds the capacity search and is
/// used by the deviation check.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeneratorTerms {
    pub energy: Vec<Penalty>,
    pub capacity: Penalty,
    pub offer: Penalty,
    pub max_capacity: Option<f64>,
}

impl GeneratorTerms {
    pub fn none(steps: usize) -> Self {
        GeneratorTerms {
            energy: vec![Penalty::default(); steps],
            ..Default::default()
        }
    }
}

/// Profit of a generator decision under the given prices and terms.
pub fn generator_objective(
    tech: &GeneratorTech,
    grid: &TimeGrid,
    energy_prices: &[f64],
    cm_price: f64,
    terms: &GeneratorTerms,
    d: &GeneratorDecision,
) -> f64 {
    let mut obj = 0.0;
    for t in 0..grid.len() {
        let g = d.dispatch[t];
        obj += grid.weight(t) * (energy_prices[t] * g - tech.variable_cost(g));
        obj += terms.energy.get(t).map_or(0.0, |p| p.value(g));
    }
    obj - tech.capex * (d.capacity - tech.existing)
        + cm_price * d.cm_offer
        + terms.capacity.value(d.capacity)
        + terms.offer.value(d.cm_offer)
}

/// Optimal dispatch, capacity and capacity offer of a price-taking generator.
pub fn generator_best_response(
    tech: &GeneratorTech,
    grid: &TimeGrid,
    energy_prices: &[f64],
    cm_price: f64,
    terms: &GeneratorTerms,
) -> Result<GeneratorDecision> {
    let n = grid.len();
    tech.validate(n)?;
    if energy_prices.len() != n || terms.energy.len() != n {
        return Err(Error::Dimension {
            what: "generator prices",
            expected: n,
            got: energy_prices.len().min(terms.energy.len()),
        });
    }
    if energy_prices.iter().any(|p| !p.is_finite()) || !cm_price.is_finite() {
        return Err(Error::InvalidParameter("prices must be finite".into()));
    }
    let penalties = terms
        .energy
        .iter()
        .chain([&terms.capacity, &terms.offer]);
    for p in penalties {
        if !(p.quad >= 0.0) || !p.lin.is_finite() {
            return Err(Error::NonConvex { index: 0, value: p.quad });
        }
    }

    // per-step dispatch: maximize p g - q/2 g^2 on [0, af * y]
    let p: Vec<f64> = (0..n)
        .map(|t| grid.weight(t) * (energy_prices[t] - tech.b_lin) + terms.energy[t].lin)
        .collect();
    let q: Vec<f64> = (0..n)
        .map(|t| grid.weight(t) * tech.a_quad + terms.energy[t].quad)
        .collect();
    let af = &tech.availability;
    let (pc, qc) = (cm_price + terms.offer.lin, terms.offer.quad);
    let (py, qy) = (terms.capacity.lin - tech.capex, terms.capacity.quad);

    // derivative of the reduced profit with respect to capacity
    let marginal = |y: f64| -> f64 {
        let mut v = py - qy * y + (pc - qc * y).max(0.0);
        for t in 0..n {
            if af[t] > 0.0 {
                v += af[t] * (p[t] - q[t] * af[t] * y).max(0.0);
            }
        }
        v
    };
    let slope_at = |y: f64| -> f64 {
        let mut s = -qy;
        if pc - qc * y > 0.0 {
            s -= qc;
        }
        for t in 0..n {
            if af[t] > 0.0 && p[t] - q[t] * af[t] * y > 0.0 {
                s -= q[t] * af[t] * af[t];
            }
        }
        s
    };

    let y_lo = tech.existing;
    let y_hi = terms.max_capacity.unwrap_or(f64::INFINITY).max(y_lo);
    let mut breaks: Vec<f64> = (0..n)
        .filter(|&t| q[t] > 0.0 && af[t] > 0.0 && p[t] > 0.0)
        .map(|t| p[t] / (q[t] * af[t]))
        .collect();
    if qc > 0.0 && pc > 0.0 {
        breaks.push(pc / qc);
    }
    breaks.retain(|&b| b > y_lo && b < y_hi);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let capacity = if marginal(y_lo) <= 0.0 {
        y_lo
    } else {
        let mut lo = y_lo;
        let mut found = None;
        for hi in breaks.iter().copied().chain(std::iter::once(y_hi)) {
            let m_lo = marginal(lo);
            if hi.is_infinite() {
                let s = slope_at(lo + 1.0);
                if s < 0.0 {
                    found = Some(lo + m_lo / -s);
                }
                break;
            }
            if marginal(hi) <= 0.0 {
                let s = slope_at(0.5 * (lo + hi));
                found = Some(if s < 0.0 { (lo + m_lo / -s).clamp(lo, hi) } else { hi });
                break;
            }
            lo = hi;
        }
        match found {
            Some(y) => y,
            None if y_hi.is_finite() => y_hi,
            None => {
                return Err(Error::Unbounded {
                    agent: tech.id.clone(),
                    detail: format!(
                        "capacity keeps a marginal value of {:.6e} with no capex, cost curvature or penalty; an upper capacity bound is missing",
                        marginal(lo)
                    ),
                })
            }
        }
    };

    let dispatch = (0..n)
        .map(|t| {
            let cap = af[t] * capacity;
            if q[t] > 0.0 {
                (p[t] / q[t]).clamp(0.0, cap)
            } else if p[t] > 0.0 {
                cap
            } else {
                0.0
            }
        })
        .collect();
    let cm_offer = if qc > 0.0 {
        (pc / qc).clamp(0.0, capacity)
    } else if pc > 0.0 {
        capacity
    } else {
        0.0
    };
    Ok(GeneratorDecision {
        dispatch,
        capacity,
        cm_offer,
    })
}

/// Zonal consumer with an inelastic block and a linearly elastic block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerBlock {
    pub zone: usize,
    pub ref_demand: Vec<f64>,
    pub elastic_share: f64,
    pub wtp: f64,
    /// Value forfeited per MWh of unserved inelastic demand. Equals `wtp`
    /// unless an administrative price cap rations demand at a lower price.
    pub curtailment_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConsumerDecision {
    pub demand: Vec<f64>,
    pub elastic: Vec<f64>,
    pub inelastic: Vec<f64>,
    pub ens: Vec<f64>,
}

impl ConsumerBlock {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if !(self.elastic_share > 0.0 && self.elastic_share < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "elastic share must lie in (0, 1), got {}",
                self.elastic_share
            )));
        }
        if !(self.wtp > 0.0) || !(self.curtailment_value > 0.0) || self.curtailment_value > self.wtp {
            return Err(Error::InvalidParameter(
                "need 0 < curtailment value <= willingness to pay".into(),
            ));
        }
        if self.ref_demand.len() != steps {
            return Err(Error::Dimension {
                what: "reference demand",
                expected: steps,
                got: self.ref_demand.len(),
            });
        }
        if self.ref_demand.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidParameter("reference demand must be nonnegative".into()));
        }
        Ok(())
    }

    /// Elastic demand at price `price` without augmentation.
    pub fn elastic_demand(&self, reference: f64, price: f64) -> f64 {
        let cap = self.elastic_share * reference;
        (cap * (1.0 - price / self.wtp)).clamp(0.0, cap)
    }

    /// Hourly gross utility of serving `elastic` and losing `ens`.
    pub fn utility(&self, reference: f64, elastic: f64, ens: f64) -> f64 {
        let e = self.elastic_share * reference;
        let inelastic = (1.0 - self.elastic_share) * reference;
        let elastic_utility = if e > 0.0 {
            self.wtp * elastic - self.wtp / (2.0 * e) * elastic * elastic
        } else {
            0.0
        };
        self.wtp * inelastic - self.curtailment_value * ens + elastic_utility
    }
}

/// Surplus of a consumer decision (utility minus energy payments plus terms).
pub fn consumer_objective(
    block: &ConsumerBlock,
    grid: &TimeGrid,
    energy_prices: &[f64],
    terms: &[Penalty],
    d: &ConsumerDecision,
) -> f64 {
    (0..grid.len())
        .map(|t| {
            let w = grid.weight(t);
            w * (block.utility(block.ref_demand[t], d.elastic[t], d.ens[t]) - energy_prices[t] * d.demand[t])
                + terms.get(t).map_or(0.0, |p| p.value(-d.demand[t]))
        })
        .sum()
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Lower,
    Upper,
    Free,
}

/// Optimal demand of a price-taking consumer. Terms act on the consumer's
/// contribution to the energy balance, which is `-demand`.
pub fn consumer_best_response(
    block: &ConsumerBlock,
    grid: &TimeGrid,
    energy_prices: &[f64],
    terms: &[Penalty],
) -> Result<ConsumerDecision> {
    let n = grid.len();
    block.validate(n)?;
    if energy_prices.len() != n || terms.len() != n {
        return Err(Error::Dimension {
            what: "consumer prices",
            expected: n,
            got: energy_prices.len().min(terms.len()),
        });
    }
    let mut out = ConsumerDecision {
        demand: vec![0.0; n],
        elastic: vec![0.0; n],
        inelastic: vec![0.0; n],
        ens: vec![0.0; n],
    };
    let sides = [Side::Lower, Side::Upper, Side::Free];
    for t in 0..n {
        let reference = block.ref_demand[t];
        if reference <= 0.0 {
            continue;
        }
        let w = grid.weight(t);
        let e_max = block.elastic_share * reference;
        let k = reference - e_max;
        let quad = terms[t].quad;
        if !(quad >= 0.0) {
            return Err(Error::NonConvex { index: t, value: quad });
        }
        let price = w * energy_prices[t] + terms[t].lin;
        let alpha = w * block.wtp / e_max;
        // maximize a'x - x'Qx/2 over x = (elastic, ens) in the box
        let a = [w * block.wtp - price - quad * k, -w * block.curtailment_value + price + quad * k];
        let qm = [[alpha + quad, -quad], [-quad, quad]];
        let hi = [e_max, k];
        let value = |x: [f64; 2]| {
            a[0] * x[0] + a[1] * x[1]
                - 0.5 * (qm[0][0] * x[0] * x[0] + 2.0 * qm[0][1] * x[0] * x[1] + qm[1][1] * x[1] * x[1])
        };
        let mut best: Option<([f64; 2], f64)> = None;
        // ens at its lower bound first so that ties favour serving demand
        for s_ens in sides {
            for s_el in sides {
                let Some(x) = solve_candidate([s_el, s_ens], a, qm, hi) else {
                    continue;
                };
                let feasible = (0..2).all(|i| x[i] >= -1e-9 * hi[i] && x[i] <= hi[i] * (1.0 + 1e-9));
                if !feasible {
                    continue;
                }
                let x = [x[0].clamp(0.0, hi[0]), x[1].clamp(0.0, hi[1])];
                let v = value(x);
                let tol = 1e-12 * (v.abs() + w * block.wtp * reference);
                if best.is_none_or(|(_, bv)| v > bv + tol) {
                    best = Some((x, v));
                }
            }
        }
        let ([elastic, ens], _) = best.expect("a vertex of the box is always a candidate");
        out.elastic[t] = elastic;
        out.ens[t] = ens;
        out.inelastic[t] = k - ens;
        out.demand[t] = k - ens + elastic;
    }
    Ok(out)
}

fn solve_candidate(sides: [Side; 2], a: [f64; 2], q: [[f64; 2]; 2], hi: [f64; 2]) -> Option<[f64; 2]> {
    let mut x = [0.0; 2];
    for i in 0..2 {
        x[i] = match sides[i] {
            Side::Lower => 0.0,
            Side::Upper => hi[i],
            Side::Free => f64::NAN,
        };
    }
    let free: Vec<usize> = (0..2).filter(|&i| sides[i] == Side::Free).collect();
    match free.as_slice() {
        [] => Some(x),
        [i] => {
            let j = 1 - i;
            if q[*i][*i] <= 0.0 {
                return None;
            }
            x[*i] = (a[*i] - q[*i][j] * x[j]) / q[*i][*i];
            Some(x)
        }
        _ => {
            let det = q[0][0] * q[1][1] - q[0][1] * q[1][0];
            if det.abs() <= 1e-14 * (q[0][0] * q[1][1]).abs().max(1e-300) {
                return None;
            }
            x[0] = (a[0] * q[1][1] - q[0][1] * a[1]) / det;
            x[1] = (q[0][0] * a[1] - q[1][0] * a[0]) / det;
            Some(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peaker_a() -> GeneratorTech {
        GeneratorTech {
            id: "peak_A".into(),
            zone: 0,
            a_quad: 0.04,
            b_lin: 90.0,
            capex: 60_000.0,
            existing: 0.0,
            availability: vec![1.0],
        }
    }

    fn consumer(d: f64) -> ConsumerBlock {
        ConsumerBlock {
            zone: 0,
            ref_demand: vec![d],
            elastic_share: 0.2,
            wtp: 20_000.0,
            curtailment_value: 20_000.0,
        }
    }

    #[test]
    fn no_profitable_operation() {
        let mut tech = peaker_a();
        tech.availability = vec![1.0; 3];
        let grid = TimeGrid::new(vec![100.0; 3]).unwrap();
        let d = generator_best_response(&tech, &grid, &[10.0, 50.0, 89.0], 0.0, &GeneratorTerms::none(3)).unwrap();
        assert_eq!(d.capacity, 0.0);
        assert_eq!(d.cm_offer, 0.0);
        assert!(d.dispatch.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn interior_dispatch_from_first_order_condition() {
        let mut tech = peaker_a();
        tech.existing = 10_000.0;
        tech.capex = 1e9;
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let d = generator_best_response(&tech, &grid, &[290.0], 0.0, &GeneratorTerms::none(1)).unwrap();
        assert!((d.dispatch[0] - 5_000.0).abs() < 1e-9);
        assert_eq!(d.capacity, 10_000.0);
    }

    #[test]
    fn zero_capex_unbounded_is_reported() {
        let mut tech = peaker_a();
        tech.capex = 0.0;
        tech.a_quad = 0.0;
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let err = generator_best_response(&tech, &grid, &[100.0], 0.0, &GeneratorTerms::none(1)).unwrap_err();
        assert!(matches!(err, Error::Unbounded { .. }));
        let bounded = GeneratorTerms {
            max_capacity: Some(7.0),
            ..GeneratorTerms::none(1)
        };
        let d = generator_best_response(&tech, &grid, &[100.0], 0.0, &bounded).unwrap();
        assert_eq!(d.capacity, 7.0);
    }

    #[test]
    fn capacity_matches_scan() {
        let mut tech = peaker_a();
        tech.availability = vec![1.0, 0.8, 1.0];
        let grid = TimeGrid::new(vec![4.0, 3000.0, 10.0]).unwrap();
        let prices = [12_000.0, 150.0, 2_000.0];
        let terms = GeneratorTerms::none(3);
        let d = generator_best_response(&tech, &grid, &prices, 5_000.0, &terms).unwrap();
        let reduced = |y: f64| {
            let dispatch = (0..3)
                .map(|t| ((prices[t] - 90.0) / 0.04).clamp(0.0, tech.availability[t] * y))
                .collect();
            let dec = GeneratorDecision {
                dispatch,
                capacity: y,
                cm_offer: y,
            };
            generator_objective(&tech, &grid, &prices, 5_000.0, &terms, &dec)
        };
        let mut best = (0.0, f64::NEG_INFINITY);
        let mut y = 0.0;
        while y <= 400_000.0 {
            let v = reduced(y);
            if v > best.1 {
                best = (y, v);
            }
            y += 1.0;
        }
        assert!((d.capacity - best.0).abs() <= 1.0, "{} vs {}", d.capacity, best.0);
        let own = generator_objective(&tech, &grid, &prices, 5_000.0, &terms, &d);
        assert!(own >= best.1 - 1e-6 * best.1.abs());
    }

    #[test]
    fn consumer_zero_price_serves_everything() {
        let c = consumer(10_000.0);
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let d = consumer_best_response(&c, &grid, &[0.0], &[Penalty::default()]).unwrap();
        assert!((d.elastic[0] - 2_000.0).abs() < 1e-9);
        assert_eq!(d.ens[0], 0.0);
    }

    #[test]
    fn consumer_at_wtp_serves_inelastic() {
        let c = consumer(10_000.0);
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let d = consumer_best_response(&c, &grid, &[20_000.0], &[Penalty::default()]).unwrap();
        assert!(d.elastic[0].abs() < 1e-9);
        assert_eq!(d.ens[0], 0.0);
        assert!((d.inelastic[0] - 8_000.0).abs() < 1e-9);
    }

    #[test]
    fn consumer_elastic_at_four_thousand() {
        let c = consumer(10_000.0);
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let d = consumer_best_response(&c, &grid, &[4_000.0], &[Penalty::default()]).unwrap();
        let expected = 0.2 * 10_000.0 * (1.0 - 4_000.0 / 20_000.0);
        assert!((d.elastic[0] - expected).abs() < 1e-9);
        assert!((d.elastic[0] - 1_600.0).abs() < 1e-9);
    }

    #[test]
    fn consumer_curtails_above_value() {
        let mut c = consumer(10_000.0);
        c.curtailment_value = 4_000.0;
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        let d = consumer_best_response(&c, &grid, &[4_500.0], &[Penalty::default()]).unwrap();
        assert_eq!(d.ens[0], 8_000.0);
        assert_eq!(d.inelastic[0], 0.0);
    }

    #[test]
    fn invalid_consumer_rejected() {
        let mut c = consumer(1.0);
        c.elastic_share = 1.0;
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        assert!(consumer_best_response(&c, &grid, &[0.0], &[Penalty::default()]).is_err());
    }
}

#[cfg(test)]
mod participant_properties {
    use proptest::prelude::*;

    use super::*;

    fn tech(a_quad: f64, b_lin: f64, capex: f64, availability: Vec<f64>) -> GeneratorTech {
        GeneratorTech {
            id: "g".into(),
            zone: 0,
            a_quad,
            b_lin,
            capex,
            existing: 0.0,
            availability,
        }
    }

    fn block(d: Vec<f64>) -> ConsumerBlock {
        ConsumerBlock {
            zone: 0,
            ref_demand: d,
            elastic_share: 0.2,
            wtp: 20_000.0,
            curtailment_value: 4_000.0,
        }
    }

    fn gen_case() -> impl Strategy<Value = (GeneratorTech, TimeGrid, Vec<f64>, f64)> {
        (
            0.005f64..0.1,
            10.0f64..100.0,
            1_000.0f64..200_000.0,
            prop::collection::vec(0.05f64..1.0, 3),
            prop::collection::vec(1.0f64..3000.0, 3),
            prop::collection::vec(0.0f64..5000.0, 3),
            0.0f64..0.99,
        )
            .prop_map(|(a, b, capex, af, w, prices, cm_share)| {
                // a capacity price at or above capex makes the offer unbounded
                (tech(a, b, capex, af), TimeGrid::new(w).unwrap(), prices, cm_share * capex)
            })
    }

    fn perturbations(tech: &GeneratorTech, d: &GeneratorDecision) -> Vec<GeneratorDecision> {
        let mut out = Vec::new();
        for s in [-1.0, 1.0] {
            for t in 0..d.dispatch.len() {
                let mut p = d.clone();
                p.dispatch[t] = (p.dispatch[t] + s).clamp(0.0, tech.availability[t] * p.capacity);
                out.push(p);
            }
            let mut p = d.clone();
            p.capacity = (p.capacity + s).max(tech.existing);
            for t in 0..p.dispatch.len() {
                p.dispatch[t] = p.dispatch[t].min(tech.availability[t] * p.capacity);
            }
            p.cm_offer = p.cm_offer.min(p.capacity);
            out.push(p);
            let mut p = d.clone();
            p.cm_offer = (p.cm_offer + s).clamp(0.0, p.capacity);
            out.push(p);
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn generator_best_response_is_locally_optimal((tech, grid, prices, cm) in gen_case()) {
            let terms = GeneratorTerms::none(3);
            let d = generator_best_response(&tech, &grid, &prices, cm, &terms).unwrap();
            let base = generator_objective(&tech, &grid, &prices, cm, &terms, &d);
            prop_assert!(d.capacity >= tech.existing && d.cm_offer >= 0.0 && d.cm_offer <= d.capacity + 1e-9);
            for t in 0..3 {
                prop_assert!(d.dispatch[t] >= 0.0 && d.dispatch[t] <= tech.availability[t] * d.capacity + 1e-9);
            }
            for p in perturbations(&tech, &d) {
                let v = generator_objective(&tech, &grid, &prices, cm, &terms, &p);
                prop_assert!(v - base <= 1e-6 * base.abs().max(1.0), "gain {} at {p:?}", v - base);
            }
        }

        #[test]
        fn dispatch_rises_with_price((tech, grid, prices, cm) in gen_case(), t in 0usize..3, bump in 0.0f64..2000.0) {
            let terms = GeneratorTerms::none(3);
            let low = generator_best_response(&tech, &grid, &prices, cm, &terms).unwrap();
            let mut higher = prices.clone();
            higher[t] += bump;
            let high = generator_best_response(&tech, &grid, &higher, cm, &terms).unwrap();
            prop_assert!(high.dispatch[t] >= low.dispatch[t] - 1e-6 * low.dispatch[t].max(1.0));
        }

        #[test]
        fn elastic_demand_falls_with_price(d in 0.0f64..50_000.0, p in 0.0f64..25_000.0, bump in 0.0f64..5000.0) {
            let b = block(vec![d]);
            let grid = TimeGrid::new(vec![1.0]).unwrap();
            let none = [Penalty::default()];
            let low = consumer_best_response(&b, &grid, &[p], &none).unwrap();
            let high = consumer_best_response(&b, &grid, &[p + bump], &none).unwrap();
            prop_assert!(high.elastic[0] <= low.elastic[0] + 1e-9 * d.max(1.0));
            prop_assert!(b.elastic_demand(d, p + bump) <= b.elastic_demand(d, p));
        }

        #[test]
        fn consumer_best_response_is_locally_optimal(
            d in prop::collection::vec(0.0f64..30_000.0, 3),
            prices in prop::collection::vec(0.0f64..6000.0, 3),
        ) {
            let b = block(d.clone());
            let grid = TimeGrid::new(vec![100.0, 200.0, 300.0]).unwrap();
            let none = [Penalty::default(); 3];
            let r = consumer_best_response(&b, &grid, &prices, &none).unwrap();
            let base = consumer_objective(&b, &grid, &prices, &none, &r);
            for t in 0..3 {
                let e_max = 0.2 * d[t];
                let k = d[t] - e_max;
                prop_assert!(r.elastic[t] >= 0.0 && r.elastic[t] <= e_max + 1e-9);
                prop_assert!(r.ens[t] >= 0.0 && r.ens[t] <= k + 1e-9);
                prop_assert!((r.demand[t] - (k - r.ens[t] + r.elastic[t])).abs() <= 1e-9 * d[t].max(1.0));
                for s in [-1.0, 1.0] {
                    let mut p = r.clone();
                    p.elastic[t] = (p.elastic[t] + s).clamp(0.0, e_max);
                    p.demand[t] = k - p.ens[t] + p.elastic[t];
                    let mut q = r.clone();
                    q.ens[t] = (q.ens[t] + s).clamp(0.0, k);
                    q.inelastic[t] = k - q.ens[t];
                    q.demand[t] = k - q.ens[t] + q.elastic[t];
                    for c in [p, q] {
                        let v = consumer_objective(&b, &grid, &prices, &none, &c);
                        prop_assert!(v - base <= 1e-6 * base.abs().max(1.0));
                    }
                }
            }
        }
    }
}
