use std::collections::BTreeMap;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::participants::Penalty;

use super::model::{Decisions, Market, Model};
use super::verify::deviation_report;
use super::{AdmmConfig, ResidualRecord, Sweep};

pub(super) struct Run {
    pub decisions: Decisions,
    pub lambda: Vec<f64>,
    pub residuals: Vec<ResidualRecord>,
    pub converged: bool,
    pub verified: bool,
    pub iterations: usize,
    pub rho: f64,
}

fn initial_prices(model: &Model, seed: u64) -> Vec<f64> {
    let cheapest = model
        .case
        .generators
        .iter()
        .map(|g| g.b_lin)
        .fold(f64::INFINITY, f64::min);
    let start = if cheapest.is_finite() { cheapest.max(0.0) } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .rows
        .iter()
        .map(|row| match row.market {
            Market::Energy | Market::Generation => {
                let jitter: f64 = rng.random_range(-1.0..1.0);
                (start * (1.0 + 1e-9 * jitter)).clamp(row.lo, row.hi)
            }
            _ => 0.0,
        })
        .collect()
}

pub(super) fn run(model: &Model, cfg: &AdmmConfig) -> Result<Run> {
    let agents = model.agents();
    let rows: Vec<Vec<usize>> = agents.iter().map(|&a| model.agent_rows(a)).collect();
    let nr = model.rows.len();
    let peak = model.case.system_peak();
    let mut decisions = model.initial_decisions();
    let mut contrib: Vec<Vec<f64>> = agents.iter().map(|&a| model.contributions(a, &decisions)).collect();
    let mut lambda = initial_prices(model, cfg.seed);
    let mut rho = cfg.rho;
    // Per-row penalty scale making the augmentation equal in annual terms.
    let mean_w = model.case.grid.total_hours() / model.case.grid.len() as f64;
    let scale: Vec<f64> = model.rows.iter().map(|r| mean_w / r.weight).collect();

    let row_sums = |contrib: &[Vec<f64>]| {
        let mut s = vec![0.0; nr];
        for (rs, cs) in rows.iter().zip(contrib) {
            for (&r, &c) in rs.iter().zip(cs) {
                s[r] += c;
            }
        }
        s
    };
    let share = |sums: &[f64], r: usize| (sums[r] - model.rows[r].rhs) / model.rows[r].members as f64;
    let mut sums = row_sums(&contrib);
    let mut delta: Vec<f64> = (0..nr).map(|r| share(&sums, r)).collect();

    let mut residuals = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_iter = 0;
    let mut converged = false;
    let mut verified = false;
    let mut tol = (cfg.primal_tol, cfg.dual_tol);
    let mut tightenings = 0;
    let mut iterations = 0;
    for k in 1..=cfg.max_iter {
        iterations = k;
        let previous = contrib.clone();
        let mut running = sums.clone();
        for (ai, &agent) in agents.iter().enumerate() {
            let terms: Vec<Penalty> = rows[ai]
                .iter()
                .zip(&contrib[ai])
                .map(|(&r, &c)| {
                    let shift = match cfg.sweep {
                        Sweep::Jacobi => delta[r],
                        Sweep::GaussSeidel => share(&running, r),
                    };
                    let w = model.rows[r].weight;
                    let rr = rho * scale[r];
                    Penalty {
                        lin: w * (lambda[r] + rr * (c - shift)),
                        quad: w * rr,
                    }
                })
                .collect();
            model.respond(agent, &terms, &mut decisions).map_err(|e| match e {
                Error::Unbounded { detail, .. } => Error::Unbounded {
                    agent: model.agent_name(agent),
                    detail,
                },
                other => other,
            })?;
            let new = model.contributions(agent, &decisions);
            if cfg.sweep == Sweep::GaussSeidel {
                for ((&r, &c), &o) in rows[ai].iter().zip(&new).zip(&contrib[ai]) {
                    running[r] += c - o;
                }
            }
            contrib[ai] = new;
        }
        sums = row_sums(&contrib);

        let mut primal: BTreeMap<Market, f64> = BTreeMap::new();
        let mut dual: BTreeMap<Market, f64> = BTreeMap::new();
        for r in 0..nr {
            let e = primal.entry(model.rows[r].market).or_insert(0.0);
            *e = e.max((sums[r] - model.rows[r].rhs).abs());
        }
        for ((rs, new), old) in rows.iter().zip(&contrib).zip(&previous) {
            for ((&r, a), b) in rs.iter().zip(new).zip(old) {
                let e = dual.entry(model.rows[r].market).or_insert(0.0);
                *e = e.max((a - b).abs());
            }
        }
        for (&market, &p) in &primal {
            residuals.push(ResidualRecord {
                iteration: k,
                market,
                primal: p,
                dual: dual.get(&market).copied().unwrap_or(0.0),
            });
        }
        let p_max = primal.values().fold(0.0, |a: f64, b| a.max(*b)) / peak;
        let d_max = dual.values().fold(0.0, |a: f64, b| a.max(*b)) / peak;

        for r in 0..nr {
            let row = &model.rows[r];
            delta[r] = share(&sums, r);
            lambda[r] = (lambda[r] - rho * scale[r] * delta[r]).clamp(row.lo, row.hi);
        }

        if k % 100 == 0 {
            debug!("iteration {k}: primal {p_max:.3e}, dual {d_max:.3e}, rho {rho:.3e}");
        }
        if p_max <= tol.0 && d_max <= tol.1 {
            converged = true;
            let report = deviation_report(model, &lambda, &decisions)?;
            if report.accepted || tightenings >= cfg.max_tightenings {
                verified = report.accepted;
                break;
            }
            debug!(
                "iteration {k}: residuals met but an agent gains {:.3e}; tightening tolerances",
                report.max_relative
            );
            tightenings += 1;
            tol = (tol.0 * 0.1, tol.1 * 0.1);
            best = p_max.max(d_max);
            best_iter = k;
            continue;
        }
        let score = p_max.max(d_max);
        if score < best {
            best = score;
            best_iter = k;
        } else if cfg.oscillation_window > 0 && k - best_iter >= cfg.oscillation_window {
            if converged {
                break;
            }
            return Err(Error::Oscillation {
                iterations: k,
                window: cfg.oscillation_window,
            });
        }
        if cfg.balance_every > 0 && k % cfg.balance_every == 0 {
            if p_max > 10.0 * d_max {
                rho *= 2.0;
            } else if d_max > 10.0 * p_max {
                rho /= 2.0;
            }
            rho = rho.clamp(cfg.rho * 1e-4, cfg.rho * 1e4);
        }
    }
    info!(
        "ADMM {} after {iterations} iterations (rho {rho:.3e}, best responses {})",
        if converged { "converged" } else { "stopped" },
        if verified { "verified" } else { "not verified" }
    );
    Ok(Run {
        decisions,
        lambda,
        residuals,
        converged,
        verified,
        iterations,
        rho,
    })
}
