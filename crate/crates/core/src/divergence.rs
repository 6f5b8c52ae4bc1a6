//! Exact divergence identities and bounds on finite-support distributions.
//!
//! All logarithms are natural; `|p − q|` is the L1 distance `Σ|pᵢ − qᵢ|`.

use rand::RngCore;
use rand_distr::{Distribution, Exp1};

use crate::error::{Result, WinnError};

/// Entry floor of [`random_dist`].
pub const RANDOM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    /// Non-negative finite entries summing to 1 within `1e-12`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(WinnError::usage("distribution has empty support"));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(WinnError::usage(format!("invalid probability {p}")));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(WinnError::usage(format!("probabilities sum to {s}, not 1")));
        }
        Ok(DiscreteDist { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn same_support(p: &DiscreteDist, q: &DiscreteDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(WinnError::usage(format!("supports differ: {} vs {}", p.len(), q.len())));
    }
    Ok(())
}

/// `KL(p‖q) = Σ p ln(p/q)` with `0·ln 0 = 0`.
pub fn kl(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    same_support(p, q)?;
    let mut s = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(WinnError::usage(format!(
                "KL undefined: q[{i}] = 0 where p[{i}] = {pi}"
            )));
        }
        s += pi * (pi / qi).ln();
    }
    Ok(s)
}

/// `KL(p‖q) + KL(q‖p)`.
pub fn jeffreys(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    Ok(kl(p, q)? + kl(q, p)?)
}

/// L1 distance.
pub fn l1(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    same_support(p, q)?;
    Ok(p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Gap {
    /// `E_p[f] − E_q[f]` with `f = ln(p/q)`.
    pub lhs: f64,
    /// Jeffreys divergence.
    pub rhs: f64,
    pub gap: f64,
}

/// Plugs the log-ratio critic into the Wasserstein objective and compares
/// with the Jeffreys divergence; the two agree identically.
pub fn lemma1_gap(p: &DiscreteDist, q: &DiscreteDist) -> Result<Lemma1Gap> {
    same_support(p, q)?;
    let mut ep = 0.0;
    let mut eq = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 || qi == 0.0 {
            return Err(WinnError::usage(format!(
                "log ratio undefined at {i}: p = {pi}, q = {qi}"
            )));
        }
        let f = (pi / qi).ln();
        ep += pi * f;
        eq += qi * f;
    }
    let lhs = ep - eq;
    let rhs = jeffreys(p, q)?;
    Ok(Lemma1Gap {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

/// One checked inequality `lhs ≤ rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inequality {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
}

impl Inequality {
    /// Absolute slack for rounding when both sides are (near) zero.
    pub const SLACK: f64 = 1e-15;

    pub fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs + Self::SLACK
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub l1: f64,
    pub p_min: f64,
    pub kl_pq: f64,
    pub kl_qp: f64,
    pub jeffreys: f64,
    pub checks: Vec<Inequality>,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.checks.iter().filter(|c| !c.holds()).count()
    }
}

/// Pinsker, reverse Pinsker, and the Jeffreys sandwich for `p` (strictly
/// positive) and `q`:
///
/// 1. `½|p−q|² ≤ KL(q‖p)`
/// 2. `KL(q‖p) ≤ |p−q|² / p_min`
/// 3. `(1 + p_min/2)·KL(p‖q) ≤ J(p,q)` and `J(p,q) ≤ (1 + 2/p_min)·KL(p‖q)`
pub fn bound_suite(p: &DiscreteDist, q: &DiscreteDist) -> Result<BoundReport> {
    let p_min = p.min();
    if p_min <= 0.0 {
        return Err(WinnError::usage("bounds need a strictly positive p (p_min = 0)"));
    }
    let d = l1(p, q)?;
    let kl_pq = kl(p, q)?;
    let kl_qp = kl(q, p)?;
    let j = kl_pq + kl_qp;
    let checks = vec![
        Inequality {
            name: "pinsker",
            lhs: 0.5 * d * d,
            rhs: kl_qp,
        },
        Inequality {
            name: "reverse_pinsker",
            lhs: kl_qp,
            rhs: d * d / p_min,
        },
        Inequality {
            name: "sandwich_lower",
            lhs: (1.0 + p_min / 2.0) * kl_pq,
            rhs: j,
        },
        Inequality {
            name: "sandwich_upper",
            lhs: j,
            rhs: (1.0 + 2.0 / p_min) * kl_pq,
        },
    ];
    Ok(BoundReport {
        l1: d,
        p_min,
        kl_pq,
        kl_qp,
        jeffreys: j,
        checks,
    })
}

/// A random distribution over `support` points: normalized exponential
/// draws (a flat Dirichlet), mixed with the uniform so that every entry is
/// at least `1e-3`: `p = floor + (1 − support·floor)·d`.
pub fn random_dist(support: usize, rng: &mut dyn RngCore) -> Result<DiscreteDist> {
    if support == 0 || support as f64 * RANDOM_FLOOR >= 1.0 {
        return Err(WinnError::usage(format!(
            "support must be between 1 and {}",
            (1.0 / RANDOM_FLOOR) as usize - 1
        )));
    }
    let draws: Vec<f64> = (0..support).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let free = 1.0 - support as f64 * RANDOM_FLOOR;
    let mut probs: Vec<f64> = draws.iter().map(|d| RANDOM_FLOOR + free * d / total).collect();
    // Put the rounding residue on the largest entry.
    let resid = 1.0 - probs.iter().sum::<f64>();
    let imax = (0..support).fold(0, |m, i| if probs[i] > probs[m] { i } else { m });
    probs[imax] += resid;
    DiscreteDist::new(probs)
}

/// Worst values over a randomized sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub trials: usize,
    pub max_gap: f64,
    pub violations: usize,
    /// One entry per inequality, in [`bound_suite`] order.
    pub checks: Vec<CheckSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSummary {
    pub name: &'static str,
    /// Smallest `rhs − lhs` seen.
    pub worst_margin: f64,
    pub violations: usize,
}

/// Draws `trials` pairs with support sizes uniform in `2..=max_support` and
/// runs [`lemma1_gap`] and [`bound_suite`] on each.
pub fn sweep(trials: usize, max_support: usize, rng: &mut dyn RngCore) -> Result<SweepReport> {
    use rand::Rng;
    if max_support < 2 {
        return Err(WinnError::usage("support must be at least 2"));
    }
    let mut report = SweepReport {
        trials,
        max_gap: 0.0,
        violations: 0,
        checks: Vec::new(),
    };
    for _ in 0..trials {
        let k = rng.random_range(2..=max_support);
        let p = random_dist(k, rng)?;
        let q = random_dist(k, rng)?;
        report.max_gap = report.max_gap.max(lemma1_gap(&p, &q)?.gap);
        let b = bound_suite(&p, &q)?;
        report.violations += b.violations();
        for c in &b.checks {
            let bad = usize::from(!c.holds());
            match report.checks.iter_mut().find(|s| s.name == c.name) {
                Some(s) => {
                    s.worst_margin = s.worst_margin.min(c.margin());
                    s.violations += bad;
                }
                None => report.checks.push(CheckSummary {
                    name: c.name,
                    worst_margin: c.margin(),
                    violations: bad,
                }),
            }
        }
    }
    Ok(report)
}
