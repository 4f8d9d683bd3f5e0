//! ε-BIC → BIC transformation for general outcome spaces: the regularized
//! replica-surrogate fractional assignment.
//!
//! Per agent with `m` support types, the assignment program maximizes
//! `Σ_i F_i (Σ_j W_ij q_ij - φ(q_i))` with `φ(x) = ½γ‖x‖²`, subject to
//! `Σ_j q_ij = 1`, `Σ_i F_i q_ij = F_j`, `q ≥ 0`. Payments are derived from
//! KKT multipliers: `p̂(i) = Σ_j π_j q_ij + φ(q_i) - φ(0) + min_ℓ μ_ℓ/F_ℓ`.
//!
//! Arbitrary optimal duals can wreck revenue, so the production path solves
//! the clipped-weight program (weights floored at `-m(ε'+2γ)-ε''`) and maps
//! its duals back; the resulting payments are bounded below by
//! `-m(ε'+2γ)-ε''-γ`.
//!
//! With sampled (empirical) weights the assignment alone is only
//! approximately BIC; mixing in a strictly-IC menu round with probability δ
//! and subsidizing every agent `C` restores exact BIC and IR.
//!
//! This pipeline takes the type distributions as exact tables by
//! construction: with only sample access, rarely-drawn types can hide the
//! only outcomes that matter, and no transformation can approximately
//! preserve revenue on a general outcome space. (Downward-closed spaces
//! escape this through the `⊥` opt-out; see `transform_dc`.)

use std::collections::BTreeSet;

use crate::domain::{AgentTypeSpace, OutcomeIdx, TypeIdx};
use crate::error::{Error, Result};
use crate::instance::Setting;
use crate::mechanism::{exact_interim, Mechanism};
use crate::rng::RngStream;

const KKT_TOL: f64 = 1e-7;
const RELEASE_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-12;

/// One agent's fractional-assignment program.
#[derive(Debug, Clone)]
pub struct AssignmentProgram {
    /// Support masses `F_i` (positive, sum 1).
    pub masses: Vec<f64>,
    /// `W[i][j] ∈ [-1, 1]`: utility of true type `i` represented by
    /// surrogate type `j`.
    pub weights: Vec<Vec<f64>>,
    /// Regularizer strength; `φ(x) = ½γ‖x‖²`.
    pub gamma: f64,
}

impl AssignmentProgram {
    fn validate(&self) -> Result<()> {
        let m = self.masses.len();
        if m == 0 {
            return Err(Error::invalid("assignment program needs at least one type"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be > 0 (strict concavity)"));
        }
        if self.masses.iter().any(|&f| f <= 0.0) {
            return Err(Error::invalid("masses must be strictly positive"));
        }
        let s: f64 = self.masses.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("masses must sum to 1"));
        }
        if self.weights.len() != m || self.weights.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("weight matrix must be m x m"));
        }
        for row in &self.weights {
            for &w in row {
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&w) {
                    return Err(Error::invalid(format!("weight {} outside [-1, 1]", w)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ClipInfo {
    pub eps_prime: f64,
    pub eps_second: f64,
    pub floor: f64,
}

/// Optimal fractional assignment with KKT multipliers and derived payments.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AssignmentPlan {
    pub q: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub pi: Vec<f64>,
    /// `p̂(i)` per support type.
    pub payments: Vec<f64>,
    pub kkt_residual: f64,
    pub clip: Option<ClipInfo>,
}

/// Solve the assignment program by a primal active-set method warm-started
/// from the identity assignment. Duals come out of the final equality
/// system.
pub fn solve_assignment(prog: &AssignmentProgram) -> Result<AssignmentPlan> {
    prog.validate()?;
    let m = prog.masses.len();
    let f = &prog.masses;
    let w = &prog.weights;
    let gamma = prog.gamma;

    // identity assignment is always feasible
    let mut q = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        q[i][i] = 1.0;
    }
    let mut active = vec![vec![true; m]; m];
    for (i, row) in active.iter_mut().enumerate() {
        row[i] = false;
    }

    let max_iter = 4 * m * m + 32;
    for _ in 0..max_iter {
        let (mu, pi) = solve_eqp(f, w, gamma, &active)?;
        // free-cell targets
        let mut target = vec![vec![0.0f64; m]; m];
        let mut move_size = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                if !active[i][j] {
                    target[i][j] = w[i][j] / gamma - mu[i] / (gamma * f[i]) - pi[j] / gamma;
                    move_size = move_size.max((target[i][j] - q[i][j]).abs());
                }
            }
        }
        if move_size <= STEP_TOL {
            // at the EQP optimum; examine multipliers of the active bounds
            let mut worst = RELEASE_TOL;
            let mut release = None;
            for i in 0..m {
                for j in 0..m {
                    if active[i][j] {
                        let lam = f[i] * w[i][j] - mu[i] - f[i] * pi[j];
                        if lam > worst {
                            worst = lam;
                            release = Some((i, j));
                        }
                    }
                }
            }
            match release {
                Some((i, j)) => {
                    active[i][j] = false;
                    continue;
                }
                None => return assemble_plan(prog, q, mu, pi, &active, None),
            }
        }
        // line step toward the target, blocking at the first variable to
        // reach zero
        let mut t_star = 1.0f64;
        let mut blocker = None;
        for i in 0..m {
            for j in 0..m {
                if !active[i][j] {
                    let dir = target[i][j] - q[i][j];
                    if target[i][j] < -1e-15 && dir < 0.0 {
                        let t = q[i][j] / (q[i][j] - target[i][j]);
                        if t < t_star - 1e-15 {
                            t_star = t;
                            blocker = Some((i, j));
                        }
                    }
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                if !active[i][j] {
                    q[i][j] += t_star * (target[i][j] - q[i][j]);
                    if q[i][j] < 0.0 {
                        q[i][j] = 0.0;
                    }
                }
            }
        }
        if let Some((bi, bj)) = blocker {
            q[bi][bj] = 0.0;
            active[bi][bj] = true;
        }
    }
    Err(Error::ConvergenceFailure {
        context: "active-set assignment solve".into(),
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// Equality-constrained subproblem: with active cells pinned at zero,
/// eliminate `q` and solve the linear system in `(μ, π)`.
fn solve_eqp(
    f: &[f64],
    w: &[Vec<f64>],
    gamma: f64,
    active: &[Vec<bool>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = f.len();
    let n = 2 * m; // unknowns: mu_0..mu_{m-1}, pi_0..pi_{m-1}
    let mut a = vec![vec![0.0f64; n]; n];
    let mut b = vec![0.0f64; n];
    // row constraints
    for i in 0..m {
        let mut cnt = 0usize;
        for j in 0..m {
            if !active[i][j] {
                cnt += 1;
                a[i][m + j] -= 1.0;
                b[i] -= w[i][j];
            }
        }
        if cnt == 0 {
            return Err(Error::InternalInvariant(
                "active set emptied a row of the assignment".into(),
            ));
        }
        a[i][i] = -(cnt as f64) / f[i];
        b[i] += gamma;
    }
    // column constraints
    for j in 0..m {
        for i in 0..m {
            if !active[i][j] {
                a[m + j][i] -= 1.0;
                a[m + j][m + j] -= f[i];
                b[m + j] -= f[i] * w[i][j];
            }
        }
        b[m + j] += gamma * f[j];
    }
    let sol = solve_linear_with_gauge(a, b)?;
    Ok((sol[..m].to_vec(), sol[m..].to_vec()))
}

/// Gauss-Jordan with partial pivoting. Columns without a usable pivot
/// (the dual gauge direction, one per connected component of the free-cell
/// graph) are fixed at zero.
fn solve_linear_with_gauge(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let mut pivot_row_of_col = vec![usize::MAX; n];
    let mut used_row = vec![false; n];
    let scale = a
        .iter()
        .flat_map(|r| r.iter().map(|x| x.abs()))
        .fold(1.0f64, f64::max);
    let tol = 1e-11 * scale;
    for col in 0..n {
        let mut best = tol;
        let mut pr = usize::MAX;
        for (r, row) in a.iter().enumerate() {
            if !used_row[r] && row[col].abs() > best {
                best = row[col].abs();
                pr = r;
            }
        }
        if pr == usize::MAX {
            continue; // gauge column: variable pinned to zero
        }
        used_row[pr] = true;
        pivot_row_of_col[col] = pr;
        let piv = a[pr][col];
        for x in a[pr].iter_mut() {
            *x /= piv;
        }
        b[pr] /= piv;
        for r in 0..n {
            if r != pr && a[r][col].abs() > 0.0 {
                let factor = a[r][col];
                let (pivot_row, rest) = if pr < r {
                    let (lo, hi) = a.split_at_mut(r);
                    (&lo[pr], &mut hi[0])
                } else {
                    let (lo, hi) = a.split_at_mut(pr);
                    (&hi[0], &mut lo[r])
                };
                for (x, &p) in rest.iter_mut().zip(pivot_row.iter()) {
                    *x -= factor * p;
                }
                b[r] -= factor * b[pr];
            }
        }
    }
    let mut x = vec![0.0f64; n];
    for col in 0..n {
        if pivot_row_of_col[col] != usize::MAX {
            x[col] = b[pivot_row_of_col[col]];
        }
    }
    Ok(x)
}

fn assemble_plan(
    prog: &AssignmentProgram,
    q: Vec<Vec<f64>>,
    mu: Vec<f64>,
    pi: Vec<f64>,
    active: &[Vec<bool>],
    clip: Option<ClipInfo>,
) -> Result<AssignmentPlan> {
    let m = prog.masses.len();
    let f = &prog.masses;
    let w = &prog.weights;
    let gamma = prog.gamma;
    let mut lambda = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in 0..m {
            if active[i][j] {
                lambda[i][j] = f[i] * w[i][j] - mu[i] - f[i] * pi[j];
            }
        }
    }
    let min_mu_rate = (0..m).map(|l| mu[l] / f[l]).fold(f64::INFINITY, f64::min);
    let mut payments = Vec::with_capacity(m);
    for i in 0..m {
        let norm_sq: f64 = q[i].iter().map(|&x| x * x).sum();
        let p: f64 = q[i]
            .iter()
            .zip(&pi)
            .map(|(&qij, &pij)| qij * pij)
            .sum::<f64>()
            + 0.5 * gamma * norm_sq
            + min_mu_rate;
        payments.push(p);
    }
    let plan = AssignmentPlan {
        q,
        lambda,
        mu,
        pi,
        payments,
        kkt_residual: 0.0,
        clip,
    };
    let residual = kkt_residual(prog, &plan);
    if residual > KKT_TOL {
        return Err(Error::ConvergenceFailure {
            context: "assignment KKT residual".into(),
            iterations: 0,
            residual,
        });
    }
    Ok(AssignmentPlan {
        kkt_residual: residual,
        ..plan
    })
}

/// Largest violation across stationarity, feasibility, sign, and
/// complementary slackness.
pub fn kkt_residual(prog: &AssignmentProgram, plan: &AssignmentPlan) -> f64 {
    let m = prog.masses.len();
    let f = &prog.masses;
    let w = &prog.weights;
    let gamma = prog.gamma;
    let mut worst = 0.0f64;
    for i in 0..m {
        let row_sum: f64 = plan.q[i].iter().sum();
        worst = worst.max((row_sum - 1.0).abs());
        for j in 0..m {
            let stat = f[i] * (w[i][j] - gamma * plan.q[i][j])
                - plan.lambda[i][j]
                - plan.mu[i]
                - f[i] * plan.pi[j];
            worst = worst.max(stat.abs());
            worst = worst.max(plan.lambda[i][j].max(0.0));
            worst = worst.max((plan.lambda[i][j] * plan.q[i][j]).abs());
            worst = worst.max((-plan.q[i][j]).max(0.0));
        }
    }
    for j in 0..m {
        let col: f64 = (0..m).map(|i| f[i] * plan.q[i][j]).sum();
        worst = worst.max((col - f[j]).abs());
    }
    worst
}

/// Solve the clipped-weight program and map its duals back to the original
/// program. Guarantees `p̂ ≥ -m(ε'+2γ) - ε'' - γ`.
pub fn solve_assignment_clipped(
    prog: &AssignmentProgram,
    eps_prime: f64,
    eps_second: f64,
) -> Result<AssignmentPlan> {
    if !(eps_prime >= eps_second && eps_second >= 0.0) {
        return Err(Error::invalid("need ε' >= ε'' >= 0"));
    }
    prog.validate()?;
    let m = prog.masses.len();
    let floor = -((m as f64) * (eps_prime + 2.0 * prog.gamma) + eps_second);
    let clipped = AssignmentProgram {
        masses: prog.masses.clone(),
        weights: prog
            .weights
            .iter()
            .map(|r| r.iter().map(|&w| w.max(floor)).collect())
            .collect(),
        gamma: prog.gamma,
    };
    let mut plan = solve_assignment(&clipped)?;
    // remap duals to the unclipped program
    for i in 0..m {
        for j in 0..m {
            if prog.weights[i][j] < floor {
                if plan.q[i][j] != 0.0 {
                    return Err(Error::InternalInvariant(format!(
                        "clipped cell ({}, {}) carries mass {}",
                        i, j, plan.q[i][j]
                    )));
                }
                plan.lambda[i][j] += prog.masses[i] * (prog.weights[i][j] - floor);
            }
        }
    }
    plan.clip = Some(ClipInfo {
        eps_prime,
        eps_second,
        floor,
    });
    plan.kkt_residual = kkt_residual(prog, &plan);
    if plan.kkt_residual > KKT_TOL {
        return Err(Error::ConvergenceFailure {
            context: "clipped assignment KKT residual".into(),
            iterations: 0,
            residual: plan.kkt_residual,
        });
    }
    let payment_floor = floor - prog.gamma;
    for (i, &p) in plan.payments.iter().enumerate() {
        if p < payment_floor - KKT_TOL {
            return Err(Error::InternalInvariant(format!(
                "payment p̂({}) = {} below floor {}",
                i, p, payment_floor
            )));
        }
    }
    Ok(plan)
}

/// Swap-disutility of types `t`, `u` over an outcome set:
/// `max_{o,o'} v(t,o) - v(t,o') + v(u,o') - v(u,o)`, with the maximizing
/// ordered pair (lexicographic tie-break).
pub fn distinguishability(
    agent: &AgentTypeSpace,
    t: TypeIdx,
    u: TypeIdx,
    outcomes: &[OutcomeIdx],
) -> (f64, (OutcomeIdx, OutcomeIdx)) {
    let mut best = f64::NEG_INFINITY;
    let mut pair = (outcomes[0], outcomes[0]);
    for &o in outcomes {
        for &o2 in outcomes {
            let d = agent.value(t, o) - agent.value(t, o2) + agent.value(u, o2) - agent.value(u, o);
            if d > best + 1e-15 {
                best = d;
                pair = (o, o2);
            }
        }
    }
    (best.max(0.0), pair)
}

/// One strictly-IC menu round for an agent.
#[derive(Debug, Clone, serde::Serialize)]
pub enum SicRound {
    /// Two-option menu built from a distinguishable type pair: option A is
    /// `(outcome, price p >= 0)`, option B is `(outcome', price 0)`.
    Menu {
        pair: (TypeIdx, TypeIdx),
        option_a: (OutcomeIdx, f64),
        option_b: OutcomeIdx,
    },
    /// No distinguishable pair exists in the observed outcomes: fixed
    /// outcome, zero payment (incentive-neutral).
    Degenerate { outcome: OutcomeIdx },
}

/// Build the menu round: choose a distinguishable pair uniformly at random,
/// take its distinguishing outcome pair, price `p = (v + v')/2` (swapping
/// the outcomes if `p < 0`).
pub fn strict_ic_round(
    agent: &AgentTypeSpace,
    support: &[TypeIdx],
    outcomes: &[OutcomeIdx],
    rng: &mut RngStream,
) -> SicRound {
    let pairs = distinguishable_pairs(agent, support, outcomes);
    if pairs.is_empty() {
        return SicRound::Degenerate {
            outcome: outcomes.first().copied().unwrap_or(0),
        };
    }
    let (t, u) = pairs[rng.below(pairs.len())];
    menu_for_pair(agent, t, u, outcomes)
}

pub fn distinguishable_pairs(
    agent: &AgentTypeSpace,
    support: &[TypeIdx],
    outcomes: &[OutcomeIdx],
) -> Vec<(TypeIdx, TypeIdx)> {
    let mut pairs = Vec::new();
    if outcomes.is_empty() {
        return pairs;
    }
    for (a, &t) in support.iter().enumerate() {
        for &u in &support[a + 1..] {
            let (d, _) = distinguishability(agent, t, u, outcomes);
            if d > 0.0 {
                pairs.push((t, u));
            }
        }
    }
    pairs
}

fn menu_for_pair(
    agent: &AgentTypeSpace,
    t: TypeIdx,
    u: TypeIdx,
    outcomes: &[OutcomeIdx],
) -> SicRound {
    let (_, (mut o, mut o2)) = distinguishability(agent, t, u, outcomes);
    let mut v = agent.value(t, o) - agent.value(t, o2);
    let mut v2 = agent.value(u, o) - agent.value(u, o2);
    let mut p = 0.5 * (v + v2);
    if p < 0.0 {
        std::mem::swap(&mut o, &mut o2);
        v = -v;
        v2 = -v2;
        p = -p;
    }
    let _ = (v, v2);
    SicRound::Menu {
        pair: (t, u),
        option_a: (o, p),
        option_b: o2,
    }
}

/// The option a reporting type picks from the menu (ties resolve to the
/// free option B). Returns `(outcome, payment)`.
pub fn sic_choose(agent: &AgentTypeSpace, report: TypeIdx, round: &SicRound) -> (OutcomeIdx, f64) {
    match round {
        SicRound::Degenerate { outcome } => (*outcome, 0.0),
        SicRound::Menu {
            option_a: (o, p),
            option_b,
            ..
        } => {
            let ua = agent.value(report, *o) - p;
            let ub = agent.value(report, *option_b);
            if ua > ub {
                (*o, *p)
            } else {
                (*option_b, 0.0)
            }
        }
    }
}

/// How the RRSF weights are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightSource {
    /// Enumerated interim utilities (requires a tabular mechanism);
    /// clipping uses `(ε, 0)`.
    Exact,
    /// Empirical means, `samples` mechanism queries per surrogate column;
    /// clipping uses `(ε + 2η, η)`.
    Empirical { samples: u64, eta: f64 },
}

/// The RRSF mechanism: per agent, report `t^(i)` is represented by a random
/// surrogate `s ~ q*_{i,·}`, the input mechanism runs on the surrogate
/// profile, and the agent additionally pays `p̂(t^(i))`.
pub struct RrsfMechanism<'a> {
    pub setting: &'a Setting,
    mech: &'a dyn Mechanism,
    pub gamma: f64,
    pub eps: f64,
    pub source: WeightSource,
    /// Per agent: plan over support indices.
    pub plans: Vec<AssignmentPlan>,
    /// Weights the plans were solved on (exact or empirical).
    pub w_used: Vec<Vec<Vec<f64>>>,
    /// Observed outcome sets `O_k` (empirical mode; empty in exact mode).
    pub outcome_sets: Vec<Vec<OutcomeIdx>>,
    /// Full-space type index -> support row, per agent.
    support_row: Vec<Vec<Option<usize>>>,
}

pub fn rrsf_mechanism<'a>(
    setting: &'a Setting,
    mech: &'a dyn Mechanism,
    gamma: f64,
    eps: f64,
    source: WeightSource,
    rng: &mut RngStream,
) -> Result<RrsfMechanism<'a>> {
    let n = setting.num_agents();
    let mut plans = Vec::with_capacity(n);
    let mut w_used = Vec::with_capacity(n);
    let mut outcome_sets = Vec::with_capacity(n);
    let mut support_row = Vec::with_capacity(n);
    for k in 0..n {
        let support = setting.dists[k].support().to_vec();
        let masses = setting.dists[k].masses().to_vec();
        let (w, observed) = match source {
            WeightSource::Exact => (exact_weight_table(setting, mech, k, &support)?, Vec::new()),
            WeightSource::Empirical { samples, .. } => {
                empirical_weight_table(setting, mech, k, &support, samples, rng)?
            }
        };
        let (eps_prime, eps_second) = match source {
            WeightSource::Exact => (eps, 0.0),
            WeightSource::Empirical { eta, .. } => (eps + 2.0 * eta, eta),
        };
        let prog = AssignmentProgram {
            masses,
            weights: w.clone(),
            gamma,
        };
        plans.push(solve_assignment_clipped(&prog, eps_prime, eps_second)?);
        w_used.push(w);
        outcome_sets.push(observed);
        let mut rowmap = vec![None; setting.agents[k].num_types()];
        for (row, &t) in support.iter().enumerate() {
            rowmap[t] = Some(row);
        }
        support_row.push(rowmap);
    }
    Ok(RrsfMechanism {
        setting,
        mech,
        gamma,
        eps,
        source,
        plans,
        w_used,
        outcome_sets,
        support_row,
    })
}

/// Exact weights `W_{i,j} = E[v(t^(i), x(t^(j), t_{-k})) - p_k(t^(j), t_{-k})]`
/// over the support of agent `k`'s distribution. Full price, no discount.
fn exact_weight_table(
    setting: &Setting,
    mech: &dyn Mechanism,
    k: usize,
    support: &[TypeIdx],
) -> Result<Vec<Vec<f64>>> {
    let env = setting.env();
    let agent = &setting.agents[k];
    let m = support.len();
    let mut w = vec![vec![0.0f64; m]; m];
    for (j, &s) in support.iter().enumerate() {
        for (i, &t) in support.iter().enumerate() {
            let val = exact_interim(&env, mech, k, s, |o, pay| agent.value(t, o) - pay)?;
            w[i][j] = bound_weight(val)?;
        }
    }
    Ok(w)
}

/// Empirical weights: `samples` queries per surrogate column `j`, shared
/// across all true types `i` (`m·L` observed outcomes per agent in total).
/// Also returns the set of observed outcomes.
fn empirical_weight_table(
    setting: &Setting,
    mech: &dyn Mechanism,
    k: usize,
    support: &[TypeIdx],
    samples: u64,
    rng: &mut RngStream,
) -> Result<(Vec<Vec<f64>>, Vec<OutcomeIdx>)> {
    if samples == 0 {
        return Err(Error::invalid("empirical weight estimation needs samples >= 1"));
    }
    let n = setting.num_agents();
    let agent = &setting.agents[k];
    let m = support.len();
    let mut sums = vec![vec![0.0f64; m]; m];
    let mut observed: BTreeSet<OutcomeIdx> = BTreeSet::new();
    let mut bids = vec![0usize; n];
    let mut payments = vec![0.0f64; n];
    for (j, &s) in support.iter().enumerate() {
        for _ in 0..samples {
            for (a, slot) in bids.iter_mut().enumerate() {
                *slot = if a == k { s } else { setting.dists[a].sample(rng) };
            }
            let o = mech.query_into(&bids, rng, &mut payments)?;
            observed.insert(o);
            let pay = payments[k];
            for (i, &t) in support.iter().enumerate() {
                sums[i][j] += agent.value(t, o) - pay;
            }
        }
    }
    let mut w = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in 0..m {
            w[i][j] = bound_weight(sums[i][j] / samples as f64)?;
        }
    }
    Ok((w, observed.into_iter().collect()))
}

fn bound_weight(w: f64) -> Result<f64> {
    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&w) {
        return Err(Error::invalid(format!(
            "assignment weight {} outside [-1, 1]; normalize the mechanism",
            w
        )));
    }
    Ok(w.clamp(-1.0, 1.0))
}

impl<'a> RrsfMechanism<'a> {
    pub fn support_row(&self, agent: usize, t: TypeIdx) -> Result<usize> {
        self.support_row[agent][t].ok_or_else(|| {
            Error::invalid(format!("type {} has zero mass for agent {}", t, agent))
        })
    }

    /// Exact interim utility of (true type, report) pairs given exact
    /// weight tables (which may differ from the solved `w_used` in
    /// empirical mode).
    pub fn interim_utility_from_table(
        &self,
        w_exact: &[Vec<Vec<f64>>],
        agent: usize,
        true_row: usize,
        report_row: usize,
    ) -> f64 {
        let plan = &self.plans[agent];
        let q = &plan.q[report_row];
        let w = &w_exact[agent][true_row];
        q.iter().zip(w).map(|(&qj, &wj)| qj * wj).sum::<f64>() - plan.payments[report_row]
    }

    /// Exact tables for certification.
    pub fn exact_tables(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        (0..self.setting.num_agents())
            .map(|k| exact_weight_table(self.setting, self.mech, k, self.setting.dists[k].support()))
            .collect()
    }

    /// Expected extra payment `Σ_k E_{i~F}[p̂_k(i)]`.
    pub fn expected_extra_payment(&self) -> f64 {
        self.plans
            .iter()
            .enumerate()
            .map(|(k, plan)| {
                self.setting.dists[k]
                    .masses()
                    .iter()
                    .zip(&plan.payments)
                    .map(|(&f, &p)| f * p)
                    .sum::<f64>()
            })
            .sum()
    }
}

impl<'a> Mechanism for RrsfMechanism<'a> {
    fn num_agents(&self) -> usize {
        self.setting.num_agents()
    }

    fn query_into(
        &self,
        bids: &[TypeIdx],
        rng: &mut RngStream,
        payments: &mut [f64],
    ) -> Result<OutcomeIdx> {
        let n = self.num_agents();
        let mut surrogates = vec![0usize; n];
        let mut extra = vec![0.0f64; n];
        for k in 0..n {
            let row = self.support_row(k, bids[k])?;
            let plan = &self.plans[k];
            let j = rng.categorical(&plan.q[row]);
            surrogates[k] = self.setting.dists[k].support()[j];
            extra[k] = plan.payments[row];
        }
        let o = self.mech.query_into(&surrogates, rng, payments)?;
        for k in 0..n {
            payments[k] += extra[k];
        }
        Ok(o)
    }
}

/// Parameters of the combined non-ideal mechanism for a target ε.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct NonIdealParams {
    pub eps: f64,
    pub gamma: f64,
    /// Probability of running the strictly-IC round instead of RERSF.
    pub mix_delta: f64,
    pub eta: f64,
    pub subsidy: f64,
    pub zeta: f64,
    pub samples_required: u64,
    pub samples_used: u64,
    /// True when `samples_used < samples_required` (desk-scale relaxation).
    pub relaxed: bool,
}

/// `L = ⌈max(2 ε⁻² ln(2nm²/ε), 8 m⁶ n² ε⁻⁴ ln(8 m⁴ n / ε²))⌉`.
pub fn nonideal_samples(eps: f64, n: usize, m: usize) -> u64 {
    if eps <= 0.0 {
        return 0;
    }
    let (nf, mf) = (n as f64, m as f64);
    let a = 2.0 / (eps * eps) * (2.0 * nf * mf * mf / eps).ln();
    let b = 8.0 * mf.powi(6) * nf * nf / eps.powi(4) * (8.0 * mf.powi(4) * nf / (eps * eps)).ln();
    a.max(b).ceil() as u64
}

pub fn nonideal_params(eps: f64, n: usize, m: usize, l_override: Option<u64>) -> NonIdealParams {
    let required = nonideal_samples(eps, n, m);
    let used = l_override.unwrap_or(required);
    NonIdealParams {
        eps,
        // γ = ε, floored so the assignment stays strictly concave at ε = 0
        gamma: eps.max(1e-9),
        mix_delta: eps,
        eta: eps,
        subsidy: 4.0 * eps,
        zeta: if n > 0 {
            eps * eps / (4.0 * n as f64 * (m as f64).powi(3))
        } else {
            0.0
        },
        samples_required: required,
        samples_used: used,
        relaxed: used < required,
    }
}

/// The combined non-ideal mechanism: RERSF with probability `1-δ`, a
/// strictly-IC menu round for a uniformly random agent with probability
/// `δ`, and a universal subsidy `C` per agent.
pub struct NonIdealMechanism<'a> {
    pub params: NonIdealParams,
    pub rrsf: RrsfMechanism<'a>,
}

pub fn run_nonideal<'a>(
    setting: &'a Setting,
    mech: &'a dyn Mechanism,
    eps: f64,
    l_override: Option<u64>,
    rng: &mut RngStream,
) -> Result<NonIdealMechanism<'a>> {
    if eps < 0.0 {
        return Err(Error::invalid("eps must be nonnegative"));
    }
    let n = setting.num_agents();
    let m = setting.max_support();
    let params = nonideal_params(eps, n, m, l_override);
    let source = if eps == 0.0 {
        WeightSource::Exact
    } else {
        WeightSource::Empirical {
            samples: params.samples_used,
            eta: params.eta,
        }
    };
    let rrsf = rrsf_mechanism(setting, mech, params.gamma, eps, source, rng)?;
    Ok(NonIdealMechanism { params, rrsf })
}

impl<'a> NonIdealMechanism<'a> {
    fn setting(&self) -> &Setting {
        self.rrsf.setting
    }

    /// Exact interim utility of (true type, report), marginalizing the
    /// RERSF/SIC mixture and the menu-pair randomness analytically.
    /// `w_exact` comes from [`RrsfMechanism::exact_tables`].
    pub fn exact_interim_utility(
        &self,
        w_exact: &[Vec<Vec<f64>>],
        agent: usize,
        true_row: usize,
        report_row: usize,
    ) -> f64 {
        let setting = self.setting();
        let d = self.params.mix_delta;
        let n = setting.num_agents() as f64;
        let rersf = self
            .rrsf
            .interim_utility_from_table(w_exact, agent, true_row, report_row);
        if d == 0.0 {
            return rersf + self.params.subsidy;
        }
        let space = &setting.agents[agent];
        let support = setting.dists[agent].support();
        let t_true = support[true_row];
        let t_report = support[report_row];
        // own SIC round
        let own = self.expected_sic_utility(agent, t_true, t_report);
        // other agents' SIC rounds: expected value of their chosen outcome
        let mut others = 0.0;
        for l in 0..setting.num_agents() {
            if l == agent {
                continue;
            }
            others += self.expected_value_under_sic_of(l, space, t_true);
        }
        (1.0 - d) * rersf + (d / n) * own + (d / n) * others + self.params.subsidy
    }

    fn sic_menus(&self, agent: usize) -> Vec<SicRound> {
        let setting = self.setting();
        let space = &setting.agents[agent];
        let support = setting.dists[agent].support();
        let outcomes = &self.rrsf.outcome_sets[agent];
        let pairs = distinguishable_pairs(space, support, outcomes);
        if pairs.is_empty() {
            return vec![SicRound::Degenerate {
                outcome: outcomes.first().copied().unwrap_or(0),
            }];
        }
        pairs
            .into_iter()
            .map(|(t, u)| menu_for_pair(space, t, u, outcomes))
            .collect()
    }

    fn expected_sic_utility(&self, agent: usize, t_true: TypeIdx, t_report: TypeIdx) -> f64 {
        let space = &self.setting().agents[agent];
        let menus = self.sic_menus(agent);
        let mut total = 0.0;
        for menu in &menus {
            let (o, pay) = sic_choose(space, t_report, menu);
            total += space.value(t_true, o) - pay;
        }
        total / menus.len() as f64
    }

    /// Expected value for `viewer_type` (an agent other than `l`) of the
    /// outcome chosen in agent `l`'s SIC round under truthful play.
    fn expected_value_under_sic_of(
        &self,
        l: usize,
        viewer: &AgentTypeSpace,
        viewer_type: TypeIdx,
    ) -> f64 {
        let setting = self.setting();
        let space = &setting.agents[l];
        let menus = self.sic_menus(l);
        let mut total = 0.0;
        for (t_l, mass) in setting.dists[l].iter() {
            for menu in &menus {
                let (o, _) = sic_choose(space, t_l, menu);
                total += mass * viewer.value(viewer_type, o) / menus.len() as f64;
            }
        }
        total
    }

    /// Exact expected revenue, given the exact revenue of the input
    /// mechanism (phase-2 payments pass through unchanged because the
    /// surrogate marginal is the type distribution itself).
    pub fn exact_revenue(&self, base_revenue: f64) -> f64 {
        let setting = self.setting();
        let d = self.params.mix_delta;
        let rersf_rev = base_revenue + self.rrsf.expected_extra_payment();
        if d == 0.0 {
            return rersf_rev;
        }
        let n = setting.num_agents();
        let mut sic_rev = 0.0;
        for k in 0..n {
            let space = &setting.agents[k];
            let menus = self.sic_menus(k);
            for (t_k, mass) in setting.dists[k].iter() {
                for menu in &menus {
                    let (_, pay) = sic_choose(space, t_k, menu);
                    sic_rev += mass * pay / menus.len() as f64;
                }
            }
        }
        (1.0 - d) * rersf_rev + (d / n as f64) * sic_rev - n as f64 * self.params.subsidy
    }
}

impl<'a> Mechanism for NonIdealMechanism<'a> {
    fn num_agents(&self) -> usize {
        self.setting().num_agents()
    }

    fn query_into(
        &self,
        bids: &[TypeIdx],
        rng: &mut RngStream,
        payments: &mut [f64],
    ) -> Result<OutcomeIdx> {
        let setting = self.setting();
        let n = setting.num_agents();
        let outcome = if self.params.mix_delta > 0.0 && rng.bernoulli(self.params.mix_delta) {
            let k = rng.below(n);
            let menu = strict_ic_round(
                &setting.agents[k],
                setting.dists[k].support(),
                &self.rrsf.outcome_sets[k],
                rng,
            );
            let (o, pay) = sic_choose(&setting.agents[k], bids[k], &menu);
            for p in payments.iter_mut() {
                *p = 0.0;
            }
            payments[k] = pay;
            o
        } else {
            self.rrsf.query_into(bids, rng, payments)?
        };
        for p in payments.iter_mut() {
            *p -= self.params.subsidy;
        }
        Ok(outcome)
    }
}
