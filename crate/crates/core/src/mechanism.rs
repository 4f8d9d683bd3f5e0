//! Mechanism query access and interim-quantity computation.
//!
//! A [`Mechanism`] answers bid profiles with a sampled outcome and a payment
//! vector. Tabular mechanisms additionally expose their exact per-profile
//! outcome/payment distribution, which unlocks exact interim utilities,
//! exact BIC/IR checks, and exact revenue accounting.

use crate::domain::{AgentTypeSpace, DiscreteDistribution, OutcomeIdx, TypeIdx};
use crate::error::{Error, Result};
use crate::numeric::RunningStat;
use crate::rng::RngStream;

/// One entry of a mechanism's outcome/payment mixture at a bid profile.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub prob: f64,
    pub outcome: OutcomeIdx,
    pub payments: Vec<f64>,
}

pub trait Mechanism {
    fn num_agents(&self) -> usize;

    /// Sample an outcome for `bids`, writing per-agent payments into
    /// `payments` (length `num_agents`).
    fn query_into(
        &self,
        bids: &[TypeIdx],
        rng: &mut RngStream,
        payments: &mut [f64],
    ) -> Result<OutcomeIdx>;

    /// Exact outcome/payment mixture at `bids`, when the mechanism is
    /// tabular. `None` for mechanisms only reachable through sampling.
    fn exact_rows(&self, _bids: &[TypeIdx]) -> Option<&[TableRow]> {
        None
    }

    fn query(&self, bids: &[TypeIdx], rng: &mut RngStream) -> Result<(OutcomeIdx, Vec<f64>)> {
        let mut payments = vec![0.0; self.num_agents()];
        let outcome = self.query_into(bids, rng, &mut payments)?;
        Ok((outcome, payments))
    }
}

/// A mechanism given as a finite mixture over (outcome, payments) per bid
/// profile. Payment randomization beyond finite mixtures is out of scope.
#[derive(Debug, Clone)]
pub struct TabularMechanism {
    dims: Vec<usize>,
    strides: Vec<usize>,
    rows: Vec<Vec<TableRow>>,
    cdf: Vec<Vec<f64>>,
}

impl TabularMechanism {
    pub fn new(dims: Vec<usize>, rows: Vec<Vec<TableRow>>) -> Result<Self> {
        let n = dims.len();
        if n == 0 {
            return Err(Error::invalid("mechanism needs at least one agent"));
        }
        let profiles: usize = dims.iter().product();
        if rows.len() != profiles {
            return Err(Error::invalid(format!(
                "expected {} bid profiles, got {}",
                profiles,
                rows.len()
            )));
        }
        let mut cdf = Vec::with_capacity(profiles);
        for mixture in &rows {
            if mixture.is_empty() {
                return Err(Error::invalid("each profile needs at least one row"));
            }
            let mut acc = 0.0;
            let mut c = Vec::with_capacity(mixture.len());
            for row in mixture {
                if row.prob < 0.0 {
                    return Err(Error::invalid("negative row probability"));
                }
                if row.payments.len() != n {
                    return Err(Error::invalid("payment vector length must equal agent count"));
                }
                if row.payments.iter().any(|p| !p.is_finite()) {
                    return Err(Error::invalid("payments must be finite"));
                }
                acc += row.prob;
                c.push(acc);
            }
            if (acc - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "row probabilities sum to {} (must be 1)",
                    acc
                )));
            }
            *c.last_mut().unwrap() = 1.0;
            cdf.push(c);
        }
        let mut strides = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * dims[i + 1];
        }
        Ok(TabularMechanism {
            dims,
            strides,
            rows,
            cdf,
        })
    }

    /// Build from a closure mapping each bid profile to its mixture.
    pub fn from_fn(dims: Vec<usize>, f: impl Fn(&[TypeIdx]) -> Vec<TableRow>) -> Result<Self> {
        let profiles: usize = dims.iter().product();
        let n = dims.len();
        let mut rows = Vec::with_capacity(profiles);
        let mut bids = vec![0usize; n];
        for _ in 0..profiles {
            rows.push(f(&bids));
            // odometer, last agent fastest
            for i in (0..n).rev() {
                bids[i] += 1;
                if bids[i] < dims[i] {
                    break;
                }
                bids[i] = 0;
            }
        }
        TabularMechanism::new(dims, rows)
    }

    #[inline]
    pub fn profile_index(&self, bids: &[TypeIdx]) -> usize {
        debug_assert_eq!(bids.len(), self.dims.len());
        bids.iter()
            .zip(&self.strides)
            .map(|(&b, &s)| b * s)
            .sum()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
}

impl Mechanism for TabularMechanism {
    fn num_agents(&self) -> usize {
        self.dims.len()
    }

    fn query_into(
        &self,
        bids: &[TypeIdx],
        rng: &mut RngStream,
        payments: &mut [f64],
    ) -> Result<OutcomeIdx> {
        for (i, &b) in bids.iter().enumerate() {
            if b >= self.dims[i] {
                return Err(Error::invalid(format!(
                    "bid {} out of range for agent {}",
                    b, i
                )));
            }
        }
        let p = self.profile_index(bids);
        let u = rng.f64();
        let k = self.cdf[p].partition_point(|&c| c <= u);
        let row = &self.rows[p][k.min(self.rows[p].len() - 1)];
        payments.copy_from_slice(&row.payments);
        Ok(row.outcome)
    }

    fn exact_rows(&self, bids: &[TypeIdx]) -> Option<&[TableRow]> {
        Some(&self.rows[self.profile_index(bids)])
    }
}

/// The environment an interim quantity is taken in: valuations plus the
/// distribution each *other* agent's report is drawn from.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub agents: &'a [AgentTypeSpace],
    pub dists: &'a [DiscreteDistribution],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Exact,
    MonteCarlo(u64),
}

/// A point estimate with its standard error (0 for exact quantities).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            stderr: 0.0,
            samples: 0,
        }
    }
}

/// Visit every profile of the agents in `members`, with the probability of
/// each profile under the product of their distributions.
pub fn enumerate_profiles(
    dists: &[&DiscreteDistribution],
    mut visit: impl FnMut(&[TypeIdx], f64),
) {
    let k = dists.len();
    if k == 0 {
        visit(&[], 1.0);
        return;
    }
    let mut idx = vec![0usize; k];
    let mut profile = vec![0usize; k];
    loop {
        let mut p = 1.0;
        for (slot, (&i, d)) in profile.iter_mut().zip(idx.iter().zip(dists)) {
            *slot = d.support()[i];
            p *= d.masses()[i];
        }
        visit(&profile, p);
        let mut carry = k;
        for i in (0..k).rev() {
            idx[i] += 1;
            if idx[i] < dists[i].support_size() {
                carry = i;
                break;
            }
            idx[i] = 0;
        }
        if carry == k {
            break;
        }
    }
}

fn validate_types(env: &Env, agent: usize, types: &[TypeIdx]) -> Result<()> {
    if agent >= env.agents.len() {
        return Err(Error::invalid(format!("agent {} out of range", agent)));
    }
    for &t in types {
        if t >= env.agents[agent].num_types() {
            return Err(Error::invalid(format!(
                "type {} outside agent {}'s space",
                t, agent
            )));
        }
    }
    Ok(())
}

/// Interim utility of `agent` with true type `true_type` reporting `report`,
/// all other agents truthful with types from `env.dists`.
pub fn interim_utility<M: Mechanism + ?Sized>(
    env: &Env,
    mech: &M,
    agent: usize,
    true_type: TypeIdx,
    report: TypeIdx,
    mode: EvalMode,
    rng: &mut RngStream,
) -> Result<Estimate> {
    validate_types(env, agent, &[true_type, report])?;
    match mode {
        EvalMode::Exact => {
            let val = exact_interim(env, mech, agent, report, |o, pay| {
                env.agents[agent].value(true_type, o) - pay
            })?;
            Ok(Estimate::exact(val))
        }
        EvalMode::MonteCarlo(n) => {
            if n == 0 {
                return Err(Error::invalid("Monte Carlo sample count must be >= 1"));
            }
            let mut stat = RunningStat::new();
            let mut bids: Vec<TypeIdx> = vec![0; env.agents.len()];
            let mut payments = vec![0.0; mech.num_agents()];
            for _ in 0..n {
                sample_profile(env, agent, report, &mut bids, rng);
                let o = mech.query_into(&bids, rng, &mut payments)?;
                stat.push(env.agents[agent].value(true_type, o) - payments[agent]);
            }
            Ok(Estimate {
                value: stat.mean(),
                stderr: stat.stderr(),
                samples: n,
            })
        }
    }
}

fn sample_profile(
    env: &Env,
    agent: usize,
    report: TypeIdx,
    bids: &mut [TypeIdx],
    rng: &mut RngStream,
) {
    for (j, slot) in bids.iter_mut().enumerate() {
        *slot = if j == agent {
            report
        } else {
            env.dists[j].sample(rng)
        };
    }
}

/// Enumerated interim expectation of `f(outcome, payment_of_agent)` when
/// `agent` reports `report`. Requires a tabular mechanism.
pub fn exact_interim<M: Mechanism + ?Sized>(
    env: &Env,
    mech: &M,
    agent: usize,
    report: TypeIdx,
    f: impl Fn(OutcomeIdx, f64) -> f64,
) -> Result<f64> {
    let others: Vec<&DiscreteDistribution> = env
        .dists
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != agent)
        .map(|(_, d)| d)
        .collect();
    let mut total = 0.0;
    let mut bids = vec![0usize; env.agents.len()];
    let mut unsupported = false;
    enumerate_profiles(&others, |profile, p| {
        if unsupported {
            return;
        }
        let mut k = 0;
        for (j, slot) in bids.iter_mut().enumerate() {
            if j == agent {
                *slot = report;
            } else {
                *slot = profile[k];
                k += 1;
            }
        }
        match mech.exact_rows(&bids) {
            Some(rows) => {
                for row in rows {
                    total += p * row.prob * f(row.outcome, row.payments[agent]);
                }
            }
            None => unsupported = true,
        }
    });
    if unsupported {
        return Err(Error::UnsupportedMode(
            "exact interim quantities need a tabular mechanism".into(),
        ));
    }
    Ok(total)
}

/// Full BIC/IR report: interim utilities for every (true type, report) pair,
/// the largest misreport gain, and the smallest truthful utility.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BicIrReport {
    /// `matrix[agent][true_idx][report_idx]`, indices into the support of
    /// the respective agent's distribution.
    pub matrix: Vec<Vec<Vec<Estimate>>>,
    pub supports: Vec<Vec<TypeIdx>>,
    pub max_regret: f64,
    /// Pooled standard error of the argmax regret pair.
    pub max_regret_stderr: f64,
    pub min_ir_slack: f64,
    pub min_ir_slack_stderr: f64,
}

impl BicIrReport {
    pub fn is_eps_bic(&self, eps: f64) -> bool {
        self.max_regret <= eps
    }
}

/// Compute the BIC/IR report for `mech` under `env`. Reports range over each
/// agent's declared support. In Monte Carlo mode, one sweep of `n` queries
/// per (agent, report) is shared across all true types.
pub fn check_eps_bic_ir<M: Mechanism + ?Sized>(
    env: &Env,
    mech: &M,
    mode: EvalMode,
    rng: &mut RngStream,
) -> Result<BicIrReport> {
    let n_agents = env.agents.len();
    let mut matrix = Vec::with_capacity(n_agents);
    let mut supports = Vec::with_capacity(n_agents);
    for agent in 0..n_agents {
        let support = env.dists[agent].support().to_vec();
        let m = support.len();
        let mut per_agent = vec![Vec::with_capacity(m); m];
        match mode {
            EvalMode::Exact => {
                for (ri, &report) in support.iter().enumerate() {
                    let _ = ri;
                    for (ti, &true_type) in support.iter().enumerate() {
                        let est =
                            interim_utility(env, mech, agent, true_type, report, mode, rng)?;
                        per_agent[ti].push(est);
                    }
                }
            }
            EvalMode::MonteCarlo(n) => {
                if n == 0 {
                    return Err(Error::invalid("Monte Carlo sample count must be >= 1"));
                }
                let mut bids = vec![0usize; n_agents];
                let mut payments = vec![0.0; mech.num_agents()];
                for &report in &support {
                    let mut stats: Vec<RunningStat> =
                        support.iter().map(|_| RunningStat::new()).collect();
                    for _ in 0..n {
                        sample_profile(env, agent, report, &mut bids, rng);
                        let o = mech.query_into(&bids, rng, &mut payments)?;
                        let pay = payments[agent];
                        for (ti, &true_type) in support.iter().enumerate() {
                            stats[ti].push(env.agents[agent].value(true_type, o) - pay);
                        }
                    }
                    for (ti, stat) in stats.iter().enumerate() {
                        per_agent[ti].push(Estimate {
                            value: stat.mean(),
                            stderr: stat.stderr(),
                            samples: n,
                        });
                    }
                }
            }
        }
        matrix.push(per_agent);
        supports.push(support);
    }

    let mut max_regret = f64::NEG_INFINITY;
    let mut max_regret_stderr = 0.0;
    let mut min_ir = f64::INFINITY;
    let mut min_ir_stderr = 0.0;
    for per_agent in &matrix {
        let m = per_agent.len();
        for ti in 0..m {
            let truthful = per_agent[ti][ti];
            if truthful.value < min_ir {
                min_ir = truthful.value;
                min_ir_stderr = truthful.stderr;
            }
            for ri in 0..m {
                if ri == ti {
                    continue;
                }
                let dev = per_agent[ti][ri];
                let regret = dev.value - truthful.value;
                if regret > max_regret {
                    max_regret = regret;
                    max_regret_stderr =
                        (dev.stderr * dev.stderr + truthful.stderr * truthful.stderr).sqrt();
                }
            }
        }
    }
    if !max_regret.is_finite() {
        // single-type agents only: no deviation exists
        max_regret = 0.0;
    }
    Ok(BicIrReport {
        matrix,
        supports,
        max_regret,
        max_regret_stderr,
        min_ir_slack: min_ir,
        min_ir_slack_stderr: min_ir_stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::OutcomeSpace;
    use crate::scenarios;

    /// Single-agent posted price: price 1/2 for an item worth 1.
    fn posted_price() -> (Vec<AgentTypeSpace>, Vec<DiscreteDistribution>, TabularMechanism) {
        let outcomes = OutcomeSpace::downward_closed(
            vec!["buy".into(), "pass".into()],
            vec![vec![Some("item".into())], vec![None]],
        )
        .unwrap();
        let agent = AgentTypeSpace::new(
            0,
            vec!["buyer".into()],
            vec![vec![1.0, 0.0]],
            &outcomes,
        )
        .unwrap();
        let dist = DiscreteDistribution::from_masses(&[1.0]).unwrap();
        let mech = TabularMechanism::new(
            vec![1],
            vec![vec![TableRow {
                prob: 1.0,
                outcome: 0,
                payments: vec![0.5],
            }]],
        )
        .unwrap();
        (vec![agent], vec![dist], mech)
    }

    #[test]
    fn posted_price_interim() {
        let (agents, dists, mech) = posted_price();
        let env = Env {
            agents: &agents,
            dists: &dists,
        };
        let mut rng = RngStream::new(1, 0);
        let u = interim_utility(&env, &mech, 0, 0, 0, EvalMode::Exact, &mut rng).unwrap();
        assert!((u.value - 0.5).abs() < 1e-15);
        let report = check_eps_bic_ir(&env, &mech, EvalMode::Exact, &mut rng).unwrap();
        assert!(report.max_regret.abs() < 1e-15);
        assert!((report.min_ir_slack - 0.5).abs() < 1e-15);
    }

    #[test]
    fn example1_interim_values() {
        let ex = scenarios::example1(0.1, 0.05);
        let env = ex.setting.env();
        let mut rng = RngStream::new(0, 0);
        // true H, report H: value 1 - payment 1 = 0
        let u = interim_utility(&env, &ex.mechanism, 0, 0, 0, EvalMode::Exact, &mut rng).unwrap();
        assert!((u.value - 0.0).abs() < 1e-15);
        let report = check_eps_bic_ir(&env, &ex.mechanism, EvalMode::Exact, &mut rng).unwrap();
        assert!((report.max_regret - 0.05).abs() < 1e-12);
        assert!(report.min_ir_slack.abs() < 1e-12);
    }

    #[test]
    fn mc_agrees_with_exact_within_4_stderr() {
        let ex = scenarios::example1(0.2, 0.1);
        let env = ex.setting.env();
        let mut rng = RngStream::new(33, 1);
        for t in 0..2 {
            for r in 0..2 {
                let exact =
                    interim_utility(&env, &ex.mechanism, 0, t, r, EvalMode::Exact, &mut rng)
                        .unwrap();
                let mc = interim_utility(
                    &env,
                    &ex.mechanism,
                    0,
                    t,
                    r,
                    EvalMode::MonteCarlo(200_000),
                    &mut rng,
                )
                .unwrap();
                let tol = 4.0 * mc.stderr + 1e-9;
                assert!(
                    (mc.value - exact.value).abs() <= tol,
                    "t={} r={} mc={} exact={}",
                    t,
                    r,
                    mc.value,
                    exact.value
                );
            }
        }
    }

    #[test]
    fn exact_mode_rejects_non_tabular() {
        struct Opaque;
        impl Mechanism for Opaque {
            fn num_agents(&self) -> usize {
                1
            }
            fn query_into(
                &self,
                _bids: &[TypeIdx],
                _rng: &mut RngStream,
                payments: &mut [f64],
            ) -> Result<OutcomeIdx> {
                payments[0] = 0.0;
                Ok(0)
            }
        }
        let (agents, dists, _) = posted_price();
        let env = Env {
            agents: &agents,
            dists: &dists,
        };
        let mut rng = RngStream::new(0, 0);
        let err = interim_utility(&env, &Opaque, 0, 0, 0, EvalMode::Exact, &mut rng);
        assert!(matches!(err, Err(Error::UnsupportedMode(_))));
    }
}
