//! Domain model: outcome spaces, agent type spaces with valuations, finite
//! type distributions, couplings, and the Wasserstein distance between type
//! distributions.
//!
//! Conventions: types and outcomes are referred to by dense indices into the
//! declared label lists. All valuations are normalized to `[0, 1]`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub type TypeIdx = usize;
pub type OutcomeIdx = usize;

pub const MASS_SUM_TOL: f64 = 1e-12;
pub const COUPLING_MARGINAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeMode {
    DownwardClosed,
    General,
}

/// The outcome set. In downward-closed mode every outcome is a vector of
/// per-agent components, the null component `⊥` is available to each agent,
/// and the set is closed under replacing any component by `⊥`.
#[derive(Debug, Clone)]
pub struct OutcomeSpace {
    pub mode: OutcomeMode,
    pub labels: Vec<String>,
    /// Per outcome, per agent component; `None` is the null component `⊥`.
    /// Present only in downward-closed mode.
    components: Option<Vec<Vec<Option<String>>>>,
    lookup: BTreeMap<Vec<Option<String>>, OutcomeIdx>,
}

impl OutcomeSpace {
    pub fn general(labels: Vec<String>) -> Result<Self> {
        check_unique(&labels, "outcome")?;
        Ok(OutcomeSpace {
            mode: OutcomeMode::General,
            labels,
            components: None,
            lookup: BTreeMap::new(),
        })
    }

    /// Downward-closed space from per-outcome component vectors. Checks at
    /// load that every `⊥`-substitution of every outcome is present.
    pub fn downward_closed(
        labels: Vec<String>,
        components: Vec<Vec<Option<String>>>,
    ) -> Result<Self> {
        check_unique(&labels, "outcome")?;
        if labels.len() != components.len() {
            return Err(Error::invalid("one component vector per outcome required"));
        }
        let n = components
            .first()
            .map(|c| c.len())
            .ok_or_else(|| Error::invalid("outcome set must be nonempty"))?;
        if components.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("component vectors must share the agent count"));
        }
        let mut lookup = BTreeMap::new();
        for (idx, comp) in components.iter().enumerate() {
            if lookup.insert(comp.clone(), idx).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate component vector for outcome {}",
                    labels[idx]
                )));
            }
        }
        // closure under ⊥-substitution, enumerated over all subsets
        for comp in &components {
            for mask in 0u32..(1 << n) {
                let mut sub = comp.clone();
                for (i, slot) in sub.iter_mut().enumerate() {
                    if mask & (1 << i) != 0 {
                        *slot = None;
                    }
                }
                if !lookup.contains_key(&sub) {
                    return Err(Error::invalid(format!(
                        "outcome space not downward-closed: missing ⊥-substitution {:?}",
                        sub
                    )));
                }
            }
        }
        Ok(OutcomeSpace {
            mode: OutcomeMode::DownwardClosed,
            labels,
            components: Some(components),
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn agents(&self) -> Option<usize> {
        self.components.as_ref().map(|c| c[0].len())
    }

    /// Component of `outcome` for `agent`; `None` is `⊥`. Downward-closed
    /// mode only.
    pub fn component(&self, outcome: OutcomeIdx, agent: usize) -> Option<&Option<String>> {
        self.components.as_ref().map(|c| &c[outcome][agent])
    }

    /// True when this agent's component of the outcome is the null `⊥`.
    pub fn is_null_for(&self, outcome: OutcomeIdx, agent: usize) -> bool {
        matches!(self.component(outcome, agent), Some(None))
    }

    /// Outcome obtained from `outcome` by substituting `⊥` for every agent
    /// in `null_agents`. Requires downward-closed mode.
    pub fn null_substitute(&self, outcome: OutcomeIdx, null_agents: &[bool]) -> Result<OutcomeIdx> {
        let comps = self.components.as_ref().ok_or_else(|| {
            Error::Configuration("⊥-substitution requires a downward-closed outcome space".into())
        })?;
        let mut sub = comps[outcome].clone();
        for (i, &kill) in null_agents.iter().enumerate() {
            if kill {
                sub[i] = None;
            }
        }
        self.lookup
            .get(&sub)
            .copied()
            .ok_or_else(|| Error::InternalInvariant("closure check admitted a gap".into()))
    }

    pub fn index_of(&self, label: &str) -> Option<OutcomeIdx> {
        self.labels.iter().position(|l| l == label)
    }
}

fn check_unique(labels: &[String], what: &str) -> Result<()> {
    let mut seen = BTreeMap::new();
    for l in labels {
        if seen.insert(l, ()).is_some() {
            return Err(Error::invalid(format!("duplicate {} label: {}", what, l)));
        }
    }
    Ok(())
}

/// One agent's type space and valuation table, `v[type][outcome] ∈ [0, 1]`.
#[derive(Debug, Clone)]
pub struct AgentTypeSpace {
    pub agent: usize,
    pub type_labels: Vec<String>,
    pub valuation: Vec<Vec<f64>>,
}

impl AgentTypeSpace {
    pub fn new(
        agent: usize,
        type_labels: Vec<String>,
        valuation: Vec<Vec<f64>>,
        outcomes: &OutcomeSpace,
    ) -> Result<Self> {
        check_unique(&type_labels, "type")?;
        if valuation.len() != type_labels.len() {
            return Err(Error::invalid("one valuation row per type required"));
        }
        for (t, row) in valuation.iter().enumerate() {
            if row.len() != outcomes.len() {
                return Err(Error::invalid("valuation row length must match outcome count"));
            }
            for (o, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!(
                        "valuation out of [0,1] for agent {} type {} outcome {}: {}",
                        agent, type_labels[t], o, v
                    )));
                }
                if outcomes.is_null_for(o, agent) && v != 0.0 {
                    return Err(Error::invalid(format!(
                        "agent {} must value ⊥-component outcomes at 0 (type {}, outcome {})",
                        agent, type_labels[t], o
                    )));
                }
            }
        }
        Ok(AgentTypeSpace {
            agent,
            type_labels,
            valuation,
        })
    }

    pub fn num_types(&self) -> usize {
        self.type_labels.len()
    }

    #[inline]
    pub fn value(&self, t: TypeIdx, o: OutcomeIdx) -> f64 {
        self.valuation[t][o]
    }

    pub fn type_index(&self, label: &str) -> Option<TypeIdx> {
        self.type_labels.iter().position(|l| l == label)
    }

    /// `dist(t, t') = max_o |v(t, o) - v(t', o)|`, the ground metric of the
    /// Wasserstein distance.
    pub fn type_distance(&self, t: TypeIdx, u: TypeIdx) -> f64 {
        self.valuation[t]
            .iter()
            .zip(&self.valuation[u])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A finite distribution over one agent's types. Strictly positive on its
/// support; masses sum to 1 within `MASS_SUM_TOL`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    support: Vec<TypeIdx>,
    masses: Vec<f64>,
    cdf: Vec<f64>,
}

impl DiscreteDistribution {
    /// Build from masses over the full type universe; zero entries are
    /// dropped from the support.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        let mut support = Vec::new();
        let mut pos = Vec::new();
        let mut sum = 0.0;
        for (t, &m) in masses.iter().enumerate() {
            if m < 0.0 {
                return Err(Error::invalid(format!("negative mass {} at type {}", m, t)));
            }
            if m > 0.0 {
                support.push(t);
                pos.push(m);
                sum += m;
            }
        }
        if support.is_empty() {
            return Err(Error::invalid("distribution support is empty"));
        }
        if (sum - 1.0).abs() > MASS_SUM_TOL {
            return Err(Error::invalid(format!(
                "masses sum to {} (must be 1 within {:e})",
                sum, MASS_SUM_TOL
            )));
        }
        let mut cdf = Vec::with_capacity(pos.len());
        let mut acc = 0.0;
        for &m in &pos {
            acc += m;
            cdf.push(acc);
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(DiscreteDistribution {
            support,
            masses: pos,
            cdf,
        })
    }

    pub fn point_mass(t: TypeIdx) -> Self {
        DiscreteDistribution {
            support: vec![t],
            masses: vec![1.0],
            cdf: vec![1.0],
        }
    }

    pub fn support(&self) -> &[TypeIdx] {
        &self.support
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass_of(&self, t: TypeIdx) -> f64 {
        match self.support.binary_search(&t) {
            Ok(i) => self.masses[i],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (TypeIdx, f64)> + '_ {
        self.support.iter().copied().zip(self.masses.iter().copied())
    }

    #[inline]
    pub fn sample(&self, rng: &mut RngStream) -> TypeIdx {
        let u = rng.f64();
        let i = self.cdf.partition_point(|&c| c <= u);
        self.support[i.min(self.support.len() - 1)]
    }

    /// Total-variation distance to another distribution on the same universe.
    pub fn tv_distance(&self, other: &DiscreteDistribution) -> f64 {
        let hi = self
            .support
            .iter()
            .chain(other.support.iter())
            .copied()
            .max()
            .unwrap_or(0);
        let mut tv = 0.0;
        for t in 0..=hi {
            tv += (self.mass_of(t) - other.mass_of(t)).abs();
        }
        tv / 2.0
    }
}

/// Point-mass frequencies of an observed sample; order-insensitive.
pub fn empirical_distribution(samples: &[TypeIdx]) -> Result<DiscreteDistribution> {
    if samples.is_empty() {
        return Err(Error::invalid("empirical distribution needs at least one sample"));
    }
    let hi = *samples.iter().max().unwrap();
    let mut counts = vec![0u64; hi + 1];
    for &s in samples {
        counts[s] += 1;
    }
    let n = samples.len() as f64;
    let masses: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    DiscreteDistribution::from_masses(&masses)
}

/// A coupling of `D'` (rows) and `D` (columns): a joint distribution whose
/// marginals are the two distributions, stored as the conditional law of the
/// column type given each row type.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub row_support: Vec<TypeIdx>,
    pub col_support: Vec<TypeIdx>,
    pub row_masses: Vec<f64>,
    /// `conditional[r][c]` = P(col = col_support[c] | row = row_support[r]).
    pub conditional: Vec<Vec<f64>>,
    /// Whether the valuation is non-increasing along the coupling:
    /// `v(row_type, o) >= v(col_type, o)` for every positive-mass pair.
    pub monotone: bool,
}

impl Coupling {
    pub fn new(
        d_prime: &DiscreteDistribution,
        d: &DiscreteDistribution,
        conditional: Vec<Vec<f64>>,
        agent: &AgentTypeSpace,
    ) -> Result<Self> {
        let rows = d_prime.support_size();
        let cols = d.support_size();
        if conditional.len() != rows || conditional.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("conditional matrix shape mismatch"));
        }
        for row in &conditional {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > COUPLING_MARGINAL_TOL || row.iter().any(|&p| p < -1e-15) {
                return Err(Error::invalid("conditional rows must be distributions"));
            }
        }
        // marginal over columns must reproduce D (checked by enumeration)
        for (c, &masses_c) in d.masses().iter().enumerate() {
            let mut expect = masses_c;
            for (r, &rm) in d_prime.masses().iter().enumerate() {
                expect -= rm * conditional[r][c];
            }
            if expect.abs() > COUPLING_MARGINAL_TOL {
                return Err(Error::invalid(format!(
                    "coupling column marginal off by {:e} at column {}",
                    expect, c
                )));
            }
        }
        let mut monotone = true;
        'outer: for (r, &rt) in d_prime.support().iter().enumerate() {
            for (c, &ct) in d.support().iter().enumerate() {
                if conditional[r][c] > 0.0 {
                    for o in 0..agent.valuation[rt].len() {
                        if agent.value(rt, o) < agent.value(ct, o) - 1e-15 {
                            monotone = false;
                            break 'outer;
                        }
                    }
                }
            }
        }
        Ok(Coupling {
            row_support: d_prime.support().to_vec(),
            col_support: d.support().to_vec(),
            row_masses: d_prime.masses().to_vec(),
            conditional,
            monotone,
        })
    }

    /// Expected ground distance under the coupling.
    pub fn expected_distance(&self, agent: &AgentTypeSpace) -> f64 {
        let mut total = 0.0;
        for (r, &rt) in self.row_support.iter().enumerate() {
            for (c, &ct) in self.col_support.iter().enumerate() {
                let p = self.row_masses[r] * self.conditional[r][c];
                if p > 0.0 {
                    total += p * agent.type_distance(rt, ct);
                }
            }
        }
        total
    }
}

/// Exact ℓ∞-Wasserstein distance between two type distributions of the same
/// agent, with ground metric `dist(t, t') = max_o |v(t,o) - v(t',o)|`,
/// computed as a min-cost transportation problem on the finite supports.
/// Returns the distance and an optimal coupling of `(d_prime, d)`.
pub fn wasserstein_distance(
    d: &DiscreteDistribution,
    d_prime: &DiscreteDistribution,
    agent: &AgentTypeSpace,
) -> Result<(f64, Coupling)> {
    let rows = d_prime.support();
    let cols = d.support();
    for &t in rows.iter().chain(cols) {
        if t >= agent.num_types() {
            return Err(Error::invalid(format!(
                "type {} outside agent {}'s space",
                t, agent.agent
            )));
        }
    }
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| agent.type_distance(r, c)).collect())
        .collect();
    let plan = transport(d_prime.masses(), d.masses(), &cost)?;
    let mut total = 0.0;
    let mut conditional = vec![vec![0.0; cols.len()]; rows.len()];
    for (r, row) in plan.iter().enumerate() {
        for (c, &f) in row.iter().enumerate() {
            total += f * cost[r][c];
            conditional[r][c] = f / d_prime.masses()[r];
        }
    }
    let coupling = Coupling::new(d_prime, d, conditional, agent)?;
    Ok((total, coupling))
}

/// Solve the balanced transportation problem exactly by successive shortest
/// paths with node potentials. Supplies and demands are real-valued; every
/// augmentation exhausts at least one residual supply or demand, so at most
/// `rows + cols` augmentations occur.
fn transport(supply: &[f64], demand: &[f64], cost: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let r = supply.len();
    let c = demand.len();
    let mut flow = vec![vec![0.0f64; c]; r];
    let mut res_sup = supply.to_vec();
    let mut res_dem = demand.to_vec();
    // potentials keep reduced costs nonnegative (costs start nonnegative)
    let mut pot_r = vec![0.0f64; r];
    let mut pot_c = vec![0.0f64; c];

    loop {
        let Some(src) = (0..r).find(|&i| res_sup[i] > 1e-15) else {
            break;
        };
        // Dijkstra from src over the bipartite residual graph.
        let n = r + c;
        let mut dist = vec![f64::INFINITY; n];
        let mut prev: Vec<Option<usize>> = vec![None; n];
        let mut done = vec![false; n];
        dist[src] = 0.0;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..n {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < r {
                for j in 0..c {
                    let rc = (cost[u][j] - pot_r[u] - pot_c[j]).max(0.0);
                    if dist[u] + rc < dist[r + j] - 1e-15 {
                        dist[r + j] = dist[u] + rc;
                        prev[r + j] = Some(u);
                    }
                }
            } else {
                let j = u - r;
                for i in 0..r {
                    if flow[i][j] > 1e-15 {
                        let rc = (-(cost[i][j] - pot_r[i] - pot_c[j])).max(0.0);
                        if dist[u] + rc < dist[i] - 1e-15 {
                            dist[i] = dist[u] + rc;
                            prev[i] = Some(u);
                        }
                    }
                }
            }
        }
        // nearest column with residual demand
        let mut sink = None;
        let mut best = f64::INFINITY;
        for j in 0..c {
            if res_dem[j] > 1e-15 && dist[r + j] < best {
                best = dist[r + j];
                sink = Some(j);
            }
        }
        let Some(sink) = sink else {
            return Err(Error::InternalInvariant(
                "transportation problem out of demand before supply".into(),
            ));
        };
        // bottleneck along the path
        let mut amount = res_sup[src].min(res_dem[sink]);
        let mut v = r + sink;
        while let Some(u) = prev[v] {
            if v >= r {
                // forward arc u -> v
            } else {
                // backward arc: limited by existing flow v <- u
                amount = amount.min(flow[v][u - r]);
            }
            v = u;
        }
        // apply
        let mut v = r + sink;
        while let Some(u) = prev[v] {
            if v >= r {
                flow[u][v - r] += amount;
            } else {
                flow[v][u - r] -= amount;
            }
            v = u;
        }
        res_sup[src] -= amount;
        res_dem[sink] -= amount;
        // potential update
        for i in 0..r {
            if dist[i].is_finite() {
                pot_r[i] -= dist[i];
            }
        }
        for j in 0..c {
            if dist[r + j].is_finite() {
                pot_c[j] += dist[r + j];
            }
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_space() -> (OutcomeSpace, AgentTypeSpace) {
        let outcomes = OutcomeSpace::general(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let agent = AgentTypeSpace::new(
            0,
            vec!["t0".into(), "t1".into(), "t2".into()],
            vec![
                vec![0.0, 0.5, 1.0],
                vec![0.3, 0.5, 0.8],
                vec![1.0, 0.0, 0.2],
            ],
            &outcomes,
        )
        .unwrap();
        (outcomes, agent)
    }

    #[test]
    fn downward_closure_enforced() {
        // Missing the ⊥-substitution of "o" for agent 0.
        let bad = OutcomeSpace::downward_closed(
            vec!["o".into()],
            vec![vec![Some("x".into())]],
        );
        assert!(bad.is_err());
        let good = OutcomeSpace::downward_closed(
            vec!["o".into(), "null".into()],
            vec![vec![Some("x".into())], vec![None]],
        )
        .unwrap();
        assert_eq!(good.null_substitute(0, &[true]).unwrap(), 1);
    }

    #[test]
    fn distribution_validation() {
        assert!(DiscreteDistribution::from_masses(&[0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::from_masses(&[0.0, 0.0]).is_err());
        let d = DiscreteDistribution::from_masses(&[0.25, 0.0, 0.75]).unwrap();
        assert_eq!(d.support(), &[0, 2]);
        assert!((d.mass_of(2) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empirical_counts() {
        // [a,a,b,b] -> {a: 0.5, b: 0.5}
        let d = empirical_distribution(&[0, 0, 1, 1]).unwrap();
        assert!((d.mass_of(0) - 0.5).abs() < 1e-15);
        assert!((d.mass_of(1) - 0.5).abs() < 1e-15);
        // [a] -> {a: 1}
        let p = empirical_distribution(&[3]).unwrap();
        assert!((p.mass_of(3) - 1.0).abs() < 1e-15);
        assert!(empirical_distribution(&[]).is_err());
    }

    #[test]
    fn empirical_concentrates() {
        let d = DiscreteDistribution::from_masses(&[0.2, 0.5, 0.3]).unwrap();
        let mut rng = RngStream::new(2024, 0);
        let samples: Vec<_> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
        let emp = empirical_distribution(&samples).unwrap();
        assert!(emp.tv_distance(&d) <= 0.02);
    }

    #[test]
    fn wasserstein_identity_is_zero() {
        let (_, agent) = simple_space();
        let d = DiscreteDistribution::from_masses(&[0.2, 0.5, 0.3]).unwrap();
        let (w, _) = wasserstein_distance(&d, &d, &agent).unwrap();
        assert!(w.abs() < 1e-12);
    }

    #[test]
    fn wasserstein_point_masses() {
        let (_, agent) = simple_space();
        let a = DiscreteDistribution::point_mass(0);
        let b = DiscreteDistribution::point_mass(1);
        let expected = agent.type_distance(0, 1); // 0.3
        let (w, coupling) = wasserstein_distance(&a, &b, &agent).unwrap();
        assert!((w - expected).abs() < 1e-12);
        assert!((expected - 0.3).abs() < 1e-12);
        assert!((coupling.expected_distance(&agent) - w).abs() < 1e-12);
    }

    /// Brute-force oracle: minimize over a fine grid of couplings for 2x2
    /// supports via the single free parameter of the transportation polytope.
    #[test]
    fn wasserstein_matches_vertex_enumeration() {
        let (_, agent) = simple_space();
        let d1 = DiscreteDistribution::from_masses(&[0.6, 0.4, 0.0]).unwrap();
        let d2 = DiscreteDistribution::from_masses(&[0.0, 0.3, 0.7]).unwrap();
        // supports {0,1} and {1,2}: flow f = P(0->1) determines the rest;
        // vertices of the polytope are at the clamped extremes.
        let c = |a: usize, b: usize| agent.type_distance(a, b);
        let lo: f64 = 0.6f64.min(0.3).min((0.6f64 + 0.3 - 1.0).max(0.0));
        let mut best = f64::INFINITY;
        for &f in &[(0.6f64 + 0.3 - 1.0).max(0.0), 0.6f64.min(0.3), lo] {
            let cost =
                f * c(0, 1) + (0.6 - f) * c(0, 2) + (0.3 - f) * c(1, 1) + (0.4 - (0.3 - f)) * c(1, 2);
            best = best.min(cost);
        }
        let (w, _) = wasserstein_distance(&d2, &d1, &agent).unwrap();
        assert!((w - best).abs() < 1e-9, "w={} oracle={}", w, best);
    }

    #[test]
    fn wasserstein_symmetry_and_triangle() {
        let (_, agent) = simple_space();
        let mut rng = RngStream::new(7, 3);
        for _ in 0..25 {
            let mut raw = [0.0f64; 3];
            for m in raw.iter_mut() {
                *m = rng.f64() + 0.05;
            }
            let s: f64 = raw.iter().sum();
            let a = DiscreteDistribution::from_masses(&raw.map(|x| x / s)).unwrap();
            let mut raw2 = [0.0f64; 3];
            for m in raw2.iter_mut() {
                *m = rng.f64() + 0.05;
            }
            let s2: f64 = raw2.iter().sum();
            let b = DiscreteDistribution::from_masses(&raw2.map(|x| x / s2)).unwrap();
            let mut raw3 = [0.0f64; 3];
            for m in raw3.iter_mut() {
                *m = rng.f64() + 0.05;
            }
            let s3: f64 = raw3.iter().sum();
            let c = DiscreteDistribution::from_masses(&raw3.map(|x| x / s3)).unwrap();

            let (ab, _) = wasserstein_distance(&a, &b, &agent).unwrap();
            let (ba, _) = wasserstein_distance(&b, &a, &agent).unwrap();
            let (bc, _) = wasserstein_distance(&b, &c, &agent).unwrap();
            let (ac, _) = wasserstein_distance(&a, &c, &agent).unwrap();
            assert!((ab - ba).abs() < 1e-9);
            assert!(ac <= ab + bc + 1e-9);
        }
    }

    /// With values in [0, 1] the ground metric is at most 1, so the
    /// Wasserstein distance is dominated by the total-variation distance.
    #[test]
    fn wasserstein_below_total_variation() {
        let (_, agent) = simple_space();
        let mut rng = RngStream::new(19, 0);
        for _ in 0..25 {
            let mut raw = [0.0f64; 3];
            for m in raw.iter_mut() {
                *m = rng.f64() + 0.05;
            }
            let s: f64 = raw.iter().sum();
            let a = DiscreteDistribution::from_masses(&raw.map(|x| x / s)).unwrap();
            let mut raw2 = [0.0f64; 3];
            for m in raw2.iter_mut() {
                *m = rng.f64() + 0.05;
            }
            let s2: f64 = raw2.iter().sum();
            let b = DiscreteDistribution::from_masses(&raw2.map(|x| x / s2)).unwrap();
            let (w, _) = wasserstein_distance(&a, &b, &agent).unwrap();
            assert!(w <= a.tv_distance(&b) + 1e-9);
        }
    }

    #[test]
    fn coupling_marginals_checked() {
        let (_, agent) = simple_space();
        let d1 = DiscreteDistribution::from_masses(&[0.5, 0.5, 0.0]).unwrap();
        let d2 = DiscreteDistribution::from_masses(&[0.5, 0.5, 0.0]).unwrap();
        // identity coupling ok
        let ok = Coupling::new(&d1, &d2, vec![vec![1.0, 0.0], vec![0.0, 1.0]], &agent);
        assert!(ok.is_ok());
        // swaps everything onto one column: wrong marginal
        let bad = Coupling::new(&d1, &d2, vec![vec![1.0, 0.0], vec![1.0, 0.0]], &agent);
        assert!(bad.is_err());
    }
}
