//! Online entropy-regularized d-to-1 matching.
//!
//! `run_alg1` handles nonnegative edge weights: LHS nodes arrive one at a
//! time and are matched to an available RHS node from the Gibbs distribution
//! with energies `ω_jk - γ α_k` at temperature `δ`, where the duals `α` are
//! the Gibbs distribution over remaining loads at temperature `1/η'`.
//!
//! `run_alg2` removes the nonnegativity assumption by pairing every RHS node
//! with a 0-node of weight zero; a round then draws over `2|K|` candidates
//! (energy `-γ α_k` for the 0-copy). Coupled to `run_alg1` on the
//! δ-softplus weights `ζ_δ(ω)`, the meta-node probabilities agree round for
//! round: `ẑ_jk = x̂_jk + ŷ_jk`.
//!
//! The offline program `(P')` over `ζ_δ(ω)` is solved by Sinkhorn-style dual
//! updates; its optimum equals the optimum of the augmented program `(P'')`,
//! and splitting `z` by `x/y = exp(ω/δ)` recovers the `(P'')` solution.

use crate::bernoulli::{gibbs_probabilities, gibbs_sample, Coin, GibbsBackend, GibbsRequest};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// δ-softplus: `ζ_δ(w) = δ log(exp(w/δ) + 1)`, strictly positive, computed
/// in the stable branch for large `|w|/δ`.
pub fn softplus(w: f64, delta: f64) -> f64 {
    assert!(delta > 0.0, "softplus needs delta > 0");
    let t = w / delta;
    if t > 0.0 {
        w + delta * (-t).exp().ln_1p()
    } else {
        delta * t.exp().ln_1p()
    }
}

/// Per-edge source of bounded samples whose means are the edge weights.
pub trait WeightOracle {
    fn lhs(&self) -> usize;
    fn rhs(&self) -> usize;
    /// One bounded sample with mean `ω_jk ∈ [-1, 1]`.
    fn sample(&self, j: usize, k: usize, rng: &mut RngStream) -> f64;
    /// The exact mean, when computable.
    fn exact_mean(&self, _j: usize, _k: usize) -> Option<f64> {
        None
    }

    fn all_exact(&self) -> bool {
        (0..self.lhs()).all(|j| (0..self.rhs()).all(|k| self.exact_mean(j, k).is_some()))
    }
}

/// Oracle backed by an explicit weight matrix (zero-variance samples).
#[derive(Debug, Clone)]
pub struct ExactWeights(pub Vec<Vec<f64>>);

impl WeightOracle for ExactWeights {
    fn lhs(&self) -> usize {
        self.0.len()
    }
    fn rhs(&self) -> usize {
        self.0.first().map_or(0, |r| r.len())
    }
    fn sample(&self, j: usize, k: usize, _rng: &mut RngStream) -> f64 {
        self.0[j][k]
    }
    fn exact_mean(&self, j: usize, k: usize) -> Option<f64> {
        Some(self.0[j][k])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MatchParams {
    pub delta: f64,
    pub eta_prime: f64,
    pub gamma: f64,
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::invalid("delta must be > 0"));
        }
        if !(self.eta_prime > 0.0) {
            return Err(Error::invalid("eta' must be > 0"));
        }
        if self.gamma < 0.0 {
            return Err(Error::invalid("gamma must be >= 0"));
        }
        Ok(())
    }
}

pub struct MatchInstance<'a> {
    pub ell: usize,
    pub d: usize,
    pub oracle: &'a dyn WeightOracle,
    pub params: MatchParams,
}

impl<'a> MatchInstance<'a> {
    fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.ell == 0 || self.d == 0 {
            return Err(Error::invalid("ell and d must be positive"));
        }
        if self.oracle.lhs() != self.d * self.ell || self.oracle.rhs() != self.ell {
            return Err(Error::invalid(format!(
                "oracle grid is {}x{}, expected {}x{}",
                self.oracle.lhs(),
                self.oracle.rhs(),
                self.d * self.ell,
                self.ell
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Normal,
    Zero,
}

/// Per-round record; probability vectors are present when the oracle
/// exposes exact means (they are the realized Gibbs distributions).
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub lhs: usize,
    pub available: Vec<usize>,
    /// Dual vector embedded over all `ell` RHS nodes, zero off `K`.
    pub alpha: Vec<f64>,
    pub x_probs: Option<Vec<f64>>,
    pub y_probs: Option<Vec<f64>>,
    pub chosen: usize,
    pub kind: NodeKind,
    pub source_flips: u64,
}

#[derive(Debug, Clone)]
pub struct MatchTranscript {
    pub ell: usize,
    pub d: usize,
    /// Per LHS node: the meta-RHS index it was matched to, and whether the
    /// normal node or the 0-node took it.
    pub assignments: Vec<(usize, NodeKind)>,
    /// Full round records (empty in slim mode).
    pub rounds: Vec<RoundRecord>,
    pub total_source_flips: u64,
}

impl MatchTranscript {
    pub fn loads(&self) -> Vec<usize> {
        let mut loads = vec![0usize; self.ell];
        for &(k, _) in &self.assignments {
            loads[k] += 1;
        }
        loads
    }

    /// Total weight of the matching, counting only normal-node edges.
    pub fn matched_weight(&self, weights: &[Vec<f64>]) -> f64 {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, (_, kind))| *kind == NodeKind::Normal)
            .map(|(j, (k, _))| weights[j][*k])
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordMode {
    /// Keep only the assignment sequence.
    Slim,
    /// Keep every round's duals and probability vectors.
    Full,
}

/// The dual state of a single round, as needed to re-draw that round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub available: Vec<usize>,
    pub alpha: Vec<f64>,
}

/// Duals for the current round: the Gibbs distribution over available RHS
/// nodes with energy `d_k` (current load) at temperature `1/η'`; zero for
/// unavailable nodes.
pub fn gibbs_alpha(loads: &[usize], available: &[usize], eta_prime: f64) -> Vec<f64> {
    let energies: Vec<f64> = available.iter().map(|&k| eta_prime * loads[k] as f64).collect();
    let probs = crate::numeric::softmax(&energies);
    let mut alpha = vec![0.0; loads.len()];
    for (i, &k) in available.iter().enumerate() {
        alpha[k] = probs[i];
    }
    alpha
}

enum CandidateCoin<'a> {
    Edge {
        oracle: &'a dyn WeightOracle,
        j: usize,
        k: usize,
        scale: f64,
    },
    Zero,
}

impl<'a> Coin for CandidateCoin<'a> {
    fn flip(&self, rng: &mut RngStream) -> f64 {
        match self {
            CandidateCoin::Edge { oracle, j, k, scale } => oracle.sample(*j, *k, rng) * scale,
            CandidateCoin::Zero => 0.0,
        }
    }
    fn exact_mean(&self) -> Option<f64> {
        match self {
            CandidateCoin::Edge { oracle, j, k, scale } => {
                oracle.exact_mean(*j, *k).map(|m| m * scale)
            }
            CandidateCoin::Zero => Some(0.0),
        }
    }
}

/// Draw the match for LHS node `j` given the round state, over normal nodes
/// only (`with_zero_nodes = false`, Algorithm 1 rounds) or over normal and
/// 0-nodes (`true`, Algorithm 2 rounds). `scale` multiplies row `j`'s
/// weights; the payment computation reruns a round with `scale = λ`.
#[allow(clippy::too_many_arguments)]
pub fn draw_round(
    oracle: &dyn WeightOracle,
    j: usize,
    state: &RoundState,
    params: &MatchParams,
    with_zero_nodes: bool,
    scale: f64,
    backend: GibbsBackend,
    rng: &mut RngStream,
) -> Result<(usize, NodeKind, u64, Option<(Vec<f64>, Vec<f64>)>)> {
    let ell = state.alpha.len();
    let kn = state.available.len();
    let total = if with_zero_nodes { 2 * kn } else { kn };
    let mut coins: Vec<CandidateCoin> = Vec::with_capacity(total);
    let mut offsets: Vec<f64> = Vec::with_capacity(total);
    for &k in &state.available {
        coins.push(CandidateCoin::Edge {
            oracle,
            j,
            k,
            scale,
        });
        offsets.push(params.gamma * state.alpha[k]);
    }
    if with_zero_nodes {
        for &k in &state.available {
            coins.push(CandidateCoin::Zero);
            offsets.push(params.gamma * state.alpha[k]);
        }
    }
    let coin_refs: Vec<&dyn Coin> = coins.iter().map(|c| c as &dyn Coin).collect();
    let req = GibbsRequest {
        coins: &coin_refs,
        offsets: &offsets,
        delta: params.delta,
        h: params.gamma,
    };
    let draw = gibbs_sample(&req, backend, rng)?;
    let (slot, kind) = if draw.index < kn {
        (state.available[draw.index], NodeKind::Normal)
    } else {
        (state.available[draw.index - kn], NodeKind::Zero)
    };
    // realized probabilities, available only with exact means
    let probs = if coins.iter().all(|c| c.exact_mean().is_some()) {
        let means: Vec<f64> = coins.iter().map(|c| c.exact_mean().unwrap()).collect();
        let p = gibbs_probabilities(&means, &offsets, params.delta);
        let mut x = vec![0.0; ell];
        let mut y = vec![0.0; ell];
        for (i, &k) in state.available.iter().enumerate() {
            x[k] = p[i];
            if with_zero_nodes {
                y[k] = p[kn + i];
            }
        }
        Some((x, y))
    } else {
        None
    };
    Ok((slot, kind, draw.source_flips, probs))
}

fn run_online(
    inst: &MatchInstance,
    with_zero_nodes: bool,
    backend: GibbsBackend,
    mode: RecordMode,
    focus: Option<usize>,
    rng: &mut RngStream,
) -> Result<(MatchTranscript, Option<RoundState>)> {
    inst.validate()?;
    if !with_zero_nodes {
        // Algorithm 1 requires nonnegative weights; verifiable when means
        // are exposed.
        for j in 0..inst.oracle.lhs() {
            for k in 0..inst.oracle.rhs() {
                if let Some(m) = inst.oracle.exact_mean(j, k) {
                    if m < -1e-12 {
                        return Err(Error::invalid(format!(
                            "nonnegative-weight algorithm got weight {} at ({}, {})",
                            m, j, k
                        )));
                    }
                }
            }
        }
    }
    let ell = inst.ell;
    let n_rounds = inst.d * ell;
    let mut loads = vec![0usize; ell];
    let mut assignments = Vec::with_capacity(n_rounds);
    let mut rounds = Vec::new();
    let mut focus_state = None;
    let mut total_flips = 0u64;
    for j in 0..n_rounds {
        let available: Vec<usize> = (0..ell).filter(|&k| loads[k] < inst.d).collect();
        if available.is_empty() {
            return Err(Error::InternalInvariant(
                "capacity exhausted before all LHS nodes were matched".into(),
            ));
        }
        let alpha = gibbs_alpha(&loads, &available, inst.params.eta_prime);
        let state = RoundState {
            available,
            alpha,
        };
        if focus == Some(j) {
            focus_state = Some(state.clone());
        }
        let (slot, kind, flips, probs) = draw_round(
            inst.oracle,
            j,
            &state,
            &inst.params,
            with_zero_nodes,
            1.0,
            backend,
            rng,
        )?;
        total_flips += flips;
        loads[slot] += 1;
        assignments.push((slot, kind));
        if mode == RecordMode::Full {
            let (x_probs, y_probs) = match probs {
                Some((x, y)) => (Some(x), if with_zero_nodes { Some(y) } else { None }),
                None => (None, None),
            };
            rounds.push(RoundRecord {
                lhs: j,
                available: state.available,
                alpha: state.alpha,
                x_probs,
                y_probs,
                chosen: slot,
                kind,
                source_flips: flips,
            });
        }
    }
    Ok((
        MatchTranscript {
            ell,
            d: inst.d,
            assignments,
            rounds,
            total_source_flips: total_flips,
        },
        focus_state,
    ))
}

/// Online entropy-regularized matching with nonnegative weights. Always
/// returns a perfect d-to-1 matching.
pub fn run_alg1(
    inst: &MatchInstance,
    backend: GibbsBackend,
    mode: RecordMode,
    rng: &mut RngStream,
) -> Result<MatchTranscript> {
    run_online(inst, false, backend, mode, None, rng).map(|(t, _)| t)
}

/// Online entropy-regularized matching with arbitrary weights via 0-nodes.
/// Dropping 0-node edges leaves a feasible (not necessarily perfect)
/// d-to-1 matching.
pub fn run_alg2(
    inst: &MatchInstance,
    backend: GibbsBackend,
    mode: RecordMode,
    rng: &mut RngStream,
) -> Result<MatchTranscript> {
    run_online(inst, true, backend, mode, None, rng).map(|(t, _)| t)
}

/// `run_alg2` that additionally captures the dual state of round `focus`,
/// which the implicit payment computation reruns with scaled weights.
pub fn run_alg2_focused(
    inst: &MatchInstance,
    backend: GibbsBackend,
    mode: RecordMode,
    focus: usize,
    rng: &mut RngStream,
) -> Result<(MatchTranscript, RoundState)> {
    let (t, state) = run_online(inst, true, backend, mode, Some(focus), rng)?;
    let state = state.ok_or_else(|| Error::invalid("focus round out of range"))?;
    Ok((t, state))
}

/// Solution of the offline regularized program.
#[derive(Debug, Clone)]
pub struct OfflineSolution {
    /// Optimal objective value (equal for the softplus program and its
    /// augmented two-variable form).
    pub opt: f64,
    pub z: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub duals: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

const SINKHORN_MAX_ITER: usize = 200_000;
// converge well past the documented 1e-6 so objective values are
// comparable across independent solve routes at that tolerance
const SINKHORN_TOL: f64 = 1e-10;

/// Solve the entropy-regularized matching over weights `ζ_δ(ω)` by
/// alternating dual updates with capacity clipping, then split
/// `z = x + y` with `x/y = exp(ω/δ)`. The returned `opt` is the shared
/// optimum of the softplus program and the augmented program.
pub fn solve_regularized_offline(
    weights: &[Vec<f64>],
    ell: usize,
    d: usize,
    delta: f64,
) -> Result<OfflineSolution> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be > 0"));
    }
    let rows = d * ell;
    if weights.len() != rows || weights.iter().any(|r| r.len() != ell) {
        return Err(Error::invalid("weight matrix must be (d*ell) x ell"));
    }
    let zeta: Vec<Vec<f64>> = weights
        .iter()
        .map(|r| r.iter().map(|&w| softplus(w, delta)).collect())
        .collect();
    let mut beta = vec![0.0f64; ell];
    let mut z = vec![vec![0.0f64; ell]; rows];
    let cap = d as f64;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..SINKHORN_MAX_ITER {
        iterations = it + 1;
        // row step: z_j = softmax((ζ_jk - β_k)/δ)
        for (j, row) in z.iter_mut().enumerate() {
            let energies: Vec<f64> =
                (0..ell).map(|k| (zeta[j][k] - beta[k]) / delta).collect();
            let probs = crate::numeric::softmax(&energies);
            row.copy_from_slice(&probs);
        }
        // column step: multiplicative dual update, clipped at zero
        let mut worst = 0.0f64;
        for k in 0..ell {
            let colsum: f64 = z.iter().map(|r| r[k]).sum();
            let violation = (colsum - cap).max(0.0);
            let slack_err = if beta[k] > 0.0 {
                (colsum - cap).abs()
            } else {
                0.0
            };
            worst = worst.max(violation).max(slack_err);
            beta[k] = (beta[k] + delta * (colsum / cap).ln()).max(0.0);
        }
        residual = worst;
        if worst <= SINKHORN_TOL {
            break;
        }
    }
    if residual > SINKHORN_TOL {
        return Err(Error::ConvergenceFailure {
            context: "offline regularized matching".into(),
            iterations,
            residual,
        });
    }
    let mut opt = 0.0;
    for (j, row) in z.iter().enumerate() {
        for (k, &zjk) in row.iter().enumerate() {
            if zjk > 0.0 {
                opt += zjk * zeta[j][k] - delta * zjk * zjk.ln();
            }
        }
    }
    // split z into (x, y) with x/y = exp(ω/δ)
    let mut x = vec![vec![0.0f64; ell]; rows];
    let mut y = vec![vec![0.0f64; ell]; rows];
    for j in 0..rows {
        for k in 0..ell {
            let t = weights[j][k] / delta;
            let sig = if t >= 0.0 {
                1.0 / (1.0 + (-t).exp())
            } else {
                let e = t.exp();
                e / (1.0 + e)
            };
            x[j][k] = z[j][k] * sig;
            y[j][k] = z[j][k] - x[j][k];
        }
    }
    Ok(OfflineSolution {
        opt,
        z,
        x,
        y,
        duals: beta,
        iterations,
        residual,
    })
}

/// Objective of the augmented program at `(x, y)`:
/// `Σ x ω - δ Σ (x log x + y log y)`.
pub fn augmented_objective(x: &[Vec<f64>], y: &[Vec<f64>], weights: &[Vec<f64>], delta: f64) -> f64 {
    let mut total = 0.0;
    for j in 0..x.len() {
        for k in 0..x[j].len() {
            if x[j][k] > 0.0 {
                total += x[j][k] * weights[j][k] - delta * x[j][k] * x[j][k].ln();
            }
            if y[j][k] > 0.0 {
                total -= delta * y[j][k] * y[j][k].ln();
            }
        }
    }
    total
}

/// Maximum-weight d-to-1 matching (not necessarily perfect: strictly
/// negative edges are never used). Deterministic tie-break by edge order.
pub fn max_weight_matching(weights: &[Vec<f64>], d: usize) -> (Vec<Option<usize>>, f64) {
    flow::solve(weights, d, false).expect("partial matching is always feasible")
}

/// Maximum-weight *perfect* d-to-1 matching; requires `lhs <= d * rhs`.
pub fn max_weight_perfect_matching(
    weights: &[Vec<f64>],
    d: usize,
) -> Result<(Vec<Option<usize>>, f64)> {
    flow::solve(weights, d, true)
}

#[derive(Debug, Clone)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// Weight of the max matching on the empirical means.
    pub matching_weight: f64,
    pub samples_per_edge: u64,
    pub zero_variance: bool,
}

/// Samples-per-edge requirement for the estimation accuracy `δ log(ℓ)/2`.
/// Degenerate for `ell < 2` (the accuracy target is vacuous); one sample is
/// used there.
pub fn gamma_samples_per_edge(ell: usize, d: usize, delta: f64, eta_prime: f64) -> u64 {
    if ell < 2 {
        return 1;
    }
    let l = ell as f64;
    let need = 2.0 * (4.0 * l * l * d as f64 / eta_prime).ln() / (delta * delta * l.ln() * l.ln());
    need.ceil().max(1.0) as u64
}

/// Estimate the scaling parameter `γ` from fresh replicas only: empirical
/// edge means (or exact means when the oracle is zero-variance), the
/// max-weight matching weight `A` on them, and
/// `γ = 12 max(A, δ d ℓ log ℓ)/d`, capped at `12 max(ℓ, δ ℓ log ℓ)`.
pub fn estimate_gamma(
    oracle: &dyn WeightOracle,
    ell: usize,
    d: usize,
    delta: f64,
    eta_prime: f64,
    rng: &mut RngStream,
) -> Result<GammaEstimate> {
    if ell == 0 || d == 0 {
        return Err(Error::invalid("ell and d must be positive"));
    }
    if oracle.lhs() != d * ell || oracle.rhs() != ell {
        return Err(Error::invalid("oracle grid shape mismatch"));
    }
    let zero_variance = oracle.all_exact();
    let n = if zero_variance {
        1
    } else {
        gamma_samples_per_edge(ell, d, delta, eta_prime)
    };
    let mut means = vec![vec![0.0f64; ell]; d * ell];
    for (j, row) in means.iter_mut().enumerate() {
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = match oracle.exact_mean(j, k) {
                Some(m) if zero_variance => m,
                _ => {
                    let mut acc = 0.0;
                    for _ in 0..n {
                        acc += oracle.sample(j, k, rng);
                    }
                    acc / n as f64
                }
            };
        }
    }
    let (_, a) = max_weight_matching(&means, d);
    let l = ell as f64;
    let floor = delta * d as f64 * l * l.ln();
    let gamma_raw = 12.0 * a.max(floor) / d as f64;
    let cap = 12.0 * l.max(delta * l * l.ln());
    Ok(GammaEstimate {
        gamma: gamma_raw.min(cap),
        matching_weight: a,
        samples_per_edge: n,
        zero_variance,
    })
}

/// Min-cost-flow solver for d-to-1 matchings on a dense bipartite graph.
mod flow {
    use crate::error::{Error, Result};

    struct Arc {
        to: usize,
        cap: i32,
        cost: f64,
    }

    pub(super) fn solve(
        weights: &[Vec<f64>],
        d: usize,
        perfect: bool,
    ) -> Result<(Vec<Option<usize>>, f64)> {
        let l = weights.len();
        let r = weights.first().map_or(0, |row| row.len());
        if l == 0 || r == 0 {
            return Ok((vec![None; l], 0.0));
        }
        if perfect && l > d * r {
            return Err(Error::invalid(format!(
                "no perfect matching: {} LHS nodes, capacity {}",
                l,
                d * r
            )));
        }
        // nodes: 0..l LHS, l..l+r RHS, source = l+r, sink = l+r+1
        let n = l + r + 2;
        let (source, sink) = (l + r, l + r + 1);
        let mut arcs: Vec<Arc> = Vec::with_capacity(2 * (l + l * r + r));
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        let add = |arcs: &mut Vec<Arc>, adj: &mut Vec<Vec<usize>>, from: usize, to: usize, cap: i32, cost: f64| {
            adj[from].push(arcs.len());
            arcs.push(Arc { to, cap, cost });
            adj[to].push(arcs.len());
            arcs.push(Arc {
                to: from,
                cap: 0,
                cost: -cost,
            });
        };
        for j in 0..l {
            add(&mut arcs, &mut adj, source, j, 1, 0.0);
            for k in 0..r {
                add(&mut arcs, &mut adj, j, l + k, 1, -weights[j][k]);
            }
        }
        for k in 0..r {
            add(&mut arcs, &mut adj, l + k, sink, d as i32, 0.0);
        }
        // initial potentials: exact shortest distances in the layered DAG
        let mut pot = vec![0.0f64; n];
        for k in 0..r {
            pot[l + k] = (0..l).map(|j| -weights[j][k]).fold(f64::INFINITY, f64::min);
        }
        pot[sink] = (0..r).map(|k| pot[l + k]).fold(f64::INFINITY, f64::min);

        let mut pushed = 0usize;
        let mut total = 0.0f64;
        loop {
            if perfect && pushed == l {
                break;
            }
            // Dijkstra with reduced costs
            let mut dist = vec![f64::INFINITY; n];
            let mut prev_arc: Vec<usize> = vec![usize::MAX; n];
            let mut done = vec![false; n];
            dist[source] = 0.0;
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
                for &eid in &adj[u] {
                    let arc = &arcs[eid];
                    if arc.cap > 0 {
                        let rc = arc.cost + pot[u] - pot[arc.to];
                        let nd = dist[u] + rc.max(0.0);
                        if nd < dist[arc.to] - 1e-15 {
                            dist[arc.to] = nd;
                            prev_arc[arc.to] = eid;
                        }
                    }
                }
            }
            if !dist[sink].is_finite() {
                if perfect {
                    return Err(Error::InternalInvariant(
                        "perfect matching demanded but no augmenting path".into(),
                    ));
                }
                break;
            }
            let true_cost = dist[sink] + pot[sink] - pot[source];
            if !perfect && true_cost >= -1e-12 {
                break;
            }
            // augment one unit
            let mut v = sink;
            while v != source {
                let eid = prev_arc[v];
                arcs[eid].cap -= 1;
                arcs[eid ^ 1].cap += 1;
                // the paired reverse arc points back at the tail
                v = arcs[eid ^ 1].to;
            }
            total -= true_cost;
            pushed += 1;
            for v in 0..n {
                if dist[v].is_finite() {
                    pot[v] += dist[v];
                }
            }
        }
        // extract matching: forward LHS->RHS arcs with zero remaining cap
        let mut matching = vec![None; l];
        for j in 0..l {
            for &eid in &adj[j] {
                if eid % 2 == 0 {
                    let arc = &arcs[eid];
                    if arc.to >= l && arc.to < l + r && arc.cap == 0 {
                        matching[j] = Some(arc.to - l);
                    }
                }
            }
        }
        Ok((matching, total))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(-3.0, 0.5) - 0.5 * ((-6.0f64).exp() + 1.0).ln()).abs() < 1e-15);
        assert!((softplus(-3.0, 0.5) - 0.001_238_6).abs() < 1e-6);
        let mut rng = RngStream::new(3, 0);
        for _ in 0..1000 {
            let w = rng.f64() * 4.0 - 2.0;
            let delta = rng.f64() * 2.0 + 1e-3;
            let z = softplus(w, delta);
            assert!(z >= w.max(0.0));
            assert!(z > 0.0);
        }
    }

    #[test]
    fn softplus_extreme_args_stable() {
        assert!((softplus(100.0, 0.01) - 100.0).abs() < 1e-9);
        let tiny = softplus(-100.0, 0.01);
        assert!(tiny > 0.0 && tiny < 1e-300 || tiny == 0.0);
        // representable but denormal-small is fine; must not be NaN
        assert!(!softplus(-100.0, 0.01).is_nan());
    }

    #[test]
    fn alg1_forced_cases() {
        let mut rng = RngStream::new(5, 0);
        // ell = 1, d = 2: both LHS nodes forced onto the single RHS node
        let w = ExactWeights(vec![vec![0.7], vec![0.2]]);
        let inst = MatchInstance {
            ell: 1,
            d: 2,
            oracle: &w,
            params: MatchParams {
                delta: 0.5,
                eta_prime: 1.0,
                gamma: 0.0,
            },
        };
        let t = run_alg1(&inst, GibbsBackend::ExactMean, RecordMode::Full, &mut rng).unwrap();
        assert_eq!(t.assignments, vec![(0, NodeKind::Normal), (0, NodeKind::Normal)]);
        assert_eq!(t.loads(), vec![2]);
    }

    #[test]
    fn alg1_second_node_forced() {
        // ell = 2, d = 1, equal weights: second node forced to the leftover
        let w = ExactWeights(vec![vec![0.4, 0.4], vec![0.4, 0.4]]);
        let inst = MatchInstance {
            ell: 2,
            d: 1,
            oracle: &w,
            params: MatchParams {
                delta: 1.0,
                eta_prime: 1.0,
                gamma: 0.0,
            },
        };
        let mut seen = [false; 2];
        for seed in 0..40 {
            let mut rng = RngStream::new(seed, 0);
            let t = run_alg1(&inst, GibbsBackend::ExactMean, RecordMode::Full, &mut rng).unwrap();
            let (first, _) = t.assignments[0];
            let (second, _) = t.assignments[1];
            assert_ne!(first, second);
            seen[first] = true;
            // first round is the uniform Gibbs over both nodes
            let probs = t.rounds[0].x_probs.as_ref().unwrap();
            assert!((probs[0] - 0.5).abs() < 1e-12);
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn alg1_gibbs_probability() {
        // ell = 2, d = 1, ω_0 = (1, 0), γ = 0, δ = 1: first node matched to
        // RHS 0 with probability e/(e+1)
        let w = ExactWeights(vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        let inst = MatchInstance {
            ell: 2,
            d: 1,
            oracle: &w,
            params: MatchParams {
                delta: 1.0,
                eta_prime: 1.0,
                gamma: 0.0,
            },
        };
        let mut rng = RngStream::new(6, 0);
        let t = run_alg1(&inst, GibbsBackend::ExactMean, RecordMode::Full, &mut rng).unwrap();
        let probs = t.rounds[0].x_probs.as_ref().unwrap();
        let e = std::f64::consts::E;
        assert!((probs[0] - e / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn alg1_rejects_negative_weights() {
        let w = ExactWeights(vec![vec![-0.1], vec![0.2]]);
        let inst = MatchInstance {
            ell: 1,
            d: 2,
            oracle: &w,
            params: MatchParams {
                delta: 1.0,
                eta_prime: 1.0,
                gamma: 0.0,
            },
        };
        let mut rng = RngStream::new(0, 0);
        assert!(run_alg1(&inst, GibbsBackend::ExactMean, RecordMode::Slim, &mut rng).is_err());
    }

    #[test]
    fn alg2_two_candidate_softmax() {
        // single LHS, single RHS, weight w, α = 0: P(normal) = σ(w/δ)
        let wval = 0.3;
        let delta = 0.7;
        let w = ExactWeights(vec![vec![wval]]);
        let inst = MatchInstance {
            ell: 1,
            d: 1,
            oracle: &w,
            params: MatchParams {
                delta,
                eta_prime: 1.0,
                gamma: 0.0,
            },
        };
        let mut rng = RngStream::new(7, 0);
        let t = run_alg2(&inst, GibbsBackend::ExactMean, RecordMode::Full, &mut rng).unwrap();
        let x = t.rounds[0].x_probs.as_ref().unwrap()[0];
        let expected = (wval / delta).exp() / ((wval / delta).exp() + 1.0);
        assert!((x - expected).abs() < 1e-12);
    }

    #[test]
    fn alg2_avoids_negative_edges_at_small_delta() {
        // all weights -1, δ -> 0+: normal matches become vanishingly rare
        let w = ExactWeights(vec![vec![-1.0, -1.0]; 4]);
        let inst = MatchInstance {
            ell: 2,
            d: 2,
            oracle: &w,
            params: MatchParams {
                delta: 1e-3,
                eta_prime: 1.0,
                gamma: 0.0,
            },
        };
        let mut rng = RngStream::new(8, 0);
        let mut normal = 0u64;
        let mut totaln = 0u64;
        for _ in 0..2_500 {
            let t = run_alg2(&inst, GibbsBackend::ExactMean, RecordMode::Slim, &mut rng).unwrap();
            for &(_, kind) in &t.assignments {
                totaln += 1;
                if kind == NodeKind::Normal {
                    normal += 1;
                }
            }
        }
        assert!((normal as f64 / totaln as f64) <= 0.01, "normal rate {}", normal);
    }

    #[test]
    fn coupling_identity_alg1_on_softplus_vs_alg2() {
        // Drive Algorithm 2; per round, Algorithm 1's Gibbs distribution on
        // ζ_δ(ω) with the same duals must equal x̂ + ŷ.
        let delta = 0.4;
        let params = MatchParams {
            delta,
            eta_prime: 0.8,
            gamma: 0.6,
        };
        let raw = vec![
            vec![0.5, -0.7, 0.1],
            vec![-0.2, 0.9, -0.4],
            vec![0.3, 0.2, -0.9],
            vec![-0.6, 0.0, 0.8],
            vec![0.15, -0.35, 0.55],
            vec![0.8, -0.1, -0.2],
        ];
        let oracle = ExactWeights(raw.clone());
        let inst = MatchInstance {
            ell: 3,
            d: 2,
            oracle: &oracle,
            params,
        };
        let mut rng = RngStream::new(9, 0);
        let t = run_alg2(&inst, GibbsBackend::ExactMean, RecordMode::Full, &mut rng).unwrap();
        for round in &t.rounds {
            let x = round.x_probs.as_ref().unwrap();
            let y = round.y_probs.as_ref().unwrap();
            // Algorithm 1 on ζ(ω) with identical (α, K)
            let means: Vec<f64> = round
                .available
                .iter()
                .map(|&k| softplus(raw[round.lhs][k], delta))
                .collect();
            let offsets: Vec<f64> = round
                .available
                .iter()
                .map(|&k| params.gamma * round.alpha[k])
                .collect();
            let z = gibbs_probabilities(&means, &offsets, delta);
            for (i, &k) in round.available.iter().enumerate() {
                assert!(
                    (z[i] - (x[k] + y[k])).abs() < 1e-12,
                    "round {} k {}: z={} x+y={}",
                    round.lhs,
                    k,
                    z[i],
                    x[k] + y[k]
                );
            }
            // per-round expected matched weight is never much below zero
            let exp_w: f64 = round
                .available
                .iter()
                .map(|&k| x[k] * raw[round.lhs][k])
                .sum();
            assert!(exp_w >= -delta * (2.0 * 3.0f64).ln() - 1e-12);
        }
    }

    #[test]
    fn offline_single_cell_closed_form() {
        for &(w, delta) in &[(0.3, 0.7), (-0.5, 0.2), (0.9, 1.5)] {
            let sol = solve_regularized_offline(&[vec![w]], 1, 1, delta).unwrap();
            let expected = delta * ((w / delta).exp() + 1.0).ln();
            assert!(
                (sol.opt - expected).abs() < 1e-9,
                "w={} delta={}: {} vs {}",
                w,
                delta,
                sol.opt,
                expected
            );
        }
    }

    #[test]
    fn offline_opt_dominates_max_matching() {
        let mut rng = RngStream::new(10, 0);
        for _ in 0..50 {
            let ell = 3;
            let d = 1;
            let w: Vec<Vec<f64>> = (0..d * ell)
                .map(|_| (0..ell).map(|_| rng.f64() * 2.0 - 1.0).collect())
                .collect();
            let sol = solve_regularized_offline(&w, ell, d, 0.3).unwrap();
            let (_, a) = max_weight_matching(&w, d);
            assert!(
                sol.opt >= a - 1e-6,
                "opt {} below matching weight {}",
                sol.opt,
                a
            );
            // split objective equals softplus objective
            let f = augmented_objective(&sol.x, &sol.y, &w, 0.3);
            assert!((f - sol.opt).abs() < 1e-9);
        }
    }

    #[test]
    fn offline_matches_grid_bruteforce_2x2() {
        let w = vec![vec![0.6, -0.3], vec![-0.8, 0.4]];
        let delta = 0.5;
        let sol = solve_regularized_offline(&w, 2, 1, delta).unwrap();
        // grid over row distributions z_j = (a, 1-a), step 1/200, subject to
        // column sums <= 1
        let zeta: Vec<Vec<f64>> = w
            .iter()
            .map(|r| r.iter().map(|&x| softplus(x, delta)).collect())
            .collect();
        let mut best = f64::NEG_INFINITY;
        let steps = 200;
        for ia in 0..=steps {
            let a = ia as f64 / steps as f64;
            for ib in 0..=steps {
                let b = ib as f64 / steps as f64;
                if a + b > 1.0 + 1e-12 || (1.0 - a) + (1.0 - b) > 1.0 + 1e-12 {
                    continue;
                }
                let z = [[a, 1.0 - a], [b, 1.0 - b]];
                let mut g = 0.0;
                for j in 0..2 {
                    for k in 0..2 {
                        if z[j][k] > 0.0 {
                            g += z[j][k] * zeta[j][k] - delta * z[j][k] * z[j][k].ln();
                        }
                    }
                }
                best = best.max(g);
            }
        }
        assert!((sol.opt - best).abs() < 2e-3, "opt {} grid {}", sol.opt, best);
    }

    #[test]
    fn max_matching_examples() {
        let (m, wt) = max_weight_matching(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1);
        assert!((wt - 2.0).abs() < 1e-12);
        assert_eq!(m, vec![Some(0), Some(1)]);

        let (m, wt) = max_weight_matching(&[vec![1.0, 0.9], vec![0.8, 0.0]], 1);
        assert!((wt - 1.7).abs() < 1e-12, "weight {}", wt);
        assert_eq!(m, vec![Some(1), Some(0)]);

        // strictly negative edges are dropped
        let (m, wt) = max_weight_matching(&[vec![-1.0], vec![-0.5]], 2);
        assert_eq!(m, vec![None, None]);
        assert_eq!(wt, 0.0);
    }

    #[test]
    fn max_matching_against_bruteforce() {
        fn brute(w: &[Vec<f64>], d: usize) -> f64 {
            // enumerate assignments of each LHS node to None or an RHS node
            fn go(w: &[Vec<f64>], d: usize, j: usize, loads: &mut [usize]) -> f64 {
                if j == w.len() {
                    return 0.0;
                }
                let mut best = go(w, d, j + 1, loads); // leave j unmatched
                for k in 0..w[j].len() {
                    if loads[k] < d {
                        loads[k] += 1;
                        best = best.max(w[j][k] + go(w, d, j + 1, loads));
                        loads[k] -= 1;
                    }
                }
                best
            }
            let mut loads = vec![0usize; w[0].len()];
            go(w, d, 0, &mut loads)
        }
        let mut rng = RngStream::new(11, 0);
        for trial in 0..40 {
            let l = 3 + (trial % 3);
            let r = 2 + (trial % 2);
            let d = 1 + (trial % 2);
            let w: Vec<Vec<f64>> = (0..l)
                .map(|_| (0..r).map(|_| rng.f64() * 2.0 - 1.0).collect())
                .collect();
            let (_, got) = max_weight_matching(&w, d);
            let want = brute(&w, d);
            assert!((got - want).abs() < 1e-9, "got {} want {}", got, want);
        }
    }

    #[test]
    fn perfect_matching_respects_negative_edges() {
        let w = vec![vec![-1.0, -2.0], vec![-3.0, -4.0]];
        let (m, wt) = max_weight_perfect_matching(&w, 1).unwrap();
        // best perfect assignment: -1 + -4 = -5 vs -2 + -3 = -5; tie, both
        // optimal. weight must be -5.
        assert!((wt + 5.0).abs() < 1e-12);
        assert!(m.iter().all(Option::is_some));
        let ones = vec![vec![0.0]; 3];
        assert!(max_weight_perfect_matching(&ones, 3).is_ok());
        assert!(max_weight_perfect_matching(&ones, 2).is_err());
    }

    #[test]
    fn gamma_zero_variance_in_range() {
        let mut rng = RngStream::new(12, 0);
        for trial in 0..10 {
            let ell = 2 + trial % 3;
            let d = 1 + trial % 2;
            let delta = 0.2 + 0.1 * (trial % 4) as f64;
            let w: Vec<Vec<f64>> = (0..d * ell)
                .map(|_| (0..ell).map(|_| rng.f64() * 2.0 - 1.0).collect())
                .collect();
            let oracle = ExactWeights(w.clone());
            let est = estimate_gamma(&oracle, ell, d, delta, 0.5, &mut rng).unwrap();
            let opt = solve_regularized_offline(&w, ell, d, delta).unwrap().opt;
            let lo = 2.0 * opt / d as f64;
            let hi = 24.0 * opt / d as f64;
            assert!(
                est.gamma >= lo - 1e-9 && est.gamma <= hi + 1e-9,
                "gamma {} not in [{}, {}]",
                est.gamma,
                lo,
                hi
            );
            assert!(est.zero_variance);
        }
    }

    #[test]
    fn gamma_floor_dominates_for_nonpositive_weights() {
        let ell = 4;
        let d = 2;
        let delta = 0.3;
        let w = vec![vec![-0.5; ell]; d * ell];
        let oracle = ExactWeights(w);
        let mut rng = RngStream::new(13, 0);
        let est = estimate_gamma(&oracle, ell, d, delta, 0.5, &mut rng).unwrap();
        let expected = 12.0 * delta * ell as f64 * (ell as f64).ln();
        assert!((est.gamma - expected).abs() < 1e-12);
        assert_eq!(est.matching_weight, 0.0);
    }

    /// The recorded round distribution maximizes the regularized objective
    /// `Σ x ω + δ H(x, y) - Σ γ α (x + y)` over the simplex: random feasible
    /// perturbations never score higher.
    #[test]
    fn round_distribution_is_maximal_in_range() {
        let params = MatchParams {
            delta: 0.5,
            eta_prime: 0.7,
            gamma: 0.9,
        };
        let raw = vec![
            vec![0.4, -0.6],
            vec![-0.3, 0.8],
            vec![0.1, 0.2],
            vec![-0.9, 0.5],
        ];
        let oracle = ExactWeights(raw.clone());
        let inst = MatchInstance {
            ell: 2,
            d: 2,
            oracle: &oracle,
            params,
        };
        let mut rng = RngStream::new(77, 0);
        let t = run_alg2(&inst, GibbsBackend::ExactMean, RecordMode::Full, &mut rng).unwrap();
        let objective = |round: &RoundRecord, x: &[f64], y: &[f64]| -> f64 {
            let mut total = 0.0;
            for (i, &k) in round.available.iter().enumerate() {
                if x[i] > 0.0 {
                    total += x[i] * raw[round.lhs][k] - params.delta * x[i] * x[i].ln();
                }
                if y[i] > 0.0 {
                    total -= params.delta * y[i] * y[i].ln();
                }
                total -= params.gamma * round.alpha[k] * (x[i] + y[i]);
            }
            total
        };
        for round in &t.rounds {
            let xs: Vec<f64> = round
                .available
                .iter()
                .map(|&k| round.x_probs.as_ref().unwrap()[k])
                .collect();
            let ys: Vec<f64> = round
                .available
                .iter()
                .map(|&k| round.y_probs.as_ref().unwrap()[k])
                .collect();
            let best = objective(round, &xs, &ys);
            for _ in 0..50 {
                // random feasible alternative on the simplex
                let kn = round.available.len();
                let mut alt: Vec<f64> = (0..2 * kn).map(|_| -rng.f64().ln()).collect();
                let s: f64 = alt.iter().sum();
                for v in alt.iter_mut() {
                    *v /= s;
                }
                let (ax, ay) = alt.split_at(kn);
                assert!(
                    objective(round, ax, ay) <= best + 1e-12,
                    "perturbation beats the Gibbs round"
                );
            }
        }
    }

    /// Near-optimality trend: shrinking ψ (hence δ and η') moves the
    /// expected matched weight toward the max-weight matching.
    #[test]
    fn matched_weight_improves_as_psi_shrinks() {
        let ell = 3;
        let d = 2;
        let raw: Vec<Vec<f64>> = vec![
            vec![0.9, 0.1, -0.4],
            vec![0.2, 0.8, -0.1],
            vec![-0.5, 0.3, 0.7],
            vec![0.6, -0.2, 0.4],
            vec![0.05, 0.75, 0.3],
            vec![0.45, -0.8, 0.85],
        ];
        let oracle = ExactWeights(raw.clone());
        let (_, opt) = max_weight_matching(&raw, d);
        let mut means = Vec::new();
        for (i, &psi) in [0.4f64, 0.2, 0.1].iter().enumerate() {
            let log_l = (ell as f64).ln();
            let delta = psi / log_l;
            let mut rng = RngStream::new(300 + i as u64, 0);
            let gamma = estimate_gamma(&oracle, ell, d, delta, psi, &mut rng)
                .unwrap()
                .gamma;
            let params = MatchParams {
                delta,
                eta_prime: psi,
                gamma,
            };
            let mut total = 0.0;
            let runs = 3000;
            for _ in 0..runs {
                let inst = MatchInstance {
                    ell,
                    d,
                    oracle: &oracle,
                    params,
                };
                let t =
                    run_alg2(&inst, GibbsBackend::ExactMean, RecordMode::Slim, &mut rng).unwrap();
                total += t.matched_weight(&raw);
            }
            means.push(total / runs as f64);
        }
        assert!(
            means[2] >= means[0] - 0.05,
            "matched weight got worse as psi shrank: {:?}",
            means
        );
        assert!(means[2] <= opt + 1e-9);
        // at the smallest psi the loss from optimum is visibly small
        assert!(opt - means[2] <= 0.8, "loss {} too large", opt - means[2]);
    }

    #[test]
    fn gamma_deterministic_given_seed() {
        struct Noisy;
        impl WeightOracle for Noisy {
            fn lhs(&self) -> usize {
                4
            }
            fn rhs(&self) -> usize {
                2
            }
            fn sample(&self, j: usize, k: usize, rng: &mut RngStream) -> f64 {
                let base = 0.1 * (j as f64) - 0.2 * (k as f64);
                (base + rng.f64() * 0.2 - 0.1).clamp(-1.0, 1.0)
            }
        }
        let a = estimate_gamma(&Noisy, 2, 2, 0.4, 0.5, &mut RngStream::new(77, 3)).unwrap();
        let b = estimate_gamma(&Noisy, 2, 2, 0.4, 0.5, &mut RngStream::new(77, 3)).unwrap();
        assert_eq!(a.gamma.to_bits(), b.gamma.to_bits());
        assert!(a.samples_per_edge > 1);
    }
}
