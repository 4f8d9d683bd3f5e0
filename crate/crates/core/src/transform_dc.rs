//! The ε-BIC → BIC transformation for downward-closed outcome spaces.
//!
//! Per agent, a reported type is inserted at a uniform position among
//! `dℓ - 1` replicas drawn from `D'`, matched against `ℓ` surrogates drawn
//! from `D` (each paired with a 0-surrogate of type `⋄` and weight 0) by the
//! online entropy-regularized matching, and the matched surrogate competes
//! in the original mechanism at a `(1-η)`-discounted price. Phase-1 payments
//! are computed implicitly from one rerun of the agent's round with weights
//! scaled by `λ ~ U[0,1]`.
//!
//! The construction is BIC and IR with respect to `D'` for *any* parameter
//! choice and any IR input mechanism; parameters only govern the revenue
//! guarantee.

use std::cell::Cell;

use crate::bernoulli::GibbsBackend;
use crate::domain::{OutcomeIdx, OutcomeMode, TypeIdx};
use crate::error::{Error, Result};
use crate::instance::Setting;
use crate::matching::{
    self, GammaEstimate, MatchInstance, MatchParams, MatchTranscript, NodeKind, RecordMode,
    RoundState, WeightOracle,
};
use crate::mechanism::{exact_interim, Mechanism};
use crate::rng::RngStream;

/// Lower bound on the mean Phase-1 payment: `-sqrt(δ) (log(2ℓ) + 1)`.
pub fn subsidy_floor(delta: f64, ell: usize) -> f64 {
    -delta.sqrt() * ((2.0 * ell as f64).ln() + 1.0)
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TransformConfig {
    /// Price discount of Phase 2; surrogates pay `(1-η) p`.
    pub eta: f64,
    /// Dual-learning temperature of the online matching.
    pub eta_prime: f64,
    /// Gibbs temperature of the online matching.
    pub delta: f64,
    /// Surrogates per agent.
    pub ell: usize,
    /// Matching capacity (replicas per surrogate).
    pub d: usize,
    #[serde(skip)]
    pub backend: GibbsBackend,
    /// Fail instead of warn when `d` is below the theory bound.
    pub strict: bool,
}

impl TransformConfig {
    /// The claimed revenue bound needs
    /// `d >= 32 log(8/η') / (δ² ℓ log²(ℓ))`.
    pub fn required_d(&self) -> f64 {
        let l = self.ell as f64;
        let log_l = if self.ell >= 2 { l.ln() } else { 1.0 };
        32.0 * (8.0 / self.eta_prime).ln() / (self.delta * self.delta * l * log_l * log_l)
    }

    /// Parameter schedule from a target ε: `ψ = ε²/log ℓ`, `δ = ψ/log ℓ`,
    /// `η' = ψ`, `η = √ε`.
    pub fn for_epsilon(eps: f64, ell: usize, d: usize, backend: GibbsBackend) -> Self {
        let log_l = (ell.max(2) as f64).ln();
        let psi = eps * eps / log_l;
        TransformConfig {
            eta: eps.sqrt().min(0.5),
            eta_prime: psi,
            delta: psi / log_l,
            ell,
            d,
            backend,
            strict: false,
        }
    }

    /// Validate, returning warnings for relaxed theory preconditions.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Configuration("eta must lie in (0, 1]".into()));
        }
        if !(self.eta_prime > 0.0) || !(self.delta > 0.0) {
            return Err(Error::Configuration("eta' and delta must be positive".into()));
        }
        if self.ell == 0 || self.d == 0 {
            return Err(Error::Configuration("ell and d must be positive".into()));
        }
        let mut warnings = Vec::new();
        let need = self.required_d();
        if (self.d as f64) < need {
            let msg = format!(
                "d = {} below the revenue-guarantee bound {:.3e}; BIC/IR unaffected, revenue bound relaxed",
                self.d, need
            );
            if self.strict {
                return Err(Error::Configuration(msg));
            }
            warnings.push(msg);
        }
        Ok(warnings)
    }
}

/// Weight oracle of one agent's replica-surrogate graph: rows are replica
/// types, columns are normal surrogate types. A sample costs one mechanism
/// query; exact means come from the precomputed interim table.
struct DcWeightOracle<'b> {
    setting: &'b Setting,
    mech: &'b dyn Mechanism,
    agent: usize,
    eta: f64,
    replica_types: &'b [TypeIdx],
    surrogate_types: &'b [TypeIdx],
    exact_w: Option<&'b Vec<Vec<f64>>>,
    queries: &'b Cell<u64>,
}

impl<'b> WeightOracle for DcWeightOracle<'b> {
    fn lhs(&self) -> usize {
        self.replica_types.len()
    }
    fn rhs(&self) -> usize {
        self.surrogate_types.len()
    }
    fn sample(&self, j: usize, k: usize, rng: &mut RngStream) -> f64 {
        weight_sample(
            self.setting,
            self.mech,
            self.agent,
            self.replica_types[j],
            self.surrogate_types[k],
            self.eta,
            rng,
        )
        .map(|(w, q)| {
            self.queries.set(self.queries.get() + q);
            w
        })
        .expect("weight oracle query failed on a validated instance")
    }
    fn exact_mean(&self, j: usize, k: usize) -> Option<f64> {
        self.exact_w
            .map(|t| t[self.replica_types[j]][self.surrogate_types[k]])
    }
}

/// One unbiased sample of the edge weight
/// `W_i(r, s) = E[v_i(r, x(s, t_{-i}))] - (1-η) E[p_i(s, t_{-i})]`:
/// draw `t_{-i} ~ D_{-i}`, query the mechanism once at `(s, t_{-i})`.
/// Returns the bounded sample and the number of mechanism queries spent.
pub fn weight_sample(
    setting: &Setting,
    mech: &dyn Mechanism,
    agent: usize,
    replica: TypeIdx,
    surrogate: TypeIdx,
    eta: f64,
    rng: &mut RngStream,
) -> Result<(f64, u64)> {
    let n = setting.num_agents();
    let mut bids = vec![0usize; n];
    for (j, slot) in bids.iter_mut().enumerate() {
        *slot = if j == agent {
            surrogate
        } else {
            setting.dists[j].sample(rng)
        };
    }
    let mut payments = vec![0.0; n];
    let o = mech.query_into(&bids, rng, &mut payments)?;
    let w = setting.agents[agent].value(replica, o) - (1.0 - eta) * payments[agent];
    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&w) {
        return Err(Error::invalid(format!(
            "weight sample {} outside [-1, 1]; normalize the mechanism's payments",
            w
        )));
    }
    Ok((w.clamp(-1.0, 1.0), 1))
}

/// Surrogate selection result for one agent.
#[derive(Debug, Clone)]
pub struct Phase1Result {
    /// Type of the k-th normal surrogate, whether the match hit the normal
    /// copy or its 0-copy.
    pub surrogate_type: TypeIdx,
    pub matched_normal: bool,
    /// Meta-node index k.
    pub meta_index: usize,
    /// Position π of the report among the replicas.
    pub position: usize,
    pub gamma: GammaEstimate,
    pub surrogates: Vec<TypeIdx>,
    pub replicas: Vec<TypeIdx>,
    /// Dual state of round π, kept for the implicit-payment rerun.
    pub round_state: RoundState,
    pub transcript: Option<MatchTranscript>,
    pub mech_queries: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct PaymentSample {
    pub amount: f64,
    pub lambda: f64,
    pub mech_queries: u64,
}

/// Outcome of one full run of the transformed mechanism.
#[derive(Debug, Clone)]
pub struct TransformedRun {
    pub outcome: OutcomeIdx,
    pub agents: Vec<AgentRun>,
    pub mech_queries: u64,
}

#[derive(Debug, Clone)]
pub struct AgentRun {
    pub surrogate: TypeIdx,
    pub matched_normal: bool,
    pub phase1_payment: f64,
    pub phase2_payment: f64,
    pub gamma: f64,
}

impl TransformedRun {
    pub fn revenue(&self) -> f64 {
        self.agents
            .iter()
            .map(|a| a.phase1_payment + a.phase2_payment)
            .sum()
    }
}

/// The transformed mechanism. Query it like any mechanism; every query
/// executes Phase 1 for each agent (γ estimation from fresh replicas, the
/// online matching, the implicit payment) and one Phase-2 query of the
/// input mechanism.
pub struct DcTransform<'a> {
    pub setting: &'a Setting,
    mech: &'a dyn Mechanism,
    pub config: TransformConfig,
    pub warnings: Vec<String>,
    /// `[agent][replica_type][surrogate_type]`, present with the exact-mean
    /// backend (requires a tabular input mechanism).
    exact_w: Option<Vec<Vec<Vec<f64>>>>,
}

impl<'a> DcTransform<'a> {
    pub fn new(
        setting: &'a Setting,
        mech: &'a dyn Mechanism,
        config: TransformConfig,
    ) -> Result<Self> {
        if setting.outcomes.mode != OutcomeMode::DownwardClosed {
            return Err(Error::Configuration(
                "the replica-surrogate transform needs a downward-closed outcome space".into(),
            ));
        }
        let warnings = config.validate()?;
        let exact_w = match config.backend {
            GibbsBackend::ExactMean => Some(interim_weight_tables(setting, mech, config.eta)?),
            GibbsBackend::Race => None,
        };
        Ok(DcTransform {
            setting,
            mech,
            config,
            warnings,
            exact_w,
        })
    }

    fn params(&self, gamma: f64) -> MatchParams {
        MatchParams {
            delta: self.config.delta,
            eta_prime: self.config.eta_prime,
            gamma,
        }
    }

    fn oracle<'b>(
        &'b self,
        agent: usize,
        replica_types: &'b [TypeIdx],
        surrogate_types: &'b [TypeIdx],
        queries: &'b Cell<u64>,
    ) -> DcWeightOracle<'b> {
        DcWeightOracle {
            setting: self.setting,
            mech: self.mech,
            agent,
            eta: self.config.eta,
            replica_types,
            surrogate_types,
            exact_w: self.exact_w.as_ref().map(|w| &w[agent]),
            queries,
        }
    }

    /// Phase 1 for one agent: surrogates, γ from fresh replicas (computed
    /// before the report enters any weight), the online matching, and the
    /// surrogate the report ends up with.
    pub fn phase1_select(
        &self,
        agent: usize,
        report: TypeIdx,
        mode: RecordMode,
        rng: &mut RngStream,
    ) -> Result<Phase1Result> {
        let d_rep = self.setting.replica_dist(agent);
        if d_rep.mass_of(report) == 0.0 {
            return Err(Error::invalid(format!(
                "report {} outside the support of agent {}'s replica distribution",
                report, agent
            )));
        }
        let (ell, d) = (self.config.ell, self.config.d);
        let queries = Cell::new(0u64);

        let surrogates: Vec<TypeIdx> =
            (0..ell).map(|_| self.setting.dists[agent].sample(rng)).collect();

        // γ from fresh replicas only
        let fresh: Vec<TypeIdx> = (0..d * ell).map(|_| d_rep.sample(rng)).collect();
        let fresh_oracle = self.oracle(agent, &fresh, &surrogates, &queries);
        let gamma = matching::estimate_gamma(
            &fresh_oracle,
            ell,
            d,
            self.config.delta,
            self.config.eta_prime,
            rng,
        )?;

        // replicas with the report at a uniform position
        let position = rng.below(d * ell);
        let mut replicas: Vec<TypeIdx> = Vec::with_capacity(d * ell);
        for j in 0..d * ell {
            if j == position {
                replicas.push(report);
            } else {
                replicas.push(d_rep.sample(rng));
            }
        }

        let oracle = self.oracle(agent, &replicas, &surrogates, &queries);
        let inst = MatchInstance {
            ell,
            d,
            oracle: &oracle,
            params: self.params(gamma.gamma),
        };
        let (transcript, round_state) =
            matching::run_alg2_focused(&inst, self.config.backend, mode, position, rng)?;
        let (meta_index, kind) = transcript.assignments[position];
        Ok(Phase1Result {
            surrogate_type: surrogates[meta_index],
            matched_normal: kind == NodeKind::Normal,
            meta_index,
            position,
            gamma,
            surrogates,
            replicas,
            round_state,
            transcript: match mode {
                RecordMode::Full => Some(transcript),
                RecordMode::Slim => None,
            },
            mech_queries: queries.get(),
        })
    }

    /// Implicit Phase-1 payment: one fresh draw of the agent's round with
    /// the row weights scaled by `λ ~ U[0,1]`, charged
    /// `weight(s') - weight(s'') - sqrt(δ)(log(2ℓ) + 1)`.
    pub fn implicit_payment(
        &self,
        agent: usize,
        report: TypeIdx,
        phase1: &Phase1Result,
        rng: &mut RngStream,
    ) -> Result<PaymentSample> {
        let lambda = rng.f64();
        self.implicit_payment_with_lambda(agent, report, phase1, lambda, rng)
    }

    /// Payment computation at a fixed λ (the production path draws λ
    /// uniformly; tests pin it).
    pub fn implicit_payment_with_lambda(
        &self,
        agent: usize,
        report: TypeIdx,
        phase1: &Phase1Result,
        lambda: f64,
        rng: &mut RngStream,
    ) -> Result<PaymentSample> {
        let queries = Cell::new(0u64);
        let oracle = self.oracle(agent, &phase1.replicas, &phase1.surrogates, &queries);
        let (k2, kind2, _, _) = matching::draw_round(
            &oracle,
            phase1.position,
            &phase1.round_state,
            &self.params(phase1.gamma.gamma),
            true,
            lambda,
            self.config.backend,
            rng,
        )?;
        let s_prime = (phase1.meta_index, phase1.matched_normal);
        let s_second = (k2, kind2 == NodeKind::Normal);
        let constant = -subsidy_floor(self.config.delta, self.config.ell);
        let w1 = self.realized_weight(agent, report, &phase1.surrogates, s_prime, &queries, rng)?;
        let w2 = self.realized_weight(agent, report, &phase1.surrogates, s_second, &queries, rng)?;
        Ok(PaymentSample {
            amount: w1 - w2 - constant,
            lambda,
            mech_queries: queries.get(),
        })
    }

    /// `weight_i(t, s, t_{-i})`: 0 for a 0-surrogate; otherwise the exact
    /// interim weight (exact backend) or one sampled query (race backend).
    fn realized_weight(
        &self,
        agent: usize,
        report: TypeIdx,
        surrogates: &[TypeIdx],
        (k, normal): (usize, bool),
        queries: &Cell<u64>,
        rng: &mut RngStream,
    ) -> Result<f64> {
        if !normal {
            return Ok(0.0);
        }
        let s = surrogates[k];
        match &self.exact_w {
            Some(w) => Ok(w[agent][report][s]),
            None => {
                let (w, q) = weight_sample(
                    self.setting,
                    self.mech,
                    agent,
                    report,
                    s,
                    self.config.eta,
                    rng,
                )?;
                queries.set(queries.get() + q);
                Ok(w)
            }
        }
    }

    /// Full transformed mechanism on a bid profile: per-agent Phase 1 and
    /// implicit payment (disjoint streams), then one Phase-2 query of the
    /// input mechanism, ⊥-substituting the outcome for 0-matched agents.
    pub fn run_transformed(&self, bids: &[TypeIdx], rng: &mut RngStream) -> Result<TransformedRun> {
        let n = self.setting.num_agents();
        if bids.len() != n {
            return Err(Error::invalid("bid profile length mismatch"));
        }
        let mut phase1 = Vec::with_capacity(n);
        let mut payments1 = Vec::with_capacity(n);
        let mut queries = 0u64;
        for (i, &b) in bids.iter().enumerate() {
            let mut rng_p1 = rng.fork(2 * i as u64);
            let p1 = self.phase1_select(i, b, RecordMode::Slim, &mut rng_p1)?;
            let mut rng_pay = rng.fork(2 * i as u64 + 1);
            let pay = self.implicit_payment(i, b, &p1, &mut rng_pay)?;
            queries += p1.mech_queries + pay.mech_queries;
            phase1.push(p1);
            payments1.push(pay);
        }
        let s: Vec<TypeIdx> = phase1.iter().map(|p| p.surrogate_type).collect();
        let mut phase2_payments = vec![0.0; n];
        let mut rng_p2 = rng.fork(u64::MAX);
        let o = self.mech.query_into(&s, &mut rng_p2, &mut phase2_payments)?;
        queries += 1;
        let null_mask: Vec<bool> = phase1.iter().map(|p| !p.matched_normal).collect();
        let outcome = self.setting.outcomes.null_substitute(o, &null_mask)?;
        let agents = phase1
            .iter()
            .zip(&payments1)
            .enumerate()
            .map(|(i, (p1, pay))| AgentRun {
                surrogate: p1.surrogate_type,
                matched_normal: p1.matched_normal,
                phase1_payment: pay.amount,
                phase2_payment: if p1.matched_normal {
                    (1.0 - self.config.eta) * phase2_payments[i]
                } else {
                    0.0
                },
                gamma: p1.gamma.gamma,
            })
            .collect();
        Ok(TransformedRun {
            outcome,
            agents,
            mech_queries: queries,
        })
    }
}

impl<'a> Mechanism for DcTransform<'a> {
    fn num_agents(&self) -> usize {
        self.setting.num_agents()
    }

    fn query_into(
        &self,
        bids: &[TypeIdx],
        rng: &mut RngStream,
        payments: &mut [f64],
    ) -> Result<OutcomeIdx> {
        let run = self.run_transformed(bids, rng)?;
        for (i, a) in run.agents.iter().enumerate() {
            payments[i] = a.phase1_payment + a.phase2_payment;
        }
        Ok(run.outcome)
    }
}

/// Exact interim weight tables `W_i(r, s)` for every agent, by enumeration
/// over the input mechanism's table:
/// `W_i(r, s) = E[v_i(r, x(s, t_{-i}))] - (1-η) E[p_i(s, t_{-i})]`.
pub fn interim_weight_tables(
    setting: &Setting,
    mech: &dyn Mechanism,
    eta: f64,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let env = setting.env();
    let mut tables = Vec::with_capacity(setting.num_agents());
    for (i, agent) in setting.agents.iter().enumerate() {
        let m = agent.num_types();
        let mut table = vec![vec![0.0f64; m]; m];
        for s in 0..m {
            let per_replica: Vec<f64> = (0..m)
                .map(|r| {
                    exact_interim(&env, mech, i, s, |o, pay| {
                        agent.value(r, o) - (1.0 - eta) * pay
                    })
                })
                .collect::<Result<_>>()?;
            for (r, row) in table.iter_mut().enumerate() {
                let w = per_replica[r];
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&w) {
                    return Err(Error::invalid(format!(
                        "exact weight W_{}({}, {}) = {} outside [-1, 1]",
                        i, r, s, w
                    )));
                }
                row[s] = w.clamp(-1.0, 1.0);
            }
        }
        tables.push(table);
    }
    Ok(tables)
}
