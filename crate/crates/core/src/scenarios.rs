//! Prebuilt regression scenarios and desk-scale fixtures.
//!
//! `example1` is the two-type instance whose always-perfect-matching
//! transform collapses to near-zero revenue; `example2` gives two weight
//! sources with equal means but different laws (the estimate-then-drop
//! trap); `example3` is the two-type instance where arbitrary optimal duals
//! price a type at about -1/2.

use crate::bernoulli::{ConstCoin, TwoPointCoin};
use crate::domain::{
    AgentTypeSpace, DiscreteDistribution, OutcomeSpace, TypeIdx,
};
use crate::error::Result;
use crate::instance::Setting;
use crate::mechanism::{TableRow, TabularMechanism};
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub setting: Setting,
    pub mechanism: TabularMechanism,
}

fn must<T>(r: Result<T>) -> T {
    r.expect("scenario construction is infallible")
}

/// Single agent, types `H` (mass `1-σ`) and `L` (mass `σ`), outcomes
/// `{win, out}` (downward-closed). Reporting `H` wins the item at price 1;
/// reporting `L` exits with a subsidy `ε`. The mechanism is ε-BIC and IR
/// with revenue `1 - σ - σε`.
pub fn example1(sigma: f64, eps: f64) -> Scenario {
    scenario_example1(sigma, eps, None)
}

/// `example1` with an explicit report-side distribution `D'`.
pub fn example1_with_replicas(sigma: f64, eps: f64, replica_masses: &[f64]) -> Scenario {
    scenario_example1(sigma, eps, Some(replica_masses.to_vec()))
}

fn scenario_example1(sigma: f64, eps: f64, replicas: Option<Vec<f64>>) -> Scenario {
    let outcomes = must(OutcomeSpace::downward_closed(
        vec!["win".into(), "out".into()],
        vec![vec![Some("item".into())], vec![None]],
    ));
    let agent = must(AgentTypeSpace::new(
        0,
        vec!["H".into(), "L".into()],
        vec![vec![1.0, 0.0], vec![0.0, 0.0]],
        &outcomes,
    ));
    let dist = must(DiscreteDistribution::from_masses(&[1.0 - sigma, sigma]));
    let replica_dists = replicas.map(|m| vec![must(DiscreteDistribution::from_masses(&m))]);
    let mech = must(TabularMechanism::new(
        vec![2],
        vec![
            vec![TableRow {
                prob: 1.0,
                outcome: 0,
                payments: vec![1.0],
            }],
            vec![TableRow {
                prob: 1.0,
                outcome: 1,
                payments: vec![-eps],
            }],
        ],
    ));
    Scenario {
        name: format!("example1(sigma={}, eps={})", sigma, eps),
        setting: Setting {
            agents: vec![agent],
            outcomes,
            dists: vec![dist],
            replica_dists,
        },
        mechanism: mech,
    }
}

/// Revenue upper bound `(1-σ)(1-(1-σ)^ℓ)` of any BIC+IR perfect-matching
/// transform on `example1`.
pub fn example1_baseline_bound(sigma: f64, ell: usize) -> f64 {
    (1.0 - sigma) * (1.0 - (1.0 - sigma).powi(ell as i32))
}

/// Two weight sources with the same mean `σ` but different laws: the
/// two-point source takes value 1 with probability `2σ` and
/// `-σ/(1-2σ)` otherwise; the constant source is `σ` surely. A
/// maximal-in-range algorithm must treat them identically; estimating and
/// dropping negative empirical means does not.
pub fn example2_oracles(sigma: f64) -> (TwoPointCoin, ConstCoin) {
    assert!(sigma > 0.0 && sigma < 0.5);
    (
        TwoPointCoin {
            hi: 1.0,
            lo: -sigma / (1.0 - 2.0 * sigma),
            p_hi: 2.0 * sigma,
        },
        ConstCoin { value: sigma },
    )
}

/// Single agent, types `L` (mass `p`) and `H` (mass `1-p`), general
/// outcomes `{oL, oH}` with matched valuations. The mechanism returns the
/// reported type's outcome at price 1/2: exactly BIC and IR, utility
/// matrix `W = [[1/2, -1/2], [-1/2, 1/2]]`.
pub fn example3(p: f64) -> Scenario {
    let outcomes = must(OutcomeSpace::general(vec!["oL".into(), "oH".into()]));
    let agent = must(AgentTypeSpace::new(
        0,
        vec!["L".into(), "H".into()],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        &outcomes,
    ));
    let dist = must(DiscreteDistribution::from_masses(&[p, 1.0 - p]));
    let mech = must(TabularMechanism::new(
        vec![2],
        vec![
            vec![TableRow {
                prob: 1.0,
                outcome: 0,
                payments: vec![0.5],
            }],
            vec![TableRow {
                prob: 1.0,
                outcome: 1,
                payments: vec![0.5],
            }],
        ],
    ));
    Scenario {
        name: format!("example3(p={})", p),
        setting: Setting {
            agents: vec![agent],
            outcomes,
            dists: vec![dist],
            replica_dists: None,
        },
        mechanism: mech,
    }
}

/// Trivial fixture whose mechanism never charges anything.
pub fn zero_payment_mechanism() -> Scenario {
    let outcomes = must(OutcomeSpace::general(vec!["o".into()]));
    let agent = must(AgentTypeSpace::new(
        0,
        vec!["t".into()],
        vec![vec![0.5]],
        &outcomes,
    ));
    let dist = must(DiscreteDistribution::from_masses(&[1.0]));
    let mech = must(TabularMechanism::new(
        vec![1],
        vec![vec![TableRow {
            prob: 1.0,
            outcome: 0,
            payments: vec![0.0],
        }]],
    ));
    Scenario {
        name: "zero-payment".into(),
        setting: Setting {
            agents: vec![agent],
            outcomes,
            dists: vec![dist],
            replica_dists: None,
        },
        mechanism: mech,
    }
}

/// Clone of a setting with every agent's distribution replaced by a point
/// mass at `t`.
pub fn point_mass_variant(setting: &Setting, t: TypeIdx) -> Setting {
    Setting {
        agents: setting.agents.clone(),
        outcomes: setting.outcomes.clone(),
        dists: setting
            .agents
            .iter()
            .map(|_| DiscreteDistribution::point_mass(t))
            .collect(),
        replica_dists: None,
    }
}

/// Desk instances for the downward-closed certification suite: small type
/// spaces, one input mechanism that is far from BIC, one running in the
/// `D != D'` regime.
pub fn desk_dc_instances() -> Vec<Scenario> {
    vec![
        example1(0.3, 0.1),
        first_price_like(),
        two_agent_component_market(),
        menu_four_types(),
        example1_with_replicas(0.25, 0.08, &[0.5, 0.5]),
    ]
}

/// NOT ε-BIC for any small ε: pay-your-bid pricing makes underreporting
/// profitable (regret ≈ 0.63). Still IR.
fn first_price_like() -> Scenario {
    let outcomes = must(OutcomeSpace::downward_closed(
        vec!["win".into(), "out".into()],
        vec![vec![Some("item".into())], vec![None]],
    ));
    let values = [1.0, 0.6, 0.3];
    let agent = must(AgentTypeSpace::new(
        0,
        vec!["a".into(), "b".into(), "c".into()],
        values.iter().map(|&v| vec![v, 0.0]).collect(),
        &outcomes,
    ));
    let dist = must(DiscreteDistribution::from_masses(&[0.5, 0.3, 0.2]));
    let rows = values
        .iter()
        .map(|&v| {
            vec![TableRow {
                prob: 1.0,
                outcome: 0,
                payments: vec![0.9 * v],
            }]
        })
        .collect();
    let mech = must(TabularMechanism::new(vec![3], rows));
    Scenario {
        name: "first-price-like (not eps-BIC)".into(),
        setting: Setting {
            agents: vec![agent],
            outcomes,
            dists: vec![dist],
            replica_dists: None,
        },
        mechanism: mech,
    }
}

/// Two agents, two types each, per-agent components with randomized
/// allocation. Exactly BIC, IR.
fn two_agent_component_market() -> Scenario {
    let labels = vec![
        "both".into(),
        "first".into(),
        "second".into(),
        "none".into(),
    ];
    let components = vec![
        vec![Some("x".into()), Some("y".into())],
        vec![Some("x".into()), None],
        vec![None, Some("y".into())],
        vec![None, None],
    ];
    let outcomes = must(OutcomeSpace::downward_closed(labels, components));
    let mk_agent = |i: usize| {
        let hi = 0.9;
        let lo = 0.35;
        let own = |o: usize| matches!((i, o), (0, 0) | (0, 1) | (1, 0) | (1, 2));
        let valuation = vec![
            (0..4).map(|o| if own(o) { hi } else { 0.0 }).collect(),
            (0..4).map(|o| if own(o) { lo } else { 0.0 }).collect(),
        ];
        must(AgentTypeSpace::new(
            i,
            vec!["Hi".into(), "Lo".into()],
            valuation,
            &outcomes,
        ))
    };
    let agents = vec![mk_agent(0), mk_agent(1)];
    let dists = vec![
        must(DiscreteDistribution::from_masses(&[0.6, 0.4])),
        must(DiscreteDistribution::from_masses(&[0.5, 0.5])),
    ];
    // grant a component with prob 0.8 iff the report is Hi, price 0.55
    let mech = must(TabularMechanism::from_fn(vec![2, 2], |bids| {
        let hi0 = bids[0] == 0;
        let hi1 = bids[1] == 0;
        let outcome = |g0: bool, g1: bool| match (g0, g1) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        let mut rows = Vec::new();
        for (g0, p0) in [(hi0, 0.8), (false, 0.2)] {
            for (g1, p1) in [(hi1, 0.8), (false, 0.2)] {
                let g0 = g0 && hi0;
                let g1 = g1 && hi1;
                rows.push(TableRow {
                    prob: p0 * p1,
                    outcome: outcome(g0, g1),
                    payments: vec![
                        if g0 { 0.55 } else { 0.0 },
                        if g1 { 0.55 } else { 0.0 },
                    ],
                });
            }
        }
        rows
    }));
    Scenario {
        name: "two-agent component market".into(),
        setting: Setting {
            agents,
            outcomes,
            dists,
            replica_dists: None,
        },
        mechanism: mech,
    }
}

/// Four-type randomized menu, ε-BIC with measured regret 0.1, IR.
fn menu_four_types() -> Scenario {
    let outcomes = must(OutcomeSpace::downward_closed(
        vec!["win".into(), "out".into()],
        vec![vec![Some("item".into())], vec![None]],
    ));
    let values = [1.0, 0.75, 0.5, 0.25];
    let allocs = [1.0, 0.8, 0.6, 0.4];
    let prices = [0.7, 0.5, 0.32, 0.18];
    let agent = must(AgentTypeSpace::new(
        0,
        (0..4).map(|i| format!("t{}", i + 1)).collect(),
        values.iter().map(|&v| vec![v, 0.0]).collect(),
        &outcomes,
    ));
    let dist = must(DiscreteDistribution::from_masses(&[0.25, 0.25, 0.25, 0.25]));
    let rows = (0..4)
        .map(|k| {
            let mut mix = vec![TableRow {
                prob: allocs[k],
                outcome: 0,
                payments: vec![prices[k]],
            }];
            if allocs[k] < 1.0 {
                mix.push(TableRow {
                    prob: 1.0 - allocs[k],
                    outcome: 1,
                    payments: vec![0.0],
                });
            }
            mix
        })
        .collect();
    let mech = must(TabularMechanism::new(vec![4], rows));
    Scenario {
        name: "four-type menu (0.1-BIC)".into(),
        setting: Setting {
            agents: vec![agent],
            outcomes,
            dists: vec![dist],
            replica_dists: None,
        },
        mechanism: mech,
    }
}

/// Random tabular instance on a general outcome space. Payments are a
/// random fraction of the reported type's realized value, so the mechanism
/// is IR with utilities (hence assignment weights) in `[-1, 1]`; its
/// ε-BIC slack is whatever `check_eps_bic_ir` measures.
pub fn random_general_scenario(
    n: usize,
    max_types: usize,
    n_outcomes: usize,
    rng: &mut RngStream,
) -> Scenario {
    assert!(n >= 1 && max_types >= 2 && n_outcomes >= 2);
    let labels: Vec<String> = (0..n_outcomes).map(|o| format!("o{}", o)).collect();
    let outcomes = must(OutcomeSpace::general(labels));
    let mut agents = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    for i in 0..n {
        let m = 2 + rng.below(max_types - 1);
        let valuation: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n_outcomes).map(|_| rng.f64()).collect())
            .collect();
        agents.push(must(AgentTypeSpace::new(
            i,
            (0..m).map(|t| format!("t{}", t)).collect(),
            valuation,
            &outcomes,
        )));
        let mut masses: Vec<f64> = (0..m).map(|_| rng.f64() + 0.1).collect();
        let s: f64 = masses.iter().sum();
        for x in masses.iter_mut() {
            *x /= s;
        }
        // exact renormalization to keep the validator happy
        let s2: f64 = masses.iter().sum();
        masses[0] += 1.0 - s2;
        dists.push(must(DiscreteDistribution::from_masses(&masses)));
    }
    let dims: Vec<usize> = agents.iter().map(|a| a.num_types()).collect();
    // pre-draw randomized rows per profile
    let profiles: usize = dims.iter().product();
    let mut tables = Vec::with_capacity(profiles);
    {
        let mut bids = vec![0usize; n];
        for _ in 0..profiles {
            let o1 = rng.below(n_outcomes);
            let o2 = rng.below(n_outcomes);
            let p1 = 0.3 + 0.4 * rng.f64();
            let betas: Vec<f64> = (0..n).map(|_| 0.1 + 0.8 * rng.f64()).collect();
            let pay = |o: usize, bids: &[usize]| -> Vec<f64> {
                (0..n)
                    .map(|i| betas[i] * agents[i].value(bids[i], o))
                    .collect()
            };
            tables.push(vec![
                TableRow {
                    prob: p1,
                    outcome: o1,
                    payments: pay(o1, &bids),
                },
                TableRow {
                    prob: 1.0 - p1,
                    outcome: o2,
                    payments: pay(o2, &bids),
                },
            ]);
            for i in (0..n).rev() {
                bids[i] += 1;
                if bids[i] < dims[i] {
                    break;
                }
                bids[i] = 0;
            }
        }
    }
    let mech = must(TabularMechanism::new(dims, tables));
    Scenario {
        name: format!("random-general(n={})", n),
        setting: Setting {
            agents,
            outcomes,
            dists,
            replica_dists: None,
        },
        mechanism: mech,
    }
}
