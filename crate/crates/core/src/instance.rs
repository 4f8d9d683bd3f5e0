//! Instance files: the JSON schema for problem instances and its validator.
//!
//! ```json
//! {
//!   "version": 1,
//!   "agents": [
//!     { "types": ["H", "L"], "masses": [0.99, 0.01], "replica_masses": null }
//!   ],
//!   "outcomes": {
//!     "mode": "downward_closed",
//!     "list": ["win", "out"],
//!     "components": [["item"], [null]]
//!   },
//!   "valuations": [[[1.0, 0.0], [0.0, 0.0]]],
//!   "mechanism": {
//!     "table": [
//!       { "bids": ["H"], "rows": [{ "prob": 1.0, "outcome": "win", "payments": [1.0] }] },
//!       { "bids": ["L"], "rows": [{ "prob": 1.0, "outcome": "out", "payments": [-0.04] }] }
//!     ]
//!   }
//! }
//! ```
//!
//! `valuations[i][t][o]` is agent `i`'s value in `[0,1]` for outcome `o`
//! under type `t`. `replica_masses`, when present, is the report-side
//! distribution `D'` for transformations run in the `D != D'` regime.
//! `mechanism` is either a full table or `{ "plugin": "<name>", ... }`
//! naming a built-in mechanism (resolved by the caller).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::domain::{
    AgentTypeSpace, DiscreteDistribution, OutcomeMode, OutcomeSpace, TypeIdx,
};
use crate::error::{Error, Result};
use crate::mechanism::{Env, TableRow, TabularMechanism};

pub const INSTANCE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFile {
    #[serde(default = "default_version")]
    pub version: u32,
    pub agents: Vec<AgentFile>,
    pub outcomes: OutcomesFile,
    pub valuations: Vec<Vec<Vec<f64>>>,
    pub mechanism: MechanismFile,
}

fn default_version() -> u32 {
    INSTANCE_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentFile {
    pub types: Vec<String>,
    pub masses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica_masses: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomesFile {
    pub mode: OutcomeMode,
    pub list: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<Vec<Option<String>>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MechanismFile {
    Table {
        table: Vec<ProfileFile>,
    },
    Plugin {
        plugin: String,
        #[serde(default)]
        params: BTreeMap<String, f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileFile {
    pub bids: Vec<String>,
    pub rows: Vec<RowFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowFile {
    pub prob: f64,
    pub outcome: String,
    pub payments: Vec<f64>,
}

/// A validated problem environment: agents, outcomes, and distributions.
#[derive(Debug, Clone)]
pub struct Setting {
    pub agents: Vec<AgentTypeSpace>,
    pub outcomes: OutcomeSpace,
    /// Design-side distributions `D_i` (surrogates are drawn from these).
    pub dists: Vec<DiscreteDistribution>,
    /// Report-side distributions `D'_i`; `None` means `D' = D`.
    pub replica_dists: Option<Vec<DiscreteDistribution>>,
}

impl Setting {
    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn env(&self) -> Env<'_> {
        Env {
            agents: &self.agents,
            dists: &self.dists,
        }
    }

    /// Environment in which the transformed mechanism must be BIC: others'
    /// reports follow `D'`.
    pub fn replica_env(&self) -> Env<'_> {
        Env {
            agents: &self.agents,
            dists: self.replica_dists.as_deref().unwrap_or(&self.dists),
        }
    }

    pub fn replica_dist(&self, agent: usize) -> &DiscreteDistribution {
        match &self.replica_dists {
            Some(d) => &d[agent],
            None => &self.dists[agent],
        }
    }

    pub fn max_support(&self) -> usize {
        self.dists.iter().map(|d| d.support_size()).max().unwrap_or(0)
    }
}

/// A validated instance: the environment plus the mechanism specification.
#[derive(Debug, Clone)]
pub struct Instance {
    pub setting: Setting,
    pub mechanism: MechanismSpec,
}

#[derive(Debug, Clone)]
pub enum MechanismSpec {
    Table(TabularMechanism),
    Plugin {
        name: String,
        params: BTreeMap<String, f64>,
    },
}

impl InstanceFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(text)?;
        Ok(file)
    }

    /// Validate the file and build the typed instance.
    pub fn build(&self) -> Result<Instance> {
        if self.version != INSTANCE_VERSION {
            return Err(Error::invalid(format!(
                "instance version {} unsupported (expected {})",
                self.version, INSTANCE_VERSION
            )));
        }
        let n = self.agents.len();
        if n == 0 {
            return Err(Error::invalid("agents: at least one agent required"));
        }
        let outcomes = match self.outcomes.mode {
            OutcomeMode::General => {
                if self.outcomes.components.is_some() {
                    return Err(Error::invalid(
                        "outcomes.components: only valid in downward_closed mode",
                    ));
                }
                OutcomeSpace::general(self.outcomes.list.clone())?
            }
            OutcomeMode::DownwardClosed => {
                let comps = self.outcomes.components.clone().ok_or_else(|| {
                    Error::invalid("outcomes.components: required in downward_closed mode")
                })?;
                let space = OutcomeSpace::downward_closed(self.outcomes.list.clone(), comps)?;
                if space.agents() != Some(n) {
                    return Err(Error::invalid(format!(
                        "outcomes.components: component vectors have {} slots, {} agents declared",
                        space.agents().unwrap_or(0),
                        n
                    )));
                }
                space
            }
        };
        if self.valuations.len() != n {
            return Err(Error::invalid(format!(
                "valuations: expected {} agent entries, found {}",
                n,
                self.valuations.len()
            )));
        }
        let mut agents = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        let mut replica_dists = Vec::new();
        let mut any_replica = false;
        for (i, a) in self.agents.iter().enumerate() {
            let space = AgentTypeSpace::new(
                i,
                a.types.clone(),
                self.valuations[i].clone(),
                &outcomes,
            )
            .map_err(|e| Error::invalid(format!("agents[{}]: {}", i, e)))?;
            if a.masses.len() != a.types.len() {
                return Err(Error::invalid(format!(
                    "agents[{}].masses: expected {} entries",
                    i,
                    a.types.len()
                )));
            }
            dists.push(
                DiscreteDistribution::from_masses(&a.masses)
                    .map_err(|e| Error::invalid(format!("agents[{}].masses: {}", i, e)))?,
            );
            if let Some(rm) = &a.replica_masses {
                if rm.len() != a.types.len() {
                    return Err(Error::invalid(format!(
                        "agents[{}].replica_masses: expected {} entries",
                        i,
                        a.types.len()
                    )));
                }
                replica_dists.push(DiscreteDistribution::from_masses(rm).map_err(|e| {
                    Error::invalid(format!("agents[{}].replica_masses: {}", i, e))
                })?);
                any_replica = true;
            } else {
                replica_dists.push(
                    DiscreteDistribution::from_masses(&a.masses)
                        .map_err(|e| Error::invalid(format!("agents[{}].masses: {}", i, e)))?,
                );
            }
            agents.push(space);
        }
        let setting = Setting {
            agents,
            outcomes,
            dists,
            replica_dists: if any_replica { Some(replica_dists) } else { None },
        };
        let mechanism = match &self.mechanism {
            MechanismFile::Plugin { plugin, params } => MechanismSpec::Plugin {
                name: plugin.clone(),
                params: params.clone(),
            },
            MechanismFile::Table { table } => {
                MechanismSpec::Table(build_table(&setting, table)?)
            }
        };
        Ok(Instance { setting, mechanism })
    }
}

fn build_table(setting: &Setting, table: &[ProfileFile]) -> Result<TabularMechanism> {
    let n = setting.num_agents();
    let dims: Vec<usize> = setting.agents.iter().map(|a| a.num_types()).collect();
    let profiles: usize = dims.iter().product();
    let mut rows: Vec<Option<Vec<TableRow>>> = vec![None; profiles];
    let mut strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    for (pi, prof) in table.iter().enumerate() {
        if prof.bids.len() != n {
            return Err(Error::invalid(format!(
                "mechanism.table[{}].bids: expected {} entries",
                pi, n
            )));
        }
        let mut index = 0usize;
        for (i, label) in prof.bids.iter().enumerate() {
            let t: TypeIdx = setting.agents[i].type_index(label).ok_or_else(|| {
                Error::invalid(format!(
                    "mechanism.table[{}].bids[{}]: unknown type '{}'",
                    pi, i, label
                ))
            })?;
            index += t * strides[i];
        }
        if rows[index].is_some() {
            return Err(Error::invalid(format!(
                "mechanism.table[{}]: duplicate bid profile {:?}",
                pi, prof.bids
            )));
        }
        let mut mixture = Vec::with_capacity(prof.rows.len());
        for (ri, row) in prof.rows.iter().enumerate() {
            let outcome = setting.outcomes.index_of(&row.outcome).ok_or_else(|| {
                Error::invalid(format!(
                    "mechanism.table[{}].rows[{}]: unknown outcome '{}'",
                    pi, ri, row.outcome
                ))
            })?;
            mixture.push(TableRow {
                prob: row.prob,
                outcome,
                payments: row.payments.clone(),
            });
        }
        rows[index] = Some(mixture);
    }
    if let Some(missing) = rows.iter().position(Option::is_none) {
        return Err(Error::invalid(format!(
            "mechanism.table: bid profile #{} missing (table must cover every profile)",
            missing
        )));
    }
    TabularMechanism::new(dims, rows.into_iter().map(Option::unwrap).collect())
}
