//! Process models: activities, resources, eligibility, exponential rates and
//! routing, plus the built-in two-activity scenarios and sequential composition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("rate for {what} must be positive and finite, got {value}")]
    NonPositiveRate { what: String, value: f64 },
    #[error("missing rate parameter: {0}")]
    MissingRate(String),
    #[error("unsatisfiable topology: {0}")]
    Topology(String),
    #[error("identifier collision: `{0}`")]
    Collision(String),
    #[error("cannot compose an empty list of models")]
    EmptyComposition,
    #[error("config error: {0}")]
    Config(String),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
}

/// What happens to a case token once an instance of an activity completes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    /// The case leaves the process.
    Complete,
    /// One new instance of the given activity.
    Successor(usize),
    /// One new instance of each given activity, executed in parallel.
    Split(Vec<usize>),
    /// Wait until no other branch of the case is outstanding, then continue with
    /// `then` (an empty list completes the case).
    Join { then: Vec<usize> },
}

impl Routing {
    pub fn targets(&self) -> &[usize] {
        match self {
            Routing::Complete => &[],
            Routing::Successor(a) => std::slice::from_ref(a),
            Routing::Split(v) => v,
            Routing::Join { then } => then,
        }
    }
}

/// A validated, immutable process model.
///
/// Activities and resources are kept sorted by identifier, so the index order
/// (and therefore the observation and action layout) does not depend on the
/// order in which they were declared.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProcessModel {
    name: String,
    activities: Vec<String>,
    resources: Vec<String>,
    /// `rates[resource][activity]`, `None` when not eligible.
    rates: Vec<Vec<Option<f64>>>,
    arrival_rate: f64,
    routing: Vec<Routing>,
    initial: Vec<usize>,
    #[serde(skip)]
    assignments: Vec<(usize, usize)>,
}

/// Declarative form of a model, keyed by identifiers. This is also the
/// `[model]` part of the config file schema.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModelDecl {
    pub name: String,
    pub arrival_rate: f64,
    pub initial: Vec<String>,
    #[serde(rename = "activity")]
    pub activities: Vec<ActivityDecl>,
    #[serde(rename = "resource", default)]
    pub resources: Vec<String>,
    #[serde(rename = "service")]
    pub service: Vec<ServiceDecl>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActivityDecl {
    pub name: String,
    pub routing: RoutingDecl,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RoutingDecl {
    Complete,
    Successor { to: String },
    Split { to: Vec<String> },
    Join {
        #[serde(default)]
        then: Vec<String>,
    },
}

/// One eligible (resource, activity) pair with its exponential service rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ServiceDecl {
    pub resource: String,
    pub activity: String,
    pub rate: f64,
}

fn check_rate(what: impl Into<String>, value: f64) -> Result<f64, ModelError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ModelError::NonPositiveRate {
            what: what.into(),
            value,
        })
    }
}

impl ProcessModel {
    /// Validates a declaration and canonicalizes its index order.
    pub fn from_decl(decl: &ModelDecl) -> Result<Self, ModelError> {
        check_rate("arrival", decl.arrival_rate)?;

        let activity_set: BTreeSet<&str> =
            decl.activities.iter().map(|a| a.name.as_str()).collect();
        if activity_set.len() != decl.activities.len() {
            return Err(ModelError::Collision("duplicate activity".into()));
        }
        if activity_set.is_empty() {
            return Err(ModelError::Topology("model has no activities".into()));
        }
        let mut resource_set: BTreeSet<&str> = decl.resources.iter().map(String::as_str).collect();
        if resource_set.len() != decl.resources.len() {
            return Err(ModelError::Collision("duplicate resource".into()));
        }
        for s in &decl.service {
            resource_set.insert(s.resource.as_str());
        }
        if let Some(clash) = activity_set.intersection(&resource_set).next() {
            return Err(ModelError::Collision((*clash).to_string()));
        }

        let activities: Vec<String> = activity_set.iter().map(|s| s.to_string()).collect();
        let resources: Vec<String> = resource_set.iter().map(|s| s.to_string()).collect();
        let act_idx: BTreeMap<&str, usize> = activities
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_str(), i))
            .collect();
        let res_idx: BTreeMap<&str, usize> = resources
            .iter()
            .enumerate()
            .map(|(i, r)| (r.as_str(), i))
            .collect();
        let lookup_act = |name: &str| {
            act_idx
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::Topology(format!("unknown activity `{name}`")))
        };

        let mut rates = vec![vec![None; activities.len()]; resources.len()];
        for s in &decl.service {
            let a = lookup_act(&s.activity)?;
            let r = res_idx[s.resource.as_str()];
            let rate = check_rate(format!("({}, {})", s.resource, s.activity), s.rate)?;
            if rates[r][a].replace(rate).is_some() {
                return Err(ModelError::Collision(format!(
                    "service ({}, {}) declared twice",
                    s.resource, s.activity
                )));
            }
        }

        let mut routing = vec![Routing::Complete; activities.len()];
        for decl_act in &decl.activities {
            let a = act_idx[decl_act.name.as_str()];
            routing[a] = match &decl_act.routing {
                RoutingDecl::Complete => Routing::Complete,
                RoutingDecl::Successor { to } => Routing::Successor(lookup_act(to)?),
                RoutingDecl::Split { to } => {
                    if to.len() < 2 {
                        return Err(ModelError::Topology(format!(
                            "split after `{}` needs at least two branches",
                            decl_act.name
                        )));
                    }
                    Routing::Split(to.iter().map(|t| lookup_act(t)).collect::<Result<_, _>>()?)
                }
                RoutingDecl::Join { then } => Routing::Join {
                    then: then.iter().map(|t| lookup_act(t)).collect::<Result<_, _>>()?,
                },
            };
        }
        let mut initial: Vec<usize> = decl
            .initial
            .iter()
            .map(|t| lookup_act(t))
            .collect::<Result<_, _>>()?;
        initial.sort_unstable();
        initial.dedup();

        let model = ProcessModel {
            name: decl.name.clone(),
            activities,
            resources,
            rates,
            arrival_rate: decl.arrival_rate,
            routing,
            initial,
            assignments: Vec::new(),
        };
        model.finish()
    }

    fn finish(mut self) -> Result<Self, ModelError> {
        self.validate()?;
        self.assignments = (0..self.activities.len())
            .flat_map(|a| {
                let rates = &self.rates;
                (0..self.resources.len())
                    .filter(move |&r| rates[r][a].is_some())
                    .map(move |r| (r, a))
            })
            .collect();
        Ok(self)
    }

    fn validate(&self) -> Result<(), ModelError> {
        for (a, name) in self.activities.iter().enumerate() {
            if !(0..self.resources.len()).any(|r| self.rates[r][a].is_some()) {
                return Err(ModelError::Topology(format!(
                    "activity `{name}` has no eligible resource"
                )));
            }
        }
        if self.initial.is_empty() {
            return Err(ModelError::Topology("no initial activity".into()));
        }

        // Acyclicity by depth-first search with colouring.
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        fn visit(m: &ProcessModel, a: usize, marks: &mut [Mark]) -> Result<(), ModelError> {
            match marks[a] {
                Mark::Done => return Ok(()),
                Mark::Open => {
                    return Err(ModelError::Topology(format!(
                        "routing cycle through `{}`",
                        m.activities[a]
                    )))
                }
                Mark::New => {}
            }
            marks[a] = Mark::Open;
            for &t in m.routing[a].targets() {
                visit(m, t, marks)?;
            }
            marks[a] = Mark::Done;
            Ok(())
        }
        let mut marks = vec![Mark::New; self.activities.len()];
        for a in 0..self.activities.len() {
            visit(self, a, &mut marks)?;
        }

        // Inside a parallel region every branch must end in a join; a plain
        // case-complete there would leave sibling branches orphaned.
        let mut split_targets: Vec<usize> = Vec::new();
        if self.initial.len() > 1 {
            split_targets.extend(&self.initial);
        }
        for r in &self.routing {
            if let Routing::Split(v) = r {
                split_targets.extend(v);
            }
        }
        for &start in &split_targets {
            let mut stack = vec![start];
            let mut seen = BTreeSet::new();
            while let Some(a) = stack.pop() {
                if !seen.insert(a) {
                    continue;
                }
                match &self.routing[a] {
                    Routing::Complete => {
                        return Err(ModelError::Topology(format!(
                            "parallel branch through `{}` completes the case without a join",
                            self.activities[a]
                        )))
                    }
                    Routing::Join { .. } => {}
                    r => stack.extend(r.targets()),
                }
            }
        }
        Ok(())
    }

    /// Smallest legal model: one activity, one resource.
    pub fn mm1(arrival_rate: f64, service_rate: f64) -> Result<Self, ModelError> {
        Self::from_decl(&ModelDecl {
            name: "custom-mm1".into(),
            arrival_rate,
            initial: vec!["A".into()],
            activities: vec![ActivityDecl {
                name: "A".into(),
                routing: RoutingDecl::Complete,
            }],
            resources: vec!["r1".into()],
            service: vec![ServiceDecl {
                resource: "r1".into(),
                activity: "A".into(),
                rate: service_rate,
            }],
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn activities(&self) -> &[String] {
        &self.activities
    }
    pub fn resources(&self) -> &[String] {
        &self.resources
    }
    pub fn num_activities(&self) -> usize {
        self.activities.len()
    }
    pub fn num_resources(&self) -> usize {
        self.resources.len()
    }
    pub fn arrival_rate(&self) -> f64 {
        self.arrival_rate
    }
    pub fn routing(&self, activity: usize) -> &Routing {
        &self.routing[activity]
    }
    pub fn initial_activities(&self) -> &[usize] {
        &self.initial
    }

    /// Service rate of `resource` on `activity`, if eligible.
    pub fn rate(&self, resource: usize, activity: usize) -> Option<f64> {
        self.rates[resource][activity]
    }

    pub fn is_eligible(&self, resource: usize, activity: usize) -> bool {
        self.rates[resource][activity].is_some()
    }

    /// Eligible resources of an activity, in index order.
    pub fn eligible_resources(&self, activity: usize) -> Vec<usize> {
        (0..self.resources.len())
            .filter(|&r| self.rates[r][activity].is_some())
            .collect()
    }

    /// Activities a resource may serve, in index order.
    pub fn eligible_activities(&self, resource: usize) -> Vec<usize> {
        (0..self.activities.len())
            .filter(|&a| self.rates[resource][a].is_some())
            .collect()
    }

    /// The allowed assignments, activity-major then resource. Position in this
    /// list is the action index; postpone is `len()`.
    pub fn allowed_assignments(&self) -> &[(usize, usize)] {
        &self.assignments
    }

    pub fn num_actions(&self) -> usize {
        self.assignments.len() + 1
    }

    pub fn postpone_index(&self) -> usize {
        self.assignments.len()
    }

    pub fn assignment_index(&self, resource: usize, activity: usize) -> Option<usize> {
        self.assignments
            .iter()
            .position(|&(r, a)| r == resource && a == activity)
    }

    pub fn activity_index(&self, name: &str) -> Option<usize> {
        self.activities.iter().position(|a| a == name)
    }

    pub fn resource_index(&self, name: &str) -> Option<usize> {
        self.resources.iter().position(|r| r == name)
    }

    /// Largest total event rate over all execution states: arrivals plus
    /// every resource busy on its fastest activity.
    pub fn max_total_rate(&self) -> f64 {
        self.arrival_rate
            + self
                .rates
                .iter()
                .map(|row| row.iter().flatten().copied().fold(0.0, f64::max))
                .sum::<f64>()
    }

    /// Number of fan-out points: the arrival itself when it instantiates
    /// several activities, plus every split routing.
    pub fn split_count(&self) -> usize {
        usize::from(self.initial.len() > 1)
            + self
                .routing
                .iter()
                .filter(|r| matches!(r, Routing::Split(_)))
                .count()
    }

    /// Number of distinct join points (joins are grouped by continuation).
    pub fn join_count(&self) -> usize {
        self.routing
            .iter()
            .filter_map(|r| match r {
                Routing::Join { then } => Some(then.clone()),
                _ => None,
            })
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Back to declarative form (identifier keyed).
    pub fn to_decl(&self) -> ModelDecl {
        let name_of = |v: &[usize]| v.iter().map(|&a| self.activities[a].clone()).collect();
        ModelDecl {
            name: self.name.clone(),
            arrival_rate: self.arrival_rate,
            initial: name_of(&self.initial),
            activities: self
                .activities
                .iter()
                .enumerate()
                .map(|(a, name)| ActivityDecl {
                    name: name.clone(),
                    routing: match &self.routing[a] {
                        Routing::Complete => RoutingDecl::Complete,
                        Routing::Successor(t) => RoutingDecl::Successor {
                            to: self.activities[*t].clone(),
                        },
                        Routing::Split(v) => RoutingDecl::Split { to: name_of(v) },
                        Routing::Join { then } => RoutingDecl::Join { then: name_of(then) },
                    },
                })
                .collect(),
            resources: self.resources.clone(),
            service: self
                .assignments
                .iter()
                .map(|&(r, a)| ServiceDecl {
                    resource: self.resources[r].clone(),
                    activity: self.activities[a].clone(),
                    rate: self.rates[r][a].unwrap_or_default(),
                })
                .collect(),
        }
    }

    /// Content hash of the model (identifiers, rates, routing).
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("model serializes");
        let digest = Sha256::digest(&json);
        hex16(&digest)
    }

    /// Hash of the observation/action layout: resources, assignments and
    /// activities by identifier.
    pub fn layout_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.resources {
            h.update(b"r:");
            h.update(r.as_bytes());
            h.update([0]);
        }
        for &(r, a) in &self.assignments {
            h.update(b"d:");
            h.update(self.resources[r].as_bytes());
            h.update([1]);
            h.update(self.activities[a].as_bytes());
            h.update([0]);
        }
        for a in &self.activities {
            h.update(b"a:");
            h.update(a.as_bytes());
            h.update([0]);
        }
        hex16(&h.finalize())
    }

    fn namespaced(&self, stage: usize) -> ModelDecl {
        let mut decl = self.to_decl();
        let ns = |s: &str| format!("s{stage}.{s}");
        for a in &mut decl.activities {
            a.name = ns(&a.name);
            a.routing = match &a.routing {
                RoutingDecl::Complete => RoutingDecl::Complete,
                RoutingDecl::Successor { to } => RoutingDecl::Successor { to: ns(to) },
                RoutingDecl::Split { to } => RoutingDecl::Split {
                    to: to.iter().map(|t| ns(t)).collect(),
                },
                RoutingDecl::Join { then } => RoutingDecl::Join {
                    then: then.iter().map(|t| ns(t)).collect(),
                },
            };
        }
        decl.initial = decl.initial.iter().map(|s| ns(s)).collect();
        decl.resources = decl.resources.iter().map(|s| ns(s)).collect();
        for s in &mut decl.service {
            s.resource = ns(&s.resource);
            s.activity = ns(&s.activity);
        }
        decl
    }
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl fmt::Display for ProcessModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} activities, {} resources, {} assignments, lambda={})",
            self.name,
            self.activities.len(),
            self.resources.len(),
            self.assignments.len(),
            self.arrival_rate
        )
    }
}

/// Chains models so that the departures of stage `i` are the arrivals of
/// stage `i + 1`. Identifiers are prefixed with `s<i>.` (1-based); only the
/// first stage keeps its external arrival rate.
pub fn compose(models: &[ProcessModel]) -> Result<ProcessModel, ModelError> {
    match models {
        [] => return Err(ModelError::EmptyComposition),
        [single] => return Ok(single.clone()),
        _ => {}
    }
    let stages: Vec<ModelDecl> = models
        .iter()
        .enumerate()
        .map(|(i, m)| m.namespaced(i + 1))
        .collect();
    let mut out = ModelDecl {
        name: models
            .iter()
            .map(|m| m.name.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        arrival_rate: models[0].arrival_rate,
        initial: stages[0].initial.clone(),
        ..Default::default()
    };
    let mut seen = BTreeSet::new();
    for (i, stage) in stages.iter().enumerate() {
        let next = stages.get(i + 1).map(|s| s.initial.clone());
        for act in &stage.activities {
            if !seen.insert(act.name.clone()) {
                return Err(ModelError::Collision(act.name.clone()));
            }
            let routing = match (&act.routing, &next) {
                (RoutingDecl::Complete, Some(n)) if n.len() == 1 => {
                    RoutingDecl::Successor { to: n[0].clone() }
                }
                (RoutingDecl::Complete, Some(n)) => RoutingDecl::Split { to: n.clone() },
                (RoutingDecl::Join { then }, Some(n)) if then.is_empty() => {
                    RoutingDecl::Join { then: n.clone() }
                }
                (r, _) => r.clone(),
            };
            out.activities.push(ActivityDecl {
                name: act.name.clone(),
                routing,
            });
        }
        for r in &stage.resources {
            if !seen.insert(r.clone()) {
                return Err(ModelError::Collision(r.clone()));
            }
            out.resources.push(r.clone());
        }
        out.service.extend(stage.service.iter().cloned());
    }
    ProcessModel::from_decl(&out)
}

/// The six built-in two-activity, two-resource scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    LowUtilization,
    HighUtilization,
    SlowServer,
    SlowDownstream,
    NSystem,
    Parallel,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::LowUtilization,
        ScenarioKind::HighUtilization,
        ScenarioKind::SlowServer,
        ScenarioKind::SlowDownstream,
        ScenarioKind::NSystem,
        ScenarioKind::Parallel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::LowUtilization => "low-utilization",
            ScenarioKind::HighUtilization => "high-utilization",
            ScenarioKind::SlowServer => "slow-server",
            ScenarioKind::SlowDownstream => "slow-downstream",
            ScenarioKind::NSystem => "n-system",
            ScenarioKind::Parallel => "parallel",
        }
    }

    pub fn parse(name: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| ModelError::UnknownScenario(name.to_string()))
    }

    /// Eligible (resource, activity) pairs of the topology.
    pub fn eligibility(self) -> &'static [(&'static str, &'static str)] {
        match self {
            ScenarioKind::NSystem => &[("r1", "A"), ("r2", "A"), ("r2", "B")],
            _ => &[("r1", "A"), ("r1", "B"), ("r2", "A"), ("r2", "B")],
        }
    }

    /// Reference service rates (1 / mean processing time).
    ///
    /// These are an approximation chosen for this project, not measured
    /// values; every comparison is made against the exact optimum computed
    /// for whatever rates are configured.
    pub fn reference_rates(self) -> &'static [((&'static str, &'static str), f64)] {
        match self {
            ScenarioKind::LowUtilization => &[
                (("r1", "A"), 1.0),
                (("r1", "B"), 1.0 / 1.6),
                (("r2", "A"), 1.0 / 1.6),
                (("r2", "B"), 1.0),
            ],
            ScenarioKind::HighUtilization => &[
                (("r1", "A"), 1.0 / 1.6),
                (("r1", "B"), 1.0 / 2.4),
                (("r2", "A"), 1.0 / 2.4),
                (("r2", "B"), 1.0 / 1.6),
            ],
            ScenarioKind::SlowServer => &[
                (("r1", "A"), 1.0 / 0.7),
                (("r1", "B"), 1.0 / 0.7),
                (("r2", "A"), 1.0 / 5.0),
                (("r2", "B"), 1.0 / 5.0),
            ],
            ScenarioKind::SlowDownstream => &[
                (("r1", "A"), 1.0),
                (("r1", "B"), 1.0 / 2.4),
                (("r2", "A"), 1.0 / 1.4),
                (("r2", "B"), 1.0 / 1.8),
            ],
            ScenarioKind::NSystem => &[
                (("r1", "A"), 1.0 / 2.0),
                (("r2", "A"), 1.0),
                (("r2", "B"), 1.0),
            ],
            ScenarioKind::Parallel => &[
                (("r1", "A"), 1.0),
                (("r1", "B"), 1.0 / 1.8),
                (("r2", "A"), 1.0 / 1.8),
                (("r2", "B"), 1.0),
            ],
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which scenario to build and which rates to use.
#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioSpec {
    Named {
        kind: ScenarioKind,
        params: RateParams,
    },
    Custom(ModelDecl),
}

/// Rate parameters for a named scenario. Without `use_reference`, every
/// eligible pair needs an explicit service rate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateParams {
    pub use_reference: bool,
    pub arrival_rate: Option<f64>,
    pub service: BTreeMap<(String, String), f64>,
}

impl ScenarioSpec {
    pub fn reference(kind: ScenarioKind) -> Self {
        ScenarioSpec::Named {
            kind,
            params: RateParams {
                use_reference: true,
                ..Default::default()
            },
        }
    }
}

impl PartialEq for ModelDecl {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

pub const DEFAULT_ARRIVAL_RATE: f64 = 0.5;

pub fn build_scenario(spec: &ScenarioSpec) -> Result<ProcessModel, ModelError> {
    let (kind, params) = match spec {
        ScenarioSpec::Custom(decl) => return ProcessModel::from_decl(decl),
        ScenarioSpec::Named { kind, params } => (*kind, params),
    };
    let eligible = kind.eligibility();
    for key in params.service.keys() {
        if !eligible
            .iter()
            .any(|&(r, a)| r == key.0.as_str() && a == key.1.as_str())
        {
            return Err(ModelError::Topology(format!(
                "({}, {}) is not an eligible pair in {kind}",
                key.0, key.1
            )));
        }
    }
    let reference = kind.reference_rates();
    let mut service = Vec::new();
    for &(r, a) in eligible {
        let rate = match params.service.get(&(r.to_string(), a.to_string())) {
            Some(&rate) => rate,
            None if params.use_reference => {
                reference
                    .iter()
                    .find(|(k, _)| *k == (r, a))
                    .expect("reference covers topology")
                    .1
            }
            None => return Err(ModelError::MissingRate(format!("service rate ({r}, {a})"))),
        };
        service.push(ServiceDecl {
            resource: r.into(),
            activity: a.into(),
            rate,
        });
    }
    let (initial, routing_a, routing_b) = match kind {
        ScenarioKind::Parallel => (
            vec!["A".to_string(), "B".to_string()],
            RoutingDecl::Join { then: vec![] },
            RoutingDecl::Join { then: vec![] },
        ),
        _ => (
            vec!["A".to_string()],
            RoutingDecl::Successor { to: "B".into() },
            RoutingDecl::Complete,
        ),
    };
    ProcessModel::from_decl(&ModelDecl {
        name: kind.name().into(),
        arrival_rate: params.arrival_rate.unwrap_or(DEFAULT_ARRIVAL_RATE),
        initial,
        activities: vec![
            ActivityDecl {
                name: "A".into(),
                routing: routing_a,
            },
            ActivityDecl {
                name: "B".into(),
                routing: routing_b,
            },
        ],
        resources: vec!["r1".into(), "r2".into()],
        service,
    })
}

/// On-disk scenario file.
///
/// ```toml
/// schema_version = 1
/// scenario = "slow-server"     # a built-in topology ...
/// rates = "reference"          # ... with the reference rates, or
/// arrival_rate = 0.5
/// [[service]]                  # explicit rates for every eligible pair
/// resource = "r1"
/// activity = "A"
/// rate = 1.25
/// ```
///
/// A custom model puts the full declaration under `[model]`; a chain of
/// stages is `compose = ["low-utilization", "other.toml"]`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub rates: Option<String>,
    #[serde(default)]
    pub arrival_rate: Option<f64>,
    #[serde(default)]
    pub service: Vec<ServiceDecl>,
    #[serde(default)]
    pub model: Option<ModelDecl>,
    #[serde(default)]
    pub compose: Vec<String>,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(ModelError::SchemaVersion(file.schema_version));
        }
        Ok(file)
    }

    /// Resolves the file into a model. `base` is the directory used for
    /// relative stage paths.
    pub fn resolve(&self, base: Option<&Path>) -> Result<ProcessModel, ModelError> {
        let chosen = [
            self.scenario.is_some(),
            self.model.is_some(),
            !self.compose.is_empty(),
        ]
        .iter()
        .filter(|b| **b)
        .count();
        if chosen != 1 {
            return Err(ModelError::Config(
                "exactly one of `scenario`, `[model]` or `compose` must be given".into(),
            ));
        }
        if let Some(model) = &self.model {
            return ProcessModel::from_decl(model);
        }
        if !self.compose.is_empty() {
            let stages = self
                .compose
                .iter()
                .map(|s| resolve_scenario_ref(s, base))
                .collect::<Result<Vec<_>, _>>()?;
            return compose(&stages);
        }
        let kind = ScenarioKind::parse(self.scenario.as_deref().unwrap_or_default())?;
        let use_reference = match self.rates.as_deref() {
            None | Some("explicit") => false,
            Some("reference") => true,
            Some(other) => {
                return Err(ModelError::Config(format!(
                    "`rates` must be \"reference\" or \"explicit\", got `{other}`"
                )))
            }
        };
        let service = self
            .service
            .iter()
            .map(|s| ((s.resource.clone(), s.activity.clone()), s.rate))
            .collect();
        build_scenario(&ScenarioSpec::Named {
            kind,
            params: RateParams {
                use_reference,
                arrival_rate: self.arrival_rate,
                service,
            },
        })
    }
}

pub fn load_scenario_file(path: &Path) -> Result<ProcessModel, ModelError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
    ScenarioFile::parse(&text)?.resolve(path.parent())
}

/// Resolves a scenario reference: a built-in name (with reference rates),
/// `custom-mm1`, or a path to a scenario file.
pub fn resolve_scenario_ref(reference: &str, base: Option<&Path>) -> Result<ProcessModel, ModelError> {
    if let Ok(kind) = ScenarioKind::parse(reference) {
        return build_scenario(&ScenarioSpec::reference(kind));
    }
    if reference == "custom-mm1" {
        return ProcessModel::mm1(0.5, 1.0);
    }
    let path = match base {
        Some(dir) if Path::new(reference).is_relative() => dir.join(reference),
        _ => Path::new(reference).to_path_buf(),
    };
    if path.is_file() {
        load_scenario_file(&path)
    } else {
        Err(ModelError::UnknownScenario(reference.to_string()))
    }
}
