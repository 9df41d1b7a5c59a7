//! The hazard-event ontology: element roles, ζ/η decomposition of each
//! element, and the four propagation topologies.
//!
//! A hazard event is an ordered chain `IC → D → ME* → C → S`. Every element
//! pairs a ζ (equipment, process label or material) with an η (its state,
//! or a consequence). The topology follows from how many causes and
//! consequences the event has.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// ζ text used for suggestions that name no equipment.
pub const SYSTEM_ZETA: &str = "SYSTEM";

/// Element role. The derived order is the propagation order IC < D < ME < C < S.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ElementRole {
    IC,
    D,
    ME,
    C,
    S,
}

impl ElementRole {
    pub const ALL: [ElementRole; 5] = [Self::IC, Self::D, Self::ME, Self::C, Self::S];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::IC => "IC",
            Self::D => "D",
            Self::ME => "ME",
            Self::C => "C",
            Self::S => "S",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            Self::IC => "cause",
            Self::D => "deviation",
            Self::ME => "middle event",
            Self::C => "consequence",
            Self::S => "suggestion",
        }
    }
}

impl fmt::Display for ElementRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ElementRole {
    type Err = IskfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| IskfError::UnknownName(s.to_string()))
    }
}

/// Entity classes of the annotation scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityClass {
    Equipment,
    ProcessLabel,
    Consequence,
    Material,
    State,
}

impl EntityClass {
    /// In annotation-table order.
    pub const ALL: [EntityClass; 5] = [
        Self::Equipment,
        Self::ProcessLabel,
        Self::Consequence,
        Self::Material,
        Self::State,
    ];

    /// BIO tag suffix (`EQU`, `PLA`, `CON`, `MAT`, `STA`).
    pub fn tag(self) -> &'static str {
        match self {
            Self::Equipment => "EQU",
            Self::ProcessLabel => "PLA",
            Self::Consequence => "CON",
            Self::Material => "MAT",
            Self::State => "STA",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.tag() == tag)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Equipment => "Equipment",
            Self::ProcessLabel => "ProcessLabel",
            Self::Consequence => "Consequence",
            Self::Material => "Material",
            Self::State => "State",
        }
    }

    /// Human label used in metric tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Equipment => "Equipment",
            Self::ProcessLabel => "Process label",
            Self::Consequence => "Consequence",
            Self::Material => "Material",
            Self::State => "State",
        }
    }

    /// ζ classes name the thing: equipment, process labels and materials.
    pub fn is_zeta(self) -> bool {
        matches!(self, Self::Equipment | Self::ProcessLabel | Self::Material)
    }

    /// η classes describe what happens to it.
    pub fn is_eta(self) -> bool {
        matches!(self, Self::State | Self::Consequence)
    }
}

impl fmt::Display for EntityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityClass {
    type Err = IskfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s || c.tag() == s)
            .ok_or_else(|| IskfError::UnknownName(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Topology {
    SingleString,
    ReverseTree,
    PositiveTree,
    BowTie,
}

impl Topology {
    pub const ALL: [Topology; 4] = [
        Self::SingleString,
        Self::ReverseTree,
        Self::PositiveTree,
        Self::BowTie,
    ];
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IskfError {
    #[error("invalid event: {0}")]
    InvalidEvent(String),
    #[error("unknown name `{0}`")]
    UnknownName(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub text: String,
    pub class: EntityClass,
}

impl Entity {
    pub fn new(text: impl Into<String>, class: EntityClass) -> Self {
        Self {
            text: text.into(),
            class,
        }
    }
}

/// One element's ζ + η decomposition.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ZetaEta {
    pub zeta: Entity,
    pub eta: Entity,
}

impl ZetaEta {
    pub fn new(zeta: Entity, eta: Entity) -> Result<Self, IskfError> {
        let pair = Self { zeta, eta };
        match pair.problems().first() {
            Some(p) => Err(IskfError::InvalidEvent(p.clone())),
            None => Ok(pair),
        }
    }

    /// A suggestion that targets no particular equipment.
    pub fn system(eta: Entity) -> Result<Self, IskfError> {
        Self::new(Entity::new(SYSTEM_ZETA, EntityClass::Equipment), eta)
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.zeta.class.is_zeta() {
            out.push(format!("zeta class {} is not a zeta class", self.zeta.class));
        }
        if !self.eta.class.is_eta() {
            out.push(format!("eta class {} is not an eta class", self.eta.class));
        }
        if self.zeta.text.trim().is_empty() {
            out.push("empty zeta text".to_string());
        }
        if self.eta.text.trim().is_empty() {
            out.push("empty eta text".to_string());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HazardElement {
    pub role: ElementRole,
    #[serde(flatten)]
    pub pair: ZetaEta,
}

impl HazardElement {
    pub fn new(role: ElementRole, zeta: Entity, eta: Entity) -> Result<Self, IskfError> {
        Ok(Self {
            role,
            pair: ZetaEta::new(zeta, eta)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HazardEvent {
    pub node_id: String,
    pub topology: Topology,
    pub elements: Vec<HazardElement>,
}

impl HazardEvent {
    /// Builds an event with its topology derived from the elements.
    pub fn from_elements(node_id: impl Into<String>, elements: Vec<HazardElement>) -> Result<Self, IskfError> {
        let (ic, c) = ic_c_counts(&elements);
        let topology = classify_topology(ic, c)?;
        let event = Self {
            node_id: node_id.into(),
            topology,
            elements,
        };
        let violations = validate_event(&event);
        if violations.is_empty() {
            Ok(event)
        } else {
            let msg = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ");
            Err(IskfError::InvalidEvent(msg))
        }
    }

    pub fn count(&self, role: ElementRole) -> usize {
        self.elements.iter().filter(|e| e.role == role).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn ic_c_counts(elements: &[HazardElement]) -> (usize, usize) {
    let ic = elements.iter().filter(|e| e.role == ElementRole::IC).count();
    let c = elements.iter().filter(|e| e.role == ElementRole::C).count();
    (ic, c)
}

/// Topology from cause and consequence multiplicities.
pub fn classify_topology(ic_count: usize, c_count: usize) -> Result<Topology, IskfError> {
    match (ic_count, c_count) {
        (0, _) | (_, 0) => Err(IskfError::InvalidEvent(format!(
            "topology needs at least one cause and one consequence (got {ic_count}, {c_count})"
        ))),
        (1, 1) => Ok(Topology::SingleString),
        (_, 1) => Ok(Topology::ReverseTree),
        (1, _) => Ok(Topology::PositiveTree),
        _ => Ok(Topology::BowTie),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    RoleOrder { index: usize },
    MissingCause,
    MissingDeviation,
    MultipleDeviations(usize),
    MissingMiddle,
    MissingConsequence,
    MissingSuggestion,
    TopologyMismatch { declared: Topology, actual: Topology },
    BadPair { index: usize, problem: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RoleOrder { index } => write!(f, "role order (element {index})"),
            Self::MissingCause => f.write_str("missing cause"),
            Self::MissingDeviation => f.write_str("missing deviation"),
            Self::MultipleDeviations(n) => write!(f, "multiple deviations ({n})"),
            Self::MissingMiddle => f.write_str("missing middle event"),
            Self::MissingConsequence => f.write_str("missing consequence"),
            Self::MissingSuggestion => f.write_str("missing suggestion"),
            Self::TopologyMismatch { declared, actual } => {
                write!(f, "topology mismatch: declared {declared:?}, counts imply {actual:?}")
            }
            Self::BadPair { index, problem } => write!(f, "element {index}: {problem}"),
        }
    }
}

/// Every broken invariant of `event`; empty means valid.
pub fn validate_event(event: &HazardEvent) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, w) in event.elements.windows(2).enumerate() {
        if w[1].role < w[0].role {
            out.push(Violation::RoleOrder { index: i + 1 });
        }
    }
    let mut counts: BTreeMap<ElementRole, usize> = BTreeMap::new();
    for e in &event.elements {
        *counts.entry(e.role).or_default() += 1;
    }
    let n = |r| counts.get(&r).copied().unwrap_or(0);
    if n(ElementRole::IC) == 0 {
        out.push(Violation::MissingCause);
    }
    match n(ElementRole::D) {
        0 => out.push(Violation::MissingDeviation),
        1 => {}
        k => out.push(Violation::MultipleDeviations(k)),
    }
    if n(ElementRole::ME) == 0 {
        out.push(Violation::MissingMiddle);
    }
    if n(ElementRole::C) == 0 {
        out.push(Violation::MissingConsequence);
    }
    if n(ElementRole::S) == 0 {
        out.push(Violation::MissingSuggestion);
    }
    if let Ok(actual) = classify_topology(n(ElementRole::IC), n(ElementRole::C)) {
        if actual != event.topology {
            out.push(Violation::TopologyMismatch {
                declared: event.topology,
                actual,
            });
        }
    }
    for (index, e) in event.elements.iter().enumerate() {
        for problem in e.pair.problems() {
            out.push(Violation::BadPair { index, problem });
        }
    }
    out
}

/// How many times a role may occur.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Multiplicity {
    pub min: usize,
    pub max: Option<usize>,
}

impl Multiplicity {
    pub const ONE: Self = Self { min: 1, max: Some(1) };
    pub const AT_LEAST_ONE: Self = Self { min: 1, max: None };
    pub const MANY: Self = Self { min: 2, max: None };

    pub fn admits(self, n: usize) -> bool {
        n >= self.min && self.max.is_none_or(|m| n <= m)
    }
}

/// Role multiplicities of a topology, in propagation order.
pub fn roles_of(topology: Topology) -> [(ElementRole, Multiplicity); 5] {
    use ElementRole::*;
    let (ic, c) = match topology {
        Topology::SingleString => (Multiplicity::ONE, Multiplicity::ONE),
        Topology::ReverseTree => (Multiplicity::MANY, Multiplicity::ONE),
        Topology::PositiveTree => (Multiplicity::ONE, Multiplicity::MANY),
        Topology::BowTie => (Multiplicity::MANY, Multiplicity::MANY),
    };
    [
        (IC, ic),
        (D, Multiplicity::ONE),
        (ME, Multiplicity::AT_LEAST_ONE),
        (C, c),
        (S, Multiplicity::ONE),
    ]
}
