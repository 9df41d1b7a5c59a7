//! Triple construction, the in-memory property graph, canonicalization and
//! export.
//!
//! Two edge families live in the store: role edges `⟨ζ, role, η⟩` inside an
//! element and `LEADS_TO` chain edges `⟨η_i, LEADS_TO, ζ_{i+1}⟩` between
//! consecutive elements. Node identity is a hash of the normalized text and
//! the class, so equal entities from different sentences land on one node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{LabeledSentence, Tokenizer};
use crate::iskf::{ElementRole, Entity, EntityClass, IskfError};
use crate::model::ExtractedSpan;

/// Version written into and required from the JSON graph format.
pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed graph json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported graph format version {0}")]
    Version(u32),
    #[error("edge {head} -[{relation}]-> {tail} references a missing node")]
    Dangling { head: String, relation: Relation, tail: String },
    #[error("node {id} does not match its content (expected {expected})")]
    NodeId { id: String, expected: String },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error(transparent)]
    Iskf(#[from] IskfError),
}

/// NFC, then trimmed.
pub fn normalize_text(text: &str) -> String {
    text.nfc().collect::<String>().trim().to_string()
}

/// Stable node id: the first 16 hex digits of SHA-256 over the normalized
/// text and the class tag.
pub fn node_id(text: &str, class: EntityClass) -> String {
    let mut h = Sha256::new();
    h.update(normalize_text(text).as_bytes());
    h.update([0x1f]);
    h.update(class.tag().as_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Relation {
    Role(ElementRole),
    LeadsTo,
}

impl Relation {
    pub const LEADS_TO: &'static str = "LEADS_TO";

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Role(r) => r.as_str(),
            Self::LeadsTo => Self::LEADS_TO,
        }
    }

    pub fn role(self) -> Option<ElementRole> {
        match self {
            Self::Role(r) => Some(r),
            Self::LeadsTo => None,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Relation {
    type Err = IskfError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == Self::LEADS_TO {
            Ok(Self::LeadsTo)
        } else {
            s.parse().map(Self::Role)
        }
    }
}

impl Serialize for Relation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Relation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IskNode {
    pub id: String,
    /// Normalized surface text.
    pub text: String,
    pub class: EntityClass,
    #[serde(skip)]
    pub out_degree: usize,
    #[serde(skip)]
    pub in_degree: usize,
}

impl IskNode {
    pub fn new(entity: &Entity) -> Self {
        Self {
            id: node_id(&entity.text, entity.class),
            text: normalize_text(&entity.text),
            class: entity.class,
            out_degree: 0,
            in_degree: 0,
        }
    }

    pub fn entity(&self) -> Entity {
        Entity::new(self.text.clone(), self.class)
    }
}

/// Identity of an edge in a canonical store.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    pub head: String,
    pub relation: Relation,
    pub tail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IskEdge {
    pub head: String,
    pub relation: Relation,
    pub tail: String,
    /// Source sentence ids, sorted and unique once canonicalized.
    pub provenance: Vec<String>,
}

impl IskEdge {
    pub fn key(&self) -> EdgeKey {
        EdgeKey {
            head: self.head.clone(),
            relation: self.relation,
            tail: self.tail.clone(),
        }
    }
}

/// `⟨n_h, e, n_t⟩` before canonicalization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub head: Entity,
    pub relation: Relation,
    pub tail: Entity,
    pub provenance: String,
}

/// One element of a built event, by node id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventElement {
    pub role: ElementRole,
    pub zeta: String,
    pub eta: String,
}

/// The element sequence recovered from one description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub id: String,
    pub elements: Vec<EventElement>,
    /// Fewer than five elements: role triples only, no chain.
    pub partial: bool,
}

/// Output of [`build_triples`].
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BuiltTriples {
    pub id: String,
    /// Elements in narrative order with their assigned roles.
    pub elements: Vec<(ElementRole, Entity, Entity)>,
    pub triples: Vec<TripleRecord>,
    pub partial: bool,
    pub warnings: Vec<String>,
}

impl BuiltTriples {
    pub fn role_triples(&self) -> impl Iterator<Item = &TripleRecord> {
        self.triples.iter().filter(|t| t.relation != Relation::LeadsTo)
    }

    pub fn chain_triples(&self) -> impl Iterator<Item = &TripleRecord> {
        self.triples.iter().filter(|t| t.relation == Relation::LeadsTo)
    }
}

/// Roles for `k` elements assigned outside-in: the first is IC and the last
/// S, then the second D and the second-to-last C; whatever remains is ME.
pub fn assign_roles(k: usize) -> Vec<ElementRole> {
    use ElementRole::*;
    let mut roles: Vec<Option<ElementRole>> = vec![None; k];
    let mut claim = |i: Option<usize>, role| {
        if let Some(slot) = i.and_then(|i| roles.get_mut(i)) {
            if slot.is_none() {
                *slot = Some(role);
            }
        }
    };
    claim(Some(0), IC);
    claim(k.checked_sub(1), S);
    claim(Some(1), D);
    claim(k.checked_sub(2), C);
    roles.into_iter().map(|r| r.unwrap_or(ME)).collect()
}

/// Pairs adjacent complementary ζ/η entities (either order), greedily from
/// the left. Entities that cannot be paired are reported and skipped.
pub fn pair_entities(entities: &[Entity]) -> (Vec<(Entity, Entity)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    let mut i = 0;
    while i < entities.len() {
        let a = &entities[i];
        if let Some(b) = entities.get(i + 1) {
            if a.class.is_zeta() && b.class.is_eta() {
                pairs.push((a.clone(), b.clone()));
                i += 2;
                continue;
            }
            if a.class.is_eta() && b.class.is_zeta() {
                pairs.push((b.clone(), a.clone()));
                i += 2;
                continue;
            }
        }
        warnings.push(format!("unpaired {} entity `{}` skipped", a.class, a.text));
        i += 1;
    }
    (pairs, warnings)
}

/// Builds role and chain triples from the entities of one description, in
/// narrative order.
pub fn build_triples(id: &str, entities: &[Entity]) -> BuiltTriples {
    let (pairs, mut warnings) = pair_entities(entities);
    let roles = assign_roles(pairs.len());
    let partial = pairs.len() < 5;
    if partial {
        warnings.push(format!("partial event: {} of at least 5 elements, chain not built", pairs.len()));
    }
    let mut triples = Vec::new();
    for (&role, (z, e)) in roles.iter().zip(&pairs) {
        triples.push(TripleRecord {
            head: z.clone(),
            relation: Relation::Role(role),
            tail: e.clone(),
            provenance: id.to_string(),
        });
    }
    if !partial {
        for w in pairs.windows(2) {
            triples.push(TripleRecord {
                head: w[0].1.clone(),
                relation: Relation::LeadsTo,
                tail: w[1].0.clone(),
                provenance: id.to_string(),
            });
        }
    }
    BuiltTriples {
        id: id.to_string(),
        elements: roles.into_iter().zip(pairs).map(|(r, (z, e))| (r, z, e)).collect(),
        triples,
        partial,
        warnings,
    }
}

/// Entities of a labeled sentence in order.
pub fn sentence_entities(sentence: &LabeledSentence, tokenizer: Tokenizer) -> Result<Vec<Entity>, crate::corpus::CorpusError> {
    Ok(sentence
        .spans()?
        .iter()
        .map(|s| Entity::new(sentence.span_text(s, tokenizer), s.class))
        .collect())
}

pub fn extracted_entities(spans: &[ExtractedSpan]) -> Vec<Entity> {
    spans.iter().map(|s| Entity::new(s.text.clone(), s.class)).collect()
}

/// Counts reported by an ingest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub nodes_added: usize,
    pub edges_added: usize,
}

/// The property graph. Mutation goes through `&mut self`; wrap the store in
/// a lock to share it between threads.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphStore {
    nodes: BTreeMap<String, IskNode>,
    edges: Vec<IskEdge>,
    events: BTreeMap<String, EventRecord>,
    out_adj: BTreeMap<String, Vec<usize>>,
    in_adj: BTreeMap<String, Vec<usize>>,
    canonical: bool,
}

impl GraphStore {
    pub fn new() -> Self {
        Self {
            canonical: true,
            ..Self::default()
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when no two edges share a key.
    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    pub fn node(&self, id: &str) -> Option<&IskNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &IskNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> &[IskEdge] {
        &self.edges
    }

    pub fn events(&self) -> impl Iterator<Item = &EventRecord> {
        self.events.values()
    }

    pub fn event(&self, id: &str) -> Option<&EventRecord> {
        self.events.get(id)
    }

    /// Exact lookup by (normalized text, class).
    pub fn find(&self, text: &str, class: EntityClass) -> Option<&IskNode> {
        self.nodes.get(&node_id(text, class))
    }

    /// Every node whose normalized text equals `text`, in class order.
    pub fn find_text(&self, text: &str) -> Vec<&IskNode> {
        EntityClass::ALL.iter().filter_map(|&c| self.find(text, c)).collect()
    }

    pub fn out_edges(&self, id: &str) -> impl Iterator<Item = &IskEdge> {
        self.out_adj.get(id).into_iter().flatten().map(|&i| &self.edges[i])
    }

    pub fn in_edges(&self, id: &str) -> impl Iterator<Item = &IskEdge> {
        self.in_adj.get(id).into_iter().flatten().map(|&i| &self.edges[i])
    }

    /// Edges touching `id` in either direction, optionally of one relation.
    pub fn neighbors(&self, id: &str, relation: Option<Relation>) -> Vec<(&IskEdge, &IskNode)> {
        let out = self.out_edges(id).map(|e| (e, &e.tail));
        let inc = self.in_edges(id).map(|e| (e, &e.head));
        out.chain(inc)
            .filter(|(e, _)| relation.is_none_or(|r| e.relation == r))
            .map(|(e, other)| (e, &self.nodes[other]))
            .collect()
    }

    pub fn edge(&self, head: &str, relation: Relation, tail: &str) -> Option<&IskEdge> {
        self.out_edges(head).find(|e| e.relation == relation && e.tail == tail)
    }

    fn ensure_node(&mut self, entity: &Entity) -> (String, bool) {
        let node = IskNode::new(entity);
        let id = node.id.clone();
        let added = !self.nodes.contains_key(&id);
        if added {
            self.nodes.insert(id.clone(), node);
        }
        (id, added)
    }

    /// Appends triples and the event record without merging duplicate
    /// edges. Returns the number of new nodes.
    pub fn insert_raw(&mut self, built: &BuiltTriples) -> usize {
        let mut nodes_added = 0;
        for t in &built.triples {
            let (head, a) = self.ensure_node(&t.head);
            let (tail, b) = self.ensure_node(&t.tail);
            nodes_added += usize::from(a) + usize::from(b);
            let i = self.edges.len();
            self.edges.push(IskEdge {
                head: head.clone(),
                relation: t.relation,
                tail: tail.clone(),
                provenance: vec![t.provenance.clone()],
            });
            self.out_adj.entry(head).or_default().push(i);
            self.in_adj.entry(tail).or_default().push(i);
            self.canonical = false;
        }
        for (_, z, e) in &built.elements {
            nodes_added += usize::from(self.ensure_node(z).1) + usize::from(self.ensure_node(e).1);
        }
        let record = EventRecord {
            id: built.id.clone(),
            elements: built
                .elements
                .iter()
                .map(|(role, z, e)| EventElement {
                    role: *role,
                    zeta: node_id(&z.text, z.class),
                    eta: node_id(&e.text, e.class),
                })
                .collect(),
            partial: built.partial,
        };
        self.events.insert(built.id.clone(), record);
        nodes_added
    }

    /// Inserts and canonicalizes.
    pub fn ingest(&mut self, built: &BuiltTriples) -> IngestStats {
        let before = self.edges_canonical_count();
        let nodes_added = self.insert_raw(built);
        self.canonicalize();
        IngestStats {
            nodes_added,
            edges_added: self.edges.len() - before,
        }
    }

    fn edges_canonical_count(&self) -> usize {
        if self.canonical {
            self.edges.len()
        } else {
            self.edges.iter().map(IskEdge::key).collect::<BTreeSet<_>>().len()
        }
    }

    /// Merges duplicate edges, unions their provenance, sorts edges by key
    /// and refreshes adjacency and degree caches.
    pub fn canonicalize(&mut self) {
        let mut merged: BTreeMap<EdgeKey, BTreeSet<String>> = BTreeMap::new();
        for e in self.edges.drain(..) {
            merged.entry(e.key()).or_default().extend(e.provenance);
        }
        self.edges = merged
            .into_iter()
            .map(|(k, p)| IskEdge {
                head: k.head,
                relation: k.relation,
                tail: k.tail,
                provenance: p.into_iter().collect(),
            })
            .collect();
        self.reindex();
        self.canonical = true;
    }

    fn reindex(&mut self) {
        self.out_adj.clear();
        self.in_adj.clear();
        for n in self.nodes.values_mut() {
            n.out_degree = 0;
            n.in_degree = 0;
        }
        for (i, e) in self.edges.iter().enumerate() {
            self.out_adj.entry(e.head.clone()).or_default().push(i);
            self.in_adj.entry(e.tail.clone()).or_default().push(i);
            if let Some(n) = self.nodes.get_mut(&e.head) {
                n.out_degree += 1;
            }
            if let Some(n) = self.nodes.get_mut(&e.tail) {
                n.in_degree += 1;
            }
        }
    }

    /// Edges carrying each sentence id.
    pub fn provenance_index(&self) -> BTreeMap<&str, Vec<&IskEdge>> {
        let mut out: BTreeMap<&str, Vec<&IskEdge>> = BTreeMap::new();
        for e in &self.edges {
            for p in &e.provenance {
                out.entry(p.as_str()).or_default().push(e);
            }
        }
        out
    }
}

/// Canonical copy of `store`.
pub fn canonicalize(store: &GraphStore) -> GraphStore {
    let mut out = store.clone();
    out.canonicalize();
    out
}

/// Builds a canonical store from pre-built descriptions.
pub fn build_store<'a>(built: impl IntoIterator<Item = &'a BuiltTriples>) -> GraphStore {
    let mut store = GraphStore::new();
    for b in built {
        store.insert_raw(b);
    }
    store.canonicalize();
    store
}

fn cypher_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn cypher_label(class: EntityClass) -> &'static str {
    match class {
        EntityClass::Equipment => "Equipment",
        EntityClass::ProcessLabel => "ProcessLabel",
        EntityClass::Consequence => "Consequence",
        EntityClass::Material => "Material",
        EntityClass::State => "State",
    }
}

/// One `MERGE` statement per node (sorted by id) followed by one per edge
/// (sorted by head, relation, tail).
pub fn export_cypher(store: &GraphStore) -> String {
    let mut out = String::new();
    for n in store.nodes.values() {
        out.push_str(&format!(
            "MERGE (:{} {{id: {}, text: {}}});\n",
            cypher_label(n.class),
            cypher_string(&n.id),
            cypher_string(&n.text)
        ));
    }
    let mut edges: Vec<&IskEdge> = store.edges.iter().collect();
    edges.sort_by_key(|e| e.key());
    for e in edges {
        let prov: Vec<String> = e.provenance.iter().map(|p| cypher_string(p)).collect();
        out.push_str(&format!(
            "MATCH (h {{id: {}}}), (t {{id: {}}}) MERGE (h)-[:{} {{provenance: [{}]}}]->(t);\n",
            cypher_string(&e.head),
            cypher_string(&e.tail),
            e.relation,
            prov.join(", ")
        ));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    version: u32,
    nodes: Vec<IskNode>,
    edges: Vec<IskEdge>,
    #[serde(default)]
    events: Vec<EventRecord>,
}

/// Lossless JSON form, deterministic for a given store.
pub fn export_json(store: &GraphStore) -> String {
    let mut edges = store.edges.clone();
    edges.sort_by_key(IskEdge::key);
    let doc = GraphJson {
        version: GRAPH_FORMAT_VERSION,
        nodes: store.nodes.values().cloned().collect(),
        edges,
        events: store.events.values().cloned().collect(),
    };
    serde_json::to_string_pretty(&doc).expect("graph serializes") + "\n"
}

/// Parses [`export_json`] output. Rejects dangling edges, ids that do not
/// match node content, and events naming unknown nodes. The result is
/// canonicalized.
pub fn import_json(text: &str) -> Result<GraphStore, GraphError> {
    let doc: GraphJson = serde_json::from_str(text)?;
    if doc.version != GRAPH_FORMAT_VERSION {
        return Err(GraphError::Version(doc.version));
    }
    let mut store = GraphStore::new();
    for mut n in doc.nodes {
        let expected = node_id(&n.text, n.class);
        if n.id != expected {
            return Err(GraphError::NodeId { id: n.id, expected });
        }
        n.text = normalize_text(&n.text);
        store.nodes.insert(n.id.clone(), n);
    }
    for e in &doc.edges {
        if !store.nodes.contains_key(&e.head) || !store.nodes.contains_key(&e.tail) {
            return Err(GraphError::Dangling {
                head: e.head.clone(),
                relation: e.relation,
                tail: e.tail.clone(),
            });
        }
        if e.provenance.is_empty() {
            return Err(GraphError::Invalid(format!("edge {} -[{}]-> {} has no provenance", e.head, e.relation, e.tail)));
        }
    }
    for ev in &doc.events {
        for el in &ev.elements {
            if !store.nodes.contains_key(&el.zeta) || !store.nodes.contains_key(&el.eta) {
                return Err(GraphError::Invalid(format!("event {} references a missing node", ev.id)));
            }
        }
    }
    store.edges = doc.edges;
    store.events = doc.events.into_iter().map(|e| (e.id.clone(), e)).collect();
    store.canonicalize();
    Ok(store)
}
