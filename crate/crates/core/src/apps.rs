//! Graph applications: entity retrieval, trace-back from a consequence,
//! propagation inference across events, and the rule-template question
//! answering pipeline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{normalize_text, EventElement, GraphStore, IskNode, Relation};
use crate::iskf::{ElementRole, Entity, EntityClass};
use crate::model::Hainex;

/// Default trace-back depth, counted in elements.
pub const DEFAULT_TRACE_DEPTH: usize = 12;

/// Message returned with every refusal.
pub const OUT_OF_SCOPE_MESSAGE: &str = "The scope of the question is not in line with industrial safety.";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AppError {
    #[error("node `{0}` not found")]
    NodeNotFound(String),
    #[error("empty question")]
    EmptyQuestion,
    #[error("k must be at least 1")]
    BadK,
    #[error("entity extraction failed: {0}")]
    Extractor(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStatus {
    Found,
    NotFound,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub status: RetrievalStatus,
    pub subject: Option<IskNode>,
    /// η nodes the subject reaches through a D, ME or C role edge.
    pub hazards: Vec<IskNode>,
    /// Equipment and process-label nodes sharing an event with the subject.
    pub cooperative_equipment: Vec<IskNode>,
    /// Material nodes sharing an event with the subject.
    pub related_materials: Vec<IskNode>,
    /// η nodes of suggestion edges in events shared with the subject.
    pub suggestions: Vec<IskNode>,
    /// Sentence ids of the shared events.
    pub events: Vec<String>,
}

impl RetrievalResult {
    fn not_found(query: &str) -> Self {
        Self {
            query: query.to_string(),
            status: RetrievalStatus::NotFound,
            subject: None,
            hazards: vec![],
            cooperative_equipment: vec![],
            related_materials: vec![],
            suggestions: vec![],
            events: vec![],
        }
    }
}

/// Exact-match lookup of `text` (ζ classes first) and its grouped
/// neighborhood. Groups are sorted by text then class.
pub fn retrieve(store: &GraphStore, text: &str) -> RetrievalResult {
    let mut candidates = store.find_text(text);
    candidates.sort_by_key(|n| !n.class.is_zeta());
    let Some(subject) = candidates.first().copied() else {
        return RetrievalResult::not_found(text);
    };
    let id = subject.id.as_str();

    let mut hazards = BTreeSet::new();
    for e in store.out_edges(id) {
        if matches!(e.relation.role(), Some(ElementRole::D | ElementRole::ME | ElementRole::C)) {
            hazards.insert(e.tail.clone());
        }
    }
    let events: BTreeSet<&str> = store
        .out_edges(id)
        .chain(store.in_edges(id))
        .flat_map(|e| e.provenance.iter().map(String::as_str))
        .collect();
    let index = store.provenance_index();
    let (mut equipment, mut materials, mut suggestions) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for ev in &events {
        for e in index.get(ev).into_iter().flatten() {
            if e.relation == Relation::Role(ElementRole::S) {
                suggestions.insert(e.tail.clone());
            }
            for n in [&e.head, &e.tail] {
                if n == id {
                    continue;
                }
                match store.node(n).map(|n| n.class) {
                    Some(EntityClass::Equipment | EntityClass::ProcessLabel) => {
                        equipment.insert(n.clone());
                    }
                    Some(EntityClass::Material) => {
                        materials.insert(n.clone());
                    }
                    _ => {}
                }
            }
        }
    }
    let resolve = |ids: BTreeSet<String>| {
        let mut v: Vec<IskNode> = ids.iter().filter_map(|i| store.node(i)).cloned().collect();
        v.sort_by(|a, b| (&a.text, a.class).cmp(&(&b.text, b.class)));
        v
    };
    RetrievalResult {
        query: text.to_string(),
        status: RetrievalStatus::Found,
        subject: Some(subject.clone()),
        hazards: resolve(hazards),
        cooperative_equipment: resolve(equipment),
        related_materials: resolve(materials),
        suggestions: resolve(suggestions),
        events: events.into_iter().map(str::to_string).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Observed,
    Inferred,
}

/// Where an inferred path crosses from one event into another.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Join {
    pub event_a: String,
    pub event_b: String,
    pub node: String,
}

/// A node walk along the chain. `relations[i]` labels the edge from
/// `nodes[i]` to `nodes[i + 1]`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PropagationPath {
    pub nodes: Vec<String>,
    pub relations: Vec<Relation>,
    pub kind: PathKind,
    pub joins: Vec<Join>,
    /// Events containing the whole path (observed) or the spliced events
    /// (inferred).
    pub provenance: Vec<String>,
}

impl PropagationPath {
    pub fn texts<'a>(&self, store: &'a GraphStore) -> Vec<&'a str> {
        self.nodes.iter().map(|n| store.node(n).map_or("?", |n| n.text.as_str())).collect()
    }

    /// `a -IC-> b -LEADS_TO-> c`.
    pub fn render(&self, store: &GraphStore) -> String {
        let texts = self.texts(store);
        let mut out = texts.first().map(|s| s.to_string()).unwrap_or_default();
        for (r, t) in self.relations.iter().zip(&texts[1.min(texts.len())..]) {
            out.push_str(&format!(" -{r}-> {t}"));
        }
        out
    }

    /// Every edge along the path, in order; `None` where the store lacks it.
    pub fn edges<'a>(&self, store: &'a GraphStore) -> Vec<Option<&'a crate::graph::IskEdge>> {
        self.nodes
            .windows(2)
            .zip(&self.relations)
            .map(|(w, &r)| store.edge(&w[0], r, &w[1]))
            .collect()
    }

    /// Role edges on the path.
    pub fn element_count(&self) -> usize {
        self.relations.iter().filter(|r| r.role().is_some()).count()
    }

    fn sort_key(&self, store: &GraphStore) -> (usize, Vec<String>, Vec<String>) {
        (
            self.nodes.len(),
            self.texts(store).into_iter().map(str::to_string).collect(),
            self.nodes.clone(),
        )
    }
}

fn sort_paths(store: &GraphStore, paths: &mut [PropagationPath]) {
    paths.sort_by_cached_key(|p| p.sort_key(store));
}

/// Reverse walks from `node` back to cause (IC) elements. Each walk stays
/// inside one event: the provenance sets of its edges must share at least
/// one sentence. The walk never revisits a node and stops after `max_depth`
/// elements. Sorted by length, then by node texts.
pub fn trace_back(store: &GraphStore, node: &str, max_depth: usize) -> Result<Vec<PropagationPath>, AppError> {
    if store.node(node).is_none() {
        return Err(AppError::NodeNotFound(node.to_string()));
    }
    struct Walk<'a> {
        store: &'a GraphStore,
        max_depth: usize,
        found: BTreeSet<(Vec<String>, Vec<Relation>, Vec<String>)>,
    }
    impl Walk<'_> {
        fn go(&mut self, rev_nodes: &mut Vec<String>, rev_rels: &mut Vec<Relation>, prov: Option<&BTreeSet<String>>, depth: usize) {
            let current = rev_nodes.last().expect("walk starts at a node").clone();
            let is_eta = self.store.node(&current).is_some_and(|n| n.class.is_eta());
            let edges: Vec<_> = self
                .store
                .in_edges(&current)
                .filter(|e| (e.relation == Relation::LeadsTo) != is_eta)
                .collect();
            for e in edges {
                if rev_nodes.contains(&e.head) {
                    continue;
                }
                let next_depth = depth + usize::from(e.relation.role().is_some());
                if next_depth > self.max_depth {
                    continue;
                }
                let here: BTreeSet<String> = e.provenance.iter().cloned().collect();
                let shared: BTreeSet<String> = match prov {
                    Some(p) => p.intersection(&here).cloned().collect(),
                    None => here,
                };
                if shared.is_empty() {
                    continue;
                }
                rev_nodes.push(e.head.clone());
                rev_rels.push(e.relation);
                if e.relation == Relation::Role(ElementRole::IC) {
                    let mut nodes = rev_nodes.clone();
                    nodes.reverse();
                    let mut rels = rev_rels.clone();
                    rels.reverse();
                    self.found.insert((nodes, rels, shared.iter().cloned().collect()));
                } else {
                    self.go(rev_nodes, rev_rels, Some(&shared), next_depth);
                }
                rev_nodes.pop();
                rev_rels.pop();
            }
        }
    }
    let mut walk = Walk {
        store,
        max_depth,
        found: BTreeSet::new(),
    };
    walk.go(&mut vec![node.to_string()], &mut vec![], None, 0);
    // The same node walk may be reached through different provenance
    // subsets; keep the union.
    let mut merged: BTreeMap<(Vec<String>, Vec<Relation>), BTreeSet<String>> = BTreeMap::new();
    for (n, r, p) in walk.found {
        merged.entry((n, r)).or_default().extend(p);
    }
    let mut paths: Vec<PropagationPath> = merged
        .into_iter()
        .map(|((nodes, relations), p)| PropagationPath {
            nodes,
            relations,
            kind: PathKind::Observed,
            joins: vec![],
            provenance: p.into_iter().collect(),
        })
        .collect();
    sort_paths(store, &mut paths);
    Ok(paths)
}

fn chain_nodes(elements: &[EventElement]) -> (Vec<String>, Vec<Relation>) {
    let mut nodes = Vec::new();
    let mut rels = Vec::new();
    for (i, el) in elements.iter().enumerate() {
        if i > 0 {
            rels.push(Relation::LeadsTo);
        }
        nodes.push(el.zeta.clone());
        nodes.push(el.eta.clone());
        rels.push(Relation::Role(el.role));
    }
    (nodes, rels)
}

/// True if one event contains every edge of the walk.
fn observed(store: &GraphStore, nodes: &[String], rels: &[Relation]) -> bool {
    let mut shared: Option<BTreeSet<&str>> = None;
    for (w, &r) in nodes.windows(2).zip(rels) {
        let Some(e) = store.edge(&w[0], r, &w[1]) else {
            return false;
        };
        let here: BTreeSet<&str> = e.provenance.iter().map(String::as_str).collect();
        let next: BTreeSet<&str> = match shared {
            Some(s) => s.intersection(&here).copied().collect(),
            None => here,
        };
        if next.is_empty() {
            return false;
        }
        shared = Some(next);
    }
    true
}

/// Cross-event paths: where the η of a C or ME element in event A is also
/// the η of an IC or ME element in event B, A's chain up to that element is
/// spliced onto B's chain after it, through B's last consequence. Paths
/// already contained in one event are dropped.
pub fn infer_paths(store: &GraphStore) -> Vec<PropagationPath> {
    use ElementRole::*;
    let mut found: BTreeMap<(Vec<String>, Vec<Relation>), BTreeSet<Join>> = BTreeMap::new();
    let events: Vec<_> = store.events().filter(|e| !e.partial).collect();
    for a in &events {
        for (i, ea) in a.elements.iter().enumerate() {
            if !matches!(ea.role, C | ME) {
                continue;
            }
            for b in &events {
                if b.id == a.id {
                    continue;
                }
                let last_c = match b.elements.iter().rposition(|e| e.role == C) {
                    Some(c) => c,
                    None => continue,
                };
                for (j, eb) in b.elements.iter().enumerate() {
                    if !matches!(eb.role, IC | ME) || eb.eta != ea.eta || j >= last_c {
                        continue;
                    }
                    let (mut nodes, mut rels) = chain_nodes(&a.elements[..=i]);
                    let (tail_nodes, tail_rels) = chain_nodes(&b.elements[j + 1..=last_c]);
                    rels.push(Relation::LeadsTo);
                    nodes.extend(tail_nodes);
                    rels.extend(tail_rels);
                    if observed(store, &nodes, &rels) {
                        continue;
                    }
                    found.entry((nodes, rels)).or_default().insert(Join {
                        event_a: a.id.clone(),
                        event_b: b.id.clone(),
                        node: ea.eta.clone(),
                    });
                }
            }
        }
    }
    let mut paths: Vec<PropagationPath> = found
        .into_iter()
        .map(|((nodes, relations), joins)| {
            let provenance: BTreeSet<String> = joins.iter().flat_map(|j| [j.event_a.clone(), j.event_b.clone()]).collect();
            PropagationPath {
                nodes,
                relations,
                kind: PathKind::Inferred,
                joins: joins.into_iter().collect(),
                provenance: provenance.into_iter().collect(),
            }
        })
        .collect();
    sort_paths(store, &mut paths);
    paths
}

/// Finds entity mentions in a question.
pub trait EntityExtractor {
    fn extract_entities(&self, text: &str) -> Result<Vec<Entity>, AppError>;
}

impl EntityExtractor for Hainex {
    fn extract_entities(&self, text: &str) -> Result<Vec<Entity>, AppError> {
        let (_, spans) = self.extract(text).map_err(|e| AppError::Extractor(e.to_string()))?;
        Ok(crate::graph::extracted_entities(&spans))
    }
}

/// Rule-based fallback: longest case-insensitive matches of the graph's
/// node texts. ASCII alphanumeric matches must not start or end inside a
/// word.
#[derive(Clone, Debug, Default)]
pub struct VocabularyExtractor {
    entries: Vec<(Vec<char>, Entity)>,
}

fn fold(s: &str) -> Vec<char> {
    s.chars().flat_map(char::to_lowercase).collect()
}

impl VocabularyExtractor {
    pub fn from_store(store: &GraphStore) -> Self {
        let mut entries: Vec<(Vec<char>, Entity)> = store
            .nodes()
            .filter(|n| !n.text.is_empty())
            .map(|n| (fold(&n.text), n.entity()))
            .collect();
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
        Self { entries }
    }
}

impl EntityExtractor for VocabularyExtractor {
    fn extract_entities(&self, text: &str) -> Result<Vec<Entity>, AppError> {
        let q = fold(text);
        let word = |c: char| c.is_ascii_alphanumeric();
        let mut out = Vec::new();
        let mut i = 0;
        while i < q.len() {
            let starts_ok = i == 0 || !(word(q[i - 1]) && word(q[i]));
            let hit = starts_ok
                .then(|| {
                    self.entries.iter().find(|(pat, _)| {
                        let end = i + pat.len();
                        end <= q.len() && q[i..end] == pat[..] && (end == q.len() || !(word(q[end - 1]) && word(q[end])))
                    })
                })
                .flatten();
            match hit {
                Some((pat, entity)) => {
                    out.push(entity.clone());
                    i += pat.len();
                }
                None => i += 1,
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Cause,
    Deviation,
    Middle,
    Consequence,
    Suggestion,
}

impl Slot {
    pub const ALL: [Slot; 5] = [Self::Cause, Self::Deviation, Self::Middle, Self::Consequence, Self::Suggestion];

    fn label(self) -> &'static str {
        match self {
            Self::Cause => "Cause",
            Self::Deviation => "Deviation",
            Self::Middle => "Middle event",
            Self::Consequence => "Consequence",
            Self::Suggestion => "Suggestion",
        }
    }
}

/// Question keywords per answer slot. Matching is case-insensitive
/// substring search.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlotKeywords {
    pub keywords: BTreeMap<Slot, Vec<String>>,
}

impl Default for SlotKeywords {
    fn default() -> Self {
        let table: [(Slot, &[&str]); 5] = [
            (Slot::Cause, &["cause", "why", "reason", "原因", "为什么"]),
            (Slot::Deviation, &["deviation", "偏差", "偏离"]),
            (Slot::Middle, &["middle event", "intermediate", "中间事件"]),
            (
                Slot::Consequence,
                &["consequence", "effect", "result in", "lead to", "impact", "后果", "影响", "导致"],
            ),
            (
                Slot::Suggestion,
                &["suggest", "recommend", "measure", "handle", "what to do", "how to deal", "建议", "处理", "措施"],
            ),
        ];
        Self {
            keywords: table
                .into_iter()
                .map(|(s, words)| (s, words.iter().map(|w| w.to_string()).collect()))
                .collect(),
        }
    }
}

impl SlotKeywords {
    /// Slots named by the question; all five when none is named.
    pub fn detect(&self, question: &str) -> Vec<Slot> {
        let q = question.to_lowercase();
        let found: Vec<Slot> = Slot::ALL
            .into_iter()
            .filter(|s| self.keywords.get(s).into_iter().flatten().any(|k| q.contains(&k.to_lowercase())))
            .collect();
        if found.is_empty() {
            Slot::ALL.to_vec()
        } else {
            found
        }
    }

    /// Adds keywords; existing entries are kept.
    pub fn extend(&mut self, other: &SlotKeywords) {
        for (slot, words) in &other.keywords {
            let list = self.keywords.entry(*slot).or_default();
            for w in words {
                if !list.contains(w) {
                    list.push(w.clone());
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStatus {
    Ok,
    Refused,
    NotFound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswer {
    pub text: String,
    /// `1 / path_length`; ties are broken by support.
    pub score: f64,
    /// Chain nodes from the first cause through the last consequence.
    pub path: Vec<String>,
    pub relations: Vec<Relation>,
    /// Sentence ids whose chain equals `path`.
    pub provenance: Vec<String>,
    /// Chain length in elements.
    pub path_length: usize,
    pub slots: BTreeMap<Slot, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub question: String,
    pub status: AnswerStatus,
    pub message: Option<String>,
    pub entities: Vec<Entity>,
    pub slots: Vec<Slot>,
    pub answers: Vec<RankedAnswer>,
}

fn element_text(store: &GraphStore, el: &EventElement) -> String {
    let t = |id: &str| store.node(id).map_or(String::new(), |n| n.text.clone());
    format!("{} {}", t(&el.zeta), t(&el.eta))
}

/// Answers `question` from the graph:
/// entities are extracted and resolved to nodes (none resolving is a
/// refusal); keywords pick the slots; every event containing a resolved
/// node contributes its chain, events with identical chains are merged with
/// their suggestions pooled; candidates are ranked by chain length
/// ascending, then supporting events descending, then text.
pub fn answer(
    store: &GraphStore,
    question: &str,
    k: usize,
    extractor: &dyn EntityExtractor,
    keywords: &SlotKeywords,
) -> Result<Answer, AppError> {
    if question.trim().is_empty() {
        return Err(AppError::EmptyQuestion);
    }
    if k < 1 {
        return Err(AppError::BadK);
    }
    let entities = extractor.extract_entities(question)?;
    let mut resolved: BTreeSet<String> = BTreeSet::new();
    for e in &entities {
        if let Some(n) = store.find(&e.text, e.class) {
            resolved.insert(n.id.clone());
        }
    }
    let slots = keywords.detect(question);
    if resolved.is_empty() {
        return Ok(Answer {
            question: question.to_string(),
            status: AnswerStatus::Refused,
            message: Some(OUT_OF_SCOPE_MESSAGE.to_string()),
            entities,
            slots,
            answers: vec![],
        });
    }

    struct Candidate {
        chain: Vec<EventElement>,
        matched: usize,
        provenance: BTreeSet<String>,
        suggestions: BTreeSet<String>,
    }
    let mut candidates: BTreeMap<(Vec<(String, String, ElementRole)>, usize), Candidate> = BTreeMap::new();
    for ev in store.events() {
        let Some(m) = ev.elements.iter().position(|el| resolved.contains(&el.zeta) || resolved.contains(&el.eta)) else {
            continue;
        };
        let chain: Vec<EventElement> = ev.elements.iter().filter(|el| el.role != ElementRole::S).cloned().collect();
        let matched = if ev.elements[m].role == ElementRole::S {
            chain.len()
        } else {
            ev.elements[..m].iter().filter(|el| el.role != ElementRole::S).count()
        };
        let key = (
            chain.iter().map(|el| (el.zeta.clone(), el.eta.clone(), el.role)).collect(),
            matched,
        );
        let c = candidates.entry(key).or_insert_with(|| Candidate {
            chain,
            matched,
            provenance: BTreeSet::new(),
            suggestions: BTreeSet::new(),
        });
        c.provenance.insert(ev.id.clone());
        for el in ev.elements.iter().filter(|el| el.role == ElementRole::S) {
            c.suggestions.insert(element_text(store, el));
        }
    }

    let mut ranked: Vec<RankedAnswer> = candidates
        .into_values()
        .map(|c| {
            let texts: Vec<String> = c.chain.iter().map(|el| element_text(store, el)).collect();
            let m = c.matched.min(texts.len().saturating_sub(1));
            let mut filled = BTreeMap::new();
            for &slot in &slots {
                let values: Vec<String> = match slot {
                    Slot::Cause if c.matched == 0 => texts.iter().take(1).cloned().collect(),
                    Slot::Cause => texts[..c.matched.min(texts.len())].to_vec(),
                    Slot::Deviation => role_texts(store, &c.chain, ElementRole::D),
                    Slot::Middle => role_texts(store, &c.chain, ElementRole::ME),
                    Slot::Consequence if m + 1 >= texts.len() => texts.last().cloned().into_iter().collect(),
                    Slot::Consequence => texts[m + 1..].to_vec(),
                    Slot::Suggestion => c.suggestions.iter().cloned().collect(),
                };
                filled.insert(slot, values);
            }
            let text = filled
                .iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|(s, v)| {
                    let sep = if *s == Slot::Suggestion { "; " } else { ", " };
                    format!("{}: {}.", s.label(), v.join(sep))
                })
                .collect::<Vec<_>>()
                .join(" ");
            let (path, relations) = chain_nodes(&c.chain);
            RankedAnswer {
                text,
                score: 1.0 / c.chain.len().max(1) as f64,
                path,
                relations,
                provenance: c.provenance.into_iter().collect(),
                path_length: c.chain.len(),
                slots: filled,
            }
        })
        .collect();
    ranked.sort_by(|a, b| {
        a.path_length
            .cmp(&b.path_length)
            .then(b.provenance.len().cmp(&a.provenance.len()))
            .then_with(|| a.text.cmp(&b.text))
    });
    ranked.truncate(k);
    let status = if ranked.is_empty() { AnswerStatus::NotFound } else { AnswerStatus::Ok };
    Ok(Answer {
        question: question.to_string(),
        status,
        message: None,
        entities,
        slots,
        answers: ranked,
    })
}

fn role_texts(store: &GraphStore, chain: &[EventElement], role: ElementRole) -> Vec<String> {
    chain.iter().filter(|el| el.role == role).map(|el| element_text(store, el)).collect()
}

/// Resolves a node reference given either as an id or as exact text.
pub fn resolve_node<'a>(store: &'a GraphStore, reference: &str) -> Option<&'a IskNode> {
    store.node(reference).or_else(|| {
        let text = normalize_text(reference);
        let mut c = store.find_text(&text);
        c.sort_by_key(|n| n.class.is_zeta());
        c.first().copied()
    })
}
