//! Grammar-driven synthetic HAZOP descriptions with gold hazard events.
//!
//! Every sentence realizes one full `IC, D, ME (1..=max_middle), C, S`
//! chain. Elements are rendered from role templates in which `{z}` and `{e}`
//! stand for the ζ and η entity; surface strings are space-separated
//! pseudo-word tokens.

use std::collections::BTreeMap;

use iskg_numerics::Rng;
use serde::{Deserialize, Serialize};

use super::{bio_encode, make_tokens, Dataset, LabeledSentence, Span, Tokenizer};
use crate::iskf::{ElementRole, Entity, EntityClass, HazardElement, HazardEvent};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub role: ElementRole,
    pub pattern: String,
}

impl Template {
    fn new(role: ElementRole, pattern: &str) -> Self {
        Self {
            role,
            pattern: pattern.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGrammar {
    /// Surface strings per entity class. `State` entries serve the
    /// IC, D and ME elements.
    pub vocab: BTreeMap<EntityClass, Vec<String>>,
    /// `State` surfaces used for suggestion elements.
    pub suggestions: Vec<String>,
    pub templates: Vec<Template>,
    /// Tokens placed between consecutive elements.
    pub connectives: Vec<String>,
    /// Closing token of every sentence.
    pub terminal: String,
    pub max_middle: usize,
    /// Gold events are spread over `node-0 .. node-{nodes-1}`.
    pub nodes: usize,
    pub seed: u64,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl SynthGrammar {
    /// The built-in grammar modelled on coal-to-liquids HAZOP records.
    pub fn default_hazop(seed: u64) -> Self {
        use ElementRole::*;
        use EntityClass::*;
        let equipment = strings(&[
            "compressor",
            "circulating gas compressor",
            "air cooler",
            "oil gas air cooler",
            "knockout drum",
            "flash tank",
            "rich liquid flash tank",
            "heat exchanger",
            "separator",
            "synthesis reactor",
            "reactor",
            "pipeline",
            "process pipeline",
            "regulating valve",
            "valve",
            "feed pump",
            "pump",
            "stripper",
            "deaerator",
            "heater",
            "desulfurization heater",
            "wax tank",
            "fuel gas pipe network",
            "temperature controller",
            "pressure controller",
            "level gauge",
            "cooling tower",
            "condenser",
            "boiler",
            "filter",
        ]);
        let prefixes = ["T", "C", "PV", "PICS", "AE", "E", "P", "LIC", "FIC", "TIC"];
        let numbers = ["5642103", "5611101", "0501", "5753001", "2201", "3304", "4410102", "1105"];
        let mut labels = Vec::new();
        for p in prefixes {
            for n in numbers {
                if p.len() >= 2 && n.len() <= 4 {
                    labels.push(format!("{p}{n}"));
                } else {
                    labels.push(format!("{p} - {n}"));
                }
            }
        }
        let materials = strings(&[
            "rich liquid",
            "liquid ammonia",
            "ammonia",
            "syngas",
            "steam",
            "saturated steam",
            "blowback gas",
            "circulating gas",
            "fuel gas",
            "naphtha",
            "stabilized wax",
            "catalyst slurry",
            "cooling water",
            "hydrogen",
            "oxygen",
            "carbon monoxide",
            "tail gas",
            "light oil",
            "heavy diesel",
            "methanol",
        ]);
        let states = strings(&[
            "fault",
            "failure",
            "pressure too low",
            "pressure too high",
            "temperature too high",
            "temperature too low",
            "flow too low",
            "no flow",
            "reverse flow",
            "level too high",
            "level too low",
            "flows in",
            "blocked",
            "frozen and blocked",
            "overpressure",
            "surge",
            "vibration",
            "misoperation",
            "opening too small",
            "water storage",
            "corrosion",
            "overheating",
            "cavitation",
            "leakage",
        ]);
        let consequences = strings(&[
            "damaged",
            "damage",
            "rupture",
            "fire",
            "explosion",
            "casualties",
            "equipment damage",
            "unplanned shutdown",
            "poisoning",
            "environmental pollution",
            "release of harmful substances",
            "production loss",
        ]);
        let suggestions = strings(&[
            "interlocking",
            "interlock",
            "alarm",
            "shutdown",
            "regular inspection",
            "standby switch",
            "emergency venting",
            "dredging",
            "pressure alarm",
            "high level alarm",
            "start standby device",
        ]);
        let vocab = BTreeMap::from([
            (Equipment, equipment),
            (ProcessLabel, labels),
            (Material, materials),
            (State, states),
            (Consequence, consequences),
        ]);
        let templates = vec![
            Template::new(IC, "{z} {e}"),
            Template::new(IC, "due to {z} {e}"),
            Template::new(IC, "{z} has {e}"),
            Template::new(D, "{z} {e}"),
            Template::new(D, "the {z} {e}"),
            Template::new(D, "{z} is {e}"),
            Template::new(ME, "{z} {e}"),
            Template::new(ME, "then {z} {e}"),
            Template::new(ME, "the {z} {e}"),
            Template::new(C, "{z} {e}"),
            Template::new(C, "the {z} is {e}"),
            Template::new(C, "eventually {z} {e}"),
            Template::new(S, "recommend {z} {e}"),
            Template::new(S, "it is recommended to add {z} {e}"),
            Template::new(S, "suggest {z} {e}"),
        ];
        Self {
            vocab,
            suggestions,
            templates,
            connectives: strings(&[",", ";"]),
            terminal: ".".to_string(),
            max_middle: 2,
            nodes: 20,
            seed,
        }
    }

    /// ζ classes a role may draw from.
    pub fn zeta_classes(role: ElementRole) -> &'static [EntityClass] {
        use EntityClass::*;
        match role {
            ElementRole::IC | ElementRole::D => &[Equipment, ProcessLabel, Material],
            ElementRole::ME | ElementRole::C => &[Equipment, Material],
            ElementRole::S => &[Equipment, ProcessLabel],
        }
    }

    fn eta_pool(&self, role: ElementRole) -> (EntityClass, &[String]) {
        match role {
            ElementRole::C => (EntityClass::Consequence, self.pool(EntityClass::Consequence)),
            ElementRole::S => (EntityClass::State, &self.suggestions),
            _ => (EntityClass::State, self.pool(EntityClass::State)),
        }
    }

    fn pool(&self, class: EntityClass) -> &[String] {
        self.vocab.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Names the first empty pool, if any.
    pub fn check(&self) -> Result<(), String> {
        for role in ElementRole::ALL {
            if !self.templates.iter().any(|t| t.role == role) {
                return Err(format!("no template for role {role}"));
            }
            for &c in Self::zeta_classes(role) {
                if self.pool(c).is_empty() {
                    return Err(format!("empty vocabulary for {c}"));
                }
            }
            if self.eta_pool(role).1.is_empty() {
                return Err(format!("empty eta vocabulary for role {role}"));
            }
        }
        if self.max_middle == 0 || self.nodes == 0 {
            return Err("max_middle and nodes must be positive".into());
        }
        Ok(())
    }
}

/// Generated sentences with one gold event per sentence, index-aligned.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub events: Vec<HazardEvent>,
}

/// Generates `n` sentences. Sentence `i` depends only on the grammar and
/// `i`, so a longer corpus extends a shorter one.
///
/// Panics if the grammar has an empty pool (see [`SynthGrammar::check`]).
pub fn generate_synthetic(grammar: &SynthGrammar, n: usize) -> SynthCorpus {
    if let Err(e) = grammar.check() {
        panic!("invalid grammar: {e}");
    }
    let mut corpus = SynthCorpus::default();
    for i in 0..n {
        let mut rng = Rng::derive(grammar.seed, &[i as u64]);
        let (sentence, event) = generate_one(grammar, &mut rng, i);
        corpus.dataset.sentences.push(sentence);
        corpus.events.push(event);
    }
    corpus
}

fn generate_one(g: &SynthGrammar, rng: &mut Rng, i: usize) -> (LabeledSentence, HazardEvent) {
    let middles = 1 + rng.below(g.max_middle);
    let mut roles = vec![ElementRole::IC, ElementRole::D];
    roles.extend(std::iter::repeat_n(ElementRole::ME, middles));
    roles.extend([ElementRole::C, ElementRole::S]);

    let mut words: Vec<String> = Vec::new();
    let mut spans = Vec::new();
    let mut elements = Vec::new();
    for (k, &role) in roles.iter().enumerate() {
        if k > 0 {
            words.push(rng.choose(&g.connectives).clone());
        }
        let zeta_class = *rng.choose(SynthGrammar::zeta_classes(role));
        let zeta = rng.choose(g.pool(zeta_class)).clone();
        let (eta_class, eta_pool) = g.eta_pool(role);
        let eta = rng.choose(eta_pool).clone();
        let candidates: Vec<&Template> = g.templates.iter().filter(|t| t.role == role).collect();
        let template = *rng.choose(&candidates);
        for piece in template.pattern.split_whitespace() {
            let (surface, class) = match piece {
                "{z}" => (&zeta, Some(zeta_class)),
                "{e}" => (&eta, Some(eta_class)),
                other => {
                    words.push(other.to_string());
                    continue;
                }
            };
            let start = words.len();
            words.extend(surface.split_whitespace().map(str::to_string));
            if let Some(class) = class {
                spans.push(Span::new(start, words.len(), class));
            }
        }
        let render = |s: &str| super::join_tokens(s.split_whitespace(), Tokenizer::Whitespace);
        elements.push(
            HazardElement::new(
                role,
                Entity::new(render(&zeta), zeta_class),
                Entity::new(render(&eta), eta_class),
            )
            .expect("grammar classes are valid zeta/eta classes"),
        );
    }
    words.push(g.terminal.clone());

    let labels = bio_encode(words.len(), &spans).expect("template spans never overlap");
    let sentence = LabeledSentence {
        id: format!("syn{i}"),
        tokens: make_tokens(words.iter().map(String::as_str)),
        labels,
    };
    let node = format!("node-{}", rng.below(g.nodes));
    let event = HazardEvent::from_elements(node, elements).expect("generated chains are valid events");
    (sentence, event)
}
