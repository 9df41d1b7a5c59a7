use std::collections::BTreeSet;

use iskg_core::apps::{
    answer, infer_paths, retrieve, trace_back, AnswerStatus, PathKind, RetrievalStatus, Slot, SlotKeywords,
    VocabularyExtractor, DEFAULT_TRACE_DEPTH, OUT_OF_SCOPE_MESSAGE,
};
use iskg_core::fixtures::*;
use iskg_core::graph::{build_store, build_triples, node_id, BuiltTriples, GraphStore, IskNode};
use iskg_core::iskf::{ElementRole, EntityClass};

fn texts(nodes: &[IskNode]) -> BTreeSet<String> {
    nodes.iter().map(|n| n.text.clone()).collect()
}

struct Groups {
    hazards: BTreeSet<String>,
    equipment: BTreeSet<String>,
    materials: BTreeSet<String>,
    suggestions: BTreeSet<String>,
}

/// Groups read straight off the fixture events, without the store.
fn group_oracle(events: &[BuiltTriples], subject: &str) -> Groups {
    let mut g = Groups {
        hazards: BTreeSet::new(),
        equipment: BTreeSet::new(),
        materials: BTreeSet::new(),
        suggestions: BTreeSet::new(),
    };
    for ev in events {
        if !ev.elements.iter().any(|(_, z, e)| z.text == subject || e.text == subject) {
            continue;
        }
        for (role, z, e) in &ev.elements {
            if z.text == subject && matches!(role, ElementRole::D | ElementRole::ME | ElementRole::C) {
                g.hazards.insert(e.text.clone());
            }
            if *role == ElementRole::S {
                g.suggestions.insert(e.text.clone());
            }
            for ent in [z, e] {
                if ent.text == subject {
                    continue;
                }
                match ent.class {
                    EntityClass::Equipment | EntityClass::ProcessLabel => {
                        g.equipment.insert(ent.text.clone());
                    }
                    EntityClass::Material => {
                        g.materials.insert(ent.text.clone());
                    }
                    _ => {}
                }
            }
        }
    }
    g
}

#[test]
fn compressor_retrieval_groups_its_neighborhood() {
    let events = compressor_events();
    let store = build_store(&events);
    let r = retrieve(&store, "C-5611101");
    assert_eq!(r.status, RetrievalStatus::Found);
    assert_eq!(r.events, vec!["c1", "c2"]);

    let hazards = texts(&r.hazards);
    for h in ["overpressure", "surge"] {
        assert!(hazards.contains(h), "{h}");
    }
    let equipment = texts(&r.cooperative_equipment);
    for e in ["Fischer Tropsch synthesis reactor", "fine desulfurization heater"] {
        assert!(equipment.contains(e), "{e}");
    }
    let materials = texts(&r.related_materials);
    assert_eq!(materials, BTreeSet::from(["blowback gas".to_string(), "saturated steam".to_string()]));
    let suggestions = texts(&r.suggestions);
    for s in ["interlock", "compressor shutdown"] {
        assert!(suggestions.contains(s), "{s}");
    }
    // Nothing from the unrelated event leaks in.
    for n in r.hazards.iter().chain(&r.cooperative_equipment).chain(&r.related_materials).chain(&r.suggestions) {
        assert!(!["AE-5611101", "light oil", "separator", "circulating gas"].contains(&n.text.as_str()));
    }

    let want = group_oracle(&events, "C-5611101");
    assert_eq!(hazards, want.hazards);
    assert_eq!(equipment, want.equipment);
    assert_eq!(materials, want.materials);
    assert_eq!(suggestions, want.suggestions);

    assert_eq!(retrieve(&store, "C-9999999").status, RetrievalStatus::NotFound);
}

#[test]
fn retrieval_agrees_with_the_oracle_for_every_zeta() {
    let mut events = compressor_events();
    events.extend(air_cooler_events());
    events.extend(diamond_events());
    let store = build_store(&events);
    let subjects: BTreeSet<String> = events
        .iter()
        .flat_map(|e| e.elements.iter().map(|(_, z, _)| z.text.clone()))
        .collect();
    for s in subjects {
        let r = retrieve(&store, &s);
        let want = group_oracle(&events, &s);
        assert_eq!(texts(&r.hazards), want.hazards, "{s}");
        assert_eq!(texts(&r.cooperative_equipment), want.equipment, "{s}");
        assert_eq!(texts(&r.related_materials), want.materials, "{s}");
        assert_eq!(texts(&r.suggestions), want.suggestions, "{s}");
    }
}

#[test]
fn diamond_traces_back_to_both_pumps() {
    let store = build_store(&diamond_events());
    let target = node_id("overheating damage", EntityClass::Consequence);
    let paths = trace_back(&store, &target, DEFAULT_TRACE_DEPTH).unwrap();
    assert_eq!(paths.len(), 2);
    let starts: Vec<&str> = paths.iter().map(|p| p.texts(&store)[0]).collect();
    assert_eq!(starts, vec!["pump P-101A", "pump P-101B"]);
    for (p, id) in paths.iter().zip(["d1", "d2"]) {
        assert_eq!(p.kind, PathKind::Observed);
        assert_eq!(p.provenance, vec![id]);
        assert_eq!(p.element_count(), 4);
        assert_eq!(p.nodes.last(), Some(&target));
        assert!(p.edges(&store).iter().all(Option::is_some));
    }
    assert_eq!(
        paths[0].render(&store),
        "pump P-101A -IC-> trip -LEADS_TO-> feed line -D-> pressure too low -LEADS_TO-> reactor inlet -ME-> no flow \
         -LEADS_TO-> reactor -C-> overheating damage"
    );
    // The depth cap counts elements.
    assert!(trace_back(&store, &target, 3).unwrap().is_empty());
    assert!(trace_back(&store, "nope", 4).is_err());
}

#[test]
fn cyclic_chain_terminates_without_repeating_nodes() {
    let store = build_store([&cyclic_event()]);
    let target = node_id("rupture", EntityClass::Consequence);
    let paths = trace_back(&store, &target, 100).unwrap();
    assert!(!paths.is_empty());
    for p in &paths {
        let unique: BTreeSet<&String> = p.nodes.iter().collect();
        assert_eq!(unique.len(), p.nodes.len(), "{}", p.render(&store));
        assert_eq!(p.texts(&store)[0], "valve");
    }
}

#[test]
fn ammonia_leak_splices_two_events() {
    let events = ammonia_events();
    let store = build_store(&events);
    let paths = infer_paths(&store);
    assert_eq!(paths.len(), 1);
    let p = &paths[0];
    assert_eq!(p.kind, PathKind::Inferred);
    assert_eq!(
        p.texts(&store),
        vec![
            "refrigeration compressor",
            "shutdown",
            "ammonia tank",
            "pressure too high",
            "safety valve",
            "opens",
            "ammonia",
            "leakage",
            "workshop air",
            "ammonia concentration too high",
            "operator",
            "inhalation",
            "personnel",
            "poisoning",
        ]
    );
    assert_eq!(p.provenance, vec!["a1", "a2"]);
    assert_eq!(p.joins.len(), 1);
    assert_eq!(p.joins[0].node, node_id("leakage", EntityClass::Consequence));
    assert!(p.edges(&store).iter().all(Option::is_some));

    let reversed: Vec<BuiltTriples> = events.iter().rev().cloned().collect();
    assert_eq!(infer_paths(&build_store(&reversed)), paths);
}

#[test]
fn no_inference_without_shared_vocabulary() {
    let mut events = compressor_events();
    events.push(build_triples("pics0501", &pics0501_entities()));
    assert!(infer_paths(&build_store(&events)).is_empty());
    // Shared middle events that one event already covers are not new.
    assert!(infer_paths(&build_store(&diamond_events())).is_empty());
}

fn air_cooler_store() -> GraphStore {
    build_store(&air_cooler_events())
}

#[test]
fn air_cooler_question_pools_causes_and_suggestions() {
    let store = air_cooler_store();
    let ex = VocabularyExtractor::from_store(&store);
    let q = "The oil and gas air cooler is faulty. What causes? What suggestions?";
    let a = answer(&store, q, 3, &ex, &SlotKeywords::default()).unwrap();
    assert_eq!(a.status, AnswerStatus::Ok);
    assert_eq!(a.slots, vec![Slot::Cause, Slot::Suggestion]);
    let top = &a.answers[0];
    for s in ["oil and gas temperature too low", "pipeline frozen and blocked", "standby device start", "pipeline dredge"] {
        assert!(top.text.contains(s), "{s} missing from {}", top.text);
    }
    assert_eq!(top.provenance, vec!["q1", "q2"]);
    assert_eq!(top.path_length, 4);
    assert_eq!(a.answers.len(), 2);
    assert_eq!(a.answers[1].provenance, vec!["q3"]);
    assert!(a.answers[0].score > a.answers[1].score);

    // The answer path is made of real edges carrying its provenance.
    for ans in &a.answers {
        for (w, r) in ans.path.windows(2).zip(&ans.relations) {
            let e = store.edge(&w[0], *r, &w[1]).expect("edge on answer path");
            for id in &ans.provenance {
                assert!(e.provenance.contains(id));
            }
        }
    }
}

#[test]
fn out_of_scope_question_is_refused() {
    let store = air_cooler_store();
    let ex = VocabularyExtractor::from_store(&store);
    let a = answer(&store, "Who won the football match yesterday?", 3, &ex, &SlotKeywords::default()).unwrap();
    assert_eq!(a.status, AnswerStatus::Refused);
    assert_eq!(a.message.as_deref(), Some(OUT_OF_SCOPE_MESSAGE));
    assert!(a.answers.is_empty());
    assert!(answer(&store, "  ", 3, &ex, &SlotKeywords::default()).is_err());
    assert!(answer(&store, "faulty?", 0, &ex, &SlotKeywords::default()).is_err());
}

#[test]
fn large_k_returns_every_candidate_once() {
    let store = air_cooler_store();
    let ex = VocabularyExtractor::from_store(&store);
    let q = "What is the consequence of oil and gas air cooler faulty?";
    let a = answer(&store, q, 50, &ex, &SlotKeywords::default()).unwrap();
    let b = answer(&store, q, 2, &ex, &SlotKeywords::default()).unwrap();
    assert_eq!(a.answers, b.answers);
    let one = answer(&store, q, 1, &ex, &SlotKeywords::default()).unwrap();
    assert_eq!(one.answers[..], a.answers[..1]);
}
