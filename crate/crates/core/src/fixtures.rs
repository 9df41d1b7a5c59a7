//! Small hand-built hazard events for tests, the CLI demo graph and the
//! service's sample data.

use crate::graph::{build_store, build_triples, BuiltTriples, GraphStore};
use crate::iskf::{Entity, EntityClass};
use EntityClass::*;

type Pair<'a> = (&'a str, EntityClass, &'a str, EntityClass);

/// Builds one event from `(ζ, class, η, class)` pairs in narrative order.
pub fn event(id: &str, pairs: &[Pair]) -> BuiltTriples {
    build_triples(id, &flatten(pairs))
}

fn flatten(pairs: &[Pair]) -> Vec<Entity> {
    pairs
        .iter()
        .flat_map(|(z, zc, e, ec)| [Entity::new(*z, *zc), Entity::new(*e, *ec)])
        .collect()
}

/// "PICS0501 fault, the pressure of T-5642103 is too low, the rich liquid
/// flows in and the fuel gas pipe network is damaged, it is recommended to
/// add PV0501 interlocking".
pub fn pics0501_entities() -> Vec<Entity> {
    flatten(&[
        ("PICS0501", ProcessLabel, "fault", State),
        ("T-5642103", ProcessLabel, "pressure too low", State),
        ("rich liquid", Material, "flows in", State),
        ("fuel gas pipe network", Equipment, "damaged", Consequence),
        ("PV0501", ProcessLabel, "interlocking", State),
    ])
}

/// Staff mis-operation through engine damage, with a suggestion appended.
pub fn aviation_entities() -> Vec<Entity> {
    flatten(&[
        ("staff", Equipment, "mis-operation", State),
        ("oxygen content", Material, "too high", State),
        ("power", ProcessLabel, "too low", State),
        ("engine", Equipment, "chattering", State),
        ("engine", Equipment, "damage", Consequence),
        ("maintenance team", Equipment, "inspect engine", State),
    ])
}

/// Two compressor events plus an unrelated one.
pub fn compressor_events() -> Vec<BuiltTriples> {
    vec![
        event(
            "c1",
            &[
                ("Fischer Tropsch synthesis reactor", Equipment, "outlet pressure too high", State),
                ("C-5611101", Equipment, "inlet pressure too high", State),
                ("blowback gas", Material, "flows back", State),
                ("C-5611101", Equipment, "overpressure", Consequence),
                ("C-5611101", Equipment, "interlock", State),
            ],
        ),
        event(
            "c2",
            &[
                ("fine desulfurization heater", Equipment, "outlet temperature too high", State),
                ("C-5611101", Equipment, "flow too low", State),
                ("saturated steam", Material, "carried in", State),
                ("C-5611101", Equipment, "surge", Consequence),
                ("C-5611101", Equipment, "compressor shutdown", State),
            ],
        ),
        event(
            "c3",
            &[
                ("AE-5611101", Equipment, "fan stopped", State),
                ("light oil", Material, "temperature too high", State),
                ("separator", Equipment, "level too high", State),
                ("circulating gas", Material, "liquid carryover", Consequence),
                ("AE-5611101", Equipment, "start standby fan", State),
            ],
        ),
    ]
}

/// Two pumps feeding one shared deviation, middle event and consequence.
pub fn diamond_events() -> Vec<BuiltTriples> {
    let tail: [Pair; 4] = [
        ("feed line", Equipment, "pressure too low", State),
        ("reactor inlet", Equipment, "no flow", State),
        ("reactor", Equipment, "overheating damage", Consequence),
        ("PV0601", ProcessLabel, "low flow interlock", State),
    ];
    let mut a = vec![("pump P-101A", Equipment, "trip", State)];
    a.extend_from_slice(&tail);
    let mut b = vec![("pump P-101B", Equipment, "seal leak", State)];
    b.extend_from_slice(&tail);
    vec![event("d1", &a), event("d2", &b)]
}

/// The first event ends in ammonia leakage, the second starts with it.
pub fn ammonia_events() -> Vec<BuiltTriples> {
    vec![
        event(
            "a1",
            &[
                ("refrigeration compressor", Equipment, "shutdown", State),
                ("ammonia tank", Equipment, "pressure too high", State),
                ("safety valve", Equipment, "opens", State),
                ("ammonia", Material, "leakage", Consequence),
                ("PSV-7101", ProcessLabel, "regular inspection", State),
            ],
        ),
        event(
            "a2",
            &[
                ("ammonia", Material, "leakage", Consequence),
                ("workshop air", Material, "ammonia concentration too high", State),
                ("operator", Equipment, "inhalation", State),
                ("personnel", Equipment, "poisoning", Consequence),
                ("gas detector", Equipment, "install alarm", State),
            ],
        ),
    ]
}

/// Two events share the climate-driven air cooler chain and differ in
/// their suggestion; a longer event mentions the air cooler as a middle
/// event.
pub fn air_cooler_events() -> Vec<BuiltTriples> {
    let chain: [Pair; 4] = [
        ("climate", Material, "interference", State),
        ("oil and gas", Material, "temperature too low", State),
        ("pipeline", Equipment, "frozen and blocked", State),
        ("oil and gas air cooler", Equipment, "faulty", Consequence),
    ];
    let mut q1 = chain.to_vec();
    q1.push(("standby device", Equipment, "start", State));
    let mut q2 = chain.to_vec();
    q2.push(("pipeline", Equipment, "dredge", State));
    vec![
        event("q1", &q1),
        event("q2", &q2),
        event(
            "q3",
            &[
                ("feed pump", Equipment, "trip", State),
                ("oil and gas", Material, "flow too low", State),
                ("oil and gas air cooler", Equipment, "fan stopped", State),
                ("knockout drum", Equipment, "level too high", State),
                ("compressor", Equipment, "liquid hammer", Consequence),
                ("knockout drum", Equipment, "drain liquid", State),
            ],
        ),
    ]
}

/// One event whose chain revisits an element, so LEADS_TO edges form a
/// cycle.
pub fn cyclic_event() -> BuiltTriples {
    event(
        "loop",
        &[
            ("valve", Equipment, "sticks", State),
            ("line", Equipment, "pressure rises", State),
            ("valve", Equipment, "sticks", State),
            ("line", Equipment, "pressure rises", State),
            ("vessel", Equipment, "rupture", Consequence),
            ("valve", Equipment, "replace", State),
        ],
    )
}

/// Every fixture event above in one canonical store.
pub fn demo_store() -> GraphStore {
    let mut all = vec![build_triples("pics0501", &pics0501_entities())];
    all.extend(compressor_events());
    all.extend(diamond_events());
    all.extend(ammonia_events());
    all.extend(air_cooler_events());
    build_store(&all)
}
