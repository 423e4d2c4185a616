use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sicsf_core::semantics::{canonicalize, flatten, parse, parse_bytes, Entity, SemanticsRecord, NONE};

fn record() -> impl Strategy<Value = SemanticsRecord> {
    let ident = "[a-z][a-z0-9_]{0,10}";
    let filler = prop_oneof![
        "[a-z ]{0,20}",
        any::<String>(),
        "[\\\\'\"{}\\[\\],: \n\t\r]{0,12}",
    ];
    (
        ident,
        ident,
        prop::collection::vec((ident, filler), 0..5),
    )
        .prop_map(|(s, a, es)| {
            SemanticsRecord::new(&s, &a, es.into_iter().map(|(k, f)| Entity::new(&k, f)).collect())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn parse_inverts_flatten(r in record()) {
        prop_assert_eq!(parse(&flatten(&r)), r);
    }

    #[test]
    fn canonicalize_is_idempotent(s in any::<String>()) {
        let c = canonicalize(&s);
        prop_assert_eq!(canonicalize(&c), c);
    }
}

#[test]
fn parse_is_total_on_random_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let alphabet = b"{}[]'\",: \\abn_tyeirsco";
    for i in 0..100_000 {
        let len = rng.gen_range(0..64);
        let bytes: Vec<u8> = if i % 2 == 0 {
            (0..len).map(|_| rng.gen()).collect()
        } else {
            (0..len).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
        };
        let r = parse_bytes(&bytes);
        assert!(!r.scenario().is_empty() && !r.action().is_empty());
    }
}

#[test]
fn mutated_canonical_strings_never_panic() {
    let base = flatten(&SemanticsRecord::new(
        "alarm",
        "set",
        vec![Entity::new("time", "five am"), Entity::new("date", "today")],
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20_000 {
        let mut b = base.clone().into_bytes();
        for _ in 0..rng.gen_range(1..4) {
            match rng.gen_range(0..3) {
                0 if !b.is_empty() => {
                    let i = rng.gen_range(0..b.len());
                    b.remove(i);
                }
                1 => {
                    let i = rng.gen_range(0..=b.len());
                    b.insert(i, rng.gen());
                }
                _ => {
                    let i = rng.gen_range(0..b.len().max(1));
                    b.truncate(i);
                }
            }
        }
        parse_bytes(&b);
    }
}

fn rec(s: &str, a: &str, es: &[(&str, &str)]) -> SemanticsRecord {
    SemanticsRecord::new(s, a, es.iter().map(|&(k, f)| Entity::new(k, f)).collect())
}

#[test]
fn recovery_fixture() {
    let empty = SemanticsRecord::empty();
    let cases: Vec<(&str, SemanticsRecord)> = vec![
        ("", empty.clone()),
        ("   ", empty.clone()),
        ("not a dict", empty.clone()),
        ("{'scenario': 'alarm'", empty.clone()),
        ("{'scenario': 'alarm', 'action': 'set', 'entities': [}", empty.clone()),
        ("['alarm', 'set']", empty.clone()),
        ("{'scenario' 'alarm'}", empty.clone()),
        ("{'scenario': 'alarm'} trailing", empty.clone()),
        ("{'scenario': 'al", empty.clone()),
        ("{'action': 'set', 'entities': []}", rec(NONE, "set", &[])),
        ("{'scenario': 'alarm', 'entities': []}", rec("alarm", NONE, &[])),
        ("{'scenario': 'alarm', 'action': 'set'}", rec("alarm", "set", &[])),
        ("{}", rec(NONE, NONE, &[])),
        ("{'scenario': 3, 'action': 'set', 'entities': []}", rec(NONE, "set", &[])),
        ("{'scenario': 'alarm', 'action': 'set', 'entities': 'x'}", rec("alarm", "set", &[])),
        (
            "{'scenario': 'alarm', 'action': 'set', 'entities': [{'type': 'time'}]}",
            rec("alarm", "set", &[]),
        ),
        (
            "{'scenario': 'alarm', 'action': 'set', 'entities': [{'type': 'time', 'filler': 'five am'}]}",
            rec("alarm", "set", &[("time", "five am")]),
        ),
        (
            "{\"scenario\": \"alarm\", \"action\": \"set\", \"entities\": []}",
            rec("alarm", "set", &[]),
        ),
        ("{'scenario': '', 'action': 'set', 'entities': []}", rec(NONE, "set", &[])),
        (
            "{'scenario': 'a', 'scenario': 'b', 'action': 'c', 'entities': []}",
            rec("b", "c", &[]),
        ),
    ];
    assert_eq!(cases.len(), 20);
    for (input, want) in cases {
        assert_eq!(parse(input), want, "input {input:?}");
    }
}
