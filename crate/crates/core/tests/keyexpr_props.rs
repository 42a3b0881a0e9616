use proptest::prelude::*;
use tricloud_core::transport::{match_key, KeyExpr, Router};

/// Recursive matcher over raw strings, written without `KeyExpr`.
fn oracle(pattern: &str, key: &str) -> bool {
    fn go(p: &[&str], k: &[&str]) -> bool {
        match (p.split_first(), k.split_first()) {
            (None, None) => true,
            (Some((ph, pt)), Some((kh, kt))) => (*ph == "*" || ph == kh) && go(pt, kt),
            _ => false,
        }
    }
    let p: Vec<&str> = pattern.split('/').collect();
    let k: Vec<&str> = key.split('/').collect();
    go(&p, &k)
}

fn segment() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("a".to_string()),
        Just("b".to_string()),
        Just("img7".to_string())
    ]
}

fn pattern_segment() -> impl Strategy<Value = String> {
    prop_oneof![segment(), Just("*".to_string())]
}

proptest! {
    #[test]
    fn match_key_agrees_with_oracle(
        p in proptest::collection::vec(pattern_segment(), 1..5),
        k in proptest::collection::vec(segment(), 1..5),
    ) {
        let (ps, ks) = (p.join("/"), k.join("/"));
        let pattern = KeyExpr::parse(&ps).unwrap();
        let key = KeyExpr::concrete(&ks).unwrap();
        prop_assert_eq!(match_key(&pattern, &key), oracle(&ps, &ks));
    }

    #[test]
    fn every_concrete_key_matches_itself(k in proptest::collection::vec(segment(), 1..6)) {
        let key = KeyExpr::concrete(&k.join("/")).unwrap();
        prop_assert!(match_key(&key, &key));
    }

    #[test]
    fn router_dispatch_counts_matching_subscribers(
        pats in proptest::collection::vec(proptest::collection::vec(pattern_segment(), 1..4), 0..6),
        k in proptest::collection::vec(segment(), 1..4),
    ) {
        let ks = k.join("/");
        let mut router = Router::new();
        for p in &pats {
            router.subscribe(&p.join("/"), |_: &KeyExpr, _: &[u8]| {}).unwrap();
        }
        let want = pats.iter().filter(|p| oracle(&p.join("/"), &ks)).count();
        prop_assert_eq!(router.dispatch(&KeyExpr::concrete(&ks).unwrap(), b"m"), want);
    }
}

#[test]
fn rejects_partial_wildcards_and_empty_segments() {
    for bad in ["", "a//b", "a/b*", "/a", "a/"] {
        assert!(KeyExpr::parse(bad).is_err(), "{bad}");
    }
    assert!(KeyExpr::concrete("a/*").is_err());
}
