use proptest::prelude::*;

use spoofcert::fw_model::{Action, CtState, MatchExpr, MatchPrim, Origin, PortRange, PrimKind, Rule, StateSet};
use spoofcert::parser::{parse_rule_spec, parse_save, tokenize};
use spoofcert::{Cidr, IntervalSet, Width};

fn cidr() -> impl Strategy<Value = Cidr> {
    (any::<u32>(), 0u8..=32).prop_map(|(raw, len)| {
        let base = if len == 0 { 0 } else { raw >> (32 - len) << (32 - len) };
        Cidr::new(base, len, Width::IPV4).unwrap()
    })
}

fn addr_set() -> impl Strategy<Value = IntervalSet> {
    prop::collection::vec(cidr(), 1..4).prop_map(|cs| {
        cs.iter()
            .fold(IntervalSet::empty(Width::IPV4), |acc, c| acc.union(&c.to_set()).unwrap())
    })
}

fn state_set() -> impl Strategy<Value = StateSet> {
    prop::collection::btree_set(0usize..5, 1..4).prop_map(|ix| ix.into_iter().map(|i| CtState::ALL[i]).collect())
}

#[derive(Debug, Clone)]
struct Spec {
    prims: Vec<MatchPrim>,
    action: Action,
}

fn known_spec() -> impl Strategy<Value = Spec> {
    (
        prop::option::of(("[a-z]{2,5}[0-9]{0,2}\\+?", any::<bool>())),
        prop::option::of((addr_set(), any::<bool>())),
        prop::option::of((addr_set(), any::<bool>())),
        prop::option::of((prop::sample::select(vec!["tcp", "udp", "icmp"]), any::<bool>())),
        prop::option::of((any::<u16>(), any::<u16>(), any::<bool>())),
        prop::option::of((state_set(), any::<bool>())),
        prop::sample::select(vec![
            Action::Accept,
            Action::Drop,
            Action::Reject,
            Action::Log,
            Action::Return,
            Action::Empty,
            Action::Call("user_chain".into()),
        ]),
    )
        .prop_map(|(i, s, d, p, port, st, action)| {
            let mut prims = Vec::new();
            let mk = |kind, negated| MatchPrim { kind, negated };
            if let Some((name, n)) = i {
                prims.push(mk(PrimKind::InIface(name), n));
            }
            if let Some((set, n)) = s {
                prims.push(mk(PrimKind::SrcIp(set), n));
            }
            if let Some((set, n)) = d {
                prims.push(mk(PrimKind::DstIp(set), n));
            }
            if let Some((proto, n)) = p {
                prims.push(mk(PrimKind::Protocol(proto.into()), n));
                // Ports are only understood after a plain tcp or udp match.
                if let (false, "tcp" | "udp", Some((a, b, pn))) = (n, proto, port) {
                    let range = PortRange { lo: a.min(b), hi: a.max(b) };
                    prims.push(mk(PrimKind::DstPort(range), pn));
                }
            }
            if let Some((states, n)) = st {
                prims.push(mk(PrimKind::CtState(states), n));
            }
            Spec { prims, action }
        })
}

fn render(spec: &Spec) -> String {
    Rule::new(MatchExpr::new(spec.prims.clone()), spec.action.clone(), Origin::new("FORWARD", 1)).to_string()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn known_rules_round_trip(spec in known_spec()) {
        let text = render(&spec);
        let tokens = tokenize(&text).unwrap();
        let parsed = parse_rule_spec(&tokens, Width::IPV4).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
        prop_assert_eq!(parsed.match_expr, MatchExpr::new(spec.prims.clone()), "{}", text);
        prop_assert_eq!(parsed.action, spec.action.clone());
        prop_assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn unknown_text_is_kept_verbatim(
        spec in known_spec(),
        raw in prop::sample::select(vec![
            "--foo",
            "-m limit --limit 1/s",
            "-m recent --rcheck --seconds 60 --name knock",
            "-m multiport --dports 25,587",
            "-o wan",
        ]),
    ) {
        let base = render(&Spec { action: Action::Accept, ..spec });
        let text = format!("{raw} {base}");
        let parsed = parse_rule_spec(&tokenize(&text).unwrap(), Width::IPV4).unwrap();
        let unknowns: Vec<&MatchPrim> = parsed.match_expr.conjuncts().iter().filter(|p| p.is_unknown()).collect();
        prop_assert_eq!(unknowns.len(), 1);
        prop_assert_eq!(&unknowns[0].kind, &PrimKind::Unknown(raw.to_string()));
        prop_assert!(parsed.match_expr.to_string().starts_with(raw));
    }

    #[test]
    fn parse_save_never_panics(text in "(\\*filter\n|:FORWARD DROP \\[0:0\\]\n|-A FORWARD |! |-s |-i eth0 |-j |ACCEPT|10\\.0\\.0\\.0/8 |--foo |COMMIT\n|\n|[ -~]{0,12})*") {
        let _ = parse_save(&text);
    }

    #[test]
    fn parse_save_never_panics_on_bytes(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = parse_save(&String::from_utf8_lossy(&bytes));
    }
}
