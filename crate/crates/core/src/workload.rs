//! Synthetic large rulesets, shaped like a campus router with one VLAN
//! per interface. Used by the benches and the scaling tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fw_model::{
    Action, Chain, CtState, Ipassmt, MatchExpr, MatchPrim, Origin, Policy, PortRange, PrimKind, Rule,
    RulesetTable, StateSet,
};
use crate::wordset::{Cidr, IntervalSet, Width};

/// Uplink interface; everything outside `10.0.0.0/8` lives behind it.
pub const UPLINK: &str = "wan";

const PORTS: [u16; 6] = [22, 25, 53, 80, 443, 3306];

fn rule(prims: Vec<MatchPrim>, action: Action) -> Rule {
    Rule::new(MatchExpr::new(prims), action, Origin::new("", 0))
}

fn src(c: Cidr) -> PrimKind {
    PrimKind::SrcIp(c.to_set())
}

fn dst(c: Cidr) -> PrimKind {
    PrimKind::DstIp(c.to_set())
}

fn cidr(base: u32, len: u8) -> Cidr {
    Cidr::new(base, len, Width::IPV4).expect("aligned by construction")
}

fn vlan_net(k: usize) -> Cidr {
    cidr(0x0a00_0000 | ((k as u32 + 1) << 16), 16)
}

fn iface(k: usize) -> String {
    format!("vlan{}", k + 1)
}

/// Builds a `filter` table whose `FORWARD` chain unfolds to at least
/// `flat_rules` rules, together with an assignment for `n_ifaces`
/// interfaces (`n_ifaces - 1` VLANs plus the uplink). Every interface
/// is protected, so the whole table certifies.
pub fn vlan_firewall(n_ifaces: usize, flat_rules: usize, seed: u64) -> (RulesetTable, Ipassmt) {
    assert!(n_ifaces >= 2, "need at least one VLAN and the uplink");
    let vlans = n_ifaces - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let internal = cidr(0x0a00_0000, 8);

    let mut ipassmt = Ipassmt::new(Width::IPV4);
    for k in 0..vlans {
        ipassmt.insert(iface(k), vlan_net(k).to_set());
    }
    ipassmt.insert(UPLINK, internal.to_set().complement());

    let mut forward = Chain::builtin("FORWARD", Policy::Drop);
    let mut est = StateSet::new();
    est.insert(CtState::Established);
    est.insert(CtState::Related);
    forward.rules.push(rule(vec![MatchPrim::new(PrimKind::CtState(est))], Action::Accept));
    forward.rules.push(rule(
        vec![MatchPrim::new(PrimKind::InIface(UPLINK.into())), MatchPrim::new(src(internal))],
        Action::Drop,
    ));

    let mut chains = Vec::new();
    for k in 0..vlans {
        let name = format!("ranges_{}", k + 1);
        forward.rules.push(rule(
            vec![MatchPrim::new(PrimKind::InIface(iface(k)))],
            Action::Call(name.clone()),
        ));
        let mut ranges = Chain::user(name);
        ranges.rules.push(rule(vec![MatchPrim::new(src(vlan_net(k)))], Action::Return));
        ranges.rules.push(rule(vec![], Action::Log));
        ranges.rules.push(rule(vec![], Action::Drop));
        chains.push(ranges);
    }

    // After preprocessing: the uplink guard, one DROP per ranges chain and
    // the policy rule.
    let fixed = 2 + vlans;
    let budget = flat_rules.saturating_sub(fixed).max(n_ifaces);
    let per_chain = budget.div_ceil(n_ifaces);

    for k in 0..=vlans {
        let (in_iface, name) = if k < vlans {
            (iface(k), format!("filter_{}", k + 1))
        } else {
            (UPLINK.to_string(), "filter_wan".to_string())
        };
        forward.rules.push(rule(
            vec![MatchPrim::new(PrimKind::InIface(in_iface))],
            Action::Call(name.clone()),
        ));
        let mut filter = Chain::user(name);
        for _ in 0..per_chain {
            filter.rules.push(random_filter_rule(&mut rng, k, vlans));
        }
        chains.push(filter);
    }

    let mut table = RulesetTable::new("filter");
    let mut line = 2;
    forward.decl_line = line;
    line += 1;
    for c in &mut chains {
        c.decl_line = line;
        line += 1;
    }
    for c in std::iter::once(&mut forward).chain(chains.iter_mut()) {
        for r in &mut c.rules {
            r.origin = Origin::new(c.name.clone(), line);
            line += 1;
        }
    }
    table.add_chain(forward);
    for c in chains {
        table.add_chain(c);
    }
    (table, ipassmt)
}

fn random_filter_rule(rng: &mut ChaCha8Rng, k: usize, vlans: usize) -> Rule {
    let mut prims = Vec::new();
    let target = rng.gen_range(0..vlans);
    let host = vlan_net(target).base() | rng.gen_range(1..0xffffu32);
    prims.push(MatchPrim::new(dst(cidr(host, 32))));
    if k < vlans && rng.gen_bool(0.3) {
        // A subnet of the VLAN's own range, so the accepted set grows in
        // many small pieces.
        let sub = vlan_net(k).base() | (rng.gen_range(0..256u32) << 8);
        prims.push(MatchPrim::new(src(cidr(sub, 24))));
    }
    let proto = *["tcp", "udp"].choose(rng).expect("non-empty");
    prims.push(MatchPrim::new(PrimKind::Protocol(proto.into())));
    prims.push(MatchPrim::new(PrimKind::DstPort(PortRange::single(
        *PORTS.choose(rng).expect("non-empty"),
    ))));
    if rng.gen_bool(0.05) {
        prims.push(MatchPrim::new(PrimKind::Unknown("-m recent --rcheck --seconds 60".into())));
    }
    let action = match rng.gen_range(0..10) {
        0 => Action::Drop,
        1 => Action::Reject,
        _ => Action::Accept,
    };
    rule(prims, action)
}

/// Total size of the source ranges, handy as a sanity check.
pub fn assigned_total(ipassmt: &Ipassmt) -> u64 {
    ipassmt.iter().map(|(_, s): (&str, &IntervalSet)| s.count()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certifier::certify_all;
    use crate::preprocess::preprocess;

    #[test]
    fn small_firewall_certifies() {
        let (t, ip) = vlan_firewall(5, 200, 1);
        let flat = preprocess(&t, "FORWARD", true).unwrap();
        assert!(flat.len() >= 150);
        let res = certify_all(&flat, &ip).unwrap();
        assert_eq!(res.len(), 5);
        assert!(res.values().all(|r| r.certified), "{res:?}");
    }

    #[test]
    fn assignment_covers_everything_once() {
        let (_, ip) = vlan_firewall(4, 10, 0);
        assert_eq!(assigned_total(&ip), (1u64 << 32) - (1 << 24) + 3 * (1 << 16));
    }
}
