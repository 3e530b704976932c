//! Spoofing-protection certification.
//!
//! For one interface `i`, a single pass over the preprocessed rules grows
//! two sets of source addresses:
//!
//! * `A`, an over-approximation of the sources some packet from `i` could
//!   be accepted with, and
//! * `D`, an under-approximation of the sources every packet from `i` is
//!   dropped with.
//!
//! The interface is certified when `A \ D` lies inside its assigned range.
//! Unknown match conditions only ever widen `A` or shrink `D`, so a
//! positive verdict holds for every possible meaning of those conditions.

use std::ops::{BitAnd, Not};

use indexmap::IndexMap;
use thiserror::Error;

use crate::fw_model::{
    Action, CertResult, Ipassmt, MatchExpr, PacketPattern, PrimKind, Rule, Violation,
};
use crate::par::{IntoParallelRefIterator, ParallelIterator};
use crate::wordset::{IntervalSet, Width, WordsetError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CertifyError {
    #[error("rule {index} has action {action:?}; preprocess the ruleset first")]
    NotPreprocessed { index: usize, action: Action },
    #[error("the interface assignment is empty")]
    EmptyIpassmt,
    #[error(transparent)]
    Wordset(#[from] WordsetError),
}

/// Kleene three-valued truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ternary {
    True,
    False,
    Unknown,
}

impl From<bool> for Ternary {
    fn from(b: bool) -> Self {
        if b {
            Ternary::True
        } else {
            Ternary::False
        }
    }
}

impl Not for Ternary {
    type Output = Ternary;

    fn not(self) -> Ternary {
        match self {
            Ternary::True => Ternary::False,
            Ternary::False => Ternary::True,
            Ternary::Unknown => Ternary::Unknown,
        }
    }
}

impl BitAnd for Ternary {
    type Output = Ternary;

    fn bitand(self, rhs: Ternary) -> Ternary {
        match (self, rhs) {
            (Ternary::False, _) | (_, Ternary::False) => Ternary::False,
            (Ternary::True, Ternary::True) => Ternary::True,
            _ => Ternary::Unknown,
        }
    }
}

/// Interface name matching with iptables' trailing-`+` wildcard.
pub fn iface_matches(pattern: &str, iface: &str) -> bool {
    match pattern.strip_suffix('+') {
        Some(prefix) => iface.starts_with(prefix),
        None => pattern == iface,
    }
}

/// False if some (possibly negated) input-interface primitive rules out `iface`.
fn ifaces_allow(m: &MatchExpr, iface: &str) -> bool {
    m.conjuncts().iter().all(|p| match &p.kind {
        PrimKind::InIface(pat) => iface_matches(pat, iface) != p.negated,
        _ => true,
    })
}

fn src_intersection(m: &MatchExpr, width: Width) -> Result<IntervalSet, CertifyError> {
    let mut acc = IntervalSet::universe(width);
    for p in m.conjuncts() {
        if let PrimKind::SrcIp(set) = &p.kind {
            let s = if p.negated {
                set.complement()
            } else {
                set.clone()
            };
            acc = acc.intersect(&s)?;
        }
    }
    Ok(acc)
}

/// Superset of the sources with which some packet from `iface` may match
/// `m`. Everything except interface and source primitives is assumed
/// satisfiable.
pub fn may_match_srcs(m: &MatchExpr, iface: &str, width: Width) -> Result<IntervalSet, CertifyError> {
    if !ifaces_allow(m, iface) {
        return Ok(IntervalSet::empty(width));
    }
    src_intersection(m, width)
}

/// Subset of the sources with which every packet from `iface` matches `m`.
/// Empty as soon as `m` has anything besides interface and source
/// primitives.
pub fn must_match_srcs(m: &MatchExpr, iface: &str, width: Width) -> Result<IntervalSet, CertifyError> {
    if !ifaces_allow(m, iface) {
        return Ok(IntervalSet::empty(width));
    }
    let only_known = m
        .conjuncts()
        .iter()
        .all(|p| matches!(p.kind, PrimKind::InIface(_) | PrimKind::SrcIp(_)));
    if !only_known {
        return Ok(IntervalSet::empty(width));
    }
    src_intersection(m, width)
}

/// The running `(A, D)` pair for one interface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpState {
    pub allowed: IntervalSet,
    pub denied: IntervalSet,
}

impl SpState {
    pub fn new(width: Width) -> Self {
        SpState {
            allowed: IntervalSet::empty(width),
            denied: IntervalSet::empty(width),
        }
    }

    /// Consumes one preprocessed rule.
    pub fn step(&mut self, index: usize, rule: &Rule, iface: &str) -> Result<(), CertifyError> {
        let width = self.allowed.width();
        match rule.action {
            Action::Accept => {
                let may = may_match_srcs(&rule.match_expr, iface, width)?;
                self.allowed.union_with(&may)?;
            }
            Action::Drop => {
                let must = must_match_srcs(&rule.match_expr, iface, width)?;
                if !must.is_empty() {
                    let fresh = must.difference(&self.allowed)?;
                    self.denied.union_with(&fresh)?;
                }
            }
            ref other => {
                return Err(CertifyError::NotPreprocessed {
                    index,
                    action: other.clone(),
                })
            }
        }
        Ok(())
    }

    /// `A \ D`.
    pub fn net_allowed(&self) -> Result<IntervalSet, CertifyError> {
        Ok(self.allowed.difference(&self.denied)?)
    }
}

/// States after each prefix of `rules`: element `k` is the state after the
/// first `k` rules.
pub fn sp_trace(rules: &[Rule], iface: &str, width: Width) -> Result<Vec<SpState>, CertifyError> {
    let mut state = SpState::new(width);
    let mut out = Vec::with_capacity(rules.len() + 1);
    out.push(state.clone());
    for (index, rule) in rules.iter().enumerate() {
        state.step(index, rule, iface)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Certifies spoofing protection of `iface`, whose permitted sources are
/// `assigned`.
pub fn sp(rules: &[Rule], iface: &str, assigned: &IntervalSet) -> Result<CertResult, CertifyError> {
    let width = assigned.width();
    let mut state = SpState::new(width);
    for (index, rule) in rules.iter().enumerate() {
        state.step(index, rule, iface)?;
    }
    let final_allowed = state.net_allowed()?;
    if final_allowed.is_subset(assigned)? {
        return Ok(CertResult {
            certified: true,
            first_violation: None,
            final_allowed,
        });
    }
    // `A \ D` only grows along the pass (D never takes addresses already in
    // A), so the first prefix with a stray source is well defined.
    let mut replay = SpState::new(width);
    let mut first_violation = None;
    for (index, rule) in rules.iter().enumerate() {
        replay.step(index, rule, iface)?;
        let offending = replay.net_allowed()?.difference(assigned)?;
        if !offending.is_empty() {
            first_violation = Some(Violation {
                rule_index: index,
                offending,
            });
            break;
        }
    }
    Ok(CertResult {
        certified: false,
        first_violation,
        final_allowed,
    })
}

/// Runs [`sp`] for every interface of `ipassmt`, in parallel when built
/// with the `parallel` feature. Results keep the assignment's order.
pub fn certify_all(rules: &[Rule], ipassmt: &Ipassmt) -> Result<IndexMap<String, CertResult>, CertifyError> {
    if ipassmt.is_empty() {
        return Err(CertifyError::EmptyIpassmt);
    }
    let entries: Vec<(&str, &IntervalSet)> = ipassmt.iter().collect();
    let results: Vec<(String, CertResult)> = entries
        .par_iter()
        .map(|(iface, assigned)| sp(rules, iface, assigned).map(|r| (iface.to_string(), r)))
        .collect::<Result<_, _>>()?;
    Ok(results.into_iter().collect())
}

/// Single-threaded [`certify_all`].
pub fn certify_all_sequential(
    rules: &[Rule],
    ipassmt: &Ipassmt,
) -> Result<IndexMap<String, CertResult>, CertifyError> {
    if ipassmt.is_empty() {
        return Err(CertifyError::EmptyIpassmt);
    }
    ipassmt
        .iter()
        .map(|(iface, assigned)| sp(rules, iface, assigned).map(|r| (iface.to_string(), r)))
        .collect()
}

/// Three-valued `matches m p`. Missing packet fields and unknown
/// primitives evaluate to `Unknown`.
pub fn eval_ternary(m: &MatchExpr, p: &PacketPattern) -> Ternary {
    m.conjuncts().iter().fold(Ternary::True, |acc, prim| {
        let v = match &prim.kind {
            PrimKind::InIface(pat) => iface_matches(pat, &p.in_iface).into(),
            PrimKind::SrcIp(set) => set.contains(p.src_ip).into(),
            PrimKind::DstIp(set) => match p.dst_ip {
                Some(d) => set.contains(d).into(),
                None => Ternary::Unknown,
            },
            PrimKind::Protocol(name) => match &p.protocol {
                _ if name == "all" => Ternary::True,
                Some(proto) => proto.eq_ignore_ascii_case(name).into(),
                None => Ternary::Unknown,
            },
            PrimKind::DstPort(range) => match p.dst_port {
                Some(port) => range.contains(port).into(),
                None => Ternary::Unknown,
            },
            PrimKind::CtState(states) => states.contains(p.state).into(),
            PrimKind::Unknown(_) => Ternary::Unknown,
        };
        acc & if prim.negated { !v } else { v }
    })
}

/// True only if `p` is accepted however the unknowns are read: an ACCEPT
/// that definitely matches is reached before any DROP that possibly does.
pub fn certify_access(rules: &[Rule], p: &PacketPattern) -> Result<bool, CertifyError> {
    for (index, rule) in rules.iter().enumerate() {
        let t = eval_ternary(&rule.match_expr, p);
        match rule.action {
            Action::Accept if t == Ternary::True => return Ok(true),
            Action::Accept => {}
            Action::Drop if t != Ternary::False => return Ok(false),
            Action::Drop => {}
            ref other => {
                return Err(CertifyError::NotPreprocessed {
                    index,
                    action: other.clone(),
                })
            }
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fw_model::{CtState, MatchPrim, Origin, PortRange};
    use crate::wordset::Cidr;

    fn w8() -> Width {
        Width::new(8).unwrap()
    }

    fn cidr(s: &str) -> IntervalSet {
        Cidr::parse(s, w8()).unwrap().to_set()
    }

    fn iif(name: &str) -> MatchPrim {
        MatchPrim::new(PrimKind::InIface(name.into()))
    }

    fn src(s: &str) -> MatchPrim {
        MatchPrim::new(PrimKind::SrcIp(cidr(s)))
    }

    fn unknown(raw: &str) -> MatchPrim {
        MatchPrim::new(PrimKind::Unknown(raw.into()))
    }

    fn proto(name: &str) -> MatchPrim {
        MatchPrim::new(PrimKind::Protocol(name.into()))
    }

    fn m(prims: Vec<MatchPrim>) -> MatchExpr {
        MatchExpr::new(prims)
    }

    fn rules(spec: Vec<(Vec<MatchPrim>, Action)>) -> Vec<Rule> {
        spec.into_iter()
            .enumerate()
            .map(|(i, (p, a))| Rule::new(m(p), a, Origin::new("FORWARD", i + 1)))
            .collect()
    }

    #[test]
    fn ternary_tables() {
        use Ternary::*;
        assert_eq!(!Unknown, Unknown);
        assert_eq!(!True, False);
        assert_eq!(Unknown & False, False);
        assert_eq!(Unknown & True, Unknown);
        assert_eq!(True & True, True);
    }

    #[test]
    fn iface_wildcards() {
        assert!(iface_matches("eth0", "eth0"));
        assert!(iface_matches("eth+", "eth0"));
        assert!(iface_matches("eth+", "eth"));
        assert!(iface_matches("+", "lo"));
        assert!(!iface_matches("eth1", "eth0"));
        assert!(!iface_matches("eth0", "eth0.1"));
    }

    #[test]
    fn approximations() {
        let s = cidr("0/2");
        let guard = m(vec![iif("eth0"), src("0/2").negate()]);
        assert_eq!(may_match_srcs(&guard, "eth0", w8()).unwrap(), s.complement());
        assert_eq!(must_match_srcs(&guard, "eth0", w8()).unwrap(), s.complement());

        let other = m(vec![iif("eth1")]);
        assert!(may_match_srcs(&other, "eth0", w8()).unwrap().is_empty());
        assert!(must_match_srcs(&other, "eth0", w8()).unwrap().is_empty());

        let foo = m(vec![unknown("--foo"), src("64/2")]);
        assert_eq!(may_match_srcs(&foo, "eth0", w8()).unwrap(), cidr("64/2"));
        assert!(must_match_srcs(&foo, "eth0", w8()).unwrap().is_empty());
        assert!(must_match_srcs(&m(vec![unknown("--foo")]), "eth0", w8()).unwrap().is_empty());

        let tcp = m(vec![proto("tcp"), src("0/2").negate()]);
        assert!(must_match_srcs(&tcp, "eth0", w8()).unwrap().is_empty());
        assert_eq!(may_match_srcs(&tcp, "eth0", w8()).unwrap(), s.complement());

        // Negated interface: evaluated exactly.
        let not_eth = m(vec![iif("eth+").negate()]);
        assert!(may_match_srcs(&not_eth, "eth0", w8()).unwrap().is_empty());
        assert!(must_match_srcs(&not_eth, "wlan0", w8()).unwrap().is_universe());
        assert!(may_match_srcs(&MatchExpr::any(), "x", w8()).unwrap().is_universe());
    }

    #[test]
    fn guard_then_accept_certifies() {
        let rs = rules(vec![
            (vec![iif("eth0"), src("0/2").negate()], Action::Drop),
            (vec![], Action::Accept),
        ]);
        let r = sp(&rs, "eth0", &cidr("0/2")).unwrap();
        assert!(r.certified);
        assert_eq!(r.final_allowed, cidr("0/2"));
        assert!(r.first_violation.is_none());
    }

    #[test]
    fn first_violation_points_at_earliest_rule() {
        let rs = rules(vec![
            (vec![src("0/2")], Action::Accept),
            (vec![unknown("--foo")], Action::Accept),
            (vec![], Action::Drop),
        ]);
        let r = sp(&rs, "eth0", &cidr("0/2")).unwrap();
        assert!(!r.certified);
        let v = r.first_violation.unwrap();
        assert_eq!(v.rule_index, 1);
        assert_eq!(v.offending, cidr("0/2").complement());
    }

    #[test]
    fn sp_requires_preprocessed_rules() {
        let rs = rules(vec![(vec![], Action::Reject)]);
        assert_eq!(
            sp(&rs, "eth0", &cidr("0/0")),
            Err(CertifyError::NotPreprocessed {
                index: 0,
                action: Action::Reject
            })
        );
    }

    #[test]
    fn certify_all_needs_interfaces() {
        let rs = rules(vec![(vec![], Action::Accept)]);
        assert_eq!(
            certify_all(&rs, &Ipassmt::new(w8())),
            Err(CertifyError::EmptyIpassmt)
        );
        let mut a = Ipassmt::new(w8());
        a.insert("eth0", cidr("0/2"));
        a.insert("eth1", cidr("0/0"));
        let par = certify_all(&rs, &a).unwrap();
        assert_eq!(par, certify_all_sequential(&rs, &a).unwrap());
        assert_eq!(par.keys().collect::<Vec<_>>(), vec!["eth0", "eth1"]);
        assert!(!par["eth0"].certified);
        assert!(par["eth1"].certified);
    }

    fn packet(proto: Option<&str>, port: Option<u16>, src: u32) -> PacketPattern {
        PacketPattern {
            in_iface: "eth0".into(),
            src_ip: src,
            dst_ip: None,
            protocol: proto.map(str::to_string),
            dst_port: port,
            state: CtState::New,
        }
    }

    #[test]
    fn ternary_evaluation() {
        let ssh = m(vec![proto("tcp"), MatchPrim::new(PrimKind::DstPort(PortRange::single(22)))]);
        assert_eq!(eval_ternary(&ssh, &packet(Some("tcp"), Some(22), 1)), Ternary::True);
        assert_eq!(eval_ternary(&ssh, &packet(Some("udp"), Some(22), 1)), Ternary::False);
        assert_eq!(eval_ternary(&ssh, &packet(None, Some(22), 1)), Ternary::Unknown);
        assert_eq!(eval_ternary(&m(vec![unknown("--foo")]), &packet(None, None, 1)), Ternary::Unknown);
        let ten = IntervalSet::from_ranges(Width::IPV4, [(0x0A00_0000, 0x0AFF_FFFF)]).unwrap();
        let e = m(vec![MatchPrim::new(PrimKind::SrcIp(ten))]);
        assert_eq!(eval_ternary(&e, &packet(None, None, 0x0B00_0001)), Ternary::False);
    }

    #[test]
    fn access_examples() {
        let p = packet(Some("tcp"), Some(22), 200);
        assert!(certify_access(&rules(vec![(vec![], Action::Accept)]), &p).unwrap());
        let blocked = rules(vec![(vec![unknown("--foo")], Action::Drop), (vec![], Action::Accept)]);
        assert!(!certify_access(&blocked, &p).unwrap());
        let ssh = rules(vec![
            (
                vec![
                    proto("tcp"),
                    MatchPrim::new(PrimKind::DstPort(PortRange::single(22))),
                    src("128/1"),
                ],
                Action::Accept,
            ),
            (vec![], Action::Drop),
        ]);
        assert!(certify_access(&ssh, &p).unwrap());
        assert!(!certify_access(&ssh, &packet(Some("tcp"), Some(23), 200)).unwrap());
        // A possibly-matching ACCEPT does not certify.
        let maybe = rules(vec![(vec![unknown("--bar")], Action::Accept), (vec![], Action::Drop)]);
        assert!(!certify_access(&maybe, &p).unwrap());
    }
}
