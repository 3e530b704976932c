//! Rules, match expressions, chains and the other vocabulary shared by the
//! parser, preprocessor, certifier and oracle.

use std::fmt;

use indexmap::IndexMap;

use crate::wordset::{IntervalSet, Width};

/// Rule target.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    Accept,
    Drop,
    Reject,
    Log,
    Return,
    Call(String),
    /// No `-j`: the rule only updates counters.
    Empty,
}

impl Action {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Action::Accept | Action::Drop | Action::Reject)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Accept => write!(f, "ACCEPT"),
            Action::Drop => write!(f, "DROP"),
            Action::Reject => write!(f, "REJECT"),
            Action::Log => write!(f, "LOG"),
            Action::Return => write!(f, "RETURN"),
            Action::Call(chain) => write!(f, "{chain}"),
            Action::Empty => Ok(()),
        }
    }
}

/// Default policy of a built-in chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Policy {
    Accept,
    Drop,
}

impl Policy {
    pub fn action(self) -> Action {
        match self {
            Policy::Accept => Action::Accept,
            Policy::Drop => Action::Drop,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.action().fmt(f)
    }
}

/// Connection-tracking state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CtState {
    New,
    Established,
    Related,
    Invalid,
    Untracked,
}

impl CtState {
    pub const ALL: [CtState; 5] = [
        CtState::New,
        CtState::Established,
        CtState::Related,
        CtState::Invalid,
        CtState::Untracked,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn name(self) -> &'static str {
        match self {
            CtState::New => "NEW",
            CtState::Established => "ESTABLISHED",
            CtState::Related => "RELATED",
            CtState::Invalid => "INVALID",
            CtState::Untracked => "UNTRACKED",
        }
    }

    pub fn parse(s: &str) -> Option<CtState> {
        CtState::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for CtState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Subset of connection-tracking states.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct StateSet(u8);

impl StateSet {
    pub fn new() -> Self {
        StateSet(0)
    }

    pub fn insert(&mut self, st: CtState) {
        self.0 |= st.bit();
    }

    pub fn contains(self, st: CtState) -> bool {
        self.0 & st.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = CtState> {
        CtState::ALL.into_iter().filter(move |st| self.contains(*st))
    }
}

impl FromIterator<CtState> for StateSet {
    fn from_iter<T: IntoIterator<Item = CtState>>(iter: T) -> Self {
        let mut set = StateSet::new();
        for st in iter {
            set.insert(st);
        }
        set
    }
}

impl fmt::Display for StateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, st) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(st.name())?;
        }
        Ok(())
    }
}

/// Inclusive destination-port range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PortRange {
    pub lo: u16,
    pub hi: u16,
}

impl PortRange {
    pub fn single(port: u16) -> Self {
        PortRange { lo: port, hi: port }
    }

    pub fn contains(self, port: u16) -> bool {
        self.lo <= port && port <= self.hi
    }
}

impl fmt::Display for PortRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.lo == self.hi {
            write!(f, "{}", self.lo)
        } else {
            write!(f, "{}:{}", self.lo, self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PrimKind {
    /// Input interface; a trailing `+` matches any suffix.
    InIface(String),
    SrcIp(IntervalSet),
    DstIp(IntervalSet),
    Protocol(String),
    DstPort(PortRange),
    CtState(StateSet),
    /// Anything we do not interpret, kept verbatim.
    Unknown(String),
}

/// One conjunct of a match expression, possibly negated.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MatchPrim {
    pub kind: PrimKind,
    pub negated: bool,
}

impl MatchPrim {
    pub fn new(kind: PrimKind) -> Self {
        MatchPrim {
            kind,
            negated: false,
        }
    }

    pub fn negated(kind: PrimKind) -> Self {
        MatchPrim {
            kind,
            negated: true,
        }
    }

    pub fn negate(&self) -> Self {
        MatchPrim {
            kind: self.kind.clone(),
            negated: !self.negated,
        }
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self.kind, PrimKind::Unknown(_))
    }
}

fn fmt_set(f: &mut fmt::Formatter<'_>, set: &IntervalSet) -> fmt::Result {
    let cidrs = set.to_cidr_list();
    if cidrs.is_empty() {
        // Not expressible in rule-spec syntax; only arises from hand-built rules.
        return f.write_str("{}");
    }
    for (i, c) in cidrs.iter().enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        write!(f, "{c}")?;
    }
    Ok(())
}

impl fmt::Display for MatchPrim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bang = if self.negated { "! " } else { "" };
        match &self.kind {
            PrimKind::InIface(name) => write!(f, "{bang}-i {name}"),
            PrimKind::SrcIp(set) => {
                write!(f, "{bang}-s ")?;
                fmt_set(f, set)
            }
            PrimKind::DstIp(set) => {
                write!(f, "{bang}-d ")?;
                fmt_set(f, set)
            }
            PrimKind::Protocol(p) => write!(f, "{bang}-p {p}"),
            PrimKind::DstPort(r) => write!(f, "{bang}--dport {r}"),
            PrimKind::CtState(s) => write!(f, "-m conntrack {bang}--ctstate {s}"),
            PrimKind::Unknown(raw) => write!(f, "{bang}{raw}"),
        }
    }
}

/// Conjunction of primitives; the empty conjunction is always true.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct MatchExpr {
    conjuncts: Vec<MatchPrim>,
}

impl MatchExpr {
    pub fn any() -> Self {
        MatchExpr::default()
    }

    pub fn new(conjuncts: Vec<MatchPrim>) -> Self {
        MatchExpr { conjuncts }
    }

    pub fn conjuncts(&self) -> &[MatchPrim] {
        &self.conjuncts
    }

    pub fn is_true(&self) -> bool {
        self.conjuncts.is_empty()
    }

    pub fn push(&mut self, prim: MatchPrim) {
        self.conjuncts.push(prim);
    }

    /// `self ∧ other`, keeping `self`'s conjuncts first.
    pub fn and(&self, other: &MatchExpr) -> MatchExpr {
        let mut conjuncts = Vec::with_capacity(self.conjuncts.len() + other.conjuncts.len());
        conjuncts.extend_from_slice(&self.conjuncts);
        conjuncts.extend_from_slice(&other.conjuncts);
        MatchExpr { conjuncts }
    }

    pub fn retain<F: FnMut(&MatchPrim) -> bool>(&mut self, f: F) {
        self.conjuncts.retain(f);
    }
}

impl FromIterator<MatchPrim> for MatchExpr {
    fn from_iter<T: IntoIterator<Item = MatchPrim>>(iter: T) -> Self {
        MatchExpr::new(iter.into_iter().collect())
    }
}

impl fmt::Display for MatchExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, prim) in self.conjuncts.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{prim}")?;
        }
        Ok(())
    }
}

/// Where a rule came from: chain name and 1-based input line.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Origin {
    pub chain: String,
    pub line: usize,
}

impl Origin {
    pub fn new(chain: impl Into<String>, line: usize) -> Self {
        Origin {
            chain: chain.into(),
            line,
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.chain, self.line)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rule {
    pub match_expr: MatchExpr,
    pub action: Action,
    pub origin: Origin,
}

impl Rule {
    pub fn new(match_expr: MatchExpr, action: Action, origin: Origin) -> Self {
        Rule {
            match_expr,
            action,
            origin,
        }
    }
}

/// Renders the rule in rule-spec syntax (without the `-A CHAIN` prefix).
impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.match_expr)?;
        if self.action != Action::Empty {
            if !self.match_expr.is_true() {
                f.write_str(" ")?;
            }
            write!(f, "-j {}", self.action)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub name: String,
    /// Only built-in chains have a policy.
    pub policy: Option<Policy>,
    pub rules: Vec<Rule>,
    /// Line of the `:CHAIN` declaration.
    pub decl_line: usize,
}

impl Chain {
    pub fn builtin(name: impl Into<String>, policy: Policy) -> Self {
        Chain {
            name: name.into(),
            policy: Some(policy),
            rules: Vec::new(),
            decl_line: 0,
        }
    }

    pub fn user(name: impl Into<String>) -> Self {
        Chain {
            name: name.into(),
            policy: None,
            rules: Vec::new(),
            decl_line: 0,
        }
    }
}

pub const BUILTIN_CHAINS: [&str; 5] = ["INPUT", "FORWARD", "OUTPUT", "PREROUTING", "POSTROUTING"];

pub fn is_builtin_chain(name: &str) -> bool {
    BUILTIN_CHAINS.contains(&name)
}

/// One `*table` section of an iptables-save dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RulesetTable {
    pub name: String,
    pub chains: IndexMap<String, Chain>,
}

impl RulesetTable {
    pub fn new(name: impl Into<String>) -> Self {
        RulesetTable {
            name: name.into(),
            chains: IndexMap::new(),
        }
    }

    pub fn add_chain(&mut self, chain: Chain) {
        self.chains.insert(chain.name.clone(), chain);
    }

    pub fn chain(&self, name: &str) -> Option<&Chain> {
        self.chains.get(name)
    }

    pub fn rule_count(&self) -> usize {
        self.chains.values().map(|c| c.rules.len()).sum()
    }
}

/// Renders the table in iptables-save format.
impl fmt::Display for RulesetTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "*{}", self.name)?;
        for chain in self.chains.values() {
            match chain.policy {
                Some(p) => writeln!(f, ":{} {} [0:0]", chain.name, p)?,
                None => writeln!(f, ":{} - [0:0]", chain.name)?,
            }
        }
        for chain in self.chains.values() {
            for rule in &chain.rules {
                if rule.match_expr.is_true() && rule.action == Action::Empty {
                    writeln!(f, "-A {}", chain.name)?;
                } else {
                    writeln!(f, "-A {} {}", chain.name, rule)?;
                }
            }
        }
        writeln!(f, "COMMIT")
    }
}

/// Interface → permitted source addresses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipassmt {
    width: Width,
    entries: IndexMap<String, IntervalSet>,
}

impl Ipassmt {
    pub fn new(width: Width) -> Self {
        Ipassmt {
            width,
            entries: IndexMap::new(),
        }
    }

    pub fn width(&self) -> Width {
        self.width
    }

    /// Returns false (and leaves the map unchanged) if the interface is
    /// already present.
    pub fn insert(&mut self, iface: impl Into<String>, set: IntervalSet) -> bool {
        let iface = iface.into();
        if self.entries.contains_key(&iface) {
            return false;
        }
        self.entries.insert(iface, set);
        true
    }

    pub fn get(&self, iface: &str) -> Option<&IntervalSet> {
        self.entries.get(iface)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &IntervalSet)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ifaces(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A concrete packet for the access check. Absent optional fields are
/// treated as unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketPattern {
    pub in_iface: String,
    pub src_ip: u32,
    pub dst_ip: Option<u32>,
    pub protocol: Option<String>,
    pub dst_port: Option<u16>,
    pub state: CtState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Index into the flat rule list.
    pub rule_index: usize,
    /// `(A \ D) \ ipassmt[i]` right after that rule.
    pub offending: IntervalSet,
}

/// Verdict of certifying one interface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertResult {
    pub certified: bool,
    pub first_violation: Option<Violation>,
    /// `A \ D` after the last rule.
    pub final_allowed: IntervalSet,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wordset::Cidr;

    #[test]
    fn rule_renders_in_rule_spec_syntax() {
        let s = Cidr::parse("192.168.0.0/24", Width::IPV4).unwrap().to_set();
        let rule = Rule::new(
            MatchExpr::new(vec![
                MatchPrim::new(PrimKind::InIface("eth0".into())),
                MatchPrim::negated(PrimKind::SrcIp(s)),
            ]),
            Action::Drop,
            Origin::new("FORWARD", 3),
        );
        assert_eq!(rule.to_string(), "-i eth0 ! -s 192.168.0.0/24 -j DROP");
        let any = Rule::new(MatchExpr::any(), Action::Accept, Origin::new("FORWARD", 4));
        assert_eq!(any.to_string(), "-j ACCEPT");
    }

    #[test]
    fn state_set_rendering() {
        let set: StateSet = [CtState::Related, CtState::Established].into_iter().collect();
        assert_eq!(set.to_string(), "ESTABLISHED,RELATED");
        assert!(!set.contains(CtState::New));
        let prim = MatchPrim::negated(PrimKind::CtState(set));
        assert_eq!(prim.to_string(), "-m conntrack ! --ctstate ESTABLISHED,RELATED");
    }

    #[test]
    fn ipassmt_rejects_duplicates() {
        let mut a = Ipassmt::new(Width::IPV4);
        assert!(a.insert("eth0", IntervalSet::universe(Width::IPV4)));
        assert!(!a.insert("eth0", IntervalSet::universe(Width::IPV4)));
        assert_eq!(a.len(), 1);
    }
}
