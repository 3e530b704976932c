//! Bit-parallel simulation: one pass evaluates a packet context for every
//! source address at once, one bit per source.

use indexmap::IndexMap;

use super::{context_hash, raw_hash, OracleError, Proto, UnknownInterp, Verdict};
use crate::certifier::iface_matches;
use crate::fw_model::{Action, CtState, PrimKind, Rule, RulesetTable};
use crate::wordset::{IntervalSet, Width};

/// Largest width we are willing to enumerate.
pub const MAX_ENUM_WIDTH: u8 = 16;

/// Set of source addresses as a bitmap.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SrcMask {
    words: Vec<u64>,
}

impl SrcMask {
    fn words_for(width: Width) -> usize {
        width.size().div_ceil(64) as usize
    }

    pub fn empty(width: Width) -> Self {
        SrcMask {
            words: vec![0; Self::words_for(width)],
        }
    }

    pub fn full(width: Width) -> Self {
        let mut m = SrcMask {
            words: vec![u64::MAX; Self::words_for(width)],
        };
        if width.size() < 64 {
            m.words[0] = (1u64 << width.size()) - 1;
        }
        m
    }

    pub fn from_set(set: &IntervalSet) -> Self {
        let mut m = SrcMask::empty(set.width());
        for iv in set.intervals() {
            for v in iv.lo()..=iv.hi() {
                m.words[(v / 64) as usize] |= 1 << (v % 64);
            }
        }
        m
    }

    pub fn to_set(&self, width: Width) -> IntervalSet {
        let mut ranges: Vec<(u32, u32)> = Vec::new();
        for v in self.iter() {
            match ranges.last_mut() {
                Some(last) if last.1 + 1 == v => last.1 = v,
                _ => ranges.push((v, v)),
            }
        }
        IntervalSet::from_ranges(width, ranges).expect("mask values fit the width")
    }

    pub fn contains(&self, v: u32) -> bool {
        self.words
            .get((v / 64) as usize)
            .is_some_and(|w| (w >> (v % 64)) & 1 == 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.words.iter().enumerate().flat_map(|(i, &w)| {
            (0..64u32)
                .filter(move |b| (w >> b) & 1 == 1)
                .map(move |b| i as u32 * 64 + b)
        })
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn and_with(&mut self, other: &SrcMask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
    }

    pub fn or_with(&mut self, other: &SrcMask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn remove(&mut self, other: &SrcMask) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= !b;
        }
    }

    pub fn is_subset(&self, other: &SrcMask) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }
}

/// Every packet field except the source address.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PacketContext {
    pub in_iface: String,
    pub dst_ip: u32,
    pub protocol: Proto,
    pub dst_port: u16,
    pub state: CtState,
    hash: u64,
}

impl PacketContext {
    pub fn new(in_iface: &str, dst_ip: u32, protocol: Proto, dst_port: u16, state: CtState) -> Self {
        PacketContext {
            in_iface: in_iface.to_string(),
            dst_ip,
            protocol,
            dst_port,
            state,
            hash: context_hash(in_iface, dst_ip, protocol, dst_port, state),
        }
    }

    pub fn packet(&self, src_ip: u32) -> super::SimPacket {
        super::SimPacket {
            in_iface: self.in_iface.clone(),
            src_ip,
            dst_ip: self.dst_ip,
            protocol: self.protocol,
            dst_port: self.dst_port,
            state: self.state,
        }
    }
}

/// Ports always enumerated, whatever the ruleset mentions.
pub const SENTINEL_PORTS: [u16; 8] = [0, 22, 53, 80, 443, 1024, 8080, 65535];

/// Finite packet space: the full source range times representative values
/// of every other field. Destinations and ports are split at every
/// boundary occurring in the rules, so each cell of the partition the
/// known primitives induce is represented.
#[derive(Debug, Clone)]
pub struct PacketSpace {
    pub width: Width,
    pub ifaces: Vec<String>,
    pub dsts: Vec<u32>,
    pub services: Vec<(Proto, u16)>,
    pub states: Vec<CtState>,
}

impl PacketSpace {
    pub fn covering<'a, I>(rules: I, width: Width, ifaces: &[&str], states: &[CtState]) -> Self
    where
        I: IntoIterator<Item = &'a Rule>,
    {
        let mut dsts = vec![0u32];
        let mut ports: Vec<u16> = SENTINEL_PORTS.to_vec();
        for rule in rules {
            for prim in rule.match_expr.conjuncts() {
                match &prim.kind {
                    PrimKind::DstIp(set) => {
                        for iv in set.intervals() {
                            dsts.push(iv.lo());
                            if iv.hi() < width.max() {
                                dsts.push(iv.hi() + 1);
                            }
                        }
                    }
                    PrimKind::DstPort(r) => {
                        ports.push(r.lo);
                        ports.push(r.hi);
                        if r.hi < u16::MAX {
                            ports.push(r.hi + 1);
                        }
                    }
                    _ => {}
                }
            }
        }
        dsts.sort_unstable();
        dsts.dedup();
        ports.sort_unstable();
        ports.dedup();
        let mut services = Vec::new();
        for proto in Proto::ALL {
            if proto.has_ports() {
                services.extend(ports.iter().map(|&p| (proto, p)));
            } else {
                services.push((proto, 0));
            }
        }
        PacketSpace {
            width,
            ifaces: ifaces.iter().map(|s| s.to_string()).collect(),
            dsts,
            services,
            states: states.to_vec(),
        }
    }

    pub fn for_table(table: &RulesetTable, width: Width, ifaces: &[&str], states: &[CtState]) -> Self {
        Self::covering(table.chains.values().flat_map(|c| &c.rules), width, ifaces, states)
    }

    /// Contexts whose input interface is `iface`.
    pub fn contexts_for<'a>(&'a self, iface: &'a str) -> impl Iterator<Item = PacketContext> + 'a {
        self.dsts.iter().flat_map(move |&dst| {
            self.services.iter().flat_map(move |&(proto, port)| {
                self.states
                    .iter()
                    .map(move |&st| PacketContext::new(iface, dst, proto, port, st))
            })
        })
    }

    pub fn contexts(&self) -> impl Iterator<Item = PacketContext> + '_ {
        self.ifaces.iter().flat_map(move |i| self.contexts_for(i))
    }
}

#[derive(Debug, Clone)]
enum CPrim {
    /// Known primitive not involving the source address.
    Field(PrimKind, bool),
    /// Source restriction, negation already applied.
    Src(SrcMask),
    Unknown { raw: u64, negated: bool },
}

#[derive(Debug, Clone)]
enum CAction {
    Accept,
    Drop,
    Skip,
    Return,
    Call(usize),
}

#[derive(Debug, Clone)]
struct CRule {
    prims: Vec<CPrim>,
    action: CAction,
}

fn compile_rule(rule: &Rule, chain_ids: &IndexMap<String, usize>) -> Result<CRule, OracleError> {
    let prims = rule
        .match_expr
        .conjuncts()
        .iter()
        .map(|p| match &p.kind {
            PrimKind::SrcIp(set) => {
                let s = if p.negated { set.complement() } else { set.clone() };
                CPrim::Src(SrcMask::from_set(&s))
            }
            PrimKind::Unknown(raw) => CPrim::Unknown {
                raw: raw_hash(raw),
                negated: p.negated,
            },
            other => CPrim::Field(other.clone(), p.negated),
        })
        .collect();
    let action = match &rule.action {
        Action::Accept => CAction::Accept,
        Action::Drop | Action::Reject => CAction::Drop,
        Action::Log | Action::Empty => CAction::Skip,
        Action::Return => CAction::Return,
        Action::Call(c) => CAction::Call(
            *chain_ids
                .get(c)
                .ok_or_else(|| OracleError::UnknownChain(c.clone()))?,
        ),
    };
    Ok(CRule { prims, action })
}

fn field_holds(kind: &PrimKind, ctx: &PacketContext) -> bool {
    match kind {
        PrimKind::InIface(pat) => iface_matches(pat, &ctx.in_iface),
        PrimKind::DstIp(set) => set.contains(ctx.dst_ip),
        PrimKind::Protocol(name) => name == "all" || name == ctx.protocol.name(),
        PrimKind::DstPort(r) => r.contains(ctx.dst_port),
        PrimKind::CtState(states) => states.contains(ctx.state),
        PrimKind::SrcIp(_) | PrimKind::Unknown(_) => unreachable!("compiled separately"),
    }
}

/// Sources in `live` for which the rule matches.
fn rule_mask(rule: &CRule, live: &SrcMask, ctx: &PacketContext, f: UnknownInterp) -> SrcMask {
    let mut m = live.clone();
    for prim in &rule.prims {
        match prim {
            CPrim::Field(kind, negated) => {
                if field_holds(kind, ctx) == *negated {
                    return SrcMask {
                        words: vec![0; m.words.len()],
                    };
                }
            }
            CPrim::Src(mask) => m.and_with(mask),
            CPrim::Unknown { raw, negated } => {
                for (i, w) in m.words.iter_mut().enumerate() {
                    if *w == 0 {
                        continue;
                    }
                    let truth = f.block(*raw, ctx.hash, i as u32);
                    *w &= if *negated { !truth } else { truth };
                }
            }
        }
        if m.is_empty() {
            break;
        }
    }
    m
}

/// A table compiled for bit-parallel simulation from one entry chain.
#[derive(Debug, Clone)]
pub struct CompiledTable {
    width: Width,
    chains: Vec<Vec<CRule>>,
    entry: usize,
    policy: Option<Verdict>,
}

struct Outcome {
    accepted: SrcMask,
    dropped: SrcMask,
    returned: SrcMask,
}

impl CompiledTable {
    /// Compiles `table` for walking from `entry`; `width` must not exceed
    /// [`MAX_ENUM_WIDTH`]. Cycles reachable from `entry` are rejected.
    pub fn new(table: &RulesetTable, entry: &str, width: Width) -> Result<Self, OracleError> {
        let chain_ids: IndexMap<String, usize> = table
            .chains
            .keys()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
        let entry_id = *chain_ids
            .get(entry)
            .ok_or_else(|| OracleError::UnknownChain(entry.to_string()))?;
        let policy = table.chains[entry_id]
            .policy
            .ok_or_else(|| OracleError::NoPolicy(entry.to_string()))?;
        let mut compiled = Self::from_rule_lists(
            table.chains.values().map(|c| c.rules.as_slice()),
            &chain_ids,
            width,
        )?;
        compiled.entry = entry_id;
        compiled.policy = Some(policy.into());
        compiled.check_acyclic(entry_id, &mut vec![])?;
        Ok(compiled)
    }

    /// Compiles a flat list (no calls); what falls through is reported as
    /// neither accepted nor dropped.
    pub fn flat(rules: &[Rule], width: Width) -> Result<Self, OracleError> {
        Self::from_rule_lists(std::iter::once(rules), &IndexMap::new(), width)
    }

    fn from_rule_lists<'a, I>(lists: I, chain_ids: &IndexMap<String, usize>, width: Width) -> Result<Self, OracleError>
    where
        I: IntoIterator<Item = &'a [Rule]>,
    {
        if width.bits() > MAX_ENUM_WIDTH {
            return Err(OracleError::WidthTooLarge(width.bits()));
        }
        let chains = lists
            .into_iter()
            .map(|rules| {
                rules
                    .iter()
                    .map(|r| compile_rule(r, chain_ids))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CompiledTable {
            width,
            chains,
            entry: 0,
            policy: None,
        })
    }

    fn check_acyclic(&self, chain: usize, stack: &mut Vec<usize>) -> Result<(), OracleError> {
        if stack.contains(&chain) {
            return Err(OracleError::Cycle(format!("#{chain}")));
        }
        stack.push(chain);
        for rule in &self.chains[chain] {
            if let CAction::Call(c) = rule.action {
                self.check_acyclic(c, stack)?;
            }
        }
        stack.pop();
        Ok(())
    }

    pub fn has_unknowns(&self) -> bool {
        self.chains
            .iter()
            .flatten()
            .any(|r| r.prims.iter().any(|p| matches!(p, CPrim::Unknown { .. })))
    }

    pub fn rule_count(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    fn walk(&self, chain: usize, mut live: SrcMask, ctx: &PacketContext, f: UnknownInterp) -> Outcome {
        let mut out = Outcome {
            accepted: SrcMask::empty(self.width),
            dropped: SrcMask::empty(self.width),
            returned: SrcMask::empty(self.width),
        };
        for rule in &self.chains[chain] {
            if live.is_empty() {
                break;
            }
            let m = rule_mask(rule, &live, ctx, f);
            if m.is_empty() {
                continue;
            }
            match rule.action {
                CAction::Accept => {
                    out.accepted.or_with(&m);
                    live.remove(&m);
                }
                CAction::Drop => {
                    out.dropped.or_with(&m);
                    live.remove(&m);
                }
                CAction::Skip => {}
                CAction::Return => {
                    out.returned.or_with(&m);
                    live.remove(&m);
                }
                CAction::Call(callee) => {
                    let sub = self.walk(callee, m.clone(), ctx, f);
                    out.accepted.or_with(&sub.accepted);
                    out.dropped.or_with(&sub.dropped);
                    live.remove(&m);
                    live.or_with(&sub.returned);
                }
            }
        }
        out.returned.or_with(&live);
        out
    }

    /// Sources accepted in context `ctx`.
    pub fn accepted(&self, ctx: &PacketContext, f: UnknownInterp) -> SrcMask {
        let out = self.walk(self.entry, SrcMask::full(self.width), ctx, f);
        let mut accepted = out.accepted;
        if self.policy == Some(Verdict::Accept) {
            accepted.or_with(&out.returned);
        }
        accepted
    }

    /// For a flat list: masks of sources accepted and dropped by each
    /// prefix. Element `k` covers the first `k` rules.
    fn prefix_outcomes(&self, ctx: &PacketContext, f: UnknownInterp) -> Vec<(SrcMask, SrcMask)> {
        let rules = &self.chains[0];
        let mut live = SrcMask::full(self.width);
        let mut acc = SrcMask::empty(self.width);
        let mut den = SrcMask::empty(self.width);
        let mut out = Vec::with_capacity(rules.len() + 1);
        out.push((acc.clone(), den.clone()));
        for rule in rules {
            let m = rule_mask(rule, &live, ctx, f);
            match rule.action {
                CAction::Accept => {
                    acc.or_with(&m);
                    live.remove(&m);
                }
                CAction::Drop => {
                    den.or_with(&m);
                    live.remove(&m);
                }
                _ => {}
            }
            out.push((acc.clone(), den.clone()));
        }
        out
    }
}

/// Enumerated analogues of the exact accepted and denied source sets of a
/// flat rule list (or prefix of one) for one interface.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactSets {
    /// Sources with which some enumerated packet is accepted.
    pub accepted_somewhere: IntervalSet,
    /// Sources with which every enumerated packet is dropped.
    pub denied_everywhere: IntervalSet,
}

/// [`ExactSets`] for every prefix of a flat rule list: element `k` covers
/// the first `k` rules.
pub fn prefix_exact_sets(
    rules: &[Rule],
    iface: &str,
    interps: &[UnknownInterp],
    space: &PacketSpace,
) -> Result<Vec<ExactSets>, OracleError> {
    let width = space.width;
    let compiled = CompiledTable::flat(rules, width)?;
    let interps = if compiled.has_unknowns() { interps } else { &interps[..interps.len().min(1)] };
    let n = rules.len() + 1;
    let mut accepted = vec![SrcMask::empty(width); n];
    let mut denied = vec![SrcMask::full(width); n];
    for ctx in space.contexts_for(iface) {
        for &f in interps {
            for (k, (acc, den)) in compiled.prefix_outcomes(&ctx, f).into_iter().enumerate() {
                accepted[k].or_with(&acc);
                denied[k].and_with(&den);
            }
        }
    }
    Ok(accepted
        .iter()
        .zip(&denied)
        .map(|(a, d)| ExactSets {
            accepted_somewhere: a.to_set(width),
            denied_everywhere: d.to_set(width),
        })
        .collect())
}

/// [`ExactSets`] of the whole list `rules`.
pub fn exact_sets(
    rules: &[Rule],
    iface: &str,
    interps: &[UnknownInterp],
    space: &PacketSpace,
) -> Result<ExactSets, OracleError> {
    Ok(prefix_exact_sets(rules, iface, interps, space)?
        .pop()
        .expect("at least the empty prefix"))
}
