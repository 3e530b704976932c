//! Ground-truth simulation at small address widths.
//!
//! The oracle walks chains exactly as netfilter does and gives unknown
//! primitives a concrete meaning through an [`UnknownInterp`]. It shares
//! no code with the certifier beyond the data model, and is what the
//! soundness properties are checked against.

mod batch;
pub mod fuzz;
mod random;

use thiserror::Error;

use crate::certifier::iface_matches;
use crate::fw_model::{Action, CtState, MatchExpr, MatchPrim, Policy, PrimKind, Rule, RulesetTable};

pub use batch::{exact_sets, prefix_exact_sets, CompiledTable, ExactSets, PacketContext, PacketSpace, SrcMask};
pub use random::{random_table, RandomParams};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("no chain named `{0}`")]
    UnknownChain(String),
    #[error("chain `{0}` has no policy")]
    NoPolicy(String),
    #[error("cyclic chain calls through `{0}`")]
    Cycle(String),
    #[error("width {0} is too large to enumerate (at most 16)")]
    WidthTooLarge(u8),
    #[error("flat rule list fell through without a verdict")]
    NoVerdict,
    #[error(transparent)]
    Preprocess(#[from] crate::preprocess::PreprocessError),
    #[error(transparent)]
    Certify(#[from] crate::certifier::CertifyError),
    #[error(transparent)]
    Wordset(#[from] crate::wordset::WordsetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Accept,
    Drop,
}

impl From<Policy> for Verdict {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Accept => Verdict::Accept,
            Policy::Drop => Verdict::Drop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proto {
    Tcp,
    Udp,
    Icmp,
}

impl Proto {
    pub const ALL: [Proto; 3] = [Proto::Tcp, Proto::Udp, Proto::Icmp];

    pub fn name(self) -> &'static str {
        match self {
            Proto::Tcp => "tcp",
            Proto::Udp => "udp",
            Proto::Icmp => "icmp",
        }
    }

    pub fn has_ports(self) -> bool {
        matches!(self, Proto::Tcp | Proto::Udp)
    }
}

/// A fully concrete packet.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SimPacket {
    pub in_iface: String,
    pub src_ip: u32,
    pub dst_ip: u32,
    pub protocol: Proto,
    pub dst_port: u16,
    pub state: CtState,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub(crate) fn raw_hash(raw: &str) -> u64 {
    fnv1a(raw.as_bytes())
}

/// Hash of every packet field except the source address.
pub(crate) fn context_hash(iface: &str, dst: u32, proto: Proto, port: u16, state: CtState) -> u64 {
    let mut h = fnv1a(iface.as_bytes());
    for v in [dst as u64, proto as u64, port as u64, state as u64] {
        h = splitmix(h ^ v);
    }
    h
}

/// One meaning for every unknown primitive: a deterministic boolean of
/// the primitive's raw text and the whole packet.
///
/// Seed 0 makes every unknown true and seed 1 makes every unknown false;
/// other seeds are pseudo-random with densities of roughly 1/4, 1/2 or 3/4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct UnknownInterp {
    seed: u64,
}

impl UnknownInterp {
    pub fn new(seed: u64) -> Self {
        UnknownInterp { seed }
    }

    /// Seeds `0..n`.
    pub fn sample(n: usize) -> Vec<UnknownInterp> {
        (0..n as u64).map(UnknownInterp::new).collect()
    }

    pub fn seed(self) -> u64 {
        self.seed
    }

    /// Truth values for sources `64 * block .. 64 * block + 63`, one bit
    /// per source.
    pub(crate) fn block(self, raw: u64, ctx: u64, block: u32) -> u64 {
        match self.seed {
            0 => u64::MAX,
            1 => 0,
            s => {
                let a = splitmix(s ^ splitmix(raw ^ splitmix(ctx ^ block as u64)));
                let b = splitmix(a);
                match s % 3 {
                    0 => a,
                    1 => a & b,
                    _ => a | b,
                }
            }
        }
    }

    pub fn holds(self, raw: &str, p: &SimPacket) -> bool {
        let ctx = context_hash(&p.in_iface, p.dst_ip, p.protocol, p.dst_port, p.state);
        let word = self.block(raw_hash(raw), ctx, p.src_ip / 64);
        (word >> (p.src_ip % 64)) & 1 == 1
    }
}

fn prim_holds(prim: &MatchPrim, p: &SimPacket, f: UnknownInterp) -> bool {
    let v = match &prim.kind {
        PrimKind::InIface(pat) => iface_matches(pat, &p.in_iface),
        PrimKind::SrcIp(set) => set.contains(p.src_ip),
        PrimKind::DstIp(set) => set.contains(p.dst_ip),
        PrimKind::Protocol(name) => name == "all" || name == p.protocol.name(),
        PrimKind::DstPort(range) => range.contains(p.dst_port),
        PrimKind::CtState(states) => states.contains(p.state),
        PrimKind::Unknown(raw) => f.holds(raw, p),
    };
    v != prim.negated
}

/// Exact `matches m p` under interpretation `f`.
pub fn matches(m: &MatchExpr, p: &SimPacket, f: UnknownInterp) -> bool {
    m.conjuncts().iter().all(|prim| prim_holds(prim, p, f))
}

/// Walks `entry` for one packet: calls push, RETURN and chain exhaustion
/// pop, and the entry chain's policy decides what falls off its end.
pub fn simulate(
    table: &RulesetTable,
    entry: &str,
    p: &SimPacket,
    f: UnknownInterp,
) -> Result<Verdict, OracleError> {
    let entry_chain = table
        .chain(entry)
        .ok_or_else(|| OracleError::UnknownChain(entry.to_string()))?;
    let policy = entry_chain
        .policy
        .ok_or_else(|| OracleError::NoPolicy(entry.to_string()))?;
    let mut frames: Vec<(&str, usize)> = vec![(entry, 0)];
    while let Some(&mut (name, ref mut pos)) = frames.last_mut() {
        let chain = table
            .chain(name)
            .ok_or_else(|| OracleError::UnknownChain(name.to_string()))?;
        let Some(rule) = chain.rules.get(*pos) else {
            frames.pop();
            continue;
        };
        *pos += 1;
        if !matches(&rule.match_expr, p, f) {
            continue;
        }
        match &rule.action {
            Action::Accept => return Ok(Verdict::Accept),
            Action::Drop | Action::Reject => return Ok(Verdict::Drop),
            Action::Log | Action::Empty => {}
            Action::Return => {
                frames.pop();
            }
            Action::Call(callee) => {
                if frames.iter().any(|(n, _)| n == callee) {
                    return Err(OracleError::Cycle(callee.clone()));
                }
                frames.push((callee.as_str(), 0));
            }
        }
    }
    Ok(policy.into())
}

/// First-match evaluation of a flat rule list.
pub fn simulate_flat(rules: &[Rule], p: &SimPacket, f: UnknownInterp) -> Result<Verdict, OracleError> {
    for rule in rules {
        if !matches(&rule.match_expr, p, f) {
            continue;
        }
        match rule.action {
            Action::Accept => return Ok(Verdict::Accept),
            Action::Drop | Action::Reject => return Ok(Verdict::Drop),
            _ => {}
        }
    }
    Err(OracleError::NoVerdict)
}
