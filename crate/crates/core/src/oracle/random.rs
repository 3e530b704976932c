//! Reproducible random chain-structured tables for fuzzing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fw_model::{
    Action, Chain, CtState, MatchExpr, MatchPrim, Origin, Policy, PortRange, PrimKind, Rule,
    RulesetTable, StateSet,
};
use crate::wordset::{Cidr, IntervalSet, Width};

#[derive(Debug, Clone)]
pub struct RandomParams {
    pub width: Width,
    /// Entry chain included; at least 1.
    pub max_chains: usize,
    /// Bound on the total number of rules over all chains.
    pub max_rules: usize,
    pub iface_pool: Vec<String>,
    /// Probability that a rule carries an unknown primitive.
    pub unknown_rate: f64,
    /// Anti-spoofing material: `-i iface ! -s cidr -j DROP` rules are
    /// inserted with probability `guard_rate`.
    pub guards: Vec<(String, Cidr)>,
    pub guard_rate: f64,
    /// Restrict RETURN rules to at most one primitive, so that unfolding
    /// is exact.
    pub simple_returns: bool,
}

impl Default for RandomParams {
    fn default() -> Self {
        RandomParams {
            width: Width::new(8).expect("valid width"),
            max_chains: 4,
            max_rules: 30,
            iface_pool: vec!["eth0".into(), "eth1".into(), "eth2".into()],
            unknown_rate: 0.2,
            guards: Vec::new(),
            guard_rate: 0.0,
            simple_returns: false,
        }
    }
}

const UNKNOWN_RAWS: [&str; 4] = ["--foo", "--bar", "-m recent --rcheck", "-m limit --limit 1/s"];
const PORTS: [u16; 3] = [22, 80, 443];

struct Gen<'a> {
    rng: ChaCha8Rng,
    params: &'a RandomParams,
    dst_pool: Vec<IntervalSet>,
}

impl Gen<'_> {
    fn cidr(&mut self) -> Cidr {
        let bits = self.params.width.bits();
        // Favour short prefixes so sets are large enough to interact.
        let len = self.rng.gen_range(0..=bits.min(4)) + if self.rng.gen_bool(0.3) { self.rng.gen_range(0..=bits - bits.min(4)) } else { 0 };
        let raw: u32 = self.rng.gen_range(0..=self.params.width.max());
        let host = bits - len;
        let base = if host == 32 { 0 } else { (raw >> host) << host };
        Cidr::new(base, len, self.params.width).expect("aligned by construction")
    }

    fn negated(&mut self) -> bool {
        self.rng.gen_bool(0.3)
    }

    fn prim(&mut self, kind: PrimKind) -> MatchPrim {
        MatchPrim {
            kind,
            negated: self.negated(),
        }
    }

    fn iface(&mut self) -> String {
        if self.rng.gen_bool(0.15) {
            "eth+".to_string()
        } else {
            self.params
                .iface_pool
                .choose(&mut self.rng)
                .cloned()
                .unwrap_or_else(|| "eth0".to_string())
        }
    }

    fn match_expr(&mut self) -> MatchExpr {
        let mut prims = Vec::new();
        if self.rng.gen_bool(0.4) {
            let k = PrimKind::InIface(self.iface());
            prims.push(self.prim(k));
        }
        if self.rng.gen_bool(0.45) {
            let k = PrimKind::SrcIp(self.cidr().to_set());
            prims.push(self.prim(k));
        }
        if self.rng.gen_bool(0.15) {
            let k = PrimKind::DstIp(self.dst_pool.choose(&mut self.rng).cloned().expect("non-empty pool"));
            prims.push(self.prim(k));
        }
        if self.rng.gen_bool(0.2) {
            let proto = ["tcp", "udp", "icmp"].choose(&mut self.rng).expect("non-empty");
            let negated = self.negated();
            prims.push(MatchPrim {
                kind: PrimKind::Protocol(proto.to_string()),
                negated,
            });
            if !negated && *proto != "icmp" && self.rng.gen_bool(0.6) {
                let range = if self.rng.gen_bool(0.8) {
                    PortRange::single(*PORTS.choose(&mut self.rng).expect("non-empty"))
                } else {
                    PortRange { lo: 1024, hi: 65535 }
                };
                let k = PrimKind::DstPort(range);
                prims.push(self.prim(k));
            }
        }
        if self.rng.gen_bool(0.15) {
            let mut states = StateSet::new();
            for st in CtState::ALL {
                if self.rng.gen_bool(0.4) {
                    states.insert(st);
                }
            }
            if states.is_empty() {
                states.insert(CtState::Established);
            }
            let k = PrimKind::CtState(states);
            prims.push(self.prim(k));
        }
        if self.rng.gen_bool(self.params.unknown_rate) {
            let raw = UNKNOWN_RAWS.choose(&mut self.rng).expect("non-empty").to_string();
            let k = PrimKind::Unknown(raw);
            prims.push(self.prim(k));
        }
        prims.shuffle(&mut self.rng);
        // Keep a protocol ahead of its port, as the parser requires.
        if let Some(port_at) = prims.iter().position(|p| matches!(p.kind, PrimKind::DstPort(_))) {
            if let Some(proto_at) = prims.iter().position(|p| matches!(p.kind, PrimKind::Protocol(_))) {
                if proto_at > port_at {
                    prims.swap(proto_at, port_at);
                }
            }
        }
        MatchExpr::new(prims)
    }

    fn guard(&mut self) -> Option<Rule> {
        let (iface, cidr) = self.params.guards.choose(&mut self.rng)?.clone();
        let m = MatchExpr::new(vec![
            MatchPrim::new(PrimKind::InIface(iface)),
            MatchPrim::negated(PrimKind::SrcIp(cidr.to_set())),
        ]);
        let action = if self.rng.gen_bool(0.8) {
            Action::Drop
        } else {
            Action::Reject
        };
        Some(Rule::new(m, action, Origin::new("", 0)))
    }

    fn action(&mut self, chain: usize, n_chains: usize) -> Action {
        let roll: f64 = self.rng.gen();
        if roll < 0.3 {
            Action::Accept
        } else if roll < 0.52 {
            Action::Drop
        } else if roll < 0.57 {
            Action::Reject
        } else if roll < 0.62 {
            Action::Log
        } else if roll < 0.66 {
            Action::Empty
        } else if roll < 0.78 {
            Action::Return
        } else if chain + 1 < n_chains {
            // Only call later chains: acyclic by construction.
            let callee = self.rng.gen_range(chain + 1..n_chains);
            Action::Call(chain_name(callee))
        } else {
            Action::Accept
        }
    }
}

fn chain_name(i: usize) -> String {
    if i == 0 {
        "FORWARD".to_string()
    } else {
        format!("c{i}")
    }
}

/// Generates a table with entry chain `FORWARD` (random policy) and up to
/// `max_chains - 1` user chains. Calls only go to chains with a higher
/// index, so the call graph is acyclic. Equal seeds give equal tables.
pub fn random_table(seed: u64, params: &RandomParams) -> RulesetTable {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = Gen {
        rng,
        params,
        dst_pool: Vec::new(),
    };
    gen.dst_pool = (0..2).map(|_| gen.cidr().to_set()).collect();

    let n_chains = gen.rng.gen_range(1..=params.max_chains.max(1));
    let n_rules = gen.rng.gen_range(0..=params.max_rules);
    let policy = if gen.rng.gen_bool(0.5) {
        Policy::Accept
    } else {
        Policy::Drop
    };

    let mut chains: Vec<Chain> = (0..n_chains)
        .map(|i| {
            if i == 0 {
                Chain::builtin(chain_name(0), policy)
            } else {
                Chain::user(chain_name(i))
            }
        })
        .collect();

    for _ in 0..n_rules {
        let ci = gen.rng.gen_range(0..n_chains);
        let guard = if gen.rng.gen_bool(params.guard_rate) {
            gen.guard()
        } else {
            None
        };
        let rule = match guard {
            Some(rule) => rule,
            None => {
                let action = gen.action(ci, n_chains);
                let mut m = gen.match_expr();
                if action == Action::Return && params.simple_returns {
                    let first = m.conjuncts().first().cloned();
                    m = first.into_iter().collect();
                }
                Rule::new(m, action, Origin::new("", 0))
            }
        };
        chains[ci].rules.push(rule);
    }

    let mut table = RulesetTable::new("filter");
    // Line numbers as if rendered in iptables-save order.
    let mut line = 2;
    for chain in &mut chains {
        chain.decl_line = line;
        line += 1;
    }
    for chain in &mut chains {
        for rule in &mut chain.rules {
            rule.origin = Origin::new(chain.name.clone(), line);
            line += 1;
        }
    }
    for chain in chains {
        table.add_chain(chain);
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_unknown_rate_has_no_unknowns() {
        let params = RandomParams {
            unknown_rate: 0.0,
            ..RandomParams::default()
        };
        for seed in 0..50 {
            let t = random_table(seed, &params);
            assert!(t
                .chains
                .values()
                .flat_map(|c| &c.rules)
                .all(|r| r.match_expr.conjuncts().iter().all(|p| !p.is_unknown())));
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let params = RandomParams::default();
        for seed in 0..50 {
            let a = random_table(seed, &params);
            assert_eq!(a, random_table(seed, &params));
            assert!(a.rule_count() <= 30);
            assert!(a.chains.len() <= 4);
            assert!(a.chain("FORWARD").unwrap().policy.is_some());
        }
    }

    #[test]
    fn generated_tables_unfold() {
        let params = RandomParams::default();
        for seed in 0..100 {
            let t = random_table(seed, &params);
            crate::preprocess::unfold(&t, "FORWARD").unwrap();
        }
    }

    #[test]
    fn simple_returns_are_simple() {
        let params = RandomParams {
            simple_returns: true,
            ..RandomParams::default()
        };
        for seed in 0..50 {
            let t = random_table(seed, &params);
            for r in t.chains.values().flat_map(|c| &c.rules) {
                if r.action == Action::Return {
                    assert!(r.match_expr.conjuncts().len() <= 1);
                }
            }
        }
    }
}
