//! Soundness campaigns: random tables, certified by the real pipeline,
//! checked against exhaustive enumeration.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::{CompiledTable, PacketSpace};
use super::{prefix_exact_sets, random_table, simulate, OracleError, Proto, RandomParams, SimPacket, UnknownInterp, Verdict};
use crate::certifier::{certify_access, certify_all_sequential, sp_trace};
use crate::fw_model::{CtState, Ipassmt, PacketPattern, RulesetTable};
use crate::par::{IntoParallelRefIterator, ParallelIterator};
use crate::preprocess::{is_preprocessed, preprocess};
use crate::wordset::{Cidr, Width};

pub const ENTRY: &str = "FORWARD";

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub tables: usize,
    pub interps: usize,
    pub params: RandomParams,
    pub ipassmt: Ipassmt,
    /// Random packets per table for the access check.
    pub access_probes: usize,
    pub first_seed: u64,
}

impl CampaignConfig {
    /// Three interfaces with disjoint ranges at width 8 and matching guard
    /// rules in the generator.
    pub fn standard(tables: usize, interps: usize) -> Self {
        let width = Width::new(8).expect("valid width");
        let ranges = [("eth0", "0/2"), ("eth1", "64/2"), ("eth2", "128/1")];
        let mut ipassmt = Ipassmt::new(width);
        let mut guards = Vec::new();
        for (iface, cidr) in ranges {
            let c = Cidr::parse(cidr, width).expect("valid cidr");
            ipassmt.insert(iface, c.to_set());
            guards.push((iface.to_string(), c));
        }
        CampaignConfig {
            tables,
            interps,
            params: RandomParams {
                guards,
                guard_rate: 0.25,
                ..RandomParams::default()
            },
            ipassmt,
            access_probes: 8,
            first_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CampaignReport {
    pub tables: usize,
    pub ifaces_checked: usize,
    pub ifaces_certified: usize,
    /// (context, interpretation) pairs whose accepted sources were checked
    /// against a certified interface's range.
    pub soundness_checks: u64,
    pub soundness_violations: Vec<String>,
    pub prefixes_checked: u64,
    pub prefix_violations: Vec<String>,
    pub contract_violations: Vec<String>,
    pub access_probes: usize,
    pub access_certified: usize,
    pub access_violations: Vec<String>,
}

impl CampaignReport {
    fn merge(mut self, other: CampaignReport) -> Self {
        self.tables += other.tables;
        self.ifaces_checked += other.ifaces_checked;
        self.ifaces_certified += other.ifaces_certified;
        self.soundness_checks += other.soundness_checks;
        self.soundness_violations.extend(other.soundness_violations);
        self.prefixes_checked += other.prefixes_checked;
        self.prefix_violations.extend(other.prefix_violations);
        self.contract_violations.extend(other.contract_violations);
        self.access_probes += other.access_probes;
        self.access_certified += other.access_certified;
        self.access_violations.extend(other.access_violations);
        self
    }
}

fn random_pattern(rng: &mut ChaCha8Rng, space: &PacketSpace, ifaces: &[String]) -> PacketPattern {
    let (proto, port) = *space.services.choose(rng).expect("non-empty services");
    PacketPattern {
        in_iface: ifaces.choose(rng).cloned().unwrap_or_default(),
        src_ip: rng.gen_range(0..=space.width.max()),
        dst_ip: rng
            .gen_bool(0.8)
            .then(|| *space.dsts.choose(rng).expect("non-empty dsts")),
        protocol: rng.gen_bool(0.8).then(|| proto.name().to_string()),
        dst_port: rng.gen_bool(0.8).then_some(port),
        state: *CtState::ALL.choose(rng).expect("non-empty"),
    }
}

/// Every concrete packet of `space` that agrees with `p` on its given fields.
fn completions(p: &PacketPattern, space: &PacketSpace) -> Vec<SimPacket> {
    let dsts: Vec<u32> = match p.dst_ip {
        Some(d) => vec![d],
        None => space.dsts.clone(),
    };
    let mut out = Vec::new();
    for proto in Proto::ALL {
        if p.protocol.as_deref().is_some_and(|n| n != proto.name()) {
            continue;
        }
        let ports: Vec<u16> = match p.dst_port {
            Some(given) => vec![given],
            None => space
                .services
                .iter()
                .filter(|(sp, _)| *sp == proto)
                .map(|(_, port)| *port)
                .collect(),
        };
        for &dst in &dsts {
            for &port in &ports {
                out.push(SimPacket {
                    in_iface: p.in_iface.clone(),
                    src_ip: p.src_ip,
                    dst_ip: dst,
                    protocol: proto,
                    dst_port: port,
                    state: p.state,
                });
            }
        }
    }
    out
}

fn check_table(seed: u64, cfg: &CampaignConfig) -> Result<CampaignReport, OracleError> {
    let width = cfg.params.width;
    let table = random_table(seed, &cfg.params);
    let mut report = CampaignReport {
        tables: 1,
        ..CampaignReport::default()
    };
    let flat = preprocess(&table, ENTRY, true)?;
    let flat_all_states = preprocess(&table, ENTRY, false)?;
    for (label, rules) in [("assume-new", &flat), ("all-states", &flat_all_states)] {
        if !is_preprocessed(rules) {
            report
                .contract_violations
                .push(format!("seed {seed}: {label} flat list is malformed"));
        }
    }

    let ifaces: Vec<&str> = cfg.ipassmt.ifaces().collect();
    let space = PacketSpace::for_table(&table, width, &ifaces, &[CtState::New]);
    let compiled = CompiledTable::new(&table, ENTRY, width)?;
    let all_interps = UnknownInterp::sample(cfg.interps.max(1));
    let interps = if compiled.has_unknowns() { &all_interps[..] } else { &all_interps[..1] };

    // Soundness of positive verdicts.
    let results = certify_all_sequential(&flat, &cfg.ipassmt)?;
    for (iface, result) in &results {
        report.ifaces_checked += 1;
        if !result.certified {
            continue;
        }
        report.ifaces_certified += 1;
        let assigned = super::SrcMask::from_set(cfg.ipassmt.get(iface).expect("from ipassmt"));
        for ctx in space.contexts_for(iface) {
            for &f in interps {
                report.soundness_checks += 1;
                let accepted = compiled.accepted(&ctx, f);
                if !accepted.is_subset(&assigned) {
                    let stray = accepted.iter().find(|s| !assigned.contains(*s)).expect("not a subset");
                    report.soundness_violations.push(format!(
                        "seed {seed}: {iface} certified but source {stray} accepted in {ctx:?} under interpretation {}",
                        f.seed()
                    ));
                }
            }
        }
    }

    // Prefix invariants of the (A, D) pass.
    for iface in &ifaces {
        let trace = sp_trace(&flat, iface, width)?;
        let exact = prefix_exact_sets(&flat, iface, &all_interps, &space)?;
        for (k, (state, ex)) in trace.iter().zip(&exact).enumerate() {
            report.prefixes_checked += 1;
            if !ex.accepted_somewhere.is_subset(&state.allowed)? {
                report.prefix_violations.push(format!(
                    "seed {seed}: {iface} prefix {k}: accepted {} not within A = {}",
                    ex.accepted_somewhere, state.allowed
                ));
            }
            if !state.denied.is_subset(&ex.denied_everywhere)? {
                report.prefix_violations.push(format!(
                    "seed {seed}: {iface} prefix {k}: D = {} not always denied ({})",
                    state.denied, ex.denied_everywhere
                ));
            }
        }
    }

    // Access (lockout) check on random packets.
    if cfg.access_probes > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce55);
        let mut probe_ifaces: Vec<String> = cfg.params.iface_pool.clone();
        probe_ifaces.push("wlan0".into());
        let full_space = PacketSpace::for_table(&table, width, &ifaces, &CtState::ALL);
        for _ in 0..cfg.access_probes {
            let p = random_pattern(&mut rng, &full_space, &probe_ifaces);
            report.access_probes += 1;
            if !certify_access(&flat_all_states, &p)? {
                continue;
            }
            report.access_certified += 1;
            for packet in completions(&p, &full_space) {
                for &f in interps {
                    if simulate(&table, ENTRY, &packet, f)? != Verdict::Accept {
                        report.access_violations.push(format!(
                            "seed {seed}: {p:?} certified accessible but {packet:?} dropped under interpretation {}",
                            f.seed()
                        ));
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Runs the campaign, one table per task (parallel with the `parallel`
/// feature).
pub fn run_campaign(cfg: &CampaignConfig) -> Result<CampaignReport, OracleError> {
    let seeds: Vec<u64> = (cfg.first_seed..cfg.first_seed + cfg.tables as u64).collect();
    let reports: Vec<CampaignReport> = seeds
        .par_iter()
        .map(|&seed| check_table(seed, cfg))
        .collect::<Result<_, _>>()?;
    Ok(reports.into_iter().fold(CampaignReport::default(), CampaignReport::merge))
}

pub fn run_campaign_sequential(cfg: &CampaignConfig) -> Result<CampaignReport, OracleError> {
    let mut report = CampaignReport::default();
    for seed in cfg.first_seed..cfg.first_seed + cfg.tables as u64 {
        report = report.merge(check_table(seed, cfg)?);
    }
    Ok(report)
}

/// Compares the unfolded list (no state assumption) against the chain walk
/// for every packet of `space`. Only meaningful for tables whose RETURN
/// rules have at most one primitive and that contain no unknowns; returns
/// the disagreeing contexts.
pub fn unfold_disagreements(
    table: &RulesetTable,
    entry: &str,
    space: &PacketSpace,
) -> Result<Vec<String>, OracleError> {
    let width = space.width;
    let flat = preprocess(table, entry, false)?;
    let chain_walk = CompiledTable::new(table, entry, width)?;
    let flat_walk = CompiledTable::flat(&flat, width)?;
    let f = UnknownInterp::new(0);
    let mut out = Vec::new();
    for ctx in space.contexts() {
        let a = chain_walk.accepted(&ctx, f);
        let b = flat_walk.accepted(&ctx, f);
        if a != b {
            out.push(format!("{ctx:?}: chain walk {:?} vs flat {:?}", a.to_set(width), b.to_set(width)));
        }
    }
    Ok(out)
}

/// Statistics of [`run_unfold_campaign`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnfoldReport {
    pub tables: usize,
    pub contexts: u64,
    pub disagreements: Vec<String>,
}

/// Unfolding-equivalence campaign over Return-simple, unknown-free tables.
pub fn run_unfold_campaign(tables: usize, first_seed: u64) -> Result<UnfoldReport, OracleError> {
    let params = RandomParams {
        unknown_rate: 0.0,
        simple_returns: true,
        ..RandomParams::default()
    };
    let ifaces = ["eth0", "eth1", "eth2", "wlan0"];
    let seeds: Vec<u64> = (first_seed..first_seed + tables as u64).collect();
    let per_table: Vec<(u64, Vec<String>)> = seeds
        .par_iter()
        .map(|&seed| {
            let table = random_table(seed, &params);
            let space = PacketSpace::for_table(&table, params.width, &ifaces, &CtState::ALL);
            let n = space.contexts().count() as u64;
            unfold_disagreements(&table, ENTRY, &space)
                .map(|d| (n, d.into_iter().map(|s| format!("seed {seed}: {s}")).collect()))
        })
        .collect::<Result<_, _>>()?;
    let mut report = UnfoldReport {
        tables,
        ..UnfoldReport::default()
    };
    for (n, d) in per_table {
        report.contexts += n;
        report.disagreements.extend(d);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_campaign_is_clean() {
        let cfg = CampaignConfig::standard(20, 6);
        let report = run_campaign(&cfg).unwrap();
        assert_eq!(report.tables, 20);
        assert!(report.soundness_violations.is_empty(), "{:?}", report.soundness_violations);
        assert!(report.prefix_violations.is_empty(), "{:?}", report.prefix_violations);
        assert!(report.contract_violations.is_empty());
        assert!(report.access_violations.is_empty(), "{:?}", report.access_violations);
        assert_eq!(report, run_campaign_sequential(&cfg).unwrap());
    }

    #[test]
    fn small_unfold_campaign_agrees() {
        let report = run_unfold_campaign(15, 1000).unwrap();
        assert!(report.disagreements.is_empty(), "{:?}", report.disagreements);
    }

    #[test]
    fn completions_fill_missing_fields() {
        let width = Width::new(8).unwrap();
        let space = PacketSpace::covering([], width, &["eth0"], &[CtState::New]);
        let p = PacketPattern {
            in_iface: "eth0".into(),
            src_ip: 9,
            dst_ip: None,
            protocol: Some("tcp".into()),
            dst_port: None,
            state: CtState::New,
        };
        let c = completions(&p, &space);
        assert_eq!(c.len(), space.dsts.len() * super::super::batch::SENTINEL_PORTS.len());
        assert!(c.iter().all(|s| s.protocol == Proto::Tcp && s.src_ip == 9));
    }
}
