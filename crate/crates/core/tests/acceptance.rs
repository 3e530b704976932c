//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line, then exits non-zero if any
//! criterion failed.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spoofcert::certifier::{may_match_srcs, must_match_srcs};
use spoofcert::fw_model::{CtState, MatchExpr, MatchPrim, PortRange, PrimKind, StateSet};
use spoofcert::oracle::fuzz::{run_campaign, run_unfold_campaign, CampaignConfig, CampaignReport};
use spoofcert::oracle::{matches, Proto, SimPacket, UnknownInterp};
use spoofcert::parser::{parse_ipassmt, parse_save};
use spoofcert::preprocess::{is_preprocessed, preprocess};
use spoofcert::workload::vlan_firewall;
use spoofcert::{certify_all, Cidr, IntervalSet, Width};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn w8() -> Width {
    Width::new(8).unwrap()
}

// 1 --------------------------------------------------------------------

const GOLDEN: [(&str, bool); 5] = [
    ("golden_guard.rules", true),
    ("golden_foo_guard.rules", false),
    ("golden_foo_accept.rules", false),
    ("golden_foo_bar.rules", true),
    ("golden_tcp_split.rules", false),
];

fn golden_examples() -> Outcome {
    let ipassmt = parse_ipassmt(&read_fixture("eth0.ipassmt")).unwrap();
    let mut got = Vec::new();
    let mut ok = true;
    for (name, expected) in GOLDEN {
        let save = parse_save(&read_fixture(name)).unwrap();
        let table = save.table("filter").unwrap();
        let flat = preprocess(table, "FORWARD", true).unwrap();
        let certified = certify_all(&flat, &ipassmt).unwrap()["eth0"].certified;
        ok &= certified == expected;
        got.push(if certified { "certify" } else { "fail" });
    }
    Outcome::new(ok, got.join(", "))
}

// 2 --------------------------------------------------------------------

type Naive = BTreeSet<u32>;

fn naive(set: &IntervalSet) -> Naive {
    set.intervals().iter().flat_map(|iv| iv.lo()..=iv.hi()).collect()
}

fn from_naive(width: Width, n: &Naive) -> IntervalSet {
    IntervalSet::from_ranges(width, n.iter().map(|&v| (v, v))).unwrap()
}

fn is_canonical(set: &IntervalSet) -> bool {
    set.intervals().windows(2).all(|w| w[0].hi() as u64 + 1 < w[1].lo() as u64)
}

/// Smallest number of CIDR blocks covering exactly `n`, by brute force over
/// aligned blocks.
fn naive_min_cidrs(width: Width, n: &Naive) -> usize {
    let bits = width.bits();
    let mut count = 0;
    let mut covered = Naive::new();
    for len in 0..=bits {
        let size = 1u64 << (bits - len);
        let mut base = 0u64;
        while base <= width.max() as u64 {
            let block: Vec<u32> = (base..base + size).map(|v| v as u32).collect();
            let inside = block.iter().all(|v| n.contains(v));
            let parent_inside = len > 0 && {
                let psize = size * 2;
                let pbase = base / psize * psize;
                (pbase..pbase + psize).all(|v| n.contains(&(v as u32)))
            };
            if inside && !parent_inside && !covered.contains(&block[0]) {
                count += 1;
                covered.extend(block);
            }
            base += size;
        }
    }
    count
}

fn random_set(rng: &mut ChaCha8Rng, width: Width) -> IntervalSet {
    let max = width.max();
    let n = rng.gen_range(0..6);
    let ranges: Vec<(u32, u32)> = (0..n)
        .map(|_| {
            let a = rng.gen_range(0..=max);
            let span = if rng.gen_bool(0.5) { rng.gen_range(0..8) } else { rng.gen_range(0..=max) };
            (a, a.saturating_add(span).min(max))
        })
        .collect();
    IntervalSet::from_ranges(width, ranges).unwrap()
}

/// Returns a description of the first disagreement, if any.
fn compare_ops(a: &IntervalSet, b: &IntervalSet) -> Option<String> {
    let width = a.width();
    let (na, nb) = (naive(a), naive(b));
    let universe: Naive = (0..=width.max()).collect();
    let checks: [(&str, IntervalSet, Naive); 4] = [
        ("union", a.union(b).unwrap(), na.union(&nb).copied().collect()),
        ("intersect", a.intersect(b).unwrap(), na.intersection(&nb).copied().collect()),
        ("difference", a.difference(b).unwrap(), na.difference(&nb).copied().collect()),
        ("complement", a.complement(), universe.difference(&na).copied().collect()),
    ];
    for (op, got, want) in checks {
        if naive(&got) != want || !is_canonical(&got) {
            return Some(format!("{op}({a}, {b}) = {got}"));
        }
    }
    if a.is_subset(b).unwrap() != na.is_subset(&nb) {
        return Some(format!("is_subset({a}, {b})"));
    }
    if a.count() != na.len() as u64 || a.is_empty() != na.is_empty() || a.is_universe() != (na == universe) {
        return Some(format!("count/empty/universe of {a}"));
    }
    if a != &from_naive(width, &na) {
        return Some(format!("representation of {a} is not unique"));
    }
    let cidrs = a.to_cidr_list();
    let mut back = Naive::new();
    for c in &cidrs {
        back.extend(naive(&c.to_set()));
    }
    if back != na || cidrs.len() != naive_min_cidrs(width, &na) {
        return Some(format!("cidr list of {a}: {cidrs:?}"));
    }
    for v in [0, 1, width.max() / 2, width.max()] {
        if a.contains(v) != na.contains(&v) {
            return Some(format!("contains({a}, {v})"));
        }
    }
    None
}

fn wordset_model() -> Outcome {
    let width = w8();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0usize;
    let mut failures = Vec::new();
    for _ in 0..10_000 {
        let (a, b) = (random_set(&mut rng, width), random_set(&mut rng, width));
        cases += 1;
        failures.extend(compare_ops(&a, &b));
    }
    // Edge cases: empty, universe, every singleton, adjacent and
    // overlapping interval pairs.
    let mut edges = vec![IntervalSet::empty(width), IntervalSet::universe(width)];
    edges.extend((0..=width.max()).map(|v| IntervalSet::from_ranges(width, [(v, v)]).unwrap()));
    for k in [0u32, 1, 127, 254] {
        edges.push(IntervalSet::from_ranges(width, [(0, k), (k + 1, 255)]).unwrap());
        edges.push(IntervalSet::from_ranges(width, [(k, k + 1)]).unwrap());
        edges.push(IntervalSet::from_ranges(width, [(0, k)]).unwrap());
    }
    for a in &edges {
        for b in edges.iter().step_by(7) {
            cases += 1;
            failures.extend(compare_ops(a, b));
        }
    }
    let detail = match failures.first() {
        None => format!("{cases} cases, 0 mismatches"),
        Some(f) => format!("{} mismatches of {cases}, first: {f}", failures.len()),
    };
    Outcome::new(failures.is_empty(), detail)
}

// 3, 4, 6 (fuzz part), 8 share one campaign ---------------------------

fn campaign() -> (CampaignReport, Duration) {
    let cfg = CampaignConfig::standard(1000, 20);
    let t0 = Instant::now();
    let report = run_campaign(&cfg).expect("campaign runs");
    (report, t0.elapsed())
}

fn soundness(r: &CampaignReport, elapsed: Duration) -> Outcome {
    let pass = r.tables >= 1000 && r.soundness_violations.is_empty() && elapsed <= Duration::from_secs(300);
    let mut detail = format!(
        "{} tables, {}/{} interfaces certified, {} context x interpretation checks, {} violations, {:.1?}",
        r.tables,
        r.ifaces_certified,
        r.ifaces_checked,
        r.soundness_checks,
        r.soundness_violations.len(),
        elapsed
    );
    if let Some(v) = r.soundness_violations.first() {
        detail.push_str(&format!("; first: {v}"));
    }
    Outcome::new(pass, detail)
}

fn prefix_invariants(r: &CampaignReport) -> Outcome {
    let mut detail = format!("{} prefixes, {} violations", r.prefixes_checked, r.prefix_violations.len());
    if let Some(v) = r.prefix_violations.first() {
        detail.push_str(&format!("; first: {v}"));
    }
    Outcome::new(r.prefixes_checked > 0 && r.prefix_violations.is_empty(), detail)
}

fn access(r: &CampaignReport) -> Outcome {
    let mut detail = format!(
        "{} probes, {} definitely accepted, {} violations",
        r.access_probes,
        r.access_certified,
        r.access_violations.len()
    );
    if let Some(v) = r.access_violations.first() {
        detail.push_str(&format!("; first: {v}"));
    }
    Outcome::new(r.access_certified > 0 && r.access_violations.is_empty(), detail)
}

// 5 --------------------------------------------------------------------

const IFACES: [&str; 4] = ["eth0", "eth1", "eth2", "wlan0"];

fn random_prim(rng: &mut ChaCha8Rng, width: Width, fragment: bool) -> MatchPrim {
    let kinds = if fragment { 2 } else { 7 };
    let kind = match rng.gen_range(0..kinds) {
        0 => {
            let pat = *["eth0", "eth1", "eth+", "wlan0", "et+"].choose(rng).unwrap();
            PrimKind::InIface(pat.into())
        }
        1 => {
            let len = rng.gen_range(0..=8u8);
            let raw = rng.gen_range(0..=255u32);
            let base = if len == 0 { 0 } else { raw >> (8 - len) << (8 - len) };
            PrimKind::SrcIp(Cidr::new(base, len, width).unwrap().to_set())
        }
        2 => PrimKind::DstIp(Cidr::new(rng.gen_range(0..4) * 64, 2, width).unwrap().to_set()),
        3 => PrimKind::Protocol((*["tcp", "udp", "icmp"].choose(rng).unwrap()).into()),
        4 => PrimKind::DstPort(PortRange::single(*[22u16, 80, 443].choose(rng).unwrap())),
        5 => {
            let mut s = StateSet::new();
            s.insert(*CtState::ALL.choose(rng).unwrap());
            PrimKind::CtState(s)
        }
        _ => PrimKind::Unknown((*["--foo", "--bar"].choose(rng).unwrap()).into()),
    };
    MatchPrim {
        kind,
        negated: rng.gen_bool(0.3),
    }
}

fn random_expr(rng: &mut ChaCha8Rng, width: Width, fragment: bool) -> MatchExpr {
    let n = rng.gen_range(0..5);
    MatchExpr::new((0..n).map(|_| random_prim(rng, width, fragment)).collect())
}

fn random_packet(rng: &mut ChaCha8Rng, iface: &str) -> SimPacket {
    SimPacket {
        in_iface: iface.into(),
        src_ip: 0,
        dst_ip: rng.gen_range(0..=255),
        protocol: *Proto::ALL.choose(rng).unwrap(),
        dst_port: *[22u16, 80, 443, 8080].choose(rng).unwrap(),
        state: *CtState::ALL.choose(rng).unwrap(),
    }
}

/// Sources matched by `m` when every other field is taken from `p`.
fn enumerate(m: &MatchExpr, p: &SimPacket, f: UnknownInterp) -> Naive {
    let mut p = p.clone();
    (0..=255u32)
        .filter(|&s| {
            p.src_ip = s;
            matches(m, &p, f)
        })
        .collect()
}

fn approximations() -> Outcome {
    let width = w8();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let interps = UnknownInterp::sample(4);
    let (mut general, mut fragment, mut failures) = (0usize, 0usize, Vec::new());
    for _ in 0..10_000 {
        let m = random_expr(&mut rng, width, false);
        let iface = *IFACES.choose(&mut rng).unwrap();
        let may = may_match_srcs(&m, iface, width).unwrap();
        let must = must_match_srcs(&m, iface, width).unwrap();
        general += 1;
        if !must.is_subset(&may).unwrap() {
            failures.push(format!("must {must} not within may {may} for {m} on {iface}"));
        }
        // Both bounds also hold against the enumerated match set for any
        // packet and interpretation.
        let p = random_packet(&mut rng, iface);
        for &f in &interps {
            let exact = enumerate(&m, &p, f);
            if !exact.is_subset(&naive(&may)) || !naive(&must).is_subset(&exact) {
                failures.push(format!("bounds violated for {m} on {iface} under {}", f.seed()));
            }
        }
    }
    for _ in 0..10_000 {
        let m = random_expr(&mut rng, width, true);
        let iface = *IFACES.choose(&mut rng).unwrap();
        let may = may_match_srcs(&m, iface, width).unwrap();
        let must = must_match_srcs(&m, iface, width).unwrap();
        let exact = enumerate(&m, &random_packet(&mut rng, iface), UnknownInterp::new(0));
        fragment += 1;
        if naive(&may) != exact || naive(&must) != exact {
            failures.push(format!("{m} on {iface}: may {may}, must {must}, exact {exact:?}"));
        }
    }
    let mut detail = format!("{general} general + {fragment} fragment expressions, {} failures", failures.len());
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first: {f}"));
    }
    Outcome::new(failures.is_empty(), detail)
}

// 6 --------------------------------------------------------------------

const FIXTURES: [&str; 9] = [
    "golden_guard.rules",
    "golden_foo_guard.rules",
    "golden_foo_accept.rules",
    "golden_foo_bar.rules",
    "golden_tcp_split.rules",
    "campus.rules",
    "campus_leaky.rules",
    "access.rules",
    "calls.rules",
];

fn preprocessing(r: &CampaignReport) -> Outcome {
    let mut failures = r.contract_violations.clone();
    let mut flats = 0;
    for name in FIXTURES {
        let save = parse_save(&read_fixture(name)).unwrap();
        for table in save.tables.iter().filter(|t| t.name == "filter") {
            for chain in ["INPUT", "FORWARD", "OUTPUT"] {
                for assume_new in [true, false] {
                    flats += 1;
                    match preprocess(table, chain, assume_new) {
                        Ok(flat) if is_preprocessed(&flat) => {}
                        Ok(_) => failures.push(format!("{name} {chain}: malformed flat list")),
                        Err(e) => failures.push(format!("{name} {chain}: {e}")),
                    }
                }
            }
        }
    }
    let unfold = run_unfold_campaign(500, 10_000).expect("unfold campaign runs");
    failures.extend(unfold.disagreements.iter().cloned());
    let mut detail = format!(
        "{flats} fixture flat lists, {} fuzz tables, {} tables x {} contexts compared against the chain walk, {} failures",
        r.tables,
        unfold.tables,
        unfold.contexts,
        failures.len()
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; first: {f}"));
    }
    Outcome::new(failures.is_empty(), detail)
}

// 7 --------------------------------------------------------------------

fn performance() -> Outcome {
    let (table, ipassmt) = vlan_firewall(20, 5000, 7);
    let t0 = Instant::now();
    let flat = preprocess(&table, "FORWARD", true).unwrap();
    let prep = t0.elapsed();
    let t1 = Instant::now();
    let results = certify_all(&flat, &ipassmt).unwrap();
    let cert = t1.elapsed();
    let all_certified = results.values().all(|r| r.certified);
    let pass = flat.len() >= 5000
        && ipassmt.len() == 20
        && all_certified
        && cert < Duration::from_secs(1)
        && prep < Duration::from_secs(10);
    Outcome::new(
        pass,
        format!(
            "{} flat rules, {} interfaces (all certified: {all_certified}): certify_all {:.1?}, preprocessing {:.1?}",
            flat.len(),
            ipassmt.len(),
            cert,
            prep
        ),
    )
}

fn main() {
    // Timing criteria first, before the campaign warms anything up.
    let c7 = performance();
    let c1 = golden_examples();
    let c2 = wordset_model();
    let (report, elapsed) = campaign();
    let c3 = soundness(&report, elapsed);
    let c4 = prefix_invariants(&report);
    let c5 = approximations();
    let c6 = preprocessing(&report);
    let c8 = access(&report);

    let rows = [
        (1, "golden examples", c1),
        (2, "interval algebra vs naive model", c2),
        (3, "soundness fuzz", c3),
        (4, "prefix invariants", c4),
        (5, "approximation ordering", c5),
        (6, "preprocessing contract", c6),
        (7, "performance", c7),
        (8, "lockout check soundness", c8),
    ];
    let mut failed = 0;
    for (n, name, o) in &rows {
        println!("criterion {n} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
