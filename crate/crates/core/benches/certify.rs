//! Parallel versus sequential: per-interface certification of a large
//! synthetic ruleset, and a small soundness fuzz campaign.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use spoofcert::oracle::fuzz::{run_campaign, run_campaign_sequential, CampaignConfig};
use spoofcert::workload::vlan_firewall;
use spoofcert::{certify_all, certify_all_sequential, preprocess};

fn certify(c: &mut Criterion) {
    let mut group = c.benchmark_group("certify_all");
    for rules in [1000, 5000, 20_000] {
        let (table, ipassmt) = vlan_firewall(20, rules, 7);
        let flat = preprocess(&table, "FORWARD", true).unwrap();
        group.bench_with_input(BenchmarkId::new("parallel", rules), &flat, |b, flat| {
            b.iter(|| certify_all(black_box(flat), &ipassmt).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", rules), &flat, |b, flat| {
            b.iter(|| certify_all_sequential(black_box(flat), &ipassmt).unwrap())
        });
    }
    group.finish();

    let (table, _) = vlan_firewall(20, 5000, 7);
    c.bench_function("preprocess/5000", |b| {
        b.iter(|| preprocess(black_box(&table), "FORWARD", true).unwrap())
    });
}

fn campaign(c: &mut Criterion) {
    let cfg = CampaignConfig::standard(20, 20);
    let mut group = c.benchmark_group("fuzz_campaign_20_tables");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| run_campaign(black_box(&cfg)).unwrap()));
    group.bench_function("sequential", |b| {
        b.iter(|| run_campaign_sequential(black_box(&cfg)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, certify, campaign);
criterion_main!(benches);
