use std::collections::BTreeMap;
use std::path::Path;

use gridledger::chain::{RecordKind, TraceQuery};
use gridledger::credit::{CreditReason, Role};
use gridledger::simnet::{
    inject_fault, new_sim, FaultKind, FaultOutcome, FaultSpec, Scenario, Sim, SimConfig, SimError, SimReport,
};
use proptest::prelude::*;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn sim_from(text: &str) -> Sim {
    let sc = Scenario::parse(text).unwrap();
    new_sim(SimConfig::from_scenario(&sc).unwrap(), &sc).unwrap()
}

fn run(text: &str) -> (Sim, SimReport) {
    let mut sim = sim_from(text);
    let report = sim.run_scenario();
    (sim, report)
}

fn desk_nodes(n: u32) -> String {
    let mut s = String::from("config recorders 3\nconfig supervisors 1\n");
    for id in 1..=n {
        s += &format!("node {id} assessment {}\n", 100 - id);
    }
    s
}

#[test]
fn honest_run_commits_two_blocks() {
    let (sim, report) = run(&fixture("honest.scn"));
    let m = report.metrics();
    assert_eq!(m.blocks_committed, 2);
    assert_eq!(m.records_committed, 12);
    assert_eq!(m.blocks_rejected, 0);
    assert_eq!(m.records_quarantined, 0);
    let per_block: Vec<usize> = report.chain.blocks()[1..].iter().map(|b| b.records.len()).collect();
    assert_eq!(per_block, vec![6, 6]);
    assert_eq!(report.ledger.credit(10), Some(6));
    assert_eq!(report.ledger.credit(11), Some(6));
    for id in sim.node_ids() {
        assert_eq!(report.node_verification[&id], Ok(()));
        assert!(report.node_agrees[&id], "node {id} diverged");
    }
    assert!(report.ledger.audit_log().iter().all(|e| e.delta > 0));
    assert_eq!(report.ledger.replay(0), report.ledger.credits());
    assert_eq!(report.audit.flag_count(), 0);
    assert_eq!(report.audit.objects.len(), 12);
}

#[test]
fn identical_inputs_give_identical_reports() {
    for name in ["honest.scn", "faults.scn", "share.scn"] {
        let a = run(&fixture(name)).1;
        let b = run(&fixture(name)).1;
        assert_eq!(a.trace_text(), b.trace_text(), "{name}");
        assert_eq!(a.chain_export(), b.chain_export(), "{name}");
        assert_eq!(a.fingerprint(), b.fingerprint(), "{name}");
    }
    let text = fixture("honest.scn");
    assert_eq!(sim_from(&text).state_digest(), sim_from(&text).state_digest());
    let other = text.replace("config seed 7", "config seed 8");
    assert_ne!(run(&text).1.chain_export(), run(&other).1.chain_export());
}

#[test]
fn zero_tick_run_is_genesis_only() {
    let mut sim = sim_from(&fixture("honest.scn"));
    let report = sim.run(0);
    assert_eq!(report.chain.len(), 1);
    assert_eq!(report.metrics().blocks_committed, 0);
}

#[test]
fn committee_sizes() {
    let mut text = String::new();
    for id in 1..=150 {
        text += &format!("node {id} assessment {}\n", id % 17);
    }
    let sim = sim_from(&text);
    let a = sim.assignment();
    assert_eq!((a.recorders.len(), a.supervisors.len(), a.candidates.len()), (101, 20, 29));

    let sim = sim_from(&desk_nodes(6));
    let a = sim.assignment();
    assert_eq!((a.recorders.len(), a.supervisors.len(), a.candidates.len()), (3, 1, 2));
    assert_eq!(a.recorders, vec![1, 2, 3]);
}

#[test]
fn events_never_run_early() {
    let (_, report) = run(&fixture("share.scn"));
    let mut last = 0;
    let mut sent: BTreeMap<String, u64> = BTreeMap::new();
    for line in &report.trace {
        let cols: Vec<&str> = line.split('\t').collect();
        let tick: u64 = cols[0].parse().unwrap();
        assert!(tick >= last, "trace went backwards at {line}");
        last = tick;
        if cols[1] == "deliver" {
            let seq = cols[4].split_whitespace().find(|f| f.starts_with("seq=")).unwrap();
            assert!(sent.insert(seq.to_string(), tick).is_none());
        }
    }
}

#[test]
fn forgeries_and_byzantine_validator() {
    let (sim, report) = run(&fixture("faults.scn"));
    let m = report.metrics();
    assert_eq!(m.records_quarantined, 3);
    assert_eq!(m.detection_rate(FaultKind::ForgeRecord), Some(1.0));
    for forger in [20, 21, 22] {
        assert_eq!(report.ledger.credit(forger), Some(-1));
    }
    assert_eq!(report.ledger.credit(10), Some(3));
    let byz = report.ledger.credit(6).unwrap();
    assert!(byz < 0, "byzantine credit {byz}");
    let honest: Vec<i64> = [4, 5].iter().map(|id| report.ledger.credit(*id).unwrap()).collect();
    assert!((byz as f64) < honest.iter().sum::<i64>() as f64 / 2.0);
    for id in sim.node_ids() {
        assert_eq!(report.node_verification[&id], Ok(()), "node {id}");
        assert!(report.node_agrees[&id]);
    }
    assert!(report.chain.records().all(|(_, _, r)| sim.payload(&r.payload_digest).is_some()));
    assert_eq!(report.ledger.replay(0), report.ledger.credits());
    for f in &report.faults {
        assert_eq!(f.outcome, FaultOutcome::Detected, "{}", f.detail);
    }
}

#[test]
fn tampered_copy_is_caught_and_isolated() {
    let text = fixture("honest.scn").replace("run until 1200", "fault tamper-chain-copy 4 at 1203 block=1 record=2\nrun until 1800");
    let (sim, report) = run(&text);
    let v = report.node_verification[&4].unwrap_err();
    assert_eq!(v.index, 1);
    for id in sim.node_ids().filter(|&id| id != 4) {
        assert_eq!(report.node_verification[&id], Ok(()));
        assert!(report.node_agrees[&id]);
    }
    assert!(report.chain.verify().is_ok());
    assert_eq!(report.faults[0].outcome, FaultOutcome::Detected);
}

#[test]
fn crashed_duty_recorder_skips_one_round() {
    // Round 2 (sealed at 1200) belongs to recorder 3 of [1,2,3].
    let text = desk_nodes(6) + "user 10\nauthorize 10\nupload 10 load 64 at 100\nupload 10 load 64 at 700\n\
        fault crash-node 3 at 650 for=600\nrun until 2400\n";
    let (_, report) = run(&text);
    let ticks: Vec<u64> = report.chain.blocks().iter().map(|b| b.header.timestamp_tick).collect();
    assert_eq!(ticks, vec![0, 600, 1800, 2400]);
    assert_eq!(report.stats.rounds_skipped, 1);
    assert_eq!(report.faults[0].outcome, FaultOutcome::Tolerated);
    // The upload sent to the crashed recorder is lost; the first one survives.
    assert_eq!(report.chain.records().count(), 1);
    assert!(report.node_agrees[&3], "recovered node resynced");
}

#[test]
fn tamper_in_flight_is_rejected() {
    let text = desk_nodes(6) + "user 10\nauthorize 10\nfault tamper-in-flight 2 at 0\nupload 10 load 64 at 5\n\
        upload 10 load 64 at 100\nrun until 600\n";
    let (_, report) = run(&text);
    assert_eq!(report.faults[0].outcome, FaultOutcome::Detected);
    assert_eq!(report.stats.upload_rejections.values().sum::<u64>(), 1);
    assert_eq!(report.chain.records().count(), 1);
    assert_eq!(report.ledger.credit(10), Some(0));
}

#[test]
fn storage_unit_failure_is_tolerated() {
    let text = fixture("honest.scn").replace(
        "run until 1200",
        "fault fail-storage-unit 0 at 300 for=500\nfault fail-storage-unit 4 at 900\nrun until 1200",
    );
    let (sim, report) = run(&text);
    for f in &report.faults {
        assert_eq!(f.outcome, FaultOutcome::Tolerated, "{}", f.detail);
    }
    let store = sim.store();
    for d in store.object_digests() {
        assert!(store.get(d).is_some());
    }
    assert!(report.audit.flag_count() > 0, "unit 4 is still down");
}

#[test]
fn sharing_records_lineage() {
    let text = fixture("share.scn");
    let sc = Scenario::parse(&text).unwrap();
    let mut cfg = SimConfig::from_scenario(&sc).unwrap();
    cfg.capture_wire = true;
    let mut sim = new_sim(cfg, &sc).unwrap();
    let report = sim.run_scenario();
    let d = sim.upload_digest(1).unwrap();

    assert_eq!(report.deliveries.len(), 1);
    assert!(report.deliveries[0].exact);
    assert_eq!((report.deliveries[0].sender, report.deliveries[0].receiver), (10, 11));
    let outcomes: Vec<&str> = report.shares.iter().map(|s| s.outcome.as_str()).collect();
    assert_eq!(outcomes, vec!["sent", "not-owner"]);

    let lineage = report.chain.trace(&TraceQuery::Digest(d));
    assert_eq!(lineage.len(), 2);
    assert_eq!(lineage[0].record.metadata.kind, RecordKind::GridData);
    assert!(matches!(lineage[1].record.metadata.kind, RecordKind::ShareTransaction { .. }));
    assert!(lineage[0].block_index < lineage[1].block_index);

    let share_msgs: Vec<_> = sim.captured().iter().filter(|c| c.kind == "share-envelope").collect();
    assert_eq!(share_msgs.len(), 1);
    for c in sim.captured() {
        for env in &c.envelopes {
            for id in sim.node_ids().filter(|&id| id != c.dst) {
                assert!(sim.keypair(id).unwrap().decrypt(env).is_err());
            }
        }
    }
}

#[test]
fn no_plaintext_on_the_wire() {
    let sc = Scenario::parse(&fixture("share.scn")).unwrap();
    let mut cfg = SimConfig::from_scenario(&sc).unwrap();
    cfg.capture_wire = true;
    let mut sim = new_sim(cfg, &sc).unwrap();
    sim.run_scenario();
    assert!(!sim.captured().is_empty());
    for (_, payload) in sim.payloads() {
        let probe = &payload[..32];
        for c in sim.captured() {
            assert!(!c.bytes.windows(probe.len()).any(|w| w == probe), "{} leaks payload", c.kind);
        }
    }
}

#[test]
fn unauthorized_uploader_never_reaches_chain() {
    let text = desk_nodes(6) + "user 10\nuser 11\nauthorize 10\nupload 11 load 64 at 5\nupload 10 load 64 at 6\nrun until 600\n";
    let (sim, report) = run(&text);
    assert_eq!(report.stats.uploads_denied, 1);
    let outsider = sim.keypair(11).unwrap().public;
    assert!(report.chain.trace(&TraceQuery::Uploader(outsider)).is_empty());
    assert_eq!(report.chain.records().count(), 1);
    assert_eq!(report.ledger.credit(11), Some(0));
}

#[test]
fn reelection_promotes_by_credit() {
    // Epoch of one block: after the first block, credits reorder the committee.
    let text = "config recorders 2\nconfig supervisors 1\nconfig epoch 1\n\
        node 1 assessment 50\nnode 2 assessment 40\nnode 3 assessment 30\nnode 4 assessment 20\nnode 5 assessment 10\n\
        fault byzantine-validator 3 at 0\nrun until 1200\n";
    let (_, report) = run(text);
    assert_eq!(report.roles.len(), 3);
    // The block sealed at 600 commits a few ticks after that boundary's
    // re-election, so the first re-election still sees equal credits.
    assert_eq!(report.roles[1].assignment.recorders, vec![1, 2]);
    // Block 1 by recorder 2: validators 3 (supervisor, byzantine), 4, 5.
    // 4 and 5 agree (+1), 3 dissents (−1), recorder 2 +1.
    let second = &report.roles[2].assignment;
    assert_eq!(second.recorders, vec![2, 4]);
    assert_eq!(second.supervisors, vec![5]);
    assert_eq!(second.candidates, vec![1, 3]);
    assert_eq!(report.ledger.profile(3).unwrap().role, Role::Candidate);
    assert!(report.metrics().role_churn[1].2 > 0);
}

#[test]
fn inject_fault_checks_targets() {
    let mut sim = sim_from(&desk_nodes(6));
    assert!(matches!(
        inject_fault(&mut sim, FaultSpec::new(FaultKind::CrashNode, 99, 0)),
        Err(SimError::UnknownTarget { .. })
    ));
    assert!(matches!(
        inject_fault(&mut sim, FaultSpec::new(FaultKind::FailStorageUnit, 5, 0)),
        Err(SimError::UnknownTarget { .. })
    ));
    sim.run(10);
    assert!(matches!(
        inject_fault(&mut sim, FaultSpec::new(FaultKind::CrashNode, 1, 3)),
        Err(SimError::PastActivation { .. })
    ));
    inject_fault(&mut sim, FaultSpec::new(FaultKind::ForgeRecord, 2, 100).with("size", 40)).unwrap();
    let report = sim.run(1200);
    // Committee node 2 is not authorized, so its forged upload is denied.
    assert_eq!(report.faults[0].outcome, FaultOutcome::NotTriggered);
}

#[test]
fn credit_events_have_unit_magnitude() {
    let (_, report) = run(&fixture("faults.scn"));
    for e in report.ledger.audit_log() {
        assert_eq!(e.delta.abs(), 1);
        assert_eq!(e.delta, e.reason.delta());
    }
    let erroneous = report
        .ledger
        .audit_log()
        .iter()
        .filter(|e| e.reason == CreditReason::RecordErroneous)
        .count();
    assert_eq!(erroneous, report.quarantine.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Every honest upload lands in a block sealed within two intervals.
    #[test]
    fn honest_uploads_commit_within_two_intervals(
        seed in any::<u64>(),
        ticks in prop::collection::vec(0u64..1800, 1..12),
        delay in 1u64..4,
    ) {
        let mut text = desk_nodes(6) + &format!("config seed {seed}\nconfig delay {delay}\nuser 10\nauthorize 10\n");
        for t in &ticks {
            text += &format!("upload 10 load 48 at {t}\n");
        }
        text += "run until 3000\n";
        let mut sim = sim_from(&text);
        let report = sim.run_scenario();
        prop_assert_eq!(report.chain.records().count(), ticks.len());
        for (b, _, r) in report.chain.records() {
            let sealed = report.chain.blocks()[b].header.timestamp_tick;
            prop_assert!(sealed - r.metadata.created_tick <= 2 * 600);
        }
        prop_assert_eq!(report.pending_at_end, 0);
    }
}
