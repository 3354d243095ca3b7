use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use gridledger::chain::{Record, RecordMetadata};
use gridledger::credit::{rank_by, CommitteeConfig, CreditLedger, NodeProfile, RoleAssignment};
use gridledger::crypto::{self, generate_keypair, Digest, Envelope, Keypair};
use gridledger::datastore::{DataStore, StoredObject};
use gridledger::merkle::{build_tree, leaf_digest, verify_inclusion};

fn fixture(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)).unwrap()
}

fn table(name: &str) -> BTreeMap<String, String> {
    fixture(name)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn key(seed: u64) -> Keypair {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_be_bytes());
    generate_keypair(&s).unwrap()
}

#[test]
fn empty_digest_vector() {
    assert_eq!(
        crypto::digest(b"").to_hex(),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
}

#[test]
fn merkle_vectors() {
    let vectors = fixture("merkle_vectors.tsv");
    let mut seen = 0;
    for line in vectors.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let (n, root) = line.split_once('\t').unwrap();
        let n: usize = n.parse().unwrap();
        let leaves: Vec<Digest> = (0..n).map(|i| leaf_digest(format!("item-{i}").as_bytes())).collect();
        assert_eq!(build_tree(&leaves).root().to_hex(), root, "{n} leaves");
        seen += 1;
    }
    assert_eq!(seen, 16);
}

#[test]
fn canonical_record_vector() {
    let v = table("golden_record.txt");
    let kp = generate_keypair(&hex::decode(&v["seed"]).unwrap()).unwrap();
    assert_eq!(kp.public.to_hex(), v["public_key"]);
    let d = crypto::digest(b"meter-reading");
    assert_eq!(d.to_hex(), v["payload_digest"]);
    let rec = Record::new(&kp, d, RecordMetadata::grid_data("load", 600).unwrap());
    assert_eq!(rec.uploader_signature.to_hex(), v["signature"]);
    assert_eq!(hex::encode(rec.canonical_bytes()), v["record"]);
    assert_eq!(rec.leaf().to_hex(), v["leaf"]);
    let back = Record::from_bytes(&hex::decode(&v["record"]).unwrap()).unwrap();
    assert_eq!(back, rec);
    assert!(back.signature_valid());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_bit_flip_breaks_a_signature(seed in any::<u64>(), msg in prop::collection::vec(any::<u8>(), 1..200), bit in any::<usize>(), which in 0u8..3) {
        let kp = key(seed);
        let sig = kp.sign(&msg);
        prop_assert!(crypto::verify(&kp.public, &msg, &sig));
        let (mut m, mut s, mut k) = (msg.clone(), sig.as_bytes().to_vec(), kp.public.as_bytes().to_vec());
        let target = match which { 0 => &mut m, 1 => &mut s, _ => &mut k };
        let bit = bit % (target.len() * 8);
        target[bit / 8] ^= 1 << (bit % 8);
        prop_assert!(!crypto::verify_bytes(&k, &m, &s));
    }

    #[test]
    fn envelopes_open_only_for_their_recipient(seed in any::<u64>(), msg in prop::collection::vec(any::<u8>(), 0..400), bit in any::<usize>()) {
        let (alice, eve) = (key(seed), key(seed ^ 0x5555));
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let env = crypto::encrypt_for_with_rng(&alice.public, &msg, &mut rng);
        prop_assert_eq!(alice.decrypt(&env).unwrap(), msg.clone());
        prop_assert!(eve.decrypt(&env).is_err());
        let mut raw = env.to_bytes();
        let bit = bit % (raw.len() * 8);
        raw[bit / 8] ^= 1 << (bit % 8);
        let opened = Envelope::from_bytes(&raw).ok().and_then(|e| alice.decrypt(&e).ok());
        prop_assert!(opened.is_none());
    }

    #[test]
    fn merkle_proofs_bind_leaf_and_index(leaves in prop::collection::vec(any::<[u8; 32]>(), 1..64), pick in any::<usize>()) {
        let leaves: Vec<Digest> = leaves.into_iter().map(Digest::from_array).collect();
        let tree = build_tree(&leaves);
        let root = tree.root();
        let i = pick % leaves.len();
        let proof = tree.prove_inclusion(i).unwrap();
        prop_assert!(verify_inclusion(&root, &leaves[i], &proof));
        for (j, other) in leaves.iter().enumerate() {
            if other != &leaves[i] {
                prop_assert!(!verify_inclusion(&root, other, &proof), "leaf {} accepted at {}", j, i);
            }
        }
        let mut moved = proof.clone();
        moved.leaf_index = (i + 1) % (1 << proof.path.len()).max(1);
        if moved.leaf_index != i {
            prop_assert!(!verify_inclusion(&root, &leaves[i], &moved));
        }
        prop_assert!(tree.prove_inclusion(leaves.len()).is_err());
    }

    #[test]
    fn reelection_is_a_stable_credit_sort(
        events in prop::collection::vec((0usize..200, any::<bool>()), 0..400),
        n in 1usize..200,
        recorders in 1usize..30,
        supervisors in 0usize..10,
    ) {
        let config = CommitteeConfig { max_recorders: recorders, max_supervisors: supervisors, ..CommitteeConfig::default() };
        let kp = key(1);
        let mut ledger = CreditLedger::new((0..n as u32).map(|id| NodeProfile::new(id, kp.public, (id * 7 % 13) as u64))).unwrap();
        let start = ledger.initialize_roles(&config).unwrap();
        for (who, ok) in events {
            ledger.apply_record_outcome((who % n) as u32, ok, 1).unwrap();
        }
        let next = ledger.reelect(&start, &config);

        let mut oracle: Vec<(i64, u32)> = (0..n as u32).map(|id| (ledger.credit(id).unwrap(), id)).collect();
        oracle.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let ranked: Vec<u32> = oracle.iter().map(|p| p.1).collect();
        prop_assert_eq!(&next, &RoleAssignment::from_ranking(&ranked, &config, 1));
        prop_assert_eq!(next.recorders.len(), recorders.min(n));
        prop_assert_eq!(next.supervisors.len(), supervisors.min(n - next.recorders.len()));
    }

    #[test]
    fn raising_credit_never_lowers_rank(credits in prop::collection::vec(-20i64..20, 2..100), who in any::<usize>(), bump in 1i64..10) {
        let who = (who % credits.len()) as u32;
        let position = |c: &Vec<i64>| rank_by(0..c.len() as u32, |id| c[id as usize] as i128).iter().position(|&id| id == who).unwrap();
        let before = position(&credits);
        let mut raised = credits.clone();
        raised[who as usize] += bump;
        prop_assert!(position(&raised) <= before);
    }

    #[test]
    fn objects_survive_any_two_failures(ops in prop::collection::vec((0u8..3, 0u32..5, any::<u64>()), 1..80)) {
        let owner = key(9);
        let mut store = DataStore::with_units(5);
        let mut objects = Vec::new();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for (op, unit, salt) in ops {
            let down = store.units().filter(|u| !u.alive).count();
            match op {
                0 => {
                    let payload = salt.to_be_bytes();
                    let obj = StoredObject {
                        payload_digest: crypto::digest(&payload),
                        ciphertext: crypto::encrypt_for_with_rng(&owner.public, &payload, &mut rng),
                        owner: owner.public,
                    };
                    store.put(obj.clone(), 3).unwrap();
                    if !objects.iter().any(|o: &StoredObject| o.payload_digest == obj.payload_digest) {
                        objects.push(obj);
                    }
                }
                1 if down < 2 => store.fail_unit(unit).unwrap(),
                _ => {
                    let report = store.recover_unit(unit).unwrap();
                    prop_assert!(report.unrecoverable.is_empty());
                }
            }
            for o in &objects {
                prop_assert_eq!(store.get(&o.payload_digest), Some(o));
            }
        }
        for u in 0..5 {
            store.recover_unit(u).unwrap();
        }
        prop_assert_eq!(store.audit().flag_count(), 0);
    }
}
