//! Replicated, content-addressed store for at-rest ciphertext.
//!
//! Objects are keyed by the digest of their plaintext and placed on
//! `replication_factor` live units by rendezvous (highest-random-weight)
//! hashing. A failed unit loses its contents; recovery copies every object
//! whose placement includes the unit back from a surviving replica.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::crypto::{digest_parts, Digest, Envelope, PublicKey, PUBLIC_KEY_LEN};

pub type UnitId = u32;

pub const DEFAULT_REPLICATION_FACTOR: usize = 3;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("replication factor must be at least 1")]
    ZeroReplication,
    #[error("need {needed} live units, only {live} available")]
    InsufficientUnits { needed: usize, live: usize },
    #[error("unknown storage unit {0}")]
    UnknownUnit(UnitId),
    #[error("duplicate storage unit {0}")]
    DuplicateUnit(UnitId),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("object file: {0}")]
    Object(#[from] CodecError),
}

/// Ciphertext sealed to the owner, keyed by the plaintext digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredObject {
    pub payload_digest: Digest,
    pub ciphertext: Envelope,
    pub owner: PublicKey,
}

impl StoredObject {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        Writer::new()
            .fixed(self.payload_digest.as_bytes())
            .fixed(self.owner.as_bytes())
            .bytes(&self.ciphertext.to_bytes())
            .finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let payload_digest = Digest::from_array(r.array("payload digest")?);
        let owner = PublicKey::from_slice(r.fixed(PUBLIC_KEY_LEN, "owner")?).expect("fixed length");
        let ciphertext = Envelope::from_bytes(r.bytes("ciphertext")?)
            .map_err(|_| CodecError::Invalid("envelope"))?;
        r.finish()?;
        Ok(StoredObject {
            payload_digest,
            ciphertext,
            owner,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageUnit {
    pub unit_id: UnitId,
    pub region: String,
    pub alive: bool,
    objects: BTreeMap<Digest, StoredObject>,
}

impl StorageUnit {
    pub fn new(unit_id: UnitId, region: impl Into<String>) -> Self {
        StorageUnit {
            unit_id,
            region: region.into(),
            alive: true,
            objects: BTreeMap::new(),
        }
    }

    pub fn holds(&self, d: &Digest) -> bool {
        self.objects.contains_key(d)
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RepairReport {
    pub restored: Vec<Digest>,
    pub unrecoverable: Vec<Digest>,
}

impl RepairReport {
    pub fn is_empty(&self) -> bool {
        self.restored.is_empty() && self.unrecoverable.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaStatus {
    pub payload_digest: Digest,
    pub expected: usize,
    pub live: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuditReport {
    pub objects: Vec<ReplicaStatus>,
}

impl AuditReport {
    pub fn under_replicated(&self) -> impl Iterator<Item = &ReplicaStatus> {
        self.objects.iter().filter(|s| s.live < s.expected)
    }

    pub fn flag_count(&self) -> usize {
        self.under_replicated().count()
    }

    pub fn render(&self) -> String {
        let mut out = String::from("digest\texpected\tlive\tstatus\n");
        for s in &self.objects {
            let status = match s.live {
                0 => "lost",
                n if n < s.expected => "under-replicated",
                _ => "ok",
            };
            out.push_str(&format!("{}\t{}\t{}\t{}\n", s.payload_digest, s.expected, s.live, status));
        }
        out.push_str(&format!("flags\t{}\n", self.flag_count()));
        out
    }
}

fn rendezvous_weight(d: &Digest, unit: UnitId) -> u64 {
    let h = digest_parts(&[b"gridledger/placement", d.as_bytes(), &unit.to_be_bytes()]);
    u64::from_be_bytes(h.as_bytes()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DataStore {
    units: BTreeMap<UnitId, StorageUnit>,
    placements: BTreeMap<Digest, Vec<UnitId>>,
}

impl DataStore {
    pub fn new(units: impl IntoIterator<Item = StorageUnit>) -> Result<Self, StoreError> {
        let mut map = BTreeMap::new();
        for u in units {
            let id = u.unit_id;
            if map.insert(id, u).is_some() {
                return Err(StoreError::DuplicateUnit(id));
            }
        }
        Ok(DataStore {
            units: map,
            placements: BTreeMap::new(),
        })
    }

    /// `count` units named `region-<i>`.
    pub fn with_units(count: u32) -> Self {
        Self::new((0..count).map(|i| StorageUnit::new(i, format!("region-{i}")))).expect("unique ids")
    }

    pub fn units(&self) -> impl Iterator<Item = &StorageUnit> {
        self.units.values()
    }

    pub fn unit(&self, id: UnitId) -> Option<&StorageUnit> {
        self.units.get(&id)
    }

    pub fn placement(&self, d: &Digest) -> Option<&[UnitId]> {
        self.placements.get(d).map(Vec::as_slice)
    }

    pub fn object_digests(&self) -> impl Iterator<Item = &Digest> {
        self.placements.keys()
    }

    fn live_units(&self) -> Vec<UnitId> {
        self.units.values().filter(|u| u.alive).map(|u| u.unit_id).collect()
    }

    /// Top-`replication_factor` live units by rendezvous weight.
    pub fn place(&self, d: &Digest, replication_factor: usize) -> Result<Vec<UnitId>, StoreError> {
        if replication_factor == 0 {
            return Err(StoreError::ZeroReplication);
        }
        let mut live = self.live_units();
        if live.len() < replication_factor {
            return Err(StoreError::InsufficientUnits {
                needed: replication_factor,
                live: live.len(),
            });
        }
        live.sort_by(|a, b| {
            rendezvous_weight(d, *b)
                .cmp(&rendezvous_weight(d, *a))
                .then(a.cmp(b))
        });
        live.truncate(replication_factor);
        Ok(live)
    }

    /// Store `object`. Re-putting a known digest returns its existing placement.
    pub fn put(&mut self, object: StoredObject, replication_factor: usize) -> Result<Vec<UnitId>, StoreError> {
        let placement = match self.placements.get(&object.payload_digest) {
            Some(existing) => existing.clone(),
            None => self.place(&object.payload_digest, replication_factor)?,
        };
        for id in &placement {
            let unit = self.units.get_mut(id).expect("placement refers to known units");
            if unit.alive {
                unit.objects
                    .entry(object.payload_digest)
                    .or_insert_with(|| object.clone());
            }
        }
        self.placements.insert(object.payload_digest, placement.clone());
        Ok(placement)
    }

    /// Any live replica of `d`.
    pub fn get(&self, d: &Digest) -> Option<&StoredObject> {
        self.placements.get(d)?.iter().find_map(|id| {
            let unit = &self.units[id];
            if unit.alive {
                unit.objects.get(d)
            } else {
                None
            }
        })
    }

    /// Destroy a unit: it goes dark and loses its contents.
    pub fn fail_unit(&mut self, id: UnitId) -> Result<(), StoreError> {
        let unit = self.units.get_mut(&id).ok_or(StoreError::UnknownUnit(id))?;
        unit.alive = false;
        unit.objects.clear();
        Ok(())
    }

    pub fn recover_unit(&mut self, id: UnitId) -> Result<RepairReport, StoreError> {
        let unit = self.units.get(&id).ok_or(StoreError::UnknownUnit(id))?;
        if unit.alive {
            return Ok(RepairReport::default());
        }
        let mut report = RepairReport::default();
        let mut copies = Vec::new();
        for (d, placement) in &self.placements {
            if !placement.contains(&id) {
                continue;
            }
            match self.get(d) {
                Some(obj) => {
                    copies.push(obj.clone());
                    report.restored.push(*d);
                }
                None => report.unrecoverable.push(*d),
            }
        }
        let unit = self.units.get_mut(&id).expect("checked above");
        unit.alive = true;
        for obj in copies {
            unit.objects.insert(obj.payload_digest, obj);
        }
        Ok(report)
    }

    pub fn audit(&self) -> AuditReport {
        AuditReport {
            objects: self
                .placements
                .iter()
                .map(|(d, placement)| ReplicaStatus {
                    payload_digest: *d,
                    expected: placement.len(),
                    live: placement
                        .iter()
                        .filter(|id| {
                            let u = &self.units[id];
                            u.alive && u.holds(d)
                        })
                        .count(),
                })
                .collect(),
        }
    }

    /// Write `objects/<hex digest>.obj` files and a text `manifest.txt`.
    pub fn dump(&self, dir: &Path) -> Result<(), StoreError> {
        let objects_dir = dir.join("objects");
        fs::create_dir_all(&objects_dir)?;
        let mut manifest = String::new();
        for u in self.units.values() {
            let state = if u.alive { "alive" } else { "dead" };
            manifest.push_str(&format!("unit\t{}\t{}\t{}\n", u.unit_id, u.region, state));
        }
        for (d, placement) in &self.placements {
            let ids: Vec<String> = placement.iter().map(u32::to_string).collect();
            manifest.push_str(&format!("place\t{}\t{}\n", d, ids.join(",")));
            for id in placement {
                if self.units[id].alive && self.units[id].holds(d) {
                    manifest.push_str(&format!("hold\t{}\t{}\n", id, d));
                }
            }
            if let Some(obj) = self.get(d) {
                fs::write(objects_dir.join(format!("{d}.obj")), obj.canonical_bytes())?;
            }
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let bad = |line: usize, msg: &str| StoreError::Manifest {
            line,
            msg: msg.to_string(),
        };
        let mut store = DataStore::default();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["unit", id, region, state] => {
                    let id: UnitId = id.parse().map_err(|_| bad(n, "unit id"))?;
                    let mut unit = StorageUnit::new(id, *region);
                    unit.alive = match *state {
                        "alive" => true,
                        "dead" => false,
                        _ => return Err(bad(n, "unit state")),
                    };
                    if store.units.insert(id, unit).is_some() {
                        return Err(StoreError::DuplicateUnit(id));
                    }
                }
                ["place", d, ids] => {
                    let d = Digest::from_hex(d).map_err(|_| bad(n, "digest"))?;
                    let ids = ids
                        .split(',')
                        .map(|s| s.parse::<UnitId>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| bad(n, "unit list"))?;
                    if ids.iter().any(|id| !store.units.contains_key(id)) {
                        return Err(bad(n, "placement names an unknown unit"));
                    }
                    store.placements.insert(d, ids);
                }
                ["hold", id, d] => {
                    let id: UnitId = id.parse().map_err(|_| bad(n, "unit id"))?;
                    let d = Digest::from_hex(d).map_err(|_| bad(n, "digest"))?;
                    let bytes = fs::read(dir.join("objects").join(format!("{d}.obj")))?;
                    let obj = StoredObject::from_bytes(&bytes)?;
                    if obj.payload_digest != d {
                        return Err(bad(n, "object file digest mismatch"));
                    }
                    let unit = store.units.get_mut(&id).ok_or_else(|| bad(n, "unknown unit"))?;
                    unit.objects.insert(d, obj);
                }
                [""] => {}
                _ => return Err(bad(n, "unrecognised line")),
            }
        }
        Ok(store)
    }
}
