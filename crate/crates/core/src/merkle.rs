//! Binary Merkle trees over record digests.
//!
//! Conventions:
//! * leaves are tagged digests produced by [`leaf_digest`] (prefix `0x00`);
//! * interior nodes are `digest(0x01 || left || right)`;
//! * an odd node at any level is paired with itself;
//! * a single leaf is its own root, and the empty tree's root is `digest(b"")`.

use thiserror::Error;

use crate::crypto::{digest, digest_parts, Digest};

pub const LEAF_PREFIX: u8 = 0x00;
pub const NODE_PREFIX: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MerkleError {
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Leaf digest of a serialized item.
pub fn leaf_digest(data: &[u8]) -> Digest {
    digest_parts(&[&[LEAF_PREFIX], data])
}

pub fn node_digest(left: &Digest, right: &Digest) -> Digest {
    digest_parts(&[&[NODE_PREFIX], left.as_bytes(), right.as_bytes()])
}

/// Root of the tree with no leaves.
pub fn empty_root() -> Digest {
    digest(b"")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleTree {
    /// `levels[0]` is the leaf level, the last level holds the root alone.
    levels: Vec<Vec<Digest>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// The sibling is hashed on the left of the running digest.
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InclusionProof {
    pub leaf_index: usize,
    pub path: Vec<(Digest, Side)>,
}

pub fn build_tree(leaves: &[Digest]) -> MerkleTree {
    let mut levels = vec![leaves.to_vec()];
    while levels.last().is_some_and(|l| l.len() > 1) {
        let prev = levels.last().expect("non-empty");
        let next = prev
            .chunks(2)
            .map(|pair| node_digest(&pair[0], pair.get(1).unwrap_or(&pair[0])))
            .collect();
        levels.push(next);
    }
    MerkleTree { levels }
}

impl MerkleTree {
    pub fn leaves(&self) -> &[Digest] {
        &self.levels[0]
    }

    pub fn levels(&self) -> &[Vec<Digest>] {
        &self.levels
    }

    /// Number of hashing levels above the leaves.
    pub fn height(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn root(&self) -> Digest {
        match self.levels.last().and_then(|l| l.first()) {
            Some(root) => *root,
            None => empty_root(),
        }
    }

    pub fn prove_inclusion(&self, index: usize) -> Result<InclusionProof, MerkleError> {
        let len = self.leaves().len();
        if index >= len {
            return Err(MerkleError::IndexOutOfRange { index, len });
        }
        let mut path = Vec::with_capacity(self.height());
        let mut i = index;
        for level in &self.levels[..self.height()] {
            let step = if i.is_multiple_of(2) {
                (*level.get(i + 1).unwrap_or(&level[i]), Side::Right)
            } else {
                (level[i - 1], Side::Left)
            };
            path.push(step);
            i /= 2;
        }
        Ok(InclusionProof {
            leaf_index: index,
            path,
        })
    }
}

/// Recompute the root from `leaf` along `proof`. The side flags must agree
/// with the bits of `proof.leaf_index`.
pub fn verify_inclusion(root: &Digest, leaf: &Digest, proof: &InclusionProof) -> bool {
    if proof.path.len() < usize::BITS as usize && proof.leaf_index >> proof.path.len() != 0 {
        return false;
    }
    let mut acc = *leaf;
    for (level, (sibling, side)) in proof.path.iter().enumerate() {
        let bit_is_right = (proof.leaf_index >> level) & 1 == 1;
        acc = match (side, bit_is_right) {
            (Side::Right, false) => node_digest(&acc, sibling),
            (Side::Left, true) => node_digest(sibling, &acc),
            _ => return false,
        };
    }
    acc == *root
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(n: usize) -> Vec<Digest> {
        (0..n as u32).map(|i| leaf_digest(&i.to_be_bytes())).collect()
    }

    #[test]
    fn degenerate_roots() {
        assert_eq!(build_tree(&[]).root(), digest(b""));
        let one = leaves(1);
        assert_eq!(build_tree(&one).root(), one[0]);
        assert_eq!(build_tree(&one).height(), 0);
    }

    #[test]
    fn three_leaves_duplicate_last() {
        let d = leaves(3);
        let expected = node_digest(&node_digest(&d[0], &d[1]), &node_digest(&d[2], &d[2]));
        assert_eq!(build_tree(&d).root(), expected);
    }

    #[test]
    fn out_of_range_proof() {
        let t = build_tree(&leaves(4));
        assert_eq!(
            t.prove_inclusion(4).unwrap_err(),
            MerkleError::IndexOutOfRange { index: 4, len: 4 }
        );
        assert!(build_tree(&[]).prove_inclusion(0).is_err());
    }

    #[test]
    fn seven_leaf_tree_exhaustive() {
        let d = leaves(7);
        let t = build_tree(&d);
        for i in 0..7 {
            let p = t.prove_inclusion(i).unwrap();
            assert_eq!(p.path.len(), t.height());
            for (j, leaf) in d.iter().enumerate() {
                assert_eq!(verify_inclusion(&t.root(), leaf, &p), i == j, "proof {i} leaf {j}");
            }
        }
    }

    #[test]
    fn flipped_sibling_fails() {
        let d = leaves(5);
        let t = build_tree(&d);
        for i in 0..5 {
            let p = t.prove_inclusion(i).unwrap();
            for k in 0..p.path.len() {
                for bit in [0usize, 77, 255] {
                    let mut bad = p.clone();
                    let mut raw = *bad.path[k].0.as_bytes();
                    raw[bit / 8] ^= 1 << (bit % 8);
                    bad.path[k].0 = Digest::from_array(raw);
                    assert!(!verify_inclusion(&t.root(), &d[i], &bad));
                }
            }
        }
    }

    #[test]
    fn relabelled_index_fails() {
        let d = leaves(4);
        let t = build_tree(&d);
        let mut p = t.prove_inclusion(1).unwrap();
        p.leaf_index = 5;
        assert!(!verify_inclusion(&t.root(), &d[1], &p));
    }
}
