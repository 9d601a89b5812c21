//! Binary Merkle trees over 32-byte leaves.
//!
//! A level of odd length duplicates its last node. A one-leaf tree's root is
//! the leaf itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Reader};
use crate::primitives::{hash_pair, Hash};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MerkleError {
    #[error("merkle tree over an empty leaf set")]
    EmptyLeafSet,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Which side the sibling sits on when folding a proof upwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Canonical for Side {
    fn encode_to(&self, out: &mut Vec<u8>) {
        out.push(match self {
            Side::Left => 0,
            Side::Right => 1,
        });
    }
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match u8::decode_from(r)? {
            0 => Ok(Side::Left),
            1 => Ok(Side::Right),
            tag => Err(DecodeError::InvalidTag { ty: "Side", tag }),
        }
    }
}

pub type MerkleProof = Vec<(Hash, Side)>;

fn next_level(level: &[Hash]) -> Vec<Hash> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [a, b] => hash_pair(a, b),
            [a] => hash_pair(a, a),
            _ => unreachable!(),
        })
        .collect()
}

pub fn merkle_root(leaves: &[Hash]) -> Result<Hash, MerkleError> {
    if leaves.is_empty() {
        return Err(MerkleError::EmptyLeafSet);
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    Ok(level[0])
}

/// Inclusion proof for `leaves[index]`, sibling hashes bottom-up.
pub fn merkle_proof(leaves: &[Hash], index: usize) -> Result<MerkleProof, MerkleError> {
    if leaves.is_empty() {
        return Err(MerkleError::EmptyLeafSet);
    }
    if index >= leaves.len() {
        return Err(MerkleError::IndexOutOfRange {
            index,
            len: leaves.len(),
        });
    }
    let mut proof = Vec::new();
    let mut level = leaves.to_vec();
    let mut idx = index;
    while level.len() > 1 {
        let sibling = if idx.is_multiple_of(2) {
            let s = level.get(idx + 1).copied().unwrap_or(level[idx]);
            (s, Side::Right)
        } else {
            (level[idx - 1], Side::Left)
        };
        proof.push(sibling);
        level = next_level(&level);
        idx /= 2;
    }
    Ok(proof)
}

/// Folds `proof` from `leaf` and returns the resulting root.
pub fn fold_proof(leaf: Hash, proof: &[(Hash, Side)]) -> Hash {
    proof.iter().fold(leaf, |acc, (sib, side)| match side {
        Side::Right => hash_pair(&acc, sib),
        Side::Left => hash_pair(sib, &acc),
    })
}

pub fn verify_proof(leaf: Hash, proof: &[(Hash, Side)], root: Hash) -> bool {
    fold_proof(leaf, proof) == root
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::hash;
    use proptest::prelude::*;

    fn leaf(i: u8) -> Hash {
        hash(&[i])
    }

    #[test]
    fn empty_is_error() {
        assert_eq!(merkle_root(&[]), Err(MerkleError::EmptyLeafSet));
    }

    #[test]
    fn single_leaf_is_root() {
        assert_eq!(merkle_root(&[leaf(1)]).unwrap(), leaf(1));
    }

    #[test]
    fn two_leaves() {
        assert_eq!(
            merkle_root(&[leaf(1), leaf(2)]).unwrap(),
            hash_pair(&leaf(1), &leaf(2))
        );
    }

    #[test]
    fn three_leaves_duplicate_last() {
        // Frozen from Python hashlib: sha3_256(sha3_256(h1||h2) || sha3_256(h3||h3))
        // with h_i = sha3_256(bytes([i])).
        let root = merkle_root(&[leaf(1), leaf(2), leaf(3)]).unwrap();
        assert_eq!(
            root.to_hex(),
            "18dd699f11d30b2dd557d88143cada524d74759bf9d69b4b279e61715d7147a8"
        );
    }

    #[test]
    fn proof_index_out_of_range() {
        assert_eq!(
            merkle_proof(&[leaf(1)], 1),
            Err(MerkleError::IndexOutOfRange { index: 1, len: 1 })
        );
    }

    proptest! {
        #[test]
        fn proofs_verify(n in 1usize..40, pick in 0usize..40) {
            let leaves: Vec<Hash> = (0..n).map(|i| hash(&(i as u32).to_be_bytes())).collect();
            let idx = pick % n;
            let root = merkle_root(&leaves).unwrap();
            let proof = merkle_proof(&leaves, idx).unwrap();
            prop_assert!(verify_proof(leaves[idx], &proof, root));
        }

        #[test]
        fn permutation_changes_root(n in 2usize..20, a in 0usize..20, b in 0usize..20) {
            let leaves: Vec<Hash> = (0..n).map(|i| hash(&(i as u32).to_be_bytes())).collect();
            let (a, b) = (a % n, b % n);
            prop_assume!(a != b);
            let mut permuted = leaves.clone();
            permuted.swap(a, b);
            prop_assert_ne!(merkle_root(&leaves).unwrap(), merkle_root(&permuted).unwrap());
        }
    }
}
