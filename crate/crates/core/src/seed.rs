// SPDX-License-Identifier: Apache-2.0

//! Stable seed derivation. Every stochastic choice in a run draws its seed
//! from the root seed and a path of labels, so results do not depend on
//! scheduling order.

use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, path: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for part in path {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
