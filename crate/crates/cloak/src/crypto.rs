//! Block encryption and randomness.
//!
//! Every stored element travels as a fixed-width AES-128-GCM block:
//! 12-byte nonce, ciphertext of exactly the element size, 16-byte tag.
//! Constant width is load-bearing: the storage server and anyone watching
//! it must not be able to tell elements apart by size, and re-encryption
//! with a fresh nonce on every write-back is what makes a rewritten block
//! unlinkable to the one that was read.
//!
//! Randomness comes in two flavors. Simulation mode threads a seeded
//! ChaCha20 generator through everything so whole runs replay bit for bit;
//! deployment mode draws its generator state from the operating system and
//! exposes no way to seed it.

use aes_gcm::aead::Aead;
use aes_gcm::{Aes128Gcm, Key, KeyInit, Nonce};
use rand::RngCore;
use rand_chacha::ChaCha20Rng;
use rand_chacha::rand_core::SeedableRng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

/// On-the-wire width of an encrypted element.
pub fn block_width(element_size: usize) -> usize {
    NONCE_LEN + element_size + TAG_LEN
}

/// Deterministic generator for simulation and tests.
pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Generator keyed from OS entropy. There is deliberately no seeded
/// variant of this constructor; deployment code paths call this and
/// nothing else.
pub fn secure_rng() -> ChaCha20Rng {
    ChaCha20Rng::from_os_rng()
}

/// One encrypted element: `nonce || ciphertext || tag`, always
/// `block_width(element_size)` bytes on the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CipherBlock {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl CipherBlock {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NONCE_LEN + self.ciphertext.len() + TAG_LEN);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8], element_size: usize) -> Result<Self> {
        let want = block_width(element_size);
        if bytes.len() != want {
            return Err(Error::WidthMismatch { expected: want, got: bytes.len() });
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&bytes[..NONCE_LEN]);
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&bytes[NONCE_LEN + element_size..]);
        Ok(CipherBlock {
            nonce,
            ciphertext: bytes[NONCE_LEN..NONCE_LEN + element_size].to_vec(),
            tag,
        })
    }
}

/// AES-128-GCM over fixed-size elements.
#[derive(Clone)]
pub struct BlockCipher {
    cipher: Aes128Gcm,
    element_size: usize,
}

impl BlockCipher {
    pub fn new(key: [u8; KEY_LEN], element_size: usize) -> Self {
        assert!(element_size >= 1, "zero-size elements are unaddressable");
        BlockCipher {
            cipher: Aes128Gcm::new(Key::<Aes128Gcm>::from_slice(&key)),
            element_size,
        }
    }

    pub fn random_key(rng: &mut impl RngCore) -> [u8; KEY_LEN] {
        let mut key = [0u8; KEY_LEN];
        rng.fill_bytes(&mut key);
        key
    }

    pub fn element_size(&self) -> usize {
        self.element_size
    }

    pub fn block_width(&self) -> usize {
        block_width(self.element_size)
    }

    /// Encrypts one element under a nonce drawn from `rng`.
    pub fn encrypt(&self, plaintext: &[u8], rng: &mut impl RngCore) -> Result<CipherBlock> {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        self.encrypt_with_nonce(plaintext, nonce)
    }

    fn encrypt_with_nonce(&self, plaintext: &[u8], nonce: [u8; NONCE_LEN]) -> Result<CipherBlock> {
        if plaintext.len() != self.element_size {
            return Err(Error::WidthMismatch {
                expected: self.element_size,
                got: plaintext.len(),
            });
        }
        let mut ct = self
            .cipher
            .encrypt(Nonce::from_slice(&nonce), plaintext)
            .map_err(|_| Error::AuthFailure)?;
        let tag_bytes = ct.split_off(self.element_size);
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&tag_bytes);
        Ok(CipherBlock { nonce, ciphertext: ct, tag })
    }

    /// Decrypts and authenticates one block.
    pub fn decrypt(&self, block: &CipherBlock) -> Result<Vec<u8>> {
        if block.ciphertext.len() != self.element_size {
            return Err(Error::WidthMismatch {
                expected: self.element_size,
                got: block.ciphertext.len(),
            });
        }
        let mut joined = Vec::with_capacity(self.element_size + TAG_LEN);
        joined.extend_from_slice(&block.ciphertext);
        joined.extend_from_slice(&block.tag);
        self.cipher
            .decrypt(Nonce::from_slice(&block.nonce), joined.as_slice())
            .map_err(|_| Error::AuthFailure)
    }

    /// Batch encryption. Nonces are drawn serially from `rng` (keeping
    /// seeded runs deterministic), the AEAD work fans out across cores.
    pub fn encrypt_batch(&self, plaintexts: &[Vec<u8>], rng: &mut impl RngCore) -> Result<Vec<CipherBlock>> {
        let nonces: Vec<[u8; NONCE_LEN]> = (0..plaintexts.len())
            .map(|_| {
                let mut n = [0u8; NONCE_LEN];
                rng.fill_bytes(&mut n);
                n
            })
            .collect();
        plaintexts
            .par_iter()
            .zip(nonces)
            .map(|(pt, nonce)| self.encrypt_with_nonce(pt, nonce))
            .collect()
    }

    pub fn decrypt_batch(&self, blocks: &[CipherBlock]) -> Result<Vec<Vec<u8>>> {
        blocks.par_iter().map(|b| self.decrypt(b)).collect()
    }
}

/// A bijection on `0..len`. `image(i)` is where position `i` lands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation { map: (0..n).collect() }
    }

    /// Uniform random permutation (Fisher-Yates).
    pub fn random(n: usize, rng: &mut impl RngCore) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            map.swap(i, j);
        }
        Permutation { map }
    }

    pub fn from_vec(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &v in &map {
            if v >= n {
                return Err(Error::Protocol(format!("permutation image {v} out of range {n}")));
            }
            if seen[v] {
                return Err(Error::Protocol(format!("permutation image {v} repeated")));
            }
            seen[v] = true;
        }
        Ok(Permutation { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn image(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v] = i;
        }
        Permutation { map: inv }
    }

    /// Scatters `items` so that `out[image(i)] = items[i]`.
    pub fn scatter<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.map.len());
        let mut out: Vec<Option<T>> = vec![None; items.len()];
        for (i, item) in items.iter().enumerate() {
            out[self.map[i]] = Some(item.clone());
        }
        out.into_iter().map(|x| x.unwrap()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn round_trip_and_width() {
        let mut rng = seeded_rng(1);
        let cipher = BlockCipher::new(BlockCipher::random_key(&mut rng), 64);
        let pt = vec![7u8; 64];
        let block = cipher.encrypt(&pt, &mut rng).unwrap();
        assert_eq!(block.to_bytes().len(), block_width(64));
        assert_eq!(cipher.decrypt(&block).unwrap(), pt);

        let parsed = CipherBlock::from_bytes(&block.to_bytes(), 64).unwrap();
        assert_eq!(parsed, block);
    }

    #[test]
    fn wrong_size_plaintext_rejected() {
        let mut rng = seeded_rng(2);
        let cipher = BlockCipher::new([0u8; 16], 32);
        assert!(cipher.encrypt(&[0u8; 31], &mut rng).is_err());
        assert!(cipher.encrypt(&[0u8; 33], &mut rng).is_err());
    }

    #[test]
    fn tamper_detected() {
        let mut rng = seeded_rng(3);
        let cipher = BlockCipher::new([9u8; 16], 16);
        let mut block = cipher.encrypt(&[1u8; 16], &mut rng).unwrap();
        block.ciphertext[0] ^= 1;
        assert!(matches!(cipher.decrypt(&block), Err(Error::AuthFailure)));

        let mut block2 = cipher.encrypt(&[1u8; 16], &mut rng).unwrap();
        block2.tag[5] ^= 0x80;
        assert!(cipher.decrypt(&block2).is_err());
    }

    #[test]
    fn wrong_key_fails_auth() {
        let mut rng = seeded_rng(4);
        let a = BlockCipher::new([1u8; 16], 16);
        let b = BlockCipher::new([2u8; 16], 16);
        let block = a.encrypt(&[0u8; 16], &mut rng).unwrap();
        assert!(b.decrypt(&block).is_err());
    }

    #[test]
    fn seeded_encryption_replays() {
        let cipher = BlockCipher::new([3u8; 16], 8);
        let one = cipher.encrypt(&[5u8; 8], &mut seeded_rng(77)).unwrap();
        let two = cipher.encrypt(&[5u8; 8], &mut seeded_rng(77)).unwrap();
        assert_eq!(one, two);
        // Different seeds give different nonces, hence different bytes.
        let three = cipher.encrypt(&[5u8; 8], &mut seeded_rng(78)).unwrap();
        assert_ne!(one.to_bytes(), three.to_bytes());
    }

    #[test]
    fn million_blocks_never_collide() {
        let mut rng = seeded_rng(5);
        let cipher = BlockCipher::new(BlockCipher::random_key(&mut rng), 16);
        let pt = vec![0u8; 16];
        let mut seen: HashSet<[u8; NONCE_LEN]> = HashSet::with_capacity(1 << 20);
        let mut blocks: HashSet<Vec<u8>> = HashSet::with_capacity(1 << 20);
        for _ in 0..1_000_000 {
            let b = cipher.encrypt(&pt, &mut rng).unwrap();
            assert!(seen.insert(b.nonce), "nonce repeated");
            assert!(blocks.insert(b.to_bytes()), "serialized block repeated");
        }
    }

    #[test]
    fn batch_matches_serial() {
        let cipher = BlockCipher::new([8u8; 16], 8);
        let pts: Vec<Vec<u8>> = (0..64u8).map(|i| vec![i; 8]).collect();
        let batch = cipher.encrypt_batch(&pts, &mut seeded_rng(9)).unwrap();
        let mut rng = seeded_rng(9);
        for (pt, blk) in pts.iter().zip(&batch) {
            let serial = cipher.encrypt(pt, &mut rng).unwrap();
            assert_eq!(&serial, blk);
        }
        assert_eq!(cipher.decrypt_batch(&batch).unwrap(), pts);
    }

    #[test]
    fn permutation_bijective_and_invertible() {
        let mut rng = seeded_rng(6);
        for n in [0usize, 1, 2, 10, 257] {
            let p = Permutation::random(n, &mut rng);
            let mut hit = vec![false; n];
            for i in 0..n {
                assert!(!hit[p.image(i)]);
                hit[p.image(i)] = true;
            }
            let inv = p.inverse();
            for i in 0..n {
                assert_eq!(inv.image(p.image(i)), i);
            }
        }
        assert!(Permutation::from_vec(vec![0, 0]).is_err());
        assert!(Permutation::from_vec(vec![2, 0]).is_err());
    }

    #[test]
    fn scatter_places_by_image() {
        let p = Permutation::from_vec(vec![2, 0, 1]).unwrap();
        assert_eq!(p.scatter(&['a', 'b', 'c']), vec!['b', 'c', 'a']);
    }

    #[test]
    fn permutations_are_uniform() {
        // 4! = 24 cells, 12,000 draws, chi-square against uniform.
        let mut rng = seeded_rng(7);
        let mut counts = std::collections::HashMap::new();
        let draws = 12_000;
        for _ in 0..draws {
            let p = Permutation::random(4, &mut rng);
            let key: Vec<usize> = (0..4).map(|i| p.image(i)).collect();
            *counts.entry(key).or_insert(0u64) += 1;
        }
        assert_eq!(counts.len(), 24);
        let expected = draws as f64 / 24.0;
        let stat: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let p = crate::stats::chi_square_p_value(stat, 23.0);
        assert!(p > 0.01, "chi2={stat} p={p}");
    }
}
