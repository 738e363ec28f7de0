//! Additively homomorphic encryption used for the secure purity exchange.
//!
//! Two interchangeable backends share one API:
//!
//! * `Paillier`: textbook Paillier with `g = n + 1`; ciphertexts live in
//!   `Z*_{n^2}`, addition is ciphertext multiplication and scalar
//!   multiplication is exponentiation.
//! * `Mock`: the plaintext in an opaque envelope with wrapping 64-bit
//!   arithmetic. Same message shapes and counts, no cryptographic cost.
//!
//! Every ciphertext carries the fingerprint of the key that produced it, so
//! decrypting under the wrong key is reported instead of yielding garbage.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeBackend {
    Paillier,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PublicRepr {
    Paillier { n: BigUint, n_squared: BigUint },
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HePublicKey {
    fingerprint: u64,
    bits: usize,
    repr: PublicRepr,
}

#[derive(Debug, Clone)]
enum SecretRepr {
    Paillier { lambda: BigUint, mu: BigUint },
    Mock,
}

#[derive(Debug, Clone)]
pub struct HeKeypair {
    pub public: HePublicKey,
    secret: SecretRepr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CtRepr {
    Big(BigUint),
    Small(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeCiphertext {
    fingerprint: u64,
    repr: CtRepr,
}

impl HeCiphertext {
    /// Big-endian wire encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        match &self.repr {
            CtRepr::Big(v) => v.to_bytes_be(),
            CtRepr::Small(v) => v.to_be_bytes().to_vec(),
        }
    }
}

fn fingerprint_of(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn random_below(rng: &mut dyn RngCore, bound: &BigUint) -> BigUint {
    let bytes = bound.bits().div_ceil(8) as usize + 8;
    let mut buf = vec![0u8; bytes];
    rng.fill_bytes(&mut buf);
    BigUint::from_bytes_be(&buf) % bound
}

fn random_odd_with_top_bit(rng: &mut dyn RngCore, bits: usize) -> BigUint {
    let mut buf = vec![0u8; bits.div_ceil(8)];
    rng.fill_bytes(&mut buf);
    let mut v = BigUint::from_bytes_be(&buf);
    let excess = buf.len() * 8 - bits;
    v >>= excess;
    v.set_bit(bits as u64 - 1, true);
    v.set_bit(bits as u64 - 2, true);
    v.set_bit(0, true);
    v
}

const SMALL_PRIMES: [u32; 24] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

/// Miller-Rabin with `rounds` random bases.
pub fn is_probable_prime(n: &BigUint, rounds: usize, rng: &mut dyn RngCore) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for p in SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return *n == two;
    }
    let n_minus_one = n - 1u32;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let span = n - 3u32;
    'witness: for _ in 0..rounds {
        let a = random_below(rng, &span) + 2u32;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn generate_prime(bits: usize, rng: &mut dyn RngCore) -> BigUint {
    loop {
        let candidate = random_odd_with_top_bit(rng, bits);
        if is_probable_prime(&candidate, 32, rng) {
            return candidate;
        }
    }
}

/// Generates a keypair. `bits` is the modulus size and must be one of 512,
/// 1024 or 2048 for Paillier; the mock backend ignores it.
pub fn he_keygen(backend: HeBackend, bits: usize, rng: &mut dyn RngCore) -> Result<HeKeypair> {
    match backend {
        HeBackend::Mock => {
            let fingerprint = rng.next_u64();
            Ok(HeKeypair {
                public: HePublicKey {
                    fingerprint,
                    bits: 64,
                    repr: PublicRepr::Mock,
                },
                secret: SecretRepr::Mock,
            })
        }
        HeBackend::Paillier => {
            if ![512, 1024, 2048].contains(&bits) {
                return Err(Error::InvalidParameter(format!(
                    "Paillier key size must be 512, 1024 or 2048 bits, got {bits}"
                )));
            }
            loop {
                let p = generate_prime(bits / 2, rng);
                let q = generate_prime(bits / 2, rng);
                if p == q {
                    continue;
                }
                let n = &p * &q;
                let phi = (&p - 1u32) * (&q - 1u32);
                if !n.gcd(&phi).is_one() {
                    continue;
                }
                let lambda = (&p - 1u32).lcm(&(&q - 1u32));
                let Some(mu) = lambda.modinv(&n) else { continue };
                let n_squared = &n * &n;
                let fingerprint = fingerprint_of(&n.to_bytes_be());
                return Ok(HeKeypair {
                    public: HePublicKey {
                        fingerprint,
                        bits,
                        repr: PublicRepr::Paillier { n, n_squared },
                    },
                    secret: SecretRepr::Paillier { lambda, mu },
                });
            }
        }
    }
}

impl HePublicKey {
    pub fn backend(&self) -> HeBackend {
        match self.repr {
            PublicRepr::Paillier { .. } => HeBackend::Paillier,
            PublicRepr::Mock => HeBackend::Mock,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Bytes of one serialized ciphertext on the wire.
    pub fn ciphertext_bytes(&self) -> usize {
        match &self.repr {
            PublicRepr::Paillier { .. } => 2 * self.bits / 8,
            PublicRepr::Mock => 8,
        }
    }

    pub fn encrypt(&self, m: u64, rng: &mut dyn RngCore) -> HeCiphertext {
        let repr = match &self.repr {
            PublicRepr::Mock => CtRepr::Small(m),
            PublicRepr::Paillier { n, n_squared } => {
                let r = loop {
                    let r = random_below(rng, n);
                    if !r.is_zero() && r.gcd(n).is_one() {
                        break r;
                    }
                };
                // (1 + n)^m = 1 + m n  (mod n^2)
                let gm = (BigUint::one() + (BigUint::from(m) % n) * n) % n_squared;
                CtRepr::Big(gm * r.modpow(n, n_squared) % n_squared)
            }
        };
        HeCiphertext {
            fingerprint: self.fingerprint,
            repr,
        }
    }

    /// Encryption of zero without randomness; the neutral element for sums.
    pub fn zero(&self) -> HeCiphertext {
        HeCiphertext {
            fingerprint: self.fingerprint,
            repr: match self.repr {
                PublicRepr::Mock => CtRepr::Small(0),
                PublicRepr::Paillier { .. } => CtRepr::Big(BigUint::one()),
            },
        }
    }

    fn check(&self, c: &HeCiphertext) -> Result<()> {
        if c.fingerprint != self.fingerprint {
            return Err(Error::Integrity("ciphertext was produced under a different key"));
        }
        Ok(())
    }

    /// `Dec(add(a, b)) = Dec(a) + Dec(b) (mod n)`.
    pub fn add(&self, a: &HeCiphertext, b: &HeCiphertext) -> Result<HeCiphertext> {
        self.check(a)?;
        self.check(b)?;
        let repr = match (&self.repr, &a.repr, &b.repr) {
            (PublicRepr::Mock, CtRepr::Small(x), CtRepr::Small(y)) => CtRepr::Small(x.wrapping_add(*y)),
            (PublicRepr::Paillier { n_squared, .. }, CtRepr::Big(x), CtRepr::Big(y)) => {
                CtRepr::Big(x * y % n_squared)
            }
            _ => return Err(Error::Integrity("ciphertext backend mismatch")),
        };
        Ok(HeCiphertext {
            fingerprint: self.fingerprint,
            repr,
        })
    }

    /// In-place accumulation, `acc <- acc + c`.
    pub fn add_assign(&self, acc: &mut HeCiphertext, c: &HeCiphertext) -> Result<()> {
        self.check(acc)?;
        self.check(c)?;
        match (&self.repr, &mut acc.repr, &c.repr) {
            (PublicRepr::Mock, CtRepr::Small(x), CtRepr::Small(y)) => *x = x.wrapping_add(*y),
            (PublicRepr::Paillier { n_squared, .. }, CtRepr::Big(x), CtRepr::Big(y)) => {
                *x = &*x * y % n_squared;
            }
            _ => return Err(Error::Integrity("ciphertext backend mismatch")),
        }
        Ok(())
    }

    /// `Dec(scalar_mul(c, k)) = k * Dec(c) (mod n)`.
    pub fn scalar_mul(&self, c: &HeCiphertext, k: u64) -> Result<HeCiphertext> {
        self.check(c)?;
        let repr = match (&self.repr, &c.repr) {
            (PublicRepr::Mock, CtRepr::Small(x)) => CtRepr::Small(x.wrapping_mul(k)),
            (PublicRepr::Paillier { n_squared, .. }, CtRepr::Big(x)) => {
                CtRepr::Big(x.modpow(&BigUint::from(k), n_squared))
            }
            _ => return Err(Error::Integrity("ciphertext backend mismatch")),
        };
        Ok(HeCiphertext {
            fingerprint: self.fingerprint,
            repr,
        })
    }
}

impl HeKeypair {
    pub fn decrypt(&self, c: &HeCiphertext) -> Result<BigUint> {
        self.public.check(c)?;
        match (&self.public.repr, &self.secret, &c.repr) {
            (PublicRepr::Mock, SecretRepr::Mock, CtRepr::Small(v)) => Ok(BigUint::from(*v)),
            (PublicRepr::Paillier { n, n_squared }, SecretRepr::Paillier { lambda, mu }, CtRepr::Big(v)) => {
                let u = v.modpow(lambda, n_squared);
                let l = (u - 1u32) / n;
                Ok(l * mu % n)
            }
            _ => Err(Error::Integrity("ciphertext backend mismatch")),
        }
    }

    /// Decrypts a value known to fit in 64 bits.
    pub fn decrypt_u64(&self, c: &HeCiphertext) -> Result<u64> {
        let v = self.decrypt(c)?;
        u64::try_from(&v).map_err(|_| Error::Integrity("decrypted value exceeds 64 bits"))
    }
}

/// Hex SHA-256 over a batch of ciphertexts, used as the opaque blob recorded
/// in transcript dumps.
pub fn batch_digest<'a>(cts: impl IntoIterator<Item = &'a HeCiphertext>) -> String {
    let mut h = Sha256::new();
    for c in cts {
        let bytes = c.to_bytes();
        h.update((bytes.len() as u32).to_be_bytes());
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

/// Uniform `u64` below `bound`, for tests and fixtures.
pub fn random_plaintext(rng: &mut dyn RngCore, bound: u64) -> u64 {
    rng.random_range(0..bound)
}
