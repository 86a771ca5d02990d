//! Paillier cryptosystem with fixed-point weight encoding.
//!
//! Plaintexts live in `Z_n`, ciphertexts in `Z*_{n^2}`. Multiplying
//! ciphertexts adds plaintexts, which is all secure aggregation needs.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PaillierError {
    #[error("prime size {0} bits is below the 16-bit minimum")]
    PrimeTooSmall(u64),
    #[error("key parameters rejected: {0}")]
    InvalidKey(String),
    #[error("ciphertext key id {found} does not match key {expected}")]
    KeyMismatch { expected: String, found: String },
    #[error("plaintext is not below the modulus")]
    PlaintextOutOfRange,
    #[error("ciphertext is not a unit modulo n^2")]
    InvalidCiphertext,
    #[error("cannot aggregate an empty ciphertext list")]
    EmptyAggregate,
    #[error("weight {value} exceeds the clip bound {clip}")]
    WeightOutOfRange { value: f64, clip: f64 },
    #[error("encoding parameters invalid: {0}")]
    InvalidEncoding(String),
    #[error("{clients} clients need plaintext capacity {needed} but the modulus is {modulus_bits} bits")]
    Capacity {
        clients: usize,
        needed: u128,
        modulus_bits: u64,
    },
    #[error("malformed key or ciphertext data: {0}")]
    Format(String),
}

const MILLER_RABIN_ROUNDS: usize = 40;

/// First 16 hex digits of SHA-256 over the big-endian bytes of `n`.
fn key_id_for(n: &BigUint) -> String {
    let digest = Sha256::digest(n.to_bytes_be());
    hex::encode(&digest[..8])
}

fn to_hex(v: &BigUint) -> String {
    v.to_str_radix(16)
}

fn from_hex(s: &str) -> Result<BigUint, PaillierError> {
    if s.is_empty() || s.bytes().any(|b| !matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return Err(PaillierError::Format(format!("`{s}` is not lowercase hex")));
    }
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| PaillierError::Format(format!("bad hex `{s}`")))
}

/// `L(u) = (u - 1) / n`.
fn l_function(u: &BigUint, n: &BigUint) -> BigUint {
    (u - 1u32) / n
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PublicKeyFile", into = "PublicKeyFile")]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    g: BigUint,
    key_id: String,
}

#[derive(Serialize, Deserialize)]
struct PublicKeyFile {
    key_id: String,
    n: String,
    g: String,
}

impl PublicKey {
    fn new(n: BigUint, g: BigUint) -> Self {
        let n_squared = &n * &n;
        let key_id = key_id_for(&n);
        PublicKey { n, n_squared, g, key_id }
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn modulus_bits(&self) -> u64 {
        self.n.bits()
    }

    fn check_key(&self, key_id: &str) -> Result<(), PaillierError> {
        if key_id == self.key_id {
            Ok(())
        } else {
            Err(PaillierError::KeyMismatch { expected: self.key_id.clone(), found: key_id.to_string() })
        }
    }

    /// `g^m mod n^2`, using `1 + m n` when `g = n + 1`.
    fn g_pow(&self, m: &BigUint) -> BigUint {
        if self.g == &self.n + 1u32 {
            (BigUint::one() + m * &self.n) % &self.n_squared
        } else {
            self.g.modpow(m, &self.n_squared)
        }
    }
}

impl TryFrom<PublicKeyFile> for PublicKey {
    type Error = PaillierError;
    fn try_from(f: PublicKeyFile) -> Result<Self, Self::Error> {
        let pk = PublicKey::new(from_hex(&f.n)?, from_hex(&f.g)?);
        pk.check_key(&f.key_id)?;
        if pk.n.is_even() || pk.g.is_zero() || pk.g >= pk.n_squared {
            return Err(PaillierError::Format("public key parameters out of range".into()));
        }
        Ok(pk)
    }
}

impl From<PublicKey> for PublicKeyFile {
    fn from(pk: PublicKey) -> Self {
        PublicKeyFile { key_id: pk.key_id.clone(), n: to_hex(&pk.n), g: to_hex(&pk.g) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PrivateKeyFile", into = "PrivateKeyFile")]
pub struct PrivateKey {
    lambda: BigUint,
    mu: BigUint,
    key_id: String,
}

#[derive(Serialize, Deserialize)]
struct PrivateKeyFile {
    key_id: String,
    lambda: String,
    mu: String,
}

impl PrivateKey {
    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }
}

impl TryFrom<PrivateKeyFile> for PrivateKey {
    type Error = PaillierError;
    fn try_from(f: PrivateKeyFile) -> Result<Self, Self::Error> {
        Ok(PrivateKey { lambda: from_hex(&f.lambda)?, mu: from_hex(&f.mu)?, key_id: f.key_id })
    }
}

impl From<PrivateKey> for PrivateKeyFile {
    fn from(sk: PrivateKey) -> Self {
        PrivateKeyFile { key_id: sk.key_id, lambda: to_hex(&sk.lambda), mu: to_hex(&sk.mu) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CiphertextFile", into = "CiphertextFile")]
pub struct Ciphertext {
    value: BigUint,
    key_id: String,
}

#[derive(Serialize, Deserialize)]
struct CiphertextFile {
    key_id: String,
    value: String,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    /// Lowercase hex of the ciphertext value.
    pub fn to_hex(&self) -> String {
        to_hex(&self.value)
    }

    pub fn from_hex(value: &str, key_id: &str) -> Result<Self, PaillierError> {
        Ok(Ciphertext { value: from_hex(value)?, key_id: key_id.to_string() })
    }
}

impl TryFrom<CiphertextFile> for Ciphertext {
    type Error = PaillierError;
    fn try_from(f: CiphertextFile) -> Result<Self, Self::Error> {
        Ciphertext::from_hex(&f.value, &f.key_id)
    }
}

impl From<Ciphertext> for CiphertextFile {
    fn from(c: Ciphertext) -> Self {
        CiphertextFile { value: to_hex(&c.value), key_id: c.key_id }
    }
}

/// Builds a keypair from known primes and generator. `g = None` selects `n + 1`.
pub fn keypair_from_primes(
    p: &BigUint,
    q: &BigUint,
    g: Option<BigUint>,
) -> Result<(PublicKey, PrivateKey), PaillierError> {
    if p == q || p < &BigUint::from(3u32) || q < &BigUint::from(3u32) {
        return Err(PaillierError::InvalidKey("p and q must be distinct odd primes".into()));
    }
    let n = p * q;
    let p1 = p - 1u32;
    let q1 = q - 1u32;
    if !n.gcd(&(&p1 * &q1)).is_one() {
        return Err(PaillierError::InvalidKey("gcd(pq, (p-1)(q-1)) != 1".into()));
    }
    let lambda = p1.lcm(&q1);
    let g = g.unwrap_or_else(|| &n + 1u32);
    let pk = PublicKey::new(n, g);
    if pk.g.is_zero() || pk.g >= pk.n_squared || !pk.g.gcd(&pk.n_squared).is_one() {
        return Err(PaillierError::InvalidKey("g is not a unit modulo n^2".into()));
    }
    let u = l_function(&pk.g.modpow(&lambda, &pk.n_squared), &pk.n);
    let mu = u
        .modinv(&pk.n)
        .ok_or_else(|| PaillierError::InvalidKey("gcd(L(g^lambda mod n^2), n) != 1".into()))?;
    let sk = PrivateKey { lambda, mu, key_id: pk.key_id.clone() };
    Ok((pk, sk))
}

fn small_primes() -> &'static [u32] {
    &[3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97]
}

/// Miller-Rabin with random bases.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rounds: usize, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    if n == &two {
        return true;
    }
    if n.is_even() {
        return false;
    }
    for &sp in small_primes() {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let n1 = n - 1u32;
    let s = n1.trailing_zeros().expect("n - 1 is nonzero");
    let d = &n1 >> s;
    'witness: for _ in 0..rounds {
        let a = rng.gen_biguint_range(&two, &n1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn random_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut candidate = rng.gen_biguint(bits);
        // Top two bits set so the product of two primes has exactly 2 * bits bits.
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, MILLER_RABIN_ROUNDS, rng) {
            return candidate;
        }
    }
}

/// Generates a keypair with two random `prime_bits`-bit primes and `g = n + 1`.
pub fn key_generation<R: RngCore + CryptoRng>(
    prime_bits: u64,
    rng: &mut R,
) -> Result<(PublicKey, PrivateKey), PaillierError> {
    if prime_bits < 16 {
        return Err(PaillierError::PrimeTooSmall(prime_bits));
    }
    loop {
        let p = random_prime(prime_bits, rng);
        let q = random_prime(prime_bits, rng);
        match keypair_from_primes(&p, &q, None) {
            Ok(keys) => return Ok(keys),
            Err(PaillierError::InvalidKey(reason)) => log::debug!("regenerating primes: {reason}"),
            Err(e) => return Err(e),
        }
    }
}

/// `c = g^m r^n mod n^2` with fresh random `r` in `Z*_n`.
pub fn encrypt<R: RngCore + CryptoRng>(m: &BigUint, pk: &PublicKey, rng: &mut R) -> Result<Ciphertext, PaillierError> {
    if m >= &pk.n {
        return Err(PaillierError::PlaintextOutOfRange);
    }
    let r = loop {
        let r = rng.gen_biguint_range(&BigUint::one(), &pk.n);
        if r.gcd(&pk.n).is_one() {
            break r;
        }
    };
    let value = (pk.g_pow(m) * r.modpow(&pk.n, &pk.n_squared)) % &pk.n_squared;
    Ok(Ciphertext { value, key_id: pk.key_id.clone() })
}

/// Product of the ciphertexts modulo `n^2`; decrypts to the plaintext sum mod `n`.
pub fn aggregate(ciphertexts: &[Ciphertext], pk: &PublicKey) -> Result<Ciphertext, PaillierError> {
    if ciphertexts.is_empty() {
        return Err(PaillierError::EmptyAggregate);
    }
    let mut acc = BigUint::one();
    for c in ciphertexts {
        pk.check_key(&c.key_id)?;
        acc = (acc * &c.value) % &pk.n_squared;
    }
    Ok(Ciphertext { value: acc, key_id: pk.key_id.clone() })
}

/// `m = L(c^lambda mod n^2) mu mod n`.
pub fn decrypt(c: &Ciphertext, sk: &PrivateKey, pk: &PublicKey) -> Result<BigUint, PaillierError> {
    pk.check_key(&sk.key_id)?;
    pk.check_key(&c.key_id)?;
    if c.value.is_zero() || c.value >= pk.n_squared || !c.value.gcd(&pk.n).is_one() {
        return Err(PaillierError::InvalidCiphertext);
    }
    let u = c.value.modpow(&sk.lambda, &pk.n_squared);
    Ok((l_function(&u, &pk.n) * &sk.mu) % &pk.n)
}

/// Fixed-point encoding `floor(scale * (w + shift))` for `|w| <= clip`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingParams {
    pub scale: u64,
    pub shift: f64,
    pub clip: f64,
}

impl Default for EncodingParams {
    fn default() -> Self {
        EncodingParams { scale: 100_000_000, shift: 16.0, clip: 8.0 }
    }
}

impl EncodingParams {
    pub fn validate(&self) -> Result<(), PaillierError> {
        if self.scale == 0 {
            return Err(PaillierError::InvalidEncoding("scale must be positive".into()));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(PaillierError::InvalidEncoding("clip bound must be positive".into()));
        }
        if !(self.shift > self.clip && self.shift.is_finite()) {
            return Err(PaillierError::InvalidEncoding("shift must exceed the clip bound".into()));
        }
        Ok(())
    }

    /// Largest encoded value, `scale * (clip + shift)`.
    pub fn max_encoded(&self) -> u128 {
        (self.scale as f64 * (self.clip + self.shift)).ceil() as u128
    }

    /// Fails unless `clients * scale * (clip + shift) < n`.
    pub fn check_capacity(&self, clients: usize, pk: &PublicKey) -> Result<(), PaillierError> {
        self.validate()?;
        let needed = self.max_encoded().saturating_mul(clients as u128);
        if BigUint::from(needed) < pk.n {
            Ok(())
        } else {
            Err(PaillierError::Capacity { clients, needed, modulus_bits: pk.modulus_bits() })
        }
    }

    pub fn clip_weight(&self, w: f64) -> f64 {
        w.clamp(-self.clip, self.clip)
    }

    pub fn encode(&self, w: f64) -> Result<BigUint, PaillierError> {
        if !(w.abs() <= self.clip) {
            return Err(PaillierError::WeightOutOfRange { value: w, clip: self.clip });
        }
        let v = (self.scale as f64 * (w + self.shift)).floor();
        Ok(BigUint::from(v as u64))
    }

    /// Decodes a decrypted sum over `clients` encodings as their average:
    /// `m / K` is split into an exact quotient and remainder before scaling.
    pub fn decode_average(&self, sum: &BigUint, clients: usize) -> Result<f64, PaillierError> {
        if clients == 0 {
            return Err(PaillierError::InvalidEncoding("client count must be positive".into()));
        }
        let (quot, rem) = sum.div_rem(&BigUint::from(clients));
        let quot = u128::try_from(&quot)
            .map_err(|_| PaillierError::InvalidEncoding("decrypted sum exceeds the encoding range".into()))?;
        let rem = u64::try_from(&rem).expect("remainder is below the client count");
        let offset = self.shift * self.scale as f64;
        Ok((quot as f64 - offset + rem as f64 / clients as f64) / self.scale as f64)
    }

    pub fn decode(&self, m: &BigUint) -> Result<f64, PaillierError> {
        self.decode_average(m, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    fn test_keys(seed: u64) -> (PublicKey, PrivateKey) {
        key_generation(64, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn hand_oracle_keypair() {
        let (pk, sk) = keypair_from_primes(&big(5), &big(7), Some(big(36))).unwrap();
        assert_eq!(pk.n(), &big(35));
        assert_eq!(pk.n_squared(), &big(1225));
        assert_eq!(sk.lambda(), &big(12));
        // 36^12 mod 1225 = 421, L(421) = 12, 12 * 3 = 36 = 1 mod 35.
        assert_eq!(big(36).modpow(&big(12), &big(1225)), big(421));
        assert_eq!(sk.mu(), &big(3));
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for m in 0..35u64 {
            let c = encrypt(&big(m), &pk, &mut rng).unwrap();
            assert_eq!(decrypt(&c, &sk, &pk).unwrap(), big(m));
        }
    }

    #[test]
    fn default_generator_matches_modpow() {
        let (pk, _) = keypair_from_primes(&big(5), &big(7), None).unwrap();
        for m in 0..35u64 {
            assert_eq!(pk.g_pow(&big(m)), big(36).modpow(&big(m), &big(1225)));
        }
    }

    #[test]
    fn bad_generator_is_rejected() {
        // g = 1: L(1) = 0 has no inverse.
        assert!(keypair_from_primes(&big(5), &big(7), Some(big(1))).is_err());
        assert!(keypair_from_primes(&big(5), &big(5), None).is_err());
    }

    #[test]
    fn miller_rabin_against_sieve() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let limit = 5000usize;
        let mut sieve = vec![true; limit];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..limit {
            if sieve[i] {
                for j in (i * i..limit).step_by(i) {
                    sieve[j] = false;
                }
            }
        }
        for (v, &prime) in sieve.iter().enumerate() {
            assert_eq!(is_probable_prime(&big(v as u64), 20, &mut rng), prime, "{v}");
        }
        // Carmichael numbers and a known 61-bit Mersenne prime.
        for c in [561u64, 1105, 1729, 2465, 2821, 6601, 8911] {
            assert!(!is_probable_prime(&big(c), 20, &mut rng));
        }
        assert!(is_probable_prime(&big((1 << 61) - 1), 20, &mut rng));
    }

    #[test]
    fn generated_keys_satisfy_definitions() {
        let (pk, sk) = test_keys(10);
        assert_eq!(pk.modulus_bits(), 128);
        let u = l_function(&pk.g().modpow(sk.lambda(), pk.n_squared()), pk.n());
        assert!(((u * sk.mu()) % pk.n()).is_one());
        assert_ne!(pk.n(), test_keys(11).0.n());
        assert!(matches!(key_generation(8, &mut ChaCha20Rng::seed_from_u64(1)), Err(PaillierError::PrimeTooSmall(8))));
    }

    #[test]
    fn round_trips_and_boundaries() {
        let (pk, sk) = test_keys(20);
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let m = rng.gen_biguint_below(pk.n());
            assert_eq!(decrypt(&encrypt(&m, &pk, &mut rng).unwrap(), &sk, &pk).unwrap(), m);
        }
        let zero = encrypt(&BigUint::zero(), &pk, &mut rng).unwrap();
        assert!(decrypt(&zero, &sk, &pk).unwrap().is_zero());
        let top = pk.n() - 1u32;
        assert_eq!(decrypt(&encrypt(&top, &pk, &mut rng).unwrap(), &sk, &pk).unwrap(), top);
        assert_eq!(encrypt(pk.n(), &pk, &mut rng), Err(PaillierError::PlaintextOutOfRange));
    }

    #[test]
    fn encryption_is_probabilistic() {
        let (pk, sk) = test_keys(30);
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let m = big(424242);
        let cs: std::collections::HashSet<BigUint> =
            (0..100).map(|_| encrypt(&m, &pk, &mut rng).unwrap().value).collect();
        assert_eq!(cs.len(), 100);
        for v in cs {
            let c = Ciphertext { value: v, key_id: pk.key_id().into() };
            assert_eq!(decrypt(&c, &sk, &pk).unwrap(), m);
        }
    }

    #[test]
    fn aggregation_adds_plaintexts() {
        let (pk, sk) = test_keys(40);
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let e = |m: u64, rng: &mut ChaCha20Rng| encrypt(&big(m), &pk, rng).unwrap();
        let three_four = [e(3, &mut rng), e(4, &mut rng)];
        assert_eq!(decrypt(&aggregate(&three_four, &pk).unwrap(), &sk, &pk).unwrap(), big(7));
        let single = e(99, &mut rng);
        assert_eq!(decrypt(&aggregate(&[single], &pk).unwrap(), &sk, &pk).unwrap(), big(99));
        let bound = pk.n() / 50u32;
        let ms: Vec<BigUint> = (0..50).map(|_| rng.gen_biguint_below(&bound)).collect();
        let cs: Vec<Ciphertext> = ms.iter().map(|m| encrypt(m, &pk, &mut rng).unwrap()).collect();
        let sum: BigUint = ms.iter().sum();
        assert_eq!(decrypt(&aggregate(&cs, &pk).unwrap(), &sk, &pk).unwrap(), sum);
        assert_eq!(aggregate(&[], &pk), Err(PaillierError::EmptyAggregate));
    }

    #[test]
    fn key_mismatch_is_detected() {
        let (pk1, sk1) = test_keys(50);
        let (pk2, sk2) = test_keys(51);
        let mut rng = ChaCha20Rng::seed_from_u64(52);
        let c1 = encrypt(&big(5), &pk1, &mut rng).unwrap();
        let c2 = encrypt(&big(5), &pk2, &mut rng).unwrap();
        assert!(matches!(aggregate(&[c1.clone(), c2], &pk1), Err(PaillierError::KeyMismatch { .. })));
        assert!(matches!(decrypt(&c1, &sk2, &pk2), Err(PaillierError::KeyMismatch { .. })));
        assert!(matches!(decrypt(&c1, &sk2, &pk1), Err(PaillierError::KeyMismatch { .. })));
        assert!(decrypt(&c1, &sk1, &pk1).is_ok());
    }

    #[test]
    fn non_unit_ciphertext_is_rejected() {
        let (pk, sk) = keypair_from_primes(&big(5), &big(7), None).unwrap();
        let c = Ciphertext { value: big(5), key_id: pk.key_id().into() };
        assert_eq!(decrypt(&c, &sk, &pk), Err(PaillierError::InvalidCiphertext));
        let c = Ciphertext { value: big(1225), key_id: pk.key_id().into() };
        assert_eq!(decrypt(&c, &sk, &pk), Err(PaillierError::InvalidCiphertext));
    }

    #[test]
    fn key_files_round_trip_bit_exact() {
        let (pk, sk) = test_keys(60);
        let pk_json = serde_json::to_string(&pk).unwrap();
        let sk_json = serde_json::to_string(&sk).unwrap();
        let pk2: PublicKey = serde_json::from_str(&pk_json).unwrap();
        let sk2: PrivateKey = serde_json::from_str(&sk_json).unwrap();
        assert_eq!(pk2, pk);
        assert_eq!(sk2, sk);
        assert_eq!(serde_json::to_string(&pk2).unwrap(), pk_json);
        assert_eq!(serde_json::to_string(&sk2).unwrap(), sk_json);
        assert!(pk_json.contains(&format!("\"n\":\"{}\"", pk.n().to_str_radix(16))));
        // A key id that does not match n is refused.
        let tampered = pk_json.replace(pk.key_id(), "0000000000000000");
        assert!(serde_json::from_str::<PublicKey>(&tampered).is_err());
        let upper = pk_json.replace(&pk.n().to_str_radix(16), &pk.n().to_str_radix(16).to_uppercase());
        assert!(serde_json::from_str::<PublicKey>(&upper).is_err());
    }

    #[test]
    fn ciphertext_wire_form() {
        let (pk, sk) = test_keys(70);
        let c = encrypt(&big(12345), &pk, &mut ChaCha20Rng::seed_from_u64(71)).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back: Ciphertext = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
        let from_hex = Ciphertext::from_hex(&c.to_hex(), c.key_id()).unwrap();
        assert_eq!(decrypt(&from_hex, &sk, &pk).unwrap(), big(12345));
    }

    #[test]
    fn encoding_examples() {
        let params = EncodingParams { scale: 100_000_000, shift: 1.0, clip: 0.9 };
        assert_eq!(params.encode(-0.5).unwrap(), big(50_000_000));
        let d = EncodingParams::default();
        for w in [-8.0, -0.123456789, 0.0, 1e-9, 3.3, 8.0] {
            let back = d.decode(&d.encode(w).unwrap()).unwrap();
            assert!(back <= w + 1e-12 && w - back <= 1e-8 + 1e-12, "{w} -> {back}");
        }
        assert!(matches!(d.encode(8.5), Err(PaillierError::WeightOutOfRange { .. })));
        assert!(d.encode(f64::NAN).is_err());
        let sum: BigUint = [0.1, 0.2, 0.3].iter().map(|&w| d.encode(w).unwrap()).sum();
        assert!((d.decode_average(&sum, 3).unwrap() - 0.2).abs() <= 1e-8);
        assert_eq!(d.clip_weight(-9.0), -8.0);
    }

    #[test]
    fn encoding_validation_and_capacity() {
        assert!(EncodingParams { shift: 8.0, ..Default::default() }.validate().is_err());
        assert!(EncodingParams { scale: 0, ..Default::default() }.validate().is_err());
        let d = EncodingParams::default();
        let (pk, _) = test_keys(80);
        assert!(d.check_capacity(4, &pk).is_ok());
        let (tiny, _) = keypair_from_primes(&big(65521), &big(65519), None).unwrap();
        assert!(matches!(d.check_capacity(4, &tiny), Err(PaillierError::Capacity { clients: 4, .. })));
    }

    #[test]
    fn secure_average_matches_plain_average() {
        let (pk, sk) = test_keys(90);
        let d = EncodingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(91);
        for _ in 0..200 {
            let ws: Vec<f64> = (0..4).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let cs: Vec<Ciphertext> = ws.iter().map(|&w| encrypt(&d.encode(w).unwrap(), &pk, &mut rng).unwrap()).collect();
            let avg = d.decode_average(&decrypt(&aggregate(&cs, &pk).unwrap(), &sk, &pk).unwrap(), 4).unwrap();
            let plain = ws.iter().sum::<f64>() / 4.0;
            assert!((avg - plain).abs() <= 1e-8 + 1e-12, "{avg} vs {plain}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]
        #[test]
        fn homomorphic_sum(a in proptest::prelude::any::<u64>(), b in proptest::prelude::any::<u64>(), seed in 0u64..4) {
            let (pk, sk) = KEYS.get_or_init(|| (0..4).map(|s| test_keys(100 + s)).collect())[seed as usize].clone();
            let mut rng = ChaCha20Rng::seed_from_u64(a ^ b);
            let (a, b) = (big(a), big(b));
            let sum = aggregate(&[encrypt(&a, &pk, &mut rng).unwrap(), encrypt(&b, &pk, &mut rng).unwrap()], &pk).unwrap();
            proptest::prop_assert_eq!(decrypt(&sum, &sk, &pk).unwrap(), a + b);
        }
    }

    static KEYS: std::sync::OnceLock<Vec<(PublicKey, PrivateKey)>> = std::sync::OnceLock::new();
}
