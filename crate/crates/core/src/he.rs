//! Paillier additively homomorphic encryption.
//!
//! Uses the g = n + 1 simplification, so g^m mod n² = 1 + m·n and
//! L(g^λ mod n²) = λ mod n. Multiplying ciphertexts adds plaintexts, and
//! raising a ciphertext to k multiplies its plaintext by k; that is enough for
//! encrypted feeder totals and time-of-use bills.
//!
//! Big-integer arithmetic here is not constant time.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Smallest modulus size accepted by [`keygen`].
pub const MIN_KEY_BITS: u64 = 64;
/// Modulus size for operational keys.
pub const DEFAULT_KEY_BITS: u64 = 2048;

const MILLER_RABIN_ROUNDS: usize = 40;
const KEYGEN_ATTEMPTS: usize = 64;

const SMALL_PRIMES: [u32; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HeError {
    #[error("key size {0} is below the {MIN_KEY_BITS}-bit minimum")]
    KeyTooSmall(u64),
    #[error("prime generation failed after bounded retries")]
    PrimeGenerationFailure,
    #[error("invalid primes: {0}")]
    InvalidPrimes(String),
    #[error("plaintext is not in [0, n)")]
    PlaintextOutOfRange,
    #[error("randomizer must be in [1, n) and coprime to n")]
    BadRandomizer,
    #[error("ciphertext belongs to key {found}, expected {expected}")]
    WrongKey { expected: String, found: String },
    #[error("ciphertexts belong to different keys")]
    KeyMismatch,
    #[error("usage and rate vectors differ in length ({usage} vs {rates})")]
    LengthMismatch { usage: usize, rates: usize },
    #[error("worst-case bill does not fit below the modulus")]
    BillOverflow,
    #[error("value is not a valid ciphertext for this key")]
    InvalidCiphertext,
    #[error("key file: {0}")]
    KeyFormat(String),
}

fn key_id_for(n: &BigUint) -> String {
    let digest = Sha256::digest(n.to_bytes_be());
    hex::encode(&digest[..8])
}

fn is_probable_prime_with_bases(n: &BigUint, bases: impl Iterator<Item = BigUint>) -> bool {
    let one = BigUint::one();
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for a in bases {
        let a = a % n;
        if a < two {
            continue;
        }
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Miller-Rabin with random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    if *n <= BigUint::from(4u32) {
        return *n == BigUint::from(2u32) || *n == BigUint::from(3u32);
    }
    let upper = n - 2u32;
    let two = BigUint::from(2u32);
    let bases: Vec<BigUint> =
        (0..MILLER_RABIN_ROUNDS).map(|_| rng.gen_biguint_range(&two, &upper)).collect();
    is_probable_prime_with_bases(n, bases.into_iter())
}

/// Miller-Rabin with the fixed small-prime bases; exact below 3.3·10^24.
fn is_prime_deterministic(n: &BigUint) -> bool {
    is_probable_prime_with_bases(n, SMALL_PRIMES.iter().map(|&p| BigUint::from(p)))
}

fn generate_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<BigUint, HeError> {
    let attempts = 200 * bits as usize;
    for _ in 0..attempts {
        let mut candidate = rng.gen_biguint(bits);
        // Top two bits set so the product of two such primes has 2·bits bits.
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return Ok(candidate);
        }
    }
    Err(HeError::PrimeGenerationFailure)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    n_squared: BigUint,
    key_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    value: BigUint,
    key_id: String,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn to_hex(&self) -> String {
        self.value.to_str_radix(16)
    }
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self, HeError> {
        if n < BigUint::from(6u32) {
            return Err(HeError::KeyFormat("modulus too small".into()));
        }
        let n_squared = &n * &n;
        let key_id = key_id_for(&n);
        Ok(PublicKey { n, n_squared, key_id })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn g(&self) -> BigUint {
        &self.n + 1u32
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    fn wrap(&self, value: BigUint) -> Ciphertext {
        Ciphertext { value, key_id: self.key_id.clone() }
    }

    fn check(&self, c: &Ciphertext) -> Result<(), HeError> {
        if c.key_id != self.key_id {
            return Err(HeError::KeyMismatch);
        }
        Ok(())
    }

    /// Adopts an externally supplied value (e.g. parsed hex) as a ciphertext.
    pub fn ciphertext_from(&self, value: BigUint) -> Result<Ciphertext, HeError> {
        if value.is_zero() || value >= self.n_squared || !value.gcd(&self.n_squared).is_one() {
            return Err(HeError::InvalidCiphertext);
        }
        Ok(self.wrap(value))
    }

    pub fn ciphertext_from_hex(&self, hex: &str) -> Result<Ciphertext, HeError> {
        let value = BigUint::parse_bytes(hex.trim().as_bytes(), 16).ok_or(HeError::InvalidCiphertext)?;
        self.ciphertext_from(value)
    }

    /// c = g^m · r^n mod n².
    pub fn encrypt(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext, HeError> {
        if *m >= self.n {
            return Err(HeError::PlaintextOutOfRange);
        }
        if r.is_zero() || *r >= self.n || !r.gcd(&self.n).is_one() {
            return Err(HeError::BadRandomizer);
        }
        let g_m = (BigUint::one() + m * &self.n) % &self.n_squared;
        let r_n = r.modpow(&self.n, &self.n_squared);
        Ok(self.wrap(g_m * r_n % &self.n_squared))
    }

    /// Encrypts with a fresh randomizer drawn uniformly from [1, n) ∩ Z*_n.
    pub fn encrypt_random<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext, HeError> {
        let one = BigUint::one();
        loop {
            let r = rng.gen_biguint_range(&one, &self.n);
            if r.gcd(&self.n).is_one() {
                return self.encrypt(m, &r);
            }
        }
    }

    pub fn encrypt_u64<R: RngCore + ?Sized>(&self, m: u64, rng: &mut R) -> Result<Ciphertext, HeError> {
        self.encrypt_random(&BigUint::from(m), rng)
    }

    /// Canonical encryption of zero (r = 1), the identity for [`PublicKey::add`].
    pub fn zero(&self) -> Ciphertext {
        self.wrap(BigUint::one())
    }

    /// E(m1)·E(m2) mod n² = E(m1 + m2 mod n).
    pub fn add(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext, HeError> {
        self.check(c1)?;
        self.check(c2)?;
        Ok(self.wrap(&c1.value * &c2.value % &self.n_squared))
    }

    /// E(m)^k mod n² = E(k·m mod n).
    pub fn scalar_mul(&self, c: &Ciphertext, k: &BigUint) -> Result<Ciphertext, HeError> {
        self.check(c)?;
        Ok(self.wrap(c.value.modpow(k, &self.n_squared)))
    }

    /// Fresh-looking ciphertext of the same plaintext.
    pub fn rerandomize<R: RngCore + ?Sized>(&self, c: &Ciphertext, rng: &mut R) -> Result<Ciphertext, HeError> {
        let zero = self.encrypt_random(&BigUint::zero(), rng)?;
        self.add(c, &zero)
    }

    /// Product of all ciphertexts; the plaintext total must stay below n.
    pub fn aggregate(&self, cts: &[Ciphertext]) -> Result<Ciphertext, HeError> {
        cts.iter().try_fold(self.zero(), |acc, c| self.add(&acc, c))
    }

    /// Σ rate_h · usage_h under encryption. Only the folded total comes back.
    pub fn encrypted_bill(&self, usage: &[Ciphertext], rates: &RateSchedule) -> Result<Ciphertext, HeError> {
        if usage.len() != rates.rates.len() {
            return Err(HeError::LengthMismatch { usage: usage.len(), rates: rates.rates.len() });
        }
        let worst: BigUint = rates.rates.iter().map(|&r| BigUint::from(r) * rates.max_usage).sum();
        if worst >= self.n {
            return Err(HeError::BillOverflow);
        }
        let terms = usage
            .iter()
            .zip(&rates.rates)
            .map(|(c, &rate)| self.scalar_mul(c, &BigUint::from(rate)))
            .collect::<Result<Vec<_>, _>>()?;
        self.aggregate(&terms)
    }
}

/// Per-interval integer rates plus the largest per-interval usage they are
/// applied to; together these bound the bill below the modulus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateSchedule {
    rates: Vec<u64>,
    max_usage: u64,
}

impl RateSchedule {
    pub fn new(rates: Vec<u64>, max_usage: u64) -> Self {
        RateSchedule { rates, max_usage }
    }

    pub fn rates(&self) -> &[u64] {
        &self.rates
    }

    pub fn max_usage(&self) -> u64 {
        self.max_usage
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PaillierKeypair {
    public: PublicKey,
    lambda: BigUint,
    mu: BigUint,
}

impl std::fmt::Debug for PaillierKeypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PaillierKeypair")
            .field("public", &self.public)
            .field("lambda", &"<redacted>")
            .field("mu", &"<redacted>")
            .finish()
    }
}

fn l_function(u: &BigUint, n: &BigUint) -> BigUint {
    (u - 1u32) / n
}

impl PaillierKeypair {
    /// Builds a keypair from two known primes. Used for fixed test vectors and
    /// for importing existing keys; fresh keys come from [`keygen`].
    pub fn from_primes(p: &BigUint, q: &BigUint) -> Result<Self, HeError> {
        if p == q {
            return Err(HeError::InvalidPrimes("p and q must differ".into()));
        }
        if !is_prime_deterministic(p) || !is_prime_deterministic(q) {
            return Err(HeError::InvalidPrimes("p and q must be prime".into()));
        }
        let n = p * q;
        let p1 = p - 1u32;
        let q1 = q - 1u32;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            return Err(HeError::InvalidPrimes("gcd(n, (p-1)(q-1)) != 1".into()));
        }
        let lambda = p1.lcm(&q1);
        PaillierKeypair::from_lambda(PublicKey::from_modulus(n)?, lambda)
    }

    fn from_lambda(public: PublicKey, lambda: BigUint) -> Result<Self, HeError> {
        let g_lambda = public.g().modpow(&lambda, &public.n_squared);
        let mu = l_function(&g_lambda, &public.n)
            .modinv(&public.n)
            .ok_or_else(|| HeError::InvalidPrimes("L(g^lambda) is not invertible mod n".into()))?;
        Ok(PaillierKeypair { public, lambda, mu })
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    /// m = L(c^λ mod n²)·μ mod n.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint, HeError> {
        if c.key_id != self.public.key_id {
            return Err(HeError::WrongKey { expected: self.public.key_id.clone(), found: c.key_id.clone() });
        }
        let pk = &self.public;
        let u = c.value.modpow(&self.lambda, &pk.n_squared);
        Ok(l_function(&u, &pk.n) * &self.mu % &pk.n)
    }

    pub fn to_secret_file(&self) -> SecretKeyFile {
        SecretKeyFile {
            n: self.public.n.to_str_radix(10),
            lambda: self.lambda.to_str_radix(10),
            mu: self.mu.to_str_radix(10),
        }
    }

    /// Restores a keypair, rejecting files whose μ does not match λ.
    pub fn from_secret_file(file: &SecretKeyFile) -> Result<Self, HeError> {
        let public = PublicKey::from_modulus(parse_decimal(&file.n)?)?;
        let kp = PaillierKeypair::from_lambda(public, parse_decimal(&file.lambda)?)?;
        if kp.mu != parse_decimal(&file.mu)? {
            return Err(HeError::KeyFormat("mu does not match lambda".into()));
        }
        Ok(kp)
    }
}

/// Generates a keypair with an n of exactly `bits` bits.
pub fn keygen<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> Result<PaillierKeypair, HeError> {
    if bits < MIN_KEY_BITS {
        return Err(HeError::KeyTooSmall(bits));
    }
    let p_bits = bits / 2;
    let q_bits = bits - p_bits;
    for _ in 0..KEYGEN_ATTEMPTS {
        let p = generate_prime(p_bits, rng)?;
        let q = generate_prime(q_bits, rng)?;
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        let lambda = (&p - 1u32).lcm(&(&q - 1u32));
        return PaillierKeypair::from_lambda(PublicKey::from_modulus(n)?, lambda);
    }
    Err(HeError::PrimeGenerationFailure)
}

fn parse_decimal(s: &str) -> Result<BigUint, HeError> {
    BigUint::parse_bytes(s.trim().as_bytes(), 10)
        .ok_or_else(|| HeError::KeyFormat(format!("not a decimal integer: {s:?}")))
}

/// Public key file: `{"n": "<decimal>"}`. g is always n + 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicKeyFile {
    pub n: String,
}

impl PublicKeyFile {
    pub fn from_key(pk: &PublicKey) -> Self {
        PublicKeyFile { n: pk.n.to_str_radix(10) }
    }

    pub fn to_key(&self) -> Result<PublicKey, HeError> {
        PublicKey::from_modulus(parse_decimal(&self.n)?)
    }
}

/// Secret key file with decimal `n`, `lambda` and `mu`.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretKeyFile {
    pub n: String,
    pub lambda: String,
    pub mu: String,
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;

    fn big(v: u64) -> BigUint {
        BigUint::from(v)
    }

    fn toy() -> PaillierKeypair {
        PaillierKeypair::from_primes(&big(11), &big(13)).unwrap()
    }

    #[test]
    fn toy_key_parameters() {
        let kp = toy();
        assert_eq!(*kp.public().n(), big(143));
        assert_eq!(kp.public().g(), big(144));
        assert_eq!(*kp.lambda(), big(60));
        // mu = lambda^{-1} mod n for g = n + 1: 60 * 31 = 1860 = 13*143 + 1.
        assert_eq!(*kp.mu(), big(31));
    }

    #[test]
    fn toy_round_trip_is_exhaustive() {
        let kp = toy();
        let pk = kp.public();
        for m in 0..143u64 {
            for r in (1..143u64).filter(|r| r % 11 != 0 && r % 13 != 0) {
                let c = pk.encrypt(&big(m), &big(r)).unwrap();
                assert_eq!(kp.decrypt(&c).unwrap(), big(m), "m={m} r={r}");
            }
        }
    }

    #[test]
    fn encrypt_rejects_bad_inputs() {
        let pk = toy().public().clone();
        assert_eq!(pk.encrypt(&big(143), &big(2)), Err(HeError::PlaintextOutOfRange));
        assert_eq!(pk.encrypt(&big(1), &big(0)), Err(HeError::BadRandomizer));
        assert_eq!(pk.encrypt(&big(1), &big(11)), Err(HeError::BadRandomizer));
        assert_eq!(pk.encrypt(&big(1), &big(143)), Err(HeError::BadRandomizer));
    }

    #[test]
    fn zero_and_randomizers() {
        let kp = toy();
        let pk = kp.public();
        let c = pk.encrypt(&big(0), &big(2)).unwrap();
        assert_eq!(*c.value(), big(2).modpow(&big(143), pk.n_squared()));
        assert_eq!(kp.decrypt(&c).unwrap(), big(0));
        assert_eq!(kp.decrypt(&pk.encrypt(&big(0), &big(1)).unwrap()).unwrap(), big(0));
        assert_eq!(*pk.encrypt(&big(0), &big(1)).unwrap().value(), BigUint::one());

        let a = pk.encrypt(&big(42), &big(2)).unwrap();
        let b = pk.encrypt(&big(42), &big(3)).unwrap();
        assert_ne!(a, b);
        assert_eq!(kp.decrypt(&a).unwrap(), big(42));
        assert_eq!(kp.decrypt(&b).unwrap(), big(42));
    }

    #[test]
    fn homomorphic_examples() {
        let kp = toy();
        let pk = kp.public();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let e = |m: u64, rng: &mut ChaCha20Rng| pk.encrypt_u64(m, rng).unwrap();
        let (c2, c3) = (e(2, &mut rng), e(3, &mut rng));
        assert_eq!(kp.decrypt(&pk.add(&c2, &c3).unwrap()).unwrap(), big(5));
        assert_eq!(kp.decrypt(&pk.add(&c2, &e(0, &mut rng)).unwrap()).unwrap(), big(2));
        let wrap = pk.add(&e(100, &mut rng), &e(50, &mut rng)).unwrap();
        assert_eq!(kp.decrypt(&wrap).unwrap(), big(7));

        assert_eq!(kp.decrypt(&pk.scalar_mul(&c3, &big(4)).unwrap()).unwrap(), big(12));
        assert_eq!(kp.decrypt(&pk.scalar_mul(&c3, &big(1)).unwrap()).unwrap(), big(3));
        assert_eq!(kp.decrypt(&pk.scalar_mul(&c3, &big(0)).unwrap()).unwrap(), big(0));
    }

    #[test]
    fn aggregate_and_bill() {
        let kp = toy();
        let pk = kp.public();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let cts: Vec<_> = [2u64, 3, 5].iter().map(|&m| pk.encrypt_u64(m, &mut rng).unwrap()).collect();
        assert_eq!(kp.decrypt(&pk.aggregate(&cts).unwrap()).unwrap(), big(10));
        assert_eq!(pk.aggregate(&cts[..1]).unwrap(), cts[0]);
        assert_eq!(pk.aggregate(&[]).unwrap(), pk.zero());

        let usage = &cts[..2];
        let bill = pk.encrypted_bill(usage, &RateSchedule::new(vec![10, 20], 3)).unwrap();
        assert_eq!(kp.decrypt(&bill).unwrap(), big(80));
        let free = pk.encrypted_bill(usage, &RateSchedule::new(vec![0, 0], 3)).unwrap();
        assert_eq!(kp.decrypt(&free).unwrap(), big(0));
        let flat = pk.encrypted_bill(usage, &RateSchedule::new(vec![1, 1], 3)).unwrap();
        assert_eq!(kp.decrypt(&flat).unwrap(), kp.decrypt(&pk.aggregate(usage).unwrap()).unwrap());

        assert_eq!(
            pk.encrypted_bill(usage, &RateSchedule::new(vec![1], 3)),
            Err(HeError::LengthMismatch { usage: 2, rates: 1 })
        );
        assert_eq!(pk.encrypted_bill(usage, &RateSchedule::new(vec![50, 50], 2)), Err(HeError::BillOverflow));
    }

    #[test]
    fn key_mismatch_detected() {
        let a = toy();
        let b = PaillierKeypair::from_primes(&big(17), &big(19)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let ca = a.public().encrypt_u64(3, &mut rng).unwrap();
        let cb = b.public().encrypt_u64(3, &mut rng).unwrap();
        assert_eq!(a.public().add(&ca, &cb), Err(HeError::KeyMismatch));
        assert_eq!(a.public().scalar_mul(&cb, &big(2)), Err(HeError::KeyMismatch));
        assert!(matches!(a.decrypt(&cb), Err(HeError::WrongKey { .. })));
    }

    #[test]
    fn from_primes_validation() {
        assert!(PaillierKeypair::from_primes(&big(11), &big(11)).is_err());
        assert!(PaillierKeypair::from_primes(&big(11), &big(15)).is_err());
        // gcd(n, phi) != 1: p = 3, q = 7 gives phi = 12, n = 21.
        assert!(PaillierKeypair::from_primes(&big(3), &big(7)).is_err());
    }

    #[test]
    fn primality_agrees_with_sieve() {
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
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for (n, &prime) in sieve.iter().enumerate() {
            assert_eq!(is_prime_deterministic(&big(n as u64)), prime, "{n}");
            assert_eq!(is_probable_prime(&big(n as u64), &mut rng), prime, "{n}");
        }
        // Carmichael numbers.
        for c in [561u64, 1105, 1729, 2465, 2821, 6601, 8911, 41041, 825265] {
            assert!(!is_probable_prime(&big(c), &mut rng));
        }
    }

    #[test]
    fn keygen_sizes_and_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        assert_eq!(keygen(32, &mut rng), Err(HeError::KeyTooSmall(32)));
        let kp = keygen(512, &mut rng).unwrap();
        assert_eq!(kp.public().bits(), 512);
        for _ in 0..100 {
            let m = rng.gen_biguint_below(kp.public().n());
            let c = kp.public().encrypt_random(&m, &mut rng).unwrap();
            assert_eq!(kp.decrypt(&c).unwrap(), m);
        }
    }

    #[test]
    fn rerandomization_changes_ciphertext_only() {
        let kp = toy();
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let c = kp.public().encrypt_u64(77, &mut rng).unwrap();
        let mut fresh = kp.public().rerandomize(&c, &mut rng).unwrap();
        while fresh == c {
            fresh = kp.public().rerandomize(&c, &mut rng).unwrap();
        }
        assert_eq!(kp.decrypt(&fresh).unwrap(), big(77));
    }

    #[test]
    fn key_files_round_trip() {
        let kp = keygen(128, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        let secret = kp.to_secret_file();
        let json = serde_json::to_string(&secret).unwrap();
        let back = PaillierKeypair::from_secret_file(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, kp);
        let mut tampered = secret.clone();
        tampered.mu = "12345".into();
        assert!(PaillierKeypair::from_secret_file(&tampered).is_err());

        let pk = PublicKeyFile::from_key(kp.public()).to_key().unwrap();
        assert_eq!(&pk, kp.public());
        let c = pk.encrypt_u64(9, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        let parsed = pk.ciphertext_from_hex(&c.to_hex()).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(pk.ciphertext_from(BigUint::zero()), Err(HeError::InvalidCiphertext));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn toy_homomorphism(a in 0u64..143, b in 0u64..143, k in 0u64..1000, seed in any::<u64>()) {
            let kp = toy();
            let pk = kp.public();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let ca = pk.encrypt_u64(a, &mut rng).unwrap();
            let cb = pk.encrypt_u64(b, &mut rng).unwrap();
            prop_assert_eq!(kp.decrypt(&pk.add(&ca, &cb).unwrap()).unwrap(), big((a + b) % 143));
            prop_assert_eq!(kp.decrypt(&pk.scalar_mul(&ca, &big(k)).unwrap()).unwrap(), big(k * a % 143));
        }
    }
}
