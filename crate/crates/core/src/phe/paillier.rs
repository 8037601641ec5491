use num_bigint::{BigInt, BigUint, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fixed::FixedPoint;
use super::prime::{random_below, random_prime};
use super::{PheError, DEFAULT_FRAC_BITS};
use crate::exec::Exec;

pub const ALLOWED_KEY_BITS: [u32; 3] = [512, 1024, 2048];

/// Upper bound on the mantissa width accepted by `encrypt`.
const MAX_INPUT_BITS: u32 = 128;

/// Paillier public key with generator `g = n + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    nn: BigUint,
    half_n: BigUint,
    key_bits: u32,
    frac_bits: u32,
    fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrivateKey {
    p: BigUint,
    q: BigUint,
    pp: BigUint,
    qq: BigUint,
    hp: BigUint,
    hq: BigUint,
    p_inv_q: BigUint,
    pp_inv_qq: BigUint,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Keypair {
    pub public: PublicKey,
    pub private: PrivateKey,
}

/// An encryption of `mantissa * 2^-exponent`.
///
/// `bound_bits` is a public upper bound on the plaintext mantissa width. It is
/// derived only from the encryption input limit and the plaintext scalars
/// applied since, never from the hidden value.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ciphertext {
    pub value: BigUint,
    pub exponent: u32,
    pub key_id: u64,
    pub bound_bits: u32,
}

/// Keygen with a seedable generator. Only 512, 1024 and 2048 bit moduli are
/// accepted; 512 is meant for tests.
pub fn keygen<R: RngCore + ?Sized>(key_bits: u32, rng: &mut R) -> Result<Keypair, PheError> {
    if !ALLOWED_KEY_BITS.contains(&key_bits) {
        return Err(PheError::KeySize(key_bits));
    }
    let half = (key_bits / 2) as u64;
    let p = random_prime(rng, half);
    let q = loop {
        let q = random_prime(rng, half);
        if q != p {
            break q;
        }
    };
    Keypair::from_primes(p, q, DEFAULT_FRAC_BITS)
}

fn fingerprint(n: &BigUint) -> u64 {
    let digest = Sha256::digest(n.to_bytes_be());
    u64::from_be_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

fn modinv(a: &BigUint, m: &BigUint) -> Result<BigUint, PheError> {
    a.modinv(m).ok_or_else(|| PheError::KeyFormat("non-invertible key component".into()))
}

impl PublicKey {
    pub fn from_modulus(n: BigUint, frac_bits: u32) -> Result<Self, PheError> {
        let key_bits = n.bits() as u32;
        if !ALLOWED_KEY_BITS.contains(&key_bits) {
            return Err(PheError::KeySize(key_bits));
        }
        Ok(PublicKey {
            nn: &n * &n,
            half_n: &n >> 1u32,
            fingerprint: fingerprint(&n),
            n,
            key_bits,
            frac_bits,
        })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Largest mantissa magnitude a product or sum may reach before it wraps.
    fn max_plain_bits(&self) -> u32 {
        self.key_bits - 2
    }

    fn check(&self, c: &Ciphertext) -> Result<(), PheError> {
        if c.key_id != self.fingerprint {
            return Err(PheError::KeyMismatch);
        }
        if c.value.is_zero() || c.value >= self.nn {
            return Err(PheError::Corrupted("value outside Z*_{n^2}"));
        }
        Ok(())
    }

    /// Map a signed mantissa into Z_n (negatives wrap into the upper half).
    fn to_residue(&self, m: &BigInt) -> Result<BigUint, PheError> {
        if m.magnitude().bits() as u32 > self.max_plain_bits() {
            return Err(PheError::Overflow(format!(
                "mantissa of {} bits exceeds the {}-bit plaintext range",
                m.magnitude().bits(),
                self.max_plain_bits()
            )));
        }
        Ok(match m.sign() {
            Sign::Minus => &self.n - m.magnitude(),
            _ => m.magnitude().clone(),
        })
    }

    fn from_residue(&self, r: BigUint) -> BigInt {
        if r > self.half_n {
            BigInt::from_biguint(Sign::Minus, &self.n - r)
        } else {
            BigInt::from_biguint(Sign::Plus, r)
        }
    }

    /// `g^m mod n^2` for `g = n + 1`, i.e. `1 + m n`.
    fn g_pow(&self, m: &BigUint) -> BigUint {
        (BigUint::one() + m * &self.n) % &self.nn
    }

    fn wrap(&self, value: BigUint, exponent: u32, bound_bits: u32) -> Result<Ciphertext, PheError> {
        if bound_bits > self.max_plain_bits() {
            return Err(PheError::Overflow(format!(
                "result may need {bound_bits} bits; plaintext space holds {}",
                self.max_plain_bits()
            )));
        }
        Ok(Ciphertext { value, exponent, key_id: self.fingerprint, bound_bits })
    }

    fn check_input(&self, x: &FixedPoint) -> Result<(), PheError> {
        let limit = MAX_INPUT_BITS.min(self.key_bits / 4);
        if x.bits() > limit as u64 {
            return Err(PheError::Overflow(format!(
                "encoded mantissa has {} bits; encryption accepts at most {limit}",
                x.bits()
            )));
        }
        Ok(())
    }

    fn input_bound(&self) -> u32 {
        MAX_INPUT_BITS.min(self.key_bits / 4)
    }

    /// Encrypt with public-key operations only.
    pub fn encrypt_fixed<R: RngCore + ?Sized>(
        &self,
        x: &FixedPoint,
        rng: &mut R,
    ) -> Result<Ciphertext, PheError> {
        self.check_input(x)?;
        let r = random_below(rng, &self.n);
        let blind = r.modpow(&self.n, &self.nn);
        let value = self.g_pow(&self.to_residue(&x.mantissa)?) * blind % &self.nn;
        self.wrap(value, x.exponent, self.input_bound())
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, x: f64, rng: &mut R) -> Result<Ciphertext, PheError> {
        self.encrypt_fixed(&FixedPoint::encode(x, self.frac_bits)?, rng)
    }

    /// Multiply the plaintext by `2^shift`, moving to a finer grid.
    pub fn rescale_up(&self, c: &Ciphertext, exponent: u32) -> Result<Ciphertext, PheError> {
        self.check(c)?;
        if exponent <= c.exponent {
            return Ok(c.clone());
        }
        let shift = exponent - c.exponent;
        let factor = BigUint::one() << shift;
        self.wrap(c.value.modpow(&factor, &self.nn), exponent, c.bound_bits + shift)
    }

    /// `[[a]] ⊕ [[b]]`
    pub fn add_ct(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext, PheError> {
        self.check(a)?;
        self.check(b)?;
        let e = a.exponent.max(b.exponent);
        let a = self.rescale_up(a, e)?;
        let b = self.rescale_up(b, e)?;
        self.wrap(&a.value * &b.value % &self.nn, e, a.bound_bits.max(b.bound_bits) + 1)
    }

    /// `[[a]] ⊕ k` for an exact fixed-point plaintext.
    pub fn add_fixed(&self, a: &Ciphertext, k: &FixedPoint) -> Result<Ciphertext, PheError> {
        self.check(a)?;
        let e = a.exponent.max(k.exponent);
        let a = self.rescale_up(a, e)?;
        let k = k.rescale(e);
        let residue = self.to_residue(&k.mantissa)?;
        let value = &a.value * self.g_pow(&residue) % &self.nn;
        self.wrap(value, e, a.bound_bits.max(k.bits() as u32) + 1)
    }

    /// `[[a]] ⊕ x`, with `x` encoded on the ciphertext's grid.
    pub fn add_pt(&self, a: &Ciphertext, x: f64) -> Result<Ciphertext, PheError> {
        let k = FixedPoint::encode(x, a.exponent.max(self.frac_bits))?;
        self.add_fixed(a, &k)
    }

    /// `[[a]] ⊗ k`; the result exponent is the sum of both exponents.
    pub fn mul_fixed(&self, a: &Ciphertext, k: &FixedPoint) -> Result<Ciphertext, PheError> {
        self.check(a)?;
        let bound = a.bound_bits + k.bits() as u32;
        let exponent = a.exponent + k.exponent;
        if k.mantissa.is_zero() {
            return self.wrap(BigUint::one(), exponent, 0);
        }
        let value = if k.mantissa.is_negative() {
            let inv = a.value.modinv(&self.nn).ok_or(PheError::Corrupted("not invertible mod n^2"))?;
            inv.modpow(k.mantissa.magnitude(), &self.nn)
        } else {
            a.value.modpow(k.mantissa.magnitude(), &self.nn)
        };
        self.wrap(value, exponent, bound)
    }

    /// `[[a]] ⊗ x`, with `x` encoded at the key's fractional precision.
    pub fn mul_pt(&self, a: &Ciphertext, x: f64) -> Result<Ciphertext, PheError> {
        self.mul_fixed(a, &FixedPoint::encode(x, self.frac_bits)?)
    }

    /// `Σ_i [[v_i]] ⊗ w_i`
    pub fn enc_dot(&self, v: &[Ciphertext], w: &[f64]) -> Result<Ciphertext, PheError> {
        let w = w
            .iter()
            .map(|&x| FixedPoint::encode(x, self.frac_bits))
            .collect::<Result<Vec<_>, _>>()?;
        self.enc_dot_fixed(v, &w)
    }

    pub fn enc_dot_fixed(&self, v: &[Ciphertext], w: &[FixedPoint]) -> Result<Ciphertext, PheError> {
        if v.len() != w.len() {
            return Err(PheError::LengthMismatch(v.len(), w.len()));
        }
        if v.is_empty() {
            return Err(PheError::Empty);
        }
        let terms = v.iter().zip(w).map(|(c, k)| self.mul_fixed(c, k)).collect::<Result<Vec<_>, _>>()?;
        self.sum(&terms)
    }

    /// Homomorphic sum of a nonempty slice.
    pub fn sum(&self, terms: &[Ciphertext]) -> Result<Ciphertext, PheError> {
        let (first, rest) = terms.split_first().ok_or(PheError::Empty)?;
        rest.iter().try_fold(first.clone(), |acc, c| self.add_ct(&acc, c))
    }
}

impl PrivateKey {
    fn l_function(x: &BigUint, p: &BigUint) -> BigUint {
        (x - BigUint::one()) / p
    }
}

impl Keypair {
    pub fn from_primes(p: BigUint, q: BigUint, frac_bits: u32) -> Result<Self, PheError> {
        if p == q {
            return Err(PheError::KeyFormat("primes must be distinct".into()));
        }
        let (p, q) = if p < q { (p, q) } else { (q, p) };
        let n = &p * &q;
        let public = PublicKey::from_modulus(n, frac_bits)?;
        let pp = &p * &p;
        let qq = &q * &q;
        let one = BigUint::one();
        let g = &public.n + &one;
        let hp = modinv(&PrivateKey::l_function(&g.modpow(&(&p - &one), &pp), &p), &p)?;
        let hq = modinv(&PrivateKey::l_function(&g.modpow(&(&q - &one), &qq), &q), &q)?;
        let p_inv_q = modinv(&p, &q)?;
        let pp_inv_qq = modinv(&pp, &qq)?;
        let private = PrivateKey { p, q, pp, qq, hp, hq, p_inv_q, pp_inv_qq };
        Ok(Keypair { public, private })
    }

    pub fn with_frac_bits(mut self, frac_bits: u32) -> Self {
        self.public.frac_bits = frac_bits;
        self
    }

    /// `r^n mod n^2` through the factorisation.
    fn blind(&self, r: &BigUint) -> BigUint {
        let k = &self.private;
        let n = &self.public.n;
        let a = r.modpow(n, &k.pp);
        let b = r.modpow(n, &k.qq);
        crt(&a, &b, &k.pp, &k.qq, &k.pp_inv_qq)
    }

    /// Encrypt using the private factorisation to speed up the blinding.
    /// Produces ciphertexts indistinguishable from [`PublicKey::encrypt_fixed`].
    pub fn encrypt_fixed<R: RngCore + ?Sized>(
        &self,
        x: &FixedPoint,
        rng: &mut R,
    ) -> Result<Ciphertext, PheError> {
        let pk = &self.public;
        pk.check_input(x)?;
        let r = random_below(rng, &pk.n);
        let value = pk.g_pow(&pk.to_residue(&x.mantissa)?) * self.blind(&r) % &pk.nn;
        pk.wrap(value, x.exponent, pk.input_bound())
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, x: f64, rng: &mut R) -> Result<Ciphertext, PheError> {
        self.encrypt_fixed(&FixedPoint::encode(x, self.public.frac_bits)?, rng)
    }

    /// Encrypt a batch. Nonce seeds are drawn from `rng` in order before the
    /// (possibly parallel) exponentiations, so output is mode independent.
    pub fn encrypt_many<R: Rng + ?Sized>(
        &self,
        xs: &[FixedPoint],
        rng: &mut R,
        exec: Exec,
    ) -> Result<Vec<Ciphertext>, PheError> {
        let nonces: Vec<BigUint> = xs.iter().map(|_| random_below(rng, &self.public.n)).collect();
        let pk = &self.public;
        exec.try_map_range(xs.len(), |i| {
            pk.check_input(&xs[i])?;
            let value = pk.g_pow(&pk.to_residue(&xs[i].mantissa)?) * self.blind(&nonces[i]) % &pk.nn;
            pk.wrap(value, xs[i].exponent, pk.input_bound())
        })
    }

    pub fn decrypt_fixed(&self, c: &Ciphertext) -> Result<FixedPoint, PheError> {
        let pk = &self.public;
        pk.check(c)?;
        if !c.value.gcd(&pk.n).is_one() {
            return Err(PheError::Corrupted("value shares a factor with n"));
        }
        let k = &self.private;
        let one = BigUint::one();
        let mp = PrivateKey::l_function(&c.value.modpow(&(&k.p - &one), &k.pp), &k.p) * &k.hp % &k.p;
        let mq = PrivateKey::l_function(&c.value.modpow(&(&k.q - &one), &k.qq), &k.q) * &k.hq % &k.q;
        let m = crt(&mp, &mq, &k.p, &k.q, &k.p_inv_q);
        Ok(FixedPoint::new(pk.from_residue(m), c.exponent))
    }

    pub fn decrypt(&self, c: &Ciphertext) -> Result<f64, PheError> {
        Ok(self.decrypt_fixed(c)?.decode())
    }

    pub fn decrypt_many(&self, cs: &[Ciphertext], exec: Exec) -> Result<Vec<FixedPoint>, PheError> {
        exec.try_map(cs, |c| self.decrypt_fixed(c))
    }

    pub fn to_file(&self) -> KeyFile {
        KeyFile {
            version: KeyFile::VERSION,
            key_bits: self.public.key_bits,
            frac_bits: self.public.frac_bits,
            n: self.public.n.to_str_radix(10),
            g: (&self.public.n + BigUint::one()).to_str_radix(10),
            p: Some(self.private.p.to_str_radix(10)),
            q: Some(self.private.q.to_str_radix(10)),
        }
    }

    pub fn from_file(file: &KeyFile) -> Result<Self, PheError> {
        file.check_version()?;
        let p = parse_decimal(file.p.as_deref().ok_or_else(|| PheError::KeyFormat("missing p".into()))?)?;
        let q = parse_decimal(file.q.as_deref().ok_or_else(|| PheError::KeyFormat("missing q".into()))?)?;
        let kp = Keypair::from_primes(p, q, file.frac_bits)?;
        if kp.public.n.to_str_radix(10) != file.n {
            return Err(PheError::KeyFormat("n does not equal p*q".into()));
        }
        Ok(kp)
    }
}

/// `x ≡ a (mod m1)`, `x ≡ b (mod m2)`; `m1_inv` is `m1^{-1} mod m2`.
fn crt(a: &BigUint, b: &BigUint, m1: &BigUint, m2: &BigUint, m1_inv: &BigUint) -> BigUint {
    let a_mod = a % m2;
    let diff = if b >= &a_mod { b - &a_mod } else { m2 - (&a_mod - b) % m2 };
    let h = diff * m1_inv % m2;
    a + m1 * h
}

fn parse_decimal(s: &str) -> Result<BigUint, PheError> {
    BigUint::parse_bytes(s.as_bytes(), 10).ok_or_else(|| PheError::KeyFormat(format!("not a decimal integer: {s:.20}")))
}

/// Versioned JSON key representation with decimal-string integers.
/// A file without `p` and `q` carries only the public key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFile {
    pub version: u32,
    pub key_bits: u32,
    pub frac_bits: u32,
    pub n: String,
    pub g: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<String>,
}

impl KeyFile {
    pub const VERSION: u32 = 1;

    fn check_version(&self) -> Result<(), PheError> {
        if self.version != Self::VERSION {
            return Err(PheError::KeyFormat(format!("unsupported version {}", self.version)));
        }
        Ok(())
    }

    pub fn public_only(&self) -> KeyFile {
        KeyFile { p: None, q: None, ..self.clone() }
    }

    pub fn public_key(&self) -> Result<PublicKey, PheError> {
        self.check_version()?;
        let n = parse_decimal(&self.n)?;
        if parse_decimal(&self.g)? != &n + BigUint::one() {
            return Err(PheError::KeyFormat("generator must be n + 1".into()));
        }
        let pk = PublicKey::from_modulus(n, self.frac_bits)?;
        if pk.key_bits != self.key_bits {
            return Err(PheError::KeyFormat("key_bits does not match modulus".into()));
        }
        Ok(pk)
    }
}
