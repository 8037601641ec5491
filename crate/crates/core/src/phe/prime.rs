use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;

const SMALL_PRIMES: [u32; 54] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257,
];

const MILLER_RABIN_ROUNDS: usize = 32;

/// Uniform integer with exactly `bits` bits.
pub(crate) fn random_bits<R: RngCore + ?Sized>(rng: &mut R, bits: u64) -> BigUint {
    let nbytes = bits.div_ceil(8) as usize;
    let mut buf = vec![0u8; nbytes];
    rng.fill_bytes(&mut buf);
    let excess = nbytes as u64 * 8 - bits;
    if excess > 0 {
        buf[nbytes - 1] &= 0xff >> excess;
    }
    BigUint::from_bytes_le(&buf)
}

/// Uniform integer in `[1, bound)`.
pub(crate) fn random_below<R: RngCore + ?Sized>(rng: &mut R, bound: &BigUint) -> BigUint {
    let bits = bound.bits();
    loop {
        let x = random_bits(rng, bits);
        if !x.is_zero() && &x < bound {
            return x;
        }
    }
}

/// Random prime with exactly `bits` bits and its two top bits set, so that the
/// product of two such primes has exactly `2 * bits` bits.
pub(crate) fn random_prime<R: RngCore + ?Sized>(rng: &mut R, bits: u64) -> BigUint {
    assert!(bits >= 16);
    loop {
        let mut cand = random_bits(rng, bits);
        cand.set_bit(bits - 1, true);
        cand.set_bit(bits - 2, true);
        cand.set_bit(0, true);
        if is_probable_prime(&cand, rng) {
            return cand;
        }
    }
}

pub(crate) fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    if n == &two {
        return true;
    }
    for &p in SMALL_PRIMES.iter() {
        let p = BigUint::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    if n.is_even() {
        return false;
    }
    let one = BigUint::one();
    let n_minus_one = n - &one;
    let s = n_minus_one.trailing_zeros().unwrap_or(0);
    let d = &n_minus_one >> s;
    let span = n - &BigUint::from(3u32);
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = random_below(rng, &span) + &one; // a in [2, n-2]
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_one {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_one {
                continue 'witness;
            }
            if x == one {
                return false;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn classifies_known_numbers() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for p in [2u64, 3, 5, 257, 7919, 104_729, 2_147_483_647] {
            assert!(is_probable_prime(&BigUint::from(p), &mut rng), "{p}");
        }
        // Carmichael numbers and a few composites
        for c in [1u64, 561, 1105, 8911, 104_730, 2_147_483_649] {
            assert!(!is_probable_prime(&BigUint::from(c), &mut rng), "{c}");
        }
        // 2^127 - 1 is prime
        let m127 = (BigUint::one() << 127u32) - BigUint::one();
        assert!(is_probable_prime(&m127, &mut rng));
    }

    #[test]
    fn prime_has_requested_width() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let p = random_prime(&mut rng, 128);
        assert_eq!(p.bits(), 128);
        assert!(p.bit(126));
    }
}
