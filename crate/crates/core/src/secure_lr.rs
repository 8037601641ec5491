//! Masked split logistic regression between an active party `p` (A or B)
//! and the passive key holder C.
//!
//! Party p stores `W~ = W^C - eps` for C's high-order features, where `eps`
//! is C's accumulated gradient noise. Every exchange is either a ciphertext
//! under C's key or a value masked by a fresh lattice sample.
//!
//! Precision: `frac_bits = F`. Weights and noise live on the `2^-F` grid,
//! logits and gradients on `2^-2F`. All homomorphic arithmetic is exact; the
//! only roundings are the `2^-F` quantisation of `mu`, of the batch scalars
//! and of the two `eta` products per iteration.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{bce_loss, sigmoid};
use crate::phe::{Ciphertext, FixedPoint, Keypair, PublicKey};

/// Masks are uniform on the `2^-F` lattice within this many quanta.
pub const MASK_QUANTA_BITS: u32 = 64;

/// Uniform lattice sample in `[-2^64, 2^64]` quanta at exponent `frac_bits`.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, frac_bits: u32) -> FixedPoint {
    let bound = 1i128 << MASK_QUANTA_BITS;
    FixedPoint::from_i128(rng.random_range(-bound..=bound), frac_bits)
}

/// Initial LR weights on the `2^-F` grid: `W^C` (g), `W^p` (m) and `b`.
pub fn init_weights<R: Rng + ?Sized>(g: usize, m: usize, frac_bits: u32, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let limit = 1.0 / ((g + m).max(1) as f64).sqrt();
    let mut draw = |n: usize| -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(FixedPoint::encode(rng.random_range(-limit..limit), frac_bits)?.decode())).collect()
    };
    let wc = draw(g)?;
    let wp = draw(m)?;
    Ok((wc, wp, 0.0))
}

/// Active party's model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitLrState {
    /// Noise-masked weights for C's features, exponent `frac_bits`.
    pub w_tilde: Vec<FixedPoint>,
    pub w_p: Vec<f64>,
    pub b: f64,
    pub t: u64,
    pub eta: f64,
    pub frac_bits: u32,
}

impl SplitLrState {
    pub fn new(w_c: &[f64], w_p: Vec<f64>, b: f64, eta: f64, frac_bits: u32) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {eta}")));
        }
        let w_tilde = w_c.iter().map(|&w| FixedPoint::encode(w, frac_bits)).collect::<std::result::Result<_, _>>()?;
        Ok(SplitLrState { w_tilde, w_p, b, t: 0, eta, frac_bits })
    }

    pub fn g(&self) -> usize {
        self.w_tilde.len()
    }

    pub fn eta_fixed(&self) -> Result<FixedPoint> {
        Ok(FixedPoint::encode(self.eta, self.frac_bits)?)
    }

    pub fn w_tilde_f64(&self) -> Vec<f64> {
        self.w_tilde.iter().map(FixedPoint::decode).collect()
    }

    fn local_logits(&self, x_p: &[Vec<f64>]) -> Result<Vec<f64>> {
        x_p.iter()
            .map(|x| {
                if x.len() != self.w_p.len() {
                    return Err(Error::dim("active-party features", self.w_p.len(), x.len()));
                }
                Ok(x.iter().zip(&self.w_p).map(|(a, w)| a * w).sum::<f64>() + self.b)
            })
            .collect()
    }
}

/// Party C's accumulated gradient noise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseState {
    /// `eps_t`, exponent `frac_bits`.
    pub eps: Vec<FixedPoint>,
    pub t: u64,
    pub frac_bits: u32,
    pub eta: f64,
    #[serde(skip, default = "idle_rng")]
    rng: Option<ChaCha20Rng>,
}

fn idle_rng() -> Option<ChaCha20Rng> {
    None
}

impl PartialEq for NoiseState {
    fn eq(&self, o: &Self) -> bool {
        self.eps == o.eps && self.t == o.t && self.frac_bits == o.frac_bits && self.eta == o.eta
    }
}

impl NoiseState {
    pub fn new(g: usize, eta: f64, frac_bits: u32, rng: ChaCha20Rng) -> Self {
        NoiseState { eps: vec![FixedPoint::zero(frac_bits); g], t: 0, frac_bits, eta, rng: Some(rng) }
    }

    pub fn eps_f64(&self) -> Vec<f64> {
        self.eps.iter().map(FixedPoint::decode).collect()
    }

    fn rng(&mut self) -> Result<&mut ChaCha20Rng> {
        self.rng.as_mut().ok_or_else(|| Error::Protocol("noise state restored without a generator".into()))
    }

    pub fn attach_rng(&mut self, rng: ChaCha20Rng) {
        self.rng = Some(rng);
    }
}

/// Party p's masks for one exchange. Never serialised; dropped when the
/// exchange completes.
#[derive(Debug)]
pub struct MaskScratch {
    eps_p: Vec<FixedPoint>,
    t: u64,
}

impl MaskScratch {
    pub fn len(&self) -> usize {
        self.eps_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps_p.is_empty()
    }

    #[cfg(test)]
    pub(crate) fn values(&self) -> &[FixedPoint] {
        &self.eps_p
    }
}

/// Party C's side: the key pair and its noise.
#[derive(Debug)]
pub struct PassiveLr {
    pub keypair: Keypair,
    pub noise: NoiseState,
}

/// Encode `mu` on the `2^-F` grid; C keeps these exact values.
pub fn encode_mu(mu: &[Vec<f64>], frac_bits: u32) -> Result<Vec<Vec<FixedPoint>>> {
    mu.iter()
        .map(|r| r.iter().map(|&v| Ok(FixedPoint::encode(v, frac_bits)?)).collect())
        .collect()
}

/// `[[mu]]`, nonces drawn in row order.
pub fn encrypt_mu<R: Rng + ?Sized>(kp: &Keypair, mu: &[Vec<FixedPoint>], rng: &mut R, exec: Exec) -> Result<Vec<Vec<Ciphertext>>> {
    let g = mu.first().map_or(0, Vec::len);
    let flat: Vec<FixedPoint> = mu.iter().flatten().cloned().collect();
    let enc = kp.encrypt_many(&flat, rng, exec)?;
    Ok(if g == 0 { vec![Vec::new(); mu.len()] } else { enc.chunks(g).map(<[Ciphertext]>::to_vec).collect() })
}

fn check_enc_mu(enc_mu: &[Vec<Ciphertext>], g: usize) -> Result<()> {
    if let Some(r) = enc_mu.iter().find(|r| r.len() != g) {
        return Err(Error::dim("encrypted mu width", g, r.len()));
    }
    Ok(())
}

/// p: `[[z~_b + eps^p_b]]` where `z~_b = [[mu_b]] . W~`.
pub fn p_masked_logits<R: Rng + ?Sized>(
    state: &SplitLrState,
    pk: &PublicKey,
    enc_mu: &[Vec<Ciphertext>],
    rng: &mut R,
    exec: Exec,
) -> Result<(Vec<Ciphertext>, MaskScratch)> {
    check_enc_mu(enc_mu, state.g())?;
    let masks: Vec<FixedPoint> = enc_mu.iter().map(|_| sample_mask(rng, state.frac_bits)).collect();
    let out = exec.try_map_range(enc_mu.len(), |b| -> Result<Ciphertext> {
        let z = pk.enc_dot_fixed(&enc_mu[b], &state.w_tilde)?;
        Ok(pk.add_fixed(&z, &masks[b])?)
    })?;
    Ok((out, MaskScratch { eps_p: masks, t: state.t }))
}

/// C: decrypt and add `mu_b . eps_t`, giving `z^C_b + eps^p_b`.
pub fn c_unmask_logits(
    kp: &Keypair,
    noise: &NoiseState,
    mu: &[Vec<FixedPoint>],
    masked: &[Ciphertext],
    exec: Exec,
) -> Result<Vec<FixedPoint>> {
    if mu.len() != masked.len() {
        return Err(Error::Protocol(format!("{} masked logits for {} retained mu rows", masked.len(), mu.len())));
    }
    let plain = kp.decrypt_many(masked, exec)?;
    mu.iter()
        .zip(plain)
        .map(|(m, v)| {
            if m.len() != noise.eps.len() {
                return Err(Error::dim("retained mu width", noise.eps.len(), m.len()));
            }
            Ok(m.iter().zip(&noise.eps).fold(v, |acc, (a, e)| acc.add(&a.mul(e))))
        })
        .collect()
}

/// Result of the forward exchange, as seen by p.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOut {
    pub z: Vec<f64>,
    pub z_c: Vec<f64>,
    pub loss: f64,
    pub delta_l: Vec<f64>,
}

/// p: remove its masks and form logits; with labels also the mean loss and
/// `delta_l = sigmoid(z) - y`.
pub fn p_finish_forward(
    state: &SplitLrState,
    scratch: MaskScratch,
    logit_plus_mask: &[FixedPoint],
    x_p: &[Vec<f64>],
    y: Option<&[u8]>,
) -> Result<ForwardOut> {
    if scratch.t != state.t {
        return Err(Error::StaleIteration { expected: state.t, got: scratch.t });
    }
    if logit_plus_mask.len() != scratch.len() || x_p.len() != scratch.len() {
        return Err(Error::Protocol(format!(
            "forward batch misaligned: {} masks, {} logits, {} feature rows",
            scratch.len(),
            logit_plus_mask.len(),
            x_p.len()
        )));
    }
    let z_c: Vec<f64> = logit_plus_mask.iter().zip(&scratch.eps_p).map(|(v, e)| v.sub(e).decode()).collect();
    drop(scratch);
    let z: Vec<f64> = state.local_logits(x_p)?.iter().zip(&z_c).map(|(a, c)| a + c).collect();
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {v}")));
    }
    let (loss, delta_l) = match y {
        Some(y) => {
            if y.len() != z.len() {
                return Err(Error::dim("labels", z.len(), y.len()));
            }
            let n = z.len().max(1) as f64;
            let mut loss = 0.0;
            let d = z
                .iter()
                .zip(y)
                .map(|(&zi, &yi)| {
                    let (l, g) = bce_loss(sigmoid(zi), yi);
                    loss += l / n;
                    g
                })
                .collect();
            (loss, d)
        }
        None => (0.0, Vec::new()),
    };
    Ok(ForwardOut { z, z_c, loss, delta_l })
}

/// Per-row gradient scalars `s_b = delta_l_b / B`.
pub fn batch_scalars(delta_l: &[f64]) -> Vec<f64> {
    let n = delta_l.len().max(1) as f64;
    delta_l.iter().map(|d| d / n).collect()
}

/// p: `[[sum_b s_b mu_b + eps^p]]`.
pub fn p_masked_grad<R: Rng + ?Sized>(
    state: &SplitLrState,
    pk: &PublicKey,
    enc_mu: &[Vec<Ciphertext>],
    delta_l: &[f64],
    rng: &mut R,
    exec: Exec,
) -> Result<(Vec<Ciphertext>, MaskScratch)> {
    check_enc_mu(enc_mu, state.g())?;
    if enc_mu.len() != delta_l.len() || enc_mu.is_empty() {
        return Err(Error::Protocol(format!("{} encrypted rows for {} loss gradients", enc_mu.len(), delta_l.len())));
    }
    let s = batch_scalars(delta_l)
        .into_iter()
        .map(|v| FixedPoint::encode(v, state.frac_bits))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let masks: Vec<FixedPoint> = (0..state.g()).map(|_| sample_mask(rng, state.frac_bits)).collect();
    let out = exec.try_map_range(state.g(), |q| -> Result<Ciphertext> {
        let col: Vec<Ciphertext> = enc_mu.iter().map(|r| r[q].clone()).collect();
        Ok(pk.add_fixed(&pk.enc_dot_fixed(&col, &s)?, &masks[q])?)
    })?;
    Ok((out, MaskScratch { eps_p: masks, t: state.t }))
}

/// C: decrypt, add fresh lattice noise `nu`, advance
/// `eps_{t+1} = eps_t + round(eta * nu)` and encrypt the new accumulator.
pub fn c_mask_grad<R: Rng + ?Sized>(
    kp: &Keypair,
    noise: &mut NoiseState,
    masked: &[Ciphertext],
    nonce_rng: &mut R,
    exec: Exec,
) -> Result<(Vec<FixedPoint>, Vec<Ciphertext>)> {
    if masked.len() != noise.eps.len() {
        return Err(Error::dim("masked gradient", noise.eps.len(), masked.len()));
    }
    let f = noise.frac_bits;
    let eta = FixedPoint::encode(noise.eta, f)?;
    let plain = kp.decrypt_many(masked, exec)?;
    let mut out = Vec::with_capacity(plain.len());
    for (q, v) in plain.into_iter().enumerate() {
        let nu = sample_mask(noise.rng()?, f);
        noise.eps[q] = noise.eps[q].add(&eta.mul(&nu).rescale(f));
        out.push(v.add(&nu));
    }
    noise.t += 1;
    let enc = kp.encrypt_many(&noise.eps, nonce_rng, exec)?;
    Ok((out, enc))
}

/// p: unmask the noisy gradient and take the SGD step on every weight.
pub fn p_update(
    state: &mut SplitLrState,
    scratch: MaskScratch,
    grad_tilde: &[FixedPoint],
    x_p: &[Vec<f64>],
    delta_l: &[f64],
) -> Result<()> {
    if scratch.t != state.t {
        return Err(Error::StaleIteration { expected: state.t, got: scratch.t });
    }
    if grad_tilde.len() != state.g() || scratch.len() != state.g() {
        return Err(Error::dim("masked gradient", state.g(), grad_tilde.len()));
    }
    if x_p.len() != delta_l.len() {
        return Err(Error::dim("active-party rows", delta_l.len(), x_p.len()));
    }
    let f = state.frac_bits;
    let eta = state.eta_fixed()?;
    let next: Vec<FixedPoint> = state
        .w_tilde
        .iter()
        .zip(grad_tilde.iter().zip(&scratch.eps_p))
        .map(|(w, (gt, e))| w.sub(&eta.mul(&gt.sub(e)).rescale(f)))
        .collect();
    drop(scratch);
    let s = batch_scalars(delta_l);
    let mut gw = vec![0.0; state.w_p.len()];
    let mut gb = 0.0;
    for (x, sb) in x_p.iter().zip(&s) {
        if x.len() != gw.len() {
            return Err(Error::dim("active-party features", gw.len(), x.len()));
        }
        gw.iter_mut().zip(x).for_each(|(g, v)| *g += sb * v);
        gb += sb;
    }
    let w_p: Vec<f64> = state.w_p.iter().zip(&gw).map(|(w, g)| w - state.eta * g).collect();
    let b = state.b - state.eta * gb;
    if !b.is_finite() || w_p.iter().any(|v| !v.is_finite()) || next.iter().any(|v| !v.decode().is_finite()) {
        return Err(Error::NonFinite("active-party weights after update".into()));
    }
    state.w_tilde = next;
    state.w_p = w_p;
    state.b = b;
    state.t += 1;
    Ok(())
}

/// p: `[[delta^C_b]] = s_b * ([[eps_{t+1}]] + W~_{t+1})` per row.
pub fn p_enc_delta_c(
    state: &SplitLrState,
    pk: &PublicKey,
    enc_eps: &[Ciphertext],
    delta_l: &[f64],
    exec: Exec,
) -> Result<Vec<Vec<Ciphertext>>> {
    if enc_eps.len() != state.g() {
        return Err(Error::dim("encrypted noise", state.g(), enc_eps.len()));
    }
    let w: Vec<Ciphertext> = enc_eps
        .iter()
        .zip(&state.w_tilde)
        .map(|(e, wt)| pk.add_fixed(e, wt))
        .collect::<std::result::Result<_, _>>()?;
    let s = batch_scalars(delta_l)
        .into_iter()
        .map(|v| FixedPoint::encode(v, state.frac_bits))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let flat = exec.try_map_range(s.len() * w.len(), |i| -> Result<Ciphertext> {
        Ok(pk.mul_fixed(&w[i % w.len()], &s[i / w.len()])?)
    })?;
    Ok(flat.chunks(w.len().max(1)).map(<[Ciphertext]>::to_vec).collect())
}

/// C: decrypt `[[delta^C]]`.
pub fn c_decrypt_delta(kp: &Keypair, enc: &[Vec<Ciphertext>], exec: Exec) -> Result<Vec<Vec<f64>>> {
    let g = enc.first().map_or(0, Vec::len);
    let flat: Vec<Ciphertext> = enc.iter().flatten().cloned().collect();
    let plain = kp.decrypt_many(&flat, exec)?;
    let vals: Vec<f64> = plain.iter().map(FixedPoint::decode).collect();
    if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("delta_C {v}")));
    }
    Ok(if g == 0 { vec![Vec::new(); enc.len()] } else { vals.chunks(g).map(<[f64]>::to_vec).collect() })
}

/// Random sources used by one in-process exchange.
pub struct Rngs<'a> {
    pub p_noise: &'a mut ChaCha20Rng,
    pub c_nonce: &'a mut ChaCha20Rng,
}

fn check_turn(state: &SplitLrState, c: &PassiveLr) -> Result<()> {
    if c.noise.t != state.t {
        return Err(Error::StaleIteration { expected: state.t, got: c.noise.t });
    }
    if c.keypair.public.frac_bits() != state.frac_bits || c.noise.frac_bits != state.frac_bits {
        return Err(Error::Protocol("parties disagree on fixed-point precision".into()));
    }
    Ok(())
}

/// Masked forward exchange run in-process. `mu` is C's retained plaintext
/// for the rows in `enc_mu`.
pub fn secure_forward(
    state: &SplitLrState,
    c: &PassiveLr,
    mu: &[Vec<FixedPoint>],
    enc_mu: &[Vec<Ciphertext>],
    x_p: &[Vec<f64>],
    y: &[u8],
    rngs: &mut Rngs<'_>,
    exec: Exec,
) -> Result<ForwardOut> {
    check_turn(state, c)?;
    let (masked, scratch) = p_masked_logits(state, &c.keypair.public, enc_mu, rngs.p_noise, exec)?;
    let lpm = c_unmask_logits(&c.keypair, &c.noise, mu, &masked, exec)?;
    p_finish_forward(state, scratch, &lpm, x_p, Some(y))
}

/// Masked backward exchange run in-process; returns `delta_C` as decrypted
/// by C.
pub fn secure_backward(
    state: &mut SplitLrState,
    c: &mut PassiveLr,
    enc_mu: &[Vec<Ciphertext>],
    x_p: &[Vec<f64>],
    delta_l: &[f64],
    rngs: &mut Rngs<'_>,
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    check_turn(state, c)?;
    let (masked, scratch) = p_masked_grad(state, &c.keypair.public, enc_mu, delta_l, rngs.p_noise, exec)?;
    let (grad_tilde, enc_eps) = c_mask_grad(&c.keypair, &mut c.noise, &masked, rngs.c_nonce, exec)?;
    p_update(state, scratch, &grad_tilde, x_p, delta_l)?;
    let enc_delta = p_enc_delta_c(state, &c.keypair.public, &enc_eps, delta_l, exec)?;
    c_decrypt_delta(&c.keypair, &enc_delta, exec)
}

/// Masked inference: `sigmoid(z)` per row.
pub fn secure_predict(
    state: &SplitLrState,
    c: &PassiveLr,
    mu: &[Vec<FixedPoint>],
    enc_mu: &[Vec<Ciphertext>],
    x_p: &[Vec<f64>],
    rngs: &mut Rngs<'_>,
    exec: Exec,
) -> Result<Vec<f64>> {
    check_turn(state, c)?;
    if enc_mu.is_empty() {
        return Ok(Vec::new());
    }
    let (masked, scratch) = p_masked_logits(state, &c.keypair.public, enc_mu, rngs.p_noise, exec)?;
    let lpm = c_unmask_logits(&c.keypair, &c.noise, mu, &masked, exec)?;
    Ok(p_finish_forward(state, scratch, &lpm, x_p, None)?.z.into_iter().map(sigmoid).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phe::keygen;
    use num_bigint::BigInt;
    use crate::rng::{stream, Stream};
    use std::sync::OnceLock;

    const F: u32 = 40;

    fn keys() -> &'static Keypair {
        static K: OnceLock<Keypair> = OnceLock::new();
        K.get_or_init(|| keygen(512, &mut stream(11, Stream::Keygen)).unwrap())
    }

    struct Plain {
        w_c: Vec<f64>,
        w_p: Vec<f64>,
        b: f64,
        eta: f64,
    }

    impl Plain {
        fn logits(&self, mu: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<f64> {
            mu.iter()
                .zip(x)
                .map(|(m, x)| {
                    m.iter().zip(&self.w_c).map(|(a, w)| a * w).sum::<f64>()
                        + x.iter().zip(&self.w_p).map(|(a, w)| a * w).sum::<f64>()
                        + self.b
                })
                .collect()
        }

        /// Returns delta_C computed with the updated weights.
        fn step(&mut self, mu: &[Vec<f64>], x: &[Vec<f64>], y: &[u8]) -> Vec<Vec<f64>> {
            let z = self.logits(mu, x);
            let d: Vec<f64> = z.iter().zip(y).map(|(z, &y)| sigmoid(*z) - y as f64).collect();
            let s = batch_scalars(&d);
            for q in 0..self.w_c.len() {
                let g: f64 = mu.iter().zip(&s).map(|(m, s)| s * m[q]).sum();
                self.w_c[q] -= self.eta * g;
            }
            for j in 0..self.w_p.len() {
                let g: f64 = x.iter().zip(&s).map(|(r, s)| s * r[j]).sum();
                self.w_p[j] -= self.eta * g;
            }
            self.b -= self.eta * s.iter().sum::<f64>();
            s.iter().map(|s| self.w_c.iter().map(|w| s * w).collect()).collect()
        }
    }

    struct Fixture {
        state: SplitLrState,
        c: PassiveLr,
        plain: Plain,
        p_noise: ChaCha20Rng,
        c_nonce: ChaCha20Rng,
        data: ChaCha20Rng,
    }

    fn fixture(g: usize, m: usize, eta: f64) -> Fixture {
        let (w_c, w_p, b) = init_weights(g, m, F, &mut stream(1, Stream::Init)).unwrap();
        Fixture {
            state: SplitLrState::new(&w_c, w_p.clone(), b, eta, F).unwrap(),
            c: PassiveLr { keypair: keys().clone(), noise: NoiseState::new(g, eta, F, stream(1, Stream::NoiseC)) },
            plain: Plain { w_c, w_p, b, eta },
            p_noise: stream(1, Stream::NoiseP),
            c_nonce: stream(1, Stream::Nonce),
            data: stream(1, Stream::Data),
        }
    }

    impl Fixture {
        fn batch(&mut self, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<u8>) {
            let g = self.state.g();
            let m = self.state.w_p.len();
            let mu: Vec<Vec<f64>> = (0..n).map(|_| (0..g).map(|_| self.data.random_range(-2.0..2.0)).collect()).collect();
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| self.data.random_range(-1.0..1.0)).collect()).collect();
            let y: Vec<u8> = (0..n).map(|_| self.data.random_bool(0.4) as u8).collect();
            (mu, x, y)
        }

        fn round(&mut self, mu: &[Vec<f64>], x: &[Vec<f64>], y: &[u8]) -> (ForwardOut, Vec<Vec<f64>>) {
            let mu_fx = encode_mu(mu, F).unwrap();
            let enc = encrypt_mu(&self.c.keypair, &mu_fx, &mut self.c_nonce, Exec::Parallel).unwrap();
            let mut rngs = Rngs { p_noise: &mut self.p_noise, c_nonce: &mut self.c_nonce };
            let fw = secure_forward(&self.state, &self.c, &mu_fx, &enc, x, y, &mut rngs, Exec::Parallel).unwrap();
            let dc = secure_backward(&mut self.state, &mut self.c, &enc, x, &fw.delta_l, &mut rngs, Exec::Parallel).unwrap();
            (fw, dc)
        }

        fn reconstructed(&self) -> Vec<f64> {
            self.state.w_tilde.iter().zip(&self.c.noise.eps).map(|(w, e)| w.add(e).decode()).collect()
        }
    }

    #[test]
    fn first_round_has_no_correction() {
        let mut fx = fixture(3, 2, 0.1);
        let (mu, x, y) = fx.batch(4);
        let mu_fx = encode_mu(&mu, F).unwrap();
        let enc = encrypt_mu(&fx.c.keypair, &mu_fx, &mut fx.c_nonce, Exec::Sequential).unwrap();
        let mut rngs = Rngs { p_noise: &mut fx.p_noise, c_nonce: &mut fx.c_nonce };
        let out = secure_forward(&fx.state, &fx.c, &mu_fx, &enc, &x, &y, &mut rngs, Exec::Sequential).unwrap();
        for (b, m) in mu_fx.iter().enumerate() {
            let exact = m.iter().zip(&fx.state.w_tilde).fold(FixedPoint::zero(2 * F), |a, (u, w)| a.add(&u.mul(w)));
            assert_eq!(out.z_c[b], exact.decode());
        }
    }

    #[test]
    fn zero_mu_gives_local_logit() {
        let mut fx = fixture(2, 2, 0.1);
        for _ in 0..2 {
            let (mu, x, y) = fx.batch(3);
            fx.round(&mu, &x, &y);
        }
        let (_, x, y) = fx.batch(3);
        let mu = vec![vec![0.0; 2]; 3];
        let (w_p, bias) = (fx.state.w_p.clone(), fx.state.b);
        let (fw, _) = fx.round(&mu, &x, &y);
        for (b, r) in x.iter().enumerate() {
            let zp = r.iter().zip(&w_p).map(|(a, w)| a * w).sum::<f64>() + bias;
            assert_eq!(fw.z_c[b], 0.0);
            assert!((fw.z[b] - zp).abs() < 1e-12);
        }
    }

    #[test]
    fn tracks_plaintext_trajectory() {
        let mut fx = fixture(3, 2, 0.2);
        for _ in 0..8 {
            let (mu, x, y) = fx.batch(5);
            let z_plain = fx.plain.logits(&mu, &x);
            let (fw, dc) = fx.round(&mu, &x, &y);
            let dc_plain = fx.plain.step(&mu, &x, &y);
            for (a, b) in fw.z.iter().zip(&z_plain) {
                assert!((a - b).abs() < 1e-9, "logit {a} vs {b}");
            }
            for (ra, rb) in dc.iter().zip(&dc_plain) {
                for (a, b) in ra.iter().zip(rb) {
                    assert!((a - b).abs() < 1e-9, "delta_C {a} vs {b}");
                }
            }
            for (a, b) in fx.reconstructed().iter().zip(&fx.plain.w_c) {
                assert!((a - b).abs() < 1e-9);
            }
            // masked weights are far from the true ones
            assert!(fx.state.w_tilde_f64().iter().zip(&fx.plain.w_c).any(|(a, b)| (a - b).abs() > 1.0));
        }
        let (mu, x, _) = fx.batch(4);
        let mu_fx = encode_mu(&mu, F).unwrap();
        let enc = encrypt_mu(&fx.c.keypair, &mu_fx, &mut fx.c_nonce, Exec::Parallel).unwrap();
        let mut rngs = Rngs { p_noise: &mut fx.p_noise, c_nonce: &mut fx.c_nonce };
        let p = secure_predict(&fx.state, &fx.c, &mu_fx, &enc, &x, &mut rngs, Exec::Parallel).unwrap();
        for (a, z) in p.iter().zip(fx.plain.logits(&mu, &x)) {
            assert!((a - sigmoid(z)).abs() < 1e-9);
        }
        let none = secure_predict(&fx.state, &fx.c, &[], &[], &[], &mut rngs, Exec::Parallel).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn zero_loss_gradient_is_pure_mask_drift() {
        let mut fx = fixture(2, 2, 0.1);
        let (mu, x, _) = fx.batch(3);
        let mu_fx = encode_mu(&mu, F).unwrap();
        let enc = encrypt_mu(&fx.c.keypair, &mu_fx, &mut fx.c_nonce, Exec::Sequential).unwrap();
        let before = fx.state.clone();
        let eps_before = fx.c.noise.eps.clone();
        let mut rngs = Rngs { p_noise: &mut fx.p_noise, c_nonce: &mut fx.c_nonce };
        let dc = secure_backward(&mut fx.state, &mut fx.c, &enc, &x, &[0.0; 3], &mut rngs, Exec::Sequential).unwrap();
        assert_eq!(fx.state.w_p, before.w_p);
        assert_eq!(fx.state.b, before.b);
        for q in 0..2 {
            let drift = fx.c.noise.eps[q].sub(&eps_before[q]);
            assert_eq!(fx.state.w_tilde[q], before.w_tilde[q].sub(&drift));
        }
        assert!(dc.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_iteration_is_detected() {
        let mut fx = fixture(2, 1, 0.1);
        fx.c.noise.t = 3;
        let (mu, x, y) = fx.batch(2);
        let mu_fx = encode_mu(&mu, F).unwrap();
        let enc = encrypt_mu(&fx.c.keypair, &mu_fx, &mut fx.c_nonce, Exec::Sequential).unwrap();
        let mut rngs = Rngs { p_noise: &mut fx.p_noise, c_nonce: &mut fx.c_nonce };
        let e = secure_forward(&fx.state, &fx.c, &mu_fx, &enc, &x, &y, &mut rngs, Exec::Sequential).unwrap_err();
        assert!(matches!(e, Error::StaleIteration { expected: 0, got: 3 }));
    }

    #[test]
    fn misaligned_batch_is_a_protocol_fault() {
        let mut fx = fixture(2, 1, 0.1);
        let (mu, x, y) = fx.batch(3);
        let mu_fx = encode_mu(&mu, F).unwrap();
        let enc = encrypt_mu(&fx.c.keypair, &mu_fx, &mut fx.c_nonce, Exec::Sequential).unwrap();
        let mut rngs = Rngs { p_noise: &mut fx.p_noise, c_nonce: &mut fx.c_nonce };
        let e = secure_forward(&fx.state, &fx.c, &mu_fx[..2], &enc, &x, &y, &mut rngs, Exec::Sequential).unwrap_err();
        assert!(matches!(e, Error::Protocol(_)));
    }

    #[test]
    fn masks_are_fresh_and_wide() {
        let mut fx = fixture(2, 1, 0.1);
        let (mu, _, _) = fx.batch(6);
        let mu_fx = encode_mu(&mu, F).unwrap();
        let enc = encrypt_mu(&fx.c.keypair, &mu_fx, &mut fx.c_nonce, Exec::Sequential).unwrap();
        let (_, s1) = p_masked_logits(&fx.state, &fx.c.keypair.public, &enc, &mut fx.p_noise, Exec::Sequential).unwrap();
        let (_, s2) = p_masked_logits(&fx.state, &fx.c.keypair.public, &enc, &mut fx.p_noise, Exec::Sequential).unwrap();
        assert_ne!(s1.values(), s2.values());
        let bound = BigInt::from(1u128 << 64);
        assert!(s1.values().iter().all(|m| m.exponent == F && m.mantissa.magnitude() <= bound.magnitude()));
        assert!(s1.values().iter().any(|m| m.decode().abs() > 1e3));
    }
}
