//! Stego-image generation by optimal-embedding simulation.
//!
//! A cost map assigns every pixel a price for a ±1 change. For a payload of
//! `B` bits the simulator picks `lambda` so that the change probabilities
//! `p_i = exp(-lambda rho_i) / (1 + 2 exp(-lambda rho_i))` (for each of +1
//! and -1) carry exactly `B` bits of ternary entropy, then samples the
//! changes with a counter-based generator keyed by `(seed, pixel index)`.

use crate::error::{Error, Result};
use crate::patch_graph::GrayImage;

/// Cost marking a pixel that must never change.
pub const WET_COST: f64 = 1e10;
/// Floor applied to the smoothed residual before it is inverted.
pub const HILL_DENOM_FLOOR: f64 = 1e-10;
/// Relative entropy tolerance of [`lambda_search`].
pub const ENTROPY_TOLERANCE: f64 = 1e-3;

const LAMBDA_LO: f64 = 1e-8;
const LAMBDA_HI: f64 = 1e3;
const HILL_MIN_SIZE: usize = 15;

/// Per-pixel embedding costs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMap {
    pub height: usize,
    pub width: usize,
    pub rho: Vec<f64>,
}

impl CostMap {
    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            rho: vec![value; height * width],
        }
    }

    pub fn is_wet(&self, i: usize) -> bool {
        self.rho[i] >= WET_COST
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Uniform,
    Hill,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "hill" => Ok(Self::Hill),
            other => Err(Error::Config(format!("unknown embedding algorithm {other:?}"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Hill => "hill",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingConfig {
    /// Bits per pixel, in `(0, log2 3)`.
    pub payload: f64,
    pub algorithm: Algorithm,
    pub seed: u64,
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.payload > 0.0 && self.payload < 3f64.log2()) {
            return Err(Error::Payload(self.payload));
        }
        Ok(())
    }
}

pub fn cost_map(cover: &GrayImage, algorithm: Algorithm) -> Result<CostMap> {
    match algorithm {
        Algorithm::Uniform => Ok(CostMap::uniform(cover.height(), cover.width(), 1.0)),
        Algorithm::Hill => hill_cost(cover),
    }
}

/// Symmetric (edge-repeating) reflection of an index into `0..n`.
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

/// Mean over a `size x size` window with mirrored borders, computed as two
/// separable passes. Each 1-d window is summed as `centre + sum(left_k + right_k)`
/// so flipping the input flips the output bit for bit.
fn mirrored_box_mean(x: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let line = &x[y * w..(y + 1) * w];
        for c in 0..w {
            let mut acc = line[c];
            for k in 1..=r {
                acc += line[mirror(c as isize - k, w)] + line[mirror(c as isize + k, w)];
            }
            rows[y * w + c] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    let norm = (size * size) as f64;
    for y in 0..h {
        for c in 0..w {
            let mut acc = rows[y * w + c];
            for k in 1..=r {
                acc += rows[mirror(y as isize - k, h) * w + c] + rows[mirror(y as isize + k, h) * w + c];
            }
            out[y * w + c] = acc / norm;
        }
    }
    out
}

/// HILL costs: `1 / (|cover * H1| * L1)` smoothed by `L2`, with `H1` the
/// 3x3 KB high-pass kernel, `L1` a 3x3 mean and `L2` a 15x15 mean, all with
/// mirrored borders.
pub fn hill_cost(cover: &GrayImage) -> Result<CostMap> {
    let (h, w) = (cover.height(), cover.width());
    if h < HILL_MIN_SIZE || w < HILL_MIN_SIZE {
        return Err(Error::ImageTooSmall { op: "hill_cost", h, w });
    }
    const H1: [[f64; 3]; 3] = [[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]];
    let px = cover.pixels();
    let mut residual = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (dy, krow) in H1.iter().enumerate() {
                let yy = mirror(y as isize + dy as isize - 1, h);
                for (dx, k) in krow.iter().enumerate() {
                    let xx = mirror(x as isize + dx as isize - 1, w);
                    acc += k * px[yy * w + xx] as f64;
                }
            }
            residual[y * w + x] = acc.abs();
        }
    }
    let smoothed = mirrored_box_mean(&residual, h, w, 3);
    let inverted: Vec<f64> = smoothed
        .iter()
        .map(|&d| if d < HILL_DENOM_FLOOR { WET_COST } else { 1.0 / d })
        .collect();
    let rho = mirrored_box_mean(&inverted, h, w, 15)
        .into_iter()
        .map(|v| v.min(WET_COST))
        .collect();
    Ok(CostMap {
        height: h,
        width: w,
        rho,
    })
}

/// Probability of each of the two ±1 changes at cost `rho`.
pub fn change_probability(rho: f64, lambda: f64) -> f64 {
    if rho >= WET_COST {
        return 0.0;
    }
    let e = (-lambda * rho).exp();
    e / (1.0 + 2.0 * e)
}

/// Entropy in bits of the distribution `(p, 1 - 2p, p)`.
pub fn ternary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    2.0 * term(p) + term(1.0 - 2.0 * p)
}

/// Total ternary entropy of a cost map at `lambda`.
pub fn total_entropy(rho: &CostMap, lambda: f64) -> f64 {
    rho.rho
        .iter()
        .map(|&r| ternary_entropy(change_probability(r, lambda)))
        .sum()
}

/// `lambda` whose total entropy is within [`ENTROPY_TOLERANCE`] (relative)
/// of `payload_bits`.
pub fn lambda_search(rho: &CostMap, payload_bits: f64) -> Result<f64> {
    let n = rho.rho.len() as f64;
    if !(payload_bits > 0.0 && payload_bits < 3f64.log2() * n) {
        return Err(Error::Payload(payload_bits / n));
    }
    let close = |h: f64| ((h - payload_bits) / payload_bits).abs() < ENTROPY_TOLERANCE;
    let mut lo = LAMBDA_LO;
    let mut h_lo = total_entropy(rho, lo);
    while h_lo < payload_bits && !close(h_lo) {
        lo /= 10.0;
        if lo < 1e-300 {
            return Err(Error::Unbracketable { payload_bits });
        }
        h_lo = total_entropy(rho, lo);
    }
    if close(h_lo) {
        return Ok(lo);
    }
    let mut hi = LAMBDA_HI;
    let mut h_hi = total_entropy(rho, hi);
    while h_hi > payload_bits && !close(h_hi) {
        hi *= 10.0;
        if hi > 1e300 {
            return Err(Error::Unbracketable { payload_bits });
        }
        h_hi = total_entropy(rho, hi);
    }
    if close(h_hi) {
        return Ok(hi);
    }
    // Bisection in log space; entropy decreases with lambda.
    for _ in 0..2000 {
        let mid = (0.5 * (lo.ln() + hi.ln())).exp();
        let h_mid = total_entropy(rho, mid);
        if close(h_mid) {
            return Ok(mid);
        }
        if h_mid > payload_bits {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    Err(Error::Unbracketable { payload_bits })
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based 64-bit hash of `(seed, counter)`: the `counter`-th output of
/// a SplitMix64 stream started at `seed`.
pub fn counter_hash(seed: u64, counter: u64) -> u64 {
    splitmix64(seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Uniform `[0,1)` draw for pixel `index` of an image embedded with `seed`.
pub fn pixel_uniform(seed: u64, index: u64) -> f64 {
    (counter_hash(seed, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// ±1 modifications, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMap {
    pub changes: Vec<i8>,
}

impl ChangeMap {
    pub fn count(&self) -> usize {
        self.changes.iter().filter(|&&c| c != 0).count()
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub stego: GrayImage,
    pub changes: ChangeMap,
    pub lambda: f64,
    /// Total entropy realized by `lambda`, in bits.
    pub entropy: f64,
}

/// Sample a stego image carrying `payload_bpp` bits per pixel under `rho`.
///
/// The -1 direction at value 0 and the +1 direction at 255 are redirected to
/// the feasible sign, so every change stays within `[0, 255]`.
pub fn simulate_embedding(cover: &GrayImage, rho: &CostMap, payload_bpp: f64, seed: u64) -> Result<Embedding> {
    if rho.height != cover.height() || rho.width != cover.width() {
        return Err(Error::Config("cost map and cover sizes differ".into()));
    }
    if !(payload_bpp > 0.0 && payload_bpp < 3f64.log2()) {
        return Err(Error::Payload(payload_bpp));
    }
    let payload_bits = payload_bpp * rho.rho.len() as f64;
    let lambda = lambda_search(rho, payload_bits)?;
    let mut stego = cover.clone();
    let mut changes = vec![0i8; rho.rho.len()];
    for (i, (px, ch)) in stego.pixels_mut().iter_mut().zip(changes.iter_mut()).enumerate() {
        let p = change_probability(rho.rho[i], lambda);
        let u = pixel_uniform(seed, i as u64);
        let mut c: i8 = if u < p {
            -1
        } else if u < 2.0 * p {
            1
        } else {
            0
        };
        if *px == 0 && c == -1 {
            c = 1;
        } else if *px == 255 && c == 1 {
            c = -1;
        }
        *px = (*px as i16 + c as i16) as u8;
        *ch = c;
    }
    Ok(Embedding {
        stego,
        changes: ChangeMap { changes },
        lambda,
        entropy: total_entropy(rho, lambda),
    })
}
