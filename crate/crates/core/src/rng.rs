//! Counter-based random streams.
//!
//! Every random quantity in a run is addressed by a [`StreamKey`]
//! `(master, role, step, index)`. The key is hashed once into a 64-bit base
//! and draw `i` of the stream is `mix64(base + (i + 1) * GOLDEN)`, i.e. the
//! SplitMix64 sequence started at `base`. Output is therefore a pure
//! function of `(key, draw count)`: there is no global state, and two
//! evaluations that need the same collocation batch or index set simply
//! re-derive the stream from the same key.
//!
//! Normal variates use the Box–Muller transform on pairs of uniforms:
//! uniforms `u1 = ((x1 >> 11) + 1) * 2^-53` (in `(0, 1]`) and
//! `u2 = (x2 >> 11) * 2^-53` (in `[0, 1)`) give
//! `r = sqrt(-2 ln u1)`, `n0 = r cos(2π u2)`, `n1 = r sin(2π u2)`.
//! Filling `n` normals consumes `2 * ceil(n / 2)` raw draws; when `n` is odd
//! the sine half of the last pair is discarded.

use ndarray::Array2;

use crate::error::{invalid, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a stream is used for. The discriminant is part of the hashed key
/// and must never be renumbered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u64)]
pub enum Role {
    Collocation = 1,
    DimSet1 = 2,
    DimSet2 = 3,
    BaseU = 4,
    BaseV = 5,
    CoreZ = 6,
    SolutionCoeffs = 7,
    FullspaceZ = 8,
    TestPoints = 9,
    /// Independent replacement for `DimSet1` in the unlocked (naive) step.
    DimSet1Alt = 10,
    /// Independent replacement for `DimSet2` in the unlocked (naive) step.
    DimSet2Alt = 11,
    NetInit = 12,
    /// Randomness private to the verification harness.
    Verify = 13,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master: u64,
    pub role: Role,
    pub step: u64,
    pub index: u64,
}

impl StreamKey {
    pub fn new(master: u64, role: Role, step: u64, index: u64) -> Self {
        Self {
            master,
            role,
            step,
            index,
        }
    }

    fn hash(&self) -> u64 {
        let mut h = mix64(self.master.wrapping_add(GOLDEN));
        h = mix64(h ^ mix64((self.role as u64).wrapping_mul(GOLDEN) ^ 0xA076_1D64_78BD_642F));
        h = mix64(h ^ mix64(self.step.wrapping_add(0xE703_7ED1_A0B4_28DB)));
        mix64(h ^ mix64(self.index.wrapping_add(0x8EBC_6AF0_9C88_C6E3)))
    }

    pub fn stream(&self) -> RngStream {
        derive_stream(*self)
    }
}

impl std::fmt::Display for StreamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "(master={}, role={:?}, step={}, index={})",
            self.master, self.role, self.step, self.index
        )
    }
}

/// A stream positioned at some draw count.
#[derive(Debug, Clone)]
pub struct RngStream {
    base: u64,
    counter: u64,
}

pub fn derive_stream(key: StreamKey) -> RngStream {
    RngStream {
        base: key.hash(),
        counter: 0,
    }
}

impl RngStream {
    /// Number of raw 64-bit draws consumed so far.
    pub fn draws(&self) -> u64 {
        self.counter
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.base.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    #[inline]
    fn next_f64_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_f64_open0();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.next_normal_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.next_normal_pair().0;
        }
    }

    /// Uniform integer in `[0, n)` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let mut m = self.next_u64() as u128 * n as u128;
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = self.next_u64() as u128 * n as u128;
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }
}

/// `rows × cols` matrix of standard normals, filled in row-major order.
pub fn gaussian_matrix(stream: &mut RngStream, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if rows == 0 || cols == 0 {
        return invalid(format!("gaussian_matrix needs rows, cols >= 1 (got {rows}x{cols})"));
    }
    let mut data = vec![0.0; rows * cols];
    stream.fill_normal(&mut data);
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches buffer"))
}

/// Draw `k` indices from `0..n_total`.
///
/// Without replacement this is a partial Fisher–Yates shuffle and the
/// returned list is in draw order; with replacement the draws are i.i.d.
pub fn sample_index_set(
    stream: &mut RngStream,
    n_total: usize,
    k: usize,
    with_replacement: bool,
) -> Result<Vec<usize>> {
    if k == 0 || n_total == 0 {
        return invalid(format!("index set needs n_total >= 1 and k >= 1 (got n={n_total}, k={k})"));
    }
    if with_replacement {
        return Ok((0..k).map(|_| stream.below(n_total as u64) as usize).collect());
    }
    if k > n_total {
        return invalid(format!("cannot draw {k} distinct indices from {n_total}"));
    }
    let mut pool: Vec<usize> = (0..n_total).collect();
    for i in 0..k {
        let j = i + stream.below((n_total - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}
