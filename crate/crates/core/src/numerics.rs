//! Dense linear algebra aliases, the shared time grid, seeded random streams,
//! φ-functions and spectral evaluation of symmetric matrix functions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// State-space vector.
pub type VecD = DVector<f64>;
/// Square matrix acting on the state space.
pub type MatD = DMatrix<f64>;

/// Counter-based generator used for every random draw in the crate.
pub type SimRng = ChaCha8Rng;

/// Horizon `T`, step `h` and step count `N` with `T = N h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    step: f64,
    steps: usize,
    requested_horizon: f64,
}

impl TimeGrid {
    /// Builds the grid for horizon `horizon` and step `step`.
    ///
    /// When `horizon / step` is an integer up to a relative `1e-9`, the
    /// horizon is kept. Otherwise `N = floor(T / h)` and the horizon shrinks
    /// to `N h`; [`TimeGrid::was_adjusted`] reports this.
    pub fn new(horizon: f64, step: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step must be positive and finite, got {step}"
            )));
        }
        if step > horizon {
            return Err(Error::InvalidArgument(format!(
                "step {step} exceeds horizon {horizon}"
            )));
        }
        let ratio = horizon / step;
        let nearest = ratio.round();
        if (horizon - nearest * step).abs() <= 1e-9 * horizon {
            Ok(Self {
                horizon,
                step,
                steps: nearest as usize,
                requested_horizon: horizon,
            })
        } else {
            let steps = ratio.floor() as usize;
            Ok(Self {
                horizon: steps as f64 * step,
                step,
                steps,
                requested_horizon: horizon,
            })
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn requested_horizon(&self) -> f64 {
        self.requested_horizon
    }

    pub fn was_adjusted(&self) -> bool {
        self.horizon != self.requested_horizon
    }

    /// Forward-process time `T - (n + frac) h` at which step `n` queries the score.
    pub fn forward_time(&self, n: usize, frac: f64) -> f64 {
        self.horizon - (n as f64 + frac) * self.step
    }
}

/// Master seed plus stream index. Equal specs yield equal draw sequences and
/// distinct stream ids give non-overlapping ChaCha streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    pub fn rng(&self) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Generator positioned at block `block` of this stream. Blocks are
    /// 2^32 words apart, so callers indexing by a call counter never overlap.
    pub fn rng_at(&self, block: u64) -> SimRng {
        let mut rng = self.rng();
        rng.set_word_pos((block as u128) << 32);
        rng
    }

    /// Same stream index, independent master seed for a named purpose.
    pub fn derive(&self, tag: u64) -> Self {
        Self {
            master_seed: splitmix64(self.master_seed ^ splitmix64(tag)),
            stream_id: self.stream_id,
        }
    }

    pub fn with_stream(&self, stream_id: u64) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_id,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Vector of `d` independent standard normal draws.
pub fn standard_normal_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> VecD {
    VecD::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// `v += scale · ξ` with `ξ ~ N(0, I)`, drawn in coordinate order.
pub fn add_scaled_normals<R: Rng + ?Sized>(v: &mut VecD, scale: f64, rng: &mut R) {
    for x in v.iter_mut() {
        *x += scale * rng.sample::<f64, _>(StandardNormal);
    }
}

/// Uniformly random unit vector in `R^d`.
pub fn random_unit_vec<R: Rng + ?Sized>(d: usize, rng: &mut R) -> VecD {
    loop {
        let v = standard_normal_vec(d, rng);
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

const PHI_SERIES_CUTOFF: f64 = 1e-4;
const PHI2_LONG_SERIES_CUTOFF: f64 = 0.5;

/// `φ₁(z) = (e^z − 1)/z` and `φ₂(z) = (e^z − 1 − z)/z²`.
///
/// Near zero both use truncated Taylor series. `φ₂` additionally uses a long
/// series on `|z| < 0.5`, where `expm1(z) − z` still loses digits.
pub fn phi_functions(z: f64) -> (f64, f64) {
    if z.abs() < PHI_SERIES_CUTOFF {
        let phi1 = phi1(z);
        let phi2 = 0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z / 720.0)));
        return (phi1, phi2);
    }
    let em1 = z.exp_m1();
    let phi1 = em1 / z;
    let phi2 = if z.abs() < PHI2_LONG_SERIES_CUTOFF {
        PHI2_TAYLOR.iter().rev().fold(0.0, |acc, &c| acc * z + c)
    } else {
        (em1 - z) / (z * z)
    };
    (phi1, phi2)
}

/// `1/(k + 2)!`, enough terms for `|z| < 0.5` to reach double precision.
const PHI2_TAYLOR: [f64; 18] = [
    0.5,
    0.16666666666666666,
    0.041666666666666664,
    0.008333333333333333,
    0.001388888888888889,
    0.0001984126984126984,
    2.48015873015873e-05,
    2.7557319223985893e-06,
    2.755731922398589e-07,
    2.505210838544172e-08,
    2.08767569878681e-09,
    1.6059043836821613e-10,
    1.1470745597729725e-11,
    7.647163731819816e-13,
    4.779477332387385e-14,
    2.8114572543455206e-15,
    1.5619206968586225e-16,
    8.22063524662433e-18,
];

pub fn phi1(z: f64) -> f64 {
    if z.abs() < PHI_SERIES_CUTOFF {
        1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z / 120.0)))
    } else {
        z.exp_m1() / z
    }
}

pub fn phi2(z: f64) -> f64 {
    phi_functions(z).1
}

/// `e^x` for `x ≤ 0`, without branches so that loops over it vectorize.
/// Uses fused multiply-adds only, so the result does not depend on
/// whether the hardware has FMA.
/// Arguments below -708 give 0.
#[inline(always)]
pub fn exp_nonpositive(x: f64) -> f64 {
    const SHIFTER: f64 = 6755399441055744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 0.693_147_180_369_123_8;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let xc = x.max(-708.0);
    let shifted = xc.mul_add(std::f64::consts::LOG2_E, SHIFTER);
    let kf = shifted - SHIFTER;
    let k = shifted.to_bits().wrapping_sub(SHIFTER.to_bits()) as i64;
    let r = (-kf).mul_add(LN2_LO, (-kf).mul_add(LN2_HI, xc));
    // degree-13 Taylor polynomial of e^r, |r| ≤ ln2/2, in Estrin form
    const C: [f64; 14] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
        1.0 / 6_227_020_800.0,
    ];
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q = |i: usize| r.mul_add(C[i + 1], C[i]);
    let s0 = q(2).mul_add(r2, q(0));
    let s1 = q(6).mul_add(r2, q(4));
    let s2 = q(10).mul_add(r2, q(8));
    let upper = q(12).mul_add(r4, s2);
    let p = upper.mul_add(r8, s1.mul_add(r4, s0));
    let scale = f64::from_bits(((k + 1023) as u64) << 52);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

/// Checks `‖A − Aᵀ‖_F ≤ 1e-8 ‖A‖_F`.
pub fn check_symmetric(a: &MatD) -> Result<()> {
    if !a.is_square() {
        return Err(Error::InvalidArgument(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let norm = a.norm();
    let n = a.nrows();
    let mut asym_sq = 0.0;
    for j in 0..n {
        for i in 0..j {
            asym_sq += 2.0 * (a[(i, j)] - a[(j, i)]).powi(2);
        }
    }
    let asymmetry = asym_sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("matrix entries".into()));
    }
    if asymmetry > 1e-8 * norm {
        return Err(Error::NotSymmetric { asymmetry, norm });
    }
    Ok(())
}

/// Eigendecomposition `A = Q Λ Qᵀ` of a symmetric matrix, reusable for
/// several spectral functions of the same matrix.
#[derive(Debug, Clone)]
pub struct SymmetricSpectrum {
    pub eigenvalues: VecD,
    pub eigenvectors: MatD,
}

impl SymmetricSpectrum {
    pub fn new(a: &MatD) -> Result<Self> {
        check_symmetric(a)?;
        match a.nrows() {
            1 => Ok(Self {
                eigenvalues: VecD::from_element(1, a[(0, 0)]),
                eigenvectors: MatD::identity(1, 1),
            }),
            2 => Ok(Self::jacobi_2x2(
                a[(0, 0)],
                0.5 * (a[(0, 1)] + a[(1, 0)]),
                a[(1, 1)],
            )),
            _ => {
                let eig = SymmetricEigen::new(0.5 * (a + a.transpose()));
                Ok(Self {
                    eigenvalues: eig.eigenvalues,
                    eigenvectors: eig.eigenvectors,
                })
            }
        }
    }

    /// Closed-form diagonalization of `[[a, b], [b, c]]` by one Jacobi rotation.
    fn jacobi_2x2(a: f64, b: f64, c: f64) -> Self {
        if b == 0.0 {
            return Self {
                eigenvalues: VecD::from_vec(vec![a, c]),
                eigenvectors: MatD::identity(2, 2),
            };
        }
        let theta = 0.5 * (2.0 * b).atan2(a - c);
        let (sn, cs) = theta.sin_cos();
        let l1 = a * cs * cs + 2.0 * b * cs * sn + c * sn * sn;
        let l2 = a * sn * sn - 2.0 * b * cs * sn + c * cs * cs;
        Self {
            eigenvalues: VecD::from_vec(vec![l1, l2]),
            eigenvectors: MatD::from_row_slice(2, 2, &[cs, -sn, sn, cs]),
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.max()
    }

    /// `Q f(Λ) Qᵀ`, exactly symmetric.
    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> MatD {
        let q = &self.eigenvectors;
        let n = self.dim();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = MatD::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v: f64 = (0..n).map(|k| q[(i, k)] * fl[k] * q[(j, k)]).sum();
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// `Q f(Λ) Qᵀ v` without forming the matrix.
    pub fn apply<F: Fn(f64) -> f64>(&self, f: F, v: &VecD) -> VecD {
        let q = &self.eigenvectors;
        let mut coeffs = q.tr_mul(v);
        for (c, &lambda) in coeffs.iter_mut().zip(self.eigenvalues.iter()) {
            *c *= f(lambda);
        }
        q * coeffs
    }
}

/// `f(A)` for symmetric `A` through its eigendecomposition.
pub fn sym_matrix_function<F: Fn(f64) -> f64>(a: &MatD, f: F) -> Result<MatD> {
    Ok(SymmetricSpectrum::new(a)?.map(f))
}

/// Symmetric PSD square root; eigenvalues within `1e-10 λ_max` below zero are clamped.
pub fn psd_sqrt(c: &MatD) -> Result<MatD> {
    let spectrum = psd_spectrum(c)?;
    Ok(spectrum.map(|l| l.max(0.0).sqrt()))
}

fn psd_spectrum(c: &MatD) -> Result<SymmetricSpectrum> {
    let spectrum = SymmetricSpectrum::new(c)?;
    let max = spectrum.max_eigenvalue().max(0.0);
    let min = spectrum.min_eigenvalue();
    if min < -1e-10 * max.max(f64::MIN_POSITIVE) && min < -1e-300 {
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue: min,
        });
    }
    Ok(spectrum)
}

/// Draws `C^{1/2} z` with `z ~ N(0, I)`.
pub fn sample_gaussian_with_cov<R: Rng + ?Sized>(c: &MatD, rng: &mut R) -> Result<VecD> {
    let spectrum = psd_spectrum(c)?;
    let z = standard_normal_vec(c.nrows(), rng);
    Ok(spectrum.apply(|l| l.max(0.0).sqrt(), &z))
}
