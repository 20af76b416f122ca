//! Volterra system assembly, SVD factorization and Tikhonov-filtered
//! deconvolution of tissue curves into residue functions and CBF maps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::curves::{TimeAxis, TimeSeries};
use crate::error::{check_finite, Error, Result};
use crate::math;
use crate::volume::{BinaryMask3D, ScalarMap3D, Volume4D};

/// Singular values below this fraction of the largest are dropped.
pub const RANK_CUTOFF: f64 = 1e-12;
/// Maximum tolerated `‖UΣVᵀ − A‖_F / ‖A‖_F` after factorization.
pub const RECONSTRUCTION_TOL: f64 = 1e-10;
pub const DEFAULT_LAMBDA_REL: f64 = 0.3;

/// How the Tikhonov parameter relates to the spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FilterMode {
    /// `λ = λ_rel · σ_1` for every component.
    #[default]
    RelativeToLargest,
    /// `λ_i = λ_rel · σ_i`, which collapses every filter factor to
    /// `1 / (1 + λ_rel²)`. Kept for comparison only.
    PerIndex,
}

/// Lower-triangular Volterra matrix of the AIF.
///
/// Row `i` uses the AIF at `t_{i-1}, t_i, t_{i+1}`: column 0 holds
/// `(2c_i + c_{i-1})/6`, the diagonal `(2c_i + c_{i+1})/6` and the interior
/// `2c_i/3 + c_{i-1}/6 + c_{i+1}/6`. Samples outside `0..N` read as zero and
/// `A_00` follows the diagonal rule.
pub fn build_volterra(aif: &TimeSeries) -> Result<DMatrix<f64>> {
    let n = aif.len();
    if n < 3 {
        return Err(Error::Size {
            what: "AIF length (minimum)",
            expected: 3,
            actual: n,
        });
    }
    let c = aif.values();
    let at = |i: isize| -> f64 {
        if i < 0 || i as usize >= n {
            0.0
        } else {
            c[i as usize]
        }
    };
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let ii = i as isize;
        let (prev, cur, next) = (at(ii - 1), at(ii), at(ii + 1));
        for j in 0..=i {
            a[(i, j)] = if j == i {
                (2.0 * cur + next) / 6.0
            } else if j == 0 {
                (2.0 * cur + prev) / 6.0
            } else {
                2.0 / 3.0 * cur + prev / 6.0 + next / 6.0
            };
        }
    }
    Ok(a)
}

/// Scatters `∂L/∂A` back onto the AIF samples (adjoint of [`build_volterra`]).
pub fn volterra_adjoint(grad_a: &DMatrix<f64>) -> Vec<f64> {
    let n = grad_a.nrows();
    let mut g = vec![0.0; n];
    let mut add = |i: isize, w: f64| {
        if i >= 0 && (i as usize) < n {
            g[i as usize] += w;
        }
    };
    for i in 0..n {
        let ii = i as isize;
        for j in 0..=i {
            let gij = grad_a[(i, j)];
            if j == i {
                add(ii, gij * 2.0 / 6.0);
                add(ii + 1, gij / 6.0);
            } else if j == 0 {
                add(ii, gij * 2.0 / 6.0);
                add(ii - 1, gij / 6.0);
            } else {
                add(ii, gij * (2.0 / 3.0));
                add(ii - 1, gij / 6.0);
                add(ii + 1, gij / 6.0);
            }
        }
    }
    g
}

/// Factorized Volterra system with its Tikhonov-filtered inverse.
///
/// The full square factors are retained so the gradient code can use the
/// whole spectrum; [`VolterraSystem::u`], [`VolterraSystem::sigma`] and
/// [`VolterraSystem::v`] expose the rank-truncated part.
#[derive(Debug, Clone)]
pub struct VolterraSystem {
    a: DMatrix<f64>,
    u: DMatrix<f64>,
    sigma: Vec<f64>,
    v: DMatrix<f64>,
    rank: usize,
    lambda_rel: f64,
    mode: FilterMode,
    filtered_inverse: DMatrix<f64>,
}

impl VolterraSystem {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lambda_rel(&self) -> f64 {
        self.lambda_rel
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    /// Absolute regularization `λ = λ_rel · σ_1` (meaningful for
    /// [`FilterMode::RelativeToLargest`]).
    pub fn lambda(&self) -> f64 {
        self.lambda_rel * self.sigma[0]
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma[..self.rank]
    }

    pub fn u(&self) -> DMatrix<f64> {
        self.u.columns(0, self.rank).into_owned()
    }

    pub fn v(&self) -> DMatrix<f64> {
        self.v.columns(0, self.rank).into_owned()
    }

    pub(crate) fn full_u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub(crate) fn full_sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub(crate) fn full_v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Filter factors `f_i` over the retained components.
    pub fn filter_factors(&self) -> Vec<f64> {
        let lambda = self.lambda();
        self.sigma()
            .iter()
            .map(|&s| match self.mode {
                FilterMode::RelativeToLargest => s * s / (s * s + lambda * lambda),
                FilterMode::PerIndex => 1.0 / (1.0 + self.lambda_rel * self.lambda_rel),
            })
            .collect()
    }

    /// `Σ_i f_i v_i u_iᵀ / σ_i`, the matrix mapping a tissue curve to `k_λ`.
    pub fn filtered_inverse(&self) -> &DMatrix<f64> {
        &self.filtered_inverse
    }

    /// `k = filtered_inverse · c` with a fixed summation order.
    pub(crate) fn apply(&self, c: &[f64], out: &mut [f64]) {
        let n = self.n();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let mut acc = 0.0;
            for (j, cj) in c.iter().enumerate() {
                acc += self.filtered_inverse[(i, j)] * cj;
            }
            *o = acc;
        }
    }

    /// Indices `i > 0` whose singular value is within `rel` of its
    /// predecessor; their singular vectors are not uniquely defined.
    pub fn near_repeated_singular_values(&self, rel: f64) -> bool {
        self.sigma()
            .windows(2)
            .any(|w| (w[0] - w[1]).abs() <= rel * w[0])
    }
}

type Factors = (DMatrix<f64>, Vec<f64>, DMatrix<f64>, usize);

/// Descending SVD of `a` (or of `aᵀ` with the factors swapped back), checked
/// by reconstruction. The inner error is a reconstruction failure.
fn sorted_svd(a: &DMatrix<f64>, transpose: bool) -> Result<core::result::Result<Factors, Error>> {
    let n = a.nrows();
    let fro = a.norm();
    let m = if transpose { a.transpose() } else { a.clone() };
    let svd = m
        .try_svd(true, true, f64::EPSILON, 200 * n)
        .ok_or_else(|| Error::Numerical(format!("SVD did not converge (n = {n}, ‖A‖_F = {fro:e})")))?;
    let (u_raw, vt_raw) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) if transpose => (vt.transpose(), u.transpose()),
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Numerical("SVD returned no singular vectors".into())),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));

    let mut u = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(svd.singular_values[src]);
        u.set_column(dst, &u_raw.column(src));
        v.set_column(dst, &vt_raw.row(src).transpose());
    }

    let smax = sigma[0];
    let rank = sigma.iter().take_while(|&&s| s >= RANK_CUTOFF * smax).count();

    let mut recon = DMatrix::zeros(n, n);
    for i in 0..rank {
        recon += sigma[i] * u.column(i) * v.column(i).transpose();
    }
    let rel = (&recon - a).norm() / fro;
    if !(rel <= RECONSTRUCTION_TOL) {
        let cond = smax / sigma[rank - 1];
        return Ok(Err(Error::Numerical(format!(
            "SVD reconstruction error {rel:e} exceeds {RECONSTRUCTION_TOL:e} (rank {rank}, condition {cond:e})"
        ))));
    }
    Ok(Ok((u, sigma, v, rank)))
}

pub fn factorize(a: DMatrix<f64>, lambda_rel: f64) -> Result<VolterraSystem> {
    factorize_with_mode(a, lambda_rel, FilterMode::default())
}

pub fn factorize_with_mode(a: DMatrix<f64>, lambda_rel: f64, mode: FilterMode) -> Result<VolterraSystem> {
    if !(lambda_rel > 0.0 && lambda_rel < 1.0) {
        return Err(Error::Range {
            what: "lambda_rel",
            detail: format!("{lambda_rel} not in (0, 1)"),
        });
    }
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Size {
            what: "square system matrix",
            expected: a.nrows(),
            actual: a.ncols(),
        });
    }
    check_finite(a.as_slice(), "system matrix")?;
    let n = a.nrows();
    let fro = a.norm();
    if fro == 0.0 {
        return Err(Error::Degenerate("system matrix is identically zero".into()));
    }

    // Golub-Kahan can lose accuracy on strongly graded triangular matrices;
    // the transposed problem is tried before giving up.
    let (u, sigma, v, rank) = match sorted_svd(&a, false)? {
        Ok(f) => f,
        Err(first) => match sorted_svd(&a, true)? {
            Ok(f) => f,
            Err(_) => return Err(first),
        },
    };
    let mut sys = VolterraSystem {
        a,
        u,
        sigma,
        v,
        rank,
        lambda_rel,
        mode,
        filtered_inverse: DMatrix::zeros(n, n),
    };
    let factors = sys.filter_factors();
    let mut pinv = DMatrix::zeros(n, n);
    for i in 0..rank {
        let w = factors[i] / sys.sigma[i];
        pinv += w * sys.v.column(i) * sys.u.column(i).transpose();
    }
    sys.filtered_inverse = pinv;
    Ok(sys)
}

/// Tikhonov-filtered residue function `k_λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidueCurve {
    axis: TimeAxis,
    k_values: Vec<f64>,
}

impl ResidueCurve {
    pub fn new(axis: TimeAxis, k_values: Vec<f64>) -> Result<Self> {
        if k_values.len() != axis.n_points() {
            return Err(Error::Size {
                what: "residue curve",
                expected: axis.n_points(),
                actual: k_values.len(),
            });
        }
        check_finite(&k_values, "residue curve")?;
        Ok(Self { axis, k_values })
    }

    pub fn axis(&self) -> TimeAxis {
        self.axis
    }

    pub fn values(&self) -> &[f64] {
        &self.k_values
    }

    pub fn norm(&self) -> f64 {
        math::norm2(&self.k_values)
    }
}

pub fn solve_residue(sys: &VolterraSystem, c_voi: &TimeSeries) -> Result<ResidueCurve> {
    if c_voi.len() != sys.n() {
        return Err(Error::Size {
            what: "tissue curve",
            expected: sys.n(),
            actual: c_voi.len(),
        });
    }
    let mut k = vec![0.0; sys.n()];
    sys.apply(c_voi.values(), &mut k);
    ResidueCurve::new(c_voi.axis(), k)
}

/// Index of the first maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Tissue density used to turn peak flow into CBF. It cancels in rCBF.
pub const TISSUE_DENSITY: f64 = 1.0;

pub fn cbf_from_residue(k: &ResidueCurve) -> f64 {
    k.values()[argmax(k.values())] / TISSUE_DENSITY
}

/// Residues of every brain voxel, voxel-major; voxels outside the mask get
/// an empty curve.
pub(crate) fn residues(sys: &VolterraSystem, vol: &Volume4D) -> Vec<Vec<f64>> {
    let n = sys.n();
    let mask = vol.brain_mask();
    (0..vol.dims().len())
        .map(|voxel| {
            if !mask.get(voxel) {
                return Vec::new();
            }
            let c = vol.voxel_curve(voxel);
            let mut k = vec![0.0; n];
            sys.apply(&c, &mut k);
            k
        })
        .collect()
}

pub(crate) fn system_for(vol: &Volume4D, aif: &TimeSeries, lambda_rel: f64, mode: FilterMode) -> Result<VolterraSystem> {
    if vol.n_time() != aif.len() {
        return Err(Error::Size {
            what: "AIF length vs volume time points",
            expected: vol.n_time(),
            actual: aif.len(),
        });
    }
    if aif.is_all_zero() {
        return Err(Error::Degenerate("AIF is identically zero".into()));
    }
    factorize_with_mode(build_volterra(aif)?, lambda_rel, mode)
}

pub(crate) fn cbf_map_from_residues(vol: &Volume4D, ks: &[Vec<f64>]) -> Result<ScalarMap3D> {
    let values = ks
        .iter()
        .map(|k| if k.is_empty() { 0.0 } else { k[argmax(k)] / TISSUE_DENSITY })
        .collect();
    ScalarMap3D::new(values, vol.brain_mask().clone())
}

/// CBF map of every brain voxel; the system is factorized once.
pub fn deconvolve_volume(vol: &Volume4D, aif: &TimeSeries, lambda_rel: f64) -> Result<ScalarMap3D> {
    deconvolve_volume_with(vol, aif, lambda_rel, FilterMode::default())
}

pub fn deconvolve_volume_with(vol: &Volume4D, aif: &TimeSeries, lambda_rel: f64, mode: FilterMode) -> Result<ScalarMap3D> {
    let sys = system_for(vol, aif, lambda_rel, mode)?;
    cbf_map_from_residues(vol, &residues(&sys, vol))
}

/// Mean of `map` over `mask` in voxel-index order.
pub(crate) fn masked_mean(map: &ScalarMap3D, mask: &BinaryMask3D) -> Result<f64> {
    mask.check_dims(map.dims())?;
    let n = mask.count();
    if n == 0 {
        return Err(Error::Degenerate("healthy mask is empty".into()));
    }
    if !mask.is_subset_of(map.valid_mask()) {
        return Err(Error::Domain("healthy mask extends outside the brain mask".into()));
    }
    let mut sum = 0.0;
    for (v, &m) in map.values().iter().zip(mask.as_slice()) {
        if m {
            sum += v;
        }
    }
    Ok(sum / n as f64)
}

/// rCBF: CBF divided by its mean over healthy tissue.
pub fn normalize_rcbf(cbf: &ScalarMap3D, healthy: &BinaryMask3D) -> Result<ScalarMap3D> {
    let mean = masked_mean(cbf, healthy)?;
    if !(mean > 0.0) {
        return Err(Error::Degenerate(format!("mean healthy CBF is {mean}, must be positive")));
    }
    cbf.map(|v| v / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::{gamma_variate, scale_curve, GammaVariateParams};
    use crate::volume::Dims3;
    use proptest::prelude::*;

    fn ts(v: &[f64]) -> TimeSeries {
        TimeSeries::new(v.to_vec()).unwrap()
    }

    /// Independent oracle: dense forward product.
    fn matvec(a: &DMatrix<f64>, k: &[f64]) -> Vec<f64> {
        (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)] * k[j]).sum()).collect()
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*seed >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn graded_matrix_factorizes_accurately() {
        // leading sample ~1e-3 of the peak; the direct SVD loses accuracy here
        let p = GammaVariateParams::new(6.913787963947564, 2.9174038329624046, 1.3624702179025279, 10.0).unwrap();
        let aif = gamma_variate(p, TimeAxis::new(20).unwrap()).unwrap();
        let a = build_volterra(&aif).unwrap();
        let sys = factorize(a.clone(), 0.3).unwrap();
        let mut recon = DMatrix::zeros(20, 20);
        for i in 0..sys.rank() {
            recon += sys.sigma()[i] * sys.u().column(i) * sys.v().column(i).transpose();
        }
        assert!((recon - a).norm() <= 1e-12 * sys.sigma()[0]);
    }

    #[test]
    fn volterra_hand_values() {
        let a = build_volterra(&ts(&[0.0, 6.0, 0.0, 0.0])).unwrap();
        assert_eq!(a[(1, 0)], 2.0);
        assert_eq!(a[(1, 1)], 2.0);
        assert_eq!(a[(2, 1)], 1.0);
        // A_00 = (2 c_0 + c_1) / 6
        assert_eq!(a[(0, 0)], 1.0);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(a[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn volterra_zero_and_short() {
        let a = build_volterra(&ts(&[0.0; 5])).unwrap();
        assert!(a.iter().all(|&x| x == 0.0));
        assert!(matches!(build_volterra(&ts(&[1.0, 2.0])), Err(Error::Size { .. })));
    }

    #[test]
    fn volterra_adjoint_is_transpose() {
        let c = ts(&[0.3, 1.2, -0.7, 2.0, 0.1, 0.9]);
        let a = build_volterra(&c).unwrap();
        let mut seed = 7;
        let g = DMatrix::from_fn(6, 6, |_, _| lcg(&mut seed) - 0.5);
        // <G, A(c)> = <adjoint(G), c> since A is linear in c
        let lhs: f64 = g.component_mul(&a).sum();
        let rhs: f64 = volterra_adjoint(&g).iter().zip(c.values()).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn factorize_identity_and_diagonal() {
        let sys = factorize(DMatrix::identity(4, 4), 0.3).unwrap();
        assert_eq!(sys.rank(), 4);
        for s in sys.sigma() {
            assert!((s - 1.0).abs() < 1e-14);
        }
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0, 0.0]));
        let sys = factorize(d, 0.3).unwrap();
        assert_eq!(sys.rank(), 3);
        let s = sys.sigma();
        assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 2.0).abs() < 1e-14 && (s[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn factorize_random_lower_triangular_reconstructs() {
        let mut seed = 42;
        let a = DMatrix::from_fn(8, 8, |i, j| if j <= i { lcg(&mut seed) * 2.0 - 1.0 } else { 0.0 });
        let sys = factorize(a.clone(), 0.3).unwrap();
        let recon = sys.u() * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sys.sigma().to_vec())) * sys.v().transpose();
        assert!((recon - &a).norm() / a.norm() <= 1e-10);
        assert!(sys.sigma().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn factorize_rejects_bad_lambda_and_zero() {
        assert!(matches!(factorize(DMatrix::identity(3, 3), 0.0), Err(Error::Range { .. })));
        assert!(factorize(DMatrix::identity(3, 3), 1.0).is_err());
        assert!(matches!(factorize(DMatrix::zeros(3, 3), 0.3), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identity_system_divides_by_1_09() {
        let sys = factorize(DMatrix::identity(5, 5), 0.3).unwrap();
        let c = ts(&[1.0, -2.0, 3.5, 0.0, 7.0]);
        let k = solve_residue(&sys, &c).unwrap();
        for (kv, cv) in k.values().iter().zip(c.values()) {
            assert!((kv - cv / 1.09).abs() <= 1e-12);
        }
    }

    #[test]
    fn tiny_lambda_matches_least_squares() {
        let c_art = ts(&[1.0, 1.4, 1.1, 0.8, 0.9, 1.2]);
        let a = build_volterra(&c_art).unwrap();
        let sys = factorize(a.clone(), 1e-9).unwrap();
        let c = ts(&[0.5, 0.9, 1.3, 1.0, 0.6, 0.7]);
        let k = solve_residue(&sys, &c).unwrap();
        let exact = a.lu().solve(&nalgebra::DVector::from_vec(c.values().to_vec())).unwrap();
        for (x, y) in k.values().iter().zip(exact.iter()) {
            assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn forward_multiply_roundtrip_small_system() {
        // The Volterra rows are cumulative sums of k weighted by c_art(t_i),
        // so only short, flat AIFs keep the system well enough conditioned
        // for full-vector recovery at λ_rel = 0.01.
        let c_art = ts(&[1.0; 5]);
        let a = build_volterra(&c_art).unwrap();
        let k_true: Vec<f64> = (0..5).map(|t| 0.8 * (-(t as f64) / 4.0).exp()).collect();
        let c = ts(&matvec(&a, &k_true));
        let k = solve_residue(&factorize(a, 0.01).unwrap(), &c).unwrap();
        let err = k
            .values()
            .iter()
            .zip(&k_true)
            .map(|(x, y)| (x - y).abs() / y.abs())
            .fold(0.0, f64::max);
        assert!(err <= 0.05, "max relative error {err}");
    }

    #[test]
    fn solve_rejects_length_mismatch() {
        let sys = factorize(DMatrix::identity(4, 4), 0.3).unwrap();
        assert!(matches!(solve_residue(&sys, &ts(&[1.0; 3])), Err(Error::Size { .. })));
    }

    #[test]
    fn per_index_mode_is_constant_rescaling() {
        let c_art = ts(&[1.0, 1.4, 1.1, 0.8, 0.9]);
        let a = build_volterra(&c_art).unwrap();
        let sys = factorize_with_mode(a.clone(), 0.3, FilterMode::PerIndex).unwrap();
        assert!(sys.filter_factors().iter().all(|f| (f - 1.0 / 1.09).abs() < 1e-15));
        let c = ts(&[0.2, 0.4, 0.1, 0.3, 0.5]);
        let k = solve_residue(&sys, &c).unwrap();
        let exact = a.lu().solve(&nalgebra::DVector::from_vec(c.values().to_vec())).unwrap();
        for (x, y) in k.values().iter().zip(exact.iter()) {
            assert!((x - y / 1.09).abs() <= 1e-10 * y.abs().max(1.0));
        }
    }

    #[test]
    fn cbf_examples() {
        let axis = TimeAxis::new(4).unwrap();
        let k = |v: [f64; 4]| ResidueCurve::new(axis, v.to_vec()).unwrap();
        assert_eq!(cbf_from_residue(&k([0.0, 2.0, 1.0, 0.0])), 2.0);
        assert_eq!(cbf_from_residue(&k([0.0; 4])), 0.0);
        assert_eq!(cbf_from_residue(&k([-0.1, 0.5, 3.2, 1.0])), 3.2);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    fn small_volume(aif: &TimeSeries, ks: &[Vec<f64>]) -> Volume4D {
        let a = build_volterra(aif).unwrap();
        let curves: Vec<Vec<f64>> = ks.iter().map(|k| matvec(&a, k)).collect();
        let d = Dims3::new(1, 1, ks.len()).unwrap();
        Volume4D::from_curves(aif.axis(), d, [1.0; 3], &curves, BinaryMask3D::full(d)).unwrap()
    }

    #[test]
    fn deconvolve_single_voxel_forward_model() {
        let aif = ts(&[1.0, 1.3, 1.2, 1.0, 1.1, 0.9, 1.0, 1.2]);
        let k: Vec<f64> = (0..8).map(|t| 0.6 * (-(t as f64) / 3.0).exp()).collect();
        let vol = small_volume(&aif, &[k]);
        let cbf = deconvolve_volume(&vol, &aif, 0.01).unwrap();
        assert!((cbf.values()[0] - 0.6).abs() / 0.6 <= 0.05);
    }

    #[test]
    fn deconvolve_zero_curves_and_zero_aif() {
        let aif = ts(&[0.0, 2.0, 3.0, 1.0, 0.5]);
        let d = Dims3::new(1, 2, 2).unwrap();
        let vol = Volume4D::new(aif.axis(), d, [1.0; 3], vec![0.0; 20], BinaryMask3D::full(d)).unwrap();
        let cbf = deconvolve_volume(&vol, &aif, 0.3).unwrap();
        assert!(cbf.values().iter().all(|&v| v == 0.0));
        let zero = ts(&[0.0; 5]);
        assert!(matches!(deconvolve_volume(&vol, &zero, 0.3), Err(Error::Degenerate(_))));
        assert!(matches!(deconvolve_volume(&vol, &ts(&[1.0; 4]), 0.3), Err(Error::Size { .. })));
    }

    #[test]
    fn deconvolve_masks_and_scales() {
        let aif = gamma_variate(GammaVariateParams::new(1.0, 3.0, 1.5, 4.0).unwrap(), TimeAxis::new(12).unwrap()).unwrap();
        let ks: Vec<Vec<f64>> = (0..4)
            .map(|v| (0..12).map(|t| (0.4 + 0.2 * v as f64) * (-(t as f64) / (3.0 + v as f64)).exp()).collect())
            .collect();
        let vol = small_volume(&aif, &ks);
        let d = vol.dims();
        let vol = vol.with_brain_mask(BinaryMask3D::new(d, vec![true, true, false, true]).unwrap()).unwrap();
        let base = deconvolve_volume(&vol, &aif, 0.3).unwrap();
        assert_eq!(base.values()[2], 0.0);
        let doubled = deconvolve_volume(&vol, &scale_curve(&aif, 2.0).unwrap(), 0.3).unwrap();
        for (x, y) in base.values().iter().zip(doubled.values()) {
            assert!((0.5 * x - y).abs() <= 1e-10 * x.abs());
        }
    }

    #[test]
    fn rcbf_examples() {
        let d = Dims3::new(1, 1, 3).unwrap();
        let all = BinaryMask3D::full(d);
        let flat = ScalarMap3D::new(vec![7.0; 3], all.clone()).unwrap();
        assert!(normalize_rcbf(&flat, &all).unwrap().values().iter().all(|&v| v == 1.0));
        let cbf = ScalarMap3D::new(vec![2.0, 2.0, 1.0], all.clone()).unwrap();
        let healthy = BinaryMask3D::new(d, vec![true, true, false]).unwrap();
        assert_eq!(normalize_rcbf(&cbf, &healthy).unwrap().values(), &[1.0, 1.0, 0.5]);
        assert!(matches!(normalize_rcbf(&cbf, &BinaryMask3D::empty(d)), Err(Error::Degenerate(_))));
        let zero = ScalarMap3D::new(vec![0.0; 3], all).unwrap();
        assert!(matches!(normalize_rcbf(&zero, &healthy), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rcbf_is_invariant_to_aif_amplitude() {
        let aif = gamma_variate(GammaVariateParams::new(1.0, 3.0, 1.5, 4.0).unwrap(), TimeAxis::new(12).unwrap()).unwrap();
        let ks: Vec<Vec<f64>> = (0..3)
            .map(|v| (0..12).map(|t| (1.0 - 0.3 * v as f64) * (-(t as f64) / 4.0).exp()).collect())
            .collect();
        let vol = small_volume(&aif, &ks);
        let healthy = BinaryMask3D::new(vol.dims(), vec![true, true, false]).unwrap();
        let base = normalize_rcbf(&deconvolve_volume(&vol, &aif, 0.3).unwrap(), &healthy).unwrap();
        for alpha in [0.1, 2.0, 17.0] {
            let scaled = normalize_rcbf(&deconvolve_volume(&vol, &scale_curve(&aif, alpha).unwrap(), 0.3).unwrap(), &healthy).unwrap();
            for (x, y) in base.values().iter().zip(scaled.values()) {
                assert!((x - y).abs() <= 1e-10 * x.abs());
            }
        }
    }

    #[test]
    fn voxel_order_does_not_change_values() {
        let aif = gamma_variate(GammaVariateParams::new(1.0, 3.0, 1.5, 4.0).unwrap(), TimeAxis::new(10).unwrap()).unwrap();
        let ks: Vec<Vec<f64>> = (0..5)
            .map(|v| (0..10).map(|t| (0.2 + 0.2 * v as f64) * (-(t as f64) / 4.0).exp()).collect())
            .collect();
        let mut rev = ks.clone();
        rev.reverse();
        let fwd = deconvolve_volume(&small_volume(&aif, &ks), &aif, 0.3).unwrap();
        let bwd = deconvolve_volume(&small_volume(&aif, &rev), &aif, 0.3).unwrap();
        let mut b = bwd.values().to_vec();
        b.reverse();
        assert_eq!(fwd.values(), &b[..]);
    }

    proptest! {
        #[test]
        fn volterra_is_homogeneous(values in prop::collection::vec(0.0f64..5.0, 3..16), alpha in 0.01f64..20.0) {
            let c = ts(&values);
            let a = build_volterra(&c).unwrap();
            let b = build_volterra(&scale_curve(&c, alpha).unwrap()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((alpha * x - y).abs() <= 1e-12 * (alpha * x).abs().max(1e-300));
            }
        }

        #[test]
        fn damping_is_monotone(values in prop::collection::vec(0.1f64..5.0, 4..14), tissue in prop::collection::vec(-1.0f64..3.0, 14)) {
            let c_art = ts(&values);
            let n = values.len();
            let c = ts(&tissue[..n]);
            let a = build_volterra(&c_art).unwrap();
            let mut last = f64::INFINITY;
            for lr in [0.01, 0.05, 0.1, 0.3, 0.6, 0.9] {
                let norm = solve_residue(&factorize(a.clone(), lr).unwrap(), &c).unwrap().norm();
                prop_assert!(norm <= last * (1.0 + 1e-12));
                last = norm;
            }
        }

        #[test]
        fn roundtrip_recovers_peak(values in prop::collection::vec(1.0f64..1.5, 4..9), cbf in 0.1f64..3.0, mtt in 1.5f64..8.0) {
            let c_art = ts(&values);
            let a = build_volterra(&c_art).unwrap();
            let k_true: Vec<f64> = (0..values.len()).map(|t| cbf * (-(t as f64) / mtt).exp()).collect();
            let c = ts(&matvec(&a, &k_true));
            let k = solve_residue(&factorize(a, 0.01).unwrap(), &c).unwrap();
            let got = cbf_from_residue(&k);
            prop_assert!((got - cbf).abs() <= 0.05 * cbf, "{} vs {}", got, cbf);
        }
    }
}
