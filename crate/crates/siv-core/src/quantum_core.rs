//! Small dense complex linear algebra for density matrices, unitaries and Kraus channels.
//!
//! Hilbert spaces here never exceed a few dozen dimensions, so everything is a dense
//! `nalgebra` matrix. Subsystem order is photon ⊗ nucleus ⊗ electron throughout the crate.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Result, SivError};

pub type ComplexAmplitude = Complex64;
pub type CMatrix = DMatrix<Complex64>;

pub const MAX_DIM: usize = 64;
pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
pub const PSD_TOL: f64 = 1e-8;
pub const UNITARY_TOL: f64 = 1e-10;

pub(crate) const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub(crate) const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(SivError::Dimension("dimension must be positive".into()));
    }
    if dim > MAX_DIM {
        return Err(SivError::DimensionOverflow { dim, max: MAX_DIM });
    }
    Ok(())
}

fn hermitian_error(m: &CMatrix) -> f64 {
    max_abs_diff(m, &m.adjoint())
}

fn min_eigenvalue(m: &CMatrix) -> f64 {
    // symmetrize first so round-off never feeds a non-Hermitian matrix to the solver
    let h = (m + m.adjoint()).scale(0.5);
    h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// A density matrix. `normalized == false` marks an unnormalized conditional state
/// (output of a heralded map) whose trace is its success probability.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: CMatrix,
    normalized: bool,
}

impl DensityMatrix {
    /// Validated constructor: Hermitian, unit trace, positive semidefinite.
    pub fn new(m: CMatrix) -> Result<Self> {
        let rho = Self::check_shape(m)?;
        let tr = rho.trace();
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(SivError::InvalidState(format!("trace {tr} is not 1")));
        }
        rho.validate_body()?;
        Ok(Self { m: rho.m, normalized: true })
    }

    /// Validated unnormalized conditional state: Hermitian, PSD, trace in [0, 1].
    pub fn unnormalized(m: CMatrix) -> Result<Self> {
        let rho = Self::check_shape(m)?;
        let tr = rho.trace();
        if !(-TRACE_TOL..=1.0 + TRACE_TOL).contains(&tr) {
            return Err(SivError::InvalidState(format!("conditional trace {tr} outside [0,1]")));
        }
        rho.validate_body()?;
        Ok(Self { m: rho.m, normalized: false })
    }

    fn check_shape(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(SivError::Dimension(format!("{}x{} is not square", m.nrows(), m.ncols())));
        }
        check_dim(m.nrows())?;
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(SivError::InvalidState("non-finite entry".into()));
        }
        Ok(Self { m, normalized: false })
    }

    fn validate_body(&self) -> Result<()> {
        let h = hermitian_error(&self.m);
        if h > HERMITIAN_TOL {
            return Err(SivError::InvalidState(format!("not Hermitian (deviation {h:e})")));
        }
        let lmin = min_eigenvalue(&self.m);
        if lmin < -PSD_TOL {
            return Err(SivError::InvalidState(format!("negative eigenvalue {lmin:e}")));
        }
        Ok(())
    }

    /// Re-checks all invariants of this state.
    pub fn validate(&self) -> Result<()> {
        if self.normalized && (self.trace() - 1.0).abs() > TRACE_TOL {
            return Err(SivError::InvalidState(format!("trace {} is not 1", self.trace())));
        }
        self.validate_body()
    }

    /// Internal constructor for states produced by exact maps of valid states.
    pub(crate) fn from_raw(m: CMatrix, normalized: bool) -> Self {
        Self { m, normalized }
    }

    pub fn from_pure(psi: &[Complex64]) -> Result<Self> {
        check_dim(psi.len())?;
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if (norm - 1.0).abs() > TRACE_TOL {
            return Err(SivError::InvalidState(format!("state vector norm² {norm} is not 1")));
        }
        let n = psi.len();
        let m = CMatrix::from_fn(n, n, |i, j| psi[i] * psi[j].conj());
        Ok(Self { m, normalized: true })
    }

    pub fn basis(dim: usize, index: usize) -> Result<Self> {
        check_dim(dim)?;
        if index >= dim {
            return Err(SivError::Dimension(format!("basis index {index} >= {dim}")));
        }
        let mut m = CMatrix::zeros(dim, dim);
        m[(index, index)] = ONE;
        Ok(Self { m, normalized: true })
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let m = CMatrix::identity(dim, dim).scale(1.0 / dim as f64);
        Ok(Self { m, normalized: true })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.m[(i, j)]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn trace(&self) -> f64 {
        self.m.trace().re
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.m[(i, i)].re).collect()
    }

    /// Returns the normalized state and the trace it was divided by.
    pub fn normalize(&self) -> Result<(DensityMatrix, f64)> {
        let tr = self.trace();
        if tr <= 0.0 {
            return Err(SivError::ZeroHerald);
        }
        Ok((Self { m: self.m.unscale(tr), normalized: true }, tr))
    }

    pub fn expectation(&self, op: &CMatrix) -> Result<Complex64> {
        if op.nrows() != self.dim() || op.ncols() != self.dim() {
            return Err(SivError::Dimension("operator and state dimensions differ".into()));
        }
        Ok((op * &self.m).trace())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryOperator {
    m: CMatrix,
}

impl UnitaryOperator {
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(SivError::Dimension("unitary must be square".into()));
        }
        check_dim(m.nrows())?;
        let dev = max_abs_diff(&(m.adjoint() * &m), &CMatrix::identity(m.nrows(), m.nrows()));
        if dev > UNITARY_TOL {
            return Err(SivError::InvalidState(format!("U†U deviates from I by {dev:e}")));
        }
        Ok(Self { m })
    }

    pub(crate) fn from_raw(m: CMatrix) -> Self {
        Self { m }
    }

    pub fn identity(dim: usize) -> Self {
        Self { m: CMatrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.m
    }

    /// `next` applied after `self`.
    pub fn then(&self, next: &UnitaryOperator) -> UnitaryOperator {
        Self { m: &next.m * &self.m }
    }

    pub fn kron(&self, other: &UnitaryOperator) -> UnitaryOperator {
        Self { m: kron(&self.m, &other.m) }
    }

    pub fn unitarity_error(&self) -> f64 {
        max_abs_diff(&(self.m.adjoint() * &self.m), &CMatrix::identity(self.dim(), self.dim()))
    }

    pub fn apply(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        if rho.dim() != self.dim() {
            return Err(SivError::Dimension(format!(
                "unitary dim {} vs state dim {}",
                self.dim(),
                rho.dim()
            )));
        }
        Ok(DensityMatrix::from_raw(&self.m * &rho.m * self.m.adjoint(), rho.normalized))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrausChannel {
    ops: Vec<CMatrix>,
    trace_preserving: bool,
}

impl KrausChannel {
    /// Validates Σ K†K = I (trace preserving) or Σ K†K ≤ I (selective, flagged).
    pub fn new(ops: Vec<CMatrix>) -> Result<Self> {
        let first = ops.first().ok_or_else(|| SivError::Empty("Kraus operator list".into()))?;
        let d = first.nrows();
        check_dim(d)?;
        if ops.iter().any(|k| k.nrows() != d || k.ncols() != d) {
            return Err(SivError::Dimension("Kraus operators differ in shape".into()));
        }
        let sum = ops.iter().fold(CMatrix::zeros(d, d), |acc, k| acc + k.adjoint() * k);
        let id = CMatrix::identity(d, d);
        if max_abs_diff(&sum, &id) <= UNITARY_TOL {
            return Ok(Self { ops, trace_preserving: true });
        }
        if min_eigenvalue(&(id - sum)) >= -UNITARY_TOL {
            return Ok(Self { ops, trace_preserving: false });
        }
        Err(SivError::InvalidState("Σ K†K exceeds the identity".into()))
    }

    pub(crate) fn from_raw(ops: Vec<CMatrix>, trace_preserving: bool) -> Self {
        Self { ops, trace_preserving }
    }

    pub fn dim(&self) -> usize {
        self.ops[0].nrows()
    }

    pub fn operators(&self) -> &[CMatrix] {
        &self.ops
    }

    pub fn is_trace_preserving(&self) -> bool {
        self.trace_preserving
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_raw(vec![CMatrix::identity(dim, dim)], true)
    }

    pub fn unitary(u: &UnitaryOperator) -> Self {
        Self::from_raw(vec![u.matrix().clone()], true)
    }

    /// ρ → (1−p)ρ + p·I/d, written with the d² Weyl (clock and shift) operators.
    pub fn depolarizing(dim: usize, p: f64) -> Result<Self> {
        check_dim(dim)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(crate::error::invalid("p", "depolarizing strength must lie in [0,1]"));
        }
        let d = dim as f64;
        let omega = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI / d);
        let mut ops = Vec::with_capacity(dim * dim);
        for a in 0..dim {
            for b in 0..dim {
                let w = if a == 0 && b == 0 { 1.0 - p + p / (d * d) } else { p / (d * d) };
                if w == 0.0 {
                    continue;
                }
                let k = CMatrix::from_fn(dim, dim, |i, j| {
                    if i == (j + a) % dim {
                        omega.powu((b * j) as u32) * w.sqrt()
                    } else {
                        ZERO
                    }
                });
                ops.push(k);
            }
        }
        Ok(Self::from_raw(ops, true))
    }

    /// Qubit dephasing: off-diagonals shrink by (1 − p).
    pub fn dephasing(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(crate::error::invalid("p", "dephasing strength must lie in [0,1]"));
        }
        let k0 = CMatrix::identity(2, 2).scale((1.0 - p / 2.0).sqrt());
        let mut k1 = CMatrix::zeros(2, 2);
        k1[(0, 0)] = Complex64::new((p / 2.0).sqrt(), 0.0);
        k1[(1, 1)] = Complex64::new(-(p / 2.0).sqrt(), 0.0);
        Ok(Self::from_raw(vec![k0, k1], true))
    }

    /// Qubit bit flip with probability p.
    pub fn bit_flip(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(crate::error::invalid("p", "flip probability must lie in [0,1]"));
        }
        let k0 = CMatrix::identity(2, 2).scale((1.0 - p).sqrt());
        let mut k1 = CMatrix::zeros(2, 2);
        k1[(0, 1)] = Complex64::new(p.sqrt(), 0.0);
        k1[(1, 0)] = Complex64::new(p.sqrt(), 0.0);
        Ok(Self::from_raw(vec![k0, k1], true))
    }

    /// Lifts a channel on subsystem `index` of a register with subsystem `dims`.
    pub fn embed(&self, dims: &[usize], index: usize) -> Result<Self> {
        if index >= dims.len() || dims[index] != self.dim() {
            return Err(SivError::Dimension("channel does not match the chosen subsystem".into()));
        }
        let before: usize = dims[..index].iter().product();
        let after: usize = dims[index + 1..].iter().product();
        check_dim(before * self.dim() * after)?;
        let ib = CMatrix::identity(before, before);
        let ia = CMatrix::identity(after, after);
        let ops = self.ops.iter().map(|k| kron(&kron(&ib, k), &ia)).collect();
        Ok(Self::from_raw(ops, self.trace_preserving))
    }
}

pub fn tensor_product(a: &DensityMatrix, b: &DensityMatrix) -> Result<DensityMatrix> {
    check_dim(a.dim() * b.dim())?;
    Ok(DensityMatrix::from_raw(kron(&a.m, &b.m), a.normalized && b.normalized))
}

/// Traces out every subsystem not listed in `keep`. `keep` is a set: order is ignored
/// and the kept factors stay in their original order.
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize], dims: &[usize]) -> Result<DensityMatrix> {
    let total: usize = dims.iter().product();
    if total != rho.dim() || dims.contains(&0) {
        return Err(SivError::Dimension(format!(
            "subsystem dims {dims:?} do not multiply to {}",
            rho.dim()
        )));
    }
    if keep.iter().any(|&k| k >= dims.len()) {
        return Err(SivError::Dimension("kept subsystem index out of range".into()));
    }
    let kept: Vec<usize> = (0..dims.len()).filter(|i| keep.contains(i)).collect();
    let traced: Vec<usize> = (0..dims.len()).filter(|i| !keep.contains(i)).collect();
    let dk: usize = kept.iter().map(|&i| dims[i]).product();
    let dt: usize = traced.iter().map(|&i| dims[i]).product();

    // strides of each subsystem in the full index
    let mut strides = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    let offset = |sub: &[usize], mut idx: usize| -> usize {
        let mut off = 0;
        for &s in sub.iter().rev() {
            off += (idx % dims[s]) * strides[s];
            idx /= dims[s];
        }
        off
    };
    let kept_off: Vec<usize> = (0..dk).map(|i| offset(&kept, i)).collect();
    let traced_off: Vec<usize> = (0..dt).map(|i| offset(&traced, i)).collect();

    let mut out = CMatrix::zeros(dk, dk);
    for (i, &oi) in kept_off.iter().enumerate() {
        for (j, &oj) in kept_off.iter().enumerate() {
            let mut acc = ZERO;
            for &t in &traced_off {
                acc += rho.m[(oi + t, oj + t)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(DensityMatrix::from_raw(out, rho.normalized))
}

/// Overlap with |Φ⁺⟩ = (|00⟩+|11⟩)/√2: ½(ρ₀₀ + ρ₃₃ + 2 Re ρ₀₃).
pub fn bell_overlap(rho: &DensityMatrix) -> Result<f64> {
    if rho.dim() != 4 {
        return Err(SivError::Dimension(format!("bell overlap needs dim 4, got {}", rho.dim())));
    }
    let m = &rho.m;
    Ok(0.5 * (m[(0, 0)].re + m[(3, 3)].re + 2.0 * m[(0, 3)].re))
}

pub fn apply_channel(rho: &DensityMatrix, channel: &KrausChannel) -> Result<DensityMatrix> {
    if rho.dim() != channel.dim() {
        return Err(SivError::Dimension(format!(
            "channel dim {} vs state dim {}",
            channel.dim(),
            rho.dim()
        )));
    }
    let d = rho.dim();
    let out = channel
        .ops
        .iter()
        .fold(CMatrix::zeros(d, d), |acc, k| acc + k * &rho.m * k.adjoint());
    Ok(DensityMatrix::from_raw(out, rho.normalized && channel.trace_preserving))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn mixed_tensor_mixed_is_mixed() {
        let a = DensityMatrix::maximally_mixed(2).unwrap();
        let ab = tensor_product(&a, &a).unwrap();
        let expect = DensityMatrix::maximally_mixed(4).unwrap();
        assert!(max_abs_diff(ab.matrix(), expect.matrix()) < 1e-15);
    }

    #[test]
    fn basis_tensor_basis() {
        let a = DensityMatrix::basis(2, 0).unwrap();
        let b = DensityMatrix::basis(2, 1).unwrap();
        let ab = tensor_product(&a, &b).unwrap();
        assert_eq!(ab.get(1, 1), c(1.0));
        assert!((ab.trace() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_overflow_rejected() {
        let a = DensityMatrix::maximally_mixed(16).unwrap();
        let b = DensityMatrix::maximally_mixed(8).unwrap();
        assert!(matches!(tensor_product(&a, &b), Err(SivError::DimensionOverflow { .. })));
    }

    #[test]
    fn bell_marginal_is_mixed() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let phi = DensityMatrix::from_pure(&[c(s), c(0.0), c(0.0), c(s)]).unwrap();
        let r = partial_trace(&phi, &[0], &[2, 2]).unwrap();
        assert!(max_abs_diff(r.matrix(), &CMatrix::identity(2, 2).scale(0.5)) < 1e-15);
        assert!((bell_overlap(&phi).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bell_overlap_reference_values() {
        let mixed = DensityMatrix::maximally_mixed(4).unwrap();
        assert!((bell_overlap(&mixed).unwrap() - 0.25).abs() < 1e-15);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let psi = DensityMatrix::from_pure(&[c(0.0), c(s), c(s), c(0.0)]).unwrap();
        assert!(bell_overlap(&psi).unwrap().abs() < 1e-15);
    }

    #[test]
    fn partial_trace_rejects_bad_dims() {
        let a = DensityMatrix::maximally_mixed(4).unwrap();
        assert!(partial_trace(&a, &[0], &[2, 3]).is_err());
    }

    #[test]
    fn full_depolarizing_gives_mixed() {
        let ch = KrausChannel::depolarizing(2, 1.0).unwrap();
        assert!(ch.is_trace_preserving());
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let plus = DensityMatrix::from_pure(&[c(s), c(s)]).unwrap();
        let out = apply_channel(&plus, &ch).unwrap();
        assert!(max_abs_diff(out.matrix(), &CMatrix::identity(2, 2).scale(0.5)) < 1e-14);
    }

    #[test]
    fn dephasing_scales_coherence_entrywise() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let psi = DensityMatrix::from_pure(&[c(s), Complex64::new(0.3, 0.4) / 0.5 * s]).unwrap();
        for p in [0.0, 0.1, 0.5, 1.0] {
            let out = apply_channel(&psi, &KrausChannel::dephasing(p).unwrap()).unwrap();
            // closed form: diagonal untouched, off-diagonal times (1 − p)
            assert!((out.get(0, 1) - psi.get(0, 1) * (1.0 - p)).norm() < 1e-14);
            assert!((out.get(1, 0) - psi.get(1, 0) * (1.0 - p)).norm() < 1e-14);
            assert!((out.get(0, 0) - psi.get(0, 0)).norm() < 1e-14);
        }
    }

    #[test]
    fn identity_channel_is_noop() {
        let rho = DensityMatrix::basis(3, 2).unwrap();
        let out = apply_channel(&rho, &KrausChannel::identity(3)).unwrap();
        assert_eq!(out, rho);
    }

    #[test]
    fn channel_dim_mismatch() {
        let rho = DensityMatrix::basis(4, 0).unwrap();
        assert!(apply_channel(&rho, &KrausChannel::identity(2)).is_err());
    }

    #[test]
    fn overcomplete_kraus_rejected() {
        let k = CMatrix::identity(2, 2);
        assert!(KrausChannel::new(vec![k.clone(), k]).is_err());
        let half = CMatrix::identity(2, 2).scale(0.5);
        assert!(!KrausChannel::new(vec![half]).unwrap().is_trace_preserving());
    }

    #[test]
    fn invalid_states_rejected() {
        let mut m = CMatrix::identity(2, 2).scale(0.5);
        m[(0, 1)] = c(0.7);
        m[(1, 0)] = c(0.7);
        assert!(DensityMatrix::new(m).is_err());
        assert!(DensityMatrix::new(CMatrix::identity(2, 2)).is_err());
    }
}
