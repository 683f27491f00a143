//! Low-rank parameterizations of the joint fusion tensor and their dense
//! reconstructions.
//!
//! The joint tensor `W` has shape `m x (a+1) x (d+1)`; the bias, first-order
//! and second-order blocks sit at the trailing index of modes 1 and 2 (see
//! [`cmf_assemble_dense`]). Reconstructions here are reference paths used to
//! check the factorized forwards; the layers themselves never build `W`.

use crate::error::{Error, Result};
use crate::tensor::{khatri_rao, DenseTensor, Shape};

/// `φ(x) = [x, 1]`.
pub fn pad_one(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() + 1);
    out.extend_from_slice(x);
    out.push(1.0);
    out
}

fn expect_matrix(name: &str, t: &DenseTensor) -> Result<()> {
    if t.order() != 2 {
        return Err(Error::InvalidArgument(format!(
            "{name} must be a matrix, got order {}",
            t.order()
        )));
    }
    Ok(())
}

fn expect_cols(name: &str, t: &DenseTensor, k: usize) -> Result<()> {
    expect_matrix(name, t)?;
    if t.ncols() != k {
        return Err(Error::InvalidArgument(format!(
            "{name} has {} columns, expected {k}",
            t.ncols()
        )));
    }
    Ok(())
}

/// CP factors `A1 (m x k)`, `A2 ((a+1) x k)`, `A3 ((d+1) x k)` of the joint
/// tensor, with `W_(1) = A1 (A3 ⊙ A2)^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    factors: [DenseTensor; 3],
}

impl CpFactors {
    pub fn new(a1: DenseTensor, a2: DenseTensor, a3: DenseTensor) -> Result<Self> {
        expect_matrix("A1", &a1)?;
        let k = a1.ncols();
        expect_cols("A2", &a2, k)?;
        expect_cols("A3", &a3, k)?;
        Ok(CpFactors {
            factors: [a1, a2, a3],
        })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    /// `(m, a+1, d+1)`.
    pub fn joint_dims(&self) -> [usize; 3] {
        [
            self.factors[0].nrows(),
            self.factors[1].nrows(),
            self.factors[2].nrows(),
        ]
    }

    pub fn factor(&self, mode: usize) -> &DenseTensor {
        &self.factors[mode]
    }

    pub fn factors(&self) -> &[DenseTensor; 3] {
        &self.factors
    }

    pub(crate) fn factors_mut(&mut self) -> &mut [DenseTensor; 3] {
        &mut self.factors
    }
}

/// Tucker core `G (k1 x k2 x k3)` and factors `U1 (m x k1)`,
/// `U2 ((a+1) x k2)`, `U3 ((d+1) x k3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors {
    core: DenseTensor,
    factors: [DenseTensor; 3],
}

impl TuckerFactors {
    pub fn new(core: DenseTensor, u1: DenseTensor, u2: DenseTensor, u3: DenseTensor) -> Result<Self> {
        if core.order() != 3 {
            return Err(Error::InvalidArgument(format!(
                "Tucker core must have order 3, got {}",
                core.order()
            )));
        }
        let ranks = core.dims().to_vec();
        expect_cols("U1", &u1, ranks[0])?;
        expect_cols("U2", &u2, ranks[1])?;
        expect_cols("U3", &u3, ranks[2])?;
        Ok(TuckerFactors {
            core,
            factors: [u1, u2, u3],
        })
    }

    pub fn ranks(&self) -> [usize; 3] {
        let d = self.core.dims();
        [d[0], d[1], d[2]]
    }

    pub fn joint_dims(&self) -> [usize; 3] {
        [
            self.factors[0].nrows(),
            self.factors[1].nrows(),
            self.factors[2].nrows(),
        ]
    }

    pub fn core(&self) -> &DenseTensor {
        &self.core
    }

    pub fn factor(&self, mode: usize) -> &DenseTensor {
        &self.factors[mode]
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut DenseTensor, &mut [DenseTensor; 3]) {
        (&mut self.core, &mut self.factors)
    }
}

/// Mode-1/mode-2 factors of the second-order CMF term.
///
/// `Shared` ties them to the first-order row spaces `V_a`, `V_d`; nothing is
/// stored and reads go through to the row-space matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum BilinearRows {
    Shared,
    Separate { b2: DenseTensor, b3: DenseTensor },
}

/// Coupled matrix-tensor parameters:
/// `W_a = U V_a^T`, `W_d = U V_d^T`, and a CP second-order tensor with
/// mode-0 factor `U` (stored once) and mode-1/2 factors from [`BilinearRows`].
/// The global bias `b` stays unfactorized.
#[derive(Debug, Clone, PartialEq)]
pub struct CmfParams {
    b: DenseTensor,
    u: DenseTensor,
    v_a: DenseTensor,
    v_d: DenseTensor,
    rows: BilinearRows,
}

impl CmfParams {
    pub fn new(
        b: DenseTensor,
        u: DenseTensor,
        v_a: DenseTensor,
        v_d: DenseTensor,
        rows: BilinearRows,
    ) -> Result<Self> {
        if b.order() != 1 {
            return Err(Error::InvalidArgument("bias must be a vector".into()));
        }
        expect_matrix("U", &u)?;
        if u.nrows() != b.len() {
            return Err(Error::dims("CmfParams U", &[b.len(), u.ncols()], u.dims()));
        }
        let k = u.ncols();
        expect_cols("V_a", &v_a, k)?;
        expect_cols("V_d", &v_d, k)?;
        if let BilinearRows::Separate { b2, b3 } = &rows {
            expect_cols("B2", b2, k)?;
            expect_cols("B3", b3, k)?;
            if b2.nrows() != v_a.nrows() {
                return Err(Error::dims("CmfParams B2", v_a.dims(), b2.dims()));
            }
            if b3.nrows() != v_d.nrows() {
                return Err(Error::dims("CmfParams B3", v_d.dims(), b3.dims()));
            }
        }
        Ok(CmfParams { b, u, v_a, v_d, rows })
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// `(m, a, d)`.
    pub fn dims(&self) -> [usize; 3] {
        [self.b.len(), self.v_a.nrows(), self.v_d.nrows()]
    }

    pub fn shared_rows(&self) -> bool {
        matches!(self.rows, BilinearRows::Shared)
    }

    pub fn bias(&self) -> &DenseTensor {
        &self.b
    }

    pub fn u(&self) -> &DenseTensor {
        &self.u
    }

    pub fn v_a(&self) -> &DenseTensor {
        &self.v_a
    }

    pub fn v_d(&self) -> &DenseTensor {
        &self.v_d
    }

    pub fn b2(&self) -> &DenseTensor {
        match &self.rows {
            BilinearRows::Shared => &self.v_a,
            BilinearRows::Separate { b2, .. } => b2,
        }
    }

    pub fn b3(&self) -> &DenseTensor {
        match &self.rows {
            BilinearRows::Shared => &self.v_d,
            BilinearRows::Separate { b3, .. } => b3,
        }
    }

    /// Untied copy: `B2 := V_a`, `B3 := V_d` as independent arrays.
    pub fn untied(&self) -> CmfParams {
        CmfParams {
            b: self.b.clone(),
            u: self.u.clone(),
            v_a: self.v_a.clone(),
            v_d: self.v_d.clone(),
            rows: BilinearRows::Separate {
                b2: self.b2().clone(),
                b3: self.b3().clone(),
            },
        }
    }

    pub(crate) fn arrays_mut(&mut self) -> Vec<&mut DenseTensor> {
        let mut out = vec![&mut self.b, &mut self.u, &mut self.v_a, &mut self.v_d];
        if let BilinearRows::Separate { b2, b3 } = &mut self.rows {
            out.push(b2);
            out.push(b3);
        }
        out
    }
}

/// Dense joint tensor from CP factors: fold `A1 (A3 ⊙ A2)^T` along mode 0.
pub fn cp_reconstruct(f: &CpFactors) -> Result<DenseTensor> {
    let [a1, a2, a3] = f.factors();
    let kr = khatri_rao(a3, a2)?;
    let unfolded = a1.matmul(&kr.transpose()?)?;
    DenseTensor::fold(&unfolded, 0, &Shape::new(f.joint_dims())?)
}

/// Dense joint tensor `G ×_0 U1 ×_1 U2 ×_2 U3`.
pub fn tucker_reconstruct(f: &TuckerFactors) -> Result<DenseTensor> {
    let mut w = f.core().clone();
    for mode in 0..3 {
        w = w.mode_n_matrix_product(mode, f.factor(mode))?;
    }
    Ok(w)
}

/// Assembles the dense joint tensor implied by CMF parameters:
/// `W[:, a, d] = b`, `W[:, :a, d] = U V_a^T`, `W[:, a, :d] = U V_d^T`, and
/// `W[:, :a, :d]` the CP tensor with factors `(U, B2, B3)`.
pub fn cmf_assemble_dense(params: &CmfParams, dims: (usize, usize, usize)) -> Result<DenseTensor> {
    let (m, a, d) = dims;
    if params.dims() != [m, a, d] {
        return Err(Error::dims("cmf_assemble_dense", &[m, a, d], &params.dims()));
    }
    let w_a = params.u().matmul(&params.v_a().transpose()?)?;
    let w_d = params.u().matmul(&params.v_d().transpose()?)?;
    let w_ad = cmf_second_order(params)?;

    let mut w = DenseTensor::zeros(&[m, a + 1, d + 1])?;
    let data = w.data_mut();
    let at = |p: usize, q: usize, r: usize| p + m * (q + (a + 1) * r);
    for r in 0..d {
        for q in 0..a {
            for p in 0..m {
                data[at(p, q, r)] = w_ad.data()[p + m * (q + a * r)];
            }
        }
    }
    for q in 0..a {
        for p in 0..m {
            data[at(p, q, d)] = w_a.at(p, q);
        }
    }
    for r in 0..d {
        for p in 0..m {
            data[at(p, a, r)] = w_d.at(p, r);
        }
    }
    for (p, &bp) in params.bias().data().iter().enumerate() {
        data[at(p, a, d)] = bp;
    }
    Ok(w)
}

/// The `m x a x d` second-order tensor of a CMF parameterization, with
/// `W_(1) = U (B3 ⊙ B2)^T`.
pub fn cmf_second_order(params: &CmfParams) -> Result<DenseTensor> {
    let [m, a, d] = params.dims();
    let unfolded = params
        .u()
        .matmul(&khatri_rao(params.b3(), params.b2())?.transpose()?)?;
    DenseTensor::fold(&unfolded, 0, &Shape::new([m, a, d])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::outer_product;

    fn mat(rows: &[&[f64]]) -> DenseTensor {
        DenseTensor::from_rows(rows).unwrap()
    }

    fn col(v: &[f64]) -> DenseTensor {
        DenseTensor::column(v).unwrap()
    }

    fn assert_close(a: &DenseTensor, b: &DenseTensor, tol: f64) {
        assert_eq!(a.dims(), b.dims());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn cp_rank_one() {
        let f = CpFactors::new(col(&[1.0, 2.0]), col(&[3.0, 4.0]), col(&[5.0, 6.0])).unwrap();
        let w = cp_reconstruct(&f).unwrap();
        assert_eq!(w.get(&[0, 0, 0]).unwrap(), 15.0);
        assert_eq!(w.get(&[1, 1, 1]).unwrap(), 48.0);
        let expected = outer_product(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(w, expected);
    }

    #[test]
    fn cp_zero_and_padded_components() {
        let zero = CpFactors::new(
            DenseTensor::zeros(&[2, 3]).unwrap(),
            DenseTensor::zeros(&[3, 3]).unwrap(),
            DenseTensor::zeros(&[4, 3]).unwrap(),
        )
        .unwrap();
        assert!(cp_reconstruct(&zero).unwrap().data().iter().all(|&x| x == 0.0));

        let one = CpFactors::new(col(&[1.0, 2.0]), col(&[3.0, 4.0]), col(&[5.0, 6.0])).unwrap();
        let two = CpFactors::new(
            mat(&[&[1.0, 0.0], &[2.0, 0.0]]),
            mat(&[&[3.0, 0.0], &[4.0, 0.0]]),
            mat(&[&[5.0, 0.0], &[6.0, 0.0]]),
        )
        .unwrap();
        assert_eq!(cp_reconstruct(&two).unwrap(), cp_reconstruct(&one).unwrap());
    }

    #[test]
    fn cp_rejects_rank_mismatch() {
        let err = CpFactors::new(
            DenseTensor::zeros(&[2, 2]).unwrap(),
            DenseTensor::zeros(&[3, 1]).unwrap(),
            DenseTensor::zeros(&[3, 2]).unwrap(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn tucker_identity_factors() {
        let g = DenseTensor::from_dims(&[2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let eye = DenseTensor::identity(2).unwrap();
        let f = TuckerFactors::new(g.clone(), eye.clone(), eye.clone(), eye).unwrap();
        assert_eq!(tucker_reconstruct(&f).unwrap(), g);
    }

    #[test]
    fn tucker_single_entry_core_is_rank_one() {
        let mut g = DenseTensor::zeros(&[2, 2, 2]).unwrap();
        g.set(&[0, 0, 0], 1.0).unwrap();
        let u1 = mat(&[&[1.0, 9.0], &[-2.0, 9.0], &[0.5, 9.0]]);
        let u2 = mat(&[&[3.0, 7.0], &[4.0, 7.0]]);
        let u3 = mat(&[&[-1.0, 5.0], &[2.0, 5.0], &[6.0, 5.0]]);
        let f = TuckerFactors::new(g, u1.clone(), u2.clone(), u3.clone()).unwrap();
        let expected = outer_product(&[u1.col(0), u2.col(0), u3.col(0)]).unwrap();
        assert_close(&tucker_reconstruct(&f).unwrap(), &expected, 1e-14);
    }

    #[test]
    fn tucker_superdiagonal_matches_cp() {
        let a1 = mat(&[&[0.3, -1.2], &[2.0, 0.7], &[-0.4, 1.1]]);
        let a2 = mat(&[&[1.5, 0.2], &[-0.6, 0.9], &[0.1, -2.0]]);
        let a3 = mat(&[&[0.8, -0.3], &[1.4, 0.5]]);
        let mut g = DenseTensor::zeros(&[2, 2, 2]).unwrap();
        g.set(&[0, 0, 0], 1.0).unwrap();
        g.set(&[1, 1, 1], 1.0).unwrap();
        let tucker = TuckerFactors::new(g, a1.clone(), a2.clone(), a3.clone()).unwrap();
        let cp = CpFactors::new(a1, a2, a3).unwrap();
        assert_close(
            &tucker_reconstruct(&tucker).unwrap(),
            &cp_reconstruct(&cp).unwrap(),
            1e-12,
        );
    }

    fn cmf_fixture(rows: BilinearRows) -> CmfParams {
        CmfParams::new(
            DenseTensor::vector(&[0.5, -1.0]).unwrap(),
            mat(&[&[1.0, 0.0], &[0.0, 1.0]]),
            mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]),
            mat(&[&[-1.0, 0.5], &[2.0, -0.5]]),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn cmf_bias_only() {
        let p = CmfParams::new(
            DenseTensor::vector(&[1.0, 2.0]).unwrap(),
            DenseTensor::zeros(&[2, 2]).unwrap(),
            DenseTensor::zeros(&[3, 2]).unwrap(),
            DenseTensor::zeros(&[2, 2]).unwrap(),
            BilinearRows::Shared,
        )
        .unwrap();
        let w = cmf_assemble_dense(&p, (2, 3, 2)).unwrap();
        for idx in 0..w.len() {
            let (pp, rest) = (idx % 2, idx / 2);
            let (q, r) = (rest % 4, rest / 4);
            let expected = if q == 3 && r == 2 { [1.0, 2.0][pp] } else { 0.0 };
            assert_eq!(w.data()[idx], expected);
        }
    }

    #[test]
    fn cmf_identity_u_exposes_row_space() {
        let zero_rows = BilinearRows::Separate {
            b2: DenseTensor::zeros(&[3, 2]).unwrap(),
            b3: DenseTensor::zeros(&[2, 2]).unwrap(),
        };
        let p = cmf_fixture(zero_rows);
        let w = cmf_assemble_dense(&p, (2, 3, 2)).unwrap();
        let block = w.slice(&[0, 0, 2], &[2, 3, 1]).unwrap();
        let v_a_t = p.v_a().transpose().unwrap();
        assert_eq!(block.data(), v_a_t.data());
        let bilinear = w.slice(&[0, 0, 0], &[2, 3, 2]).unwrap();
        assert!(bilinear.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cmf_shared_rows_equal_manual_copy() {
        let shared = cmf_fixture(BilinearRows::Shared);
        let copied = cmf_fixture(BilinearRows::Separate {
            b2: shared.v_a().clone(),
            b3: shared.v_d().clone(),
        });
        assert_eq!(shared.untied(), copied);
        assert_eq!(
            cmf_assemble_dense(&shared, (2, 3, 2)).unwrap(),
            cmf_assemble_dense(&copied, (2, 3, 2)).unwrap()
        );
        assert!(cmf_assemble_dense(&shared, (2, 2, 2)).is_err());
    }

    #[test]
    fn pad_one_examples() {
        assert_eq!(pad_one(&[]), vec![1.0]);
        assert_eq!(pad_one(&[2.0, 3.0]), vec![2.0, 3.0, 1.0]);

        let p = cmf_fixture(BilinearRows::Shared);
        let w = cmf_assemble_dense(&p, (2, 3, 2)).unwrap();
        let z = w
            .mode_n_vec_product(1, &pad_one(&[0.0; 3]))
            .unwrap()
            .mode_n_vec_product(1, &pad_one(&[0.0; 2]))
            .unwrap();
        assert_eq!(z.data(), w.slice(&[0, 3, 2], &[2, 1, 1]).unwrap().data());
        assert_eq!(z.data(), p.bias().data());
    }
}
