//! 6D rotation encoding, its orthonormalisation and the rotation loss.
//!
//! A rotation `R` is stored by its first two rows, interleaved per column:
//! `[R00, R10, R01, R11, R02, R12]`. Each pair `(R0j, R1j)` is an irrep(1)
//! feature, so a rotation `T_g` about the vertical axis acts on the encoding
//! as `ρ₁³(g)`; the third row follows as the cross product of the first two.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::group::{CyclicGroup, GroupElement, RepresentationSpec};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Determinant floor of the 2x2 row Gram matrix below which the encoding is degenerate.
pub const DEGENERATE_GRAM: f64 = 1e-12;

pub fn six_d_spec(group: CyclicGroup) -> RepresentationSpec {
    RepresentationSpec::irrep(group, 1, 3)
}

pub fn six_d_from_matrix(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(0, 1)], r[(1, 1)], r[(0, 2)], r[(1, 2)]]
}

/// Symmetric orthonormalisation of the two rows, `(M Mᵀ)^{-1/2} M`, which
/// commutes with rotations applied to the rows from the left.
pub fn matrix_from_six_d(v: &[f64]) -> Result<Matrix3<f64>> {
    if v.len() != 6 || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("6D rotation must hold 6 finite values, got {v:?}")));
    }
    let a = Vector3::new(v[0], v[2], v[4]);
    let b = Vector3::new(v[1], v[3], v[5]);
    let (g11, g22, g12) = (a.dot(&a), b.dot(&b), a.dot(&b));
    let det = g11 * g22 - g12 * g12;
    if det <= DEGENERATE_GRAM {
        return Err(Error::Numeric(format!(
            "degenerate 6D rotation: rows {a:?} and {b:?} are (nearly) zero or parallel"
        )));
    }
    let s = det.sqrt();
    let t = (g11 + g22 + 2.0 * s).sqrt();
    let a2 = ((g22 + s) * a - g12 * b) / (s * t);
    let b2 = (-g12 * a + (g11 + s) * b) / (s * t);
    let c = a2.cross(&b2);
    Ok(Matrix3::from_rows(&[a2.transpose(), b2.transpose(), c.transpose()]))
}

/// Quaternion `[w, x, y, z]` of a rotation matrix.
pub fn quaternion_from_matrix(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    [q.w, q.i, q.j, q.k]
}

pub fn matrix_from_quaternion(q: [f64; 4]) -> Matrix3<f64> {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    *q.to_rotation_matrix().matrix()
}

/// Rotation about the vertical axis by the angle of `g`.
pub fn vertical_rotation(g: GroupElement) -> Matrix3<f64> {
    let (c, s) = g.cos_sin(1);
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Geodesic angle between two rotations, radians.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let tr = (a.transpose() * b).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// `-|⟨q_a, q_b⟩|`, computed on quaternions.
pub fn quaternion_loss(a: [f64; 4], b: [f64; 4]) -> f64 {
    -(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()).abs()
}

/// Ridge on the row Gram matrix inside the rotation loss.
pub const GRAM_RIDGE: f64 = 1e-4;

/// Differentiable orthonormalisation of a batch `[N, 6]`, returning the rows `[N, 3]` each.
pub fn orthonormal_rows<T: Scalar>(g: &Graph<T>, r6: Var) -> Result<[Var; 3]> {
    gram_rows(g, r6, 0.0)
}

/// `((M Mᵀ + ridge·I)^{-1/2} M)` row by row; `ridge = 0` rejects degenerate rows.
pub fn gram_rows<T: Scalar>(g: &Graph<T>, r6: Var, ridge: f64) -> Result<[Var; 3]> {
    let s = g.shape(r6);
    if s.len() != 2 || s[1] != 6 {
        return Err(Error::Shape(format!("6D rotations must be [N, 6], got {s:?}")));
    }
    let a = g.index_select(r6, 1, &[0, 2, 4]);
    let b = g.index_select(r6, 1, &[1, 3, 5]);
    let dot = |x: Var, y: Var| {
        let p = g.mul(x, y);
        g.sum_axis(p, 1, true)
    };
    let (g11, g22, g12) = (dot(a, a), dot(b, b), dot(a, b));
    let (g11, g22) = if ridge > 0.0 { (g.add_scalar(g11, ridge), g.add_scalar(g22, ridge)) } else { (g11, g22) };
    let p = g.mul(g11, g22);
    let q = g.square(g12);
    let det = g.sub(p, q);
    let worst = g.value(det).data().iter().fold(f64::INFINITY, |m, v| m.min(v.f64()));
    if !(worst > DEGENERATE_GRAM) && !(ridge > 0.0 && worst.is_finite()) {
        return Err(Error::Numeric(format!("degenerate 6D rotation in batch (row Gram determinant {worst:e})")));
    }
    let sdet = g.sqrt(det);
    let tr = g.add(g11, g22);
    let two_s = g.scale(sdet, 2.0);
    let t2 = g.add(tr, two_s);
    let t = g.sqrt(t2);
    let denom = g.mul(sdet, t);
    let ca = g.add(g22, sdet);
    let cb = g.add(g11, sdet);
    let a1 = g.mul(ca, a);
    let a2 = g.mul(g12, b);
    let a_num = g.sub(a1, a2);
    let b1 = g.mul(cb, b);
    let b2 = g.mul(g12, a);
    let b_num = g.sub(b1, b2);
    let ra = g.div(a_num, denom);
    let rb = g.div(b_num, denom);
    let rc = cross(g, ra, rb);
    Ok([ra, rb, rc])
}

/// Row-wise cross product of two `[N, 3]` batches.
pub fn cross<T: Scalar>(g: &Graph<T>, a: Var, b: Var) -> Var {
    let col = |v: Var, i: usize| g.narrow(v, 1, i, 1);
    let term = |i: usize, j: usize| {
        let p = g.mul(col(a, i), col(b, j));
        let q = g.mul(col(a, j), col(b, i));
        g.sub(p, q)
    };
    let (x, y, z) = (term(1, 2), term(2, 0), term(0, 1));
    g.concat(&[x, y, z], 1)
}

/// Mean over the batch of `-sqrt((tr(R_predᵀ R_gt) + 1) / 4)`, which equals
/// the negative absolute quaternion cosine.
pub fn rotation_loss<T: Scalar>(g: &Graph<T>, r6: Var, targets: &[Matrix3<f64>]) -> Result<Var> {
    let n = g.shape(r6)[0];
    if targets.len() != n {
        return Err(Error::Data(format!("{} rotation targets for {n} predictions", targets.len())));
    }
    let rows = gram_rows(g, r6, GRAM_RIDGE)?;
    let mut acc = None;
    for (k, row) in rows.into_iter().enumerate() {
        let data: Vec<f64> = targets.iter().flat_map(|m| [m[(k, 0)], m[(k, 1)], m[(k, 2)]]).collect();
        let t = g.constant(Tensor::from_f64(vec![n, 3], &data)?);
        let p = g.mul(row, t);
        let p = g.sum_axis(p, 1, false);
        acc = Some(match acc {
            None => p,
            Some(s) => g.add(s, p),
        });
    }
    let tr = acc.expect("three rows");
    let x = g.add_scalar(tr, 1.0);
    let x = g.scale(x, 0.25);
    let x = g.clamp(x, 1e-12, 1.0);
    let x = g.sqrt(x);
    let x = g.mean(x);
    Ok(g.neg(x))
}
