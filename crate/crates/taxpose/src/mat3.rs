//! Small dense 3-vector / 3x3-matrix helpers shared by the solver, the
//! model and the symmetry code. Generic over [`Real`] so the same routines
//! run on plain scalars and on tape variables.

use crate::scalar::{Real, Scalar, Svd3Parts};

/// Row-major 3x3 matrix.
pub type Mat3<T> = [[T; 3]; 3];
/// 3-vector.
pub type V3<T> = [T; 3];

pub fn v_add<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn v_sub<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn v_scale<T: Real>(s: T, a: V3<T>) -> V3<T> {
    [s * a[0], s * a[1], s * a[2]]
}

pub fn v_dot<T: Real>(a: V3<T>, b: V3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v_cross<T: Real>(a: V3<T>, b: V3<T>) -> V3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn v_norm_sq<T: Real>(a: V3<T>) -> T {
    v_dot(a, a)
}

pub fn v_norm<T: Real>(a: V3<T>) -> T {
    v_norm_sq(a).sqrt()
}

pub fn m_identity<T: Real>(ctx: T::Ctx) -> Mat3<T> {
    let o = T::lit(ctx, 1.0);
    let z = T::lit(ctx, 0.0);
    [[o, z, z], [z, o, z], [z, z, o]]
}

pub fn m_transpose<T: Real>(a: &Mat3<T>) -> Mat3<T> {
    [
        [a[0][0], a[1][0], a[2][0]],
        [a[0][1], a[1][1], a[2][1]],
        [a[0][2], a[1][2], a[2][2]],
    ]
}

pub fn m_mul<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = *a;
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

pub fn m_mul_vec<T: Real>(a: &Mat3<T>, v: V3<T>) -> V3<T> {
    [v_dot(a[0], v), v_dot(a[1], v), v_dot(a[2], v)]
}

/// `a^T * v`, i.e. multiplication by the transpose without forming it.
pub fn m_tmul_vec<T: Real>(a: &Mat3<T>, v: V3<T>) -> V3<T> {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

pub fn m_det<T: Real>(a: &Mat3<T>) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn m_trace<T: Real>(a: &Mat3<T>) -> T {
    a[0][0] + a[1][1] + a[2][2]
}

/// Eigendecomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the returned matrix.
pub fn jacobi_eigen_sym3<S: Scalar>(m: &Mat3<S>) -> ([S; 3], Mat3<S>) {
    let mut a = *m;
    let mut v: Mat3<S> = m_identity(());

    let norm_sq = {
        let mut n = S::zero();
        for r in 0..3 {
            for c in 0..3 {
                n = n + a[r][c] * a[r][c];
            }
        }
        n
    };
    let eps = S::epsilon();
    let stop = norm_sq * eps * eps;

    for _sweep in 0..50 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off <= stop {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == S::zero() {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (S::of(2.0) * a[p][q]);
            let t = {
                let denom = theta.abs() + (theta * theta + S::one()).sqrt();
                let t = S::one() / denom;
                if theta < S::zero() {
                    -t
                } else {
                    t
                }
            };
            let c = S::one() / (t * t + S::one()).sqrt();
            let s = t * c;

            // A <- J^T A J with the Givens rotation in the (p, q) plane.
            let app = a[p][p];
            let aqq = a[q][q];
            let apq = a[p][q];
            a[p][p] = app - t * apq;
            a[q][q] = aqq + t * apq;
            a[p][q] = S::zero();
            a[q][p] = S::zero();
            let r = 3 - p - q; // the remaining index
            let arp = a[r][p];
            let arq = a[r][q];
            a[r][p] = c * arp - s * arq;
            a[p][r] = a[r][p];
            a[r][q] = s * arp + c * arq;
            a[q][r] = a[r][q];

            for row in 0..3 {
                let vp = v[row][p];
                let vq = v[row][q];
                v[row][p] = c * vp - s * vq;
                v[row][q] = s * vp + c * vq;
            }
        }
    }

    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| {
        a[j][j]
            .partial_cmp(&a[i][i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let evals = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let mut evecs: Mat3<S> = m_identity(());
    for (k, &src) in order.iter().enumerate() {
        for row in 0..3 {
            evecs[row][k] = v[row][src];
        }
    }
    (evals, evecs)
}

fn column<S: Scalar>(m: &Mat3<S>, c: usize) -> V3<S> {
    [m[0][c], m[1][c], m[2][c]]
}

fn set_column<S: Scalar>(m: &mut Mat3<S>, c: usize, v: V3<S>) {
    m[0][c] = v[0];
    m[1][c] = v[1];
    m[2][c] = v[2];
}

/// Any unit vector orthogonal to `u` (assumed unit), chosen deterministically.
fn orthogonal_unit<S: Scalar>(u: V3<S>) -> V3<S> {
    // Cross with the axis least aligned with u.
    let ax = u[0].abs();
    let ay = u[1].abs();
    let az = u[2].abs();
    let e: V3<S> = if ax <= ay && ax <= az {
        [S::one(), S::zero(), S::zero()]
    } else if ay <= az {
        [S::zero(), S::one(), S::zero()]
    } else {
        [S::zero(), S::zero(), S::one()]
    };
    let w = v_cross(u, e);
    v_scale(S::one() / v_norm(w), w)
}

/// Full SVD of a 3x3 matrix via the eigendecomposition of `m^T m`
/// (two-sided Jacobi), with left vectors recovered as `m v_i / sigma_i`
/// and rank-deficient columns completed deterministically.
pub fn svd3_values<S: Scalar>(m: &Mat3<S>) -> Svd3Parts<S> {
    let ata = m_mul(&m_transpose(m), m);
    let (_evals, v) = jacobi_eigen_sym3(&ata);

    let mut cols: Vec<(S, V3<S>, V3<S>)> = (0..3)
        .map(|i| {
            let vi = column(&v, i);
            let w = m_mul_vec(m, vi);
            (v_norm(w), w, vi)
        })
        .collect();
    // Eigenvalue ordering already puts sigma descending up to rounding.
    cols.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let sigma = [cols[0].0, cols[1].0, cols[2].0];
    let tol = sigma[0] * S::of(1e-13);

    let mut u: Mat3<S> = m_identity(());
    let mut v_sorted: Mat3<S> = m_identity(());
    let mut u_cols: Vec<V3<S>> = Vec::with_capacity(3);
    for (i, (s, w, vi)) in cols.iter().enumerate() {
        set_column(&mut v_sorted, i, *vi);
        let ui = if *s > tol && *s > S::zero() {
            let mut ui = v_scale(S::one() / *s, *w);
            // Re-orthogonalize against earlier columns; squared eigenvalue
            // clustering can leak a small overlap.
            for prev in &u_cols {
                let d = v_dot(ui, *prev);
                ui = v_sub(ui, v_scale(d, *prev));
            }
            let n = v_norm(ui);
            if n > S::of(0.5) {
                v_scale(S::one() / n, ui)
            } else {
                complete_column(&u_cols, i)
            }
        } else {
            complete_column(&u_cols, i)
        };
        u_cols.push(ui);
        set_column(&mut u, i, ui);
    }

    Svd3Parts {
        u,
        sigma,
        v: v_sorted,
    }
}

fn complete_column<S: Scalar>(u_cols: &[V3<S>], i: usize) -> V3<S> {
    match i {
        0 => [S::one(), S::zero(), S::zero()],
        1 => orthogonal_unit(u_cols[0]),
        _ => v_cross(u_cols[0], u_cols[1]),
    }
}
