//! Dense linear-algebra helpers shared by the estimator and the plant:
//! matrix exponential, zero-order-hold discretization and Van Loan's
//! method for discretizing process noise.

use nalgebra::DMatrix;

/// Maximum 1-norm for which the degree-13 Padé approximant is accurate
/// without scaling (Higham 2005).
const PADE13_THETA: f64 = 5.371_920_351_148_152;

const PADE13_COEFFS: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

fn one_norm(m: &DMatrix<f64>) -> f64 {
    let mut max = 0.0_f64;
    for j in 0..m.ncols() {
        let mut s = 0.0;
        for i in 0..m.nrows() {
            s += m[(i, j)].abs();
        }
        if s > max {
            max = s;
        }
    }
    max
}

/// Matrix exponential by scaling-and-squaring with a degree-13 Padé kernel.
///
/// Relative error is well below 1e-9 for well-conditioned inputs; inputs
/// must be square with finite entries.
pub fn matrix_exponential(m: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(m.nrows(), m.ncols(), "matrix_exponential requires a square matrix");
    assert!(m.iter().all(|x| x.is_finite()), "matrix_exponential requires finite entries");

    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }

    let norm = one_norm(m);
    let squarings = if norm > PADE13_THETA {
        (norm / PADE13_THETA).log2().ceil() as u32
    } else {
        0
    };
    let a = m / 2f64.powi(squarings as i32);

    let b = &PADE13_COEFFS;
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];

    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut exp = lhs
        .lu()
        .solve(&rhs)
        .expect("Padé denominator is singular; input matrix is too ill-conditioned");

    for _ in 0..squarings {
        exp = &exp * &exp;
    }
    exp
}

/// Exact zero-order-hold discretization of `ẋ = A x + B u` over one step.
///
/// Returns `(Φ, Γ)` with `x[k+1] = Φ x[k] + Γ u[k]`, computed from the
/// exponential of the augmented matrix `[[A, B], [0, 0]]·dt`, which avoids
/// inverting `A`.
pub fn zoh_discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    assert_eq!(a.nrows(), a.ncols());
    assert_eq!(a.nrows(), b.nrows());
    assert!(dt > 0.0, "zoh_discretize requires dt > 0");

    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    let e = matrix_exponential(&(aug * dt));
    let phi = e.view((0, 0), (n, n)).into_owned();
    let gamma = e.view((0, n), (n, m)).into_owned();
    (phi, gamma)
}

/// Discretized process-noise covariance `Q_d = ∫₀ᵀ e^{Aτ} Q e^{A'τ} dτ`
/// by Van Loan's method.
///
/// Builds `M = [[-A, Q], [0, A']]·T`, exponentiates, and recovers
/// `Q_d = F22' · F12` from the upper blocks.
pub fn van_loan_qd(a: &DMatrix<f64>, q: &DMatrix<f64>, period: f64) -> DMatrix<f64> {
    assert_eq!(a.nrows(), a.ncols());
    assert_eq!(q.nrows(), a.nrows());
    assert_eq!(q.ncols(), a.ncols());

    let n = a.nrows();
    if q.iter().all(|x| *x == 0.0) {
        return DMatrix::zeros(n, n);
    }
    let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-a));
    m.view_mut((0, n), (n, n)).copy_from(q);
    m.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let e = matrix_exponential(&(m * period));
    let f12 = e.view((0, n), (n, n)).into_owned();
    let f22 = e.view((n, n), (n, n)).into_owned();
    let qd = f22.transpose() * f12;
    // Symmetrize against roundoff.
    (&qd + qd.transpose()) * 0.5
}
