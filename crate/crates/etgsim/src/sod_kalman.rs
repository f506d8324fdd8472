//! Send-on-delta event generation and the event-adapted Kalman filter.
//!
//! A [`SodSampler`] fires an event whenever the signal drifts more than
//! `δ` from the last transmitted value. Between events the receiver keeps
//! working with the held value; the [`SodKalmanFilter`] accounts for that
//! by inflating the stale channel's measurement noise by `δ²/3`, the
//! variance of a uniform error on `[−δ, δ]`, in its periodic measurement
//! update, then projecting ahead through `exp(A·T)`.

use crate::linalg::{matrix_exponential, van_loan_qd};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("measurement noise covariance must have positive diagonal (channel {0})")]
    NonPositiveNoise(usize),
    #[error("innovation covariance is singular")]
    SingularInnovation,
    #[error("estimation covariance lost positive semidefiniteness (min eigenvalue {0})")]
    CovarianceNotPsd(f64),
    #[error("channel index {index} out of range for {p} channels")]
    ChannelOutOfRange { index: usize, p: usize },
}

/// Send-on-delta event generator for one scalar signal.
#[derive(Debug, Clone, Copy)]
pub struct SodSampler {
    delta: f64,
    last_sent: f64,
    last_sent_time: f64,
}

impl SodSampler {
    pub fn new(delta: f64, initial_value: f64, initial_time: f64) -> Self {
        Self { delta, last_sent: initial_value, last_sent_time: initial_time }
    }

    /// Event condition: strictly `|current − last_sent| > δ`; equality at
    /// the boundary does not fire.
    pub fn should_send(&self, current: f64) -> bool {
        (current - self.last_sent).abs() > self.delta
    }

    /// Records a transmission, resetting the band around `value`.
    pub fn record_sent(&mut self, value: f64, time: f64) {
        self.last_sent = value;
        self.last_sent_time = time;
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn last_sent(&self) -> f64 {
        self.last_sent
    }

    pub fn last_sent_time(&self) -> f64 {
        self.last_sent_time
    }
}

/// Inflates stale channels of a measurement covariance:
/// `R̄(i,i) = R(i,i) + δ_i²/3` for every channel without fresh data.
pub fn inflate_noise(
    r_cov: &DMatrix<f64>,
    received_mask: &[bool],
    deltas: &DVector<f64>,
) -> DMatrix<f64> {
    let mut r = r_cov.clone();
    for (i, &fresh) in received_mask.iter().enumerate() {
        if !fresh {
            r[(i, i)] += deltas[i] * deltas[i] / 3.0;
        }
    }
    r
}

/// Periodic Kalman filter adapted to send-on-delta measurements.
///
/// Call cycle per period `T`: [`SodKalmanFilter::measurement_update`] with
/// whatever channels arrived, then [`SodKalmanFilter::project_ahead`].
/// Between the two calls the accessors expose the posterior estimate.
#[derive(Debug, Clone)]
pub struct SodKalmanFilter {
    a_mat: DMatrix<f64>,
    c_mat: DMatrix<f64>,
    q_cov: DMatrix<f64>,
    r_cov: DMatrix<f64>,
    period: f64,
    x_hat: DVector<f64>,
    p_cov: DMatrix<f64>,
    y_last: DVector<f64>,
    phi: DMatrix<f64>,
    q_d: DMatrix<f64>,
    deltas: DVector<f64>,
}

impl SodKalmanFilter {
    /// Builds the filter and precomputes `Φ = exp(A·T)` and the
    /// discretized process noise `Q_d` (Van Loan).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a_mat: DMatrix<f64>,
        c_mat: DMatrix<f64>,
        q_cov: DMatrix<f64>,
        r_cov: DMatrix<f64>,
        period: f64,
        deltas: DVector<f64>,
        x0: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self, FilterError> {
        let n = a_mat.nrows();
        let p = c_mat.nrows();
        if a_mat.ncols() != n {
            return Err(FilterError::Dimension("A must be square".into()));
        }
        if c_mat.ncols() != n {
            return Err(FilterError::Dimension(format!(
                "C has {} columns, expected {n}",
                c_mat.ncols()
            )));
        }
        if q_cov.nrows() != n || q_cov.ncols() != n {
            return Err(FilterError::Dimension("Q must be n x n".into()));
        }
        if r_cov.nrows() != p || r_cov.ncols() != p {
            return Err(FilterError::Dimension("R must be p x p".into()));
        }
        if deltas.len() != p {
            return Err(FilterError::Dimension("deltas must have one entry per channel".into()));
        }
        if x0.len() != n || p0.nrows() != n || p0.ncols() != n {
            return Err(FilterError::Dimension("x0/P0 must match the state dimension".into()));
        }
        for i in 0..p {
            if !(r_cov[(i, i)] > 0.0) {
                return Err(FilterError::NonPositiveNoise(i));
            }
        }
        let phi = matrix_exponential(&(&a_mat * period));
        let q_d = van_loan_qd(&a_mat, &q_cov, period);
        let y_last = &c_mat * &x0;
        Ok(Self {
            a_mat,
            c_mat,
            q_cov,
            r_cov,
            period,
            x_hat: x0,
            p_cov: p0,
            y_last,
            phi,
            q_d,
            deltas,
        })
    }

    pub fn x_hat(&self) -> &DVector<f64> {
        &self.x_hat
    }

    pub fn p_cov(&self) -> &DMatrix<f64> {
        &self.p_cov
    }

    pub fn y_last(&self) -> &DVector<f64> {
        &self.y_last
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn q_d(&self) -> &DMatrix<f64> {
        &self.q_d
    }

    pub fn a_mat(&self) -> &DMatrix<f64> {
        &self.a_mat
    }

    /// Measurement update against the held value vector. Channels listed
    /// in `received` get their new value; every other channel keeps its
    /// previous `y_last` and has its noise inflated by `δ²/3`.
    pub fn measurement_update(&mut self, received: &[(usize, f64)]) -> Result<(), FilterError> {
        let p = self.c_mat.nrows();
        let mut fresh = vec![false; p];
        for &(channel, value) in received {
            if channel >= p {
                return Err(FilterError::ChannelOutOfRange { index: channel, p });
            }
            self.y_last[channel] = value;
            fresh[channel] = true;
        }
        let r_bar = inflate_noise(&self.r_cov, &fresh, &self.deltas);

        let c_t = self.c_mat.transpose();
        let innovation_cov = &self.c_mat * &self.p_cov * &c_t + &r_bar;
        let lu = innovation_cov.lu();
        // K = P⁻ C' S^{-1}, computed as solving S' X' = C P⁻' for X.
        let gain = match lu.solve(&(&self.c_mat * self.p_cov.transpose())) {
            Some(x) => x.transpose(),
            None => return Err(FilterError::SingularInnovation),
        };
        let innovation = &self.y_last - &self.c_mat * &self.x_hat;
        self.x_hat += &gain * innovation;
        let n = self.a_mat.nrows();
        let ident = DMatrix::<f64>::identity(n, n);
        let p_new = (&ident - &gain * &self.c_mat) * &self.p_cov;
        self.p_cov = self.enforce_psd(p_new)?;
        Ok(())
    }

    /// Project ahead: `x̂⁻ = Φ x̂`, `P⁻ = Φ P Φ' + Q_d`.
    pub fn project_ahead(&mut self) -> Result<(), FilterError> {
        self.x_hat = &self.phi * &self.x_hat;
        let p_new = &self.phi * &self.p_cov * self.phi.transpose() + &self.q_d;
        self.p_cov = self.enforce_psd(p_new)?;
        Ok(())
    }

    /// Symmetrizes and floors eigenvalues at zero. A materially negative
    /// eigenvalue (below -1e-9 relative to the covariance scale) is a
    /// numerical failure and is reported as an error.
    fn enforce_psd(&self, p_new: DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
        let sym = (&p_new + p_new.transpose()) * 0.5;
        let scale = sym.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        let eig = sym.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if min_eig < -1e-9 * scale {
            return Err(FilterError::CovarianceNotPsd(min_eig));
        }
        if min_eig >= 0.0 {
            return Ok(sym);
        }
        let mut vals = eig.eigenvalues;
        for v in vals.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let recomposed = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        Ok((&recomposed + recomposed.transpose()) * 0.5)
    }
}
