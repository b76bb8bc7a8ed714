//! Log-space helpers shared by the confidence, temperature and backend code.

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x)`.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Log-odds of a probability.
#[cfg(test)]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_tails_do_not_overflow() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn log_sigmoid_matches_direct_form_in_safe_range() {
        for x in [-10.0, -1.0, 0.0, 0.5, 3.0, 12.0] {
            let direct = (1.0 / (1.0 + f64::exp(-x))).ln();
            assert!((log_sigmoid(x) - direct).abs() < 1e-12, "x={x}");
        }
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for p in [0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
    }
}
