//! Class-weighted binary cross-entropy.

/// Loss value and its derivative with respect to the logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BceTerm {
    pub loss: f64,
    pub grad_logit: f64,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `-w [y ln p + (1 - y) ln(1 - p)]` with gradient `w (p - y)`.
pub fn weighted_bce(prob: f64, label: u8, weight: f64) -> BceTerm {
    let y = label as f64;
    let loss = if label == 1 {
        -weight * libm::log(prob)
    } else {
        -weight * libm::log1p(-prob)
    };
    BceTerm {
        loss,
        grad_logit: weight * (prob - y),
    }
}

/// Same loss computed from the logit: `w [softplus(z) - y z]`.
pub fn weighted_bce_logit(logit: f64, label: u8, weight: f64) -> BceTerm {
    let y = label as f64;
    let softplus = if logit > 0.0 {
        logit + libm::log1p(libm::exp(-logit))
    } else {
        libm::log1p(libm::exp(logit))
    };
    BceTerm {
        loss: weight * (softplus - y * logit),
        grad_logit: weight * (sigmoid(logit) - y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    #[test]
    fn closed_forms_at_half() {
        let t = weighted_bce(0.5, 1, 1.0);
        assert!((t.loss - LN_2).abs() < 1e-15);
        assert_eq!(t.grad_logit, -0.5);
        let t = weighted_bce(0.5, 0, 2.0);
        assert!((t.loss - 2.0 * LN_2).abs() < 1e-15);
        assert_eq!(t.grad_logit, 1.0);
    }

    #[test]
    fn logit_form_matches_probability_form() {
        for &z in &[-6.0, -1.3, 0.0, 0.4, 5.0] {
            for y in [0u8, 1] {
                let a = weighted_bce(sigmoid(z), y, 1.7);
                let b = weighted_bce_logit(z, y, 1.7);
                assert!((a.loss - b.loss).abs() < 1e-12);
                assert!((a.grad_logit - b.grad_logit).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_form_is_stable_for_large_logits() {
        let t = weighted_bce_logit(800.0, 0, 1.0);
        assert!((t.loss - 800.0).abs() < 1e-9);
        let t = weighted_bce_logit(-800.0, 0, 1.0);
        assert!(t.loss.is_finite() && t.loss >= 0.0);
    }
}
