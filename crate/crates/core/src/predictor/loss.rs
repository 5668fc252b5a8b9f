//! Focal binary cross-entropy against soft targets.

use serde::{Deserialize, Serialize};

pub const P_MIN: f64 = 1e-7;
pub const P_MAX: f64 = 1.0 - 1e-7;

/// Where the focusing factor is applied.
///
/// `Verbatim` multiplies the whole cross-entropy by `(1-p)^γ`.
/// `Standard` uses `(1-p)^γ` on the positive term and `p^γ` on the negative
/// term, so confident negatives are down-weighted rather than confident
/// positives. The two agree whenever `y = 1` or `γ = 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocalForm {
    Verbatim,
    #[default]
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub w_pos: f64,
    pub gamma: f64,
    pub form: FocalForm,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { w_pos: 1.3, gamma: 2.0, form: FocalForm::Standard }
    }
}

pub fn focal_bce(p: f64, y: f64, fp: &FocalParams) -> f64 {
    let p = p.clamp(P_MIN, P_MAX);
    let (g, w) = (fp.gamma, fp.w_pos);
    let pos = -w * y * p.ln();
    let neg = -(1.0 - y) * (1.0 - p).ln();
    match fp.form {
        FocalForm::Verbatim => (1.0 - p).powf(g) * (pos + neg),
        FocalForm::Standard => (1.0 - p).powf(g) * pos + p.powf(g) * neg,
    }
}

/// `d focal_bce / dp`; zero where `p` is clamped.
pub fn focal_bce_grad(p: f64, y: f64, fp: &FocalParams) -> f64 {
    if !(P_MIN..=P_MAX).contains(&p) {
        return 0.0;
    }
    let (g, w) = (fp.gamma, fp.w_pos);
    let q = 1.0 - p;
    let pos = -w * y * p.ln();
    let neg = -(1.0 - y) * q.ln();
    let dpos = -w * y / p;
    let dneg = (1.0 - y) / q;
    // γ·x^(γ-1) written so that γ = 0 never evaluates 0^(-1).
    let dpow = |x: f64| if g == 0.0 { 0.0 } else { g * x.powf(g - 1.0) };
    match fp.form {
        FocalForm::Verbatim => -dpow(q) * (pos + neg) + q.powf(g) * (dpos + dneg),
        FocalForm::Standard => -dpow(q) * pos + q.powf(g) * dpos + dpow(p) * neg + p.powf(g) * dneg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn spot_value_positive_half() {
        let fp = FocalParams::default();
        let expect = 1.3 * 0.25 * 2f64.ln();
        assert_abs_diff_eq!(focal_bce(0.5, 1.0, &fp), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(focal_bce(0.5, 1.0, &FocalParams { form: FocalForm::Verbatim, ..fp }), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 0.2253, epsilon = 1e-4);
    }

    #[test]
    fn confident_and_correct_is_free() {
        let fp = FocalParams::default();
        assert!(focal_bce(1.0, 1.0, &fp) < 1e-12);
        assert!(focal_bce(0.0, 0.0, &fp) < 1e-12);
    }

    #[test]
    fn reduces_to_bce() {
        for form in [FocalForm::Verbatim, FocalForm::Standard] {
            let fp = FocalParams { w_pos: 1.0, gamma: 0.0, form };
            for &(p, y) in &[(0.3, 0.0), (0.8, 1.0), (0.6, 0.25)] {
                let bce = -(y * f64::ln(p) + (1.0 - y) * f64::ln(1.0 - p));
                assert_eq!(focal_bce(p, y, &fp), bce);
            }
        }
    }

    #[test]
    fn gradient_matches_differences() {
        for form in [FocalForm::Verbatim, FocalForm::Standard] {
            for gamma in [0.0, 1.0, 2.0, 2.5] {
                let fp = FocalParams { w_pos: 1.3, gamma, form };
                for &(p, y) in &[(0.3, 0.0), (0.8, 1.0), (0.6, 0.25), (0.05, 0.9)] {
                    let h = 1e-6;
                    let num = (focal_bce(p + h, y, &fp) - focal_bce(p - h, y, &fp)) / (2.0 * h);
                    assert_abs_diff_eq!(focal_bce_grad(p, y, &fp), num, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn standard_form_minimum_tracks_label() {
        let fp = FocalParams::default();
        let argmin = |y: f64| {
            (1..1000).map(|k| k as f64 / 1000.0).min_by(|a, b| focal_bce(*a, y, &fp).total_cmp(&focal_bce(*b, y, &fp))).unwrap()
        };
        assert!(argmin(0.0) < 0.01);
        assert!(argmin(1.0) > 0.99);
        assert!(argmin(0.2) < argmin(0.8));
    }
}
