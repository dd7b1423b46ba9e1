//! Numerically stable logistic helpers.

/// Scores are clamped into `[SCORE_EPS, 1 - SCORE_EPS]` before taking logits.
pub const SCORE_EPS: f64 = 1e-6;

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^u)` without overflow.
pub fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// `ln σ(u)`.
pub fn log_sigmoid(u: f64) -> f64 {
    -softplus(-u)
}

pub fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Largest logit magnitude reachable from a clamped score.
pub fn max_logit() -> f64 {
    logit(1.0 - SCORE_EPS)
}

/// Compensated (Neumaier) summation, independent of magnitude ordering.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
