//! Post-hoc temperature scaling of logits.

use crate::learners::loss::log_softmax;

const LOG_T_MIN: f64 = -4.605_170_185_988_091; // ln 0.01
const LOG_T_MAX: f64 = 4.605_170_185_988_091; // ln 100
const TOL: f64 = 1e-4;

/// Mean negative log-likelihood of labels under `softmax(logits / t)`.
pub fn nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let n = labels.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let s: Vec<f64> = z.iter().map(|v| v / t).collect();
            -log_softmax(&s)[y]
        })
        .sum::<f64>()
        / n
}

/// Temperature minimising validation NLL, searched over `log T` by golden
/// section. Falls back to 1 when the search does not beat the identity.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 1.0;
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        log::warn!("validation set holds a single class; temperature left at 1");
        return 1.0;
    }
    let f = |u: f64| nll(logits, labels, u.exp());
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (LOG_T_MIN, LOG_T_MAX);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let t = ((a + b) / 2.0).exp();
    if nll(logits, labels, t) <= nll(logits, labels, 1.0) + 1e-9 {
        t
    } else {
        1.0
    }
}
