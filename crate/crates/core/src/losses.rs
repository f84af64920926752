//! Generator and student losses for data-free knowledge fusion, with their
//! analytic gradients (verified against central finite differences in the
//! gradcheck suite).
//!
//! Conventions:
//! - probabilities are clamped to >= 1e-12 inside logs, nowhere else;
//! - temperature is fixed at 1 (no knob);
//! - pseudo-label argmax ties resolve to the lowest class index and the
//!   label is detached (never differentiated through).

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenLossWeights {
    /// weight on the pseudo-label cross-entropy term
    pub lambda1: f64,
    /// weight on the activation term
    pub lambda2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    /// weight on the KL fusion term in the student objective
    pub gamma: f64,
}

/// Value breakdown of the generator objective, for logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenLossParts {
    pub ie: f64,
    pub ce: f64,
    pub act: f64,
    pub total: f64,
}

fn ln_clamped(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

/// Row-wise softmax with max-shift; rows sum to 1 and never overflow.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log-softmax (numerically stable log of `softmax`).
pub fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Row argmax; ties resolve to the lowest index.
pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut bv = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn one_hot(labels: &[usize], c: usize) -> Array2<f64> {
    let mut oh = Array2::zeros((labels.len(), c));
    for (i, &y) in labels.iter().enumerate() {
        oh[(i, y)] = 1.0;
    }
    oh
}

/// Pseudo-label cross-entropy of the teacher's own predictions:
/// −(1/n) Σ_i log P[i, ŷ_i], ŷ_i = argmax_c P[i, c] (detached).
pub fn loss_gen_ce(p: &Array2<f64>) -> f64 {
    let n = p.nrows() as f64;
    let labels = argmax_rows(p);
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        acc -= ln_clamped(p[(i, y)]);
    }
    acc / n
}

/// Information-entropy term on the batch-mean distribution:
/// Σ_c p̄_c log p̄_c with p̄ the column mean (note: this is −H(p̄), minimized
/// at the uniform mean).
pub fn loss_gen_ie(p: &Array2<f64>) -> f64 {
    let pbar = p.mean_axis(Axis(0)).expect("non-empty batch");
    pbar.iter()
        .map(|&v| if v > 0.0 { v * ln_clamped(v) } else { 0.0 })
        .sum()
}

/// Activation term: −(1/n) Σ_i ‖F_i‖₁.
pub fn loss_gen_act(f: &Array2<f64>) -> f64 {
    let n = f.nrows() as f64;
    -f.iter().map(|v| v.abs()).sum::<f64>() / n
}

/// L_G = L_IE + λ1·L_CE + λ2·L_A over teacher probabilities and features.
pub fn loss_gen_total(p: &Array2<f64>, f: &Array2<f64>, gw: &GenLossWeights) -> GenLossParts {
    let ie = loss_gen_ie(p);
    let ce = loss_gen_ce(p);
    let act = loss_gen_act(f);
    GenLossParts {
        ie,
        ce,
        act,
        total: ie + gw.lambda1 * ce + gw.lambda2 * act,
    }
}

/// Gradient of L_G with respect to the teacher *logits* and features, with
/// P = softmax(teacher_logits). Returns (dL/dlogits, dL/dfeatures, parts).
///
/// Derivation: dL/dP chains through the softmax Jacobian as
/// dL/dl(i,c) = P(i,c)·(g(i,c) − Σ_c' g(i,c')·P(i,c')) with g = dL/dP.
/// The CE term collapses to (λ1/n)(P − onehot(ŷ)).
pub fn grad_gen_total(
    teacher_logits: &Array2<f64>,
    features: &Array2<f64>,
    gw: &GenLossWeights,
) -> (Array2<f64>, Array2<f64>, GenLossParts) {
    let p = softmax(teacher_logits);
    let (n, c) = p.dim();
    let nf = n as f64;
    let parts = loss_gen_total(&p, features, gw);

    // IE contribution via dL/dP[i,c] = (1/n)(log p̄_c + 1), then chain.
    let pbar = p.mean_axis(Axis(0)).expect("non-empty batch");
    let g_row: Array1<f64> = pbar.mapv(|v| (ln_clamped(v) + 1.0) / nf);
    let mut dlogits = Array2::zeros((n, c));
    for i in 0..n {
        let dot: f64 = (0..c).map(|j| g_row[j] * p[(i, j)]).sum();
        for j in 0..c {
            dlogits[(i, j)] = p[(i, j)] * (g_row[j] - dot);
        }
    }

    // CE contribution: (λ1/n)(P − onehot(ŷ)).
    let labels = argmax_rows(&p);
    let oh = one_hot(&labels, c);
    dlogits = dlogits + (gw.lambda1 / nf) * (&p - &oh);

    // Activation contribution: −(λ2/n)·sign(F).
    let dfeat = features.mapv(|v| -gw.lambda2 / nf * v.signum());

    (dlogits, dfeat, parts)
}

/// Mean KL(softmax(teacher) ‖ softmax(student)) over the batch. The teacher
/// side is detached: there is no gradient path back to it.
pub fn loss_kd_kl(teacher_logits: &Array2<f64>, student_logits: &Array2<f64>) -> f64 {
    let lp_t = log_softmax(teacher_logits);
    let lp_s = log_softmax(student_logits);
    let p_t = lp_t.mapv(f64::exp);
    let n = teacher_logits.nrows() as f64;
    let mut acc = 0.0;
    for ((&pt, &lt), &ls) in p_t.iter().zip(lp_t.iter()).zip(lp_s.iter()) {
        if pt > 0.0 {
            acc += pt * (lt - ls);
        }
    }
    acc / n
}

/// Gradient of `loss_kd_kl` w.r.t. the student logits: (1/n)(pS − pT).
pub fn grad_kd_kl_student(
    teacher_logits: &Array2<f64>,
    student_logits: &Array2<f64>,
) -> Array2<f64> {
    let p_t = softmax(teacher_logits);
    let p_s = softmax(student_logits);
    let n = teacher_logits.nrows() as f64;
    (p_s - p_t) / n
}

/// Mean cross-entropy of student logits against integer labels.
pub fn loss_student_ce(student_logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, c) = student_logits.dim();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "labels len {} != batch {}",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::config(format!("label {bad} out of range for C={c}")));
    }
    let lp = log_softmax(student_logits);
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        acc -= lp[(i, y)];
    }
    Ok(acc / n as f64)
}

/// Gradient of `loss_student_ce` w.r.t. the logits: (1/n)(pS − onehot(y)).
pub fn grad_student_ce(student_logits: &Array2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    let (n, c) = student_logits.dim();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "labels len {} != batch {}",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::config(format!("label {bad} out of range for C={c}")));
    }
    let p = softmax(student_logits);
    let oh = one_hot(labels, c);
    Ok((p - oh) / n as f64)
}

/// L_S = L_CE + γ·L_KL.
pub fn loss_student_total(ce: f64, kl: f64, fw: &FusionWeights) -> f64 {
    ce + fw.gamma * kl
}
