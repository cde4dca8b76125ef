//! Browser bindings for three interactive views of the library:
//! how clipping moves the virtual reference, how the closed-form optimal
//! policy changes with beta, and how the three losses respond to the policy.
//!
//! The `*_values` functions are plain Rust so they can be tested natively;
//! the `#[wasm_bindgen]` wrappers only convert errors.

use mrpo::losses::{pair_loss, LossConfig, LossKind};
use mrpo::oracle::{solve_closed_form, FiniteInstance};
use mrpo::prefmath::{
    clip_reference_logprob, log_virtual_reference, ClipConfig, ClipMode, PairRefLogProbs, ReferenceWeights,
};
use mrpo::Result;
use wasm_bindgen::prelude::*;

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn two_weights(alpha0: f64) -> Result<ReferenceWeights> {
    ReferenceWeights::new(vec![alpha0, 1.0 - alpha0])
}

/// Sweep the second reference's log-probability over `[lo, hi]` with the
/// first fixed at `log_ref0`. Returns `3 * n` values laid out as
/// `[clipped ref 1 | virtual reference with clipping | without clipping]`.
pub fn clip_sweep_values(log_ref0: f64, eps: f64, alpha0: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    let weights = two_weights(alpha0)?;
    let xs = linspace(lo, hi, n);
    let mut clipped = Vec::with_capacity(n);
    let mut with_clip = Vec::with_capacity(n);
    let mut without = Vec::with_capacity(n);
    for x in xs {
        let c = clip_reference_logprob(x, log_ref0, eps)?;
        clipped.push(c);
        with_clip.push(log_virtual_reference(&[log_ref0, c], &weights)?);
        without.push(log_virtual_reference(&[log_ref0, x], &weights)?);
    }
    Ok([clipped, with_clip, without].concat())
}

fn normalize(p: &[f64]) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    p.iter().map(|x| x / total).collect()
}

/// Optimal policy over a finite output set for two references (positive
/// weights, normalized here) mixed with weight `alpha0` on the first.
/// Returns `[pi* | normalized virtual reference]`, each `rewards.len()` long.
pub fn optimal_policy_values(
    rewards: &[f64],
    ref_a: &[f64],
    ref_b: &[f64],
    alpha0: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    let refs = vec![normalize(ref_a), normalize(ref_b)];
    let weights = two_weights(alpha0)?;
    let virtual_ref: Vec<f64> = (0..rewards.len())
        .map(|y| {
            let logs = [refs[0][y].ln(), refs[1][y].ln()];
            log_virtual_reference(&logs, &weights).map(f64::exp)
        })
        .collect::<Result<_>>()?;
    let inst = FiniteInstance::new(refs, weights, rewards.to_vec(), beta)?;
    let solution = solve_closed_form(&inst);
    Ok([solution.pi_star, normalize(&virtual_ref)].concat())
}

/// Loss of each method as the policy's chosen log-probability moves by
/// `shift` in `[lo, hi]` away from reference 0 (rejected held at reference
/// 0). Two references, ARWC weights, adaptive clipping with `eps_max`.
/// Returns `3 * n` values: `[dpo | multi_dpo | mrpo]`.
#[allow(clippy::too_many_arguments)]
pub fn loss_curve_values(
    chosen: [f64; 2],
    rejected: [f64; 2],
    beta: f64,
    eps_max: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<f64>> {
    let refs = PairRefLogProbs::new(chosen.to_vec(), rejected.to_vec())?;
    let base = LossConfig {
        beta,
        clip: ClipConfig::new(eps_max, ClipMode::Adaptive)?,
        ..LossConfig::default()
    };
    base.validate()?;
    let xs = linspace(lo, hi, n);
    let mut out = Vec::with_capacity(3 * n);
    for kind in [LossKind::Dpo, LossKind::MultiDpo, LossKind::Mrpo] {
        let config = base.clone().with_kind(kind);
        for &x in &xs {
            out.push(pair_loss((chosen[0] + x, rejected[0]), &refs, &config)?.loss);
        }
    }
    Ok(out)
}

fn js(e: mrpo::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn clip_sweep(log_ref0: f64, eps: f64, alpha0: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, JsError> {
    clip_sweep_values(log_ref0, eps, alpha0, lo, hi, n).map_err(js)
}

#[wasm_bindgen]
pub fn optimal_policy(
    rewards: Vec<f64>,
    ref_a: Vec<f64>,
    ref_b: Vec<f64>,
    alpha0: f64,
    beta: f64,
) -> Result<Vec<f64>, JsError> {
    optimal_policy_values(&rewards, &ref_a, &ref_b, alpha0, beta).map_err(js)
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn loss_curves(
    chosen0: f64,
    rejected0: f64,
    chosen1: f64,
    rejected1: f64,
    beta: f64,
    eps_max: f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<Vec<f64>, JsError> {
    loss_curve_values([chosen0, chosen1], [rejected0, rejected1], beta, eps_max, lo, hi, n).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_sweep_clamps_and_stays_between_references() {
        // ref0 = -2, eps 0.1: the clip window is [-2.2, -1.8].
        let v = clip_sweep_values(-2.0, 0.1, 0.5, -4.0, -1.0, 4).unwrap();
        for (got, want) in v[..4].iter().zip([-2.2, -2.2, -2.0, -1.8]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        // Unclipped harmonic mean at ref1 = -4 with equal weights:
        // -ln(0.5 e^2 + 0.5 e^4).
        let expected = -(0.5 * 2f64.exp() + 0.5 * 4f64.exp()).ln();
        assert!((v[8] - expected).abs() < 1e-12);
        for i in 0..4 {
            let x = -4.0 + i as f64;
            assert!(v[8 + i] >= x.min(-2.0) - 1e-12 && v[8 + i] <= x.max(-2.0) + 1e-12);
        }
    }

    #[test]
    fn optimal_policy_with_identical_references() {
        // Both references uniform over 3 outputs: pi* is softmax(r / beta).
        let r = [0.0, 1.0, 2.0];
        let v = optimal_policy_values(&r, &[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0], 0.3, 1.0).unwrap();
        let z: f64 = r.iter().map(|x| x.exp()).sum();
        for (p, x) in v[..3].iter().zip(r) {
            assert!((p - x.exp() / z).abs() < 1e-12);
        }
        for p in &v[3..] {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_curves_agree_at_identical_references() {
        // Both references equal and the policy at the reference: every loss
        // is ln 2 at shift 0.
        let v = loss_curve_values([-3.0, -3.0], [-4.0, -4.0], 0.1, 0.1, -1.0, 1.0, 3).unwrap();
        for kind in 0..3 {
            assert!((v[kind * 3 + 1] - std::f64::consts::LN_2).abs() < 1e-12);
            assert!(v[kind * 3] > v[kind * 3 + 2]);
        }
    }

    #[test]
    fn invalid_inputs_are_errors() {
        assert!(clip_sweep_values(-1.0, 0.1, 1.5, -2.0, -1.0, 3).is_err());
        assert!(optimal_policy_values(&[0.0, 1.0], &[1.0, 1.0], &[1.0, 1.0], 0.5, 0.0).is_err());
        assert!(loss_curve_values([-1.0, -1.0], [-1.0, -1.0], -0.1, 0.1, 0.0, 1.0, 2).is_err());
    }
}
