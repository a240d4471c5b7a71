//! Step-size, smoothness and consensus constants.

use crate::error::{domain, Result};

fn check_gammas(gammas: &[f64]) -> Result<()> {
    if gammas.is_empty() {
        return Err(domain("at least one discount factor required"));
    }
    match gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
        Some(g) => Err(domain(format!("discount {g} not in (0,1)"))),
        None => Ok(()),
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("lambda must be nonnegative, got {lambda}")))
    }
}

/// `sum_i (8/(1-gamma_i)^3 + 2 lambda/|S|)`, the smoothness constant of the
/// summed regularized objective.
pub fn smoothness(gammas: &[f64], lambda: f64, num_union_states: usize) -> Result<f64> {
    check_gammas(gammas)?;
    check_lambda(lambda)?;
    let s = num_union_states as f64;
    Ok(gammas.iter().map(|g| 8.0 / (1.0 - g).powi(3) + 2.0 * lambda / s).sum())
}

/// `D = 2 N lambda + sum_i 1/(1-gamma_i)^2`.
pub fn gradient_bound(gammas: &[f64], lambda: f64) -> Result<f64> {
    check_gammas(gammas)?;
    check_lambda(lambda)?;
    let n = gammas.len() as f64;
    Ok(2.0 * n * lambda + gammas.iter().map(|g| 1.0 / (1.0 - g).powi(2)).sum::<f64>())
}

/// Per-task l1 bound on the regularized gradient for [0,1] rewards.
pub fn task_gradient_l1_bound(gamma: f64, lambda: f64) -> Result<f64> {
    check_gammas(&[gamma])?;
    check_lambda(lambda)?;
    Ok(1.0 / (1.0 - gamma).powi(2) + 2.0 * lambda)
}

/// Open upper end of the constant step size guaranteeing descent of the
/// Lyapunov function: `(1+sigma_N) / (sum 16/(1-gamma_i)^3 + 4 N lambda/|S|)`.
pub fn step_size_bound_thm1(gammas: &[f64], lambda: f64, num_union_states: usize, sigma_n: f64) -> Result<f64> {
    check_gammas(gammas)?;
    check_lambda(lambda)?;
    let n = gammas.len() as f64;
    let s = num_union_states as f64;
    let denom: f64 = gammas.iter().map(|g| 16.0 / (1.0 - g).powi(3)).sum::<f64>() + 4.0 * n * lambda / s;
    Ok((1.0 + sigma_n) / denom)
}

/// Step size for the global-optimality guarantee:
/// `1/beta * min{1+sigma_N, lambda N (1-sigma_2) / (4|S||A|(2 N lambda + sum 1/(1-gamma_i)^2))}`.
pub fn step_size_bound_thm2(
    gammas: &[f64],
    lambda: f64,
    num_union_states: usize,
    num_actions: usize,
    sigma2: f64,
    sigma_n: f64,
) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(domain("lambda must be positive for this bound"));
    }
    if !(sigma2 < 1.0) {
        return Err(domain(format!("sigma2 = {sigma2} leaves no spectral gap")));
    }
    let beta = smoothness(gammas, lambda, num_union_states)?;
    let n = gammas.len() as f64;
    let sa = (num_union_states * num_actions) as f64;
    let d = gradient_bound(gammas, lambda)?;
    let consensus = lambda * n * (1.0 - sigma2) / (4.0 * sa * d);
    Ok((1.0 + sigma_n).min(consensus) / beta)
}

/// `epsilon / (2 N coeff)`.
pub fn lambda_for_epsilon(epsilon: f64, num_agents: usize, mismatch_coeff: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !(mismatch_coeff > 0.0) || num_agents == 0 {
        return Err(domain("epsilon, agent count and mismatch coefficient must be positive"));
    }
    Ok(epsilon / (2.0 * num_agents as f64 * mismatch_coeff))
}

/// `alpha D / (1 - sigma_2)`.
pub fn consensus_error_bound(alpha: f64, gammas: &[f64], lambda: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 < 1.0) {
        return Err(domain(format!("sigma2 = {sigma2} leaves no spectral gap")));
    }
    Ok(alpha * gradient_bound(gammas, lambda)? / (1.0 - sigma2))
}

/// Explicit envelope for `min_{k<K} ||(1/N) sum_j grad V_j||^2`:
/// `16/(K alpha) sum_j (1/(1-gamma_j) + lambda RE0) + 16 lambda^2/N
///  + sum_j 512 D^2 alpha^2 / (N (1-sigma_2)^2 (1-gamma_j)^6)`.
pub fn rate_envelope(iterations: usize, alpha: f64, gammas: &[f64], lambda: f64, re0: f64, sigma2: f64) -> Result<f64> {
    if iterations == 0 || !(alpha > 0.0) {
        return Err(domain("need K >= 1 and alpha > 0"));
    }
    if !(sigma2 < 1.0) {
        return Err(domain(format!("sigma2 = {sigma2} leaves no spectral gap")));
    }
    let d = gradient_bound(gammas, lambda)?;
    let n = gammas.len() as f64;
    let k = iterations as f64;
    let optimization: f64 = gammas.iter().map(|g| 1.0 / (1.0 - g) + lambda * re0).sum::<f64>() * 16.0 / (k * alpha);
    let regularization = 16.0 * lambda * lambda / n;
    let consensus: f64 = gammas
        .iter()
        .map(|g| 512.0 * d * d * alpha * alpha / (n * (1.0 - sigma2).powi(2) * (1.0 - g).powi(6)))
        .sum();
    Ok(optimization + regularization + consensus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thm1_examples() {
        let b = step_size_bound_thm1(&[0.9], 0.0, 5, 1.0).unwrap();
        assert!((b - 1.25e-4).abs() < 1e-18);
        let b = step_size_bound_thm1(&[0.9, 0.5], 0.0, 5, 0.0).unwrap();
        assert!((b - 1.0 / 16128.0).abs() < 1e-18);
        assert!((b - 6.2004e-5).abs() < 1e-9);
        let mut last = f64::INFINITY;
        for lambda in [0.0, 1.0, 10.0, 1e3, 1e6] {
            let b = step_size_bound_thm1(&[0.9], lambda, 5, 1.0).unwrap();
            assert!(b < last);
            last = b;
        }
    }

    #[test]
    fn thm2_example() {
        let b = step_size_bound_thm2(&[0.9], 1.0, 5, 2, 0.0, 1.0).unwrap();
        let expected = (1.0 / (40.0 * 102.0)) / 8000.4;
        assert!((b - expected).abs() < 1e-20);
        assert!((b - 3.0635e-8).abs() < 1e-12);
        assert!(step_size_bound_thm2(&[0.9], 0.0, 5, 2, 0.0, 1.0).is_err());
        let wide = step_size_bound_thm2(&[0.9], 1.0, 5, 4, 0.0, 1.0).unwrap();
        assert!((wide / b - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lambda_and_consensus_examples() {
        assert!((lambda_for_epsilon(0.1, 2, 10.0).unwrap() - 0.0025).abs() < 1e-18);
        assert!((lambda_for_epsilon(0.1, 2, 0.25).unwrap() - 0.1).abs() < 1e-16);
        assert!(lambda_for_epsilon(0.0, 2, 1.0).is_err());
        let b = consensus_error_bound(1e-4, &[0.9, 0.9], 0.0, 0.5).unwrap();
        assert!((b - 0.04).abs() < 1e-15);
        assert_eq!(consensus_error_bound(0.0, &[0.9], 0.1, 0.5).unwrap(), 0.0);
    }
}
