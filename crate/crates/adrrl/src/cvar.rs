//! Value-at-risk and conditional value-at-risk over discrete return
//! distributions, plus a brute-force dual-form oracle.
//!
//! The oracle solves the risk-envelope linear program directly; its agreement
//! with the primal tail integral is what justifies reading guided diffusion as
//! a perturbation with density ratio inside the envelope.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CvarError {
    #[error("empty distribution")]
    Empty,
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("probabilities must be nonnegative and sum to 1, got sum {0}")]
    BadProbabilities(f64),
}

/// Finitely supported return distribution.
#[derive(Debug, Clone)]
pub struct DiscreteReturnDistribution {
    pub outcomes: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl DiscreteReturnDistribution {
    pub fn new(outcomes: Vec<f64>, probabilities: Vec<f64>) -> Result<Self, CvarError> {
        if outcomes.is_empty() || outcomes.len() != probabilities.len() {
            return Err(CvarError::Empty);
        }
        // compensated summation: plain accumulation of 10^5 atoms drifts past
        // the normalization tolerance
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &p in &probabilities {
            let y = p - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        if probabilities.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(CvarError::BadProbabilities(sum));
        }
        Ok(Self {
            outcomes,
            probabilities,
        })
    }

    pub fn uniform(outcomes: Vec<f64>) -> Result<Self, CvarError> {
        if outcomes.is_empty() {
            return Err(CvarError::Empty);
        }
        let p = 1.0 / outcomes.len() as f64;
        let n = outcomes.len();
        Self::new(outcomes, vec![p; n])
    }

    pub fn mean(&self) -> f64 {
        self.outcomes
            .iter()
            .zip(&self.probabilities)
            .map(|(z, p)| z * p)
            .sum()
    }

    /// Indices sorted by outcome, ascending. Ties keep original order so the
    /// greedy dual construction is deterministic.
    fn ascending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.outcomes.len()).collect();
        idx.sort_by(|&a, &b| {
            self.outcomes[a]
                .partial_cmp(&self.outcomes[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        idx
    }
}

fn check_alpha(alpha: f64, allow_one: bool) -> Result<(), CvarError> {
    let ok = alpha > 0.0 && (alpha < 1.0 || (allow_one && alpha <= 1.0));
    if ok {
        Ok(())
    } else {
        Err(CvarError::BadAlpha(alpha))
    }
}

/// The alpha quantile: `max{z : F(z) <= alpha}` with F the right-continuous
/// cdf. When even the smallest outcome has cdf above alpha, that smallest
/// outcome is returned.
pub fn var_alpha(dist: &DiscreteReturnDistribution, alpha: f64) -> Result<f64, CvarError> {
    check_alpha(alpha, false)?;
    let order = dist.ascending();
    let mut cum = 0.0;
    let mut best = dist.outcomes[order[0]];
    let mut found = false;
    for &i in &order {
        cum += dist.probabilities[i];
        if cum <= alpha + 1e-15 {
            best = dist.outcomes[i];
            found = true;
        } else {
            break;
        }
    }
    if !found {
        best = dist.outcomes[order[0]];
    }
    Ok(best)
}

/// Lower-tail expectation `(1/alpha) * int_0^alpha F^{-1}(u) du`, the
/// Rockafellar-Uryasev tail integral. A boundary atom that straddles the
/// alpha mass contributes fractionally.
pub fn cvar_alpha(dist: &DiscreteReturnDistribution, alpha: f64) -> Result<f64, CvarError> {
    check_alpha(alpha, true)?;
    let order = dist.ascending();
    let mut remaining = alpha;
    let mut acc = 0.0;
    for &i in &order {
        if remaining <= 0.0 {
            break;
        }
        let take = dist.probabilities[i].min(remaining);
        acc += take * dist.outcomes[i];
        remaining -= take;
    }
    Ok(acc / alpha)
}

/// Minimizes `sum_k p_k xi_k z_k` over the envelope `0 <= xi_k <= 1/alpha`,
/// `sum_k p_k xi_k = 1` by the greedy construction: weight `1/alpha` on the
/// lowest outcomes until mass alpha is spent, a fractional weight on the
/// boundary atom, zero elsewhere. Returns the optimum and the minimizing xi.
pub fn cvar_dual_oracle(
    dist: &DiscreteReturnDistribution,
    alpha: f64,
) -> Result<(f64, Vec<f64>), CvarError> {
    check_alpha(alpha, true)?;
    let order = dist.ascending();
    let mut xi = vec![0.0; dist.outcomes.len()];
    let mut remaining = alpha;
    for &i in &order {
        if remaining <= 0.0 {
            break;
        }
        let take = dist.probabilities[i].min(remaining);
        if dist.probabilities[i] > 0.0 {
            xi[i] = take / (alpha * dist.probabilities[i]);
        }
        remaining -= take;
    }
    let value = dist
        .outcomes
        .iter()
        .zip(&dist.probabilities)
        .zip(&xi)
        .map(|((z, p), x)| p * x * z)
        .sum();
    Ok((value, xi))
}

/// CVaR of the uniform empirical distribution over raw samples.
pub fn empirical_cvar(samples: &[f64], alpha: f64) -> Result<f64, CvarError> {
    let dist = DiscreteReturnDistribution::uniform(samples.to_vec())?;
    cvar_alpha(&dist, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn uniform(v: &[f64]) -> DiscreteReturnDistribution {
        DiscreteReturnDistribution::uniform(v.to_vec()).unwrap()
    }

    #[test]
    fn var_examples() {
        assert_eq!(var_alpha(&uniform(&[1.0, 2.0, 3.0, 4.0]), 0.5).unwrap(), 2.0);
        assert_eq!(var_alpha(&uniform(&[7.0]), 0.5).unwrap(), 7.0);
        let d = uniform(&(1..=10).map(|x| x as f64).collect::<Vec<_>>());
        assert_eq!(var_alpha(&d, 0.3).unwrap(), 3.0);
        // no outcome with cdf <= alpha falls back to the minimum
        assert_eq!(var_alpha(&uniform(&[5.0, 6.0]), 0.1).unwrap(), 5.0);
    }

    #[test]
    fn cvar_examples() {
        assert_eq!(cvar_alpha(&uniform(&[1.0, 2.0, 3.0, 4.0]), 0.5).unwrap(), 1.5);
        assert_eq!(cvar_alpha(&uniform(&[7.0]), 0.25).unwrap(), 7.0);
        // fractional tail: (1/0.75) * (0.5 * 0 + 0.25 * 10)
        let v = cvar_alpha(&uniform(&[0.0, 10.0]), 0.75).unwrap();
        assert!((v - 10.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dual_oracle_matches_greedy_example() {
        let (value, xi) = cvar_dual_oracle(&uniform(&[1.0, 2.0, 3.0, 4.0]), 0.5).unwrap();
        assert!((value - 1.5).abs() < 1e-12);
        assert_eq!(xi, vec![2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dual_oracle_alpha_one_is_mean() {
        let d = uniform(&[3.0, -1.0, 4.0]);
        let (value, xi) = cvar_dual_oracle(&d, 1.0).unwrap();
        assert!((value - d.mean()).abs() < 1e-12);
        for x in xi {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_matches_primal_on_random_distributions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1_000 {
            let n = rand::Rng::gen_range(&mut rng, 1..12);
            let outcomes: Vec<f64> = (0..n)
                .map(|_| rand::Rng::gen_range(&mut rng, -5.0..5.0))
                .collect();
            let raw: Vec<f64> = (0..n)
                .map(|_| rand::Rng::gen_range(&mut rng, 0.01..1.0))
                .collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            let dist = DiscreteReturnDistribution::new(outcomes, probs).unwrap();
            let alpha = rand::Rng::gen_range(&mut rng, 0.01..1.0);

            let primal = cvar_alpha(&dist, alpha).unwrap();
            let (dual, xi) = cvar_dual_oracle(&dist, alpha).unwrap();
            assert!((primal - dual).abs() < 1e-12);

            let mass: f64 = dist
                .probabilities
                .iter()
                .zip(&xi)
                .map(|(p, x)| p * x)
                .sum();
            assert!((mass - 1.0).abs() < 1e-9);
            for &x in &xi {
                assert!(x >= -1e-15 && x <= 1.0 / alpha + 1e-9);
            }
        }
    }

    #[test]
    fn empirical_cvar_gaussian_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..100_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let v = empirical_cvar(&samples, 0.1).unwrap();
        // -phi(Phi^{-1}(0.1)) / 0.1
        let q = statrs::distribution::ContinuousCDF::inverse_cdf(
            &statrs::distribution::Normal::new(0.0, 1.0).unwrap(),
            0.1,
        );
        let analytic = -(-0.5 * q * q).exp() / ((2.0 * std::f64::consts::PI).sqrt() * 0.1);
        assert!((analytic + 1.755).abs() < 1e-3);
        assert!((v - analytic).abs() < 0.02, "empirical {v} vs {analytic}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            DiscreteReturnDistribution::uniform(vec![]),
            Err(CvarError::Empty)
        ));
        assert!(matches!(
            var_alpha(&uniform(&[1.0]), 0.0),
            Err(CvarError::BadAlpha(_))
        ));
        assert!(matches!(
            DiscreteReturnDistribution::new(vec![1.0, 2.0], vec![0.9, 0.2]),
            Err(CvarError::BadProbabilities(_))
        ));
    }

    fn arb_dist() -> impl Strategy<Value = DiscreteReturnDistribution> {
        (1usize..10).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(0.01f64..1.0, n),
            )
                .prop_map(|(outcomes, raw)| {
                    let s: f64 = raw.iter().sum();
                    let probs = raw.iter().map(|x| x / s).collect();
                    DiscreteReturnDistribution::new(outcomes, probs).unwrap()
                })
        })
    }

    proptest! {
        // the discrete quantile convention max{z : F(z) <= alpha} can sit
        // below the fractional-tail CVaR when alpha falls strictly between
        // atoms, so the ordering is stated against the upper quantile
        // inf{z : F(z) >= alpha}, which dominates both
        #[test]
        fn ordering_cvar_var_mean(dist in arb_dist(), alpha in 0.01f64..0.99) {
            let c = cvar_alpha(&dist, alpha).unwrap();
            let v = var_alpha(&dist, alpha).unwrap();
            let order = {
                let mut idx: Vec<usize> = (0..dist.outcomes.len()).collect();
                idx.sort_by(|&a, &b| dist.outcomes[a].partial_cmp(&dist.outcomes[b]).unwrap());
                idx
            };
            let mut cum = 0.0;
            let mut upper = dist.outcomes[*order.last().unwrap()];
            for &i in &order {
                cum += dist.probabilities[i];
                if cum >= alpha - 1e-15 {
                    upper = dist.outcomes[i];
                    break;
                }
            }
            prop_assert!(c <= upper + 1e-9);
            prop_assert!(v <= upper + 1e-9);
            prop_assert!(c <= dist.mean() + 1e-9);
        }

        #[test]
        fn monotone_in_alpha(dist in arb_dist(), a in 0.01f64..0.5, b in 0.5f64..1.0) {
            let ca = cvar_alpha(&dist, a).unwrap();
            let cb = cvar_alpha(&dist, b).unwrap();
            prop_assert!(ca <= cb + 1e-9);
            let c1 = cvar_alpha(&dist, 1.0).unwrap();
            prop_assert!((c1 - dist.mean()).abs() < 1e-9);
        }

        #[test]
        fn translation_and_homogeneity(
            dist in arb_dist(),
            alpha in 0.01f64..0.99,
            c in -5.0f64..5.0,
            lam in 0.1f64..4.0,
        ) {
            let base = cvar_alpha(&dist, alpha).unwrap();
            let shifted = DiscreteReturnDistribution::new(
                dist.outcomes.iter().map(|z| z + c).collect(),
                dist.probabilities.clone(),
            ).unwrap();
            prop_assert!((cvar_alpha(&shifted, alpha).unwrap() - (base + c)).abs() < 1e-9);
            let scaled = DiscreteReturnDistribution::new(
                dist.outcomes.iter().map(|z| lam * z).collect(),
                dist.probabilities.clone(),
            ).unwrap();
            prop_assert!((cvar_alpha(&scaled, alpha).unwrap() - lam * base).abs() < 1e-9);
        }
    }
}
