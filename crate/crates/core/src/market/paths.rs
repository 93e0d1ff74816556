use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MarketModel, ReturnLaw, State};
use crate::error::{MmvError, Result};
use crate::seed;

/// One realization `(s_0, r_1, s_1, ..., r_T, s_T)` of the market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketPath {
    /// `s_0..s_T`.
    pub states: Vec<State>,
    /// `r_1..r_T`; `returns[t]` is realized over `(t, t+1]`.
    pub returns: Vec<Vec<f64>>,
    /// Probability weight: `1/n` for Monte Carlo, the path probability
    /// for exact enumeration.
    pub weight: f64,
}

impl MarketPath {
    pub fn horizon(&self) -> usize {
        self.returns.len()
    }
}

impl MarketModel {
    /// `n_paths` independent paths from `s0`; path `p` uses its own seed
    /// derived from `(seed, p)`, so results do not depend on scheduling.
    pub fn simulate_paths(
        &self,
        s0: &State,
        horizon: usize,
        n_paths: usize,
        seed: u64,
    ) -> Result<Vec<MarketPath>> {
        self.validate_state(s0)?;
        if n_paths == 0 {
            return Err(MmvError::Domain("path count must be at least 1".into()));
        }
        let weight = 1.0 / n_paths as f64;
        Ok((0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = seed::rng(seed::child_seed(seed, &[seed::tag::PATH, p as u64]));
                let mut states = Vec::with_capacity(horizon + 1);
                let mut returns = Vec::with_capacity(horizon);
                states.push(s0.clone());
                for _ in 0..horizon {
                    let (s, r) = self.step(states.last().unwrap(), &mut rng);
                    states.push(s);
                    returns.push(r);
                }
                MarketPath {
                    states,
                    returns,
                    weight,
                }
            })
            .collect())
    }

    /// Every path of a regime-switching market whose regimes all carry
    /// discrete return laws, with exact probabilities. Fails when the path
    /// count would exceed `cap`.
    pub fn enumerate_paths(&self, s0: &State, horizon: usize, cap: usize) -> Result<Vec<MarketPath>> {
        self.validate_state(s0)?;
        let MarketModel::Markov(m) = self else {
            return Err(MmvError::Unsupported(
                "path enumeration needs a regime-switching market".into(),
            ));
        };
        let mut branches: Vec<Vec<(usize, Vec<f64>, f64)>> = Vec::with_capacity(m.n_states());
        for i in 0..m.n_states() {
            let mut out = Vec::new();
            for j in 0..m.n_states() {
                let p = m.transition()[(i, j)];
                if p == 0.0 {
                    continue;
                }
                match m.law(j) {
                    ReturnLaw::Discrete { outcomes, probs } => {
                        for (o, q) in outcomes.iter().zip(probs) {
                            if *q > 0.0 {
                                out.push((j, o.iter().cloned().collect(), p * q));
                            }
                        }
                    }
                    ReturnLaw::Gaussian { .. } => {
                        return Err(MmvError::Unsupported(
                            "path enumeration needs discrete return laws".into(),
                        ))
                    }
                }
            }
            branches.push(out);
        }
        let mut paths = vec![MarketPath {
            states: vec![s0.clone()],
            returns: Vec::new(),
            weight: 1.0,
        }];
        for _ in 0..horizon {
            let mut next = Vec::new();
            for path in &paths {
                let i = path.states.last().and_then(State::regime).expect("regime state");
                for (j, r, p) in &branches[i] {
                    if next.len() >= cap {
                        return Err(MmvError::Domain(format!(
                            "path enumeration exceeds the cap of {cap} paths"
                        )));
                    }
                    let mut np = path.clone();
                    np.states.push(State::Regime(*j));
                    np.returns.push(r.clone());
                    np.weight *= p;
                    next.push(np);
                }
            }
            paths = next;
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{MarkovChainModel, RiskFree};
    use nalgebra::DVector;

    #[test]
    fn enumeration_weights_sum_to_one() {
        let law = ReturnLaw::discrete(
            vec![DVector::from_vec(vec![0.3]), DVector::from_vec(vec![-0.1])],
            vec![0.5, 0.5],
        )
        .unwrap();
        let m = MarketModel::Markov(MarkovChainModel::iid(law, RiskFree::Constant(1.0)).unwrap());
        let paths = m.enumerate_paths(&State::Regime(0), 3, 100).unwrap();
        assert_eq!(paths.len(), 8);
        assert!((paths.iter().map(|p| p.weight).sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
