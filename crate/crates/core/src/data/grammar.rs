use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// First-order Markov chain over `symbols` ids with a uniform start.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    transitions: Vec<Vec<f64>>,
}

// exp(SHARPNESS * u) row weights: a learnable but not degenerate chain
const SHARPNESS: f64 = 4.0;
// extra log-weight the domain chain puts on the upper half of the alphabet
const DOMAIN_BIAS: f64 = 2.0;

fn normalise(mut row: Vec<f64>) -> Vec<f64> {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
    row
}

impl Grammar {
    fn random(symbols: usize, seed: u64, bias: impl Fn(usize) -> f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let transitions = (0..symbols)
            .map(|_| {
                normalise(
                    (0..symbols)
                        .map(|j| (SHARPNESS * rng.gen::<f64>() + bias(j)).exp())
                        .collect(),
                )
            })
            .collect();
        Grammar { transitions }
    }

    /// Every transition has positive probability.
    pub fn general(symbols: usize, seed: u64) -> Self {
        Grammar::random(symbols, seed, |_| 0.0)
    }

    /// `(1 − skew)·general + skew·D`, where `D` is an independent chain that
    /// leans towards the upper half of the alphabet.
    pub fn domain(general: &Grammar, seed: u64, skew: f64) -> Result<Self> {
        if !(skew > 0.0 && skew <= 1.0) {
            return Err(Error::Config(format!("skew {skew} outside (0, 1]")));
        }
        let v = general.symbols();
        let specific = Grammar::random(v, seed, |j| if j >= v / 2 { DOMAIN_BIAS } else { 0.0 });
        Ok(general.mix(&specific, skew))
    }

    pub fn mix(&self, other: &Grammar, weight: f64) -> Self {
        let transitions = self
            .transitions
            .iter()
            .zip(&other.transitions)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (1.0 - weight) * x + weight * y).collect())
            .collect();
        Grammar { transitions }
    }

    pub fn symbols(&self) -> usize {
        self.transitions.len()
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from][to]
    }

    fn draw(row: &[f64], u: f64) -> usize {
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.len() - 1
    }

    /// Samples `len` symbols, continuing from `prev` if given.
    pub fn sample(&self, rng: &mut impl Rng, len: usize, prev: Option<usize>) -> Vec<usize> {
        let v = self.symbols();
        let mut out = Vec::with_capacity(len);
        let mut last = prev;
        for _ in 0..len {
            let u: f64 = rng.gen();
            let next = match last {
                Some(p) => Grammar::draw(&self.transitions[p], u),
                None => ((u * v as f64) as usize).min(v - 1),
            };
            out.push(next);
            last = Some(next);
        }
        out
    }

    /// `log P(continuation | prev)` under the chain.
    pub fn log_prob(&self, prev: usize, continuation: &[usize]) -> f64 {
        let mut last = prev;
        let mut lp = 0.0;
        for &c in continuation {
            lp += self.transitions[last][c].ln();
            last = c;
        }
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_distributions() {
        let g = Grammar::general(6, 1);
        for from in 0..6 {
            let s: f64 = (0..6).map(|to| g.transition(from, to)).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((0..6).all(|to| g.transition(from, to) > 0.0));
        }
        let d = Grammar::domain(&g, 2, 0.5).unwrap();
        let s: f64 = (0..6).map(|to| d.transition(3, to)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skew_bounds() {
        let g = Grammar::general(4, 1);
        assert!(Grammar::domain(&g, 2, 0.0).is_err());
        assert!(Grammar::domain(&g, 2, 1.5).is_err());
        assert!(Grammar::domain(&g, 2, 1.0).is_ok());
    }
}
