//! Exhaustive enumeration of ordered K-tuples drawn i.i.d. from a finite
//! distribution. This is what turns sampled losses into exact expectations.

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// Largest number of tuples any enumeration will visit.
pub const MAX_TUPLES: u128 = 1_000_000;

/// Number of ordered `k`-tuples over `n` items, rejecting counts above
/// [`MAX_TUPLES`].
pub fn tuple_count(n: usize, k: usize) -> Result<usize> {
    let count = (n as u128).checked_pow(k as u32).unwrap_or(u128::MAX);
    if count > MAX_TUPLES {
        return Err(Error::TupleLimit { count, limit: MAX_TUPLES });
    }
    Ok(count as usize)
}

/// Odometer over `{0..n}^k`, first position varying slowest.
#[derive(Debug, Clone)]
pub struct Tuples {
    n: usize,
    current: Vec<usize>,
    done: bool,
}

impl Tuples {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        tuple_count(n, k)?;
        Ok(Self { n, current: vec![0; k], done: n == 0 })
    }
}

impl Iterator for Tuples {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let mut pos = self.current.len();
        loop {
            if pos == 0 {
                self.done = true;
                break;
            }
            pos -= 1;
            self.current[pos] += 1;
            if self.current[pos] < self.n {
                break;
            }
            self.current[pos] = 0;
        }
        Some(out)
    }
}

/// `sum_tuple prod_k probs[tuple_k] * f(tuple)`, skipping zero-mass tuples.
pub fn expectation<F>(probs: &[f64], k: usize, mut f: F) -> Result<f64>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    let mut acc = CompensatedSum::new();
    for tuple in Tuples::new(probs.len(), k)? {
        let weight: f64 = tuple.iter().map(|&i| probs[i]).product();
        if weight == 0.0 {
            continue;
        }
        acc.add(weight * f(&tuple)?);
    }
    Ok(acc.value())
}
