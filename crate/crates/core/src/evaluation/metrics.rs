use num_rational::Ratio;
use num_traits::{Num, Signed, ToPrimitive};

use crate::error::{Error, Result};

/// Exact accuracy arithmetic.
pub type Exact = Ratio<i128>;

/// Harmonic mean `n / Σ 1/aᵢ`, and 0 as soon as any accuracy is 0.
pub fn task_score<T: Num + Clone + PartialOrd>(accs: &[T]) -> Result<T> {
    if accs.is_empty() {
        return Err(Error::InvalidArgument("task score of no accuracies".into()));
    }
    if accs.iter().any(|a| *a < T::zero() || *a > T::one()) {
        return Err(Error::InvalidArgument("accuracy outside [0, 1]".into()));
    }
    if accs.iter().any(|a| a.is_zero()) {
        return Ok(T::zero());
    }
    let n = accs.iter().fold(T::zero(), |acc, _| acc + T::one());
    let inv = accs.iter().fold(T::zero(), |acc, a| acc + T::one() / a.clone());
    Ok(n / inv)
}

/// Forgetting `reference - current`; negative means backward transfer.
pub fn forgetting_delta<T: Num>(reference: T, current: T) -> T {
    reference - current
}

pub fn mean<T: Num + Clone>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("mean of nothing".into()));
    }
    let n = values.iter().fold(T::zero(), |acc, _| acc + T::one());
    Ok(values.iter().cloned().fold(T::zero(), |a, b| a + b) / n)
}

pub fn exact(correct: usize, count: usize) -> Exact {
    Ratio::new(correct as i128, count as i128)
}

pub fn to_f64(r: &Exact) -> f64 {
    r.numer().to_f64().unwrap_or(f64::NAN) / r.denom().to_f64().unwrap_or(f64::NAN)
}

/// Fixed four-decimal rendering, rounding half away from zero on the exact value.
pub fn render4(r: &Exact) -> String {
    let scaled = (r * Ratio::from_integer(10_000)).round().to_integer();
    let sign = if scaled < 0 { "-" } else { "" };
    let a = scaled.abs();
    format!("{sign}{}.{:04}", a / 10_000, a % 10_000)
}

/// Scales a fraction-valued metric to percent.
pub fn percent(r: &Exact) -> Exact {
    r * Ratio::from_integer(100)
}

pub fn is_backward_transfer(delta: &Exact) -> bool {
    delta.is_negative()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i128, d: i128) -> Exact {
        Ratio::new(n, d)
    }

    #[test]
    fn harmonic_examples() {
        assert_eq!(task_score(&[q(1, 2), q(1, 2)]).unwrap(), q(1, 2));
        assert_eq!(task_score(&[q(1, 2), q(1, 1)]).unwrap(), q(2, 3));
        assert_eq!(task_score(&[q(9, 10), q(0, 1)]).unwrap(), q(0, 1));
        assert!(task_score::<Exact>(&[]).is_err());
        assert!((task_score(&[0.5, 1.0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn delta_examples() {
        let d = forgetting_delta(q(3261, 100), q(2478, 100));
        assert_eq!(render4(&d), "7.8300");
        assert_eq!(render4(&forgetting_delta(q(3261, 100), q(3092, 100))), "1.6900");
        assert_eq!(forgetting_delta(q(1, 3), q(1, 3)), q(0, 1));
        assert!(is_backward_transfer(&forgetting_delta(q(1, 4), q(1, 2))));
    }

    #[test]
    fn rendering() {
        assert_eq!(render4(&q(7, 256)), "0.0273");
        assert_eq!(render4(&q(1, 20000)), "0.0001");
        assert_eq!(render4(&q(-1, 20000)), "-0.0001");
        assert_eq!(render4(&q(-1, 3)), "-0.3333");
        assert_eq!(render4(&q(2, 1)), "2.0000");
        assert_eq!(mean(&[q(2, 5), q(3, 5), q(1, 2), q(1, 2)]).unwrap(), q(1, 2));
    }
}
