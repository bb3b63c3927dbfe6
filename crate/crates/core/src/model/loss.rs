use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{logsumexp, softmax_in_place, Matrix};

fn check_distribution<S: Scalar>(q: &[S]) -> Result<()> {
    let n = q.len() as f64;
    let tol = 1e-9f64.max(S::epsilon().to_f64_exact() * n * 4.0);
    let sum: f64 = q.iter().map(|v| v.to_f64_exact()).sum();
    if (sum - 1.0).abs() > tol || q.iter().any(|v| *v < S::zero()) {
        return Err(Error::InvalidArgument(format!("target row is not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// Masked mean of `H(q, softmax(logits))` over the rows of `logits`.
pub fn loss<S: Scalar>(logits: &Matrix<S>, q: &[Vec<S>], mask: &[bool]) -> Result<S> {
    Ok(loss_and_grad(logits, q, mask, S::one())?.0)
}

/// Loss plus `weight · ∂loss/∂logits`.
pub fn loss_and_grad<S: Scalar>(logits: &Matrix<S>, q: &[Vec<S>], mask: &[bool], weight: S) -> Result<(S, Matrix<S>)> {
    if logits.rows() != q.len() || q.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} logits rows, {} target rows, {} mask entries",
            logits.rows(),
            q.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::InvalidArgument("loss mask selects no positions".into()));
    }
    let inv = S::one() / S::of(count as f64);
    let mut total = S::zero();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, (qr, &m)) in q.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if qr.len() != logits.cols() {
            return Err(Error::Shape(format!("target row width {} != vocab {}", qr.len(), logits.cols())));
        }
        check_distribution(qr)?;
        let z = logits.row(r);
        let lse = logsumexp(z);
        let cross: S = z.iter().zip(qr).map(|(&zi, &qi)| qi * zi).sum();
        total += lse - cross;
        let g = grad.row_mut(r);
        g.copy_from_slice(z);
        softmax_in_place(g);
        for (gi, &qi) in g.iter_mut().zip(qr) {
            *gi = (*gi - qi) * inv * weight;
        }
    }
    let l = total * inv;
    if !l.is_finite() {
        return Err(Error::NonFinite { what: "loss".into(), step: None });
    }
    Ok((l, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(t: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[t] = 1.0;
        v
    }

    #[test]
    fn uniform_logits_give_log_n() {
        let logits = Matrix::<f64>::zeros(1, 256);
        let l = loss(&logits, &[one_hot(2, 256)], &[true]).unwrap();
        assert!((l - 256f64.ln()).abs() < 1e-12);
        assert!((l - 5.545).abs() < 1e-3);
    }

    #[test]
    fn matching_distribution_gives_entropy() {
        let z = vec![0.3, -1.2, 2.0, 0.0];
        let p = crate::tensor::softmax(&z);
        let logits = Matrix::from_vec(1, 4, z.clone());
        let l = loss(&logits, &[p.clone()], &[true]).unwrap();
        let h: f64 = -p.iter().map(|v: &f64| v * v.ln()).sum::<f64>();
        assert!((l - h).abs() < 1e-12);
        // Shifting logits leaves the loss unchanged; any other logits do worse.
        let shifted = Matrix::from_vec(1, 4, z.iter().map(|v| v + 3.0).collect());
        assert!((loss(&shifted, &[p.clone()], &[true]).unwrap() - h).abs() < 1e-12);
        let other = Matrix::from_vec(1, 4, vec![0.0, 0.0, 0.0, 1.0]);
        assert!(loss(&other, &[p], &[true]).unwrap() > h);
    }

    #[test]
    fn masked_rows_are_ignored() {
        let logits = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 100.0, -50.0, 0.0]);
        let q = vec![one_hot(0, 3), one_hot(1, 3)];
        let both = loss(&logits, &q, &[true, false]).unwrap();
        let single = loss(&Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]), &q[..1], &[true]).unwrap();
        assert_eq!(both, single);
    }

    #[test]
    fn empty_mask_rejected() {
        let logits = Matrix::<f64>::zeros(1, 3);
        assert!(loss(&logits, &[one_hot(0, 3)], &[false]).is_err());
    }

    #[test]
    fn non_distribution_rejected() {
        let logits = Matrix::<f64>::zeros(1, 3);
        assert!(loss(&logits, &[vec![0.5, 0.2, 0.2]], &[true]).is_err());
    }
}
