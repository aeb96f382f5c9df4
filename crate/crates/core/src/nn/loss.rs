use super::{NnError, Real};
use ndarray::{Array2, ArrayView2, Zip};

fn check_same<T>(pred: &ArrayView2<T>, target: &ArrayView2<T>) -> Result<(), NnError> {
    if pred.dim() != target.dim() {
        return Err(NnError::Shape {
            op: "mse",
            detail: format!("prediction {:?} vs target {:?}", pred.dim(), target.dim()),
        });
    }
    Ok(())
}

/// Mean over all elements of `(pred - target)²`.
pub fn mse_loss<T: Real>(pred: ArrayView2<T>, target: ArrayView2<T>) -> Result<T, NnError> {
    check_same(&pred, &target)?;
    let mut sum = T::zero();
    Zip::from(&pred)
        .and(&target)
        .for_each(|&p, &t| sum += (p - t) * (p - t));
    Ok(sum / T::from_usize(pred.len().max(1)).unwrap_or_else(T::one))
}

/// Gradient of [`mse_loss`], `2(pred - target)/n`, multiplied by `scale`.
pub fn mse_loss_backward<T: Real>(
    pred: ArrayView2<T>,
    target: ArrayView2<T>,
    scale: T,
) -> Result<Array2<T>, NnError> {
    check_same(&pred, &target)?;
    let k = T::lit(2.0) * scale / T::from_usize(pred.len().max(1)).unwrap_or_else(T::one);
    let mut g = pred.to_owned();
    Zip::from(&mut g)
        .and(&target)
        .for_each(|p, &t| *p = (*p - t) * k);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mse_values() {
        let p = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(mse_loss(p.view(), p.view()).unwrap(), 0.0);
        let t = p.mapv(|x| x - 2.0);
        assert_eq!(mse_loss(p.view(), t.view()).unwrap(), 4.0);
        let g = mse_loss_backward(p.view(), t.view(), 1.0).unwrap();
        assert!(g.iter().all(|&x| x == 1.0)); // 2·2/4
        assert!(mse_loss(p.view(), array![[1.0]].view()).is_err());
    }
}
