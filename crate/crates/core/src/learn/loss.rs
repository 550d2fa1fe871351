//! Training objectives.

use crate::autodiff::{psnr_from_mse, Graph, Var};
use crate::error::{Error, Result};
use crate::hinet::StageOutputs;
use crate::tensor::{Real, Tensor};

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("loss operands {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute deviation over every element of the batch.
pub fn l1_loss<T: Real>(x_rec: &Tensor<T>, x_c: &Tensor<T>) -> Result<f64> {
    same_shape(x_rec, x_c)?;
    let sum: f64 = x_rec
        .data()
        .iter()
        .zip(x_c.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(sum / x_rec.len() as f64)
}

/// Batch mean of per-sample PSNR, peak 1.0.
pub fn batch_psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.batch();
    let total: f64 = (0..n)
        .map(|s| {
            let (xa, xb) = (a.sample(s), b.sample(s));
            let se: f64 = xa
                .iter()
                .zip(xb)
                .map(|(&x, &y)| {
                    let d = x.as_f64() - y.as_f64();
                    d * d
                })
                .sum();
            psnr_from_mse(se / xa.len() as f64)
        })
        .sum();
    Ok(total / n as f64)
}

/// Negative sum of the two stages' PSNR against the clean target.
pub fn psnr_loss<T: Real>(stages: &StageOutputs<Tensor<T>>, x_c: &Tensor<T>) -> Result<f64> {
    Ok(-(batch_psnr(&stages.restored_1, x_c)? + batch_psnr(&stages.restored_2, x_c)?))
}

/// [`psnr_loss`] recorded on a graph.
pub fn psnr_loss_graph<T: Real>(g: &mut Graph<T>, stages: &StageOutputs<Var>, x_c: Var) -> Var {
    let p1 = g.psnr(stages.restored_1, x_c);
    let p2 = g.psnr(stages.restored_2, x_c);
    let sum = g.add(p1, p2);
    g.scale(sum, -T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_constant_offset() {
        let a = Tensor::<f32>::zeros([2, 3, 4, 4]);
        let b = Tensor::<f32>::full([2, 3, 4, 4], 0.5);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert!((l1_loss(&a, &b).unwrap() - 0.5).abs() < 1e-12);
        assert!(l1_loss(&a, &Tensor::zeros([1, 3, 4, 4])).is_err());
    }

    #[test]
    fn psnr_loss_closed_forms() {
        let c = Tensor::<f64>::full([1, 3, 8, 8], 0.25);
        let perfect = StageOutputs {
            residual_1: c.clone(),
            residual_2: c.clone(),
            restored_1: c.clone(),
            restored_2: c.clone(),
        };
        assert_eq!(psnr_loss(&perfect, &c).unwrap(), -200.0);
        let off = c.map(|v| v + 0.5);
        let half = StageOutputs {
            restored_1: off.clone(),
            restored_2: off,
            ..perfect
        };
        assert!((psnr_loss(&half, &c).unwrap() + 12.0412).abs() < 1e-4);
    }
}
