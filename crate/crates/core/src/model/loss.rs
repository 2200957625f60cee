//! Reconstruction targets and the masked mean-squared error.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, NdFloat};

use crate::tokenizer::patchify;
use crate::{Error, Result};

pub const NORM_PIX_EPS: f64 = 1e-6;

/// Write the target of one patch row into `out`: the row itself, or with
/// `norm_pix` the row standardized by its own mean and variance.
pub fn patch_target_row<F: NdFloat>(row: ArrayView1<'_, f32>, norm_pix: bool, mut out: ArrayViewMut1<'_, F>) {
    if !norm_pix {
        out.zip_mut_with(&row, |o, &v| *o = F::from(v).unwrap());
        return;
    }
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + NORM_PIX_EPS).sqrt();
    out.zip_mut_with(&row, |o, &v| *o = F::from((v as f64 - mean) * rstd).unwrap());
}

/// Targets for a batch of patch rows `(n, c·patch²)`.
pub fn patch_targets<F: NdFloat>(patches: ArrayView2<'_, f32>, norm_pix: bool) -> Array2<F> {
    let mut out = Array2::zeros(patches.dim());
    for (row, o) in patches.rows().into_iter().zip(out.rows_mut()) {
        patch_target_row(row, norm_pix, o);
    }
    out
}

/// Patchify a `(c, H, W)` image and build its reconstruction targets.
pub fn patch_target(image: ArrayView3<'_, f32>, patch: usize, norm_pix: bool) -> Result<Array2<f32>> {
    let patches = patchify(image, patch)?;
    Ok(patch_targets(patches.view(), norm_pix))
}

fn check_mse_shapes<F>(pred: &ArrayView2<'_, F>, target: &ArrayView2<'_, F>, masked: &[bool]) -> Result<usize> {
    if pred.dim() != target.dim() || pred.nrows() != masked.len() {
        return Err(Error::Shape(format!(
            "pred {:?}, target {:?}, mask {}",
            pred.dim(),
            target.dim(),
            masked.len()
        )));
    }
    let n = masked.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::NoMaskedPositions);
    }
    Ok(n)
}

/// Mean over masked rows of the per-row mean squared error.
pub fn masked_mse<F: NdFloat>(pred: ArrayView2<'_, F>, target: ArrayView2<'_, F>, masked: &[bool]) -> Result<F> {
    let n = check_mse_shapes(&pred, &target, masked)?;
    let dim = F::from(pred.ncols()).unwrap();
    let mut total = F::zero();
    for (i, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
        let row = pred.row(i);
        let tgt = target.row(i);
        let sq = row.iter().zip(tgt).fold(F::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        total += sq / dim;
    }
    Ok(total / F::from(n).unwrap())
}

/// Loss and its gradient with respect to `pred`; unmasked rows get exactly 0.
pub fn masked_mse_grad<F: NdFloat>(pred: ArrayView2<'_, F>, target: ArrayView2<'_, F>, masked: &[bool]) -> Result<(F, Array2<F>)> {
    let loss = masked_mse(pred, target, masked)?;
    let n = masked.iter().filter(|&&m| m).count();
    let scale = F::from(2.0).unwrap() / F::from(n * pred.ncols()).unwrap();
    let mut grad = Array2::zeros(pred.dim());
    for (i, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
        let mut g = grad.row_mut(i);
        for ((o, &a), &b) in g.iter_mut().zip(pred.row(i)).zip(target.row(i)) {
            *o = scale * (a - b);
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};

    #[test]
    fn constant_patch_targets_zero() {
        let img = Array3::from_elem((2, 16, 16), 3.5f32);
        let t = patch_target(img.view(), 16, true).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_patch_closed_form() {
        let row = Array1::from_shape_fn(256, |i| (i % 2) as f32);
        let mut out = Array1::<f64>::zeros(256);
        patch_target_row(row.view(), true, out.view_mut());
        let expect = 0.5 / (0.25f64 + 1e-6).sqrt();
        assert!((out[1] - expect).abs() < 1e-12);
        assert!((out[0] + expect).abs() < 1e-12);
        assert!((expect - 0.999998).abs() < 1e-6);
    }

    #[test]
    fn raw_targets_equal_patchify() {
        let img = Array3::from_shape_fn((1, 32, 32), |(_, y, x)| (y * 32 + x) as f32);
        let t = patch_target(img.view(), 16, false).unwrap();
        assert_eq!(t, patchify(img.view(), 16).unwrap());
    }

    #[test]
    fn one_masked_slot_constant_error() {
        let target = Array2::<f64>::zeros((3, 4));
        let pred = Array2::from_elem((3, 4), 0.3);
        let l = masked_mse(pred.view(), target.view(), &[false, true, false]).unwrap();
        assert!((l - 0.09).abs() < 1e-15);
        assert!(matches!(
            masked_mse(pred.view(), target.view(), &[false; 3]),
            Err(Error::NoMaskedPositions)
        ));
    }
}
