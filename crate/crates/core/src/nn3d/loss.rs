use super::tensor::{Scalar, Tensor};
use super::NnError;
use crate::volume::LabelMap;

pub const DICE_EPS: f64 = 1e-5;

/// One-hot `(num_classes, Z, Y, X)` encoding of a label map.
pub fn one_hot<F: Scalar>(labels: &LabelMap, num_classes: usize) -> Result<Tensor<F>, NnError> {
    let [nx, ny, nz] = labels.grid().dims;
    let n = nx * ny * nz;
    let mut t = Tensor::zeros(&[num_classes, nz, ny, nx]);
    let data = t.data_mut();
    for (v, &l) in labels.labels().iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(NnError::Shape(format!("label {l} outside {num_classes} classes")));
        }
        data[l * n + v] = F::one();
    }
    Ok(t)
}

/// Soft Dice loss averaged over all classes, background included.
///
/// `target` may be soft (MixUp); returns the loss and `dL/dprobs`.
pub fn dice_loss<F: Scalar>(probs: &Tensor<F>, target: &Tensor<F>) -> Result<(F, Tensor<F>), NnError> {
    if probs.shape() != target.shape() {
        return Err(NnError::Shape(format!(
            "probabilities {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    let [c, ..] = probs.dims4()?;
    let eps = F::of(DICE_EPS);
    let two = F::of(2.0);
    let cf = F::of(c as f64);
    let mut loss = F::one();
    let mut grad = probs.zeros_like();
    for k in 0..c {
        let p = probs.channel(k);
        let g = target.channel(k);
        let inter = super::tensor::dot(p, g);
        let denom = super::tensor::sum(p) + super::tensor::sum(g) + eps;
        let num = two * inter + eps;
        loss -= num / denom / cf;
        // d/dp_v of num/denom = (2 g_v denom - num) / denom^2
        let d2 = denom * denom;
        for (o, &gv) in grad.channel_mut(k).iter_mut().zip(g) {
            *o = -(two * gv * denom - num) / d2 / cf;
        }
    }
    if !loss.is_finite() {
        return Err(NnError::NonFinite("dice loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let g = GridSpec::isotropic([4, 3, 2]).unwrap();
        let lm = LabelMap::new(g, (0..24).map(|i| (i % 3) as u16).collect(), 3).unwrap();
        let t = one_hot::<f64>(&lm, 3).unwrap();
        let (loss, _) = dice_loss(&t, &t).unwrap();
        assert!(loss <= 1e-4, "{loss}");
    }

    #[test]
    fn uniform_two_class_balanced() {
        // n voxels, half of each class, p = 0.5 everywhere.
        // per class: (2 * 0.5 * n/2 + eps) / (n/2 + n/2 + eps)
        let n = 16.0;
        let per_class = (0.5 * n + DICE_EPS) / (n + DICE_EPS);
        let expected = 1.0 - per_class;
        let g = GridSpec::isotropic([4, 2, 2]).unwrap();
        let lm = LabelMap::new(g, (0..16).map(|i| (i % 2) as u16).collect(), 2).unwrap();
        let target = one_hot::<f64>(&lm, 2).unwrap();
        let probs = Tensor::full(&[2, 2, 2, 4], 0.5);
        let (loss, _) = dice_loss(&probs, &target).unwrap();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::<f64>::zeros(&[2, 2, 2, 2]);
        let b = Tensor::<f64>::zeros(&[3, 2, 2, 2]);
        assert!(dice_loss(&a, &b).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        let g = GridSpec::isotropic([1, 1, 1]).unwrap();
        let lm = LabelMap::new(g, vec![4], 5).unwrap();
        assert!(one_hot::<f32>(&lm, 3).is_err());
    }
}
