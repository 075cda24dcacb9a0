use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::tensor::{Scalar, Tensor};
use super::NnError;

/// `lambda * a + (1 - lambda) * b` for both inputs and (one-hot or soft) targets.
pub fn mixup<F: Scalar>(
    a: (&Tensor<F>, &Tensor<F>),
    b: (&Tensor<F>, &Tensor<F>),
    lambda: f64,
) -> Result<(Tensor<F>, Tensor<F>), NnError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(NnError::Config(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    let lerp = |x: &Tensor<F>, y: &Tensor<F>| -> Result<Tensor<F>, NnError> {
        if x.shape() != y.shape() {
            return Err(NnError::Shape(format!(
                "mixup operands differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let l = F::of(lambda);
        let m = F::of(1.0 - lambda);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| l * p + m * q).collect();
        Tensor::from_vec(x.shape(), data)
    };
    Ok((lerp(a.0, b.0)?, lerp(a.1, b.1)?))
}

/// Draw `lambda ~ Beta(alpha, alpha)`. `alpha <= 0` disables mixing (returns 1).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    if alpha <= 0.0 {
        return 1.0;
    }
    Beta::new(alpha, alpha).expect("positive alpha").sample(rng)
}
