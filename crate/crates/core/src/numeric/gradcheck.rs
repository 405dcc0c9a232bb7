use super::encoder::EncoderParameters;
use super::loss::{batch_loss, total_loss, Batch, LossConfig};
use crate::error::{Error, Result};

/// Worst relative disagreement between the analytic gradient and a central
/// finite difference, over every parameter.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check(
    params: &EncoderParameters,
    batch: &Batch,
    cfg: &LossConfig,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Argument(format!("finite-difference step must be positive, got {step}")));
    }
    let analytic: Vec<f64> = total_loss(params, batch, cfg)?.params.values().copied().collect();
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let original = params_value(&mut probe, k);
        set(&mut probe, k, original + step);
        let plus = batch_loss(&probe, batch, cfg)?.total;
        set(&mut probe, k, original - step);
        let minus = batch_loss(&probe, batch, cfg)?.total;
        set(&mut probe, k, original);
        let numeric = (plus - minus) / (2.0 * step);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

fn params_value(params: &mut EncoderParameters, index: usize) -> f64 {
    *params.value_mut(index).expect("gradient and parameters share a shape")
}

fn set(params: &mut EncoderParameters, index: usize, value: f64) {
    *params.value_mut(index).expect("gradient and parameters share a shape") = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::encoder::{Architecture, Layer, Tower};
    use crate::numeric::loss::BatchItem;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_step_is_rejected() {
        let params = EncoderParameters::init(&Architecture::desk(2, 2), 0).unwrap();
        let batch = Batch {
            items: vec![BatchItem { image: vec![1.0, 0.0], text: vec![0.0, 1.0], target_image: vec![1.0, 1.0], negatives: vec![] }],
        };
        assert!(matches!(
            finite_difference_check(&params, &batch, &LossConfig::default(), 0.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn degenerate_single_query_has_zero_gradient() {
        // one query, no negatives: InfoNCE is log 1 = 0 everywhere
        let params = EncoderParameters::new(
            Tower { layers: vec![Layer::identity(2)] },
            Tower { layers: vec![Layer::identity(2)] },
        )
        .unwrap();
        let batch = Batch {
            items: vec![BatchItem { image: vec![1.0], text: vec![0.5], target_image: vec![0.3, 0.7], negatives: vec![] }],
        };
        let err = finite_difference_check(&params, &batch, &LossConfig::default(), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn random_small_batch_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let arch = Architecture { image_dim: 5, text_dim: 3, hidden: vec![6], embedding_dim: 4 };
        let params = EncoderParameters::init(&arch, 3).unwrap();
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let items = (0..4)
            .map(|i| BatchItem {
                image: v(5),
                text: v(3),
                target_image: v(5),
                negatives: if i == 0 { vec![1, 2] } else { vec![] },
            })
            .collect();
        let cfg = LossConfig { temperature: 0.1, margin: 0.3, lambda: 0.5 };
        let err = finite_difference_check(&params, &Batch { items }, &cfg, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
