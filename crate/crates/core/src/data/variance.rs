//! Phone-level pitch and energy targets.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean of `frame_values` over each phoneme's span; zero-duration phonemes get 0.
pub fn phone_average<F: Scalar>(frame_values: &[F], durations: &[usize]) -> Result<Vec<F>> {
    let total: usize = durations.iter().sum();
    if total != frame_values.len() {
        return Err(Error::Alignment(format!(
            "durations sum to {total} but there are {} frames",
            frame_values.len()
        )));
    }
    let mut start = 0;
    Ok(durations
        .iter()
        .map(|&d| {
            let span = &frame_values[start..start + d];
            start += d;
            if d == 0 {
                F::zero()
            } else {
                span.iter().copied().sum::<F>() / F::lit(d as f64)
            }
        })
        .collect())
}

/// Repeats each phone value by its duration.
pub fn broadcast_by_duration<F: Copy>(values: &[F], durations: &[usize]) -> Vec<F> {
    values
        .iter()
        .zip(durations)
        .flat_map(|(&v, &d)| std::iter::repeat_n(v, d))
        .collect()
}

/// Per-frame L2 norm of the mel frame.
pub fn frame_energy<F: Scalar>(mel: &Array2<F>) -> Vec<F> {
    mel.rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn piecewise_means() {
        let v = [1.0f64, 1.0, 4.0, 4.0, 4.0];
        assert_eq!(phone_average(&v, &[2, 3]).unwrap(), vec![1.0, 4.0]);
    }

    #[test]
    fn zero_duration_is_zero() {
        assert_eq!(phone_average(&[2.0f64; 5], &[0, 5]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn mismatch_is_an_alignment_error() {
        assert!(matches!(phone_average(&[1.0f32; 4], &[2, 3]), Err(Error::Alignment(_))));
    }

    #[test]
    fn energy_is_row_norm() {
        let m = ndarray::array![[3.0f64, 4.0], [0.0, 0.0]];
        assert_eq!(frame_energy(&m), vec![5.0, 0.0]);
    }

    proptest! {
        #[test]
        fn unit_durations_are_identity(values in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let d = vec![1; values.len()];
            prop_assert_eq!(phone_average(&values, &d).unwrap(), values);
        }

        #[test]
        fn average_broadcast_average_is_idempotent(
            spans in prop::collection::vec((0usize..6, -5.0f64..5.0), 1..20),
        ) {
            let durations: Vec<usize> = spans.iter().map(|s| s.0).collect();
            let frames: Vec<f64> = spans
                .iter()
                .enumerate()
                .flat_map(|(i, &(d, v))| (0..d).map(move |k| v + (k + i) as f64 * 0.1))
                .collect();
            let once = phone_average(&frames, &durations).unwrap();
            let twice = phone_average(&broadcast_by_duration(&once, &durations), &durations).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
