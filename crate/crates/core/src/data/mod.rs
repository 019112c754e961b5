pub mod criteo;
pub mod synthetic;

use crate::batch::{Sample, SparseBatch};
use crate::error::Result;

/// Splits samples by position: the first `train_fraction` for training.
pub fn split_by_position(samples: Vec<Sample>, train_fraction: f64) -> (Vec<Sample>, Vec<Sample>) {
    let cut = ((samples.len() as f64) * train_fraction).round() as usize;
    let mut train = samples;
    let test = train.split_off(cut.min(train.len()));
    (train, test)
}

/// Consecutive batches of at most `batch_size` samples, in order.
pub fn batches(samples: &[Sample], batch_size: usize) -> Result<Vec<SparseBatch>> {
    samples
        .chunks(batch_size.max(1))
        .map(|c| SparseBatch::new(c.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(label: u8) -> Sample {
        Sample {
            label,
            features: vec![],
        }
    }

    #[test]
    fn ninety_five_five_split_preserves_order() {
        let samples: Vec<Sample> = (0..100).map(|i| s((i % 2) as u8)).collect();
        let (train, test) = split_by_position(samples.clone(), 0.95);
        assert_eq!(train.len(), 95);
        assert_eq!(test.len(), 5);
        assert_eq!(train[..], samples[..95]);
        assert_eq!(test[..], samples[95..]);
    }

    #[test]
    fn batching_keeps_order_and_tail() {
        let samples: Vec<Sample> = (0..10).map(|i| s((i % 2) as u8)).collect();
        let b = batches(&samples, 4).unwrap();
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b[2].samples()[1], samples[9]);
    }
}
