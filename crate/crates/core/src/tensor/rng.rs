use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// A (global seed, stream id) pair naming an independent random stream.
///
/// Streams are derived by hashing labels into the stream id, so the numbers a
/// stochastic op sees depend only on its key and never on call order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Child stream labelled by `tag`.
    pub fn derive(self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix(self.stream ^ splitmix(tag)),
        }
    }

    /// Child stream labelled by a string and an index.
    pub fn child(self, label: &str, index: u64) -> Self {
        let h = label
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        self.derive(h).derive(index)
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, key: RngKey) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Invalid(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let numel: usize = shape.iter().product();
    if rate == 0.0 {
        return Tensor::new(shape.to_vec(), vec![1.0; numel]);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = key.rng();
    let data = (0..numel)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_all_ones() {
        let m = dropout_mask(&[4, 5], 0.0, RngKey::new(1)).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_rate_keeps_half() {
        let m = dropout_mask(&[100_000], 0.5, RngKey::new(7)).unwrap();
        let kept = m.data().iter().filter(|&&v| v > 0.0).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() < 0.01, "kept fraction {kept}");
        let mean = m.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.02);
    }

    #[test]
    fn same_key_same_mask() {
        let k = RngKey::new(3).child("dropout", 9);
        assert_eq!(
            dropout_mask(&[64], 0.3, k).unwrap(),
            dropout_mask(&[64], 0.3, k).unwrap()
        );
        assert_ne!(
            dropout_mask(&[64], 0.3, k).unwrap(),
            dropout_mask(&[64], 0.3, k.derive(1)).unwrap()
        );
    }

    #[test]
    fn rate_one_is_rejected() {
        assert!(dropout_mask(&[3], 1.0, RngKey::new(0)).is_err());
        assert!(dropout_mask(&[3], -0.1, RngKey::new(0)).is_err());
    }
}
