//! Seeded weight initialization. All randomness flows through an explicit
//! ChaCha stream so detector construction is reproducible everywhere.

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Constant fill (layer-scale gammas).
    Const(f64),
    Normal {
        std: f64,
    },
    /// Normal redrawn until within two standard deviations.
    TruncNormal {
        std: f64,
    },
    /// He initialization for convolutions, fan-out mode.
    KaimingNormalFanOut,
    /// Uniform(-bound, bound); used for classic linear/conv fallbacks.
    Uniform {
        bound: f64,
    },
}

pub fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(v) => vec![v as f32; n],
        Init::Normal { std } => {
            let dist = Normal::new(0.0, std).expect("std > 0");
            (0..n).map(|_| dist.sample(rng) as f32).collect()
        }
        Init::TruncNormal { std } => {
            let dist = Normal::new(0.0, std).expect("std > 0");
            (0..n)
                .map(|_| {
                    for _ in 0..16 {
                        let v = dist.sample(rng);
                        if v.abs() <= 2.0 * std {
                            return v as f32;
                        }
                    }
                    0.0
                })
                .collect()
        }
        Init::KaimingNormalFanOut => {
            // fan_out for a conv [out, in, k, k] is out * k * k / groups; we
            // fold the receptive field into the trailing dims.
            let fan_out: usize = if shape.len() >= 3 {
                shape[0] * shape[2..].iter().product::<usize>()
            } else {
                shape[0]
            };
            let std = (2.0 / fan_out as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("std > 0");
            (0..n).map(|_| dist.sample(rng) as f32).collect()
        }
        Init::Uniform { bound } => (0..n)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect(),
    };
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let ta = init_tensor(&mut a, &[4, 3], Init::Normal { std: 0.02 }).unwrap();
        let tb = init_tensor(&mut b, &[4, 3], Init::Normal { std: 0.02 }).unwrap();
        assert_eq!(
            ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            tb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn trunc_normal_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = init_tensor(&mut rng, &[4096], Init::TruncNormal { std: 0.02 }).unwrap();
        let vals = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(vals.iter().all(|v| v.abs() <= 0.04 + 1e-9));
    }
}
