//! Adam with the moment bookkeeping exposed, so runs can checkpoint and
//! resume the optimizer exactly. L2 regularization enters through the
//! gradient (weights only; biases and normalization parameters are exempt).

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::model::layers::ParamKind;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamParams {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    decay: bool,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    slots: Vec<Slot>,
    pub params: AdamParams,
    step_t: usize,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var, ParamKind)>, params: AdamParams) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var, kind)| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                Ok(Slot {
                    name,
                    var,
                    decay: kind == ParamKind::Weight,
                    m,
                    v,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            slots,
            params,
            step_t: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn step_count(&self) -> usize {
        self.step_t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step_t += 1;
        let t = self.step_t as f64;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powf(t);
        let bc2 = 1.0 - p.beta2.powf(t);
        for slot in &mut self.slots {
            let Some(grad) = grads.get(&slot.var) else {
                continue;
            };
            let grad = if slot.decay && p.weight_decay > 0.0 {
                (grad + (slot.var.as_tensor() * p.weight_decay)?)?
            } else {
                grad.clone()
            };
            slot.m = ((&slot.m * p.beta1)? + (&grad * (1.0 - p.beta1))?)?;
            slot.v = ((&slot.v * p.beta2)? + (grad.sqr()? * (1.0 - p.beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat * p.lr)?.div(&(v_hat.sqrt()? + p.eps)?)?;
            slot.var.set(&slot.var.sub(&update)?)?;
        }
        Ok(())
    }

    /// Moment tensors under `optim.m.` / `optim.v.` prefixes for checkpoints.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for slot in &self.slots {
            out.insert(format!("optim.m.{}", slot.name), slot.m.clone());
            out.insert(format!("optim.v.{}", slot.name), slot.v.clone());
        }
        out
    }

    pub fn restore_state(
        &mut self,
        tensors: &BTreeMap<String, Tensor>,
        step_t: usize,
    ) -> Result<()> {
        for slot in &mut self.slots {
            let m_name = format!("optim.m.{}", slot.name);
            let v_name = format!("optim.v.{}", slot.name);
            match (tensors.get(&m_name), tensors.get(&v_name)) {
                (Some(m), Some(v)) => {
                    if m.dims() != slot.m.dims() || v.dims() != slot.v.dims() {
                        return Err(Error::ShapeMismatch {
                            name: m_name,
                            got: m.dims().to_vec(),
                            expected: slot.m.dims().to_vec(),
                        });
                    }
                    slot.m = m.clone();
                    slot.v = v.clone();
                }
                _ => {
                    return Err(Error::CorruptSnapshot {
                        dir: Default::default(),
                        reason: format!("missing optimizer state for {}", slot.name),
                    })
                }
            }
        }
        self.step_t = step_t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    /// Minimize (w - 3)^2 with Adam; w must approach 3.
    #[test]
    fn converges_on_quadratic() {
        let w = Var::from_tensor(&Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let mut adam = Adam::new(
            vec![("w".into(), w.clone(), ParamKind::Weight)],
            AdamParams::new(0.1, 0.0),
        )
        .unwrap();
        for _ in 0..200 {
            let diff = (w.as_tensor() - 3.0).unwrap();
            let loss = diff.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            adam.step(&grads).unwrap();
        }
        let val = w.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((val - 3.0).abs() < 0.05, "w converged to {val}");
    }

    #[test]
    fn weight_decay_separates_identically_driven_groups() {
        // the loss gradient alternates sign and averages out; what remains
        // is the decay pull, which only the Weight group feels
        let w = Var::from_tensor(&Tensor::ones(4, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::ones(4, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let mut adam = Adam::new(
            vec![
                ("w".into(), w.clone(), ParamKind::Weight),
                ("b".into(), b.clone(), ParamKind::Bias),
            ],
            AdamParams::new(0.01, 0.5),
        )
        .unwrap();
        for i in 0..60 {
            let scale = if i % 2 == 0 { 1e-6 } else { -1e-6 };
            let loss = ((w.as_tensor() + b.as_tensor()).unwrap() * scale)
                .unwrap()
                .sum_all()
                .unwrap();
            let grads = loss.backward().unwrap();
            adam.step(&grads).unwrap();
        }
        let wv = w.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()[0];
        let bv = b.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()[0];
        assert!(wv < 0.8, "decayed weight stayed at {wv}");
        assert!((bv - 1.0).abs() < 0.05, "undecayed var drifted to {bv}");
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let make = || {
            Var::from_tensor(
                &Tensor::from_vec(vec![1f32, -2.0, 0.5], 3, &Device::Cpu).unwrap(),
            )
            .unwrap()
        };
        let run = |steps_before_save: usize, total: usize| -> Vec<f32> {
            let w = make();
            let mut adam = Adam::new(
                vec![("w".into(), w.clone(), ParamKind::Weight)],
                AdamParams::new(0.05, 0.01),
            )
            .unwrap();
            let mut saved: Option<(BTreeMap<String, Tensor>, usize, Tensor)> = None;
            for i in 0..total {
                if i == steps_before_save {
                    saved = Some((
                        adam.state_tensors(),
                        adam.step_count(),
                        w.as_tensor().clone(),
                    ));
                }
                let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
                let grads = loss.backward().unwrap();
                adam.step(&grads).unwrap();
            }
            // resume from the snapshot and replay the remaining steps
            let (state, step, wt) = saved.unwrap();
            let w2 = Var::from_tensor(&wt).unwrap();
            let mut adam2 = Adam::new(
                vec![("w".into(), w2.clone(), ParamKind::Weight)],
                AdamParams::new(0.05, 0.01),
            )
            .unwrap();
            adam2.restore_state(&state, step).unwrap();
            for _ in steps_before_save..total {
                let loss = w2.as_tensor().sqr().unwrap().sum_all().unwrap();
                let grads = loss.backward().unwrap();
                adam2.step(&grads).unwrap();
            }
            let direct = w.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let resumed = w2.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for (a, b) in direct.iter().zip(&resumed) {
                assert!((a - b).abs() < 1e-7, "resumed diverged: {a} vs {b}");
            }
            direct
        };
        run(3, 10);
    }
}
