//! Adam with explicit, serializable moment state.
//!
//! candle-nn's optimizers keep their moments private, which rules out
//! bit-exact resume. This one stores `m`, `v` and the step count so that a
//! checkpoint captures everything the next update depends on.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{JokrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    params: AdamParams,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, params: AdamParams) -> Result<Self> {
        if !(params.lr > 0.0) {
            return Err(JokrError::InvalidConfig(format!("learning rate must be positive, got {}", params.lr)));
        }
        let m = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            params,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> AdamParams {
        self.params
    }

    /// One bias-corrected update. Variables without a gradient in `grads`
    /// keep their value and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((_, var), (m, v)) in self.vars.iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            *m = ((&*m * beta1)? + (&g * (1.0 - beta1))?)?;
            *v = ((&*v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&*m / c1)?;
            let v_hat = (&*v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `m/<name>` and `v/<name>`, plus the step count
    /// as a one-element tensor under `step`.
    pub fn state(&self) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for ((name, _), (m, v)) in self.vars.iter().zip(self.m.iter().zip(&self.v)) {
            out.insert(format!("m/{name}"), m.clone());
            out.insert(format!("v/{name}"), v.clone());
        }
        let device = self.vars.first().map(|(_, v)| v.device().clone()).unwrap_or(Device::Cpu);
        out.insert("step".into(), Tensor::new(&[self.step as i64], &device)?);
        Ok(out)
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>) -> Result<()> {
        let invalid = |what: String| JokrError::CheckpointInvalid(format!("optimizer state: {what}"));
        let step = state.get("step").ok_or_else(|| invalid("missing step".into()))?;
        let step: Vec<i64> = step.to_vec1().map_err(|e| invalid(e.to_string()))?;
        let &[step] = step.as_slice() else {
            return Err(invalid("malformed step".into()));
        };
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}/{name}");
                let t = state.get(&key).ok_or_else(|| invalid(format!("missing {key}")))?;
                if t.dims() != var.dims() {
                    return Err(invalid(format!("{key} has shape {:?}, expected {:?}", t.dims(), var.dims())));
                }
                *slot = t.to_dtype(var.dtype())?.to_device(var.device())?;
            }
        }
        self.step = u64::try_from(step).map_err(|_| invalid("negative step".into()))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.state()?, path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let device = self.vars.first().map(|(_, v)| v.device().clone()).unwrap_or(Device::Cpu);
        let state = candle_core::safetensors::load(path, &device)
            .map_err(|e| JokrError::CheckpointInvalid(format!("{}: {e}", path.display())))?;
        self.load_state(&state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g) (up to eps).
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamParams::default()).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!((got[0] - (1.0 - 1e-4)).abs() < 1e-10);
        assert!((got[1] - (-2.0 + 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn converges_on_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        let params = AdamParams {
            lr: 0.05,
            ..Default::default()
        };
        let mut opt = Adam::new(vec![("x".into(), x.clone())], params).unwrap();
        for _ in 0..2000 {
            let loss = (x.as_tensor() - 1.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let got: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!((got[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let make = || Var::from_tensor(&Tensor::new(&[0.5f32, 1.5, -1.0], &Device::Cpu).unwrap()).unwrap();
        let loss = |x: &Var| (x.as_tensor().sqr().unwrap() * 3.0).unwrap().sum_all().unwrap();
        let x = make();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], AdamParams::default()).unwrap();
        for _ in 0..3 {
            opt.step(&loss(&x).backward().unwrap()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adam.safetensors");
        opt.save(&path).unwrap();

        let y = Var::from_tensor(&x.as_tensor().copy().unwrap()).unwrap();
        let mut resumed = Adam::new(vec![("x".into(), y.clone())], AdamParams::default()).unwrap();
        resumed.load(&path).unwrap();
        assert_eq!(resumed.step_count(), 3);
        opt.step(&loss(&x).backward().unwrap()).unwrap();
        resumed.step(&loss(&y).backward().unwrap()).unwrap();
        let a: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        let b: Vec<f32> = y.as_tensor().to_vec1().unwrap();
        assert_eq!(a, b);
        assert_eq!(y.dtype(), DType::F32);
    }

    #[test]
    fn variables_without_gradient_untouched() {
        let x = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let y = Var::from_tensor(&Tensor::new(&[2.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone()), ("y".into(), y.clone())], AdamParams::default()).unwrap();
        let loss = x.as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        assert_eq!(y.as_tensor().to_vec1::<f64>().unwrap(), vec![2.0]);
    }
}
