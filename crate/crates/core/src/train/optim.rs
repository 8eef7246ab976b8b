//! AdamW with decoupled weight decay and inspectable state.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub params: AdamWParams,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Collects gradients by parameter name; parameters without one are skipped.
pub fn named_grads(vars: &[(String, Var)], grads: &GradStore) -> BTreeMap<String, Tensor> {
    vars.iter()
        .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.clone(), g.clone())))
        .collect()
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut sq = 0.0f64;
    for g in grads.values() {
        sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(sq.sqrt())
}

/// Rescales all gradients so the global norm does not exceed `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

impl AdamW {
    pub fn new(params: AdamWParams) -> Self {
        Self {
            params,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, vars: &[(String, Var)], grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let t = self.step as i32;
        let bc1 = 1.0 - p.beta1.powi(t);
        let bc2 = 1.0 - p.beta2.powi(t);
        for (name, var) in vars {
            let Some(g) = grads.get(name) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * p.beta1)? + (g * (1.0 - p.beta1))?)?,
                None => (g * (1.0 - p.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?,
                None => (g.sqr()? * (1.0 - p.beta2))?,
            };
            if p.lr != 0.0 {
                let theta = var.as_tensor();
                let decayed = (theta * (1.0 - p.lr * p.weight_decay))?;
                let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + p.eps)?)?;
                var.set(&(decayed - (update * p.lr)?)?)?;
            }
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn setup() -> (Vec<(String, Var)>, BTreeMap<String, Tensor>) {
        let var = Var::new(&[1.0f32, -2.0], &Device::Cpu).unwrap();
        let g = Tensor::new(&[0.5f32, 0.25], &Device::Cpu).unwrap();
        (vec![("w".into(), var)], BTreeMap::from([("w".into(), g)]))
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let (vars, grads) = setup();
        let mut opt = AdamW::new(AdamWParams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        });
        opt.step(&vars, &grads).unwrap();
        // After one step m̂ = g and v̂ = g², so the update is lr·sign(g).
        let got = vars[0].1.as_tensor().to_vec1::<f32>().unwrap();
        let expect = [1.0 * (1.0 - 0.001) - 0.1, -2.0 * (1.0 - 0.001) - 0.1];
        for (a, b) in got.iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (vars, grads) = setup();
        let before = vars[0].1.as_tensor().to_vec1::<f32>().unwrap();
        let mut opt = AdamW::new(AdamWParams {
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        });
        opt.step(&vars, &grads).unwrap();
        assert_eq!(vars[0].1.as_tensor().to_vec1::<f32>().unwrap(), before);
    }

    #[test]
    fn clipping_bounds_norm() {
        let (_, mut grads) = setup();
        let before = clip_grad_norm(&mut grads, 0.1).unwrap();
        assert!((before - (0.25f64 + 0.0625).sqrt()).abs() < 1e-6);
        assert!(global_norm(&grads).unwrap() <= 0.1 + 1e-6);
    }
}
