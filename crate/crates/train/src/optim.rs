//! AdamW with decoupled weight decay (decay applied before the moment
//! update, bias-corrected moments, epsilon outside the square root).

use std::collections::HashMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
    /// Updates applied to this parameter; parameters without a gradient
    /// in a step are skipped entirely.
    t: u64,
}

pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
}

impl AdamW {
    pub fn new<'a>(vars: impl IntoIterator<Item = (String, &'a Var)>, cfg: AdamWConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let z = var.as_tensor().zeros_like()?;
                Ok(Slot { name, var: var.clone(), m: z.clone(), v: z, t: 0 })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, slots })
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let c = self.cfg;
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else { continue };
            // Gradients may still reference the graph; keep the moments free of it.
            let g = &g.detach();
            s.t += 1;
            let p = s.var.as_detached_tensor();
            let p = (&p * (1.0 - lr * c.weight_decay))?;
            s.m = ((&s.m * c.beta1)? + (g * (1.0 - c.beta1))?)?.detach();
            s.v = ((&s.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let bc1 = 1.0 - c.beta1.powi(s.t as i32);
            let bc2 = 1.0 - c.beta2.powi(s.t as i32);
            let denom = ((&s.v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&s.m / bc1)? / denom)?;
            s.var.set(&(p - (update * lr)?)?)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Moments and step counters as named tensors (`prefix.m.<name>`,
    /// `prefix.v.<name>`, `prefix.t.<name>`).
    pub fn state(&self, prefix: &str) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for s in &self.slots {
            out.insert(format!("{prefix}.m.{}", s.name), s.m.clone());
            out.insert(format!("{prefix}.v.{}", s.name), s.v.clone());
            out.insert(
                format!("{prefix}.t.{}", s.name),
                Tensor::new(&[s.t as i64], s.m.device())?,
            );
        }
        Ok(out)
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for s in &mut self.slots {
            let get = |kind: &str| {
                tensors
                    .get(&format!("{prefix}.{kind}.{}", s.name))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for '{}' missing", s.name)))
            };
            let m = get("m")?;
            let v = get("v")?;
            if m.dims() != s.m.dims() || v.dims() != s.v.dims() {
                return Err(Error::Checkpoint(format!("optimizer state for '{}' has wrong shape", s.name)));
            }
            s.m = m.to_dtype(s.m.dtype())?;
            s.v = v.to_dtype(s.v.dtype())?;
            s.t = get("t")?.to_vec1::<i64>()?[0] as u64;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_matches_closed_form() {
        // With bias correction the first update is lr·sign(g) (up to eps),
        // after the decoupled decay.
        let var = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = AdamW::new([("p".to_string(), &var)], AdamWConfig::default()).unwrap();
        let loss = (var.as_tensor() * &Tensor::new(&[3.0f64, -0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let p: Vec<f64> = var.as_tensor().to_vec1().unwrap();
        assert!((p[0] - (1.0 * (1.0 - 0.001) - 0.1)).abs() < 1e-6);
        assert!((p[1] - (-2.0 * (1.0 - 0.001) + 0.1)).abs() < 1e-6);
    }
}
