//! AdamW with global-norm clipping and the one-cycle learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::params::{is_buffer, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub initial_lr: f64,
    pub max_lr: f64,
    pub min_lr: f64,
    /// Fraction of steps spent rising from `initial_lr` to `max_lr`.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            max_lr: 1e-2,
            min_lr: 1e-7,
            warmup_fraction: 0.4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            grad_clip: 10.0,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            0.0 < self.min_lr && self.min_lr <= self.initial_lr && self.initial_lr <= self.max_lr,
            Validation,
            "learning rates need 0 < min_lr <= initial_lr <= max_lr"
        );
        ensure!(
            (0.0..=1.0).contains(&self.warmup_fraction),
            Validation,
            "warmup_fraction must lie in [0, 1]"
        );
        ensure!(
            self.weight_decay >= 0.0,
            Validation,
            "weight decay must be >= 0"
        );
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0,
            Validation,
            "Adam moments need beta in [0, 1) and eps > 0"
        );
        ensure!(self.grad_clip >= 0.0, Validation, "grad_clip must be >= 0");
        Ok(())
    }
}

/// Learning rate at `step` of a `total_steps`-step run.
///
/// Linear rise from `initial_lr` to `max_lr` until step `round(warmup_fraction · total)`,
/// then cosine decay reaching `min_lr` on the last step.
pub fn lr_schedule(step: usize, total_steps: usize, spec: &OptimizerSpec) -> Result<f64> {
    ensure!(
        step < total_steps,
        Contract,
        "step {step} outside schedule of {total_steps} steps"
    );
    let peak = ((spec.warmup_fraction * total_steps as f64).round() as usize).min(total_steps - 1);
    if step <= peak {
        if peak == 0 {
            return Ok(if total_steps == 1 {
                spec.initial_lr
            } else {
                spec.max_lr
            });
        }
        let t = step as f64 / peak as f64;
        return Ok(spec.initial_lr + (spec.max_lr - spec.initial_lr) * t);
    }
    let t = (step - peak) as f64 / (total_steps - 1 - peak) as f64;
    Ok(spec.min_lr + (spec.max_lr - spec.min_lr) * 0.5 * (1.0 + (PI * t).cos()))
}

/// Decoupled-weight-decay Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub spec: OptimizerSpec,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(spec: OptimizerSpec) -> Self {
        Self {
            spec,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update at learning rate `lr`. Returns the pre-clip gradient norm.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        ensure!(norm.is_finite(), Contract, "non-finite gradient norm");
        let clip = if self.spec.grad_clip > 0.0 && norm > self.spec.grad_clip {
            self.spec.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let OptimizerSpec {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.spec;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            if is_buffer(name) {
                continue;
            }
            let Some(g) = grads.get(name) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * clip;
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                *pv -= lr * (update + weight_decay * *pv);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = OptimizerSpec::default();
        let n = 1000;
        assert_eq!(lr_schedule(0, n, &s).unwrap(), 1e-3);
        assert!((lr_schedule(400, n, &s).unwrap() - 1e-2).abs() < 1e-12);
        assert!((lr_schedule(n - 1, n, &s).unwrap() - 1e-7).abs() < 1e-12);
        assert!(lr_schedule(n, n, &s).is_err());
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(OptimizerSpec {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let x = p.get("x").unwrap().clone();
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), x.map(|v| 2.0 * v));
            opt.update(&mut p, &g, 0.05).unwrap();
        }
        assert!(p.get("x").unwrap().data().iter().all(|v| v.abs() < 0.05));
    }
}
