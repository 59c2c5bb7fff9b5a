//! Named parameters, the AdamW optimizer, and the warmup/inverse-sqrt
//! learning-rate schedule.

use std::collections::HashMap;

use crate::error::{invalid_arg, Error, Result};
use crate::tensor::Tensor;

/// One named model parameter. Names are unique dotted paths; a parameter with
/// `trainable == false` is never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameters with unique names. Iteration order is
/// insertion order, which keeps optimizer updates and serialization
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            invalid_arg!("duplicate parameter name {name}");
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).copied().map(move |i| &mut self.params[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).count()
    }

    /// Total element count over trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Gradients keyed by parameter name, as produced by a backward pass.
pub type GradMap = HashMap<String, Tensor>;

/// Transformer learning-rate schedule normalized so the peak value is reached
/// exactly at `step == warmup_steps`: linear warmup before, inverse square
/// root decay after.
pub fn lr_at(step: u64, peak_lr: f64, warmup_steps: u64) -> f64 {
    debug_assert!(step >= 1 && warmup_steps >= 1);
    let s = step as f64;
    let w = warmup_steps as f64;
    peak_lr * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            peak_lr: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW state: first/second moment buffers for trainable parameters plus a
/// step counter. Moments are created lazily on the first step so they exist
/// only for parameters that are actually trainable.
#[derive(Debug)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(cfg: AdamConfig) -> Self {
        OptimizerState {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn has_moments_for(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// One decoupled-weight-decay Adam update over every trainable parameter.
    /// Non-trainable parameters are never read or written.
    pub fn adamw_step(&mut self, params: &mut ParamSet, grads: &GradMap) -> Result<()> {
        self.step += 1;
        let lr = lr_at(self.step, self.cfg.peak_lr, self.cfg.warmup_steps);
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for p in params.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = grads.get(&p.name).ok_or_else(|| {
                Error::InvalidState(format!("missing gradient for trainable parameter {}", p.name))
            })?;
            if g.shape() != p.value.shape() {
                invalid_arg!(
                    "gradient shape {:?} does not match parameter {} shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                );
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, trainable: bool) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(value), trainable).unwrap();
        ps
    }

    #[test]
    fn lr_schedule_peak_and_decay() {
        let peak = 5e-4;
        let warmup = 100;
        assert!((lr_at(warmup, peak, warmup) - peak).abs() < 1e-18);
        assert!((lr_at(4 * warmup, peak, warmup) - peak / 2.0).abs() < 1e-18);
        assert!((lr_at(warmup / 2, peak, warmup) - peak / 2.0).abs() < 1e-18);
    }

    #[test]
    fn lr_schedule_monotone_and_continuous() {
        let peak = 1e-3;
        let warmup = 64;
        let mut prev = 0.0;
        for step in 1..warmup {
            let lr = lr_at(step, peak, warmup);
            assert!(lr > prev, "warmup must strictly increase");
            prev = lr;
        }
        let at_peak = lr_at(warmup, peak, warmup);
        assert!(at_peak > prev);
        // Continuity: min(s/w, sqrt(w/s)) approaches 1 from both sides.
        let before = lr_at(warmup - 1, peak, warmup);
        let after = lr_at(warmup + 1, peak, warmup);
        assert!((at_peak - before) < peak * 0.02);
        assert!((at_peak - after) < peak * 0.02);
        let mut prev = at_peak;
        for step in (warmup + 1)..(warmup * 4) {
            let lr = lr_at(step, peak, warmup);
            assert!(lr < prev, "decay must strictly decrease");
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameter_unchanged() {
        let mut ps = one_param(0.75, true);
        let mut opt = OptimizerState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::scalar(0.0));
        opt.adamw_step(&mut ps, &grads).unwrap();
        assert_eq!(ps.get("w").unwrap().value.item(), 0.75);
    }

    #[test]
    fn zero_gradient_with_decay_scales_by_decoupled_factor() {
        let peak = 1e-2;
        let mut ps = one_param(2.0, true);
        let mut opt = OptimizerState::new(AdamConfig {
            peak_lr: peak,
            warmup_steps: 1,
            weight_decay: 0.01,
            ..AdamConfig::default()
        });
        let mut grads = GradMap::new();
        grads.insert("w".into(), Tensor::scalar(0.0));
        opt.adamw_step(&mut ps, &grads).unwrap();
        // Step 1 is the schedule peak, so the value scales by (1 - lr * wd).
        let want = 2.0 * (1.0 - peak * 0.01);
        assert!((ps.get("w").unwrap().value.item() - want).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_bit_identical_after_steps() {
        let mut ps = ParamSet::new();
        ps.add("frozen", Tensor::scalar(0.333_333_333_333_7), false)
            .unwrap();
        ps.add("live", Tensor::scalar(1.0), true).unwrap();
        let before = ps.get("frozen").unwrap().value.data()[0].to_bits();
        let mut opt = OptimizerState::new(AdamConfig::default());
        let mut grads = GradMap::new();
        grads.insert("live".into(), Tensor::scalar(0.5));
        for _ in 0..10 {
            opt.adamw_step(&mut ps, &grads).unwrap();
        }
        assert_eq!(before, ps.get("frozen").unwrap().value.data()[0].to_bits());
        assert!(!opt.has_moments_for("frozen"));
        assert!(opt.has_moments_for("live"));
    }

    #[test]
    fn missing_gradient_for_trainable_is_invalid_state() {
        let mut ps = one_param(1.0, true);
        let mut opt = OptimizerState::new(AdamConfig::default());
        let grads = GradMap::new();
        assert!(matches!(
            opt.adamw_step(&mut ps, &grads),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn quadratic_converges_within_2000_steps() {
        // f(w) = (w - 1)^2, df/dw = 2 (w - 1).
        let mut ps = one_param(-3.0, true);
        let mut opt = OptimizerState::new(AdamConfig {
            peak_lr: 0.05,
            warmup_steps: 10,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let w = ps.get("w").unwrap().value.item();
            let mut grads = GradMap::new();
            grads.insert("w".into(), Tensor::scalar(2.0 * (w - 1.0)));
            opt.adamw_step(&mut ps, &grads).unwrap();
        }
        let w = ps.get("w").unwrap().value.item();
        assert!((w - 1.0).abs() < 1e-3, "did not converge: w = {w}");
    }
}
