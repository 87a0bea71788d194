//! First-order optimizers over a [`Module`]'s parameters.
//!
//! State buffers are keyed by parameter name so they can be saved into and
//! restored from checkpoints.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::Module;
use crate::{Error, Result};

pub trait Optimizer {
    /// Applies one update using the accumulated gradients.
    fn step<M: Module + ?Sized>(&mut self, module: &mut M, lr: f64);
    /// Named state buffers, for checkpointing.
    fn state(&self) -> BTreeMap<String, ArrayD<f32>>;
    fn load_state(&mut self, state: &BTreeMap<String, ArrayD<f32>>) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<String, ArrayD<f32>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: BTreeMap::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step<M: Module + ?Sized>(&mut self, module: &mut M, lr: f64) {
        let lr = lr as f32;
        let SgdConfig { momentum, weight_decay } = self.cfg;
        for p in module.params_mut() {
            let v = self
                .velocity
                .entry(p.name().to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            Zip::from(&mut p.value).and(v).and(&p.grad).for_each(|w, v, &g| {
                *v = momentum * *v + g + weight_decay * *w;
                *w -= lr * *v;
            });
        }
    }

    fn state(&self) -> BTreeMap<String, ArrayD<f32>> {
        self.velocity.iter().map(|(k, v)| (format!("{k}.velocity"), v.clone())).collect()
    }

    fn load_state(&mut self, state: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
        self.velocity = strip_suffix(state, ".velocity")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u32,
    m: BTreeMap<String, ArrayD<f32>>,
    v: BTreeMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step<M: Module + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let (b1, b2, eps) = (beta1 as f32, beta2 as f32, (eps * c2.sqrt()) as f32);
        for p in module.params_mut() {
            let m = self
                .m
                .entry(p.name().to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = self
                .v
                .entry(p.name().to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            Zip::from(&mut p.value).and(m).and(v).and(&p.grad).for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            });
        }
    }

    fn state(&self) -> BTreeMap<String, ArrayD<f32>> {
        let mut out: BTreeMap<String, ArrayD<f32>> =
            self.m.iter().map(|(k, v)| (format!("{k}.m"), v.clone())).collect();
        out.extend(self.v.iter().map(|(k, v)| (format!("{k}.v"), v.clone())));
        out.insert("t".into(), ArrayD::from_elem(ndarray::IxDyn(&[1]), self.t as f32));
        out
    }

    fn load_state(&mut self, state: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
        self.t = state
            .get("t")
            .and_then(|a| a.iter().next().copied())
            .ok_or_else(|| Error::Checkpoint("adam state lacks step count".into()))? as u32;
        let rest: BTreeMap<_, _> = state.iter().filter(|(k, _)| *k != "t").map(|(k, v)| (k.clone(), v.clone())).collect();
        self.m = strip_suffix(&rest.iter().filter(|(k, _)| k.ends_with(".m")).map(|(k, v)| (k.clone(), v.clone())).collect(), ".m")?;
        self.v = strip_suffix(&rest.iter().filter(|(k, _)| k.ends_with(".v")).map(|(k, v)| (k.clone(), v.clone())).collect(), ".v")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Either optimizer, chosen at run time.
#[derive(Debug, Clone)]
pub enum AnyOptimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl AnyOptimizer {
    pub fn new(kind: OptimizerKind, sgd: SgdConfig, adam: AdamConfig) -> Self {
        match kind {
            OptimizerKind::Sgd => AnyOptimizer::Sgd(Sgd::new(sgd)),
            OptimizerKind::Adam => AnyOptimizer::Adam(Adam::new(adam)),
        }
    }
}

impl Optimizer for AnyOptimizer {
    fn step<M: Module + ?Sized>(&mut self, module: &mut M, lr: f64) {
        match self {
            AnyOptimizer::Sgd(o) => o.step(module, lr),
            AnyOptimizer::Adam(o) => o.step(module, lr),
        }
    }

    fn state(&self) -> BTreeMap<String, ArrayD<f32>> {
        match self {
            AnyOptimizer::Sgd(o) => o.state(),
            AnyOptimizer::Adam(o) => o.state(),
        }
    }

    fn load_state(&mut self, state: &BTreeMap<String, ArrayD<f32>>) -> Result<()> {
        match self {
            AnyOptimizer::Sgd(o) => o.load_state(state),
            AnyOptimizer::Adam(o) => o.load_state(state),
        }
    }
}

fn strip_suffix(state: &BTreeMap<String, ArrayD<f32>>, suffix: &str) -> Result<BTreeMap<String, ArrayD<f32>>> {
    state
        .iter()
        .map(|(k, v)| {
            k.strip_suffix(suffix)
                .map(|name| (name.to_string(), v.clone()))
                .ok_or_else(|| Error::Checkpoint(format!("unexpected optimizer state {k}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;
    use ndarray::{ArrayD, IxDyn};

    struct One(Param);
    impl Module for One {
        fn params(&self) -> Vec<&Param> {
            vec![&self.0]
        }
        fn params_mut(&mut self) -> Vec<&mut Param> {
            vec![&mut self.0]
        }
    }

    fn scalar(v: f32) -> One {
        One(Param::new("w", ArrayD::from_elem(IxDyn(&[1]), v)))
    }

    #[test]
    fn sgd_matches_hand_recurrence() {
        let mut m = scalar(1.0);
        let mut opt = Sgd::new(SgdConfig { momentum: 0.5, weight_decay: 0.0 });
        m.0.grad.fill(2.0);
        opt.step(&mut m, 0.1);
        assert!((m.0.value[[0]] - 0.8).abs() < 1e-7);
        opt.step(&mut m, 0.1);
        // v = 0.5 * 2 + 2 = 3
        assert!((m.0.value[[0]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut m = scalar(0.0);
        let mut opt = Adam::new(AdamConfig::default());
        m.0.grad.fill(-3.0);
        opt.step(&mut m, 0.01);
        assert!((m.0.value[[0]] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut m = scalar(5.0);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let w = m.0.value[[0]];
            m.0.grad.fill(2.0 * (w - 1.5));
            opt.step(&mut m, 0.05);
        }
        assert!((m.0.value[[0]] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn state_round_trip_resumes_exactly() {
        let run = |split: Option<usize>| {
            let mut m = scalar(1.0);
            let mut opt = Adam::new(AdamConfig::default());
            for s in 0..6 {
                if Some(s) == split {
                    let st = opt.state();
                    opt = Adam::new(AdamConfig::default());
                    opt.load_state(&st).unwrap();
                }
                m.0.grad.fill(m.0.value[[0]] * 0.3 + s as f32);
                opt.step(&mut m, 0.1);
            }
            m.0.value[[0]]
        };
        assert_eq!(run(None), run(Some(3)));
    }
}
