//! Optimizer update rules.
//!
//! The base rules (sgd, sgd-nesterov, adam) are written in the first/second
//! moment form: a step direction `m_t / sqrt(V_t)` with `V = 1` for sgd.
//! On top of them sit the hyper-gradient modes: scalar additive and
//! multiplicative hyper-gradient descent, the multi-level combined variant
//! with trainable combination weights, and the bound-clipped variants.
//!
//! Sign convention: `h` is the *descent* quantity for a learning rate,
//! `h_p = grad_t[p] * direction_{t-1}[p]` (for sgd this is the inner product
//! of consecutive gradients), and rates are updated as `alpha += beta * h`.
//! The gradient of the loss with respect to a rate is `-h`.

use crate::error::{Error, Result};
use crate::lrtree::{GammaParameterization, LrTree, VirtualRates};
use crate::model::{GroupingScheme, ParameterRegistry, ReduceMode};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaseRule {
    Sgd,
    SgdNesterov { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl BaseRule {
    pub fn adam_default() -> Self {
        BaseRule::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperGradMode {
    None,
    HdAdditive,
    HdMultiplicative,
    CamHd,
    Adabound,
    AdaboundCamHd,
}

impl HyperGradMode {
    pub fn is_cam(self) -> bool {
        matches!(self, HyperGradMode::CamHd | HyperGradMode::AdaboundCamHd)
    }

    pub fn is_clipped(self) -> bool {
        matches!(self, HyperGradMode::Adabound | HyperGradMode::AdaboundCamHd)
    }

    fn adapts(self) -> bool {
        !matches!(self, HyperGradMode::None | HyperGradMode::Adabound)
    }
}

/// How per-parameter h values aggregate into a group's h. `Mean` keeps a
/// single shared beta across levels; `Sum` is the literal form where beta
/// is rescaled by group size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HAggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base: BaseRule,
    pub mode: HyperGradMode,
    /// Initial learning rate at every level.
    pub alpha0: f64,
    /// Hyper-gradient learning rate (beta).
    pub hyper_lr: f64,
    /// Combination-weight learning rate (delta).
    pub cam_lr: f64,
    /// Per level, coarsest first; must sum to 1.
    pub gamma_init: Vec<f64>,
    /// Coarsest first; ignored for non-multi-level modes.
    pub levels: Vec<GroupingScheme>,
    pub aggregation: HAggregation,
    pub gamma_parameterization: GammaParameterization,
    /// Exponential decay rate r of tau(t) = exp(-r t); 0 disables the
    /// schedule.
    pub decay_r: f64,
    /// Safe terminal rate for the decay schedule; defaults to alpha0.
    pub alpha_inf: Option<f64>,
    /// beta2 used by the clip bound functions.
    pub clip_beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base: BaseRule::adam_default(),
            mode: HyperGradMode::None,
            alpha0: 0.001,
            hyper_lr: 1e-7,
            cam_lr: 0.01,
            gamma_init: vec![1.0],
            levels: vec![GroupingScheme::Global],
            aggregation: HAggregation::Mean,
            gamma_parameterization: GammaParameterization::DirectRenormalize,
            decay_r: 0.0,
            alpha_inf: None,
            clip_beta2: 0.999,
        }
    }
}

/// Everything a logger or monitor wants to know about one step.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub t: u64,
    pub gamma: Vec<f64>,
    /// Mean rate per level, coarsest first.
    pub alpha_level_mean: Vec<f64>,
    pub alpha_star_max_abs: f64,
    /// Per level: max over groups of the L2 norm of the gradient restricted
    /// to the group.
    pub grad_level_max_norm: Vec<f64>,
    /// Min and max emitted eta_t when clipping is active.
    pub eta_range: Option<(f64, f64)>,
}

pub struct Optimizer {
    pub cfg: OptimizerConfig,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    momentum_buf: Vec<f64>,
    prev_direction: Option<Vec<f64>>,
    tree: LrTree,
    /// Leaf-level group of each parameter.
    leaf_group_of: Vec<usize>,
    /// Per level: group sizes (for Sum-mode beta scaling and Mean reduce).
    level_group_sizes: Vec<Vec<usize>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, registry: &ParameterRegistry) -> Result<Self> {
        let (levels, gamma) = if cfg.mode.is_cam() {
            if cfg.levels.len() < 2 {
                return Err(Error::Config("multi-level mode needs at least two levels".into()));
            }
            (cfg.levels.clone(), cfg.gamma_init.clone())
        } else {
            (vec![GroupingScheme::Global], vec![1.0])
        };
        if cfg.mode.is_clipped() && !matches!(cfg.base, BaseRule::Adam { .. }) {
            return Err(Error::Config("bound clipping requires the adam base rule".into()));
        }
        let tree = LrTree::new(registry, &levels, cfg.alpha0, gamma, cfg.gamma_parameterization)?;
        let n = registry.n_params();
        let leaf = *levels.last().unwrap();
        let leaf_group_of = (0..n)
            .map(|p| registry.group_of(p, leaf))
            .collect::<Result<Vec<_>>>()?;
        let level_group_sizes = levels
            .iter()
            .map(|&l| registry.group_sizes(l))
            .collect::<Result<Vec<_>>>()?;
        Ok(Optimizer {
            cfg,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            momentum_buf: vec![0.0; n],
            prev_direction: None,
            tree,
            leaf_group_of,
            level_group_sizes,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn tree(&self) -> &LrTree {
        &self.tree
    }

    pub fn gamma(&self) -> &[f64] {
        &self.tree.gamma
    }

    /// Negative of the previous applied step direction, i.e. the gradient
    /// of the update rule with respect to the learning rate. Absent before
    /// the second step.
    pub fn grad_alpha_u(&self) -> Option<Vec<f64>> {
        self.prev_direction.as_ref().map(|d| d.iter().map(|&x| -x).collect())
    }

    /// Updates moment accumulators with the new gradient and returns the
    /// step direction m_t / sqrt(V_t).
    fn base_direction(&mut self, grads: &[f64]) -> Vec<f64> {
        match self.cfg.base {
            BaseRule::Sgd => grads.to_vec(),
            BaseRule::SgdNesterov { momentum } => {
                let mut dir = vec![0.0; grads.len()];
                for i in 0..grads.len() {
                    self.momentum_buf[i] = momentum * self.momentum_buf[i] + grads[i];
                    dir[i] = grads[i] + momentum * self.momentum_buf[i];
                }
                dir
            }
            BaseRule::Adam { beta1, beta2, eps } => {
                let t = self.t as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let mut dir = vec![0.0; grads.len()];
                for i in 0..grads.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grads[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grads[i] * grads[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    dir[i] = mhat / (vhat.sqrt() + eps);
                }
                dir
            }
        }
    }

    /// Per-level h values from the current gradient and previous direction.
    pub fn compute_h(
        &self,
        registry: &ParameterRegistry,
        grads: &[f64],
    ) -> Result<Option<Vec<Vec<f64>>>> {
        let Some(prev) = &self.prev_direction else {
            return Ok(None);
        };
        let h_p: Vec<f64> = grads.iter().zip(prev).map(|(&g, &d)| g * d).collect();
        let mode = match self.cfg.aggregation {
            HAggregation::Mean => ReduceMode::Mean,
            HAggregation::Sum => ReduceMode::Sum,
        };
        let mut out = Vec::with_capacity(self.tree.n_levels());
        for &lvl in &self.tree.levels {
            out.push(registry.group_reduce(&h_p, lvl, mode)?);
        }
        Ok(Some(out))
    }

    fn effective_rate_guard(&self, alpha_star_max_abs: f64) -> Result<()> {
        let cap = 1e3 * self.cfg.alpha0.abs();
        if alpha_star_max_abs > cap {
            return Err(Error::Numeric(format!(
                "effective rate {alpha_star_max_abs} exceeded {cap}; run diverged"
            )));
        }
        Ok(())
    }

    /// One optimizer step: consumes the gradient of the current parameters
    /// and applies the update in place.
    pub fn step(
        &mut self,
        registry: &ParameterRegistry,
        params: &mut [f64],
        grads: &[f64],
    ) -> Result<StepInfo> {
        if params.len() != registry.n_params() || grads.len() != registry.n_params() {
            return Err(Error::Dimension("params/grads length != registry".into()));
        }
        self.t += 1;
        let h = if self.cfg.mode.adapts() {
            self.compute_h(registry, grads)?
        } else {
            None
        };
        let direction = self.base_direction(grads);

        if let Some(h) = &h {
            match self.cfg.mode {
                HyperGradMode::HdAdditive => {
                    self.tree.alpha[0][0] += self.cfg.hyper_lr * h[0][0];
                }
                HyperGradMode::HdMultiplicative => {
                    let prev = self.prev_direction.as_ref().unwrap();
                    let gn = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                    let dn = prev.iter().map(|d| d * d).sum::<f64>().sqrt();
                    if gn > 0.0 && dn > 0.0 {
                        let dot: f64 = grads.iter().zip(prev).map(|(g, d)| g * d).sum();
                        let cos = dot / (gn * dn);
                        self.tree.alpha[0][0] *= 1.0 + self.cfg.hyper_lr * cos;
                    }
                }
                HyperGradMode::CamHd | HyperGradMode::AdaboundCamHd => {
                    self.cam_level_updates(h, grads)?;
                }
                _ => {}
            }
        }

        // effective per-leaf-group rates with the current gamma
        let virt = VirtualRates { alpha_hat: self.tree.alpha.clone() };
        let alpha_star = self.tree.combine(&virt)?;

        // combination-weight update, after alpha* is fixed for this step
        if let Some(h) = &h {
            if self.cfg.mode.is_cam() && self.cfg.cam_lr != 0.0 {
                self.gamma_update(h)?;
            }
        }

        let alpha_inf = self.cfg.alpha_inf.unwrap_or(self.cfg.alpha0);

        let max_abs = alpha_star.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        if self.cfg.mode.adapts() {
            self.effective_rate_guard(max_abs)?;
        }

        let mut eta_range: Option<(f64, f64)> = None;
        if self.cfg.mode.is_clipped() {
            let BaseRule::Adam { beta1, beta2, eps } = self.cfg.base else {
                unreachable!("checked at construction");
            };
            let (lo, hi) = eta_bounds(self.t, self.cfg.clip_beta2);
            let bc1 = 1.0 - beta1.powi(self.t as i32);
            let bc2 = 1.0 - beta2.powi(self.t as i32);
            let sqrt_t = (self.t as f64).sqrt();
            let mut emin = f64::INFINITY;
            let mut emax = f64::NEG_INFINITY;
            for (p, param) in params.iter_mut().enumerate() {
                let rate = alpha_star[self.leaf_group_of[p]];
                let rate = if self.cfg.decay_r > 0.0 {
                    kappa_schedule(rate, self.t, self.cfg.decay_r, alpha_inf)
                } else {
                    rate
                };
                let vhat = self.v[p] / bc2;
                let eta_hat = (rate / (vhat.sqrt() + eps)).clamp(lo, hi);
                let eta = eta_hat / sqrt_t;
                emin = emin.min(eta);
                emax = emax.max(eta);
                *param -= eta * self.m[p] / bc1;
            }
            eta_range = Some((emin, emax));
        } else {
            for (p, param) in params.iter_mut().enumerate() {
                let rate = alpha_star[self.leaf_group_of[p]];
                let rate = if self.cfg.decay_r > 0.0 {
                    kappa_schedule(rate, self.t, self.cfg.decay_r, alpha_inf)
                } else {
                    rate
                };
                *param -= rate * direction[p];
            }
        }

        let info = StepInfo {
            t: self.t,
            gamma: self.tree.gamma.clone(),
            alpha_level_mean: self
                .tree
                .alpha
                .iter()
                .map(|a| a.iter().sum::<f64>() / a.len() as f64)
                .collect(),
            alpha_star_max_abs: max_abs,
            grad_level_max_norm: self.grad_level_norms(registry, grads)?,
            eta_range,
        };
        self.prev_direction = Some(direction);
        Ok(info)
    }

    /// alpha_level += beta_level * gamma_level * h_level, each level with
    /// its own gamma-scaled hyper-gradient.
    fn cam_level_updates(&mut self, h: &[Vec<f64>], _grads: &[f64]) -> Result<()> {
        for lvl in 0..self.tree.n_levels() {
            let gamma = self.tree.gamma[lvl];
            for g in 0..self.tree.alpha[lvl].len() {
                let beta = self.level_beta(lvl, g);
                self.tree.alpha[lvl][g] += beta * gamma * h[lvl][g];
            }
        }
        Ok(())
    }

    /// Effective hyper-gradient rate for one group: shared beta in mean
    /// mode, group-size-scaled in the literal sum mode.
    pub fn level_beta(&self, level: usize, group: usize) -> f64 {
        match self.cfg.aggregation {
            HAggregation::Mean => self.cfg.hyper_lr,
            HAggregation::Sum => {
                self.cfg.hyper_lr * self.level_group_sizes[level][group] as f64
            }
        }
    }

    /// gamma_level += delta * sum_p h_p * alpha_{level(p), t-1}, expressed
    /// as a descent step on dL/dgamma = -sum_p h_p * alpha; scaled by
    /// tau(t) when the decay schedule is active.
    fn gamma_update(&mut self, h: &[Vec<f64>]) -> Result<()> {
        // per-level sums of h_p * alpha_prev over all parameters; using the
        // parameter-level h avoids double counting, and alpha here is the
        // level's rate at the ancestor group of each parameter.
        let n_levels = self.tree.n_levels();
        let mut grad = vec![0.0; n_levels];
        let leaf = n_levels - 1;
        let h_leaf = &h[leaf];
        let sizes = &self.level_group_sizes[leaf];
        for lvl in 0..n_levels {
            let mut acc = 0.0;
            for (g, &hv) in h_leaf.iter().enumerate() {
                // h_leaf is a mean in Mean mode; rescale to the group total
                // so the sum runs over parameters.
                let total_h = match self.cfg.aggregation {
                    HAggregation::Mean => hv * sizes[g] as f64,
                    HAggregation::Sum => hv,
                };
                let anc = self.tree.ancestor_group(g, lvl);
                acc += total_h * self.tree.alpha[lvl][anc];
            }
            grad[lvl] = -acc;
        }
        if self.cfg.decay_r > 0.0 {
            let tau = (-self.cfg.decay_r * self.t as f64).exp();
            for g in &mut grad {
                *g *= tau;
            }
        }
        self.tree.update_gamma(&grad, self.cfg.cam_lr)
    }

    fn grad_level_norms(
        &self,
        registry: &ParameterRegistry,
        grads: &[f64],
    ) -> Result<Vec<f64>> {
        let sq: Vec<f64> = grads.iter().map(|g| g * g).collect();
        let mut out = Vec::with_capacity(self.tree.n_levels());
        for &lvl in &self.tree.levels {
            let sums = registry.group_reduce(&sq, lvl, ReduceMode::Sum)?;
            out.push(sums.iter().cloned().fold(0.0f64, f64::max).sqrt());
        }
        Ok(out)
    }
}

/// Adabound-style bound functions: both converge to 0.1 as t grows.
pub fn eta_bounds(t: u64, beta2: f64) -> (f64, f64) {
    let d = 0.1 / ((1.0 - beta2) * t as f64 + 1.0);
    (0.1 - d, 0.1 + d)
}

/// Clips alpha_star / sqrt(V) into the shrinking bounds and rescales by
/// 1/sqrt(t).
pub fn adabound_clip(alpha_star: f64, v_t: f64, t: u64, beta2: f64) -> f64 {
    let (lo, hi) = eta_bounds(t, beta2);
    (alpha_star / v_t.sqrt()).clamp(lo, hi) / (t as f64).sqrt()
}

/// Convex interpolation kappa = tau(t) alpha_star + (1 - tau(t)) alpha_inf
/// with tau(t) = exp(-r t).
pub fn kappa_schedule(alpha_star: f64, t: u64, r: f64, alpha_inf: f64) -> f64 {
    let tau = (-r * t as f64).exp();
    tau * alpha_star + (1.0 - tau) * alpha_inf
}
