//! Hierarchical learning-rate structure.
//!
//! Learning rates live on a tree that mirrors the parameter grouping
//! hierarchy: the root is the global rate, inner levels hold per-group
//! rates, leaves hold the finest granularity. Two equivalent controls exist
//! over how levels blend into the effective per-parameter rate:
//!
//!   * combination weights `gamma` (one per level, convex), and
//!   * pairwise L2 coefficients `lambda[(descendant, ancestor)]`,
//!
//! related by the `lambda_to_gamma` / `gamma_to_lambda` maps. Levels are
//! stored coarsest first, so `gamma.last()` is the leaf weight.

use crate::error::{Error, Result};
use crate::model::{GroupingScheme, ParameterRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaParameterization {
    /// Free gamma values renormalized by their common sum after each update.
    DirectRenormalize,
    /// Gamma as a softmax over logits; updates are routed to the logits.
    Softmax,
}

/// Regularization-free ("virtual") rates at the current step, one vector
/// per level, aligned with the tree's level order.
#[derive(Debug, Clone)]
pub struct VirtualRates {
    pub alpha_hat: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LrTree {
    /// Coarsest (root) first.
    pub levels: Vec<GroupingScheme>,
    /// Per level, per group.
    pub alpha: Vec<Vec<f64>>,
    /// Per level, aligned with `levels`; sums to 1.
    pub gamma: Vec<f64>,
    /// Softmax logits when the parameterization is `Softmax`.
    pub logits: Option<Vec<f64>>,
    /// lambda[i][j] for descendant level i, ancestor level j < i.
    pub lambda: Vec<Vec<f64>>,
    pub parameterization: GammaParameterization,
    /// For level i > 0: group -> parent group at level i-1.
    parent: Vec<Vec<usize>>,
}

impl LrTree {
    /// Builds a tree over `levels` (coarsest first) with every rate set to
    /// `alpha0`. Validates that consecutive levels nest in the registry.
    pub fn new(
        registry: &ParameterRegistry,
        levels: &[GroupingScheme],
        alpha0: f64,
        gamma: Vec<f64>,
        parameterization: GammaParameterization,
    ) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("lr tree needs at least one level".into()));
        }
        if gamma.len() != levels.len() {
            return Err(Error::Config(format!(
                "{} gamma weights for {} levels",
                gamma.len(),
                levels.len()
            )));
        }
        let sum: f64 = gamma.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("initial gamma sums to {sum}, want 1")));
        }
        let mut alpha = Vec::with_capacity(levels.len());
        let mut parent = Vec::with_capacity(levels.len());
        for (i, &lvl) in levels.iter().enumerate() {
            alpha.push(vec![alpha0; registry.n_groups(lvl)?]);
            if i == 0 {
                parent.push(Vec::new());
            } else {
                parent.push(registry.parent_map(lvl, levels[i - 1])?);
            }
        }
        let logits = match parameterization {
            GammaParameterization::Softmax => {
                if gamma.iter().any(|&g| g <= 0.0) {
                    return Err(Error::Config(
                        "softmax parameterization needs strictly positive gamma".into(),
                    ));
                }
                Some(gamma.iter().map(|g| g.ln()).collect())
            }
            GammaParameterization::DirectRenormalize => None,
        };
        Ok(LrTree {
            levels: levels.to_vec(),
            alpha,
            gamma,
            logits,
            lambda: (0..levels.len()).map(|i| vec![0.0; i]).collect(),
            parameterization,
            parent,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn n_leaf_groups(&self) -> usize {
        self.alpha.last().unwrap().len()
    }

    /// Ancestor group of leaf group `g` at level `level`.
    pub fn ancestor_group(&self, mut g: usize, level: usize) -> usize {
        for i in (level + 1..self.n_levels()).rev() {
            g = self.parent[i][g];
        }
        g
    }

    /// Pairwise-L2 regularization loss over all root-to-leaf paths:
    /// sum over paths, descendants i on the path, ancestors j of i of
    /// lambda[i][j] * (alpha_i - alpha_j)^2.
    pub fn lr_reg_loss(&self) -> f64 {
        let n = self.n_levels();
        let mut total = 0.0;
        for leaf in 0..self.n_leaf_groups() {
            // groups on the path for this leaf, per level
            let path: Vec<usize> = (0..n).map(|l| self.ancestor_group(leaf, l)).collect();
            for i in 1..n {
                for j in 0..i {
                    let d = self.alpha[i][path[i]] - self.alpha[j][path[j]];
                    total += self.lambda[i][j] * d * d;
                }
            }
        }
        total
    }

    /// Blends the virtual rates of every level into one effective rate per
    /// leaf group.
    pub fn combine(&self, virtual_rates: &VirtualRates) -> Result<Vec<f64>> {
        let sum: f64 = self.gamma.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::State(format!("gamma not normalized (sum {sum})")));
        }
        combine_with(self, &virtual_rates.alpha_hat, &self.gamma)
    }

    pub fn renormalize_gamma(&mut self) -> Result<()> {
        match self.parameterization {
            GammaParameterization::DirectRenormalize => {
                let sum: f64 = self.gamma.iter().sum();
                if sum <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "gamma sum {sum} <= 0; switch to the softmax parameterization"
                    )));
                }
                for g in &mut self.gamma {
                    *g /= sum;
                }
            }
            GammaParameterization::Softmax => {
                let logits = self.logits.as_ref().expect("softmax mode keeps logits");
                self.gamma = softmax_gamma(logits);
            }
        }
        Ok(())
    }

    /// Applies a raw gradient-descent step `gamma -= delta * grad` in
    /// whichever parameterization is active, then renormalizes.
    pub fn update_gamma(&mut self, grad: &[f64], delta: f64) -> Result<()> {
        match self.parameterization {
            GammaParameterization::DirectRenormalize => {
                for (g, &d) in self.gamma.iter_mut().zip(grad) {
                    *g -= delta * d;
                }
            }
            GammaParameterization::Softmax => {
                let logits = self.logits.as_mut().expect("softmax mode keeps logits");
                // chain rule through the softmax: dL/dc_k = g_k (grad_k - sum_j g_j grad_j)
                let inner: f64 = self.gamma.iter().zip(grad).map(|(g, d)| g * d).sum();
                for (k, c) in logits.iter_mut().enumerate() {
                    *c -= delta * self.gamma[k] * (grad[k] - inner);
                }
            }
        }
        self.renormalize_gamma()
    }
}

fn combine_with(tree: &LrTree, alpha_hat: &[Vec<f64>], gamma: &[f64]) -> Result<Vec<f64>> {
    let n = tree.n_levels();
    let leaves = alpha_hat
        .last()
        .ok_or_else(|| Error::Dimension("empty virtual rates".into()))?
        .len();
    let mut out = vec![0.0; leaves];
    for (leaf, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (lvl, g) in gamma.iter().enumerate().take(n) {
            acc += g * alpha_hat[lvl][tree.ancestor_group(leaf, lvl)];
        }
        *o = acc;
    }
    Ok(out)
}

/// Time-step stability regularizer on the global rate.
pub fn ts_reg_loss(alpha_g_t: f64, alpha_g_prev: f64, lambda_ts: f64) -> f64 {
    let d = alpha_g_t - alpha_g_prev;
    lambda_ts * d * d
}

/// One hyper-gradient step per group with no regularization:
/// alpha_hat = alpha_prev + beta * h.
pub fn virtual_update(alpha_prev: &[Vec<f64>], h_prev: &[Vec<f64>], beta: &[f64]) -> VirtualRates {
    let alpha_hat = alpha_prev
        .iter()
        .zip(h_prev)
        .zip(beta)
        .map(|((a, h), &b)| a.iter().zip(h).map(|(&a, &h)| a + b * h).collect())
        .collect();
    VirtualRates { alpha_hat }
}

/// Exact solution of the implicit two-level regularized update:
/// alpha_t = [alpha_prev + beta (h + 2 lambda alpha_g_t)] / (1 + 2 beta lambda).
pub fn closed_form_update(
    alpha_prev: &[f64],
    h_prev: &[f64],
    beta: f64,
    lambda: f64,
    alpha_g_t: f64,
) -> Result<Vec<f64>> {
    let denom = 1.0 + 2.0 * beta * lambda;
    if denom <= 0.0 {
        return Err(Error::Config(format!("1 + 2*beta*lambda = {denom} <= 0")));
    }
    Ok(alpha_prev
        .iter()
        .zip(h_prev)
        .map(|(&a, &h)| (a + beta * (h + 2.0 * lambda * alpha_g_t)) / denom)
        .collect())
}

/// Two-level update using the previous step's rates in the regularizer.
pub fn laststep_update(
    alpha_prev: &[f64],
    h_prev: &[f64],
    beta: f64,
    lambda: f64,
    alpha_g_prev: f64,
) -> Vec<f64> {
    alpha_prev
        .iter()
        .zip(h_prev)
        .map(|(&a, &h)| a - beta * (-h + 2.0 * lambda * (a - alpha_g_prev)))
        .collect()
}

/// Maps the path regularization coefficients of a leaf to combination
/// weights: gamma_j = 2 beta lambda_{leaf,j} for each ancestor level j,
/// gamma_leaf = 1 - sum of the others. `lambda_leaf` holds the leaf row,
/// coarsest ancestor first; the output is aligned coarsest-first with the
/// leaf weight last.
pub fn lambda_to_gamma(lambda_leaf: &[f64], beta: f64) -> Result<Vec<f64>> {
    let s: f64 = lambda_leaf.iter().sum();
    if 2.0 * beta * s >= 1.0 {
        return Err(Error::Config(format!(
            "2*beta*sum(lambda) = {} must stay below 1",
            2.0 * beta * s
        )));
    }
    let mut gamma: Vec<f64> = lambda_leaf.iter().map(|&l| 2.0 * beta * l).collect();
    let rest: f64 = gamma.iter().sum();
    gamma.push(1.0 - rest);
    Ok(gamma)
}

/// Inverse of [`lambda_to_gamma`]: recovers the ancestor lambdas from the
/// combination weights.
pub fn gamma_to_lambda(gamma: &[f64], beta: f64) -> Result<Vec<f64>> {
    if beta == 0.0 {
        return Err(Error::Config("beta must be nonzero to invert".into()));
    }
    Ok(gamma[..gamma.len() - 1].iter().map(|&g| g / (2.0 * beta)).collect())
}

/// Positive normalized weights from logits, with max-subtraction.
pub fn softmax_gamma(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|c| (c - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Measured and predicted virtual-approximation error for a two-level
/// instance: the prediction is -4 beta^2 lambda^2 (alpha_l_t - alpha_g_t)
/// evaluated at the regularized (closed-form) current rates.
pub fn approx_error(
    alpha_star: f64,
    alpha_closed: f64,
    beta: f64,
    lambda: f64,
    alpha_l_t: f64,
    alpha_g_t: f64,
) -> (f64, f64) {
    let measured = alpha_star - alpha_closed;
    let predicted = -4.0 * beta * beta * lambda * lambda * (alpha_l_t - alpha_g_t);
    (measured, predicted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn two_level_tree(lambda: f64) -> LrTree {
        let reg = ParameterRegistry::from_layer_sizes(&[2, 3]);
        let mut tree = LrTree::new(
            &reg,
            &[GroupingScheme::Global, GroupingScheme::Layer],
            0.01,
            vec![0.5, 0.5],
            GammaParameterization::DirectRenormalize,
        )
        .unwrap();
        tree.lambda[1][0] = lambda;
        tree
    }

    #[test]
    fn reg_loss_zero_when_rates_equal() {
        let tree = two_level_tree(5.0);
        assert_eq!(tree.lr_reg_loss(), 0.0);
    }

    #[test]
    fn reg_loss_two_level_hand_case() {
        let mut tree = two_level_tree(5.0);
        tree.alpha[0] = vec![0.02];
        tree.alpha[1] = vec![0.01, 0.03];
        assert!((tree.lr_reg_loss() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn reg_loss_matches_bruteforce_three_level() {
        let reg = ParameterRegistry::from_layer_sizes(&[2, 3]);
        let mut tree = LrTree::new(
            &reg,
            &[GroupingScheme::Global, GroupingScheme::Layer, GroupingScheme::Parameter],
            0.01,
            vec![0.2, 0.3, 0.5],
            GammaParameterization::DirectRenormalize,
        )
        .unwrap();
        let mut rng = Rng::new(17);
        for lv in &mut tree.alpha {
            for a in lv.iter_mut() {
                *a = rng.uniform(0.0, 0.1);
            }
        }
        tree.lambda[1][0] = 2.0;
        tree.lambda[2][0] = 3.0;
        tree.lambda[2][1] = 4.0;
        // brute force over (path, descendant, ancestor)
        let mut want = 0.0;
        for leaf in 0..5 {
            let path = [
                tree.ancestor_group(leaf, 0),
                tree.ancestor_group(leaf, 1),
                leaf,
            ];
            for i in 1..3 {
                for j in 0..i {
                    let d = tree.alpha[i][path[i]] - tree.alpha[j][path[j]];
                    want += tree.lambda[i][j] * d * d;
                }
            }
        }
        assert!((tree.lr_reg_loss() - want).abs() < 1e-12);
        assert!(tree.lr_reg_loss() >= 0.0);
    }

    #[test]
    fn ts_reg_cases() {
        assert_eq!(ts_reg_loss(0.01, 0.01, 3.0), 0.0);
        assert!((ts_reg_loss(0.02, 0.01, 1.0) - 1e-4).abs() < 1e-18);
        assert_eq!(ts_reg_loss(0.9, -0.3, 0.0), 0.0);
    }

    #[test]
    fn virtual_update_cases() {
        let a = vec![vec![0.1], vec![0.1, 0.1]];
        let zero_h = vec![vec![0.0], vec![0.0, 0.0]];
        let v = virtual_update(&a, &zero_h, &[0.01, 0.01]);
        assert_eq!(v.alpha_hat, a);
        let v = virtual_update(&[vec![0.1]], &[vec![5.0]], &[0.01]);
        assert!((v.alpha_hat[0][0] - 0.15).abs() < 1e-15);
        // lambda = 0 closed form reduces to the virtual update
        let cf = closed_form_update(&[0.1], &[5.0], 0.01, 0.0, 0.7).unwrap();
        assert_eq!(cf[0], v.alpha_hat[0][0]);
    }

    #[test]
    fn combine_cases() {
        let tree = two_level_tree(0.0);
        // degenerate weight on the leaf level picks the leaf rates exactly
        let mut t = tree.clone();
        t.gamma = vec![0.0, 1.0];
        let v = VirtualRates { alpha_hat: vec![vec![0.02], vec![0.01, 0.03]] };
        assert_eq!(t.combine(&v).unwrap(), vec![0.01, 0.03]);
        // hand-evaluated two-level blend
        t.gamma = vec![0.8, 0.2];
        let got = t.combine(&v).unwrap();
        assert!((got[0] - 0.018).abs() < 1e-15);
        // consensus: all levels share a value
        let v = VirtualRates { alpha_hat: vec![vec![0.05], vec![0.05, 0.05]] };
        t.gamma = vec![0.3, 0.7];
        for a in t.combine(&v).unwrap() {
            assert!((a - 0.05).abs() < 1e-15);
        }
        // unnormalized gamma is a state error
        t.gamma = vec![0.5, 0.9];
        assert!(matches!(t.combine(&v), Err(Error::State(_))));
    }

    #[test]
    fn closed_form_hand_case() {
        let got = closed_form_update(&[0.1], &[0.0], 0.01, 5.0, 0.2).unwrap();
        assert!((got[0] - 0.12 / 1.1).abs() < 1e-15);
        // residual of the implicit equation
        let (a_prev, h, beta, lambda, a_g) = (0.1, 0.0, 0.01, 5.0, 0.2);
        let a_t = got[0];
        let residual = a_t - a_prev + beta * (-h + 2.0 * lambda * (a_t - a_g));
        assert!(residual.abs() < 1e-12);
        assert!(closed_form_update(&[0.1], &[0.0], 1.0, -0.6, 0.2).is_err());
    }

    #[test]
    fn laststep_cases() {
        // lambda = 0 equals virtual update
        let ls = laststep_update(&[0.1, 0.2], &[1.0, -2.0], 0.01, 0.0, 0.5);
        let v = virtual_update(&[vec![0.1, 0.2]], &[vec![1.0, -2.0]], &[0.01]);
        assert_eq!(ls, v.alpha_hat[0]);
        // equal rates at t-1: regularizer contributes nothing
        let ls = laststep_update(&[0.3], &[2.0], 0.01, 7.0, 0.3);
        assert!((ls[0] - 0.32).abs() < 1e-15);
        // random instance against the hand formula
        let (a, h, b, l, g) = (0.07, -1.3, 0.02, 4.0, 0.011);
        let got = laststep_update(&[a], &[h], b, l, g)[0];
        assert!((got - (a - b * (-h + 2.0 * l * (a - g)))).abs() < 1e-15);
    }

    #[test]
    fn lambda_gamma_roundtrip_and_hand_case() {
        assert_eq!(lambda_to_gamma(&[0.0, 0.0], 0.01).unwrap(), vec![0.0, 0.0, 1.0]);
        // beta=0.01, lambda_{leaf,global}=5, lambda_{leaf,layer}=10
        let gamma = lambda_to_gamma(&[5.0, 10.0], 0.01).unwrap();
        assert!((gamma[0] - 0.1).abs() < 1e-15); // global = 2*beta*lambda2
        assert!((gamma[1] - 0.2).abs() < 1e-15); // layer  = 2*beta*lambda3
        assert!((gamma[2] - 0.7).abs() < 1e-15); // leaf
        let back = gamma_to_lambda(&gamma, 0.01).unwrap();
        assert!((back[0] - 5.0).abs() < 1e-12);
        assert!((back[1] - 10.0).abs() < 1e-12);
        assert!(lambda_to_gamma(&[100.0], 0.01).is_err());
    }

    #[test]
    fn renormalize_cases() {
        let mut tree = two_level_tree(0.0);
        tree.gamma = vec![0.3, 0.9];
        tree.renormalize_gamma().unwrap();
        assert!((tree.gamma[0] - 0.25).abs() < 1e-15);
        assert!((tree.gamma[1] - 0.75).abs() < 1e-15);
        let before = tree.gamma.clone();
        tree.renormalize_gamma().unwrap();
        assert_eq!(tree.gamma, before);
        tree.gamma = vec![-0.5, 0.2];
        let err = tree.renormalize_gamma().unwrap_err();
        assert!(err.to_string().contains("softmax"));
    }

    #[test]
    fn softmax_cases() {
        let g = softmax_gamma(&[0.0, 0.0, 0.0]);
        for v in &g {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let g = softmax_gamma(&[2.0f64.ln(), 0.0, 0.0]);
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!((g[1] - 0.25).abs() < 1e-15);
        let shifted = softmax_gamma(&[2.0f64.ln() + 7.0, 7.0, 7.0]);
        for (a, b) in g.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn approx_error_matches_measured() {
        let mut rng = Rng::new(99);
        for _ in 0..200 {
            let beta = rng.uniform(1e-4, 0.05);
            let lambda = rng.uniform(0.0, 4.0);
            if 2.0 * beta * lambda >= 1.0 {
                continue;
            }
            let a_l = rng.uniform(0.0, 0.1);
            let a_g = rng.uniform(0.0, 0.1);
            let h_l = rng.normal();
            let h_g = rng.normal();
            let hat_l = a_l + beta * h_l;
            let hat_g = a_g + beta * h_g;
            let closed = closed_form_update(&[a_l], &[h_l], beta, lambda, hat_g).unwrap()[0];
            let star = (1.0 - 2.0 * beta * lambda) * hat_l + 2.0 * beta * lambda * hat_g;
            let (measured, predicted) = approx_error(star, closed, beta, lambda, closed, hat_g);
            assert!(
                (measured - predicted).abs() < 1e-10,
                "measured {measured} predicted {predicted}"
            );
        }
        // consensus and lambda = 0 cases
        let (m, p) = approx_error(0.02, 0.02, 0.01, 3.0, 0.05, 0.05);
        assert_eq!(p, 0.0);
        assert_eq!(m, 0.0);
        let (_, p) = approx_error(0.02, 0.02, 0.01, 0.0, 0.01, 0.09);
        assert_eq!(p, 0.0);
    }

    proptest! {
        #[test]
        fn gamma_sums_to_one_after_renormalize(
            a in 0.01f64..10.0, b in 0.01f64..10.0, c in 0.01f64..10.0
        ) {
            let reg = ParameterRegistry::from_layer_sizes(&[2, 3]);
            let mut tree = LrTree::new(
                &reg,
                &[GroupingScheme::Global, GroupingScheme::Layer, GroupingScheme::Parameter],
                0.01,
                vec![0.2, 0.3, 0.5],
                GammaParameterization::DirectRenormalize,
            ).unwrap();
            tree.gamma = vec![a, b, c];
            tree.renormalize_gamma().unwrap();
            prop_assert!((tree.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn lambda_to_gamma_sums_to_one(
            l1 in 0.0f64..20.0, l2 in 0.0f64..20.0, beta in 1e-5f64..0.01
        ) {
            let gamma = lambda_to_gamma(&[l1, l2], beta).unwrap();
            prop_assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn combine_is_affine_in_gamma(
            mix in 0.0f64..1.0, seed in 0u64..500
        ) {
            let mut rng = Rng::new(seed);
            let tree = two_level_tree(0.0);
            let v = VirtualRates { alpha_hat: vec![
                vec![rng.uniform(0.0, 0.1)],
                vec![rng.uniform(0.0, 0.1), rng.uniform(0.0, 0.1)],
            ]};
            let g1 = {
                let x = rng.uniform(0.0, 1.0);
                vec![x, 1.0 - x]
            };
            let g2 = {
                let x = rng.uniform(0.0, 1.0);
                vec![x, 1.0 - x]
            };
            let mut ta = tree.clone();
            ta.gamma = g1.clone();
            let ca = ta.combine(&v).unwrap();
            let mut tb = tree.clone();
            tb.gamma = g2.clone();
            let cb = tb.combine(&v).unwrap();
            let mut tm = tree.clone();
            tm.gamma = vec![
                mix * g1[0] + (1.0 - mix) * g2[0],
                mix * g1[1] + (1.0 - mix) * g2[1],
            ];
            let cm = tm.combine(&v).unwrap();
            for i in 0..cm.len() {
                let want = mix * ca[i] + (1.0 - mix) * cb[i];
                prop_assert!((cm[i] - want).abs() < 1e-12);
            }
        }
    }
}
