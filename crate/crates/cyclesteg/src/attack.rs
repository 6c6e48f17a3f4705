//! Adversarial map crafting: minimize |G(y) - x*| over the input map y, and
//! track the smallest L-infinity budget that reaches a target quality across
//! training checkpoints.
//!
//! Optimization runs in model space [-1,1]; budgets, perturbation norms, and
//! losses are reported in [0,1] pixel units (model-space values halved).

use std::path::Path;

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::nets::Generator;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackOptimizer {
    Adam,
    /// Plain gradient steps with a halving/doubling line search; guarantees a
    /// non-increasing loss curve.
    Backtracking,
}

#[derive(Clone, Copy, Debug)]
pub struct AttackConfig {
    pub steps: usize,
    pub optimizer: AttackOptimizer,
    pub lr: f64,
    /// L-infinity budget on y - y0 in [0,1] units; None = unbudgeted.
    pub budget: Option<f64>,
    /// Restrict the perturbation to the first N channels (defended threat
    /// model); None = all channels.
    pub optimize_channels: Option<usize>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            steps: 300,
            optimizer: AttackOptimizer::Adam,
            lr: 0.01,
            budget: None,
            optimize_channels: None,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.budget {
            if !(b > 0.0) {
                return Err(Error::InvalidConfig("attack budget must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Best iterate, model space (same channel count as the input).
    pub y_star: Tensor,
    /// Loss at y0 and after each accepted step, [0,1] units.
    pub loss_curve: Vec<f64>,
    /// max |y* - y0|, [0,1] units.
    pub perturbation_linf: f64,
    /// mean |y* - y0|, [0,1] units.
    pub perturbation_l1: f64,
    pub final_loss: f64,
    pub baseline_loss: f64,
}

/// What the attacker optimizes against: a frozen map-to-photo translator
/// with input gradients. Implemented for `Generator`; stubs implement it
/// directly in tests.
pub trait AttackTarget {
    fn forward(&self, y: &Tensor) -> Result<Tensor>;
    /// Mean-L1 distance of forward(y) to x_star (model units) and its
    /// gradient with respect to y.
    fn loss_and_grad(&self, y: &Tensor, x_star: &Tensor) -> Result<(f64, Tensor)>;
}

impl AttackTarget for Generator {
    fn forward(&self, y: &Tensor) -> Result<Tensor> {
        Generator::forward(self, y)
    }

    fn loss_and_grad(&self, y: &Tensor, x_star: &Tensor) -> Result<(f64, Tensor)> {
        let mut tape = crate::tape::Tape::new();
        let pv = self.params.register(&mut tape, false);
        let yv = tape.leaf(y.clone(), true);
        let out = self.forward_on(&mut tape, &pv, yv)?;
        let target = tape.leaf(x_star.clone(), false);
        let loss = tape.l1_loss(out, target)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let g = grads
            .get(yv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(y.shape()));
        Ok((value, g))
    }
}

/// Clamp an iterate to the model pixel range, the L-infinity ball around y0
/// (model-space radius = 2 * budget), and the untouched-channel constraint.
fn project(y: &mut Tensor, y0: &Tensor, budget01: Option<f64>, optimize_channels: Option<usize>) {
    let free = optimize_channels
        .map(|c| c * y.shape()[1] * y.shape()[2])
        .unwrap_or(y.numel());
    for (i, (v, &v0)) in y.data_mut().iter_mut().zip(y0.data()).enumerate() {
        if i >= free {
            *v = v0;
            continue;
        }
        if let Some(b) = budget01 {
            let r = 2.0 * b;
            *v = v.clamp(v0 - r, v0 + r);
        }
        *v = v.clamp(-1.0, 1.0);
    }
}

/// Eq. 3 analog: gradient descent on the input map. `y0` and `x_star` are
/// model-space tensors; see the module docs for units. Zero steps returns
/// the (projected) starting point and its baseline loss.
pub fn craft(target: &dyn AttackTarget, y0: &Tensor, x_star: &Tensor, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let mut y = y0.clone();
    project(&mut y, y0, cfg.budget, cfg.optimize_channels);
    let (mut loss, mut grad) = target.loss_and_grad(&y, x_star)?;
    let baseline_loss = loss / 2.0;
    let mut curve = vec![baseline_loss];
    let mut best = (loss, y.clone());
    let mut adam = AdamState::new(std::slice::from_ref(&y));
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        ..AdamConfig::default()
    };
    let mut bt_lr = cfg.lr;
    for step in 0..cfg.steps {
        if !loss.is_finite() || !grad.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient(step));
        }
        match cfg.optimizer {
            AttackOptimizer::Adam => {
                let mut params = vec![std::mem::replace(&mut y, Tensor::zeros(&[1]))];
                adam.step(&mut params, &[Some(grad.clone())], &adam_cfg)?;
                y = params.pop().expect("adam param");
                project(&mut y, y0, cfg.budget, cfg.optimize_channels);
                let (l, g) = target.loss_and_grad(&y, x_star)?;
                loss = l;
                grad = g;
            }
            AttackOptimizer::Backtracking => {
                // halve until the projected step does not increase the loss;
                // double the base rate after a first-try success
                let mut accepted = false;
                let mut tries = 0;
                while tries < 40 {
                    let mut cand = y.zip(&grad, |v, g| v - bt_lr * g).expect("shape");
                    project(&mut cand, y0, cfg.budget, cfg.optimize_channels);
                    let (l, g) = target.loss_and_grad(&cand, x_star)?;
                    if l <= loss {
                        if tries == 0 {
                            bt_lr *= 2.0;
                        }
                        y = cand;
                        loss = l;
                        grad = g;
                        accepted = true;
                        break;
                    }
                    bt_lr /= 2.0;
                    tries += 1;
                }
                if !accepted {
                    // no descent direction at this scale; the curve stays flat
                }
            }
        }
        if loss < best.0 {
            best = (loss, y.clone());
        }
        curve.push(match cfg.optimizer {
            // the backtracking rule never accepts an increase
            AttackOptimizer::Backtracking => loss / 2.0,
            // adam may overshoot; the curve records the running best
            AttackOptimizer::Adam => best.0 / 2.0,
        });
    }
    let (best_loss, y_star) = best;
    let diff = y_star.sub(y0)?;
    Ok(AttackResult {
        perturbation_linf: diff.max_abs() / 2.0,
        perturbation_l1: diff.mean_abs() / 2.0,
        final_loss: best_loss / 2.0,
        baseline_loss,
        loss_curve: curve,
        y_star,
    })
}

#[derive(Clone, Debug)]
pub struct BudgetPoint {
    pub epoch: usize,
    /// Smallest budget reaching the target, None if unattainable.
    pub required_budget: Option<f64>,
    pub final_loss: f64,
    pub baseline_loss: f64,
}

/// Bisect the L-infinity budget per checkpoint to the smallest value whose
/// budgeted attack reaches `target_quality` ([0,1]-unit loss). Unattainable
/// targets are recorded, not fatal.
pub fn track_over_checkpoints(
    targets: &[(usize, &dyn AttackTarget)],
    y0: &Tensor,
    x_star: &Tensor,
    cfg: &AttackConfig,
    target_quality: f64,
    bisect_iters: usize,
) -> Result<Vec<BudgetPoint>> {
    if targets.len() < 2 {
        return Err(Error::InvalidConfig(
            "track_over_checkpoints needs >= 2 checkpoints".into(),
        ));
    }
    let mut out = Vec::with_capacity(targets.len());
    for &(epoch, target) in targets {
        // feasibility at the full budget (the pixel range caps |y - y0| at 1)
        let full = craft(
            target,
            y0,
            x_star,
            &AttackConfig {
                budget: Some(1.0),
                ..*cfg
            },
        )?;
        if full.final_loss > target_quality {
            out.push(BudgetPoint {
                epoch,
                required_budget: None,
                final_loss: full.final_loss,
                baseline_loss: full.baseline_loss,
            });
            continue;
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut at_hi = full;
        for _ in 0..bisect_iters {
            let mid = 0.5 * (lo + hi);
            let r = craft(
                target,
                y0,
                x_star,
                &AttackConfig {
                    budget: Some(mid),
                    ..*cfg
                },
            )?;
            if r.final_loss <= target_quality {
                hi = mid;
                at_hi = r;
            } else {
                lo = mid;
            }
        }
        out.push(BudgetPoint {
            epoch,
            required_budget: Some(hi),
            final_loss: at_hi.final_loss,
            baseline_loss: at_hi.baseline_loss,
        });
    }
    Ok(out)
}

pub fn budget_curve_csv(points: &[BudgetPoint]) -> String {
    let mut out = String::from("epoch,required_budget,final_loss,baseline_loss\n");
    for p in points {
        let b = p
            .required_budget
            .map(|v| v.to_string())
            .unwrap_or_else(|| "unattained".into());
        out.push_str(&format!("{},{b},{},{}\n", p.epoch, p.final_loss, p.baseline_loss));
    }
    out
}

pub fn save_budget_curve(points: &[BudgetPoint], path: &Path) -> Result<()> {
    std::fs::write(path, budget_curve_csv(points))?;
    Ok(())
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("finite values"));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
