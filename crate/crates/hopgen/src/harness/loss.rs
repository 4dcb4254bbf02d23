//! Training objective: teacher-forced cross entropy plus weighted
//! binary cross entropy tying the answer mask to hop-reachable entities.

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::num::{Session, Tensor, Var};

/// Loss terms of one example. `bfs` is absent when the example has no
/// supervision targets or the weight is zero; `total` then equals `ce`.
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub bfs: Option<Var>,
}

/// Mean binary cross entropy between a `1 x g` prediction in (0, 1) and
/// a `1 x g` target of zeros and ones.
pub fn bce_mean(s: &mut Session, pred: Var, target: &Tensor) -> Result<Var> {
    let shape = (s.g.value(pred).rows(), s.g.value(pred).cols());
    if shape != (target.rows(), target.cols()) || shape.0 != 1 || shape.1 == 0 {
        return Err(Error::contract(
            "bce_mean",
            format!(
                "prediction {:?} and target {:?} must be matching nonempty rows",
                shape,
                (target.rows(), target.cols())
            ),
        ));
    }
    if target.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::contract("bce_mean", "targets must be 0 or 1"));
    }
    let y = s.g.constant(target.clone());
    let y_inv =
        s.g.constant(Tensor::from_fn(1, shape.1, |_, j| 1.0 - target.data()[j]));
    let ln_p = s.g.log(pred)?;
    let p_inv = s.g.one_minus(pred)?;
    let ln_p_inv = s.g.log(p_inv)?;
    let pos = s.g.mul(y, ln_p)?;
    let neg = s.g.mul(y_inv, ln_p_inv)?;
    let sum = s.g.add(pos, neg)?;
    let mean = s.g.mean_cols(sum)?;
    s.g.scale(mean, -1.0)
}

/// Combine per-step distributions and targets into the training loss.
/// PAD targets are skipped; the hop term is added as `lambda * bfs` only
/// when both a mask prediction and targets exist and `lambda > 0`.
pub fn compute_loss(
    s: &mut Session,
    dists: &[Var],
    targets: &[usize],
    soft_mask: Option<Var>,
    bfs_targets: Option<&Tensor>,
    lambda: f64,
) -> Result<LossParts> {
    if dists.len() != targets.len() {
        return Err(Error::contract(
            "compute_loss",
            format!(
                "{} distributions for {} targets",
                dists.len(),
                targets.len()
            ),
        ));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for (&dist, &target) in dists.iter().zip(targets) {
        if target == PAD {
            continue;
        }
        terms.push(s.g.nll(dist, target)?);
    }
    if terms.is_empty() {
        return Err(Error::contract("compute_loss", "every target is padding"));
    }
    let ce = s.g.mean_scalars(&terms)?;

    let bfs = match (soft_mask, bfs_targets) {
        (Some(mask), Some(y)) if lambda > 0.0 => Some(bce_mean(s, mask, y)?),
        _ => None,
    };
    let total = match bfs {
        Some(b) => {
            let scaled = s.g.scale(b, lambda)?;
            s.g.add(ce, scaled)?
        }
        None => ce,
    };
    Ok(LossParts { total, ce, bfs })
}

/// Cosine decay from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}
