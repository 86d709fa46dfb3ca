use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Smoothed target distribution for one position.
///
/// The gold token gets `1 − ε`; `ε` is spread evenly over the other allowed
/// tokens except PAD. Disallowed tokens get exactly zero. When the gold token
/// is the only candidate it keeps all the mass.
pub fn smoothing_distribution(gold: u32, eps: f64, pe_allowed: &[bool]) -> Result<Vec<f64>> {
    let g = gold as usize;
    if !pe_allowed.get(g).copied().unwrap_or(false) || gold == PAD_ID {
        return Err(Error::Data(format!(
            "target token {gold} is not an allowed post-edit token"
        )));
    }
    let others = pe_allowed
        .iter()
        .enumerate()
        .filter(|&(i, &ok)| ok && i != g && i as u32 != PAD_ID)
        .count();
    let mut q = vec![0.0; pe_allowed.len()];
    if others == 0 {
        q[g] = 1.0;
        return Ok(q);
    }
    let share = eps / others as f64;
    for (i, (&ok, slot)) in pe_allowed.iter().zip(q.iter_mut()).enumerate() {
        if ok && i != g && i as u32 != PAD_ID {
            *slot = share;
        }
    }
    q[g] = 1.0 - eps;
    Ok(q)
}

/// Label-smoothed cross-entropy averaged over the non-PAD targets.
///
/// `logits` has shape `[…, V]` with one row per entry of `targets`. Returns
/// the scalar loss and the number of counted targets.
pub fn smoothed_loss(g: &mut Graph, logits: Var, targets: &[u32], eps: f64, pe_allowed: &[bool]) -> Result<(Var, usize)> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let v = *g.shape(logits).last().expect("rank >= 1");
    if v != pe_allowed.len() || g.value(logits).len() != targets.len() * v {
        return Err(Error::Dimension(format!(
            "logits {:?} do not match {} targets over a vocabulary of {}",
            g.shape(logits),
            targets.len(),
            pe_allowed.len()
        )));
    }
    let counted = targets.iter().filter(|&&t| t != PAD_ID).count();
    if counted == 0 {
        return Err(Error::Data("batch has no non-padding targets".into()));
    }
    let mut weights = Vec::with_capacity(targets.len() * v);
    for &t in targets {
        if t == PAD_ID {
            weights.extend(std::iter::repeat_n(0.0, v));
        } else {
            weights.extend(smoothing_distribution(t, eps, pe_allowed)?);
        }
    }
    let flat = g.reshape(logits, &[targets.len(), v])?;
    let logp = g.log_softmax(flat, 1)?;
    let q = g.constant(Tensor::from_parts(vec![targets.len(), v], weights));
    let prod = g.mul(logp, q)?;
    let total = g.sum(prod);
    Ok((g.scale(total, -1.0 / counted as f64), counted))
}

/// `λ·ape + (1 − λ)·denoise`.
pub fn joint_loss(loss_ape: f64, loss_denoise: f64, lambda: f64) -> f64 {
    lambda * loss_ape + (1.0 - lambda) * loss_denoise
}
