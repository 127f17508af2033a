//! Central finite-difference check of the full training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{LossOptions, ModelParams, Pass2};
use crate::error::Result;
use crate::types::{TokenId, TrainingExample};

/// Worst relative error per tensor, by name.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.per_tensor.iter().map(|t| t.1).fold(0.0, f64::max)
    }
}

/// Deterministic second-pass slot fillers, so the loss is a smooth function
/// of the parameters.
pub fn fixed_second_pass(ex: &[TrainingExample], vocab_size: usize) -> Vec<Vec<TokenId>> {
    ex.iter()
        .map(|e| {
            (0..e.msk_positions().len())
                .map(|k| ((8 + k * 3) % vocab_size) as TokenId)
                .collect()
        })
        .collect()
}

fn loss_and_grad(
    p: &ModelParams,
    ex: &[TrainingExample],
    opts: &LossOptions,
    fixed: &[Vec<TokenId>],
) -> Result<(f64, ModelParams)> {
    let refs: Vec<&TrainingExample> = ex.iter().collect();
    let mut g = p.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = p.chunk_loss(&refs, opts, Pass2::Fixed(fixed), &mut rng, &mut g, 0)?;
    Ok((r.total, g))
}

/// Compares the analytic gradient of the summed loss with central
/// differences of step `h` for every parameter. The relative error is
/// `|a - n| / max(|a|, |n|, 1e-6)`. Dropout must be off (`opts.train`
/// false) for the comparison to be meaningful.
pub fn check_gradients(p: &ModelParams, ex: &[TrainingExample], opts: &LossOptions, h: f64) -> Result<GradCheck> {
    let fixed = fixed_second_pass(ex, p.config.vocab_size);
    let (_, g) = loss_and_grad(p, ex, opts, &fixed)?;
    let analytic: Vec<(String, Vec<f64>)> = g
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data.clone()))
        .collect();
    let mut probe = p.clone();
    let mut per_tensor = Vec::with_capacity(analytic.len());
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe.tensors_mut()[ti].data[j];
            probe.tensors_mut()[ti].data[j] = orig + h;
            let up = loss_and_grad(&probe, ex, opts, &fixed)?.0;
            probe.tensors_mut()[ti].data[j] = orig - h;
            let down = loss_and_grad(&probe, ex, opts, &fixed)?.0;
            probe.tensors_mut()[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        per_tensor.push((name.clone(), worst));
    }
    Ok(GradCheck { per_tensor })
}
