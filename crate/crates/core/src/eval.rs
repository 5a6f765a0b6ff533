//! Windowed causal evaluation: per-branch negative log-likelihood and perplexity.

use crate::autograd::row_nll;
use crate::error::{Error, Result};
use crate::model::{FamilialModel, ForwardPass};
use crate::train::next_token_targets;

#[derive(Clone, Debug, PartialEq)]
pub struct BranchNll {
    pub total: f64,
    pub count: usize,
}

impl BranchNll {
    pub fn mean(&self) -> f64 {
        self.total / self.count as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean().exp()
    }
}

/// Summed next-token NLL of every exit over the windows. Each window is
/// evaluated independently from position zero.
pub fn evaluate(model: &FamilialModel, windows: &[Vec<u32>]) -> Result<Vec<BranchNll>> {
    let mut out = vec![BranchNll { total: 0.0, count: 0 }; model.n_exits()];
    for window in windows {
        let batch = std::slice::from_ref(window);
        let targets = next_token_targets(batch);
        let mut pass = ForwardPass::new(model, batch, false)?;
        let logits = pass.all_branches()?;
        for (k, id) in logits.into_iter().enumerate() {
            let v = pass.graph.value(id);
            for (row, target) in targets.iter().enumerate() {
                if let Some(t) = target {
                    out[k].total += row_nll(v.row(row), *t);
                    out[k].count += 1;
                }
            }
        }
    }
    if out.iter().any(|b| b.count == 0) {
        return Err(Error::Data("evaluation text has no next-token targets".into()));
    }
    Ok(out)
}

pub fn perplexities(model: &FamilialModel, windows: &[Vec<u32>]) -> Result<Vec<f64>> {
    Ok(evaluate(model, windows)?.iter().map(BranchNll::perplexity).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FamilyConfig;

    #[test]
    fn untrained_model_is_near_uniform() {
        let model = FamilialModel::init(FamilyConfig::desk(), 3).unwrap();
        let w = vec![(0..40u32).collect::<Vec<_>>(), (100..120).collect()];
        let ppl = perplexities(&model, &w).unwrap();
        for p in ppl {
            assert!((p / 259.0 - 1.0).abs() < 0.2, "{p}");
        }
        assert!(evaluate(&model, &[vec![5]]).is_err());
    }
}
