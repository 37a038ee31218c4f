use super::data::Batch;
use super::Result;
use midband_autodiff::{Real, Tape, Tensor, Var};

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub nmse: Var,
    pub phy: Var,
}

fn vector<T: Real>(tape: &mut Tape<T>, values: &[f64]) -> Var {
    let data = values.iter().map(|&v| T::lit(v)).collect();
    tape.constant(Tensor::from_vec(vec![values.len()], data).expect("vector"))
}

/// Per-sample squared Frobenius norm `[B, ...] -> [B]`.
fn energy<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    Ok(tape.sum_trailing(sq, 1)?)
}

/// `sum_i w_i ||pred_i - truth_i||^2`; with `w_i = 1 / (||truth_i||^2 n)`
/// this is the batch mean of per-sample NMSE over the `n` samples with
/// nonzero truth.
pub fn nmse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, truth: Var, weight: &[f64]) -> Result<Var> {
    let diff = tape.sub(pred, truth)?;
    let e = energy(tape, diff)?;
    let w = vector(tape, weight);
    let we = tape.mul(e, w)?;
    Ok(tape.sum_all(we)?)
}

/// Batch mean of `(target_i - scale_sq_i * ||pred_i||^2)^2`: the gap
/// between the field-side received power and the power the estimate
/// carries, both in normalized units.
pub fn phy_loss<T: Real>(tape: &mut Tape<T>, pred: Var, scale_sq: &[f64], target: &[f64]) -> Result<Var> {
    let e = energy(tape, pred)?;
    let s = vector(tape, scale_sq);
    let p = tape.mul(e, s)?;
    let t = vector(tape, target);
    let gap = tape.sub(t, p)?;
    let sq = tape.mul(gap, gap)?;
    Ok(tape.mean_all(sq)?)
}

/// `nmse + zeta * phy` for a batch whose network output is `pred`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, pred: Var, batch: &Batch<T>, zeta: f64) -> Result<LossTerms> {
    let truth = tape.constant(batch.targets.clone());
    let nmse = nmse_loss(tape, pred, truth, &batch.nmse_weight)?;
    let phy = phy_loss(tape, pred, &batch.scale_sq, &batch.rss_target)?;
    let weighted = tape.scale(phy, T::lit(zeta))?;
    let total = tape.add(nmse, weighted)?;
    Ok(LossTerms { total, nmse, phy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn nmse_closed_forms() {
        let h = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
        let w: Vec<f64> = [5.25, 10.0].iter().map(|e| 1.0 / (e * 2.0)).collect();
        for (factor, want) in [(1.0, 0.0), (0.0, 1.0), (2.0, 1.0)] {
            let mut tape = Tape::new();
            let scaled: Vec<f64> = h.data().iter().map(|v| v * factor).collect();
            let p = tape.param(Tensor::from_vec(vec![2, 3], scaled).unwrap());
            let t = tape.constant(h.clone());
            let l = nmse_loss(&mut tape, p, t, &w).unwrap();
            assert!((scalar(&tape, l) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn phy_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::<f64>::zeros(&[2, 2]));
        let l = phy_loss(&mut tape, p, &[1.0, 1.0], &[3.0, 1.0]).unwrap();
        assert_eq!(scalar(&tape, l), 5.0);
        let mut tape = Tape::new();
        let p = tape.param(Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let l = phy_loss(&mut tape, p, &[0.5], &[2.5]).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }
}
