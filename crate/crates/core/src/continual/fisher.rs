use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::model::{gradient, ModelParams};

/// Diagonal empirical Fisher over `Y`: the mean over samples of the squared
/// per-sample loss gradient at the gold label. Same column-major layout as `Y`.
pub fn fisher_importance(params: &ModelParams, samples: &[Sample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("fisher samples"));
    }
    let d = params.dim();
    let mut w = vec![0.0; d * d];
    for s in samples {
        let (_, g) = gradient(params, &s.prompt, s.gold())?;
        for (t, col) in &g.y {
            let base = *t as usize * d;
            for (acc, gv) in w[base..base + d].iter_mut().zip(col) {
                *acc += gv * gv;
            }
        }
    }
    let n = samples.len() as f64;
    w.iter_mut().for_each(|v| *v /= n);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::model::AttentionVariant;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_sample_hand_gradient() {
        let mut p = ModelParams::zeros(3, AttentionVariant::Linear);
        p.z_mut()[0] = 1.0;
        p.z_mut()[2] = 0.5;
        let s = Sample::new(vec![0, 2], vec![1], 0, 0, Split::PT_TRAIN);
        let w = fisher_importance(&p, &[s]).unwrap();
        // uniform prediction: r = (-1/3, 2/3, -1/3), dL/dy[o, s] = -z_s r_o
        let r = [-1.0 / 3.0, 2.0 / 3.0, -1.0 / 3.0];
        for o in 0..3 {
            assert_abs_diff_eq!(w[o], r[o] * r[o], epsilon = 1e-15);
            assert_abs_diff_eq!(w[2 * 3 + o], 0.25 * r[o] * r[o], epsilon = 1e-15);
            // token 1 never appears in a prompt
            assert_eq!(w[3 + o], 0.0);
        }
        assert!(fisher_importance(&p, &[]).is_err());
    }
}
