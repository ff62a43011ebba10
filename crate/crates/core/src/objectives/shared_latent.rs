//! Non-contrastive assignments with in-batch negatives: InfoNCE over the
//! cross-entropy similarity `p_iᵀ log q_j + (log p_i)ᵀ q_j`, plus the entropy
//! regularizers.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::LOG_FLOOR;

use super::non_contrastive::{entropy_terms, Assignment};
use super::{
    ensure_pair, info_nce, log_softmax_backward, softmax_backward, LossOutput, RegularizerWeights, Temperature,
};

/// Floors log-probabilities at `LOG_FLOOR`, returning the mask of entries that
/// pass through unchanged.
fn clamp_log(log_p: &Matrix) -> (Matrix, Matrix) {
    let clamped = log_p.map(|l| l.max(LOG_FLOOR));
    let mask = log_p.map(|l| if l > LOG_FLOOR { 1.0 } else { 0.0 });
    (clamped, mask)
}

/// Cross-entropy similarity matrix `S_ij = p_iᵀ log q_j + (log p_i)ᵀ q_j`.
pub(crate) fn ce_similarity(p: &Matrix, log_p: &Matrix, q: &Matrix, log_q: &Matrix) -> Matrix {
    let mut s = p.matmul_t(log_q);
    s.add_scaled(&log_p.matmul_t(q), 1.0);
    s
}

pub fn shared_latent_loss(
    h_img: &Matrix,
    h_txt: &Matrix,
    temp: Temperature,
    w: RegularizerWeights,
) -> Result<LossOutput> {
    ensure_pair(h_img, h_txt, "shared_latent_loss")?;
    if h_img.rows() < 2 {
        return Err(Error::Precondition(
            "shared_latent_loss needs a batch of at least 2".into(),
        ));
    }
    let a = Assignment::new(h_img, 1.0)?;
    let b = Assignment::new(h_txt, 1.0)?;
    let (lp, mask_p) = clamp_log(&a.log_p);
    let (lq, mask_q) = clamp_log(&b.log_p);
    let sigma = temp.value();

    let sim = ce_similarity(&a.p, &lp, &b.p, &lq);
    let logits = sim.scale(1.0 / sigma);
    let (ce_tilde, d_logits) = info_nce(&logits);
    let temp_grad = -d_logits
        .data()
        .iter()
        .zip(logits.data())
        .map(|(d, z)| d * z)
        .sum::<f64>();
    let d_sim = d_logits.scale(1.0 / sigma);

    let g_p = d_sim.matmul(&lq);
    let g_lp = d_sim.matmul(&b.p).zip_map(&mask_p, |g, m| g * m);
    let g_lq = d_sim.t_matmul(&a.p).zip_map(&mask_q, |g, m| g * m);
    let g_q = d_sim.t_matmul(&lp);

    let mut g_img = softmax_backward(&a.p, &g_p);
    g_img.add_scaled(&log_softmax_backward(&a.p, &g_lp), 1.0);
    let mut g_txt = softmax_backward(&b.p, &g_q);
    g_txt.add_scaled(&log_softmax_backward(&b.p, &g_lq), 1.0);

    let ei = entropy_terms(&a);
    let et = entropy_terms(&b);
    let eh = 0.5 * (ei.eh + et.eh);
    let he = 0.5 * (ei.he + et.he);
    for (g, e) in [(&mut g_img, &ei), (&mut g_txt, &et)] {
        g.add_scaled(&e.grad_eh, 0.5 * w.lambda1);
        g.add_scaled(&e.grad_he, -0.5 * w.lambda2);
    }
    let value = ce_tilde + w.lambda1 * eh - w.lambda2 * he;
    Ok(LossOutput {
        value,
        grads: vec![g_img, g_txt],
        temp_grad,
        components: Default::default(),
    }
    .with_component("ce_tilde", ce_tilde)
    .with_component("eh", eh)
    .with_component("he", he))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cross_entropy_rows, softmax_rows};
    use crate::rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matched_one_hots_at_small_temperature() {
        let h = Matrix::from_fn(4, 6, |i, j| if i == j { 30.0 } else { 0.0 });
        let t = Temperature::from_value(0.05).unwrap();
        let out = shared_latent_loss(&h, &h, t, RegularizerWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert!(out.value < 1e-6, "{}", out.value);
    }

    #[test]
    fn zero_weights_reduce_to_infonce_over_ce_distance() {
        let mut r = rng::stream(0, 7);
        let hi = rng::normal_matrix(&mut r, 6, 9, 1.0);
        let ht = rng::normal_matrix(&mut r, 6, 9, 1.0);
        let sigma = 0.8;
        let out = shared_latent_loss(
            &hi,
            &ht,
            Temperature::from_value(sigma).unwrap(),
            RegularizerWeights::new(0.0, 0.0).unwrap(),
        )
        .unwrap();

        // direct route: similarities from row cross-entropies, then −log softmax of the diagonal
        let p = softmax_rows(&hi, 1.0).unwrap();
        let q = softmax_rows(&ht, 1.0).unwrap();
        let b = hi.rows();
        let mut loss = 0.0;
        for i in 0..b {
            let sims: Vec<f64> = (0..b)
                .map(|j| {
                    let pi = crate::ProbMatrix::from_rows(&[p.row(i)]).unwrap();
                    let qj = crate::ProbMatrix::from_rows(&[q.row(j)]).unwrap();
                    let a = cross_entropy_rows(&pi, &qj.log()).unwrap()[0];
                    let c = cross_entropy_rows(&qj, &pi.log()).unwrap()[0];
                    -(a + c) / sigma
                })
                .collect();
            let denom: f64 = sims.iter().map(|s| s.exp()).sum();
            loss -= (sims[i].exp() / denom).ln();
        }
        loss /= b as f64;
        assert_abs_diff_eq!(out.value, loss, epsilon = 1e-9);
    }

    #[test]
    fn needs_two_samples() {
        let h = Matrix::zeros(1, 4);
        let t = Temperature::from_value(1.0).unwrap();
        assert!(matches!(
            shared_latent_loss(&h, &h, t, RegularizerWeights::default()),
            Err(Error::Precondition(_))
        ));
    }
}
