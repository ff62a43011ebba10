use crate::error::Result;
use crate::matrix::Matrix;
use crate::numerics::l2_normalize_with_norms;

use super::{ensure_pair, info_nce, LossOutput, Temperature};

/// Symmetrized InfoNCE over the cosine similarities `u_i · v_j / σ`.
///
/// Inputs are the raw projected features; the row normalization is part of
/// the loss and its Jacobian is folded into the returned gradients.
pub fn clip_loss(g_img: &Matrix, g_txt: &Matrix, temp: Temperature) -> Result<LossOutput> {
    ensure_pair(g_img, g_txt, "clip_loss")?;
    let (u, u_norms) = l2_normalize_with_norms(g_img)?;
    let (v, v_norms) = l2_normalize_with_norms(g_txt)?;
    let sigma = temp.value();

    let logits = u.matmul_t(&v).scale(1.0 / sigma);
    let (l_i2t, d_i2t) = info_nce(&logits);
    let (l_t2i, d_t2i) = info_nce(&logits.transpose());
    let value = 0.5 * (l_i2t + l_t2i);

    let mut d_logits = d_i2t;
    d_logits.add_scaled(&d_t2i.transpose(), 1.0);
    d_logits.scale_in_place(0.5);

    // logits = S / σ with σ = exp(ln σ), so d logits / d ln σ = −logits
    let temp_grad = -d_logits
        .data()
        .iter()
        .zip(logits.data())
        .map(|(d, z)| d * z)
        .sum::<f64>();

    let d_sim = d_logits.scale(1.0 / sigma);
    let d_u = d_sim.matmul(&v);
    let d_v = d_sim.t_matmul(&u);

    Ok(LossOutput {
        value,
        grads: vec![
            normalize_backward(&u, &u_norms, &d_u),
            normalize_backward(&v, &v_norms, &d_v),
        ],
        temp_grad,
        components: Default::default(),
    }
    .with_component("info_nce", value))
}

/// Backward through `u = g / ‖g‖`: `(du − u (uᵀdu)) / ‖g‖`.
pub(crate) fn normalize_backward(u: &Matrix, norms: &[f64], d_u: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(u.rows(), u.cols());
    for (i, &norm) in norms.iter().enumerate().take(u.rows()) {
        let ur = u.row(i);
        let dr = d_u.row(i);
        let proj: f64 = ur.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, &uv), &dv) in out.row_mut(i).iter_mut().zip(ur).zip(dr) {
            *o = (dv - uv * proj) / norm;
        }
    }
    out
}
