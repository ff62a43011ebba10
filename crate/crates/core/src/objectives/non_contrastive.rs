use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{clamped_ln, column_means, log_softmax_rows, softmax_rows, xlogy};

use super::contrastive::clip_loss;
use super::{ensure_pair, LossOutput, MixWeights, RegularizerWeights, Temperature};

/// Softmax assignment of one modality together with its log.
pub(crate) struct Assignment {
    pub p: Matrix,
    pub log_p: Matrix,
}

impl Assignment {
    pub fn new(logits: &Matrix, temperature: f64) -> Result<Self> {
        Ok(Self {
            p: softmax_rows(logits, temperature)?.into_matrix(),
            log_p: log_softmax_rows(logits, temperature)?,
        })
    }
}

/// Per-modality entropy terms with gradients taken with respect to the
/// softmax input (callers divide by the softmax temperature).
pub(crate) struct EntropyTerms {
    /// Mean per-row entropy.
    pub eh: f64,
    /// Entropy of the batch-mean distribution.
    pub he: f64,
    pub grad_eh: Matrix,
    pub grad_he: Matrix,
}

pub(crate) fn entropy_terms(a: &Assignment) -> EntropyTerms {
    let (b, k) = a.p.shape();
    let bf = b as f64;
    let mut eh = 0.0;
    let mut grad_eh = Matrix::zeros(b, k);
    for i in 0..b {
        let p = a.p.row(i);
        let lp = a.log_p.row(i);
        let h = -p.iter().zip(lp).map(|(&x, &l)| xlogy(x, l)).sum::<f64>();
        eh += h;
        for ((g, &x), &l) in grad_eh.row_mut(i).iter_mut().zip(p).zip(lp) {
            *g = -x * (l + h) / bf;
        }
    }
    eh /= bf;

    let mean = column_means(&a.p);
    let log_mean: Vec<f64> = mean.iter().map(|&m| clamped_ln(m)).collect();
    let he = -mean.iter().zip(&log_mean).map(|(&m, &l)| xlogy(m, l)).sum::<f64>();
    let mut grad_he = Matrix::zeros(b, k);
    for i in 0..b {
        let p = a.p.row(i);
        let inner: f64 = p.iter().zip(&log_mean).map(|(x, l)| x * l).sum();
        for ((g, &x), &l) in grad_he.row_mut(i).iter_mut().zip(p).zip(&log_mean) {
            *g = x * (inner - l) / bf;
        }
    }
    EntropyTerms {
        eh,
        he,
        grad_eh,
        grad_he,
    }
}

/// Symmetrized cross-entropy `mean_i −(p_iᵀ log q_i + q_iᵀ log p_i) / 2` and its
/// gradients with respect to both softmax inputs (temperature 1).
fn symmetric_ce(a: &Assignment, b: &Assignment) -> (f64, Matrix, Matrix) {
    let (n, k) = a.p.shape();
    let nf = n as f64;
    let mut value = 0.0;
    let mut ga = Matrix::zeros(n, k);
    let mut gb = Matrix::zeros(n, k);
    for i in 0..n {
        let (p, lp) = (a.p.row(i), a.log_p.row(i));
        let (q, lq) = (b.p.row(i), b.log_p.row(i));
        let p_lq: f64 = p.iter().zip(lq).map(|(&x, &l)| xlogy(x, l)).sum();
        let q_lp: f64 = q.iter().zip(lp).map(|(&x, &l)| xlogy(x, l)).sum();
        value -= 0.5 * (p_lq + q_lp);
        let scale = 0.5 / nf;
        for j in 0..k {
            ga[(i, j)] = scale * (-p[j] * (lq[j] - p_lq) + p[j] - q[j]);
            gb[(i, j)] = scale * (-q[j] * (lp[j] - q_lp) + q[j] - p[j]);
        }
    }
    (value / nf, ga, gb)
}

/// Symmetrized cross-entropy between the cluster assignments of the two
/// modalities. Both branches receive gradients.
pub fn nclip_ce(h_img: &Matrix, h_txt: &Matrix) -> Result<LossOutput> {
    ensure_pair(h_img, h_txt, "nclip_ce")?;
    let a = Assignment::new(h_img, 1.0)?;
    let b = Assignment::new(h_txt, 1.0)?;
    let (value, ga, gb) = symmetric_ce(&a, &b);
    Ok(LossOutput {
        value,
        grads: vec![ga, gb],
        temp_grad: 0.0,
        components: Default::default(),
    }
    .with_component("ce", value))
}

/// Sharpness (`L_EH`, mean row entropy) and smoothness (`L_HE`, entropy of the
/// batch mean) terms, each averaged over the two modalities.
pub fn entropy_regularizers(h_img: &Matrix, h_txt: &Matrix) -> Result<(LossOutput, LossOutput)> {
    ensure_pair(h_img, h_txt, "entropy_regularizers")?;
    let ti = entropy_terms(&Assignment::new(h_img, 1.0)?);
    let tt = entropy_terms(&Assignment::new(h_txt, 1.0)?);
    let eh = 0.5 * (ti.eh + tt.eh);
    let he = 0.5 * (ti.he + tt.he);
    let eh_out = LossOutput {
        value: eh,
        grads: vec![ti.grad_eh.scale(0.5), tt.grad_eh.scale(0.5)],
        temp_grad: 0.0,
        components: Default::default(),
    }
    .with_component("eh", eh);
    let he_out = LossOutput {
        value: he,
        grads: vec![ti.grad_he.scale(0.5), tt.grad_he.scale(0.5)],
        temp_grad: 0.0,
        components: Default::default(),
    }
    .with_component("he", he);
    Ok((eh_out, he_out))
}

/// `CE + λ1·EH − λ2·HE`.
pub fn nclip_loss(h_img: &Matrix, h_txt: &Matrix, w: RegularizerWeights) -> Result<LossOutput> {
    let ce = nclip_ce(h_img, h_txt)?;
    let (eh, he) = entropy_regularizers(h_img, h_txt)?;
    let value = ce.value + w.lambda1 * eh.value - w.lambda2 * he.value;
    let grads = (0..2)
        .map(|m| {
            let mut g = ce.grads[m].clone();
            g.add_scaled(&eh.grads[m], w.lambda1);
            g.add_scaled(&he.grads[m], -w.lambda2);
            g
        })
        .collect();
    Ok(LossOutput {
        value,
        grads,
        temp_grad: 0.0,
        components: Default::default(),
    }
    .with_component("ce", ce.value)
    .with_component("eh", eh.value)
    .with_component("he", he.value)
    .with_component("kl", ce.value - eh.value)
    .with_component("nclip", value))
}

/// `λ_CLIP · clip_loss(g) + λ_nCLIP · nclip_loss(h)`. Gradients are ordered
/// `[g_img, g_txt, h_img, h_txt]`; σ only enters the contrastive term.
#[allow(clippy::too_many_arguments)]
pub fn xclip_loss(
    g_img: &Matrix,
    g_txt: &Matrix,
    h_img: &Matrix,
    h_txt: &Matrix,
    temp: Temperature,
    w: RegularizerWeights,
    m: MixWeights,
) -> Result<LossOutput> {
    if g_img.rows() != h_img.rows() {
        return Err(Error::DimensionMismatch(format!(
            "xclip_loss: contrastive batch {} vs non-contrastive batch {}",
            g_img.rows(),
            h_img.rows()
        )));
    }
    let clip = clip_loss(g_img, g_txt, temp)?;
    let nclip = nclip_loss(h_img, h_txt, w)?;
    let value = m.lambda_clip * clip.value + m.lambda_nclip * nclip.value;
    let mut grads: Vec<Matrix> = clip.grads.iter().map(|g| g.scale(m.lambda_clip)).collect();
    grads.extend(nclip.grads.iter().map(|g| g.scale(m.lambda_nclip)));
    let mut out = LossOutput {
        value,
        grads,
        temp_grad: m.lambda_clip * clip.temp_grad,
        components: nclip.components,
    };
    out.components.insert("clip", clip.value);
    Ok(out)
}

/// Norm of the sharpness gradient plus norm of the smoothness gradient at a
/// collapsed configuration (all rows of `softmax(logits)` identical):
/// `‖∇(λ1·L_EH)‖ + ‖∇(λ2·L_HE)‖`, Frobenius norms over the logits.
pub fn collapse_gradient_probe(logits: &Matrix, w: RegularizerWeights) -> Result<f64> {
    let a = Assignment::new(logits, 1.0)?;
    let first = a.p.row(0);
    for i in 1..a.p.rows() {
        let dev =
            a.p.row(i)
                .iter()
                .zip(first)
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if dev > 1e-9 {
            return Err(Error::Precondition(format!(
                "collapse probe needs identical rows; row {i} deviates by {dev:e}"
            )));
        }
    }
    let t = entropy_terms(&a);
    Ok(w.lambda1 * t.grad_eh.frobenius_norm() + w.lambda2 * t.grad_he.frobenius_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn logits_of(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap().map(f64::ln)
    }

    #[test]
    fn matching_sharp_assignments_give_near_zero_ce() {
        let h = Matrix::from_rows(&[[60.0, 0.0, 0.0], [0.0, 0.0, 60.0]]).unwrap();
        let out = nclip_ce(&h, &h).unwrap();
        assert!(out.value < 1e-20);
    }

    #[test]
    fn uniform_ce_is_ln_k() {
        let h = Matrix::filled(3, 8, 0.4);
        let out = nclip_ce(&h, &h.scale(2.0)).unwrap();
        assert_abs_diff_eq!(out.value, 8f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn asymmetric_pair_hand_value() {
        let hp = logits_of(&[&[0.8, 0.2]]);
        let hq = logits_of(&[&[0.6, 0.4]]);
        let ce_pq = -(0.8 * 0.6f64.ln() + 0.2 * 0.4f64.ln());
        let ce_qp = -(0.6 * 0.8f64.ln() + 0.4 * 0.2f64.ln());
        let out = nclip_ce(&hp, &hq).unwrap();
        assert_abs_diff_eq!(out.value, 0.5 * (ce_pq + ce_qp), epsilon = 1e-12);
        assert_abs_diff_eq!(out.value, 0.6848, epsilon = 1e-4);
    }

    #[test]
    fn entropy_regularizer_configurations() {
        let k = 4usize;
        let uniform = Matrix::zeros(4, k);
        let (eh, he) = entropy_regularizers(&uniform, &uniform).unwrap();
        assert_abs_diff_eq!(eh.value, (k as f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(he.value, (k as f64).ln(), epsilon = 1e-12);

        // one-hot at distinct indices, B = K
        let spread = Matrix::from_fn(k, k, |i, j| if i == j { 800.0 } else { 0.0 });
        let (eh, he) = entropy_regularizers(&spread, &spread).unwrap();
        assert_abs_diff_eq!(eh.value, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(he.value, (k as f64).ln(), epsilon = 1e-12);

        // one-hot at the same index: dimensional collapse
        let same = Matrix::from_fn(k, k, |_, j| if j == 1 { 800.0 } else { 0.0 });
        let (eh, he) = entropy_regularizers(&same, &same).unwrap();
        assert_abs_diff_eq!(eh.value, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(he.value, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn nclip_loss_values() {
        let u = Matrix::filled(6, 16, -1.5);
        let out = nclip_loss(&u, &u, RegularizerWeights::new(0.5, 1.5).unwrap()).unwrap();
        assert_abs_diff_eq!(out.value, 0.0, epsilon = 1e-9);

        let a = Matrix::from_fn(3, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.7);
        let b = Matrix::from_fn(3, 5, |i, j| ((i + 2 * j) % 4) as f64 * -0.4);
        let plain = nclip_ce(&a, &b).unwrap();
        let zero = nclip_loss(&a, &b, RegularizerWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert_eq!(plain.value, zero.value);

        let w = RegularizerWeights::new(0.7, 2.0).unwrap();
        let out = nclip_loss(&a, &b, w).unwrap();
        assert!(out.value >= -w.lambda2 * 5f64.ln());
        assert_abs_diff_eq!(
            out.component("kl").unwrap(),
            out.component("ce").unwrap() - out.component("eh").unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn xclip_mixing() {
        let g = Matrix::from_fn(4, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.1));
        let g2 = Matrix::from_fn(4, 3, |i, j| ((i + j) % 3) as f64 - 0.5);
        let h = Matrix::from_fn(4, 6, |i, j| ((i * j) % 5) as f64 * 0.3);
        let h2 = Matrix::from_fn(4, 6, |i, j| ((i + 3 * j) % 7) as f64 * -0.2);
        let t = Temperature::from_value(0.3).unwrap();
        let w = RegularizerWeights::default();
        let clip = clip_loss(&g, &g2, t).unwrap();
        let nclip = nclip_loss(&h, &h2, w).unwrap();

        let only_n = xclip_loss(&g, &g2, &h, &h2, t, w, MixWeights::new(0.0, 1.3).unwrap()).unwrap();
        assert_abs_diff_eq!(only_n.value, 1.3 * nclip.value, epsilon = 1e-15);
        assert_eq!(only_n.temp_grad, 0.0);
        let only_c = xclip_loss(&g, &g2, &h, &h2, t, w, MixWeights::new(0.4, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(only_c.value, 0.4 * clip.value, epsilon = 1e-15);
    }

    #[test]
    fn xclip_weighted_sum_of_simple_cases() {
        // clip component: B=2 with equal similarities → ln 2
        let g = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        // nclip component: uniform assignments with λ1 + 1 = λ2 → 0
        let h = Matrix::zeros(2, 4);
        let t = Temperature::from_value(1.0).unwrap();
        let out = xclip_loss(&g, &g, &h, &h, t, RegularizerWeights::default(), MixWeights::default()).unwrap();
        assert_abs_diff_eq!(out.component("clip").unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(out.value, 0.2 * 2f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(out.value, 0.1386, epsilon = 1e-4);
    }

    #[test]
    fn collapse_probe_cases() {
        let w = RegularizerWeights::new(0.5, 1.5).unwrap();
        let collapsed = logits_of(&[&[0.8, 0.2], &[0.8, 0.2], &[0.8, 0.2], &[0.8, 0.2]]);
        assert!(collapse_gradient_probe(&collapsed, w).unwrap() > 1e-6);

        let uniform = Matrix::filled(4, 3, 0.25);
        assert!(collapse_gradient_probe(&uniform, w).unwrap() < 1e-12);

        let zero = RegularizerWeights::new(0.0, 0.0).unwrap();
        assert_eq!(collapse_gradient_probe(&collapsed, zero).unwrap(), 0.0);

        let spread = logits_of(&[&[0.8, 0.2], &[0.2, 0.8]]);
        assert!(matches!(
            collapse_gradient_probe(&spread, w),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn collapse_probe_matches_finite_differences() {
        // independent route: central differences of λ1·EH and λ2·HE on one modality
        let w = RegularizerWeights::new(0.5, 1.5).unwrap();
        let x = logits_of(&[&[0.8, 0.2], &[0.8, 0.2], &[0.8, 0.2], &[0.8, 0.2]]);
        let terms = |m: &Matrix| {
            let p = softmax_rows(m, 1.0).unwrap();
            let eh: f64 = crate::numerics::row_entropy(&p).iter().sum::<f64>() / m.rows() as f64;
            let mean = crate::numerics::mean_distribution(&p);
            let he = -mean.iter().map(|v| v * v.ln()).sum::<f64>();
            (eh, he)
        };
        let h = 1e-6;
        let (mut n_eh, mut n_he) = (0.0, 0.0);
        for idx in 0..x.data().len() {
            let mut plus = x.clone();
            plus.data_mut()[idx] += h;
            let mut minus = x.clone();
            minus.data_mut()[idx] -= h;
            let (ep, hp) = terms(&plus);
            let (em, hm) = terms(&minus);
            n_eh += ((ep - em) / (2.0 * h)).powi(2);
            n_he += ((hp - hm) / (2.0 * h)).powi(2);
        }
        let numeric = w.lambda1 * n_eh.sqrt() + w.lambda2 * n_he.sqrt();
        let analytic = collapse_gradient_probe(&x, w).unwrap();
        assert!(numeric > 1e-6);
        assert_abs_diff_eq!(analytic, numeric, epsilon = 1e-7);
    }
}
