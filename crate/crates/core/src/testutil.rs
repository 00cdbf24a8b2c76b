//! Shared helpers for gradient checks in unit tests.

/// Central finite differences over flat input vectors; the closure rebuilds
/// the forward pass from scratch per probe.
pub(crate) fn finite_diff<F>(build: F, inputs: &[Vec<f32>], h: f32) -> Vec<Vec<f32>>
where
    F: Fn(&[Vec<f32>]) -> f32,
{
    let mut grads = Vec::new();
    for p in 0..inputs.len() {
        let mut gp = vec![0.0f32; inputs[p].len()];
        for i in 0..inputs[p].len() {
            let mut plus = inputs.to_vec();
            plus[p][i] += h;
            let mut minus = inputs.to_vec();
            minus[p][i] -= h;
            gp[i] = (build(&plus) - build(&minus)) / (2.0 * h);
        }
        grads.push(gp);
    }
    grads
}

/// Max elementwise deviation normalized by the largest gradient magnitude.
pub(crate) fn max_rel_err(analytic: &[f32], numeric: &[f32]) -> f32 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f32, |m, &v| m.max(v.abs()))
        .max(1e-3);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f32, |m, (&a, &n)| m.max((a - n).abs()))
        / scale
}
