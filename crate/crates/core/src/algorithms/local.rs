use crate::error::{check_dim, Result};
use crate::linalg::ParamVector;
use crate::objectives::ClientObjective;
use crate::rng::RngStream;

/// Runs `K` corrected local SGD steps from `x_t`:
/// `y ← y − η_l (g − c_i + c)` with `g` a mini-batch gradient at `y`.
///
/// Returns the final iterate and the average of the `K` mini-batch
/// gradients. All draws come from `rng` in step order.
#[allow(clippy::too_many_arguments)]
pub fn local_loop(
    client: &dyn ClientObjective,
    x_t: &[f64],
    c_i: &[f64],
    c: &[f64],
    eta_l: f64,
    local_steps: usize,
    batch_size: usize,
    rng: &mut RngStream,
) -> Result<(ParamVector, ParamVector)> {
    let d = x_t.len();
    check_dim(d, client.dim())?;
    check_dim(d, c_i.len())?;
    check_dim(d, c.len())?;
    let mut y = x_t.to_vec();
    let mut g_sum = vec![0.0; d];
    for _ in 0..local_steps {
        let g = client.stochastic_gradient(&y, batch_size, rng)?;
        for k in 0..d {
            y[k] -= eta_l * (g[k] - c_i[k] + c[k]);
            g_sum[k] += g[k];
        }
    }
    let steps = local_steps as f64;
    g_sum.iter_mut().for_each(|v| *v /= steps);
    Ok((y, g_sum))
}
