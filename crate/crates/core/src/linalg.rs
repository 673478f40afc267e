//! Dense vector helpers over `&[f64]`.

/// Flat real parameter vector: models, gradients, control and momentum variables.
pub type ParamVector = Vec<f64>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn add_assign(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn scale(a: &mut [f64], s: f64) {
    for v in a {
        *v *= s;
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Largest `|a_k - b_k| / (1 + |b_k|)`.
pub fn max_rel_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (1.0 + y.abs()))
        .fold(0.0, f64::max)
}

/// Mean of equally sized vectors, summed in slice order.
pub fn mean_of<'a>(vs: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> ParamVector {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for v in vs {
        add_assign(&mut acc, v);
        n += 1;
    }
    if n > 0 {
        scale(&mut acc, 1.0 / n as f64);
    }
    acc
}
