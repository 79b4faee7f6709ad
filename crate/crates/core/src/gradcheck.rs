//! Central finite-difference gradient checking over a [`ParameterSet`].

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::error::Result;
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use crate::unet3d::ParameterSet;

/// Gradient norms below this are treated as structurally zero.
pub const VANISHING_NORM: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)` over the probed
    /// coordinates; 0 when both norms vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub probed: usize,
}

/// Flat indices to probe per tensor: every index of tensors with at most
/// `max_per_tensor` elements, otherwise a seeded sample of that many.
pub fn probe_indices<T: crate::tensor::Real>(params: &ParameterSet<T>, max_per_tensor: usize, seed: u64) -> BTreeMap<String, Vec<usize>> {
    params
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut idx = if t.len() <= max_per_tensor {
                (0..t.len()).collect()
            } else {
                sample(&mut stream_rng(seed, i as u64), t.len(), max_per_tensor).into_vec()
            };
            idx.sort_unstable();
            (name.clone(), idx)
        })
        .collect()
}

/// Numeric gradient of `loss` at the probed coordinates.
pub fn numeric_gradients(
    params: &ParameterSet<f64>,
    step: f64,
    probes: &BTreeMap<String, Vec<usize>>,
    loss: impl Fn(&ParameterSet<f64>) -> Result<f64>,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut probe = params.clone();
    let mut out = BTreeMap::new();
    for (name, indices) in probes {
        let mut grad = Vec::with_capacity(indices.len());
        for &i in indices {
            let set = |p: &mut ParameterSet<f64>, v: f64| p.get_mut(name).expect("probed name exists").data_mut()[i] = v;
            let original = params.get(name).expect("probed name exists").data()[i];
            set(&mut probe, original + step);
            let up = loss(&probe)?;
            set(&mut probe, original - step);
            let down = loss(&probe)?;
            set(&mut probe, original);
            grad.push((up - down) / (2.0 * step));
        }
        out.insert(name.clone(), grad);
    }
    Ok(out)
}

/// Per-tensor comparison at the probed coordinates. A tensor missing from
/// `analytic` is treated as an all-zero gradient.
pub fn compare(
    analytic: &BTreeMap<String, Tensor<f64>>,
    numeric: &BTreeMap<String, Vec<f64>>,
    probes: &BTreeMap<String, Vec<usize>>,
) -> Vec<TensorCheck> {
    numeric
        .iter()
        .map(|(name, n)| {
            let a: Vec<f64> = match analytic.get(name) {
                Some(t) => probes[name].iter().map(|&i| t.data()[i]).collect(),
                None => vec![0.0; n.len()],
            };
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            let (an, nn) = (norm(&a), norm(n));
            let scale = an.max(nn);
            let rel_error = if scale < VANISHING_NORM { 0.0 } else { norm(&diff) / scale };
            TensorCheck { name: name.clone(), rel_error, analytic_norm: an, numeric_norm: nn, probed: n.len() }
        })
        .collect()
}
