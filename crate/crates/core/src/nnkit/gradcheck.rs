//! Central finite-difference verification of analytic gradients.
//!
//! The scalar probed is `L = sum_k w_k * y_k` over the network outputs with
//! fixed non-trivial weights `w`, so every output row takes part.
//! Coordinates whose `+-h` perturbation flips a ReLU or changes a max-pool
//! winner sit on a kink; there is no derivative to compare against, so they
//! are counted as skipped rather than checked.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::network::Network;
use super::tensor::Tensor2;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so gradients that are zero up to
/// roundoff do not produce spurious failures.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(tolerance: f64) -> Self {
        Self {
            step: FD_STEP,
            tolerance,
            coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    /// `"{layer}.{kind}"`, or `"input"` for the input gradient.
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|k| (1.3 * k as f64 + 0.4).cos()).collect()
}

/// Checks all parameters and the input gradient of `net` at `input`.
pub fn grad_check(net: &mut Network, input: &Tensor2, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(net, input, &GradCheckOptions::new(tolerance))
}

pub fn grad_check_with(
    net: &mut Network,
    input: &Tensor2,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (y, cache) = net.forward(input)?;
    let w = probe_weights(y.len());
    net.params_mut().zero_grad();
    let input_grad = net.backward(&cache, &w)?;
    let analytic = net.params().flat_grads();
    net.params_mut().zero_grad();
    compare_gradients(net, input, &analytic, &input_grad, opts)
}

/// Compares supplied analytic gradients (flat, store order) against central
/// differences of the probe loss.
pub fn compare_gradients(
    net: &Network,
    input: &Tensor2,
    analytic_params: &[f64],
    analytic_input: &Tensor2,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (y, cache) = net.forward(input)?;
    let w = probe_weights(y.len());
    let base_pattern = cache.activation_pattern();
    let loss = |out: &[f64]| out.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;

    let mut entries = Vec::new();
    let mut flat = net.params().flat_values();
    let mut probe = net.clone();
    let mut offset = 0;
    for (li, layer) in net.layers().iter().enumerate() {
        let (s, e) = net.layer_span(li);
        if s == e {
            continue;
        }
        let mut entry = GradCheckEntry {
            name: format!("{li}.{}", layer.name()),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for k in s..e {
            let n = net.params().get(k).value.len();
            for idx in choose(n, opts.coords_per_tensor, &mut rng) {
                let at = offset + idx;
                let orig = flat[at];
                flat[at] = orig + h;
                probe.set_flat_values(&flat)?;
                let (yp, cp) = probe.forward(input)?;
                flat[at] = orig - h;
                probe.set_flat_values(&flat)?;
                let (ym, cm) = probe.forward(input)?;
                flat[at] = orig;
                if cp.activation_pattern() != base_pattern
                    || cm.activation_pattern() != base_pattern
                {
                    entry.skipped += 1;
                    continue;
                }
                let numeric = (loss(&yp) - loss(&ym)) / (2.0 * h);
                entry.max_rel_error = entry
                    .max_rel_error
                    .max(relative_error(analytic_params[at], numeric));
                entry.checked += 1;
            }
            offset += n;
        }
        entries.push(entry);
    }

    let mut entry = GradCheckEntry {
        name: "input".into(),
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut x = input.clone();
    for idx in choose(input.len(), opts.coords_per_tensor, &mut rng) {
        let orig = x.as_slice()[idx];
        x.as_mut_slice()[idx] = orig + h;
        let (yp, cp) = net.forward(&x)?;
        x.as_mut_slice()[idx] = orig - h;
        let (ym, cm) = net.forward(&x)?;
        x.as_mut_slice()[idx] = orig;
        if cp.activation_pattern() != base_pattern || cm.activation_pattern() != base_pattern {
            entry.skipped += 1;
            continue;
        }
        let numeric = (loss(&yp) - loss(&ym)) / (2.0 * h);
        entry.max_rel_error = entry
            .max_rel_error
            .max(relative_error(analytic_input.as_slice()[idx], numeric));
        entry.checked += 1;
    }
    entries.push(entry);

    let max_rel_error = entries.iter().fold(0.0f64, |m, e| m.max(e.max_rel_error));
    Ok(GradCheckReport {
        passed: max_rel_error < opts.tolerance,
        entries,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

fn choose(n: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}
