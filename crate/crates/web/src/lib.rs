//! WebAssembly bindings for the single-page demo in `www/`.
//!
//! Every function returns a flat `Float64Array` so the page can plot it
//! without further parsing.

use dcr_core::gates::{draw_gumbel_gate, GateSchedule};
use dcr_core::rng;
use dcr_core::theory::{soft_gate_variance_closed_form, theseus_variance_closed_form};
use wasm_bindgen::prelude::*;

fn js(e: dcr_core::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Values of the schedule named like a `schedule` config value
/// (`dcr_aggr20`, `theseus_aggr20`, `constant:C`, `linear:A:B:F`) at
/// `points` evenly spaced training fractions, `t = 0` and `t = 1` included.
#[wasm_bindgen]
pub fn schedule_curve(name: &str, points: usize) -> Result<Vec<f64>, JsError> {
    let schedule: GateSchedule = name.parse().map_err(js)?;
    let n = points.max(2);
    (0..n)
        .map(|i| schedule.value(i as f64 / (n - 1) as f64).map_err(js))
        .collect()
}

/// Histogram of `draws` binary-concrete gates with mean `p` and
/// temperature `tau`: `bins` normalized densities on `[0, 1]` followed by
/// the sample mean and variance.
#[wasm_bindgen]
pub fn gumbel_histogram(
    p: f64,
    tau: f64,
    draws: usize,
    bins: usize,
    seed: u64,
) -> Result<Vec<f64>, JsError> {
    let bins = bins.max(1);
    let mut r = rng::stream(seed, &[0x77]);
    let mut counts = vec![0.0; bins];
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..draws {
        let g = draw_gumbel_gate(p, tau, &mut r).map_err(js)?;
        counts[((g * bins as f64) as usize).min(bins - 1)] += 1.0;
        sum += g;
        sq += g * g;
    }
    let n = draws.max(1) as f64;
    let mean = sum / n;
    let var = if draws > 1 {
        (sq - n * mean * mean) / (n - 1.0)
    } else {
        0.0
    };
    let mut out: Vec<f64> = counts.iter().map(|c| c * bins as f64 / n).collect();
    out.extend([mean, var]);
    Ok(out)
}

/// Gradient variance against the gate mean `p` for a gradient with
/// `Var[a] = var_a` and `||E a||^2 = mean_norm_sq`. For each of `points`
/// values of `p` in `[0, 1]` the output holds five numbers: `p`, the
/// data term `p Var[a]` and the gate term `p (1 - p) ||E a||^2` of a hard
/// gate, the deterministic blend `p^2 Var[a]`, and the soft-gate total for
/// gate variance `soft_fraction * p (1 - p)`.
#[wasm_bindgen]
pub fn variance_decomposition(
    var_a: f64,
    mean_norm_sq: f64,
    soft_fraction: f64,
    points: usize,
) -> Result<Vec<f64>, JsError> {
    if !(0.0..=1.0).contains(&soft_fraction) {
        return Err(JsError::new("soft_fraction must lie in [0, 1]"));
    }
    let n = points.max(2);
    let mean = [mean_norm_sq.max(0.0).sqrt()];
    let mut out = Vec::with_capacity(5 * n);
    for i in 0..n {
        let p = i as f64 / (n - 1) as f64;
        let hard = theseus_variance_closed_form(p, &mean, var_a).map_err(js)?;
        let data_term = p * var_a;
        let soft = soft_gate_variance_closed_form(
            p,
            soft_fraction * p * (1.0 - p),
            var_a + mean_norm_sq,
            var_a,
        )
        .map_err(js)?;
        out.extend([p, data_term, hard - data_term, p * p * var_a, soft]);
    }
    Ok(out)
}
