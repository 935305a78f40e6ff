//! Central finite-difference gradient checking in `f64`.

use ndarray::ArrayD;

use crate::{Graph, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Fraction of entries of each input to probe; at least one entry per input is always probed.
    pub fraction: f64,
    /// Denominator floor so that vanishing gradients compare absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            fraction: 1.0,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, abs_floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn selected(opts: &GradCheckOptions, input: usize, idx: usize) -> bool {
    if opts.fraction >= 1.0 {
        return true;
    }
    let h = splitmix(opts.seed ^ splitmix((input as u64) << 32 | idx as u64));
    (h as f64 / u64::MAX as f64) < opts.fraction
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, perturbing the listed inputs one entry at a time.
pub fn check_gradients<F>(
    inputs: &[ArrayD<f64>],
    build: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let analytic: Vec<ArrayD<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
        let out = build(&g, &vars);
        let mut grads = g.backward(out);
        vars.iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()))
            })
            .collect()
    };

    let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<_> = perturbed.iter().map(|a| g.constant(a.clone())).collect();
        build(&g, &vars).item()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let mut picks: Vec<usize> = (0..n).filter(|&i| selected(opts, k, i)).collect();
        if picks.is_empty() && n > 0 {
            picks.push((splitmix(opts.seed ^ k as u64) % n as u64) as usize);
        }
        for i in picks {
            let orig = input.as_slice().unwrap()[i];
            work[k].as_slice_mut().unwrap()[i] = orig + opts.step;
            let fp = eval(&work);
            work[k].as_slice_mut().unwrap()[i] = orig - opts.step;
            let fm = eval(&work);
            work[k].as_slice_mut().unwrap()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[k].as_slice().unwrap()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.abs_floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    report
}
