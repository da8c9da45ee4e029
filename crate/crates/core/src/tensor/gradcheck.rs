use std::fmt;

use super::Tensor;

/// Central-difference gradient `(f(θ+h) − f(θ−h)) / 2h` for every element of every tensor.
///
/// `params` are perturbed in place and restored before returning.
pub fn finite_diff_grad<F>(mut f: F, params: &mut [Tensor], h: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let coords: Vec<(usize, usize)> = (0..params[t].len()).map(|i| (t, i)).collect();
        out.push(finite_diff_coords(&mut f, params, &coords, h));
    }
    out
}

/// Central differences for selected `(tensor, element)` coordinates only.
pub fn finite_diff_coords<F>(mut f: F, params: &mut [Tensor], coords: &[(usize, usize)], h: f64) -> Vec<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    coords
        .iter()
        .map(|&(t, i)| {
            let orig = params[t].data()[i];
            params[t].data_mut()[i] = orig + h;
            let plus = f(params);
            params[t].data_mut()[i] = orig - h;
            let minus = f(params);
            params[t].data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Pass rule for comparing analytic and numeric derivatives: an entry passes when
/// its absolute error is at most `atol` or its relative error is below `rtol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckTolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for GradCheckTolerance {
    fn default() -> Self {
        Self { rtol: 1e-4, atol: 1e-7 }
    }
}

impl GradCheckTolerance {
    /// `rtol` with the absolute floor scaled to match (1e-4 → 1e-7).
    pub fn relative(rtol: f64) -> Self {
        Self { rtol, atol: rtol * 1e-3 }
    }

    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        let denom = analytic.abs().max(numeric.abs());
        if denom == 0.0 {
            0.0
        } else {
            (analytic - numeric).abs() / denom
        }
    }

    pub fn passes(&self, analytic: f64, numeric: f64) -> bool {
        let abs = (analytic - numeric).abs();
        abs <= self.atol || Self::relative_error(analytic, numeric) < self.rtol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub checked: usize,
    pub failed: usize,
    /// Worst relative error among the checked entries.
    pub worst_relative: f64,
    pub worst_absolute: f64,
    /// Entries whose difference stencil crossed a non-differentiable point.
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: GradCheckTolerance,
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn new(tolerance: GradCheckTolerance) -> Self {
        Self { tolerance, groups: Vec::new() }
    }

    pub fn add_group(&mut self, name: impl Into<String>, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len());
        let mut g = GroupResult {
            name: name.into(),
            checked: analytic.len(),
            failed: 0,
            worst_relative: 0.0,
            worst_absolute: 0.0,
            kinks: 0,
        };
        for (&a, &n) in analytic.iter().zip(numeric) {
            g.worst_relative = g.worst_relative.max(GradCheckTolerance::relative_error(a, n));
            g.worst_absolute = g.worst_absolute.max((a - n).abs());
            if !self.tolerance.passes(a, n) {
                g.failed += 1;
            }
        }
        self.groups.push(g);
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.failed == 0)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>8} {:>7} {:>12} {:>12} {:>6}",
            "group", "checked", "failed", "worst_rel", "worst_abs", "kinks"
        )?;
        for g in &self.groups {
            writeln!(
                f,
                "{:<24} {:>8} {:>7} {:>12.3e} {:>12.3e} {:>6}",
                g.name, g.checked, g.failed, g.worst_relative, g.worst_absolute, g.kinks
            )?;
        }
        write!(
            f,
            "{} (rtol {:e}, atol {:e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance.rtol,
            self.tolerance.atol
        )
    }
}
