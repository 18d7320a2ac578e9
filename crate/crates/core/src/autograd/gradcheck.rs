use super::{Result, Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Check at most this many coordinates per tensor (sampled without replacement).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, max_coords: None, seed: 0, abs_floor: 1e-7 }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub tensor: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub passed: bool,
    pub tensors: Vec<TensorCheck>,
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Tape<'p>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences `(f(θ+δ) − f(θ−δ)) / 2δ`, coordinate by coordinate.
///
/// `f` must be deterministic: it is re-run twice per checked coordinate.
pub fn grad_check<F>(params: &[Tensor], f: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: for<'p> Fn(&mut Tape<'p>, &[Var]) -> Result<Var>,
{
    let failed = |e: String| GradCheckReport { max_rel_error: f64::INFINITY, passed: false, tensors: vec![], error: Some(e) };

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = match f(&mut tape, &vars) {
            Ok(l) => l,
            Err(e) => return failed(e.to_string()),
        };
        let mut grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(e) => return failed(e.to_string()),
        };
        vars.iter()
            .zip(params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;

    for (ti, param) in params.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < param.len() => rand::seq::index::sample(&mut rng, param.len(), k).into_vec(),
            _ => (0..param.len()).collect(),
        };
        let mut check = TensorCheck { tensor: ti, checked: 0, max_rel_error: 0.0, worst_coord: 0, analytic: 0.0, numeric: 0.0 };
        for &c in &coords {
            let orig = param.data()[c];
            work[ti].data_mut()[c] = orig + opts.step;
            let plus = evaluate(&work, &f);
            work[ti].data_mut()[c] = orig - opts.step;
            let minus = evaluate(&work, &f);
            work[ti].data_mut()[c] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return failed(e.to_string()),
            };
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ti].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            check.checked += 1;
            if rel > check.max_rel_error || rel.is_nan() {
                check.max_rel_error = rel;
                check.worst_coord = c;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        max_rel = max_rel.max(check.max_rel_error);
        tensors.push(check);
    }

    GradCheckReport { max_rel_error: max_rel, passed: max_rel < opts.tol, tensors, error: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_differenced_exactly() {
        let theta = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let report = grad_check(
            &[theta],
            |tape, v| Ok(tape.sum_squares(v[0])),
            &GradCheckOptions { tol: 1e-9, ..Default::default() },
        );
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-9);
        assert_eq!(report.checked(), 4);
    }

    #[test]
    fn subsampling_limits_coordinates() {
        let theta = Tensor::filled(&[10, 10], 0.5);
        let report = grad_check(
            &[theta],
            |tape, v| Ok(tape.sum_squares(v[0])),
            &GradCheckOptions { max_coords: Some(7), ..Default::default() },
        );
        assert_eq!(report.checked(), 7);
        assert!(report.passed);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        // sum_squares then scale, but backward via a detached constant path
        let theta = Tensor::vector(vec![1.0, 2.0]);
        let report = grad_check(
            &[theta],
            |tape, v| {
                let c = tape.constant(tape.value(v[0]).clone());
                let sq = tape.mul(v[0], c)?;
                Ok(tape.sum(sq))
            },
            &GradCheckOptions::default(),
        );
        assert!(!report.passed);
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn builder_errors_are_carried_in_report() {
        let theta = Tensor::vector(vec![1.0, 2.0]);
        let report = grad_check(&[theta], |_, v| Ok(v[0]), &GradCheckOptions::default());
        assert!(!report.passed);
        assert!(report.error.unwrap().contains("scalar"));
    }
}
