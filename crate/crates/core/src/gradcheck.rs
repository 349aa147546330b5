//! Central finite-difference check of backward gradients.

use crate::data::Batch;
use crate::error::Result;
use crate::models::{DropoutMode, ModelSpec};
use crate::params::{GradientStore, ParamStore};
use crate::tensor::Scalar;

/// Below this magnitude on both sides a coordinate counts as matching.
pub const ZERO_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|)`, or 0 when both are below [`ZERO_THRESHOLD`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_THRESHOLD {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the gradients returned by `eval` with central differences of the
/// loss it returns, perturbing every trainable coordinate by `±h`.
pub fn finite_diff_check_with<T: Scalar>(
    params: &ParamStore<T>,
    h: f64,
    tol: f64,
    mut eval: impl FnMut(&ParamStore<T>) -> Result<(f64, GradientStore<T>)>,
) -> Result<GradCheckReport> {
    let (_, grads) = eval(params)?;
    let mut probe = params.clone();
    let mut out = Vec::new();
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let len = params.get(&name).expect("listed above").len();
        let analytic = grads.get(&name);
        let mut worst = ParamError {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..len {
            let original = params.get(&name).expect("listed above").data()[i];
            let set = |p: &mut ParamStore<T>, v: f64| {
                p.get_mut(&name).expect("listed above").data_mut()[i] = T::from_f64(v);
            };
            set(&mut probe, original.as_f64() + h);
            let (plus, _) = eval(&probe)?;
            set(&mut probe, original.as_f64() - h);
            let (minus, _) = eval(&probe)?;
            probe.get_mut(&name).expect("listed above").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data()[i].as_f64());
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || i == 0 {
                worst = ParamError {
                    name: name.clone(),
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        out.push(worst);
    }
    Ok(GradCheckReport { params: out, tol })
}

/// Finite-difference check of `model`'s loss on `batch` with dropout off.
pub fn finite_diff_check<T: Scalar>(
    model: &ModelSpec,
    params: &ParamStore<T>,
    batch: &Batch<T>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    finite_diff_check_with(params, h, tol, |p| {
        let (loss, mut graph) = model.forward(p, batch, DropoutMode::Disabled)?;
        Ok((loss, graph.backward()?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_mlp;
    use crate::tensor::Tensor;

    fn linear_case() -> (ModelSpec, ParamStore<f64>, Batch<f64>) {
        let model = build_mlp(&[3, 4]).unwrap();
        let params = model.init_params(1).cast::<f64>();
        let batch = Batch::new(
            Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]).unwrap(),
            vec![1, 3],
        )
        .unwrap();
        (model, params, batch)
    }

    #[test]
    fn linear_model_passes() {
        let (model, params, batch) = linear_case();
        let report = finite_diff_check(&model, &params, &batch, 1e-3, 1e-3).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn doubled_gradient_fails() {
        let (model, params, batch) = linear_case();
        let report = finite_diff_check_with(&params, 1e-3, 1e-3, |p| {
            let (loss, mut graph) = model.forward(p, &batch, DropoutMode::Disabled)?;
            let mut g = graph.backward()?;
            for name in ["head.task1.weight", "head.task1.bias"] {
                let t = g.get_mut(name).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            }
            Ok((loss, g))
        })
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_rel_error() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn zero_input_batch_passes() {
        let (model, params, _) = linear_case();
        let batch = Batch::new(Tensor::zeros(&[2, 3]), vec![0, 1]).unwrap();
        assert!(finite_diff_check(&model, &params, &batch, 1e-3, 1e-3).unwrap().passed());
    }

    #[test]
    fn relative_error_degenerate() {
        assert_eq!(relative_error(0.0, 1e-13), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
