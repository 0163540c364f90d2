//! Central finite-difference gradient checking.
//!
//! Used by the test suites as an oracle that only ever evaluates the forward
//! pass on constant inputs.

use crate::rng::Stream;
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `(input index, flat coordinate, analytic, numeric, relative error)`
    pub entries: Vec<(usize, usize, f64, f64, f64)>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.4).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares backward-mode gradients of `f` against central differences with
/// step `h` on the given `(input, coordinate)` pairs.
pub fn check<F, E>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<GradCheck, E>
where
    F: Fn(&[Tensor]) -> Result<Tensor, E>,
    E: From<TensorError>,
{
    let vars: Vec<Tensor> = inputs
        .iter()
        .map(|(s, d)| Tensor::variable(s, d.clone()))
        .collect::<Result<_, TensorError>>()?;
    let loss = f(&vars)?;
    loss.backward().map_err(E::from)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect();

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64, E> {
        let consts: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, (s, d))| {
                let mut d = d.clone();
                if i == which {
                    d[coord] += delta;
                }
                Tensor::from_vec(s, d)
            })
            .collect::<Result<_, TensorError>>()?;
        Ok(f(&consts)?.item())
    };

    let mut entries = Vec::with_capacity(coords.len());
    for &(which, coord) in coords {
        let numeric = (eval(which, coord, h)? - eval(which, coord, -h)?) / (2.0 * h);
        let analytic = grads[which][coord];
        entries.push((which, coord, analytic, numeric, relative_error(analytic, numeric)));
    }
    Ok(GradCheck { entries })
}

/// All coordinates of every input.
pub fn all_coords(inputs: &[(Vec<usize>, Vec<f64>)]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, (_, d))| (0..d.len()).map(move |c| (i, c)))
        .collect()
}

/// `count` random coordinates drawn across the inputs.
pub fn random_coords(
    inputs: &[(Vec<usize>, Vec<f64>)],
    count: usize,
    rng: &mut Stream,
) -> Vec<(usize, usize)> {
    let all = all_coords(inputs);
    (0..count).map(|_| all[rng.below(all.len())]).collect()
}
