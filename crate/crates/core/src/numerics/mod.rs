//! Dense 64-bit tensors, a reverse-mode autodiff tape, and the gradient
//! checker used to validate every primitive against finite differences.

mod checkpoint;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use optim::AdamW;
pub use params::{random_tensor, scaled_normal_tensor, uniform_tensor, Bound, ParamStore, EMBED_INIT_RANGE};
pub use tape::{Gradients, Tape, Var, LOG_FLOOR};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Matrix product of two tensors, outside of any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.softmax(v, axis)?;
    Ok(tape.value(out).clone())
}

/// `-weight * ln p[target]`, with `p[target]` floored at [`LOG_FLOOR`].
pub fn cross_entropy(p: &Tensor, target: usize, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(p.clone());
    let out = tape.prob_nll(v, target, weight)?;
    Ok(tape.value(out).item())
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
}

/// Compares the tape gradient of a scalar function against central finite
/// differences on up to `samples` coordinates drawn (without replacement)
/// from all parameter entries.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], samples: usize, step: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor], track: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        if !track {
            return Ok((value, None));
        }
        let grads = tape.backward(out);
        let g = vars.iter().map(|v| grads.tensor(*v).into_data()).collect();
        Ok((value, Some(g)))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("tracked evaluation");

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        let mut idx = sample(&mut rng, coords.len(), samples).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &c in &picked {
        let (i, j) = coords[c];
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let (plus, _) = eval(&work, false)?;
        work[i].data_mut()[j] = orig - step;
        let (minus, _) = eval(&work, false)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i][j];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        coordinates: picked.len(),
    })
}
