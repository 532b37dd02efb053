//! Finite-difference gradient checking. Analytic gradients from the tape are
//! compared against central differences computed from two extra forward
//! passes per probed coordinate.

use super::tape::{Tape, Value};
use super::{Tensor, TensorError};

/// Which coordinates of the input to probe.
#[derive(Debug, Clone, Copy)]
pub enum Probe {
    /// Every coordinate.
    All,
    /// At most this many coordinates, evenly spaced (deterministic).
    AtMost(usize),
}

fn probe_indices(n: usize, probe: Probe) -> Vec<usize> {
    match probe {
        Probe::All => (0..n).collect(),
        Probe::AtMost(cap) => {
            if cap == 0 || n <= cap {
                (0..n).collect()
            } else {
                (0..cap).map(|i| i * n / cap).collect()
            }
        }
    }
}

/// Checks the tape gradient of `f` with respect to `x` against central
/// differences with step `h`. `f` must build the same scalar computation on
/// any tape it is handed. Returns the maximum relative error
/// `|analytic - central| / (|analytic| + |central| + 1e-12)` over the probed
/// coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, probe: Probe) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Value) -> Result<Value, TensorError>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let leaf = tape.leaf_raw(x.shape().to_vec(), x.data().to_vec(), true)?;
    let root = f(&mut tape, leaf)?;
    if tape.data(root).len() != 1 {
        return Err(TensorError::NotScalar {
            op: "finite-diff-check",
            shape: tape.shape(root).to_vec(),
        });
    }
    tape.backward(root)?;
    let analytic = tape
        .grad(leaf)
        .ok_or(TensorError::RootHasNoGrad)?
        .to_vec();

    let eval = |data: &[f64]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let leaf = t.leaf_raw(x.shape().to_vec(), data.to_vec(), false)?;
        let root = f(&mut t, leaf)?;
        Ok(t.scalar_value(root))
    };

    let mut worst: f64 = 0.0;
    let mut data = x.data().to_vec();
    for i in probe_indices(data.len(), probe) {
        let orig = data[i];
        data[i] = orig + h;
        let plus = eval(&data)?;
        data[i] = orig - h;
        let minus = eval(&data)?;
        data[i] = orig;
        let central = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
