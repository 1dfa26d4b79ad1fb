//! Sinusoidal encodings of positions and relative poses.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const BASE: f64 = 10_000.0;

fn frequencies(pairs: usize) -> Vec<f64> {
    if pairs == 1 {
        return vec![1.0];
    }
    (0..pairs)
        .map(|k| BASE.powf(-(k as f64) / (pairs - 1) as f64))
        .collect()
}

/// Encodes each row of `coords` (`[n, c]`) into `dim` channels.
///
/// Every coordinate receives `dim / c` channels laid out as
/// `[sin(x·f0), cos(x·f0), sin(x·f1), cos(x·f1), ...]` with frequencies
/// running geometrically from 1 down to `1/10000`.
pub fn sinusoidal_pe(coords: &Tensor, dim: usize) -> Result<Tensor> {
    let c = coords.cols();
    if dim == 0 || c == 0 || dim % (2 * c) != 0 {
        return Err(Error::Config(format!(
            "positional encoding width {dim} must be a positive multiple of {}",
            2 * c
        )));
    }
    let freqs = frequencies(dim / (2 * c));
    let n = coords.rows();
    let mut out = Vec::with_capacity(n * dim);
    for r in 0..n {
        for &x in coords.row(r) {
            for &f in &freqs {
                let (s, co) = (x * f).sin_cos();
                out.push(s);
                out.push(co);
            }
        }
    }
    Tensor::new(vec![n, dim], out)
}

/// Width of the position part of a relative-pose encoding of total width `dim`.
fn relative_position_width(dim: usize) -> usize {
    (dim / 2) / 4 * 4
}

/// Checks that `dim` leaves room for both halves of [`relative_pose_pe`].
pub fn check_relative_pe_dim(dim: usize) -> Result<()> {
    let pos = relative_position_width(dim);
    let ang = dim - pos;
    if pos == 0 || ang == 0 || ang % 2 != 0 {
        return Err(Error::Config(format!(
            "relative pose encoding width {dim} must be even and at least 6"
        )));
    }
    Ok(())
}

/// Encodes relative poses `(dx, dy, dθ)` into `dim` channels.
///
/// The position part is [`sinusoidal_pe`] over `(dx, dy)`. The angle part uses
/// integer harmonics `sin(kθ), cos(kθ)` for `k = 1..`, which keeps the encoding
/// continuous across the ±π wrap.
pub fn relative_pose_pe(rel: &[[f64; 3]], dim: usize) -> Result<Tensor> {
    check_relative_pe_dim(dim)?;
    let pos_dim = relative_position_width(dim);
    let harmonics = (dim - pos_dim) / 2;
    let freqs = frequencies(pos_dim / 4);
    let mut out = Vec::with_capacity(rel.len() * dim);
    for &[dx, dy, da] in rel {
        for x in [dx, dy] {
            for &f in &freqs {
                let (s, c) = (x * f).sin_cos();
                out.push(s);
                out.push(c);
            }
        }
        for k in 1..=harmonics {
            let (s, c) = (k as f64 * da).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    Tensor::new(vec![rel.len(), dim], out)
}
