//! Fixed sinusoidal embeddings of normalized 2-D positions.
//!
//! The first half of the channels encodes `y`, the second half `x`. Within a
//! half, channel `j` uses frequency `2π / T^(2⌊j/2⌋ / half)` with sine on even
//! and cosine on odd channels.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

const TEMPERATURE: f64 = 10_000.0;

fn frequencies(half: usize) -> Vec<f64> {
    (0..half)
        .map(|j| 2.0 * PI / TEMPERATURE.powf((2 * (j / 2)) as f64 / half as f64))
        .collect()
}

fn check_dim(dim: usize) -> Result<usize> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::contract(format!(
            "positional embedding width {dim} must be a positive multiple of 4"
        )));
    }
    Ok(dim / 2)
}

/// Embedding of one normalized point.
pub fn encode_point(x: f64, y: f64, dim: usize) -> Result<Vec<f64>> {
    let half = check_dim(dim)?;
    let freqs = frequencies(half);
    let mut out = Vec::with_capacity(dim);
    for coord in [y, x] {
        for (j, f) in freqs.iter().enumerate() {
            let phase = coord * f;
            out.push(if j % 2 == 0 { phase.sin() } else { phase.cos() });
        }
    }
    Ok(out)
}

/// Embeddings of every pixel center of an `h x w` grid, as `[h * w, dim]`.
pub fn encode_grid(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w * dim);
    for i in 0..h {
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            let y = (i as f64 + 0.5) / h as f64;
            data.extend(encode_point(x, y, dim)?);
        }
    }
    Tensor::new([h * w, dim], data)
}

/// Differentiable embedding of `points: [.., 2]` (normalized `x, y`).
/// Returns `[.., dim]`.
pub fn encode_points<'t>(points: Var<'t>, dim: usize) -> Result<Var<'t>> {
    let half = check_dim(dim)?;
    let shape = points.shape();
    if shape.last() != Some(&2) {
        return Err(Error::shape("encode_points", &shape, &[2]));
    }
    let tape = points.tape();
    let axis = shape.len() - 1;
    let freqs = Tensor::new([half], frequencies(half))?;
    let even = Tensor::from_fn([half], |j| if j % 2 == 0 { 1.0 } else { 0.0 });
    let odd = even.map(|v| 1.0 - v);
    let embed = |coord: Var<'t>| -> Result<Var<'t>> {
        let phase = coord.mul(tape.constant(freqs.clone()))?;
        phase
            .sin()
            .mul(tape.constant(even.clone()))?
            .add(phase.cos().mul(tape.constant(odd.clone()))?)
    };
    let x = points.narrow(axis, 0, 1)?;
    let y = points.narrow(axis, 1, 1)?;
    Var::concat(&[embed(y)?, embed(x)?], axis)
}
