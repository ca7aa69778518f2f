//! Forward kernels shared by the tape and by the tape-free entry points.

use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise operation selector for [`pointwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Multiply,
    Add,
}

impl Pointwise {
    pub fn arity(self) -> usize {
        match self {
            Pointwise::Sigmoid | Pointwise::Tanh => 1,
            Pointwise::Multiply | Pointwise::Add => 2,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn check_affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<()> {
    if !w.is_matrix() || !x.is_vector() || w.cols() != x.len() {
        return Err(Error::Dimension(format!(
            "affine: W has shape {:?}, x has shape {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if let Some(b) = b {
        if !b.is_vector() || b.len() != w.rows() {
            return Err(Error::Dimension(format!(
                "affine: W has shape {:?}, b has shape {:?}",
                w.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

pub(crate) fn affine_raw(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    let wd = w.data();
    let xd = x.data();
    let mut out = match b {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; rows],
    };
    for (i, o) in out.iter_mut().enumerate() {
        let row = &wd[i * cols..(i + 1) * cols];
        *o += row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
    }
    out
}

/// `W·x + b`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_affine(x, w, Some(b))?;
    let out = affine_raw(x, w, Some(b));
    finite_vector(out, "affine")
}

pub(crate) fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn pointwise_raw(kind: Pointwise, operands: &[&Tensor]) -> Result<Tensor> {
    if operands.len() != kind.arity() {
        return Err(Error::InvalidInput(format!(
            "{kind:?} takes {} operand(s), got {}",
            kind.arity(),
            operands.len()
        )));
    }
    let a = operands[0];
    let data: Vec<f64> = match kind {
        Pointwise::Sigmoid => a.data().iter().map(|&v| sigmoid(v)).collect(),
        Pointwise::Tanh => a.data().iter().map(|v| v.tanh()).collect(),
        Pointwise::Multiply | Pointwise::Add => {
            let b = operands[1];
            check_same_shape(&format!("{kind:?}"), a, b)?;
            let zipped = a.data().iter().zip(b.data());
            if kind == Pointwise::Multiply {
                zipped.map(|(x, y)| x * y).collect()
            } else {
                zipped.map(|(x, y)| x + y).collect()
            }
        }
    };
    let t = Tensor::from_parts_unchecked(a.shape().to_vec(), data);
    t.check_finite(&format!("{kind:?}"))?;
    Ok(t)
}

/// Elementwise sigmoid, tanh, product or sum.
pub fn pointwise(kind: Pointwise, operands: &[&Tensor]) -> Result<Tensor> {
    pointwise_raw(kind, operands)
}

pub(crate) fn check_concat(parts: &[&Tensor]) -> Result<()> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat of zero operands".into()));
    }
    for (i, p) in parts.iter().enumerate() {
        if !p.is_vector() {
            return Err(Error::Dimension(format!(
                "concat operand {i} has shape {:?}, expected a vector",
                p.shape()
            )));
        }
    }
    Ok(())
}

/// `a` followed by `b`.
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_concat(&[a, b])?;
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::vector(data)
}

pub(crate) fn check_mask(scores: &Tensor, mask: &[bool]) -> Result<()> {
    if !scores.is_vector() || scores.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "masked_softmax: scores shape {:?}, mask length {}",
            scores.shape(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidMask);
    }
    Ok(())
}

pub(crate) fn masked_softmax_raw(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Softmax over the positions where `mask` is true; masked positions are
/// exactly zero.
pub fn masked_softmax(scores: &Tensor, mask: &[bool]) -> Result<Tensor> {
    check_mask(scores, mask)?;
    finite_vector(masked_softmax_raw(scores.data(), mask), "masked_softmax")
}

fn finite_vector(data: Vec<f64>, context: &str) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.into()));
    }
    Tensor::vector(data)
}
