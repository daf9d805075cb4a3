//! Grid arithmetic of the adaptive average-pooling visual projector.
//!
//! A 27x27 patch grid (729 patches) pooled to 12x12 gives the 144 visual
//! tokens per image used during pre-training. Window `i` of an axis spans
//! `[floor(i*M/N), ceil((i+1)*M/N))`.

use std::ops::Range;

use thiserror::Error;

use crate::lengths::{PRETRAIN_TOKENS_PER_IMAGE, SFT_TOKENS_PER_IMAGE};

pub const ENCODER_GRID_SIDE: usize = 27;
pub const PRETRAIN_POOL_SIDE: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("pool side {target} must be in 1..={input}")]
    BadSide { input: usize, target: usize },
    #[error("grid of side {side} and dim {dim} needs {expected} values, got {got}")]
    Shape {
        side: usize,
        dim: usize,
        expected: usize,
        got: usize,
    },
}

/// Square grid of `side * side` vectors of length `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    side: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PatchGrid {
    pub fn new(side: usize, dim: usize, values: Vec<f64>) -> Result<Self, PoolError> {
        let expected = side * side * dim;
        if side == 0 || dim == 0 || values.len() != expected {
            return Err(PoolError::Shape {
                side,
                dim,
                expected,
                got: values.len(),
            });
        }
        Ok(PatchGrid { side, dim, values })
    }

    pub fn from_fn(side: usize, dim: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(side * side * dim);
        for r in 0..side {
            for c in 0..side {
                for k in 0..dim {
                    values.push(f(r, c, k));
                }
            }
        }
        PatchGrid { side, dim, values }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.side + col) * self.dim;
        &self.values[start..start + self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub target_side: usize,
}

impl PoolSpec {
    pub fn pretrain() -> Self {
        PoolSpec {
            target_side: PRETRAIN_POOL_SIDE,
        }
    }

    pub fn tokens_per_image(&self) -> usize {
        self.target_side * self.target_side
    }
}

/// One-dimensional windows for pooling `input` cells down to `target`.
pub fn axis_windows(input: usize, target: usize) -> Result<Vec<Range<usize>>, PoolError> {
    if target == 0 || target > input {
        return Err(PoolError::BadSide { input, target });
    }
    Ok((0..target)
        .map(|i| (i * input) / target..((i + 1) * input).div_ceil(target))
        .collect())
}

/// Row range and column range of one pooling window.
pub type Window = (Range<usize>, Range<usize>);

/// Row-major `target x target` list of windows.
pub fn pool_windows(input: usize, target: usize) -> Result<Vec<Window>, PoolError> {
    let axis = axis_windows(input, target)?;
    Ok(axis
        .iter()
        .flat_map(|rows| axis.iter().map(move |cols| (rows.clone(), cols.clone())))
        .collect())
}

pub fn adaptive_avg_pool(grid: &PatchGrid, spec: PoolSpec) -> Result<PatchGrid, PoolError> {
    let axis = axis_windows(grid.side, spec.target_side)?;
    let n = spec.target_side;
    let mut values = Vec::with_capacity(n * n * grid.dim);
    let mut acc = vec![0.0; grid.dim];
    for rows in &axis {
        for cols in &axis {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for r in rows.clone() {
                for c in cols.clone() {
                    for (a, v) in acc.iter_mut().zip(grid.cell(r, c)) {
                        *a += v;
                    }
                }
            }
            let count = (rows.len() * cols.len()) as f64;
            values.extend(acc.iter().map(|a| a / count));
        }
    }
    Ok(PatchGrid {
        side: n,
        dim: grid.dim,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMode {
    /// Pooled grid.
    Pretrain,
    /// Full encoder resolution.
    Sft,
}

/// Visual tokens consumed by `images` images.
pub fn token_budget(images: usize, spec: PoolSpec, mode: TokenMode) -> usize {
    match mode {
        TokenMode::Pretrain => images * spec.tokens_per_image(),
        TokenMode::Sft => images * SFT_TOKENS_PER_IMAGE,
    }
}

const _: () = assert!(PRETRAIN_POOL_SIDE * PRETRAIN_POOL_SIDE == PRETRAIN_TOKENS_PER_IMAGE);
const _: () = assert!(ENCODER_GRID_SIDE * ENCODER_GRID_SIDE == SFT_TOKENS_PER_IMAGE);
