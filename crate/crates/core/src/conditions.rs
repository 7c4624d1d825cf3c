//! Condition encoders: ring-label one-hots, two-channel layout grids and
//! ordered concatenations of both.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-channel layout grid, stored row-major as `[y][x][channel]`.
///
/// Channel 0 holds the sum of the labels of all boxes covering a pixel and
/// channel 1 holds how many boxes cover it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutGrid {
    height: usize,
    width: usize,
    cells: Vec<u32>,
}

impl LayoutGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, cells: vec![0; height * width * 2] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(label_sum, count)` at pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> (u32, u32) {
        let i = (y * self.width + x) * 2;
        (self.cells[i], self.cells[i + 1])
    }

    fn add(&mut self, x: usize, y: usize, label: u32) {
        let i = (y * self.width + x) * 2;
        self.cells[i] += label;
        self.cells[i + 1] += 1;
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }
}

/// A conditioning signal. The toy backbone itself is unconditional, so these
/// all play the role of the additional (non-text) condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Condition {
    Label { index: usize, classes: usize },
    Layout(LayoutGrid),
    Concat { parts: Vec<Condition> },
}

impl Condition {
    /// Length of the flattened vector.
    pub fn dim(&self) -> usize {
        match self {
            Condition::Label { classes, .. } => *classes,
            Condition::Layout(g) => g.cells.len(),
            Condition::Concat { parts } => parts.iter().map(Condition::dim).sum(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.flatten_into(&mut out);
        out
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        match self {
            Condition::Label { index, classes } => {
                out.extend((0..*classes).map(|k| if k == *index { 1.0 } else { 0.0 }))
            }
            Condition::Layout(g) => out.extend(g.cells.iter().map(|&v| v as f64)),
            Condition::Concat { parts } => parts.iter().for_each(|p| p.flatten_into(out)),
        }
    }
}

pub fn encode_ring_label(k: usize, classes: usize) -> Result<Condition> {
    if k >= classes {
        return Err(Error::Parameter(format!("label {k} out of range for {classes} classes")));
    }
    Ok(Condition::Label { index: k, classes })
}

/// Axis-aligned box with half-open pixel bounds `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutBox {
    pub label: u32,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl LayoutBox {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.label == 0 {
            return Err(Error::Parameter(format!("box {self}: label must be positive")));
        }
        if self.x0 >= self.x1 || self.x1 > width || self.y0 >= self.y1 || self.y1 > height {
            return Err(Error::Parameter(format!("box {self} out of bounds for {height}x{width} grid")));
        }
        Ok(())
    }

    pub fn covers(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

impl fmt::Display for LayoutBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.label, self.x0, self.y0, self.x1, self.y1)
    }
}

impl FromStr for LayoutBox {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|e| Error::Format(format!("bad layout field {s:?} in {line:?}: {e}")))
        };
        match fields.as_slice() {
            [l, x0, y0, x1, y1] => Ok(LayoutBox {
                label: parse(l)? as u32,
                x0: parse(x0)?,
                y0: parse(y0)?,
                x1: parse(x1)?,
                y1: parse(y1)?,
            }),
            _ => Err(Error::Format(format!("expected `label x0 y0 x1 y1`, got {line:?}"))),
        }
    }
}

/// Parses one box per line; blank lines and `#` comments are skipped.
pub fn parse_layout_boxes(text: &str) -> Result<Vec<LayoutBox>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

pub fn encode_layout(boxes: &[LayoutBox], height: usize, width: usize) -> Result<Condition> {
    let mut grid = LayoutGrid::zeros(height, width);
    for b in boxes {
        b.validate(height, width)?;
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                grid.add(x, y, b.label);
            }
        }
    }
    Ok(Condition::Layout(grid))
}

pub fn concat_conditions(parts: Vec<Condition>) -> Result<Condition> {
    if parts.is_empty() {
        return Err(Error::Parameter("cannot concatenate an empty condition list".into()));
    }
    Ok(Condition::Concat { parts })
}

/// Draws one of `levels` with equal probability.
pub fn sample_condition_level(levels: &[Condition], seed: u64) -> Result<Condition> {
    sample_condition_level_rng(levels, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_condition_level_rng<R: Rng + ?Sized>(levels: &[Condition], rng: &mut R) -> Result<Condition> {
    if levels.is_empty() {
        return Err(Error::Parameter("no condition levels to sample from".into()));
    }
    Ok(levels[rng.random_range(0..levels.len())].clone())
}
