//! Procedural grid images and their rasterisation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether pixel `(x, y)` of a `size×size` cell is inside the shape.
    fn covers(self, x: usize, y: usize, size: usize) -> bool {
        let s = size as f64;
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        match self {
            Shape::Circle => {
                let c = s / 2.0;
                let r = s * 0.4;
                (fx - c).powi(2) + (fy - c).powi(2) <= r * r
            }
            Shape::Square => {
                let m = (size / 8).max(1);
                x >= m && x < size - m && y >= m && y < size - m
            }
            Shape::Triangle => {
                let m = (size / 8).max(1) as f64;
                let h = (fy - m) / (s - 2.0 * m);
                (0.0..=1.0).contains(&h) && (fx - s / 2.0).abs() <= h * (s / 2.0 - m)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub color: Color,
    pub shape: Shape,
}

/// A `grid×grid` board with some cells occupied by coloured shapes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SynthImage {
    pub grid: usize,
    pub cells: Vec<Cell>,
}

/// Raster side length in pixels.
pub const RASTER: usize = 32;

impl SynthImage {
    pub fn new(grid: usize, cells: Vec<Cell>) -> Result<Self> {
        let img = Self { grid, cells };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || RASTER % self.grid != 0 {
            return Err(Error::Invalid(format!("grid {} does not divide the {RASTER}px raster", self.grid)));
        }
        let mut seen = vec![false; self.grid * self.grid];
        for c in &self.cells {
            if c.row >= self.grid || c.col >= self.grid {
                return Err(Error::Invalid(format!("cell ({}, {}) outside a {}-grid", c.row, c.col, self.grid)));
            }
            let k = c.row * self.grid + c.col;
            if seen[k] {
                return Err(Error::Invalid(format!("duplicate cell ({}, {})", c.row, c.col)));
            }
            seen[k] = true;
        }
        Ok(())
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.row == row && c.col == col)
    }

    /// `RASTER×RASTER` RGB image in `[0, 1]`, row-major, channel-last.
    pub fn rasterize(&self) -> Result<Vec<[f64; 3]>> {
        self.validate()?;
        let size = RASTER / self.grid;
        let mut px = vec![[0.0; 3]; RASTER * RASTER];
        for c in &self.cells {
            for y in 0..size {
                for x in 0..size {
                    if c.shape.covers(x, y, size) {
                        px[(c.row * size + y) * RASTER + c.col * size + x] = c.color.rgb();
                    }
                }
            }
        }
        Ok(px)
    }
}
