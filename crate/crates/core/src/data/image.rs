use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::rng;

pub const GRID_ROWS: usize = 2;
pub const GRID_COLS: usize = 2;
pub const PATCH_DIM: usize = 12;
pub const JITTER_STD: f64 = 0.05;
pub const DEFAULT_CODE_SEED: u64 = 0x5eed_c0de;
/// Smallest allowed L2 distance between two code vectors.
pub const MIN_CODE_DISTANCE: f64 = 0.5;
const ATTRIBUTE_SCALE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Black,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Border {
    Outlined,
    Filled,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn word(self) -> &'static str {
        ["circle", "square", "triangle", "star"][self as usize]
    }

    pub fn plural(self) -> &'static str {
        ["circles", "squares", "triangles", "stars"][self as usize]
    }

    pub fn from_word(w: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.word() == w || s.plural() == w)
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Black];

    pub fn word(self) -> &'static str {
        ["red", "green", "blue", "yellow", "black"][self as usize]
    }

    pub fn from_word(w: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.word() == w)
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        ["small", "large"][self as usize]
    }
}

impl Border {
    pub const ALL: [Border; 2] = [Border::Outlined, Border::Filled];

    pub fn word(self) -> &'static str {
        ["outlined", "filled"][self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub shape: Shape,
    pub color: Color,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<Size>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub border: Option<Border>,
}

impl Cell {
    pub fn plain(shape: Shape, color: Color) -> Self {
        Self { shape, color, size: None, border: None }
    }

    /// Noun phrase without an article, e.g. `large outlined red circle`.
    pub fn phrase(&self) -> Vec<&'static str> {
        let mut w = Vec::with_capacity(4);
        w.extend(self.size.map(Size::word));
        w.extend(self.border.map(Border::word));
        w.push(self.color.word());
        w.push(self.shape.word());
        w
    }
}

/// Attribute grid standing in for an image; cells are in reading order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymbolicImage {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Cell>,
}

impl SymbolicImage {
    pub fn new(rows: usize, cols: usize, cells: Vec<Cell>) -> Result<Self, DataError> {
        if rows == 0 || cols == 0 || cells.len() != rows * cols {
            return Err(DataError::Invalid(format!("{rows}x{cols} grid needs {} cells, got {}", rows * cols, cells.len())));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn cell(&self, r: usize, c: usize) -> &Cell {
        &self.cells[r * self.cols + c]
    }

    pub fn count_shape(&self, s: Shape) -> usize {
        self.cells.iter().filter(|c| c.shape == s).count()
    }

    pub fn count_color(&self, k: Color) -> usize {
        self.cells.iter().filter(|c| c.color == k).count()
    }

    pub fn is_hard(&self) -> bool {
        self.cells.iter().any(|c| c.size.is_some() || c.border.is_some())
    }
}

/// Frozen code vectors that turn cells into patch vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeTable {
    /// Indexed by `shape * 5 + color`.
    pub codes: Vec<Vec<f64>>,
    pub sizes: Vec<Vec<f64>>,
    pub borders: Vec<Vec<f64>>,
}

impl CodeTable {
    /// Draws the table and checks that all codes are well separated.
    pub fn new(seed: u64) -> Result<Self, DataError> {
        let mut rng = rng::stream(seed, &[0]);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |n: usize, scale: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..PATCH_DIM).map(|_| scale * normal.sample(&mut rng)).collect()).collect()
        };
        let codes = draw(Shape::ALL.len() * Color::ALL.len(), 1.0);
        let sizes = draw(2, ATTRIBUTE_SCALE);
        let borders = draw(2, ATTRIBUTE_SCALE);
        let table = Self { codes, sizes, borders };
        let min = table.min_pairwise_distance();
        if min <= MIN_CODE_DISTANCE {
            return Err(DataError::CodeTable(format!("codes too close (min distance {min:.3})")));
        }
        Ok(table)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for group in [&self.codes, &self.sizes, &self.borders] {
            for i in 0..group.len() {
                for j in i + 1..group.len() {
                    let d = group[i].iter().zip(&group[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    min = min.min(d);
                }
            }
        }
        min
    }

    /// Noise-free patch vector of a cell.
    pub fn code(&self, cell: &Cell) -> Vec<f64> {
        let mut v = self.codes[cell.shape as usize * Color::ALL.len() + cell.color as usize].clone();
        for (extra, table) in [(cell.size.map(|s| s as usize), &self.sizes), (cell.border.map(|b| b as usize), &self.borders)] {
            if let Some(i) = extra {
                for (x, y) in v.iter_mut().zip(&table[i]) {
                    *x += y;
                }
            }
        }
        v
    }

    /// One jittered patch per cell, reading order.
    pub fn render(&self, img: &SymbolicImage, jitter_seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(jitter_seed, &[1]);
        let normal = Normal::new(0.0, JITTER_STD).expect("jitter normal");
        img.cells
            .iter()
            .map(|cell| self.code(cell).into_iter().map(|x| x + normal.sample(&mut rng)).collect())
            .collect()
    }
}

pub fn random_cell<R: Rng + ?Sized>(rng: &mut R, hard: bool) -> Cell {
    let mut cell = Cell::plain(Shape::ALL[rng.random_range(0..4)], Color::ALL[rng.random_range(0..5)]);
    if hard {
        cell.size = Some(Size::ALL[rng.random_range(0..2)]);
        cell.border = Some(Border::ALL[rng.random_range(0..2)]);
    }
    cell
}
