//! Procedural captioned scenes: up to three coloured shapes on a 3×3 grid
//! over a black background.

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const GRID: usize = 3;
const ROWS: [&str; GRID] = ["top", "middle", "bottom"];
const COLS: [&str; GRID] = ["left", "center", "right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn channel(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Object {
    pub row: usize,
    pub col: usize,
    pub color: Color,
    pub shape: Shape,
}

/// Objects sorted by cell, row-major; at most one per cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub objects: Vec<Object>,
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, o) in self.objects.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(
                f,
                "{} {} {} {}",
                o.color.name(),
                o.shape.name(),
                ROWS[o.row],
                COLS[o.col]
            )?;
        }
        Ok(())
    }
}

impl Scene {
    pub fn caption(&self) -> String {
        self.to_string()
    }

    /// Draws the scene as a `3 × size × size` image with values in `{0, 1}`.
    pub fn render<T: Scalar>(&self, size: usize) -> Tensor<T> {
        let mut data = vec![T::zero(); 3 * size * size];
        let edge = |k: usize| k * size / GRID;
        for o in &self.objects {
            let (y0, y1, x0, x1) = (edge(o.row), edge(o.row + 1), edge(o.col), edge(o.col + 1));
            // one pixel of margin inside the cell
            let (h, w) = ((y1 - y0) as f64 - 2.0, (x1 - x0) as f64 - 2.0);
            let (cy, cx) = (y0 as f64 + 1.0 + h / 2.0, x0 as f64 + 1.0 + w / 2.0);
            for y in y0..y1 {
                for x in x0..x1 {
                    // pixel centre relative to the inner box
                    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                    let (dy, dx) = (py - cy, px - cx);
                    let inside_box = dy.abs() <= h / 2.0 && dx.abs() <= w / 2.0;
                    let hit = match o.shape {
                        Shape::Square => inside_box,
                        Shape::Circle => dy * dy + dx * dx <= (h.min(w) / 2.0).powi(2),
                        Shape::Triangle => inside_box && dx.abs() <= (dy + h / 2.0) / h * (w / 2.0),
                    };
                    if hit {
                        data[(o.color.channel() * size + y) * size + x] = T::one();
                    }
                }
            }
        }
        Tensor::new(vec![3, size, size], data).expect("shape matches")
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        // skewed towards busier scenes so small datasets rarely repeat
        let n = match rng.random_range(0..10) {
            0 => 1,
            1..=4 => 2,
            _ => 3,
        };
        let mut cells = index::sample(rng, GRID * GRID, n).into_vec();
        cells.sort_unstable();
        let objects = cells
            .into_iter()
            .map(|c| Object {
                row: c / GRID,
                col: c % GRID,
                color: Color::ALL[rng.random_range(0..3)],
                shape: Shape::ALL[rng.random_range(0..3)],
            })
            .collect();
        Self { objects }
    }
}

/// Inverse of [`Scene::caption`].
pub fn parse_caption(caption: &str) -> Result<Scene> {
    let err = |m: String| Error::InvalidArgument(format!("caption: {m}"));
    let mut objects = Vec::new();
    for part in caption.split("; ") {
        let words: Vec<&str> = part.split(' ').collect();
        let [color, shape, row, col] = words[..] else {
            return Err(err(format!("expected 4 words in {part:?}")));
        };
        let find = |list: &[&str], w: &str| list.iter().position(|&x| x == w);
        let color = Color::ALL
            .into_iter()
            .find(|c| c.name() == color)
            .ok_or_else(|| err(format!("unknown colour {color:?}")))?;
        let shape = Shape::ALL
            .into_iter()
            .find(|s| s.name() == shape)
            .ok_or_else(|| err(format!("unknown shape {shape:?}")))?;
        let row = find(&ROWS, row).ok_or_else(|| err(format!("unknown row {row:?}")))?;
        let col = find(&COLS, col).ok_or_else(|| err(format!("unknown column {col:?}")))?;
        objects.push(Object { row, col, color, shape });
    }
    if objects.windows(2).any(|w| (w[0].row, w[0].col) >= (w[1].row, w[1].col)) {
        return Err(err("objects out of cell order".into()));
    }
    Ok(Scene { objects })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub scene: Scene,
    pub image: Tensor<T>,
    pub caption: String,
}

/// `n` scenes drawn from `seed`, rendered at `image_size`.
pub fn make_dataset<T: Scalar>(seed: u64, n: usize, image_size: usize) -> Result<Vec<Sample<T>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let scene = Scene::random(&mut rng);
            Sample {
                image: scene.render(image_size),
                caption: scene.caption(),
                scene,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_format() {
        let s = Scene {
            objects: vec![
                Object {
                    row: 0,
                    col: 0,
                    color: Color::Red,
                    shape: Shape::Square,
                },
                Object {
                    row: 2,
                    col: 2,
                    color: Color::Blue,
                    shape: Shape::Circle,
                },
            ],
        };
        assert_eq!(s.caption(), "red square top left; blue circle bottom right");
        assert_eq!(parse_caption(&s.caption()).unwrap(), s);
        assert!(parse_caption("red blob top left").is_err());
        assert!(parse_caption("blue circle bottom right; red square top left").is_err());
    }

    #[test]
    fn render_colours_only_their_cell() {
        let s = Scene {
            objects: vec![Object {
                row: 1,
                col: 1,
                color: Color::Green,
                shape: Shape::Square,
            }],
        };
        let img = s.render::<f64>(30);
        let px = |c: usize, y: usize, x: usize| img.data()[(c * 30 + y) * 30 + x];
        assert_eq!(px(1, 15, 15), 1.0);
        assert_eq!(px(0, 15, 15), 0.0);
        assert_eq!(px(1, 2, 2), 0.0);
        assert_eq!(px(1, 10, 10), 0.0);
        for shape in Shape::ALL {
            let s = Scene {
                objects: vec![Object {
                    row: 0,
                    col: 2,
                    color: Color::Red,
                    shape,
                }],
            };
            let lit = s.render::<f64>(32).data().iter().filter(|&&v| v > 0.0).count();
            assert!(lit > 20, "{shape:?} lit {lit}");
        }
    }
}
