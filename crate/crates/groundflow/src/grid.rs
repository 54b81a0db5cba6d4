use crate::error::{GfError, Result};

/// Uniform cell-centered 2-D grid. Cell (i, j) covers
/// `[i*dx, (i+1)*dx] x [j*dy, (j+1)*dy]` with its center at
/// `((i + 0.5)*dx, (j + 0.5)*dy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(GfError::invalid(
                "grid",
                format!("need at least 2 cells per axis, got {nx}x{ny}"),
            ));
        }
        if !(dx > 0.0) || !(dy > 0.0) {
            return Err(GfError::invalid(
                "grid",
                format!("cell sizes must be positive, got dx={dx}, dy={dy}"),
            ));
        }
        Ok(Grid2D { nx, ny, dx, dy })
    }

    /// Grid spanning `len_x x len_y` with `nx x ny` cells.
    pub fn from_extent(nx: usize, ny: usize, len_x: f64, len_y: f64) -> Result<Self> {
        if !(len_x > 0.0) || !(len_y > 0.0) {
            return Err(GfError::invalid(
                "grid",
                format!("domain lengths must be positive, got {len_x} x {len_y}"),
            ));
        }
        Grid2D::new(nx, ny, len_x / nx as f64, len_y / ny as f64)
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn len_x(&self) -> f64 {
        self.dx * self.nx as f64
    }

    pub fn len_y(&self) -> f64 {
        self.dy * self.ny as f64
    }

    pub fn x_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    pub fn y_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dy
    }

    /// Index of the cell containing physical coordinate x (clamped to the grid).
    pub fn cell_of_x(&self, x: f64) -> usize {
        ((x / self.dx) as isize).clamp(0, self.nx as isize - 1) as usize
    }

    pub fn cell_of_y(&self, y: f64) -> usize {
        ((y / self.dy) as isize).clamp(0, self.ny as isize - 1) as usize
    }
}
