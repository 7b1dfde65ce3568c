//! The per-cell prediction block: `rows × cols × P × V` values.

use crate::error::{Error, Result};
use crate::geom::{
    cell_point_to_image, CellIndex, CellSegment, Geometry, Grid, ImageSegment, Point2,
    Representation, SegmentCart,
};

/// Values per predictor: 4 geometry, `classes` label scores, 1 confidence.
pub fn values_per_predictor(classes: usize) -> usize {
    4 + classes + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridTensor {
    pub grid: Grid,
    pub predictors: usize,
    pub classes: usize,
    pub representation: Representation,
    data: Vec<f64>,
}

impl GridTensor {
    pub fn zeros(grid: Grid, predictors: usize, classes: usize, representation: Representation) -> Self {
        let len = grid.num_cells() * predictors * values_per_predictor(classes);
        Self { grid, predictors, classes, representation, data: vec![0.0; len] }
    }

    pub fn from_data(
        grid: Grid,
        predictors: usize,
        classes: usize,
        representation: Representation,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = grid.num_cells() * predictors * values_per_predictor(classes);
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "grid tensor needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { grid, predictors, classes, representation, data })
    }

    pub fn values_per_predictor(&self) -> usize {
        values_per_predictor(self.classes)
    }

    /// `[rows, cols, P, V]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.grid.rows, self.grid.cols, self.predictors, self.values_per_predictor()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, flat_cell: usize, predictor: usize) -> usize {
        (flat_cell * self.predictors + predictor) * self.values_per_predictor()
    }

    /// Values of one predictor in one cell.
    pub fn slot(&self, flat_cell: usize, predictor: usize) -> &[f64] {
        let o = self.offset(flat_cell, predictor);
        &self.data[o..o + self.values_per_predictor()]
    }

    pub fn slot_mut(&mut self, flat_cell: usize, predictor: usize) -> &mut [f64] {
        let o = self.offset(flat_cell, predictor);
        let v = self.values_per_predictor();
        &mut self.data[o..o + v]
    }

    pub fn cell_block(&self, flat_cell: usize) -> &[f64] {
        let o = self.offset(flat_cell, 0);
        &self.data[o..o + self.predictors * self.values_per_predictor()]
    }

    pub fn cell_block_mut(&mut self, flat_cell: usize) -> &mut [f64] {
        let o = self.offset(flat_cell, 0);
        let len = self.predictors * self.values_per_predictor();
        &mut self.data[o..o + len]
    }

    pub fn geometry(&self, flat_cell: usize, predictor: usize) -> [f64; 4] {
        let s = self.slot(flat_cell, predictor);
        [s[0], s[1], s[2], s[3]]
    }

    pub fn labels(&self, flat_cell: usize, predictor: usize) -> &[f64] {
        &self.slot(flat_cell, predictor)[4..4 + self.classes]
    }

    pub fn confidence(&self, flat_cell: usize, predictor: usize) -> f64 {
        self.slot(flat_cell, predictor)[4 + self.classes]
    }

    pub fn cell_segment(&self, cell: CellIndex, predictor: usize) -> CellSegment {
        let flat = self.grid.flat_index(cell);
        CellSegment {
            geometry: Geometry::from_coords(self.representation, self.geometry(flat, predictor)),
            label_probs: self.labels(flat, predictor).to_vec(),
            confidence: self.confidence(flat, predictor),
            cell,
        }
    }

    /// Image-space segment of a predictor with its endpoints clamped into the cell.
    pub fn image_segment(&self, cell: CellIndex, predictor: usize) -> ImageSegment {
        let flat = self.grid.flat_index(cell);
        let c = clamp_to_cell(
            Geometry::from_coords(self.representation, self.geometry(flat, predictor)).to_cart(),
        );
        ImageSegment {
            start: cell_point_to_image(c.s, cell, &self.grid),
            end: cell_point_to_image(c.e, cell, &self.grid),
            label_probs: self.labels(flat, predictor).to_vec(),
            confidence: self.confidence(flat, predictor),
            cell: Some(cell),
            predictor: Some(predictor),
        }
    }
}

/// Clamps both endpoints into the unit cell.
pub fn clamp_to_cell(c: SegmentCart) -> SegmentCart {
    let clamp = |p: Point2| {
        let u = if p.u.is_nan() { 0.5 } else { p.u.clamp(0.0, 1.0) };
        let v = if p.v.is_nan() { 0.5 } else { p.v.clamp(0.0, 1.0) };
        Point2::new(u, v)
    };
    SegmentCart { s: clamp(c.s), e: clamp(c.e) }
}
