//! Minimal neural-network kernels with hand-written gradients.
//!
//! Everything runs in f64 on the CPU. Forward functions return the caches
//! their backward counterparts need; gradients are verified against central
//! finite differences in the test suite.

pub mod adam;
pub mod ops;

pub use adam::Adam;

use ndarray::{Array1, Array2, Array3, Array4};

use crate::error::{Error, Result};

/// Sequential reader over a flat parameter vector.
pub struct FlatReader<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> FlatReader<'a> {
    pub fn new(data: &'a [f64]) -> Self {
        FlatReader { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!(
                "parameter payload too short: needed {} more values, {} left",
                n,
                self.data.len() - self.pos
            )));
        }
        let slice = self.data[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Ok(slice)
    }

    pub fn a1(&mut self, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from_vec(self.take(n)?))
    }

    pub fn a2(&mut self, d: (usize, usize)) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_vec(d, self.take(d.0 * d.1)?).expect("shape matches"))
    }

    pub fn a3(&mut self, d: (usize, usize, usize)) -> Result<Array3<f64>> {
        Ok(Array3::from_shape_vec(d, self.take(d.0 * d.1 * d.2)?).expect("shape matches"))
    }

    pub fn a4(&mut self, d: (usize, usize, usize, usize)) -> Result<Array4<f64>> {
        Ok(Array4::from_shape_vec(d, self.take(d.0 * d.1 * d.2 * d.3)?).expect("shape matches"))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Checkpoint(format!(
                "parameter payload too long: {} values left over",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}
