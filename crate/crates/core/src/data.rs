use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Paired inputs `x[N×n]` and regression targets `y[N×m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor) -> Result<Self> {
        if x.rank() < 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
            return Err(Error::shape("dataset", x.shape(), y.shape()));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.shape()[1..].iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            x: self.x.gather_rows(rows)?,
            y: self.y.gather_rows(rows)?,
        })
    }
}
