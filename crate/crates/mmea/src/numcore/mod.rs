//! Dense matrix arithmetic, reverse-mode differentiation, and the
//! finite-difference gradient checker that keeps the analytic gradients
//! honest.

pub mod gradcheck;
pub mod matrix;
pub mod sparse;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use matrix::{row_l2_normalize, Matrix};
pub use sparse::SparseMatrix;
pub use tape::{CustomOp, Gradients, NodeId, Tape};

/// A trainable quantity: a value matrix and its gradient accumulator,
/// always the same shape.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
    }
}
