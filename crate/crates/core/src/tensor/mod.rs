//! Dense complex matrices, Hermitian linear algebra and a reverse-mode tape.

pub mod autodiff;
pub mod gradcheck;
pub mod linalg;
pub mod matrix;

pub use autodiff::{Gradients, Tape, Var};
pub use matrix::{ComplexMatrix, C64, J, ONE, ZERO};
