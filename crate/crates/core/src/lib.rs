//! Single-stage semi-supervised object detection: a teacher-student
//! training loop with confidence reweighting of pseudo labels, greedy
//! pseudo-box fusion for the regression branch and a deformable encoder
//! neck, all on a small hand-written autodiff engine.

pub mod augment;
pub mod cli;
pub mod data;
pub mod detector;
pub mod eval;
pub mod dual;
pub mod error;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod pseudo;
pub mod teacher_student;
pub mod tensor;

pub use error::{Error, Result};
