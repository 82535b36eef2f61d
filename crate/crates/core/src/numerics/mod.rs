//! Dense tensors, kernels with hand-written gradients, seeded draws and the
//! STF1 file format.

pub mod gradcheck;
pub mod ops;
pub mod rng;
mod scalar;
pub mod stf;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at};
pub use rng::SeededRng;
pub use scalar::{DType, Scalar};
pub use tensor::{flatten, unflatten_into, Tensor};

/// Forward-equivalence tolerance for f32 runs.
pub const TOL_F32: f64 = 1e-5;
/// Forward-equivalence tolerance for f64 runs.
pub const TOL_F64: f64 = 1e-10;

/// The equivalence tolerance for an element type.
pub fn tolerance<T: Scalar>() -> f64 {
    match T::DTYPE {
        DType::F32 => TOL_F32,
        DType::F64 => TOL_F64,
    }
}
