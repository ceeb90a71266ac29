//! Dense tensors, reverse-mode differentiation and gradient verification.

mod gradcheck;
pub mod kernels;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_against, finite_diff_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use ops::{masked_softmax, matmul, matmul_bt, rms_norm, Mask};
pub use params::{Gradients, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tape::{bce_term, Tape, Var};
pub use tensor::Tensor;

/// Reverse accumulation of `loss` over `tape`; unreachable parameters get zeros.
pub fn reverse_accumulate(tape: &Tape<'_>, loss: Var) -> crate::Result<Gradients> {
    tape.backward(loss)
}
