/// Execution mode for compute kernels.
///
/// `Deterministic` fixes the accumulation order of every convolution to
/// kernel-row-major (channel, then kernel row, then kernel column) and runs
/// single-threaded, so repeated runs are bit-identical. `Fast` may split
/// dot products across several accumulators and parallelize over output
/// rows and batch images; it is excluded from bit-exact guarantees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Deterministic,
    Fast,
}

impl ExecMode {
    pub fn is_deterministic(self) -> bool {
        matches!(self, ExecMode::Deterministic)
    }
}
