pub mod bench;
pub mod gen_data;
pub mod grad_check;
pub mod infer;
pub mod stats;
pub mod sweep_rho;
pub mod train;

use lc_core::ExecMode;

/// Global flags shared by every command.
pub struct Ctx {
    pub mode: ExecMode,
    pub seed: Option<u64>,
    pub deterministic: bool,
}
