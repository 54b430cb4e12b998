//! Compositional DDIM sampling.

pub mod compose;
pub mod ddim;
pub mod fusion;
pub mod schedule;

pub use compose::{
    denoise_from, run_dual_branch, sample_single, BranchBackends, DualBranchSpec, NoiseSharing, SampleOutput,
    SamplerParams, SamplerReport, StepRecord, SubjectBranch, SurroundingBranch,
};
pub use ddim::{add_noise, ddim_step, gaussian_noise, predict_x0, LatentState};
pub use fusion::{check_disjoint, fuse_noise, fuse_noise_multi, harmonize};
pub use schedule::{BetaSpec, DiffusionSchedule, ScheduleSpec};
