//! Metrics, structural audits and ablation suites.

pub mod ablation;
pub mod audit;
pub mod metrics;
pub mod plot;

pub use ablation::{run_ablation, AblationConfig, AblationContext, AblationReport, MetricsRecord, RunCache, Suite};
pub use audit::blindness_audit;
pub use metrics::{psnr_frame, psnr_sequence, ssim_frame, ssim_sequence};
