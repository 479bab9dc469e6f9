//! Image and depth metrics, rendering of evaluation views, run reports and
//! the loss ablation.
//!
//! Held-out frames have no trained pose row. Their pose is interpolated
//! between the learned training poses at the frame's timestamp and then
//! refined photometrically against the frozen scene.

mod ablation;
mod metrics;
mod report;
mod views;

pub use ablation::{ablation_table, run_ablation, AblationRow, Variant, ABLATION_TABLE, VARIANTS};
pub use metrics::{
    depth_metrics, median_scale, psnr, ssim, ssim_map, ssim_masked, DepthMetrics, ImageMetrics, DELTA_BASE,
    SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use report::{
    evaluate, evaluate_checkpoint, evaluation_pose, frame_stem, EvalReport, Evaluation, FrameMetrics, FrameReport, PoseSource,
    RENDER_DIR, REPORT_FILE,
};
pub use views::{interpolate_pose, refine_pose, render_view, View};
