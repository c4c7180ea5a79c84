//! Segmentation metrics, report files and step plots.

mod metrics;
mod plot;
mod report;

pub use metrics::{
    confusion_accumulate, harmonic_mean, iou_per_class, miou, relative_gain, ConfusionMatrix,
};
pub use plot::{plot_svg, write_plot};
pub use report::{
    evaluate, read_report, read_trace, upsample_nearest, write_report, MetricsReport, ReportPaths,
};
