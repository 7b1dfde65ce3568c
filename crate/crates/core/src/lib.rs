//! Grid-discretized single-shot polyline estimation.
//!
//! Images are partitioned into square cells; each cell hosts `P` predictors
//! that each emit one line segment, a label distribution and a confidence.
//! The crate covers discretization of polylines into per-cell segments,
//! anchor construction, assignment of predictors to ground truth, the
//! composite loss, a small trainable head, decoding back to polylines and
//! the evaluation metrics.

pub mod anchors;
pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod geom;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use anchors::{kmeans, kmeans_anchors, ma_statistic, uniform_anchors, AnchorSet};
pub use decode::{nms, stitch, NmsConfig, NmsMode, StitchConfig};
pub use error::{Error, Result};
pub use geom::{
    cart_to_mr, cell_to_image, discretize, mr_to_cart, split_polyline, CellIndex, CellSegment, Geometry, Grid,
    GridTruth, ImageSegment, Point2, Polyline, Representation, SegmentCart, SegmentMR, Space,
};
pub use loss::{composite_loss, loss_gradients, LossBreakdown, LossWeights};
pub use matching::{dynamic_assign, hungarian, CostMatrix, GridAssignment, Matching};
pub use metrics::{classify_outcomes, gate_sweep, retrieval_metrics, MetricsReport, OutcomeCounts};
pub use model::{forward, predict, train, ModelParams, TrainConfig};
pub use tensor::GridTensor;
