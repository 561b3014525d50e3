//! Cost accounting and feature-map inspection.

mod cost;
mod features;

pub use cost::{
    count_flops, count_params, scaling_probe, AttentionTerm, CostReport, CostRow, ScalingRow, Term,
};
pub use features::{
    encode_pgm, export_feature_maps, normalize_plane, ChannelSelection, ExportedMap,
};
