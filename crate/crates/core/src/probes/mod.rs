//! Exact decompositions of forward features and hidden gradients into
//! init / update pieces, RMS term series and alignment exponents.

mod alignment;
mod decompose;
mod terms;

pub use alignment::{measure_alignment_exponent, observe, observe_layer, observe_stacked, AlignmentObservation};
pub use decompose::{
    base_forward, check_identity, check_identity_against, decompose_backward_input_grad, decompose_forward_aggregation, decompose_layer_update,
    forward_split, probe_all, ActLayer, ForwardSplit, LayerSplit, SplitRms, IDENTITY_TOL,
};
pub use terms::{collect_series, write_series_csv, TermId, TermMap, TermSeries};
