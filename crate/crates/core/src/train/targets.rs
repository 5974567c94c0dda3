use crate::flowops::FlowField;
use crate::tensor::{avg_pool2, Scalar};

/// Supervision pyramid: entry `l` is the flow at 1/2^l resolution, divided
/// by `flow_scale` and expressed in level-`l` pixels.
pub fn scale_targets<T: Scalar>(flow: &FlowField<T>, levels: usize, flow_scale: f64) -> Vec<FlowField<T>> {
    let mut out = Vec::with_capacity(levels + 1);
    let mut cur = flow.tensor().scale(T::lit(1.0 / flow_scale));
    out.push(FlowField::new(cur.clone()).expect("scaling keeps flow finite"));
    for _ in 0..levels {
        cur = avg_pool2(&cur).scale(T::lit(0.5));
        out.push(FlowField::new(cur.clone()).expect("pooling keeps flow finite"));
    }
    out
}

/// Inverse of the value scaling at `level` (no resampling).
pub fn unscale_flow<T: Scalar>(flow: &FlowField<T>, level: usize, flow_scale: f64) -> FlowField<T> {
    let k = flow_scale * (1u64 << level) as f64;
    FlowField::new(flow.tensor().scale(T::lit(k))).expect("scaling keeps flow finite")
}
