use std::sync::Arc;

use super::graph::{Graph, RowMixing, Var};
use crate::error::{Error, Result};

/// 1-D convolution along the row (prototype) axis of a `C × d` matrix,
/// zero-padded at both ends.
///
/// `kernels[k]` is a `d_in × d_out` mixing matrix applied to the row at
/// offset `k − width/2`. With a single kernel this is a plain channel
/// mixing `x · W`.
pub fn conv1d_proto(
    g: &mut Graph,
    x: Var,
    kernels: &[Var],
    bias: Option<Var>,
) -> Result<Var> {
    let width = kernels.len();
    if width == 0 || width % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv1d kernel width must be odd, got {width}"
        )));
    }
    let rows = g.value(x).rows();
    let half = (width / 2) as isize;
    let mut acc: Option<Var> = None;
    for (k, &w) in kernels.iter().enumerate() {
        let offset = k as isize - half;
        let src = if offset == 0 {
            x
        } else {
            g.row_mix(x, Arc::new(RowMixing::shift(rows, offset)))?
        };
        let term = g.matmul(src, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let out = acc.expect("width is at least one");
    match bias {
        Some(b) => g.add_row(out, b),
        None => Ok(out),
    }
}
