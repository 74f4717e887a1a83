//! Cross-stage-partial wrapper: a 1×1 projection, a channel split where only
//! the second half goes through the inner transform, and a 1×1 merge.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamBuilder};

/// Y = Conv1×1(Concat(X′₁, inner(X′₂))) with X′ = Conv1×1(X) split in half
/// along channels.
pub fn csp_split_merge(
    x: &Tensor,
    project: &Conv2d,
    merge: &Conv2d,
    inner: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c % 2 != 0 {
        return Err(Error::Config(format!("CSP split needs an even channel count, got {c}")));
    }
    let projected = project.forward(x)?;
    let kept = projected.narrow(1, 0, c / 2)?;
    let routed = projected.narrow(1, c / 2, c / 2)?.contiguous()?;
    let transformed = inner(&routed)?;
    if transformed.dims() != routed.dims() {
        return Err(Error::Contract(format!(
            "CSP inner transform changed shape {:?} -> {:?}",
            routed.dims(),
            transformed.dims()
        )));
    }
    merge.forward(&Tensor::cat(&[&kept, &transformed], 1)?)
}

/// The two 1×1 convolutions surrounding a CSP inner transform.
#[derive(Clone)]
pub struct CspProjections {
    pub project: Conv2d,
    pub merge: Conv2d,
}

impl CspProjections {
    pub fn new(pb: &ParamBuilder, channels: usize) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!(
                "CSP block needs an even channel count, got {channels}"
            )));
        }
        Ok(Self {
            project: Conv2d::new(&pb.pp("project"), channels, channels, 1, 1, true)?,
            merge: Conv2d::new(&pb.pp("merge"), channels, channels, 1, 1, true)?,
        })
    }

    pub fn apply(&self, x: &Tensor, inner: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        csp_split_merge(x, &self.project, &self.merge, inner)
    }

    pub fn set_identity(&self) -> Result<()> {
        self.project.set_identity()?;
        self.merge.set_identity()
    }
}
