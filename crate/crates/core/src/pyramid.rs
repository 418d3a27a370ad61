//! Input embedding and the multi-level SGP feature pyramid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{SeparableStack, StackInit};
use crate::param::ParamStore;
use crate::sgp::{sgp_block, SgpLayerParams};
use crate::tensor::Tensor;

pub const EMBED_WINDOW: usize = 3;

/// Two depthwise-separable layers with ReLU mapping `Din -> D`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub stack: SeparableStack,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, input_dim: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            stack: SeparableStack::new(
                store,
                "embed",
                &[input_dim, dim, dim],
                EMBED_WINDOW,
                StackInit::FanIn,
                true,
                true,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.stack.forward(g, store, x)
    }
}

/// Stride of level `l` (0-based) in input instants.
pub fn level_stride(level: usize) -> usize {
    1 << level
}

/// Length of level `l` (0-based) for an input of length `t`.
pub fn level_len(t: usize, level: usize) -> usize {
    let mut n = t;
    for _ in 0..level {
        n = n.div_ceil(2);
    }
    n
}

/// Level 0 is `sgp_block(x)`; each further level pools the previous
/// level's output by two and applies its own block.
pub fn build_pyramid(
    g: &mut Graph,
    store: &ParamStore,
    blocks: &[SgpLayerParams],
    x: Var,
) -> Result<Vec<Var>> {
    if blocks.is_empty() {
        return Err(Error::Config("a pyramid needs at least one level".into()));
    }
    let mut levels = Vec::with_capacity(blocks.len());
    let mut h = x;
    for (l, p) in blocks.iter().enumerate() {
        if l > 0 {
            h = g.max_pool2(h)?;
        }
        h = sgp_block(g, store, p, h)?;
        levels.push(h);
    }
    Ok(levels)
}

/// Materialized pyramid outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures {
    pub levels: Vec<Tensor>,
}

impl PyramidFeatures {
    pub fn from_graph(g: &Graph, levels: &[Var]) -> Self {
        Self {
            levels: levels.iter().map(|v| g.value(*v).clone()).collect(),
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels.len()).map(level_stride).collect()
    }
}
