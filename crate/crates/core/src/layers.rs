//! Parameter bundles shared by the pyramid and the heads.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fully connected layer applied independently at every instant.
#[derive(Clone, Copy, Debug)]
pub struct Fc {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Fc {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut fc = Self::without_bias(store, name, din, dout, std, rng);
        fc.b = Some(store.add(format!("{name}.b"), Tensor::zeros(&[dout])));
        fc
    }

    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[din, dout], std, rng);
        Self { w, b: None }
    }

    /// Bias parameter of a layer built with [`Fc::new`].
    pub fn bias(&self) -> ParamId {
        self.b.expect("layer was built with a bias")
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = match self.b {
            Some(id) => g.param(store, id),
            None => {
                let dout = store.value(self.w).row_len();
                g.constant(Tensor::zeros(&[dout]))
            }
        };
        g.fc(x, w, b)
    }
}

/// Per-channel scale and shift of a normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn layer_norm(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, ga, be)
    }

    pub fn group_norm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        groups: usize,
    ) -> Result<Var> {
        let (ga, be) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.group_norm(x, groups, ga, be)
    }
}

/// Depthwise temporal kernel `[D, w]`.
pub fn depthwise_kernel(
    store: &mut ParamStore,
    name: &str,
    dim: usize,
    window: usize,
    std: f64,
    rng: &mut impl Rng,
) -> ParamId {
    store.add_normal(name, &[dim, window], std, rng)
}

/// Depthwise-separable unit: depthwise conv followed by an FC and an
/// optional ReLU.
#[derive(Clone, Copy, Debug)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: Fc,
    pub relu: bool,
}

impl SeparableConv {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.depthwise);
        let h = g.dwconv(x, k)?;
        let h = self.pointwise.forward(g, store, h)?;
        Ok(if self.relu { g.relu(h) } else { h })
    }
}

/// A stack of separable units; all but the last apply ReLU.
#[derive(Clone, Debug)]
pub struct SeparableStack {
    pub layers: Vec<SeparableConv>,
}

/// Initialization of a [`SeparableStack`].
#[derive(Clone, Copy, Debug)]
pub enum StackInit {
    /// Depthwise kernels start as near-identity taps, pointwise weights use
    /// fan-in scaling.
    FanIn,
    /// Every weight drawn from `N(0, std)`.
    Normal(f64),
}

impl SeparableStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        window: usize,
        init: StackInit,
        final_relu: bool,
        final_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (din, dout) = (dims[i], dims[i + 1]);
                let (kstd, wstd) = match init {
                    StackInit::FanIn => (0.1, (1.0 / din as f64).sqrt()),
                    StackInit::Normal(s) => (s, s),
                };
                let depthwise =
                    depthwise_kernel(store, &format!("{name}.{i}.dw"), din, window, kstd, rng);
                if matches!(init, StackInit::FanIn) {
                    let center = (window - 1) / 2;
                    let v = &mut store.get_mut(depthwise).value;
                    for d in 0..din {
                        let cur = v.get2(d, center);
                        v.set2(d, center, cur + 1.0);
                    }
                }
                let pw_name = format!("{name}.{i}.pw");
                let pointwise = if i + 1 < n || final_bias {
                    Fc::new(store, &pw_name, din, dout, wstd, rng)
                } else {
                    Fc::without_bias(store, &pw_name, din, dout, wstd, rng)
                };
                SeparableConv {
                    depthwise,
                    pointwise,
                    relu: i + 1 < n || final_relu,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn last(&self) -> &SeparableConv {
        self.layers.last().expect("stack is non-empty")
    }
}
