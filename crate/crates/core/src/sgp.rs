//! Scalable-Granularity Perception block.
//!
//! The core mixes an instant-level branch, a video-level gate applied to a
//! per-instant FC, with a window-level branch, a window-`w` gate applied to
//! the sum of a window-`w` and a window-`kw` depthwise convolution. The block
//! wraps the core in a pre-norm Transformer-style layout with group norm and
//! an FFN in place of the second layer norm.

use rand::Rng;

use crate::config::scaled_window;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{depthwise_kernel, Affine, Fc};
use crate::param::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgpConfig {
    pub dim: usize,
    pub window: usize,
    pub scale_k: f64,
    pub gn_groups: usize,
    pub ffn_ratio: usize,
}

impl SgpConfig {
    pub fn wide_window(&self) -> usize {
        scaled_window(self.window, self.scale_k)
    }
}

#[derive(Clone, Debug)]
pub struct SgpLayerParams {
    pub fc_instant: Fc,
    pub fc_phi: Fc,
    pub conv_psi: ParamId,
    pub conv_w: ParamId,
    pub conv_kw: ParamId,
    pub ln: Affine,
    pub gn: Affine,
    pub ffn_in: Fc,
    pub ffn_out: Fc,
    pub gn_groups: usize,
}

/// How the weights of a fresh block are drawn.
#[derive(Clone, Copy, Debug)]
pub enum SgpInit {
    /// FC weights `N(0, 1/fan_in)`, depthwise kernels `N(0, 1/w)`.
    FanIn,
    /// Every weight `N(0, std)`.
    Normal(f64),
}

impl SgpLayerParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &SgpConfig,
        init: SgpInit,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.dim;
        let hidden = d * cfg.ffn_ratio;
        let (w, kw) = (cfg.window, cfg.wide_window());
        let fc_std = |fan_in: usize| match init {
            SgpInit::FanIn => (1.0 / fan_in as f64).sqrt(),
            SgpInit::Normal(s) => s,
        };
        let conv_std = |win: usize| match init {
            SgpInit::FanIn => (1.0 / win as f64).sqrt(),
            SgpInit::Normal(s) => s,
        };
        Self {
            fc_instant: Fc::new(store, &format!("{name}.fc_instant"), d, d, fc_std(d), rng),
            fc_phi: Fc::new(store, &format!("{name}.fc_phi"), d, d, fc_std(d), rng),
            conv_psi: depthwise_kernel(store, &format!("{name}.conv_psi"), d, w, conv_std(w), rng),
            conv_w: depthwise_kernel(store, &format!("{name}.conv_w"), d, w, conv_std(w), rng),
            conv_kw: depthwise_kernel(store, &format!("{name}.conv_kw"), d, kw, conv_std(kw), rng),
            ln: Affine::new(store, &format!("{name}.ln"), d),
            gn: Affine::new(store, &format!("{name}.gn"), d),
            ffn_in: Fc::new(store, &format!("{name}.ffn_in"), d, hidden, fc_std(d), rng),
            ffn_out: Fc::new(
                store,
                &format!("{name}.ffn_out"),
                hidden,
                d,
                fc_std(hidden),
                rng,
            ),
            gn_groups: cfg.gn_groups,
        }
    }

    /// Parameters of the two SGP branches (everything except the norms and
    /// the FFN).
    pub fn branch_params(&self) -> [ParamId; 7] {
        [
            self.fc_instant.w,
            self.fc_instant.bias(),
            self.fc_phi.w,
            self.fc_phi.bias(),
            self.conv_psi,
            self.conv_w,
            self.conv_kw,
        ]
    }
}

/// `φ(x)⊙FC(x) + ψ(x)⊙(Conv_w(x) + Conv_kw(x)) + x` with
/// `φ(x) = ReLU(FC(AvgPool(x)))` broadcast over time and `ψ = Conv_w`.
pub fn sgp_core(g: &mut Graph, store: &ParamStore, p: &SgpLayerParams, x: Var) -> Result<Var> {
    let pooled = g.avg_pool(x)?;
    let phi = p.fc_phi.forward(g, store, pooled)?;
    let phi = g.relu(phi);
    let inst = p.fc_instant.forward(g, store, x)?;
    let inst = g.mul_row(inst, phi)?;

    let (kpsi, kw, kkw) = (
        g.param(store, p.conv_psi),
        g.param(store, p.conv_w),
        g.param(store, p.conv_kw),
    );
    let psi = g.dwconv(x, kpsi)?;
    let narrow = g.dwconv(x, kw)?;
    let wide = g.dwconv(x, kkw)?;
    let win = g.add(narrow, wide)?;
    let win = g.mul(psi, win)?;

    let y = g.add(inst, win)?;
    g.add(y, x)
}

/// `y = sgp_core(LN(x))`, `z = y + FFN(GN(y))`.
pub fn sgp_block(g: &mut Graph, store: &ParamStore, p: &SgpLayerParams, x: Var) -> Result<Var> {
    let n = p.ln.layer_norm(g, store, x)?;
    let y = sgp_core(g, store, p, n)?;
    let h = p.gn.group_norm(g, store, y, p.gn_groups)?;
    let h = p.ffn_in.forward(g, store, h)?;
    let h = g.relu(h);
    let h = p.ffn_out.forward(g, store, h)?;
    g.add(y, h)
}
