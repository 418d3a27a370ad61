//! The full detector: embedding, SGP pyramid and shared heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::{run_heads, HeadOutputs, HeadParams, LevelVars};
use crate::io::Checkpoint;
use crate::param::ParamStore;
use crate::pyramid::{build_pyramid, Embedding};
use crate::sgp::{SgpConfig, SgpInit, SgpLayerParams};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub embed: Embedding,
    pub blocks: Vec<SgpLayerParams>,
    pub heads: HeadParams,
}

impl Model {
    /// Fresh parameters drawn from `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let embed = Embedding::new(&mut store, cfg.input_dim, cfg.dim, &mut rng);
        let sgp = SgpConfig {
            dim: cfg.dim,
            window: cfg.window,
            scale_k: cfg.scale_k,
            gn_groups: cfg.gn_groups,
            ffn_ratio: cfg.ffn_ratio,
        };
        let blocks = (0..cfg.levels)
            .map(|l| {
                SgpLayerParams::new(
                    &mut store,
                    &format!("sgp{l}"),
                    &sgp,
                    SgpInit::FanIn,
                    &mut rng,
                )
            })
            .collect();
        let heads = HeadParams::new(
            &mut store,
            cfg.head,
            cfg.dim,
            cfg.num_classes,
            cfg.bins,
            &mut rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            store,
            embed,
            blocks,
            heads,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.row_len() != self.cfg.input_dim {
            return Err(Error::dim(
                "model input",
                x.shape(),
                &[0, self.cfg.input_dim],
            ));
        }
        if x.rows() == 0 {
            return Err(Error::EmptyInput("model input"));
        }
        Ok(())
    }

    /// Builds the forward pass for `[T, input_dim]` features on `g`, reading
    /// parameters from `store` (which must share this model's layout).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &Tensor,
    ) -> Result<Vec<LevelVars>> {
        self.check_input(x)?;
        let xv = g.constant(x.clone());
        let h = self.embed.forward(g, store, xv)?;
        let levels: Vec<Var> = build_pyramid(g, store, &self.blocks, h)?;
        run_heads(
            g,
            store,
            &self.heads,
            &levels,
            self.cfg.detach_boundary_heads,
        )
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Vec<LevelVars>> {
        self.forward_with(g, &self.store, x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<HeadOutputs> {
        let mut g = Graph::new();
        let lv = self.forward(&mut g, x)?;
        Ok(HeadOutputs::from_graph(&g, &lv))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_json: self.cfg.to_json(),
            params: self
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds the architecture from the echoed config and loads values.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = TrainConfig::from_json_str(&ck.config_json)?;
        let mut m = Self::new(&cfg)?;
        m.store.load_values(ck.params.clone())?;
        Ok(m)
    }
}
