//! The trainable artifact: backbone, per-layer heads and uncertainty heads
//! over one shared parameter set.

use crate::autodiff::ParamSet;
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::Result;
use crate::rng::{domain, Rng};
use crate::uem::UemBank;

pub struct DenoiserModel {
    pub backbone: Backbone,
    pub uem: UemBank,
    pub params: ParamSet,
}

impl DenoiserModel {
    /// Fresh weights, deterministic in the seed.
    pub fn init(config: BackboneConfig, share_uem_params: bool, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = Rng::stream(seed, domain::INIT, 0);
        let backbone = Backbone::init(config, &mut params, &mut rng)?;
        let uem = UemBank::init(
            &mut params,
            backbone.config.depth,
            backbone.config.hidden_dim,
            backbone.config.hidden_dim,
            share_uem_params,
            &mut rng,
        );
        Ok(DenoiserModel {
            backbone,
            uem,
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }
}
