use candle_core::DType;

use crate::config::{MaskingConfig, TrainConfig};
use crate::encoders::{EncoderConfig, TextEncoder, VisionEncoder};
use crate::error::Result;
use crate::losses::instance::MatchHead;
use crate::losses::modality::{MaeDecoder, MlmHead};
use crate::nn::{ParamBuilder, ParamStore};
use crate::seeds::{self, Stream};

/// Both encoders plus every head used by the objective. All heads are built
/// regardless of which scales are enabled so checkpoints share one layout.
#[derive(Debug)]
pub struct Model {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub match_head: MatchHead,
    pub decoder: MaeDecoder,
    pub mlm_head: MlmHead,
    store: ParamStore,
}

impl Model {
    pub fn new(enc: &EncoderConfig, masking: &MaskingConfig, seed: u64, dtype: DType) -> Result<Self> {
        enc.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = seeds::rng(seed, Stream::Init, 0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let vision = VisionEncoder::new(&mut pb.pp("vision"), enc)?;
        let text = TextEncoder::new(&mut pb.pp("text"), enc)?;
        let match_head = MatchHead::new(&mut pb.pp("match"), enc.embed_dim)?;
        let recon_dim = if masking.latent_targets {
            enc.embed_dim
        } else {
            enc.patch_pixels()
        };
        let decoder = MaeDecoder::new(
            &mut pb.pp("mae"),
            enc.embed_dim,
            enc.heads,
            masking.decoder_depth,
            enc.grid(),
            recon_dim,
        )?;
        let mlm_head = MlmHead::new(&mut pb.pp("mlm"), enc.embed_dim, enc.vocab_size)?;
        Ok(Self {
            vision,
            text,
            match_head,
            decoder,
            mlm_head,
            store,
        })
    }

    pub fn from_config(cfg: &TrainConfig, dtype: DType) -> Result<Self> {
        Self::new(&cfg.model, &cfg.masking, cfg.seed, dtype)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &EncoderConfig {
        self.vision.config()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let cfg = TrainConfig::default();
        let a = Model::from_config(&cfg, DType::F32).unwrap();
        let b = Model::from_config(&cfg, DType::F32).unwrap();
        assert_eq!(a.params().len(), b.params().len());
        for ((na, va), (nb, vb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            let x = va.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = vb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y);
        }
        assert!(a.params().iter().any(|(n, _)| n.starts_with("mae.")));
    }
}
