//! Encoder plus CTC output heads, with all parameters in one store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::CtcHead;
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Non-blank token count `V`.
    pub vocab: usize,
    /// Intermediate losses reuse the final head when set.
    pub shared_head: bool,
    /// Parameter initialization seed.
    pub seed: u64,
}

/// Final head plus the head used for intermediate layers.
#[derive(Clone, Debug)]
pub struct CtcHeads {
    pub final_head: CtcHead,
    pub intermediate_head: Option<CtcHead>,
}

impl CtcHeads {
    pub fn intermediate(&self) -> &CtcHead {
        self.intermediate_head.as_ref().unwrap_or(&self.final_head)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub heads: CtcHeads,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, EncoderError> {
        if config.vocab == 0 {
            return Err(EncoderError::InvalidConfig("vocabulary must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut params, &mut rng)?;
        let d = config.encoder.d_model;
        let classes = config.vocab + 1;
        let final_head = CtcHead::new(&mut params, "head", d, classes, &mut rng);
        let intermediate_head =
            (!config.shared_head).then(|| CtcHead::new(&mut params, "inter_head", d, classes, &mut rng));
        Ok(Self {
            config,
            params,
            encoder,
            heads: CtcHeads {
                final_head,
                intermediate_head,
            },
        })
    }

    /// Rebuilds the model structure for `config` and installs `params`, which
    /// must match it name for name and shape for shape.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self, EncoderError> {
        let mut model = Self::new(config)?;
        let expected = model.params.iter().map(|(n, t)| (n, t.shape()));
        let given = params.iter().map(|(n, t)| (n, t.shape()));
        if model.params.len() != params.len() || !expected.eq(given) {
            return Err(EncoderError::InvalidConfig(
                "parameter names or shapes do not match the configured model".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }
}
