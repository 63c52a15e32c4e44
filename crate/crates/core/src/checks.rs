//! Finite-difference verification of the full model's two training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::generate_tree;
use crate::finetune::finetune_loss;
use crate::model::{GBert, ModelConfig};
use crate::numerics::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::ontology::{CodeType, OntologyTree, PatientRecord, Visit};
use crate::pretrain::{mask_codes, pretrain_loss, MaskedVisit};
use crate::Error;

/// A deliberately small model so every parameter entry can be perturbed.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        gat_heads: 2,
        hidden: 4,
        ffn: 6,
        layers: 1,
        enc_heads: 2,
        mlp_hidden: 5,
        ..ModelConfig::default()
    }
}

pub struct GradcheckSetup {
    pub dx: OntologyTree,
    pub rx: OntologyTree,
    pub model: GBert<f64>,
    pub record: PatientRecord,
    pub masked: Vec<MaskedVisit>,
}

/// 12 diagnosis and 8 medication leaves, one patient with three visits whose
/// masked copies form the pre-training batch.
pub fn tiny_setup(config: ModelConfig, seed: u64) -> Result<GradcheckSetup, Error> {
    let dx = generate_tree(CodeType::Diagnosis, 12, 2)?;
    let rx = generate_tree(CodeType::Medication, 8, 2)?;
    let model = GBert::new(config, &dx, &rx, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let visits: Vec<Visit> = (0..3)
        .map(|_| {
            let nd = rng.gen_range(2..6);
            let nr = rng.gen_range(1..4);
            let dx = rand::seq::index::sample(&mut rng, 12, nd).into_vec();
            let rx = rand::seq::index::sample(&mut rng, 8, nr).into_vec();
            Visit::new(dx, rx)
        })
        .collect();
    let mut masked: Vec<MaskedVisit> = visits.iter().map(|v| mask_codes(v, 0.3, &mut rng)).collect();
    // Make sure the MASK embedding takes part.
    if masked.iter().all(|m| m.masked_count() == 0) {
        masked[0].dx_mask[0] = true;
    }
    Ok(GradcheckSetup { dx, rx, model, record: PatientRecord { pid: "gradcheck".into(), visits }, masked })
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelGradcheck {
    pub pretrain: GradCheckReport,
    pub finetune: GradCheckReport,
}

impl ModelGradcheck {
    pub fn passed(&self) -> bool {
        self.pretrain.passed() && self.finetune.passed()
    }
}

/// Checks analytic gradients of the pre-training and fine-tuning losses
/// against central differences over every parameter.
pub fn gradcheck_model(setup: &GradcheckSetup, opts: &GradCheckOptions) -> Result<ModelGradcheck, Error> {
    let skeleton = setup.model.clone();
    let mut store = setup.model.store.clone();
    let pretrain = finite_diff_check(
        &mut store,
        |g, s| {
            let mut m = skeleton.clone();
            m.store = s.clone();
            Ok(pretrain_loss(&m, g, &setup.masked)?.total)
        },
        opts,
    )?;
    let finetune = finite_diff_check(
        &mut store,
        |g, s| {
            let mut m = skeleton.clone();
            m.store = s.clone();
            finetune_loss(&m, g, &[&setup.record])
        },
        opts,
    )?;
    Ok(ModelGradcheck { pretrain, finetune })
}
