#![allow(dead_code)]

use std::path::PathBuf;

use filab::model::{load_model, Model, ModelConfig, NormKind, PosKind};
use filab::Vocab;

/// Untrained model with weights scaled up so interventions move the logits.
pub fn scaled(seed: u64) -> Model {
    let c = ModelConfig {
        n_layers: 3,
        n_heads: 4,
        d_model: 32,
        d_head: 8,
        d_mlp: 64,
        vocab_size: Vocab::new().len(),
        max_seq: 512,
        norm_kind: NormKind::Rms,
        pos_kind: PosKind::LearnedAbsolute,
        mlp_free: Vec::new(),
    };
    let mut m = Model::init(c, seed).unwrap();
    for p in m.params_mut() {
        p.iter_mut().for_each(|v| *v *= 6.0);
    }
    m
}

pub fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy.filab")
}

pub fn fixture() -> Model {
    load_model(fixture_path()).expect("committed toy checkpoint")
}

/// Random `<bos>`-prefixed sequence of non-special tokens.
pub fn random_tokens(rng: &mut impl rand::Rng, len: usize) -> Vec<u32> {
    let v = Vocab::new().len() as u32;
    let mut t = vec![filab::tokenizer::BOS];
    t.extend((1..len).map(|_| rng.gen_range(2..v)));
    t
}
