#![no_main]

use filab::model::{InterventionPlan, Model, ModelConfig, PatchSources};
use libfuzzer_sys::fuzz_target;
use std::sync::OnceLock;

fn model() -> &'static Model {
    static M: OnceLock<Model> = OnceLock::new();
    M.get_or_init(|| {
        let mut c = ModelConfig::toy(filab::Vocab::new().len());
        c.n_layers = 2;
        c.n_heads = 2;
        c.d_model = 8;
        c.d_head = 4;
        c.d_mlp = 8;
        c.max_seq = 16;
        Model::init(c, 0).unwrap()
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(plan) = serde_json::from_slice::<InterventionPlan>(data) else { return };
    let tokens = [0, 2, 12, 3, 13];
    let _ = filab::model::forward_intervened(model(), &tokens, &plan, PatchSources::none());
});
