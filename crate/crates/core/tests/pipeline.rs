mod common;

use filab::analysis::{base8_error_table, fv_heatmap, TableAblation};
use filab::interventions::AblationMode;
use filab::model::{Model, ModelConfig};
use filab::tasks::TaskSpec;
use filab::trainer::{
    bucket, eval_accuracy, eval_accuracy_with, eval_items, train, Bucket, Mixture, ModelPredictor, TrainConfig,
    TrainHooks,
};
use filab::Vocab;
use proptest::prelude::*;

#[test]
fn zero_vectors_give_a_zero_heatmap() {
    let model = common::scaled(2);
    let heads = [(0, 0), (1, 2), (2, 3)];
    let zeros = vec![vec![0.0; model.config.d_model]; heads.len()];
    let grid = fv_heatmap(&model, &heads, &zeros, &Vocab::new()).unwrap();
    assert_eq!(grid.cells.len(), 10);
    assert!(grid.cells.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn heatmap_is_reproducible() {
    let model = common::scaled(3);
    let heads = [(1, 1), (2, 0)];
    let vectors: Vec<Vec<f32>> = (0..2)
        .map(|i| (0..model.config.d_model).map(|j| ((i * 7 + j) % 5) as f32 - 2.0).collect())
        .collect();
    let a = fv_heatmap(&model, &heads, &vectors, &Vocab::new()).unwrap();
    let b = fv_heatmap(&model, &heads, &vectors, &Vocab::new()).unwrap();
    assert_eq!(a, b);
    assert!(a.cells.iter().flatten().any(|&v| v != 0.0));
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_csv(&mut x).unwrap();
    b.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn base8_rows_partition_their_samples() {
    let model = common::scaled(4);
    let heads = [(2, 1)];
    for n in [1, 5] {
        let ab = TableAblation {
            heads: &heads,
            mode: AblationMode::Zero,
            bank: None,
        };
        let t = base8_error_table(&model, n, 3, 9, Some(ab)).unwrap();
        assert_eq!(t.rows.len(), 3);
        for r in &t.rows {
            assert_eq!(r.full.total(), n);
            assert_eq!(r.ablated.unwrap().total(), n);
        }
    }
    assert!(base8_error_table(&model, 0, 3, 9, None).is_err());
}

#[test]
fn eval_buckets_partition() {
    let model = common::scaled(5);
    for k in [-1, 1, 2] {
        let spec = TaskSpec::off_by_k(k, 4).with_seed((k + 10) as u64);
        let r = eval_accuracy(&model, &spec, 40, 4).unwrap();
        let counts = [r.base_acc, r.contrast_acc, r.other_frac].map(|f| f * r.n as f64);
        for c in counts {
            assert!((c - c.round()).abs() < 1e-9);
        }
        assert_eq!(counts.iter().map(|c| c.round() as usize).sum::<usize>(), r.n);

        let items = eval_items(&spec, 40, 4, &Vocab::new()).unwrap();
        let pred = ModelPredictor {
            model: &model,
            ablation: None,
        };
        assert_eq!(eval_accuracy_with(&pred, &items, 4).unwrap(), r);
    }
}

#[test]
fn buckets_compare_same_length_prefixes() {
    let items = eval_items(&TaskSpec::off_by_k(1, 2).with_seed(1), 1, 2, &Vocab::new()).unwrap();
    let it = &items[0];
    assert_eq!(bucket(&it.cont_answer, it), Bucket::Contrast);
    assert_eq!(bucket(&format!("{}7", it.cont_answer), it), Bucket::Contrast);
    assert_eq!(bucket(&it.base_answer, it), Bucket::Base);
    assert_eq!(bucket("", it), Bucket::Other);
    assert_eq!(bucket("x", it), Bucket::Other);
}

fn tiny_config(seed: u64) -> TrainConfig {
    let mut model = ModelConfig::toy(Vocab::new().len());
    model.n_layers = 1;
    model.n_heads = 2;
    model.d_model = 16;
    model.d_head = 8;
    model.d_mlp = 32;
    TrainConfig {
        model,
        steps: 4,
        batch: 2,
        warmup: 2,
        seed,
        log_every: 1,
        mixture: Mixture {
            shots: (1, 3),
            ..Mixture::k_varied()
        },
        ..TrainConfig::desk()
    }
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let bytes = |seed| -> (Vec<u8>, Vec<f32>) {
        let out = train(&tiny_config(seed), TrainHooks::default()).unwrap();
        (out.model.to_bytes().unwrap(), out.curve.iter().map(|p| p.loss).collect())
    };
    let (a, la) = bytes(1);
    let (b, lb) = bytes(1);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(la.len(), 4);
    let (c, _) = bytes(2);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trip() {
    let model = common::scaled(6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.filab");
    filab::model::save_model(&model, &path).unwrap();
    let back = filab::model::load_model(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), model.to_bytes().unwrap());
    assert!(filab::model::load_model(dir.path().join("missing.filab")).is_err());
}

fn small_bytes() -> Vec<u8> {
    let mut c = ModelConfig::toy(Vocab::new().len());
    c.n_layers = 1;
    c.n_heads = 1;
    c.d_model = 4;
    c.d_head = 4;
    c.d_mlp = 4;
    c.max_seq = 8;
    Model::init(c, 0).unwrap().to_bytes().unwrap()
}

proptest! {
    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0usize..4096) {
        let bytes = small_bytes();
        let cut = cut % bytes.len();
        prop_assert!(Model::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn corrupted_checkpoints_never_panic(at in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut bytes = small_bytes();
        let i = at.index(bytes.len());
        bytes[i] = byte;
        if let Ok(m) = Model::from_bytes(&bytes) {
            prop_assert_eq!(m.to_bytes().unwrap().len(), bytes.len());
        }
    }
}
