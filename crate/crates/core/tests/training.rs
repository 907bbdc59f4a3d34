use logtrans::corpus::{generate_dataset, DatasetProfile, Preset};
use logtrans::field_forge::{AnnotatedRecord, ANNOTATION_ALPHABET};
use logtrans::neural::{
    build_vocab, masked_softmax, train, Arch, CellKind, Checkpoint, Decoding, Layout, ModelConfig, OptimizerConfig,
    Weights,
};
use ndarray::{Array1, ArrayView1};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(count: usize, seed: u64) -> Vec<AnnotatedRecord> {
    generate_dataset(&DatasetProfile::preset(Preset::Te, seed).with_count(count)).unwrap()
}

fn small(arch: Arch) -> ModelConfig {
    ModelConfig { arch, cells: 16, embedding_dim: 8, dropout: 0.1, ..Default::default() }
}

fn opt(epochs: usize) -> OptimizerConfig {
    OptimizerConfig { max_epochs: epochs, batch_size: 16, ..Default::default() }
}

/// Randomly initialized checkpoint over `records`' vocabularies.
fn untrained(cfg: ModelConfig, records: &[AnnotatedRecord], seed: u64) -> Checkpoint {
    let (source_vocab, target_vocab) = build_vocab(records).unwrap();
    let layout = Layout::new(&cfg, source_vocab.len(), target_vocab.len());
    let weights = Weights::uniform(layout, cfg.init_scale, &mut ChaCha8Rng::seed_from_u64(seed));
    Checkpoint { config: cfg, source_vocab, target_vocab, weights, best_val_loss: f64::INFINITY, epoch: 0 }
}

#[test]
fn training_is_deterministic() {
    let records = corpus(40, 1);
    for arch in [Arch::Mc, Arch::Ml, Arch::Ms] {
        let a = train(&small(arch), &opt(2), &records, 9, |_| {}).unwrap();
        let b = train(&small(arch), &opt(2), &records, 9, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json());
        let c = train(&small(arch), &opt(2), &records, 10, |_| {}).unwrap();
        assert_ne!(a.checkpoint.to_json(), c.checkpoint.to_json());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let records = corpus(30, 2);
    let ckpt = train(&small(Arch::Ms), &opt(1), &records, 3, |_| {}).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let (t1, t2) = (ckpt.translator(), back.translator());
    for r in &records[..5] {
        assert_eq!(t1.translate(&r.raw, Decoding::Greedy), t2.translate(&r.raw, Decoding::Greedy));
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let records = corpus(12, 2);
    let json = untrained(small(Arch::Mc), &records, 1).to_json();
    assert!(Checkpoint::from_json(&json.replace("\"version\":1", "\"version\":99")).is_err());
    assert!(Checkpoint::from_json(&json.replace("\"out.b\"", "\"out.x\"")).is_err());
    assert!(Checkpoint::from_json("{}").is_err());
}

#[test]
fn beam_of_one_is_greedy() {
    let records = corpus(100, 4);
    for arch in [Arch::Mc, Arch::Ml, Arch::Ms] {
        let ckpt = untrained(small(arch), &records, 5);
        let t = ckpt.translator();
        for r in &records {
            assert_eq!(t.beam(&r.raw, 1), t.greedy(&r.raw));
        }
    }
}

#[test]
fn outputs_respect_the_length_cap() {
    let records = corpus(20, 6);
    for arch in [Arch::Mc, Arch::Ml, Arch::Ms] {
        let ckpt = untrained(small(arch), &records, 7);
        let t = ckpt.translator();
        assert!(t.translate("", Decoding::Greedy).chars().count() <= 8);
        assert!(t.translate("", Decoding::Beam(3)).chars().count() <= 8);
        for r in &records {
            let cap = r.raw.chars().count() + 8;
            assert!(t.translate(&r.raw, Decoding::Greedy).chars().count() <= cap);
            assert!(t.translate(&r.raw, Decoding::Beam(3)).chars().count() <= cap);
        }
        assert!(t.translate("\u{2603}\u{1F600} never seen", Decoding::Greedy).chars().count() <= 24);
    }
}

#[test]
fn next_symbol_distributions_sum_to_one() {
    let records = corpus(20, 8);
    for arch in [Arch::Mc, Arch::Ml, Arch::Ms] {
        let ckpt = untrained(small(arch), &records, 9);
        let t = ckpt.translator();
        for r in &records[..5] {
            let prefix = ckpt.target_vocab.encode(&r.ann).unwrap();
            for k in [0, 3, 10].into_iter().filter(|&k| k <= prefix.len()) {
                let p = t.next_distribution(&r.raw, &prefix[..k]);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn greedy_log_prob_is_the_sequence_log_prob() {
    let records = corpus(10, 10);
    let ckpt = untrained(small(Arch::Ml), &records, 11);
    let t = ckpt.translator();
    for r in &records {
        let g = t.greedy(&r.raw);
        if g.finished {
            assert!((t.sequence_log_prob(&r.raw, &g.tokens) - g.log_prob).abs() < 1e-9);
        }
    }
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let records = corpus(32, 12);
    let cfg = ModelConfig { cells: 32, dropout: 0.0, ..Default::default() };
    let opt = OptimizerConfig { max_epochs: 5, batch_size: 8, validation_fraction: 0.0, ..Default::default() };
    let mut monotone = 0;
    for seed in 0..5 {
        let out = train(&cfg, &opt, &records, seed, |_| {}).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|e| e.val_loss).collect();
        assert_eq!(losses.len(), 5);
        if losses.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 4, "{monotone} of 5 runs decreased monotonically");
}

#[test]
fn plateau_stops_early() {
    let records = corpus(20, 13);
    let opt = OptimizerConfig { learning_rate: 1e-12, max_epochs: 30, patience: 3, batch_size: 32, ..Default::default() };
    let out = train(&small(Arch::Mc), &opt, &records, 1, |_| {}).unwrap();
    assert!(out.stopped_early);
    assert!(out.history.len() < 30);
}

#[test]
fn tiny_corpora_are_refused() {
    let records = corpus(5, 14);
    assert!(train(&small(Arch::Mc), &opt(1), &records, 1, |_| {}).is_err());
    assert!(train(&small(Arch::Mc), &opt(1), &[], 1, |_| {}).is_err());
}

#[test]
fn gru_and_deep_stacks_train() {
    let records = corpus(24, 16);
    for arch in [Arch::Mc, Arch::Ml, Arch::Ms] {
        let cfg = ModelConfig { cell: CellKind::Gru, layers: 2, ..small(arch) };
        let out = train(&cfg, &opt(2), &records, 1, |_| {}).unwrap();
        assert!(out.history.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));
        let pred = out.checkpoint.translator().translate(&records[0].raw, Decoding::Beam(2));
        assert!(pred.chars().all(|c| ANNOTATION_ALPHABET.contains(&c)));
    }
}

proptest! {
    #[test]
    fn attention_weights_sum_to_one(
        scores in prop::collection::vec(-30f64..30.0, 1..40),
        keep in prop::collection::vec(any::<bool>(), 40),
    ) {
        let n = scores.len();
        let mut mask: Vec<f64> = keep[..n].iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        mask[0] = 1.0;
        let mut out = Array1::zeros(n);
        masked_softmax(ArrayView1::from(&scores), ArrayView1::from(&mask), out.view_mut());
        prop_assert!((out.sum() - 1.0).abs() < 1e-6);
        for (w, m) in out.iter().zip(&mask) {
            prop_assert!(*w >= 0.0);
            if *m == 0.0 {
                prop_assert_eq!(*w, 0.0);
            }
        }
    }

    #[test]
    fn vocab_round_trips_training_lines(seed in any::<u64>()) {
        let records = generate_dataset(&DatasetProfile::preset(Preset::Th, seed).with_count(20)).unwrap();
        let (src, tgt) = build_vocab(&records).unwrap();
        for r in &records {
            prop_assert_eq!(src.decode(&src.encode(&r.raw).unwrap()), r.raw.clone());
            prop_assert_eq!(tgt.decode(&tgt.encode(&r.ann).unwrap()), r.ann.clone());
        }
    }
}

#[test]
fn beam_finds_sequences_at_least_as_likely_as_greedy() {
    let records = corpus(60, 17);
    let ckpt = train(&small(Arch::Ms), &opt(3), &records, 2, |_| {}).unwrap().checkpoint;
    let t = ckpt.translator();
    for r in &records[..20] {
        let greedy = t.greedy(&r.raw);
        let best = t.beam_all(&r.raw, 4).iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        assert!(best >= greedy.log_prob - 1e-9, "{best} < {}", greedy.log_prob);
    }
}
