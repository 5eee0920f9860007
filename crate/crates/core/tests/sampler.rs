mod common;

use common::checks::{random_flows, small_config};
use flowsynth::codec::{fit_codebook, FeatureSpec};
use flowsynth::sample::{generate_flows, sample_ids};
use flowsynth::train::train;
use flowsynth::{Architecture, BinningMode, Model, ModelConfig, Rng, SymbolDataset, TrainConfig};

#[test]
fn untrained_flat_model_samples_uniformly() {
    let mut c = ModelConfig::new(Architecture::Rnn, 50, 2);
    c.eps_init = 0.0;
    let m = Model::init(c, &mut Rng::new(1)).unwrap();
    let n = 50_000;
    let ds = sample_ids(&m, 3, n, 1.0, 42).unwrap();
    let mut counts = [0usize; 49];
    for s in ds.iter() {
        assert_eq!(s[0], 49);
        for &x in &s[1..] {
            counts[x] += 1;
        }
    }
    let draws = (2 * n) as f64;
    let p = 1.0 / 49.0;
    let sigma = (draws * p * (1.0 - p)).sqrt();
    for (sym, &c) in counts.iter().enumerate() {
        assert!((c as f64 - draws * p).abs() <= 3.0 * sigma, "symbol {sym}: {c} of {draws}");
    }
}

#[test]
fn memorized_sequence_is_reproduced() {
    let seq = [11usize, 3, 7, 7, 0, 9, 2];
    let ids: Vec<usize> = seq.iter().copied().cycle().take(seq.len() * 40).collect();
    let ds = SymbolDataset::new(ids, seq.len(), 12).unwrap();
    let mut m = Model::init(small_config(Architecture::Rnn, 12, 6), &mut Rng::new(2)).unwrap();
    let cfg = TrainConfig {
        max_steps: 1500,
        batch_size: 16,
        learning_rate: Some(1e-2),
        ..TrainConfig::default()
    };
    train(&mut m, &ds, &cfg).unwrap();
    let out = sample_ids(&m, seq.len(), 2000, 1.0, 3).unwrap();
    let hits = out.iter().filter(|s| *s == seq).count();
    assert!(hits as f64 > 0.99 * 2000.0, "{hits}");
}

#[test]
fn decoded_samples_stay_inside_the_bins() {
    let table = random_flows(2000, &mut Rng::new(4));
    let cb = fit_codebook(&table, &["bytes", "duration", "proto"], 49, BinningMode::EqualFrequency).unwrap();
    let m = Model::init(
        small_config(Architecture::Transformer, cb.vocab_size(), cb.sequence_length() - 1),
        &mut Rng::new(5),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.csv");
    let flows = generate_flows(&m, &cb, 700, 1.0, 6, Some(&path)).unwrap();
    assert_eq!(flows.n_rows(), 700);
    for (i, spec) in cb.specs().iter().enumerate() {
        if let FeatureSpec::NumericBins { edges } = spec {
            let col = flows.numeric_column(&cb.features()[i]).unwrap();
            assert!(col.iter().all(|v| (edges[0]..=edges[edges.len() - 1]).contains(v)));
        }
    }
    let again = generate_flows(&m, &cb, 700, 1.0, 6, None).unwrap();
    assert_eq!(again.numeric_data(), flows.numeric_data());

    let empty = dir.path().join("empty.csv");
    generate_flows(&m, &cb, 0, 1.0, 6, Some(&empty)).unwrap();
    let text = std::fs::read_to_string(&empty).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    assert!(text.starts_with("bytes,duration,proto"));
}
