mod common;

use common::checks::{self, random_dataset, small_config};
use flowsynth::model::{count_params, tanh_std};
use flowsynth::train::{checkpoint, loss_and_grads, Batch};
use flowsynth::{Architecture, Model, ModelConfig, Rng, Tensor};

#[test]
fn fresh_models_predict_uniformly() {
    let summary = checks::eps_init().unwrap();
    println!("{summary}");
}

#[test]
fn every_architecture_is_causal() {
    println!("{}", checks::causality().unwrap());
}

#[test]
fn two_layer_wavenet_sees_four_positions() {
    let mut c = small_config(Architecture::WaveNet, 10, 4);
    c.conv_layers = 2;
    assert_eq!(c.dilations(), [1, 2]);
    assert_eq!(c.receptive_field(), 4);
    let m = Model::init(c, &mut Rng::new(1)).unwrap();
    // Convolutions do not look at the configured context, so a longer
    // input shows the edge of the receptive field.
    let ids: Vec<usize> = vec![9, 1, 2, 3, 4, 5, 6, 7];
    let base = m.logits(&ids, 1).unwrap();
    let at4 = |t: &Tensor| t.data()[4 * 10..5 * 10].to_vec();
    let mut far = ids.clone();
    far[0] = 0;
    assert_eq!(at4(&m.logits(&far, 1).unwrap()), at4(&base));
    let mut near = ids.clone();
    near[1] = 0;
    assert_ne!(at4(&m.logits(&near, 1).unwrap()), at4(&base));
}

fn rnn(vocab: usize, d: usize, h: usize) -> Model {
    let mut c = ModelConfig::new(Architecture::Rnn, vocab, 3);
    c.embed_dim = d;
    c.hidden_dim = h;
    Model::init(c, &mut Rng::new(11)).unwrap()
}

fn set(m: &mut Model, name: &str, data: &[f32]) {
    let t = m.params.get_mut(name).unwrap();
    t.data_mut().copy_from_slice(data);
}

#[test]
fn rnn_matches_hand_recurrence() {
    let (v, d, h) = (4, 3, 2);
    let m = rnn(v, d, h);
    let ids = [3usize, 0, 2];
    let p = |n: &str| m.params.get(n).unwrap().data().iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let (embed, w_x, w_h, b, w_o, b_o) = (p("embed"), p("rnn.w_x"), p("rnn.w_h"), p("rnn.b"), p("out.weight"), p("out.bias"));
    let mut state = [0.0f64; 2];
    let logits = m.logits(&ids, 1).unwrap();
    for (t, &id) in ids.iter().enumerate() {
        let mut next = [0.0f64; 2];
        for j in 0..h {
            let mut pre = b[j];
            for i in 0..d {
                pre += embed[id * d + i] * w_x[i * h + j];
            }
            for i in 0..h {
                pre += state[i] * w_h[i * h + j];
            }
            next[j] = pre.tanh();
        }
        state = next;
        for k in 0..v {
            let expect = b_o[k] + (0..h).map(|j| state[j] * w_o[j * v + k]).sum::<f64>();
            let got = logits.data()[t * v + k] as f64;
            assert!((got - expect).abs() < 1e-6, "t={t} k={k}: {got} vs {expect}");
        }
    }
}

#[test]
fn rnn_without_recurrence_is_memoryless() {
    let mut m = rnn(6, 4, 5);
    set(&mut m, "rnn.w_h", &[0.0; 25]);
    let a = m.logits(&[5, 1, 2, 3], 1).unwrap();
    let b = m.logits(&[5, 4, 0, 3], 1).unwrap();
    // Position 3 sees the same token in both rows.
    assert_eq!(a.data()[18..24], b.data()[18..24]);
    assert_ne!(a.data()[6..12], b.data()[6..12]);
}

#[test]
fn rnn_zero_weights_give_tanh_of_bias() {
    let mut m = rnn(3, 2, 2);
    set(&mut m, "rnn.w_x", &[0.0; 4]);
    set(&mut m, "rnn.w_h", &[0.0; 4]);
    set(&mut m, "rnn.b", &[0.3, -1.2]);
    // The output layer copies the state into the first two logits.
    set(&mut m, "out.weight", &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    set(&mut m, "out.bias", &[0.0; 3]);
    let l = m.logits(&[2, 0, 1], 1).unwrap();
    for t in 0..3 {
        assert!((l.data()[t * 3] - 0.3f32.tanh()).abs() < 1e-7);
        assert!((l.data()[t * 3 + 1] - (-1.2f32).tanh()).abs() < 1e-7);
    }
}

#[test]
fn transformer_single_token_depends_on_start_only() {
    let m = Model::init(small_config(Architecture::Transformer, 7, 4), &mut Rng::new(2)).unwrap();
    let one = m.logits(&[6], 1).unwrap();
    let long = m.logits(&[6, 1, 2, 3], 1).unwrap();
    assert_eq!(one.data(), &long.data()[..7]);
}

#[test]
fn tanh_gain_sets_preactivation_scale() {
    let fan_in = 256;
    let std = tanh_std(fan_in);
    let mut sum_sq = 0.0;
    let mut count = 0.0;
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let w: Vec<f64> = (0..fan_in * 64).map(|_| rng.normal() * std).collect();
        for _ in 0..20 {
            let x: Vec<f64> = (0..fan_in).map(|_| rng.normal()).collect();
            for j in 0..64 {
                let pre: f64 = (0..fan_in).map(|i| x[i] * w[i * 64 + j]).sum();
                sum_sq += pre * pre;
                count += 1.0;
            }
        }
    }
    let measured = (sum_sq / count).sqrt();
    let gain = 5.0 / 3.0;
    assert!((0.8 * gain..=1.2 * gain).contains(&measured), "{measured}");
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = Rng::new(4);
    let ds = random_dataset(16, 8, 12, &mut rng);
    let batch = Batch::from_indices(&ds, &(0..16).collect::<Vec<_>>());
    for arch in Architecture::ALL {
        let m = Model::init(small_config(arch, 12, 7), &mut Rng::new(5)).unwrap();
        let step = loss_and_grads(&m, &batch).unwrap();
        let trainable = m.params.iter().filter(|(n, _)| flowsynth::ModelParams::is_trainable(n)).count();
        assert_eq!(step.grads.len(), trainable, "{arch}");
        for (name, g) in &step.grads {
            let norm: f64 = g.iter().map(|&x| (x as f64).powi(2)).sum();
            assert!(norm > 0.0, "{arch}: {name} has a zero gradient");
        }
    }
}

#[test]
fn parameter_count_matches_checkpoint_tensors() {
    for arch in Architecture::ALL {
        let m = Model::init(ModelConfig::new(arch, 50, 9), &mut Rng::new(1)).unwrap();
        let numel: usize = m.params.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(count_params(&m.config), numel);
        let bytes = checkpoint::to_bytes(&m).unwrap();
        let names: usize = m.params.iter().map(|(n, t)| 2 + n.len() + 1 + 4 * t.rank()).sum();
        assert_eq!(bytes.len(), 16 + names + 4 * numel + 4);
        println!("{arch}: {numel} parameters");
    }
}
