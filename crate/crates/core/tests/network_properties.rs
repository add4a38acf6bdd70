use arlif::network::{conv_small, mlp, EncodedInput, Network, ParamKind};
use arlif::neurons::{NeuronParams, ResetMode};
use arlif::training::{tet_loss_on, LossConfig};
use arlif::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_frames(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn permute_axis(t: &Tensor, axis_len: usize, outer: usize, perm: &[usize]) -> Vec<f64> {
    let inner = t.numel() / (outer * axis_len);
    let mut out = Vec::with_capacity(t.numel());
    for o in 0..outer {
        for &p in perm {
            let start = (o * axis_len + p) * inner;
            out.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    out
}

#[test]
fn repeated_forward_calls_start_from_fresh_state() {
    for mode in [ResetMode::Hard, ResetMode::Soft, ResetMode::Adaptive] {
        let net = Network::new(mlp(12, &[9, 7], 3, NeuronParams::with_mode(mode)), &[12], 4).unwrap();
        let input = EncodedInput::Frames(random_frames(1, &[5, 4, 12]).map(|v| v * 3.0));
        let first = net.forward(&input).unwrap();
        let second = net.forward(&input).unwrap();
        assert_eq!(first, second, "{mode:?}");
    }
}

#[test]
fn permuting_the_batch_permutes_the_outputs() {
    let perm = [3, 0, 4, 1, 2];
    let net = Network::new(conv_small(10, NeuronParams::default()), &[1, 28, 28], 9).unwrap();
    let frame = random_frames(2, &[5, 1, 28, 28]).map(|v| v * 2.0);
    let shuffled = Tensor::new(frame.shape().to_vec(), permute_axis(&frame, 5, 1, &perm)).unwrap();
    let a = net.forward(&EncodedInput::Direct { frame, steps: 3 }).unwrap();
    let b = net
        .forward(&EncodedInput::Direct {
            frame: shuffled,
            steps: 3,
        })
        .unwrap();
    assert_eq!(permute_axis(&a.logits_per_step, 5, 3, &perm), b.logits_per_step.data());
    for (sa, sb) in a.spikes_per_layer.iter().zip(&b.spikes_per_layer) {
        assert!(sa.is_binary() && sb.is_binary());
        assert_eq!(permute_axis(sa, 5, 3, &perm), sb.data());
    }
}

#[test]
fn logits_reach_every_weight_and_neuron_scalar() {
    let net = Network::new(mlp(16, &[24, 12], 4, NeuronParams::default()), &[16], 3).unwrap();
    let mut net = net;
    let input = EncodedInput::Direct {
        frame: random_frames(3, &[8, 16]).map(|v| v * 4.0 - 1.0),
        steps: 4,
    };
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let vars = net.forward_on(&mut tape, &bound, &input).unwrap();
    let labels = [0, 1, 2, 3, 0, 1, 2, 3];
    let loss = tet_loss_on(&mut tape, vars.logits, vars.steps, &labels, &LossConfig::default()).unwrap();
    tape.backward(loss).unwrap();
    net.zero_grad();
    net.collect_grads(&tape, &bound).unwrap();
    let mut seen = Vec::new();
    for p in net.params_mut() {
        let name = p.name();
        let grad = p.tensor.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.iter().any(|g| *g != 0.0), "{name} gradient is zero");
        seen.push(p.kind);
    }
    for kind in [ParamKind::Weight, ParamKind::Bias, ParamKind::Alpha, ParamKind::Beta] {
        assert!(seen.contains(&kind), "{kind:?} missing");
    }
}

#[test]
fn mlp_shapes_and_spike_values() {
    let net = Network::new(mlp(784, &[256], 10, NeuronParams::default()), &[1, 28, 28], 0).unwrap();
    let out = net
        .forward(&EncodedInput::Direct {
            frame: random_frames(4, &[3, 1, 28, 28]),
            steps: 4,
        })
        .unwrap();
    assert_eq!(out.logits_per_step.shape(), &[4, 3, 10]);
    assert_eq!(out.spikes_per_layer[0].shape(), &[4, 3, 256]);
    assert!(out.spikes_per_layer[0].is_binary());
}
