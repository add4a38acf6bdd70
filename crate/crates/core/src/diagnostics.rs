//! Firing rates, synaptic-operation counts and energy estimates.
//!
//! Operation accounting follows the usual SNN convention:
//!
//! * a weight layer whose input is analog (the first layer under direct
//!   encoding) performs dense multiply-accumulates (MACs), one per synapse
//!   per step;
//! * a weight layer fed by spikes performs one accumulate (AC) per synapse
//!   reached by each incoming spike. Average pooling between a spiking layer
//!   and a weight layer is linear and is folded into the weights, so a spike
//!   reaches the synapses of the pooled position it falls into;
//! * FLOPs are the dense-equivalent count: every synapse of every weight
//!   layer, once per step, regardless of sparsity.
//!
//! Energy is `E_MAC * MACs + E_AC * ACs`. Reports are normalized per sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{EncodedInput, LayerKind, Network, NetworkOutput};

/// Energy per multiply-accumulate, picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.9;

/// Published `(workload, MACs (M), ACs (M), energy (uJ))` rows for trained
/// ResNet/VGG spiking networks; the energy coefficients above reproduce them.
pub const REFERENCE_ENERGY_ROWS: [(&str, f64, f64, f64); 5] = [
    ("CIFAR10 ResNet-18 T=4", 1.77, 95.65, 94.22),
    ("CIFAR100 ResNet-18 T=4", 1.77, 96.72, 95.19),
    ("Tiny ImageNet VGGSNN T=4", 763.08, 209.56, 3698.80),
    ("CIFAR10DVS VGGSNN T=4", 428.09, 57.35, 2020.84),
    ("DVSGesture VGG-11 T=20", 1078.11, 23.71, 4980.63),
];

/// Spike rates per spiking layer, overall and per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProfile {
    /// Network layer index of each spiking layer.
    pub layers: Vec<usize>,
    /// Mean rate over (step, sample, neuron) per layer.
    pub per_layer: Vec<f64>,
    /// `per_step[l][t]`: mean rate over (sample, neuron) at step `t`.
    pub per_step: Vec<Vec<f64>>,
    /// Element count (steps x samples x neurons) behind each layer's rate.
    pub elements: Vec<f64>,
}

impl RateProfile {
    /// Mean over all spiking elements of all layers.
    pub fn overall(&self) -> f64 {
        let total: f64 = self.elements.iter().sum();
        if total == 0.0 {
            return 0.0;
        }
        self.per_layer.iter().zip(&self.elements).map(|(r, w)| r * w).sum::<f64>() / total
    }
}

/// Accumulates spike counts over batches.
#[derive(Debug, Clone, Default)]
pub struct RateAccumulator {
    layers: Vec<usize>,
    spikes: Vec<Vec<f64>>,
    elements: Vec<Vec<f64>>,
}

impl RateAccumulator {
    pub fn new(layers: Vec<usize>) -> Self {
        Self {
            layers,
            spikes: Vec::new(),
            elements: Vec::new(),
        }
    }

    /// Adds `spikes_per_layer` ([T, B, ...] each).
    pub fn add(&mut self, spikes_per_layer: &[crate::Tensor]) -> Result<()> {
        if spikes_per_layer.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "{} spike tensors for {} spiking layers",
                spikes_per_layer.len(),
                self.layers.len()
            )));
        }
        for (l, s) in spikes_per_layer.iter().enumerate() {
            let steps = s.shape()[0];
            if self.spikes.len() <= l {
                self.spikes.push(vec![0.0; steps]);
                self.elements.push(vec![0.0; steps]);
            }
            if self.spikes[l].len() != steps {
                return Err(Error::dim("firing_rates", "step count changed between batches"));
            }
            let per = s.numel() / steps.max(1);
            for t in 0..steps {
                let step = &s.data()[t * per..(t + 1) * per];
                let (mut ones, mut zeros) = (0usize, 0usize);
                for &v in step {
                    ones += usize::from(v == 1.0);
                    zeros += usize::from(v == 0.0);
                }
                if ones + zeros != per {
                    return Err(Error::Contract(format!("layer {} spikes are not 0/1", self.layers[l])));
                }
                self.spikes[l][t] += ones as f64;
                self.elements[l][t] += per as f64;
            }
        }
        Ok(())
    }

    pub fn profile(&self) -> RateProfile {
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        RateProfile {
            layers: self.layers.clone(),
            per_layer: self
                .spikes
                .iter()
                .zip(&self.elements)
                .map(|(s, e)| ratio(s.iter().sum(), e.iter().sum()))
                .collect(),
            per_step: self
                .spikes
                .iter()
                .zip(&self.elements)
                .map(|(s, e)| s.iter().zip(e).map(|(a, b)| ratio(*a, *b)).collect())
                .collect(),
            elements: self.elements.iter().map(|e| e.iter().sum()).collect(),
        }
    }
}

/// Rates of spike tensors [T, B, ...], one per layer; layers are numbered 0...
pub fn firing_rates(spikes_per_layer: &[crate::Tensor]) -> Result<RateProfile> {
    let mut acc = RateAccumulator::new((0..spikes_per_layer.len()).collect());
    acc.add(spikes_per_layer)?;
    Ok(acc.profile())
}

/// Raw operation totals (not normalized).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub samples: usize,
    pub flops: f64,
    pub macs: f64,
    pub acs: f64,
}

impl OpCounts {
    pub fn merge(&mut self, other: &OpCounts) {
        self.samples += other.samples;
        self.flops += other.flops;
        self.macs += other.macs;
        self.acs += other.acs;
    }
}

/// Where a weight layer's input comes from.
enum Source {
    Input,
    Spiking(usize),
}

/// Per-position synapse fan-out of weight layer `target`, expressed over the
/// per-sample positions of its source (following pools and flattens back).
fn fanout_map(net: &Network, target: usize) -> (Source, Vec<f64>) {
    let layer = &net.layers[target];
    let mut fan: Vec<f64> = match layer.spec.kind {
        LayerKind::Linear { out_features, .. } => vec![out_features as f64; layer.in_shape.iter().product()],
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => {
            let (c, h, w) = (layer.in_shape[0], layer.in_shape[1], layer.in_shape[2]);
            let (oh, ow) = (layer.out_shape[1], layer.out_shape[2]);
            let mut cover = vec![0.0; h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let y = (oy * stride + ky) as isize - padding as isize;
                            let x = (ox * stride + kx) as isize - padding as isize;
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                cover[y as usize * w + x as usize] += 1.0;
                            }
                        }
                    }
                }
            }
            (0..c).flat_map(|_| cover.iter().map(|v| v * out_channels as f64)).collect()
        }
        _ => unreachable!("fan-out of a weight layer"),
    };
    let mut i = target;
    while i > 0 {
        let prev = &net.layers[i - 1];
        if prev.is_spiking() {
            return (Source::Spiking(i - 1), fan);
        }
        match prev.spec.kind {
            LayerKind::Flatten => {}
            LayerKind::AvgPool { kernel } => {
                let (c, h, w) = (prev.in_shape[0], prev.in_shape[1], prev.in_shape[2]);
                let (oh, ow) = (h / kernel, w / kernel);
                let mut expanded = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh * kernel {
                        for x in 0..ow * kernel {
                            expanded[(ch * h + y) * w + x] = fan[(ch * oh + y / kernel) * ow + x / kernel];
                        }
                    }
                }
                fan = expanded;
            }
            _ => unreachable!("weight layers are always spiking or the readout"),
        }
        i -= 1;
    }
    (Source::Input, fan)
}

/// Counts FLOPs, MACs and ACs of one forward pass.
pub fn count_ops(net: &Network, output: &NetworkOutput, input: &EncodedInput) -> Result<OpCounts> {
    let steps = input.steps();
    let batch = input.batch();
    let analog_input = !input.is_binary();
    let mut counts = OpCounts {
        samples: batch,
        ..Default::default()
    };
    for (i, layer) in net.layers.iter().enumerate() {
        if !layer.spec.kind.has_weights() {
            continue;
        }
        let dense = (layer.synapses() * batch * steps) as f64;
        counts.flops += dense;
        let (source, fan) = fanout_map(net, i);
        let source_spikes = match source {
            Source::Input if analog_input => {
                counts.macs += dense;
                continue;
            }
            Source::Input => None,
            Source::Spiking(j) => {
                let slot = output.spiking_layers.iter().position(|&l| l == j).ok_or_else(|| {
                    Error::Contract(format!("no recorded spikes for layer {j}"))
                })?;
                Some(&output.spikes_per_layer[slot])
            }
        };
        let per = fan.len();
        let mut add = |data: &[f64]| -> Result<()> {
            if data.len() % per != 0 {
                return Err(Error::dim(
                    "count_ops",
                    format!("layer {i}: spike buffer of {} does not tile fan-in {per}", data.len()),
                ));
            }
            for chunk in data.chunks(per) {
                counts.acs += chunk.iter().zip(&fan).map(|(s, f)| s * f).sum::<f64>();
            }
            Ok(())
        };
        match source_spikes {
            Some(s) => {
                if s.numel() != steps * batch * per {
                    return Err(Error::dim(
                        "count_ops",
                        format!("layer {i}: spikes {:?} do not match fan-in {per}", s.shape()),
                    ));
                }
                add(s.data())?;
            }
            None => {
                for t in 0..steps {
                    add(input.frame(t)?.data())?;
                }
            }
        }
    }
    Ok(counts)
}

/// `E_MAC * MACs + E_AC * ACs` in microjoules, with counts in millions.
pub fn energy(macs_m: f64, acs_m: f64) -> f64 {
    // pJ per op * 1e6 ops * 1e-6 uJ/pJ
    E_MAC_PJ * macs_m + E_AC_PJ * acs_m
}

/// Least-squares `(pJ/MAC, pJ/AC)` through the origin for rows
/// `(macs_m, acs_m, energy_uj)`.
pub fn fit_energy_coefficients(rows: &[(f64, f64, f64)]) -> Option<(f64, f64)> {
    let (mut smm, mut sma, mut saa, mut sme, mut sae) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(m, a, e) in rows {
        smm += m * m;
        sma += m * a;
        saa += a * a;
        sme += m * e;
        sae += a * e;
    }
    let det = smm * saa - sma * sma;
    if det.abs() < 1e-12 {
        return None;
    }
    Some(((sme * saa - sae * sma) / det, (sae * smm - sme * sma) / det))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Always `"per_sample"`: counts are averaged over evaluated samples.
    pub normalization: String,
    pub samples: usize,
    pub params_m: f64,
    pub flops_m: f64,
    pub macs_m: f64,
    pub acs_m: f64,
    pub energy_uj: f64,
}

impl EnergyReport {
    pub fn from_counts(params: usize, counts: &OpCounts) -> Self {
        let n = counts.samples.max(1) as f64;
        let macs_m = counts.macs / n / 1e6;
        let acs_m = counts.acs / n / 1e6;
        Self {
            normalization: "per_sample".into(),
            samples: counts.samples,
            params_m: params as f64 / 1e6,
            flops_m: counts.flops / n / 1e6,
            macs_m,
            acs_m,
            energy_uj: energy(macs_m, acs_m),
        }
    }

    pub const CSV_HEADER: &'static str = "params_m,flops_m,macs_m,acs_m,energy_uj";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.params_m,
            self.flops_m,
            self.macs_m,
            self.acs_m,
            self.energy_uj
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{mlp, LayerSpec};
    use crate::neurons::NeuronParams;
    use crate::Tensor;

    #[test]
    fn rate_examples() {
        let zeros = Tensor::zeros(&[4, 1, 10]);
        assert_eq!(firing_rates(&[zeros.clone()]).unwrap().per_layer, vec![0.0]);
        let ones = Tensor::full(&[4, 1, 10], 1.0);
        assert_eq!(firing_rates(&[ones]).unwrap().per_layer, vec![1.0]);
        let mut one = zeros;
        one.data_mut()[13] = 1.0;
        let p = firing_rates(&[one]).unwrap();
        assert_eq!(p.per_layer, vec![0.025]);
        assert_eq!(p.per_step[0], vec![0.0, 0.1, 0.0, 0.0]);
        assert_eq!(p.overall(), 0.025);
        assert!(firing_rates(&[Tensor::full(&[1, 1, 2], 0.5)]).is_err());
    }

    #[test]
    fn energy_reproduces_reference_rows() {
        for (name, macs, acs, published) in REFERENCE_ENERGY_ROWS {
            let e = energy(macs, acs);
            assert!((e - published).abs() <= 0.05, "{name}: {e} vs {published}");
        }
        assert_eq!(energy(0.0, 0.0), 0.0);
    }

    #[test]
    fn fitted_coefficients_match_constants() {
        let rows: Vec<_> = REFERENCE_ENERGY_ROWS.iter().map(|r| (r.1, r.2, r.3)).collect();
        let (mac, ac) = fit_energy_coefficients(&rows).unwrap();
        assert!((mac - E_MAC_PJ).abs() < 0.01, "{mac}");
        assert!((ac - E_AC_PJ).abs() < 0.01, "{ac}");
    }

    fn spikes_of(net: &Network, layer: usize, steps: usize, batch: usize, on: &[usize]) -> Tensor {
        let per: usize = net.layers[layer].out_shape.iter().product();
        let mut s = Tensor::zeros(&[steps, batch, per]);
        for &k in on {
            s.data_mut()[k] = 1.0;
        }
        s
    }

    #[test]
    fn linear_counts() {
        let net = Network::new(mlp(784, &[256], 10, NeuronParams::default()), &[784], 0).unwrap();
        let input = EncodedInput::Direct {
            frame: Tensor::full(&[1, 784], 0.5),
            steps: 4,
        };
        // 100 spikes in the hidden layer at one step.
        let hidden = spikes_of(&net, 1, 4, 1, &(0..100).collect::<Vec<_>>());
        let out = NetworkOutput {
            logits_per_step: Tensor::zeros(&[4, 1, 10]),
            spikes_per_layer: vec![hidden],
            spiking_layers: vec![1],
        };
        let c = count_ops(&net, &out, &input).unwrap();
        assert_eq!(c.macs, (4 * 784 * 256) as f64);
        assert_eq!(c.acs, 100.0 * 10.0);
        assert_eq!(c.flops, (4 * (784 * 256 + 256 * 10)) as f64);

        let silent = NetworkOutput {
            spikes_per_layer: vec![Tensor::zeros(&[4, 1, 256])],
            ..out
        };
        assert_eq!(count_ops(&net, &silent, &input).unwrap().acs, 0.0);
    }

    #[test]
    fn spikes_into_a_wide_layer() {
        // Binary input straight into linear 784 -> 256: 100 spikes reach 25600 synapses.
        let specs = vec![LayerSpec::linear(784, 256, Some(NeuronParams::default())), LayerSpec::linear(256, 10, None)];
        let net = Network::new(specs, &[784], 0).unwrap();
        let mut frames = Tensor::zeros(&[1, 1, 784]);
        frames.data_mut()[..100].iter_mut().for_each(|v| *v = 1.0);
        let input = EncodedInput::Frames(frames);
        let out = NetworkOutput {
            logits_per_step: Tensor::zeros(&[1, 1, 10]),
            spikes_per_layer: vec![Tensor::zeros(&[1, 1, 256])],
            spiking_layers: vec![0],
        };
        let c = count_ops(&net, &out, &input).unwrap();
        assert_eq!(c.acs, 25600.0);
        assert_eq!(c.macs, 0.0);
    }

    #[test]
    fn report_normalizes_per_sample() {
        let r = EnergyReport::from_counts(
            2_000_000,
            &OpCounts {
                samples: 2,
                flops: 8e6,
                macs: 2e6,
                acs: 4e6,
            },
        );
        assert_eq!((r.params_m, r.flops_m, r.macs_m, r.acs_m), (2.0, 4.0, 1.0, 2.0));
        assert!((r.energy_uj - (4.6 + 1.8)).abs() < 1e-12);
        assert!(r.to_csv().starts_with(EnergyReport::CSV_HEADER));
    }
}
