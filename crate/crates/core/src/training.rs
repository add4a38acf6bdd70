//! Loss, optimizers and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{poisson_frames, Dataset, EventDataset};
use crate::diagnostics::{count_ops, EnergyReport, OpCounts, RateAccumulator, RateProfile};
use crate::error::{Error, Result};
use crate::network::{EncodedInput, Network, NetworkOutput, ParamKind, ParamMut};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    /// Every logit is pulled towards `phi`.
    #[default]
    Constant,
    /// Logits are pulled towards the one-hot label.
    OneHot,
}

/// `lambda * CE + (1 - lambda) * MSE`, both averaged over steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub phi_mode: PhiMode,
    pub phi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            phi_mode: PhiMode::Constant,
            phi: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter {
                name: "lambda",
                value: self.lambda,
                expected: "0 <= lambda <= 1",
            });
        }
        if !self.phi.is_finite() {
            return Err(Error::Parameter {
                name: "phi",
                value: self.phi,
                expected: "finite",
            });
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(l) => Err(Error::Data(format!("label {l} out of range for {classes} classes"))),
        None => Ok(()),
    }
}

/// Loss over logits `[T * B, C]` (step-major) recorded on `tape`.
pub fn tet_loss_on(tape: &mut Tape, logits: Var, steps: usize, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::Contract("loss needs at least one timestep".into()));
    }
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != steps * labels.len() {
        return Err(Error::dim(
            "tet_loss",
            format!("logits {shape:?} for {steps} steps of {} labels", labels.len()),
        ));
    }
    let (batch, classes) = (labels.len(), shape[1]);
    check_labels(labels, classes)?;
    let flat = logits;
    let repeated: Vec<usize> = (0..steps).flat_map(|_| labels.iter().copied()).collect();
    // Mean CE over all (t, b) rows equals the step average of per-step means.
    let ce = tape.cross_entropy(flat, &repeated)?;
    if cfg.lambda == 1.0 {
        return Ok(ce);
    }
    let target = match cfg.phi_mode {
        PhiMode::Constant => Tensor::full(&[steps * batch, classes], cfg.phi),
        PhiMode::OneHot => {
            let mut t = Tensor::zeros(&[steps * batch, classes]);
            for (row, &l) in repeated.iter().enumerate() {
                t.data_mut()[row * classes + l] = 1.0;
            }
            t
        }
    };
    let mse = tape.mse(flat, &target)?;
    if cfg.lambda == 0.0 {
        return Ok(mse);
    }
    let a = tape.scale(ce, cfg.lambda);
    let b = tape.scale(mse, 1.0 - cfg.lambda);
    tape.add(a, b)
}

/// Loss value for logits `[T, B, C]`.
pub fn tet_loss(logits: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    if logits.shape().len() != 3 {
        return Err(Error::dim("tet_loss", format!("logits must be [T, B, C], got {:?}", logits.shape())));
    }
    let s = logits.shape();
    let flat = logits.clone().reshape(&[s[0] * s[1], s[2]])?;
    let mut tape = Tape::new();
    let v = tape.constant(flat);
    let loss = tet_loss_on(&mut tape, v, s[0], labels, cfg)?;
    tape.value(loss).item()
}

/// Predicted class per sample: argmax of the time-averaged logits.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (steps, batch, classes) = (s[0], s[1], s[2]);
    (0..batch)
        .map(|b| {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..classes {
                let v: f64 = (0..steps).map(|t| logits.data()[(t * batch + b) * classes + c]).sum();
                if v > best.1 {
                    best = (c, v);
                }
            }
            best.0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum.
    pub momentum: f64,
    /// Adam moment decays.
    pub betas: (f64, f64),
    pub eps: f64,
    /// L2 penalty on weights and biases (not on alpha/beta).
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate: 0.1,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 5e-4,
            epochs: 10,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&'static str, f64, bool, &'static str); 6] = [
            ("learning_rate", self.learning_rate, self.learning_rate > 0.0 && self.learning_rate.is_finite(), "> 0"),
            ("momentum", self.momentum, (0.0..1.0).contains(&self.momentum), "0 <= momentum < 1"),
            ("betas.0", self.betas.0, (0.0..1.0).contains(&self.betas.0), "0 <= beta1 < 1"),
            ("betas.1", self.betas.1, (0.0..1.0).contains(&self.betas.1), "0 <= beta2 < 1"),
            ("eps", self.eps, self.eps > 0.0, "> 0"),
            ("weight_decay", self.weight_decay, self.weight_decay >= 0.0, ">= 0"),
        ];
        for (name, value, ok, expected) in checks {
            if !ok {
                return Err(Error::Parameter { name, value, expected });
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter {
                name: "batch_size",
                value: 0.0,
                expected: ">= 1",
            });
        }
        Ok(())
    }
}

/// Stateful SGD-with-momentum / Adam over a fixed parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    /// Applies one update from the gradients stored on `params`, then clamps
    /// alpha to [0, 1] and beta to [-1, 1]. Nothing is modified if any
    /// gradient is non-finite. The order of `params` must be stable.
    pub fn step(&mut self, params: Vec<ParamMut<'_>>) -> Result<()> {
        for p in &params {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name())));
                }
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            if self.cfg.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract("parameter list changed between steps".into()));
        }
        self.steps += 1;
        let c = self.cfg;
        for (i, p) in params.into_iter().enumerate() {
            let decay = match p.kind {
                ParamKind::Weight | ParamKind::Bias => c.weight_decay,
                ParamKind::Alpha | ParamKind::Beta => 0.0,
            };
            let grad: Vec<f64> = p.tensor.grad().map_or_else(|| vec![0.0; p.tensor.numel()], <[f64]>::to_vec);
            let m = &mut self.first[i];
            let w = p.tensor.data_mut();
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    for k in 0..w.len() {
                        let g = grad[k] + decay * w[k];
                        m[k] = if self.steps == 1 { g } else { c.momentum * m[k] + g };
                        w[k] -= c.learning_rate * m[k];
                    }
                }
                OptimizerKind::Adam => {
                    let v = &mut self.second[i];
                    let bc1 = 1.0 - c.betas.0.powi(self.steps);
                    let bc2 = 1.0 - c.betas.1.powi(self.steps);
                    for k in 0..w.len() {
                        let g = grad[k] + decay * w[k];
                        m[k] = c.betas.0 * m[k] + (1.0 - c.betas.0) * g;
                        v[k] = c.betas.1 * v[k] + (1.0 - c.betas.1) * g * g;
                        w[k] -= c.learning_rate * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                    }
                }
            }
            let range = match p.kind {
                ParamKind::Alpha => Some((0.0, 1.0)),
                ParamKind::Beta => Some((-1.0, 1.0)),
                _ => None,
            };
            if let Some((lo, hi)) = range {
                w.iter_mut().for_each(|x| *x = x.clamp(lo, hi));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Static images as constant input current.
    #[default]
    Direct,
    /// Bernoulli spikes with pixel intensities as rates.
    Poisson,
}

/// Everything that shapes a run besides the network and the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub encoding: Encoding,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Batch size for evaluation; defaults to the training batch size.
    pub eval_batch_size: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Parameter {
                name: "timesteps",
                value: 0.0,
                expected: ">= 1",
            });
        }
        if self.eval_batch_size == Some(0) {
            return Err(Error::Parameter {
                name: "eval_batch_size",
                value: 0.0,
                expected: ">= 1",
            });
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

/// A labelled split, either static images or pre-encoded spike frames.
#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Static(Dataset),
    Events(EventDataset),
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[usize] {
        match self {
            Samples::Static(d) => &d.labels,
            Samples::Events(d) => &d.labels,
        }
    }

    pub fn class_count(&self) -> usize {
        match self {
            Samples::Static(d) => d.class_count,
            Samples::Events(d) => d.class_count,
        }
    }

    pub fn sample_shape(&self) -> &[usize] {
        match self {
            Samples::Static(d) => d.sample_shape(),
            Samples::Events(d) => d.sample_shape(),
        }
    }

    /// Network input for the samples at `indices`.
    pub fn batch(&self, indices: &[usize], steps: usize, encoding: Encoding, rng: &mut ChaCha8Rng) -> Result<EncodedInput> {
        match self {
            Samples::Static(d) => {
                let frame = d.images.select_axis0(indices)?;
                Ok(match encoding {
                    Encoding::Direct => EncodedInput::Direct { frame, steps },
                    Encoding::Poisson => EncodedInput::Frames(poisson_frames(&frame, steps, rng)?),
                })
            }
            Samples::Events(d) => {
                if d.steps() != steps {
                    return Err(Error::Config(format!(
                        "event data has {} steps but the run uses {steps}",
                        d.steps()
                    )));
                }
                let frames = (0..steps)
                    .map(|t| d.frames.index_axis0(t)?.select_axis0(indices))
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncodedInput::Frames(Tensor::stack(&frames)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub layer: usize,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the evaluation before any update.
    pub epoch: usize,
    pub train: Option<SplitMetrics>,
    pub train_rates: Option<RateProfile>,
    pub test: SplitMetrics,
    pub test_rates: RateProfile,
    /// Operation totals of the test evaluation.
    pub test_ops: OpCounts,
    pub params: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub train_samples: usize,
    pub test_samples: usize,
    pub param_count: usize,
    pub spiking_layers: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_epoch().map(|e| e.test.accuracy)
    }

    /// Energy estimate of the last test evaluation.
    pub fn energy(&self) -> Option<EnergyReport> {
        self.final_epoch().map(|e| EnergyReport::from_counts(self.param_count, &e.test_ops))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Contract(format!("serializing run log: {e}")))
    }

    /// `epoch,split,loss,acc,alpha_<l>,beta_<l>,rate_<l>...`, one row per split.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,acc");
        for l in &self.spiking_layers {
            out.push_str(&format!(",alpha_{l},beta_{l},rate_{l}"));
        }
        out.push('\n');
        for e in &self.epochs {
            let rows = [
                ("train", e.train, e.train_rates.as_ref()),
                ("test", Some(e.test), Some(&e.test_rates)),
            ];
            for (split, metrics, rates) in rows {
                let (Some(m), Some(r)) = (metrics, rates) else { continue };
                out.push_str(&format!("{},{split},{},{}", e.epoch, m.loss, m.accuracy));
                for (i, p) in e.params.iter().enumerate() {
                    out.push_str(&format!(",{},{},{}", p.alpha, p.beta, r.per_layer.get(i).copied().unwrap_or(0.0)));
                }
                out.push('\n');
            }
        }
        out
    }

    /// `epoch,layer,alpha,beta`.
    pub fn params_csv(&self) -> String {
        let mut out = String::from("epoch,layer,alpha,beta\n");
        for e in &self.epochs {
            for p in &e.params {
                out.push_str(&format!("{},{},{},{}\n", e.epoch, p.layer, p.alpha, p.beta));
            }
        }
        out
    }

    /// Test-set rates, `epoch,layer,step,rate`.
    pub fn rates_csv(&self) -> String {
        let mut out = String::from("epoch,layer,step,rate\n");
        for e in &self.epochs {
            for (l, steps) in e.test_rates.layers.iter().zip(&e.test_rates.per_step) {
                for (t, r) in steps.iter().enumerate() {
                    out.push_str(&format!("{},{l},{t},{r}\n", e.epoch));
                }
            }
        }
        out
    }
}

/// Passed to the observer after every optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepEvent {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

/// Result of evaluating a network on a split.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: SplitMetrics,
    pub rates: RateProfile,
    pub ops: OpCounts,
}

fn correct(output: &NetworkOutput, labels: &[usize]) -> usize {
    predict(&output.logits_per_step).iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn eval_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1)
}

/// Loss, accuracy, firing rates and op counts over `samples`.
/// Poisson encoding draws from a stream fixed by `seed`, so repeated
/// evaluations see identical spikes.
pub fn evaluate(net: &Network, samples: &Samples, cfg: &TrainConfig, seed: u64) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let batch_size = cfg.eval_batch_size.unwrap_or(cfg.optimizer.batch_size);
    let mut rng = eval_rng(seed);
    let mut rates = RateAccumulator::new(net.spiking_layers());
    let mut ops = OpCounts::default();
    let (mut loss_sum, mut hits) = (0.0, 0usize);
    let order: Vec<usize> = (0..samples.len()).collect();
    for chunk in order.chunks(batch_size) {
        let input = samples.batch(chunk, cfg.timesteps, cfg.encoding, &mut rng)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| samples.labels()[i]).collect();
        let output = net.forward(&input)?;
        loss_sum += tet_loss(&output.logits_per_step, &labels, &cfg.loss)? * chunk.len() as f64;
        hits += correct(&output, &labels);
        rates.add(&output.spikes_per_layer)?;
        ops.merge(&count_ops(net, &output, &input)?);
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        metrics: SplitMetrics {
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
        },
        rates: rates.profile(),
        ops,
    })
}

fn snapshot(net: &Network) -> Vec<LayerParams> {
    net.track_params()
        .into_iter()
        .map(|(layer, alpha, beta)| LayerParams { layer, alpha, beta })
        .collect()
}

/// Trains `net` for `cfg.optimizer.epochs` epochs.
pub fn train(net: &mut Network, train_set: &Samples, test_set: &Samples, cfg: &TrainConfig) -> Result<RunLog> {
    train_with(net, train_set, test_set, cfg, |_, _| {})
}

/// As [`train`], calling `observer` after every optimizer step.
pub fn train_with(
    net: &mut Network,
    train_set: &Samples,
    test_set: &Samples,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepEvent, &Network),
) -> Result<RunLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    for (name, split) in [("training", train_set), ("test", test_set)] {
        if split.sample_shape() != net.input_shape.as_slice() {
            return Err(Error::dim(
                "train",
                format!(
                    "{name} samples {:?} do not match network input {:?}",
                    split.sample_shape(),
                    net.input_shape
                ),
            ));
        }
        if split.class_count() > net.classes() {
            return Err(Error::Data(format!(
                "{name} split has {} classes but the network outputs {}",
                split.class_count(),
                net.classes()
            )));
        }
    }
    let oc = cfg.optimizer;
    let mut optimizer = Optimizer::new(oc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(oc.seed);

    let initial = evaluate(net, test_set, cfg, oc.seed)?;
    let mut log = RunLog {
        config: *cfg,
        train_samples: train_set.len(),
        test_samples: test_set.len(),
        param_count: net.param_count(),
        spiking_layers: net.spiking_layers(),
        epochs: vec![EpochRecord {
            epoch: 0,
            train: None,
            train_rates: None,
            test: initial.metrics,
            test_rates: initial.rates,
            test_ops: initial.ops,
            params: snapshot(net),
        }],
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=oc.epochs {
        order.shuffle(&mut rng);
        let mut rates = RateAccumulator::new(net.spiking_layers());
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (b, chunk) in order.chunks(oc.batch_size).enumerate() {
            let input = train_set.batch(chunk, cfg.timesteps, cfg.encoding, &mut rng)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let vars = net.forward_on(&mut tape, &bound, &input)?;
            let loss_var = tet_loss_on(&mut tape, vars.logits, vars.steps, &labels, &cfg.loss)?;
            let loss = tape.value(loss_var).item()?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
            }
            tape.backward(loss_var)?;
            net.zero_grad();
            net.collect_grads(&tape, &bound)?;
            let output = net.take_output(&mut tape, &vars)?;
            drop(tape);
            hits += correct(&output, &labels);
            rates.add(&output.spikes_per_layer)?;
            loss_sum += loss * chunk.len() as f64;

            optimizer.step(net.params_mut()).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            observer(&StepEvent { epoch, batch: b, loss }, net);
        }
        let eval = evaluate(net, test_set, cfg, oc.seed)?;
        let n = train_set.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            train: Some(SplitMetrics {
                loss: loss_sum / n,
                accuracy: hits as f64 / n,
            }),
            train_rates: Some(rates.profile()),
            test: eval.metrics,
            test_rates: eval.rates,
            test_ops: eval.ops,
            params: snapshot(net),
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{mlp, LayerSpec};
    use crate::neurons::NeuronParams;

    fn logits(steps: usize, batch: usize, classes: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![steps, batch, classes], v.to_vec()).unwrap()
    }

    #[test]
    fn hand_evaluated_loss() {
        let cfg = LossConfig {
            lambda: 0.5,
            phi_mode: PhiMode::Constant,
            phi: 1.0,
        };
        let l = tet_loss(&logits(1, 1, 2, &[0.0, 0.0]), &[0], &cfg).unwrap();
        assert!((l - (0.5 * 2f64.ln() + 0.5)).abs() < 1e-12);
        assert!((l - 0.8466).abs() < 1e-4);
    }

    #[test]
    fn lambda_endpoints() {
        let o = logits(2, 2, 3, &[0.3, -1.0, 2.0, 0.1, 0.0, -0.5, 1.5, 0.2, -0.2, 0.4, 0.9, -1.1]);
        let labels = [2, 0];
        let ce_only = LossConfig {
            lambda: 1.0,
            ..Default::default()
        };
        let mut ce = 0.0;
        for t in 0..2 {
            for b in 0..2 {
                let row = &o.data()[(t * 2 + b) * 3..(t * 2 + b + 1) * 3];
                let m = row.iter().copied().fold(f64::MIN, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                ce += lse - row[labels[b]];
            }
        }
        assert!((tet_loss(&o, &labels, &ce_only).unwrap() - ce / 4.0).abs() < 1e-12);

        let mse_only = LossConfig {
            lambda: 0.0,
            phi: 0.5,
            ..Default::default()
        };
        let mse = o.data().iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>() / 12.0;
        assert!((tet_loss(&o, &labels, &mse_only).unwrap() - mse).abs() < 1e-12);

        let one_hot = LossConfig {
            lambda: 0.0,
            phi_mode: PhiMode::OneHot,
            phi: 0.0,
        };
        let perfect = logits(1, 1, 2, &[0.0, 1.0]);
        assert_eq!(tet_loss(&perfect, &[1], &one_hot).unwrap(), 0.0);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let cfg = LossConfig {
            lambda: 1.0,
            ..Default::default()
        };
        let l = tet_loss(&logits(1, 1, 3, &[1e6, 0.0, 0.0]), &[0], &cfg).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn bad_labels_are_data_errors() {
        let r = tet_loss(&logits(1, 1, 2, &[0.0, 0.0]), &[2], &LossConfig::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    fn single_param_net() -> Network {
        Network::new(vec![LayerSpec::linear(1, 1, None)], &[1], 0).unwrap()
    }

    #[test]
    fn sgd_step_on_square() {
        let mut net = single_param_net();
        let w = net.layers[0].weight.as_mut().unwrap();
        w.data_mut()[0] = 1.0;
        w.accumulate_grad(&[2.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        })
        .unwrap();
        opt.step(net.params_mut()).unwrap();
        assert!((net.layers[0].weight.as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = Network::new(mlp(4, &[3], 2, NeuronParams::default()), &[4], 1).unwrap();
        let before = net.clone();
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(OptimizerConfig {
                kind,
                weight_decay: 0.0,
                ..Default::default()
            })
            .unwrap();
            net.zero_grad();
            opt.step(net.params_mut()).unwrap();
            for (a, b) in net.layers.iter().zip(&before.layers) {
                assert_eq!(a.weight, b.weight);
                assert_eq!(a.alpha, b.alpha);
            }
        }
    }

    #[test]
    fn alpha_and_beta_are_clamped() {
        let mut net = Network::new(mlp(4, &[3], 2, NeuronParams::default()), &[4], 1).unwrap();
        {
            let l = &mut net.layers[1];
            let a = l.alpha.as_mut().unwrap();
            a.data_mut()[0] = 0.9;
            a.accumulate_grad(&[-3.0]).unwrap();
            l.beta.as_mut().unwrap().accumulate_grad(&[100.0]).unwrap();
        }
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        opt.step(net.params_mut()).unwrap();
        assert_eq!(net.layers[1].alpha.as_ref().unwrap().data()[0], 1.0);
        assert_eq!(net.layers[1].beta.as_ref().unwrap().data()[0], -1.0);
        assert_eq!(net.track_params()[0].1, 1.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut net = single_param_net();
        net.layers[0].bias.as_mut().unwrap().accumulate_grad(&[f64::NAN]).unwrap();
        let before = net.layers[0].weight.clone();
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        match opt.step(net.params_mut()) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("layer0.bias"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(net.layers[0].weight, before);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Optimizer::new(OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        })
        .is_err());
        assert!(LossConfig {
            lambda: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn prediction_averages_over_time() {
        // Step 0 favours class 0 weakly, step 1 favours class 1 strongly.
        let o = logits(2, 1, 2, &[1.0, 0.0, 0.0, 3.0]);
        assert_eq!(predict(&o), vec![1]);
    }
}
