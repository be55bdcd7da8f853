//! The fused network: a static expert, a dynamic expert and a guidance gate.
//!
//! Each expert maps a window to a probability vector over the classes of its
//! superclass. The guidance module maps the same window to a scalar gate
//! `g ∈ (0, 1)`, and the output distribution over all classes is the gated
//! concatenation `[g · p_static | (1 − g) · p_dynamic]`. Because both blocks
//! are already normalized, every fused row sums to one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Activity, Superclass};
use crate::error::{Error, Result};
use crate::nn::{BlockSpec, DwSepBlock, Linear, Mode, Module, ResidualBlock, TensorRole};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathwayConfig {
    pub blocks: Vec<BlockSpec>,
    pub num_outputs: usize,
}

impl PathwayConfig {
    /// Four residual blocks (64, 128, 256, 256 channels), each halving the length.
    pub fn default_for(in_channels: usize, num_outputs: usize) -> Self {
        PathwayConfig {
            blocks: vec![
                BlockSpec::new(in_channels, 64, 2),
                BlockSpec::new(64, 128, 2),
                BlockSpec::new(128, 256, 2),
                BlockSpec::new(256, 256, 2),
            ],
            num_outputs,
        }
    }

    fn validate(&self, in_channels: usize, window_len: usize) -> Result<()> {
        let first = self
            .blocks
            .first()
            .ok_or_else(|| Error::Contract("pathway needs at least one block".into()))?;
        if first.d_in != in_channels {
            return Err(Error::Contract(format!(
                "first block takes {} channels, input has {in_channels}",
                first.d_in
            )));
        }
        for pair in self.blocks.windows(2) {
            if pair[0].d_out != pair[1].d_in {
                return Err(Error::Contract(format!(
                    "blocks do not chain: {:?} then {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        if self.num_outputs == 0 {
            return Err(Error::Contract("pathway needs at least one output".into()));
        }
        let mut len = window_len;
        for b in &self.blocks {
            len /= b.d_pool.max(1);
        }
        if len == 0 {
            return Err(Error::Contract(format!(
                "window length {window_len} pooled to zero by {:?}",
                self.blocks
            )));
        }
        Ok(())
    }

    pub fn last_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.d_out)
    }
}

/// Channel sequence of the guidance DwSep stack, input channels first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GuidanceConfig {
    pub channels: Vec<usize>,
}

impl GuidanceConfig {
    pub fn default_for(in_channels: usize) -> Self {
        GuidanceConfig {
            channels: vec![in_channels, 32, 64, 64],
        }
    }

    fn validate(&self, in_channels: usize) -> Result<()> {
        if self.channels.len() < 2 || self.channels[0] != in_channels {
            return Err(Error::Contract(format!(
                "guidance channels {:?} must start at {in_channels} and contain a block",
                self.channels
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Contract("guidance channel count of zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub window_len: usize,
    pub static_path: PathwayConfig,
    pub dynamic_path: PathwayConfig,
    pub guidance: GuidanceConfig,
}

impl Architecture {
    pub fn default_for(in_channels: usize, window_len: usize, n_static: usize, n_dynamic: usize) -> Self {
        Architecture {
            in_channels,
            window_len,
            static_path: PathwayConfig::default_for(in_channels, n_static),
            dynamic_path: PathwayConfig::default_for(in_channels, n_dynamic),
            guidance: GuidanceConfig::default_for(in_channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.static_path.validate(self.in_channels, self.window_len)?;
        self.dynamic_path.validate(self.in_channels, self.window_len)?;
        self.guidance.validate(self.in_channels)
    }

    pub fn pathway(&self, which: Superclass) -> &PathwayConfig {
        match which {
            Superclass::Static => &self.static_path,
            Superclass::Dynamic => &self.dynamic_path,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One expert: residual blocks, global average pooling, a linear head and softmax.
#[derive(Clone, Debug)]
pub struct Pathway {
    pub config: PathwayConfig,
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
}

impl Pathway {
    pub fn new(name: &str, config: &PathwayConfig, seed: u64) -> Result<Self> {
        let stream = if name == "dynamic" { 2 } else { 1 };
        let mut rng = rng_for(seed, stream);
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| ResidualBlock::new(&format!("{name}.blocks.{i}"), *spec, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(
            format!("{name}.head"),
            config.last_channels(),
            config.num_outputs,
            &mut rng,
        );
        Ok(Pathway {
            config: config.clone(),
            blocks,
            head,
        })
    }

    /// Unnormalized class scores, [batch, num_outputs].
    pub fn logits(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h, mode)?;
        }
        let pooled = g.global_avg_pool(h)?;
        self.head.forward(g, pooled, mode)
    }

    /// Class probabilities, [batch, num_outputs].
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let z = self.logits(g, x, mode)?;
        g.softmax(z, 1)
    }
}

impl Module for Pathway {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        self.blocks.iter().for_each(|b| b.visit(f));
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.head.visit_mut(f);
    }
}

/// DwSep blocks, global average pooling, linear to one unit and a sigmoid.
#[derive(Clone, Debug)]
pub struct Guidance {
    pub config: GuidanceConfig,
    pub blocks: Vec<DwSepBlock>,
    pub head: Linear,
}

impl Guidance {
    pub fn new(config: &GuidanceConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, 3);
        let blocks = config
            .channels
            .windows(2)
            .enumerate()
            .map(|(i, c)| DwSepBlock::new(&format!("guidance.blocks.{i}"), c[0], c[1], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let last = *config.channels.last().unwrap_or(&1);
        Ok(Guidance {
            config: config.clone(),
            blocks,
            head: Linear::new("guidance.head", last, 1, &mut rng),
        })
    }

    /// Gate values, [batch, 1]; values near 1 favour the static expert.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h, mode)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let z = self.head.forward(g, pooled, mode)?;
        Ok(g.sigmoid(z))
    }
}

impl Module for Guidance {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        self.blocks.iter().for_each(|b| b.visit(f));
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        self.head.visit_mut(f);
    }
}

/// Graph handles produced by [`FusionModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub probs: Var,
    pub gate: Var,
    pub static_probs: Var,
    pub dynamic_probs: Var,
}

/// Fused probabilities and gate values for a batch, detached from any graph.
#[derive(Clone, Debug)]
pub struct PredictionVector {
    /// [batch, n_classes], rows in class order.
    pub probs: Tensor,
    /// [batch, 1]
    pub gate: Tensor,
}

impl PredictionVector {
    /// Arg-max class index per row; ties go to the lowest index.
    pub fn classes(&self) -> Vec<usize> {
        let n = self.probs.shape()[1];
        self.probs.data().chunks_exact(n).map(argmax).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub arch: Architecture,
    pub static_path: Pathway,
    pub dynamic_path: Pathway,
    pub guidance: Guidance,
    class_order: Vec<Activity>,
    n_static: usize,
}

impl FusionModel {
    /// Freshly initialized model. `static_labels` and `dynamic_labels` give
    /// the class order within each expert.
    pub fn new(
        arch: Architecture,
        static_labels: &[Activity],
        dynamic_labels: &[Activity],
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let static_path = Pathway::new("static", &arch.static_path, seed)?;
        let dynamic_path = Pathway::new("dynamic", &arch.dynamic_path, seed)?;
        let guidance = Guidance::new(&arch.guidance, seed)?;
        Self::assemble(arch, static_path, dynamic_path, guidance, static_labels, dynamic_labels)
    }

    pub fn assemble(
        arch: Architecture,
        static_path: Pathway,
        dynamic_path: Pathway,
        guidance: Guidance,
        static_labels: &[Activity],
        dynamic_labels: &[Activity],
    ) -> Result<Self> {
        arch.validate()?;
        if static_path.config != arch.static_path
            || dynamic_path.config != arch.dynamic_path
            || guidance.config != arch.guidance
        {
            return Err(Error::Incompatible(
                "module configuration differs from the architecture".into(),
            ));
        }
        if static_labels.len() != arch.static_path.num_outputs
            || dynamic_labels.len() != arch.dynamic_path.num_outputs
        {
            return Err(Error::Incompatible(format!(
                "{} static / {} dynamic labels for {} / {} expert outputs",
                static_labels.len(),
                dynamic_labels.len(),
                arch.static_path.num_outputs,
                arch.dynamic_path.num_outputs
            )));
        }
        let class_order: Vec<Activity> =
            static_labels.iter().chain(dynamic_labels).copied().collect();
        for (i, a) in class_order.iter().enumerate() {
            if class_order[..i].contains(a) {
                return Err(Error::Contract(format!("duplicate class {a:?}")));
            }
        }
        if static_labels.iter().any(|a| a.superclass() != Superclass::Static)
            || dynamic_labels.iter().any(|a| a.superclass() != Superclass::Dynamic)
        {
            return Err(Error::Contract("label assigned to the wrong expert".into()));
        }
        Ok(FusionModel {
            arch,
            static_path,
            dynamic_path,
            guidance,
            class_order,
            n_static: static_labels.len(),
        })
    }

    /// All classes: the static expert's first, then the dynamic expert's.
    pub fn class_order(&self) -> &[Activity] {
        &self.class_order
    }

    pub fn static_labels(&self) -> &[Activity] {
        &self.class_order[..self.n_static]
    }

    pub fn dynamic_labels(&self) -> &[Activity] {
        &self.class_order[self.n_static..]
    }

    pub fn class_index(&self, label: Activity) -> Option<usize> {
        self.class_order.iter().position(|&a| a == label)
    }

    /// Runs both experts under `expert_mode` and the guidance module under
    /// `guidance_mode`, then fuses.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        expert_mode: Mode,
        guidance_mode: Mode,
    ) -> Result<FusionOutput> {
        self.check_input(g.value(x).shape())?;
        let static_probs = self.static_path.forward(g, x, expert_mode)?;
        let dynamic_probs = self.dynamic_path.forward(g, x, expert_mode)?;
        let gate = self.guidance.forward(g, x, guidance_mode)?;
        let probs = g.fuse(static_probs, dynamic_probs, gate)?;
        Ok(FusionOutput {
            probs,
            gate,
            static_probs,
            dynamic_probs,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.arch.in_channels || shape[2] != self.arch.window_len {
            return Err(Error::shape(
                "fusion_model",
                format!(
                    "expected [batch, {}, {}], got {shape:?}",
                    self.arch.in_channels, self.arch.window_len
                ),
            ));
        }
        Ok(())
    }

    /// Eval-mode fused probabilities and gates for a [batch, channels, len] input.
    pub fn predict_batch(&self, x: &Tensor) -> Result<PredictionVector> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, xv, Mode::Eval, Mode::Eval)?;
        Ok(PredictionVector {
            probs: g.value(out.probs).clone(),
            gate: g.value(out.gate).clone(),
        })
    }

    /// Most probable activity for a single [channels, len] window.
    pub fn predict(&self, window: &Tensor) -> Result<Activity> {
        let x = Tensor::stack(&[window])?;
        let pv = self.predict_batch(&x)?;
        Ok(self.class_order[pv.classes()[0]])
    }
}

impl Module for FusionModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        self.static_path.visit(f);
        self.dynamic_path.visit(f);
        self.guidance.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.static_path.visit_mut(f);
        self.dynamic_path.visit_mut(f);
        self.guidance.visit_mut(f);
    }
}

/// Gated concatenation of already-normalized expert outputs, outside any graph.
pub fn fuse(static_probs: &Tensor, dynamic_probs: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let s = g.input(static_probs.clone());
    let d = g.input(dynamic_probs.clone());
    let gv = g.input(gate.clone());
    let out = g.fuse(s, d, gv)?;
    Ok(g.value(out).clone())
}

/// Mean negative log-likelihood of `labels` under probability rows.
pub fn nll_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(probs.clone());
    let l = g.nll(p, labels)?;
    Ok(g.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetKind;
    use rand::Rng;

    fn small_arch(c: usize, len: usize, ns: usize, nd: usize) -> Architecture {
        Architecture {
            in_channels: c,
            window_len: len,
            static_path: PathwayConfig {
                blocks: vec![BlockSpec::new(c, 4, 2), BlockSpec::new(4, 4, 2)],
                num_outputs: ns,
            },
            dynamic_path: PathwayConfig {
                blocks: vec![BlockSpec::new(c, 4, 2), BlockSpec::new(4, 4, 2)],
                num_outputs: nd,
            },
            guidance: GuidanceConfig {
                channels: vec![c, 4, 4],
            },
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn ucihar_model(seed: u64) -> FusionModel {
        let k = DatasetKind::UciHar;
        FusionModel::new(small_arch(9, 16, 3, 3), &k.static_labels(), &k.dynamic_labels(), seed).unwrap()
    }

    #[test]
    fn expert_rows_are_distributions() {
        let m = ucihar_model(0);
        let mut g = Graph::new();
        let x = g.input(random(&[5, 9, 16], 1));
        let out = m.forward(&mut g, x, Mode::Eval, Mode::Eval).unwrap();
        for v in [out.static_probs, out.dynamic_probs, out.probs] {
            let t = g.value(v);
            let n = t.shape()[1];
            for row in t.data().chunks_exact(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        assert_eq!(g.value(out.static_probs).shape(), &[5, 3]);
        for &gv in g.value(out.gate).data() {
            assert!(gv > 0.0 && gv < 1.0);
        }
    }

    #[test]
    fn default_architecture_class_counts() {
        for (kind, ns, nd) in [(DatasetKind::UciHar, 3, 3), (DatasetKind::MotionSense, 2, 4)] {
            let arch = Architecture::default_for(kind.channels(), 128, ns, nd);
            assert!(arch.validate().is_ok());
            let m = FusionModel::new(arch, &kind.static_labels(), &kind.dynamic_labels(), 0).unwrap();
            assert_eq!(m.static_labels().len(), ns);
            assert_eq!(m.dynamic_labels().len(), nd);
            assert_eq!(m.class_order().len(), 6);
        }
    }

    #[test]
    fn zero_gate_head_gives_half() {
        let mut m = ucihar_model(3);
        m.guidance.head.weight = Tensor::zeros(m.guidance.head.weight.shape());
        m.guidance.head.bias = Tensor::zeros(&[1]);
        let pv = m.predict_batch(&random(&[3, 9, 16], 4)).unwrap();
        assert!(pv.gate.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fuse_examples() {
        let ys = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let yd = Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let half = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        assert_eq!(fuse(&ys, &yd, &half).unwrap().data(), &[0.5, 0.0, 0.0, 0.0, 0.0, 0.5]);
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let ys = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(fuse(&ys, &yd, &one).unwrap().data(), &[0.2, 0.5, 0.3, 0.0, 0.0, 0.0]);
        let bad_gate = Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap();
        assert!(fuse(&ys, &yd, &bad_gate).is_err());
    }

    #[test]
    fn loss_examples() {
        let one_hot = Tensor::new(vec![1, 6], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(nll_loss(&one_hot, &[2]).unwrap() <= 1e-11);
        let uniform = Tensor::full(&[2, 6], 1.0 / 6.0);
        assert!((nll_loss(&uniform, &[0, 5]).unwrap() - 6f64.ln()).abs() < 1e-10);
        let p = Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.3, 0.7, 0.5, 0.5]).unwrap();
        let expect = -(0.9f64.ln() + 0.7f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((nll_loss(&p, &[0, 1, 0]).unwrap() - expect).abs() < 1e-10);
        assert!(matches!(nll_loss(&p, &[0, 1, 2]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn predict_with_saturated_gate() {
        let mut m = ucihar_model(5);
        // Gate pinned to 1 and the static head pinned to "Standing".
        m.guidance.head.weight = Tensor::zeros(m.guidance.head.weight.shape());
        m.guidance.head.bias = Tensor::from_vec(vec![800.0]);
        m.static_path.head.weight = Tensor::zeros(m.static_path.head.weight.shape());
        m.static_path.head.bias = Tensor::from_vec(vec![0.0, 30.0, 0.0]);
        let label = m.predict(&random(&[9, 16], 6)).unwrap();
        assert_eq!(label, Activity::Standing);
    }

    #[test]
    fn argmax_tie_takes_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.5, 0.5]), 2);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = ucihar_model(0);
        assert!(m.predict_batch(&random(&[1, 8, 16], 0)).is_err());
    }

    #[test]
    fn logit_shift_leaves_prediction_unchanged() {
        let m = ucihar_model(7);
        let x = random(&[4, 9, 16], 8);
        let before = m.predict_batch(&x).unwrap();
        let mut shifted = m.clone();
        shifted.dynamic_path.head.bias.data_mut().iter_mut().for_each(|b| *b += 3.7);
        let after = shifted.predict_batch(&x).unwrap();
        assert_eq!(before.classes(), after.classes());
        for (a, b) in before.probs.data().iter().zip(after.probs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
