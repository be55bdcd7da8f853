use rand::Rng;

use super::{BatchNorm1d, Conv1d, Mode, Module, TensorRole};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Channel and pooling geometry of one residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub d_pool: usize,
}

impl BlockSpec {
    pub const fn new(d_in: usize, d_out: usize, d_pool: usize) -> Self {
        BlockSpec { d_in, d_out, d_pool }
    }
}

/// conv3 → bn → relu → conv3 → bn, plus a 1x1 convolution on the skip path,
/// relu after the sum, then max-pool by `d_pool`.
///
/// The kernel-3 convolutions carry no bias: the batch norm that follows
/// subtracts the per-channel mean and would cancel it exactly.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub spec: BlockSpec,
    pub conv1: Conv1d,
    pub bn1: BatchNorm1d,
    pub conv2: Conv1d,
    pub bn2: BatchNorm1d,
    pub skip: Conv1d,
}

impl ResidualBlock {
    pub fn new<R: Rng>(name: &str, spec: BlockSpec, rng: &mut R) -> Result<Self> {
        if spec.d_in == 0 || spec.d_out == 0 || spec.d_pool == 0 {
            return Err(Error::Contract(format!("invalid residual block {spec:?}")));
        }
        Ok(ResidualBlock {
            spec,
            conv1: Conv1d::new(format!("{name}.conv1"), spec.d_in, spec.d_out, 3, 1, false, rng),
            bn1: BatchNorm1d::new(format!("{name}.bn1"), spec.d_out),
            conv2: Conv1d::new(format!("{name}.conv2"), spec.d_out, spec.d_out, 3, 1, false, rng),
            bn2: BatchNorm1d::new(format!("{name}.bn2"), spec.d_out),
            skip: Conv1d::new(format!("{name}.skip"), spec.d_in, spec.d_out, 1, 1, true, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let channels = g.value(x).shape().get(1).copied();
        if channels != Some(self.spec.d_in) {
            return Err(Error::shape(
                "residual_block",
                format!("expected {} input channels, got {:?}", self.spec.d_in, g.value(x).shape()),
            ));
        }
        let h = self.conv1.forward(g, x, mode)?;
        let h = self.bn1.forward(g, h, mode)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h, mode)?;
        let h = self.bn2.forward(g, h, mode)?;
        let s = self.skip.forward(g, x, mode)?;
        let y = g.add(h, s)?;
        let y = g.relu(y);
        g.max_pool(y, self.spec.d_pool)
    }
}

impl Module for ResidualBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        self.skip.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        self.skip.visit_mut(f);
    }
}

/// Depthwise kernel-3 convolution → bn → relu → pointwise 1x1 → bn, plus a
/// skip connection (identity when channel counts match, else a 1x1
/// convolution), relu after the sum. Length is preserved.
#[derive(Clone, Debug)]
pub struct DwSepBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    pub depthwise: Conv1d,
    pub bn_dw: BatchNorm1d,
    pub pointwise: Conv1d,
    pub bn_pw: BatchNorm1d,
    pub skip: Option<Conv1d>,
}

impl DwSepBlock {
    pub fn new<R: Rng>(name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::Contract(format!("invalid DwSep block {in_ch}→{out_ch}")));
        }
        Ok(DwSepBlock {
            in_ch,
            out_ch,
            depthwise: Conv1d::new(format!("{name}.depthwise"), in_ch, in_ch, 3, in_ch, false, rng),
            bn_dw: BatchNorm1d::new(format!("{name}.bn_dw"), in_ch),
            pointwise: Conv1d::new(format!("{name}.pointwise"), in_ch, out_ch, 1, 1, false, rng),
            bn_pw: BatchNorm1d::new(format!("{name}.bn_pw"), out_ch),
            skip: (in_ch != out_ch)
                .then(|| Conv1d::new(format!("{name}.skip"), in_ch, out_ch, 1, 1, true, rng)),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let channels = g.value(x).shape().get(1).copied();
        if channels != Some(self.in_ch) {
            return Err(Error::shape(
                "dwsep_block",
                format!("expected {} input channels, got {:?}", self.in_ch, g.value(x).shape()),
            ));
        }
        let h = self.depthwise.forward(g, x, mode)?;
        let h = self.bn_dw.forward(g, h, mode)?;
        let h = g.relu(h);
        let h = self.pointwise.forward(g, h, mode)?;
        let h = self.bn_pw.forward(g, h, mode)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(g, x, mode)?,
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.relu(y))
    }
}

impl Module for DwSepBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor, TensorRole)) {
        self.depthwise.visit(f);
        self.bn_dw.visit(f);
        self.pointwise.visit(f);
        self.bn_pw.visit(f);
        if let Some(s) = &self.skip {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, TensorRole)) {
        self.depthwise.visit_mut(f);
        self.bn_dw.visit_mut(f);
        self.pointwise.visit_mut(f);
        self.bn_pw.visit_mut(f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check_parameters;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Weighted sum so the objective is not annihilated by batch-norm centring.
    fn projected(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
        let w = g.input(weights.clone());
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn residual_block_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (d_in, d_out, d_pool) in [(9, 16, 2), (4, 4, 1), (3, 8, 4)] {
            let blk = ResidualBlock::new("rb", BlockSpec::new(d_in, d_out, d_pool), &mut rng).unwrap();
            let mut g = Graph::new();
            let x = g.input(random(&[8, d_in, 128], &mut rng));
            let y = blk.forward(&mut g, x, Mode::Train).unwrap();
            assert_eq!(g.value(y).shape(), &[8, d_out, 128 / d_pool]);
        }
        let blk = ResidualBlock::new("rb", BlockSpec::new(3, 4, 2), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(random(&[2, 4, 16], &mut rng));
        assert!(blk.forward(&mut g, x, Mode::Train).is_err());
    }

    #[test]
    fn residual_block_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut blk = ResidualBlock::new("rb", BlockSpec::new(3, 3, 1), &mut rng).unwrap();
        blk.conv1.weight = Tensor::zeros(blk.conv1.weight.shape());
        blk.conv2.weight = Tensor::zeros(blk.conv2.weight.shape());
        let mut eye = Tensor::zeros(&[3, 3, 1]);
        for c in 0..3 {
            eye.data_mut()[c * 3 + c] = 1.0;
        }
        blk.skip.weight = eye;
        blk.skip.bias = Some(Tensor::zeros(&[3]));
        let input = random(&[2, 3, 10], &mut rng);
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = blk.forward(&mut g, x, Mode::Eval).unwrap();
        for (a, b) in g.value(y).data().iter().zip(input.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn dwsep_identity_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = 4;
        let mut blk = DwSepBlock::new("dw", c, c, &mut rng).unwrap();
        let mut dw = Tensor::zeros(&[c, 1, 3]);
        for i in 0..c {
            dw.data_mut()[i * 3 + 1] = 1.0;
        }
        blk.depthwise.weight = dw;
        let mut pw = Tensor::zeros(&[c, c, 1]);
        for i in 0..c {
            pw.data_mut()[i * c + i] = 1.0;
        }
        blk.pointwise.weight = pw;
        let input = random(&[2, c, 12], &mut rng);
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = blk.forward(&mut g, x, Mode::Eval).unwrap();
        // Neutral eval-mode batch norm divides by sqrt(1 + eps).
        let scale = 1.0 / (1.0 + crate::nn::BN_EPS).sqrt();
        for (a, v) in g.value(y).data().iter().zip(input.data()) {
            let inner = (v * scale).max(0.0) * scale;
            assert!((a - (inner + v).max(0.0)).abs() < 1e-12);
            assert!((a - (v + v).max(0.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn dwsep_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (cin, cout) in [(9, 32), (32, 64), (64, 64)] {
            let blk = DwSepBlock::new("dw", cin, cout, &mut rng).unwrap();
            assert_eq!(blk.skip.is_some(), cin != cout);
            let mut g = Graph::new();
            let x = g.input(random(&[4, cin, 128], &mut rng));
            let y = blk.forward(&mut g, x, Mode::Train).unwrap();
            assert_eq!(g.value(y).shape(), &[4, cout, 128]);
        }
    }

    #[test]
    fn residual_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blk = ResidualBlock::new("rb", BlockSpec::new(2, 3, 2), &mut rng).unwrap();
        let input = random(&[2, 2, 8], &mut rng);
        let proj = random(&[2, 3, 4], &mut rng);
        let err = grad_check_parameters(
            &blk,
            |m, g| {
                let x = g.input(input.clone());
                let y = m.forward(g, x, Mode::Train)?;
                projected(g, y, &proj)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "parameter gradient error {err}");
        let err = grad_check(
            |g, x| {
                let y = blk.forward(g, x, Mode::Train)?;
                projected(g, y, &proj)
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input gradient error {err}");
    }

    #[test]
    fn dwsep_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let blk = DwSepBlock::new("dw", 2, 3, &mut rng).unwrap();
        let input = random(&[2, 2, 6], &mut rng);
        let proj = random(&[2, 3, 6], &mut rng);
        let err = grad_check_parameters(
            &blk,
            |m, g| {
                let x = g.input(input.clone());
                let y = m.forward(g, x, Mode::Train)?;
                projected(g, y, &proj)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
