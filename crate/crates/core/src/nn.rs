//! Parameterised layers on top of [`crate::autograd`].

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.2;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `k × k` convolution with "same" padding for odd `k`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::he_uniform(vec![cout, cin, k, k], fan_in, 2f32.sqrt(), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape[0]
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::he_uniform(vec![fan_out, fan_in], fan_in, 1.0, rng),
        );
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Adaptive instance norm: `norm(x) · (1 + γ(s)) + β(s)` driven by a style vector.
#[derive(Clone, Debug)]
pub struct Modulation {
    pub gamma: Dense,
    pub beta: Dense,
}

impl Modulation {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        style_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let gamma = Dense::new(store, &format!("{name}.gamma"), style_dim, channels, true, rng);
        let beta = Dense::new(store, &format!("{name}.beta"), style_dim, channels, true, rng);
        Self { gamma, beta }
    }

    /// Instance-normalises `x`, then applies the style's per-channel scale and shift.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, style: Var) -> Var {
        let g = self.gamma.forward(tape, store, style);
        let b = self.beta.forward(tape, store, style);
        let xn = tape.instance_norm(x);
        tape.channel_affine(xn, g, b)
    }
}
