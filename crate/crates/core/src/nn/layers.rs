use rand::Rng;

use super::{ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Affine map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / (din + dout) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn([din, dout], std, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros([dout]))?;
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// Two affine layers with an activation between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp2 {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, rng)?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, rng)?;
        Ok(Self { fc1, fc2, act })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = self.act.apply(tape, h);
        self.fc2.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Pending running-statistics update from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnUpdate<T> {
    pub fn apply(&self, store: &mut ParamStore<T>) {
        let m = T::real(BN_MOMENTUM);
        let keep = T::one() - m;
        for (id, batch) in [(self.running_mean, &self.mean), (self.running_var, &self.var)] {
            for (r, &b) in store.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
}

/// Per-channel batch norm over `[B, C, ...]`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full([channels], T::one()))?,
        })
    }

    /// In train mode returns the statistics update to apply once the step is done.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BnUpdate<T>>)> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, NORM_EPS)?;
                let update = BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean: stats.mean,
                    var: stats.var,
                };
                Ok((y, Some(update)))
            }
            Mode::Eval => {
                let rm = store.get(self.running_mean).value.data();
                let rv = store.get(self.running_var).value.data();
                Ok((tape.batch_norm_eval(x, g, b, rm, rv, NORM_EPS)?, None))
            }
        }
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3x3 {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn([cout, cin, 3, 3], std, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros([cout]))?;
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv3x3(x, w, b)
    }
}
