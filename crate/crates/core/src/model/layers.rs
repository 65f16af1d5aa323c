//! Trainable layers used by the backbones and heads.

use crate::tensor::{conv2d, Arr, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Arr {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub struct Linear {
    pub weight: Var, // [in, out]
    pub bias: Var,   // [out]
    name: String,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Var::param(he_uniform(&[fan_in, fan_out], fan_in, rng)),
            bias: Var::param(ArrayD::zeros(IxDyn(&[fan_out]))),
            name: name.to_string(),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.matmul(&self.weight).add(&self.bias)
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        vec![
            (format!("{}.weight", self.name), self.weight.clone()),
            (format!("{}.bias", self.name), self.bias.clone()),
        ]
    }
}

pub struct Conv2dLayer {
    pub weight: Var, // [out, in, k, k]
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
    name: String,
}

impl Conv2dLayer {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2dLayer {
            weight: Var::param(he_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng)),
            bias: bias.then(|| Var::param(ArrayD::zeros(IxDyn(&[out_ch])))),
            stride,
            pad,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        let mut out = vec![(format!("{}.weight", self.name), self.weight.clone())];
        if let Some(b) = &self.bias {
            out.push((format!("{}.bias", self.name), b.clone()));
        }
        out
    }
}

/// Per-channel batch normalization over `[B, C, H, W]`.
///
/// Training mode normalizes with batch statistics (and folds them into the
/// running estimates); eval mode uses the running estimates as constants.
pub struct BatchNorm2d {
    pub gamma: Var, // [C]
    pub beta: Var,  // [C]
    pub running_mean: RefCell<Arr>,
    pub running_var: RefCell<Arr>,
    momentum: f64,
    eps: f64,
    channels: usize,
    name: String,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Var::param(ArrayD::ones(IxDyn(&[channels]))),
            beta: Var::param(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: RefCell::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: RefCell::new(ArrayD::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
            channels,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, x: &Var, training: bool) -> Var {
        let c = self.channels;
        let reshape4 = |v: &Var| v.reshape(&[1, c, 1, 1]);
        if training {
            let mean = x.mean_axes(&[0, 2, 3], true); // [1, C, 1, 1]
            let centered = x.sub(&mean);
            let var = centered.square().mean_axes(&[0, 2, 3], true);
            // fold batch statistics into the running estimates
            {
                let m = self.momentum;
                let mean_v = mean.value().into_shape_with_order(IxDyn(&[c])).unwrap();
                let var_v = var.value().into_shape_with_order(IxDyn(&[c])).unwrap();
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                *rm = &*rm * (1.0 - m) + &mean_v * m;
                *rv = &*rv * (1.0 - m) + &var_v * m;
            }
            let normed = centered.div(&var.add_scalar(self.eps).sqrt());
            normed
                .mul(&reshape4(&self.gamma))
                .add(&reshape4(&self.beta))
        } else {
            let rm = Var::constant(
                self.running_mean
                    .borrow()
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
                    .unwrap(),
            );
            let rv = Var::constant(
                self.running_var
                    .borrow()
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
                    .unwrap(),
            );
            x.sub(&rm)
                .div(&rv.add_scalar(self.eps).sqrt())
                .mul(&reshape4(&self.gamma))
                .add(&reshape4(&self.beta))
        }
    }

    pub fn params(&self) -> Vec<(String, Var)> {
        vec![
            (format!("{}.gamma", self.name), self.gamma.clone()),
            (format!("{}.beta", self.name), self.beta.clone()),
        ]
    }

    /// Running statistics for checkpointing, in (name, value) form.
    pub fn state(&self) -> Vec<(String, Arr)> {
        vec![
            (
                format!("{}.running_mean", self.name),
                self.running_mean.borrow().clone(),
            ),
            (
                format!("{}.running_var", self.name),
                self.running_var.borrow().clone(),
            ),
        ]
    }

    pub fn load_state(&self, name: &str, value: Arr) -> bool {
        if name == format!("{}.running_mean", self.name) {
            *self.running_mean.borrow_mut() = value;
            true
        } else if name == format!("{}.running_var", self.name) {
            *self.running_var.borrow_mut() = value;
            true
        } else {
            false
        }
    }
}
