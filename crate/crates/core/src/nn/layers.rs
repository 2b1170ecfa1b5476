use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::{ConvGeom, Tensor};

use super::params::{Bindings, Initializer, ParamSet};

pub(crate) const LEAK: f32 = 0.2;

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    name: String,
    in_ch: usize,
    out_ch: usize,
    geom: ConvGeom,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            geom: ConvGeom { kernel, stride, pad },
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Self::new(name, in_ch, out_ch, 3, 1, 1)
    }

    /// 4x4, stride 2: halves even spatial sizes.
    pub fn halving(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Self::new(name, in_ch, out_ch, 4, 2, 1)
    }

    pub fn init(&self, params: &mut ParamSet, init: &mut Initializer, gain: f64) -> Result<()> {
        params.insert(
            format!("{}.w", self.name),
            init.conv_weight(self.out_ch, self.in_ch, self.geom.kernel, gain),
        )?;
        params.insert(format!("{}.b", self.name), Tensor::zeros(&[self.out_ch]))
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let w = b.get(&format!("{}.w", self.name))?;
        let bias = b.get(&format!("{}.b", self.name))?;
        tape.conv2d(x, w, Some(bias), self.geom)
    }
}

/// conv-IN-ReLU-conv-IN with an identity skip.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResBlock {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            conv1: Conv::same(format!("{name}.conv1"), width, width),
            conv2: Conv::same(format!("{name}.conv2"), width, width),
        }
    }

    pub fn init(&self, params: &mut ParamSet, init: &mut Initializer) -> Result<()> {
        self.conv1.init(params, init, std::f64::consts::SQRT_2)?;
        self.conv2.init(params, init, 1.0)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, b, x)?;
        let h = tape.instance_norm(h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, b, h)?;
        let h = tape.instance_norm(h)?;
        tape.add(x, h)
    }
}

/// Conv to 4x channels followed by a 2x pixel shuffle.
#[derive(Debug, Clone)]
pub(crate) struct UpStage {
    conv: Conv,
}

impl UpStage {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            conv: Conv::same(format!("{name}.conv"), width, width * 4),
        }
    }

    pub fn init(&self, params: &mut ParamSet, init: &mut Initializer) -> Result<()> {
        self.conv.init(params, init, std::f64::consts::SQRT_2)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, b, x)?;
        let h = tape.pixel_shuffle(h, 2)?;
        Ok(tape.leaky_relu(h, LEAK))
    }
}

/// Strided conv, instance norm, leaky ReLU.
#[derive(Debug, Clone)]
pub(crate) struct DownStage {
    conv: Conv,
}

impl DownStage {
    pub fn new(name: &str, width: usize) -> Self {
        Self {
            conv: Conv::halving(format!("{name}.conv"), width, width),
        }
    }

    pub fn init(&self, params: &mut ParamSet, init: &mut Initializer) -> Result<()> {
        self.conv.init(params, init, std::f64::consts::SQRT_2)
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, b, x)?;
        let h = tape.instance_norm(h)?;
        Ok(tape.leaky_relu(h, LEAK))
    }
}
