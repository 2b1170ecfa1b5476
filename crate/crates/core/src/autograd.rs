//! Reverse-mode differentiation over a flat tape.
//!
//! A [`Tape`] records every value produced during a forward pass together
//! with the operation that produced it. [`Tape::backward`] walks the tape in
//! reverse and returns gradients for every node that depends on a leaf
//! created with `requires_grad = true`.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    PixelShuffle {
        input: Var,
        factor: usize,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<f32>,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Tanh {
        input: Var,
    },
    Add(Var, Var),
    /// Mean absolute difference; scalar output.
    L1 {
        a: Var,
        b: Var,
    },
    /// Mean squared distance to a constant; scalar output.
    SquaredToConst {
        input: Var,
        target: f32,
    },
    WeightedSum(Vec<(Var, f64)>),
    /// Scalar computed outside the tape with precomputed input gradients.
    External(Vec<(Var, Tensor)>),
}

struct Node {
    value: Tensor,
    /// Full-precision value for scalar nodes.
    scalar: Option<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, scalar: Option<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            scalar,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            scalar: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a scalar node at full precision.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.scalar.unwrap_or_else(|| node.value.data()[0] as f64)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            None,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    pub fn pixel_shuffle(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = tensor::pixel_shuffle(self.value(input), factor)?;
        Ok(self.push(out, None, Op::PixelShuffle { input, factor }, &[input]))
    }

    pub fn instance_norm(&mut self, input: Var) -> Result<Var> {
        let (out, inv_std) = tensor::instance_norm(self.value(input))?;
        Ok(self.push(out, None, Op::InstanceNorm { input, inv_std }, &[input]))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        let out = self.value(input).map(|v| if v > 0.0 { v } else { v * slope });
        self.push(out, None, Op::LeakyRelu { input, slope }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = self.value(input).map(f32::tanh);
        self.push(out, None, Op::Tanh { input }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, None, Op::Add(a, b), &[a, b]))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("l1 {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let s = va.data().iter().zip(vb.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>()
            / va.numel() as f64;
        Ok(self.push(Tensor::scalar(s as f32), Some(s), Op::L1 { a, b }, &[a, b]))
    }

    /// `mean((input - target)^2)`: the least-squares adversarial loss, and
    /// with `target = 0` the latent mean penalty.
    pub fn squared_to_const(&mut self, input: Var, target: f32) -> Var {
        let v = self.value(input);
        let s = v.data().iter().map(|x| (*x as f64 - target as f64).powi(2)).sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s as f32), Some(s), Op::SquaredToConst { input, target }, &[input])
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(s as f32), Some(s), Op::WeightedSum(terms.to_vec()), &inputs)
    }

    /// Records a scalar computed elsewhere, along with `d value / d input`
    /// for each input.
    pub fn external(&mut self, value: f64, grads: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &grads {
            if self.value(*v).shape() != g.shape() {
                return Err(Error::shape("external gradient shape differs from its input"));
            }
        }
        let inputs: Vec<Var> = grads.iter().map(|g| g.0).collect();
        Ok(self.push(Tensor::scalar(value as f32), Some(value), Op::External(grads), &inputs))
    }

    /// Gradients of the scalar `root` with respect to every node it depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let cg = tensor::conv2d_backward(self.value(*input), self.value(*weight), &g, *geom)?;
                    send(*input, cg.input, &mut grads);
                    send(*weight, cg.weight, &mut grads);
                    if let Some(b) = bias {
                        send(*b, cg.bias, &mut grads);
                    }
                }
                Op::PixelShuffle { input, factor } => {
                    send(*input, tensor::pixel_unshuffle(&g, *factor)?, &mut grads);
                }
                Op::InstanceNorm { input, inv_std } => {
                    send(*input, tensor::instance_norm_backward(&node.value, inv_std, &g)?, &mut grads);
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input);
                    let mut gi = g;
                    gi.data_mut().iter_mut().zip(x.data()).for_each(|(gv, &xv)| {
                        if xv <= 0.0 {
                            *gv *= slope;
                        }
                    });
                    send(*input, gi, &mut grads);
                }
                Op::Tanh { input } => {
                    let mut gi = g;
                    gi.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(gv, &y)| *gv *= 1.0 - y * y);
                    send(*input, gi, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::L1 { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let scale = g.data()[0] / va.numel() as f32;
                    let ga = Tensor::from_vec(
                        va.shape(),
                        va.data()
                            .iter()
                            .zip(vb.data())
                            .map(|(x, y)| scale * sign(x - y))
                            .collect(),
                    )?;
                    let gb = ga.map(|v| -v);
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::SquaredToConst { input, target } => {
                    let x = self.value(*input);
                    let scale = 2.0 * g.data()[0] / x.numel() as f32;
                    send(*input, x.map(|v| scale * (v - target)), &mut grads);
                }
                Op::WeightedSum(terms) => {
                    let gv = g.data()[0] as f64;
                    for &(v, w) in terms {
                        send(v, Tensor::scalar((gv * w) as f32), &mut grads);
                    }
                }
                Op::External(inputs) => {
                    let gv = g.data()[0];
                    for (v, d) in inputs {
                        send(*v, d.map(|x| x * gv), &mut grads);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
