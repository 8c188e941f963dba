//! Layers built from tape primitives.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tape::{ParamGraph, ParamId, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "softplus" => Some(Activation::Softplus),
            _ => None,
        }
    }
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive dims")
}

/// Fully connected layer `x · w + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        graph: &mut ParamGraph,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = graph.add(format!("{name}.weight"), glorot(fan_in, fan_out, rng))?;
        let bias = graph.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, graph: &ParamGraph, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.fan_in {
            return Err(Error::shape("dense", &[self.fan_in], &[cols]));
        }
        let w = tape.param(graph, self.weight)?;
        let b = tape.param(graph, self.bias)?;
        tape.affine(x, w, b)
    }

    /// Same as [`Dense::forward`] but records the weights as constants, so `graph` may be
    /// unrelated to the graph being differentiated.
    pub fn forward_frozen(&self, tape: &mut Tape, graph: &ParamGraph, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.fan_in {
            return Err(Error::shape("dense", &[self.fan_in], &[cols]));
        }
        let w = tape.constant(graph.value(self.weight).clone())?;
        let b = tape.constant(graph.value(self.bias).clone())?;
        tape.affine(x, w, b)
    }

    pub fn zero(&self, graph: &mut ParamGraph) {
        graph.value_mut(self.weight).data_mut().fill(0.0);
        graph.value_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Multi-layer perceptron with a shared hidden activation and a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        graph: &mut ParamGraph,
        name: &str,
        sizes: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(graph, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers, hidden })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn forward(&self, tape: &mut Tape, graph: &ParamGraph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, graph, h)?;
            if i < last {
                h = self.hidden.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    /// Forward pass with weights recorded as constants (see [`Dense::forward_frozen`]).
    pub fn forward_frozen(&self, tape: &mut Tape, graph: &ParamGraph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_frozen(tape, graph, h)?;
            if i < last {
                h = self.hidden.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    /// `"relu:2-64-64-4"` style architecture string.
    pub fn descriptor(&self) -> String {
        let mut sizes = vec![self.input_dim().to_string()];
        sizes.extend(self.layers.iter().map(|l| l.fan_out.to_string()));
        format!("{}:{}", self.hidden.name(), sizes.join("-"))
    }

    /// Evaluates the network on a batch without keeping the tape.
    pub fn eval(&self, graph: &ParamGraph, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let y = self.forward(&mut tape, graph, xv)?;
        Ok(tape.value(y).clone())
    }
}
