use ins_autograd::{Binding, ParamSet, Tensor, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    /// `sin(omega * z)`.
    Sine(f64),
    Softplus(f64),
}

impl Activation {
    pub fn apply<'t>(self, z: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.relu(),
            Activation::Sine(omega) => z.scale(omega).sin(),
            Activation::Softplus(beta) => z.softplus(beta),
        }
    }
}

/// Fully connected layer `y = x W + b` with `W` stored as `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: format!("{name}.weight"),
            bias: format!("{name}.bias"),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        x.linear(&p.get(&self.weight), Some(&p.get(&self.bias)))
    }

    /// Weight rows `[start, start + len)`, the slice acting on one block of a
    /// concatenated input.
    pub fn weight_rows<'t>(&self, p: &Binding<'t, '_>, start: usize, len: usize) -> Var<'t> {
        p.get(&self.weight).narrow(0, start, len)
    }

    pub fn shapes(&self) -> [(&str, Vec<usize>); 2] {
        [
            (self.weight.as_str(), vec![self.fan_in, self.fan_out]),
            (self.bias.as_str(), vec![self.fan_out]),
        ]
    }

    fn put(&self, params: &mut ParamSet, w: Tensor, b: Tensor) {
        params.insert(self.weight.clone(), w);
        params.insert(self.bias.clone(), b);
    }

    fn uniform(&self, rng: &mut impl Rng, bound: f64) -> Tensor {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Tensor::from_shape_fn(IxDyn(&[self.fan_in, self.fan_out]), |_| dist.sample(rng))
    }

    /// Default uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    pub fn init_default(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        let bound = 1.0 / (self.fan_in as f64).sqrt();
        let w = self.uniform(rng, bound);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let b = Tensor::from_shape_fn(IxDyn(&[self.fan_out]), |_| dist.sample(rng));
        self.put(params, w, b);
    }

    /// SIREN init: `U(-1/n, 1/n)` on the first layer, `U(-sqrt(6/n)/omega,
    /// sqrt(6/n)/omega)` on later ones.
    pub fn init_siren(&self, params: &mut ParamSet, rng: &mut impl Rng, first: bool, omega: f64) {
        let n = self.fan_in as f64;
        let bound = if first {
            1.0 / n
        } else {
            (6.0 / n).sqrt() / omega
        };
        let w = self.uniform(rng, bound);
        let bb = 1.0 / n.sqrt();
        let dist = Uniform::new_inclusive(-bb, bb).expect("finite bound");
        let b = Tensor::from_shape_fn(IxDyn(&[self.fan_out]), |_| dist.sample(rng));
        self.put(params, w, b);
    }

    /// Zero weights with the default bias init.
    pub fn init_zero_weight(&self, params: &mut ParamSet, rng: &mut impl Rng) {
        self.init_default(params, rng);
        params.insert(
            self.weight.clone(),
            Tensor::zeros(IxDyn(&[self.fan_in, self.fan_out])),
        );
    }

    pub fn init_zero(&self, params: &mut ParamSet) {
        self.put(
            params,
            Tensor::zeros(IxDyn(&[self.fan_in, self.fan_out])),
            Tensor::zeros(IxDyn(&[self.fan_out])),
        );
    }

    /// Normal weights `N(mean, std)` and constant bias.
    pub fn init_normal(
        &self,
        params: &mut ParamSet,
        rng: &mut impl Rng,
        mean: f64,
        std: f64,
        bias: f64,
    ) {
        let dist = Normal::new(mean, std).expect("valid normal");
        let w = Tensor::from_shape_fn(IxDyn(&[self.fan_in, self.fan_out]), |_| dist.sample(rng));
        let b = Tensor::from_elem(IxDyn(&[self.fan_out]), bias);
        self.put(params, w, b);
    }
}
