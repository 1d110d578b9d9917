//! Parameter containers shared by the backbone, the classifiers and the
//! calibrators.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::kaiming;
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Sgd, Tape, Tensor, Var};

/// Anything that owns an ordered list of named trainable tensors.
///
/// The order of [`Parameterized::named_params`] and
/// [`Parameterized::params_mut`] must agree; it is also the order in which
/// [`Parameterized::bind`] places the parameters on a tape.
pub trait Parameterized<T: Scalar> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, p)| tape.watch(p)).collect()
    }

    fn absorb(&mut self, grads: &Gradients<T>, vars: &[Var]) -> Result<()> {
        let params = self.params_mut();
        if params.len() != vars.len() {
            return Err(Error::contract(format!("{} vars bound for {} params", vars.len(), params.len())));
        }
        for (p, &v) in params.into_iter().zip(vars) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }

    fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(false));
    }

    fn unfreeze(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(true));
    }

    fn is_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, p)| !p.requires_grad())
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.numel()).sum()
    }

    fn sgd_step(&mut self, opt: &mut Sgd<T>, step: usize) -> Result<f64> {
        opt.step(&mut self.params_mut(), step)
    }

    /// Replaces every parameter with the same-named, same-shaped tensor from
    /// `source`. Trainability flags are kept.
    fn load_named(&mut self, source: &[(String, Tensor<T>)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(self.params_mut()) {
            let (_, t) = source
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::contract(format!("checkpoint is missing tensor '{name}'")))?;
            if t.shape() != p.shape() {
                return Err(Error::dim(format!("tensor '{name}': checkpoint {:?}, model {:?}", t.shape(), p.shape())));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub padding: usize,
    pub stride: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    /// He-initialized weights, zero bias.
    pub fn kaiming(cout: usize, cin: usize, k: usize, padding: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: kaiming(&[cout, cin, k, k], cin * k * k, rng).into_param(),
            bias: Tensor::zeros([cout]).into_param(),
            padding,
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `vars` holds the bound (weight, bias) pair.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[0], Some(vars[1]), self.padding, self.stride)
    }

    pub fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Affine map applied to every row of a `[rows × in]` matrix:
/// `x · W + b` with `W[in × out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowLinear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> RowLinear<T> {
    pub fn kaiming(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: kaiming(&[input, output], input, rng).into_param(),
            bias: Tensor::zeros([output]).into_param(),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros([input, output]).into_param(),
            bias: Tensor::zeros([output]).into_param(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let xw = tape.matmul(x, vars[0])?;
        tape.add_row_bias(xw, vars[1])
    }

    pub fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Bit-level snapshot of every parameter, for frozen-state checks.
pub fn snapshot<T: Scalar, M: Parameterized<T> + ?Sized>(m: &M) -> Vec<u64> {
    m.named_params()
        .iter()
        .flat_map(|(_, p)| p.data().iter().map(|v| v.as_f64().to_bits()))
        .collect()
}
