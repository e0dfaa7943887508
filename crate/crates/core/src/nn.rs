//! Layer primitives built on the autograd [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Standard deviation of the zero-mean normal that kernels feeding a batch norm start from.
pub const CONV_BN_INIT_STD: f64 = 0.001;

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square convolution with "same" padding (`kernel / 2`), He-normal kernel
    /// (`std = sqrt(2 / fan_in)`) and zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let he = (2.0 / (in_channels * kernel * kernel).max(1) as f64).sqrt();
        Self::with_std(store, rng, name, in_channels, out_channels, kernel, stride, bias, he)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let weight = store.add_normal(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            std,
            rng,
        );
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.conv2d(x, w, self.stride, self.padding);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.bias_add(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(&format!("{name}.weight"), Tensor::full(&[channels], 1.0)),
            beta: store.add_param(&format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            channels,
        }
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            BN_EPS,
            BN_MOMENTUM,
        )
    }
}

/// Bias-free convolution, batch norm, optional ReLU.
///
/// The kernel starts from `N(0, CONV_BN_INIT_STD^2)`. Batch norm makes the output
/// invariant to the kernel's norm, so a fixed-size Adam step is a larger relative change
/// on a small kernel; at the default learning rate this is what lets small runs converge.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        let conv = Conv2d::with_std(
            store,
            rng,
            &format!("{name}.conv"),
            in_channels,
            out_channels,
            kernel,
            stride,
            false,
            CONV_BN_INIT_STD,
        );
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_channels);
        Self { conv, bn, relu }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.bn.forward(g, y);
        if self.relu {
            g.relu(y)
        } else {
            y
        }
    }
}
