//! Progressive convolutional discriminator with an optional pose branch.
//!
//! Images are NHWC. A trunk at resolution `R = 4 * 2^L` has one 1x1 input head
//! per level and `L` residual down-sampling blocks ending at 4x4, followed by
//! a linear head emitting a realness logit and, optionally, `(pitch, yaw)`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use surfgan_grad::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{self, module_fields, Linear};

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Channels at resolution `r` are `min(max_channels, base_channels * 64 / r)`.
    pub base_channels: usize,
    pub max_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            max_channels: 256,
        }
    }
}

impl DiscriminatorConfig {
    pub fn channels(&self, resolution: usize) -> usize {
        (self.base_channels * 64 / resolution).clamp(1, self.max_channels)
    }

    /// Channel table from 4x4 up to `resolution`.
    pub fn table(&self, resolution: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut r = 4;
        while r <= resolution {
            out.push((r, self.channels(r)));
            r *= 2;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `[k * k * c_in, c_out]`, rows ordered `(ky, kx, c)`.
    pub weight: Var,
    pub bias: Var,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

module_fields!(Conv2d { weight, bias });

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let fan_in = k * k * c_in;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Var::param(nn::normal(rng, &[fan_in, c_out], std)),
            bias: Var::param(Tensor::zeros(&[c_out])),
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let s = x.shape();
        let (b, h, w) = (s[0], s[1], s[2]);
        let oh = (h + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.k) / self.stride + 1;
        let cols = if self.k == 1 && self.stride == 1 {
            x.reshape(&[b * h * w, s[3]])
        } else {
            x.unfold2d(self.k, self.stride, self.pad)
        };
        let c_out = self.weight.shape()[1];
        cols.matmul(&self.weight)
            .add(&self.bias)
            .reshape(&[b, oh, ow, c_out])
    }
}

/// 2x2 average pooling as a fixed linear map on patches.
pub fn avg_pool2(x: &Var) -> Var {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let pool = Tensor::from_fn(&[4 * c, c], |i| if (i / c) % c == i % c { 0.25 } else { 0.0 });
    x.unfold2d(2, 2, 0)
        .matmul(&Var::constant(pool))
        .reshape(&[b, h / 2, w / 2, c])
}

#[derive(Clone, Debug)]
pub struct DownBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Conv2d,
}

module_fields!(DownBlock { conv1, conv2, skip });

impl DownBlock {
    fn new<R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: Conv2d::new(rng, c_in, c_in, 3, 1),
            conv2: Conv2d::new(rng, c_in, c_out, 3, 2),
            skip: Conv2d::new(rng, c_in, c_out, 1, 2),
        }
    }

    fn forward(&self, x: &Var) -> Var {
        let y = self.conv1.forward(x).leaky_relu(SLOPE);
        let y = self.conv2.forward(&y).leaky_relu(SLOPE);
        y.add(&self.skip.forward(x)).scale(std::f64::consts::FRAC_1_SQRT_2)
    }
}

pub struct DiscriminatorOutput {
    /// `[B]`
    pub logits: Var,
    /// `[B, 2]` predicted `(pitch, yaw)` in radians.
    pub pose: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub pose_head: bool,
    resolution: usize,
    /// Weight of the newest level while it fades in; 1 when settled.
    pub alpha: f64,
    /// `from_rgb[l]` reads images at `4 << l`.
    pub from_rgb: Vec<Conv2d>,
    /// `blocks[l - 1]` maps level `l` to level `l - 1`.
    pub blocks: Vec<DownBlock>,
    pub head: Linear,
}

module_fields!(Discriminator { from_rgb, blocks, head });

fn level_of(resolution: usize) -> Result<usize> {
    if resolution < 4 || !resolution.is_power_of_two() {
        return Err(Error::Config(format!(
            "discriminator resolution {resolution} must be a power of two >= 4"
        )));
    }
    Ok((resolution / 4).trailing_zeros() as usize)
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        config: &DiscriminatorConfig,
        resolution: usize,
        pose_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let levels = level_of(resolution)?;
        let mut d = Self {
            config: config.clone(),
            pose_head,
            resolution: 4,
            alpha: 1.0,
            from_rgb: vec![Conv2d::new(rng, 3, config.channels(4), 1, 1)],
            blocks: Vec::new(),
            head: {
                let fan_in = 16 * config.channels(4);
                Linear::normal(rng, fan_in, 1 + 2 * pose_head as usize, (1.0 / fan_in as f64).sqrt())
            },
        };
        for _ in 0..levels {
            d.grow(rng);
        }
        d.alpha = 1.0;
        Ok(d)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    fn levels(&self) -> usize {
        self.blocks.len()
    }

    /// Adds a level for twice the current resolution. The new level starts
    /// faded out (`alpha = 0`).
    pub fn grow<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let r = self.resolution * 2;
        let (c_hi, c_lo) = (self.config.channels(r), self.config.channels(self.resolution));
        self.from_rgb.push(Conv2d::new(rng, 3, c_hi, 1, 1));
        self.blocks.push(DownBlock::new(rng, c_hi, c_lo));
        self.resolution = r;
        self.alpha = 0.0;
    }

    pub fn forward(&self, images: &Var) -> Result<DiscriminatorOutput> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.resolution || s[2] != self.resolution || s[3] != 3 {
            return Err(Error::invalid(format!(
                "discriminator at {r}x{r} got input of shape {s:?}",
                r = self.resolution
            )));
        }
        let b = s[0];
        let x = images.scale(2.0).add_scalar(-1.0);
        let top = self.levels();
        let mut h = self.from_rgb[top].forward(&x).leaky_relu(SLOPE);
        if top > 0 {
            h = self.blocks[top - 1].forward(&h);
            if self.alpha < 1.0 {
                let low = self.from_rgb[top - 1].forward(&avg_pool2(&x)).leaky_relu(SLOPE);
                h = h.scale(self.alpha).add(&low.scale(1.0 - self.alpha));
            }
            for l in (1..top).rev() {
                h = self.blocks[l - 1].forward(&h);
            }
        }
        let c = h.shape()[3];
        let out = self.head.forward(&h.reshape(&[b, 16 * c]));
        let logits = out.narrow(1, 0, 1).reshape(&[b]);
        let pose = self.pose_head.then(|| out.narrow(1, 1, 2));
        Ok(DiscriminatorOutput { logits, pose })
    }
}
