//! A small convolutional U-Net that predicts the noise in a noisy image.
//!
//! Each resolution level holds one residual block (scale-shift, SiLU, 3×3
//! convolution, timestep bias, scale-shift, SiLU, 3×3 convolution, plus a
//! 1×1 projection on the skip path when channel counts differ). Levels are
//! joined by 2×2 average pooling on the way down and nearest-neighbour
//! upsampling with skip concatenation on the way up. The final convolution
//! starts at zero so an untrained network predicts zero noise.

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Bound, Init, ParamSet, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub block_channels: Vec<usize>,
    pub time_embed_dim: usize,
    pub attention: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            block_channels: vec![16, 32, 64],
            time_embed_dim: 32,
            attention: false,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.block_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::Config("block_channels must be a nonempty list of positive counts".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and at least 2".into()));
        }
        if self.attention {
            return Err(Error::Config("attention blocks are not supported".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: UNetConfig,
}

fn conv_init(cin: usize, k: usize, gain: f64) -> Init {
    Init::Normal(gain * (2.0 / (cin * k * k) as f64).sqrt())
}

fn declare_res(p: &mut ParamSet, name: &str, cin: usize, cout: usize, emb: usize, rng: &mut rng::Rng) {
    p.declare(format!("{name}.n1.s"), vec![cin], Init::Constant(1.0), rng);
    p.declare(format!("{name}.n1.t"), vec![cin], Init::Zeros, rng);
    p.declare(format!("{name}.c1.w"), vec![cout, cin, 3, 3], conv_init(cin, 3, 1.0), rng);
    p.declare(format!("{name}.c1.b"), vec![cout], Init::Zeros, rng);
    p.declare(format!("{name}.t.w"), vec![cout, emb], Init::Normal(1.0 / (emb as f64).sqrt()), rng);
    p.declare(format!("{name}.t.b"), vec![cout], Init::Zeros, rng);
    p.declare(format!("{name}.n2.s"), vec![cout], Init::Constant(1.0), rng);
    p.declare(format!("{name}.n2.t"), vec![cout], Init::Zeros, rng);
    p.declare(format!("{name}.c2.w"), vec![cout, cout, 3, 3], conv_init(cout, 3, 0.5), rng);
    p.declare(format!("{name}.c2.b"), vec![cout], Init::Zeros, rng);
    if cin != cout {
        p.declare(format!("{name}.skip.w"), vec![cout, cin, 1, 1], conv_init(cin, 1, 0.5), rng);
        p.declare(format!("{name}.skip.b"), vec![cout], Init::Zeros, rng);
    }
}

fn res_block(tape: &mut Tape, p: &Bound<'_>, name: &str, x: Var, emb: Var) -> Var {
    let v = |s: &str| p.var(&format!("{name}.{s}"));
    let h = tape.channel_affine(x, v("n1.s"), v("n1.t"));
    let h = tape.silu(h);
    let h = tape.conv2d(h, v("c1.w"), v("c1.b"));
    let tb = tape.linear(emb, v("t.w"), v("t.b"));
    let h = tape.add_channel_bias(h, tb);
    let h = tape.channel_affine(h, v("n2.s"), v("n2.t"));
    let h = tape.silu(h);
    let h = tape.conv2d(h, v("c2.w"), v("c2.b"));
    let skip = if tape.value(x).dims4().1 != tape.value(h).dims4().1 {
        tape.conv2d(x, v("skip.w"), v("skip.b"))
    } else {
        x
    };
    tape.add(h, skip)
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(UNet { config })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Image sides must be divisible by this.
    pub fn side_multiple(&self) -> usize {
        1 << (self.config.levels() - 1)
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = rng::rng(seed);
        let ch = &self.config.block_channels;
        let emb = self.config.time_embed_dim;
        let levels = ch.len();
        let mut p = ParamSet::new();
        p.declare("in.w", vec![ch[0], 1, 3, 3], conv_init(1, 3, 1.0), &mut rng);
        p.declare("in.b", vec![ch[0]], Init::Zeros, &mut rng);
        p.declare("temb.w", vec![emb, emb], Init::Normal(1.0 / (emb as f64).sqrt()), &mut rng);
        p.declare("temb.b", vec![emb], Init::Zeros, &mut rng);
        let mut cin = ch[0];
        for (l, &c) in ch.iter().enumerate() {
            declare_res(&mut p, &format!("down{l}"), cin, c, emb, &mut rng);
            cin = c;
        }
        declare_res(&mut p, "mid", cin, cin, emb, &mut rng);
        for l in (0..levels).rev() {
            let below = if l + 1 == levels { ch[l] } else { ch[l + 1] };
            declare_res(&mut p, &format!("up{l}"), below + ch[l], ch[l], emb, &mut rng);
        }
        p.declare("out.n.s", vec![ch[0]], Init::Constant(1.0), &mut rng);
        p.declare("out.n.t", vec![ch[0]], Init::Zeros, &mut rng);
        p.declare("out.w", vec![1, ch[0], 3, 3], Init::Zeros, &mut rng);
        p.declare("out.b", vec![1], Init::Zeros, &mut rng);
        p
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.side_multiple();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!("expected [n, 1, h, w] input, got {shape:?}")));
        }
        if shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::Shape(format!(
                "image sides {}x{} must be positive multiples of {m}",
                shape[3], shape[2]
            )));
        }
        Ok(())
    }

    /// Records the forward pass for `x: [n, 1, h, w]` at per-sample timesteps.
    pub fn forward(&self, tape: &mut Tape, p: &Bound<'_>, x: Var, timesteps: &[usize]) -> Result<Var> {
        self.check_input(tape.value(x).shape())?;
        if timesteps.len() != tape.value(x).shape()[0] {
            return Err(Error::Shape("one timestep per batch element".into()));
        }
        let levels = self.config.levels();
        let emb_in = tape.leaf(timestep_embedding(timesteps, self.config.time_embed_dim));
        let emb = tape.linear(emb_in, p.var("temb.w"), p.var("temb.b"));
        let emb = tape.silu(emb);
        let mut h = tape.conv2d(x, p.var("in.w"), p.var("in.b"));
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = res_block(tape, p, &format!("down{l}"), h, emb);
            skips.push(h);
            if l + 1 < levels {
                h = tape.avg_pool2(h);
            }
        }
        h = res_block(tape, p, "mid", h, emb);
        for l in (0..levels).rev() {
            if l + 1 < levels {
                h = tape.upsample2(h);
            }
            h = tape.concat(h, skips[l]);
            h = res_block(tape, p, &format!("up{l}"), h, emb);
        }
        let h = tape.channel_affine(h, p.var("out.n.s"), p.var("out.n.t"));
        let h = tape.silu(h);
        Ok(tape.conv2d(h, p.var("out.w"), p.var("out.b")))
    }

    /// Noise prediction without keeping gradients around.
    pub fn predict(&self, params: &ParamSet, x_t: &[f64], shape: (usize, usize, usize), timesteps: &[usize]) -> Result<Vec<f64>> {
        let (n, h, w) = shape;
        if x_t.len() != n * h * w {
            return Err(Error::Shape(format!("{} values for a {n}x{h}x{w} batch", x_t.len())));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(params);
        let x = tape.leaf(Tensor::from_vec(vec![n, 1, h, w], x_t.to_vec()));
        let out = self.forward(&mut tape, &bound, x, timesteps)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// A U-Net with fixed weights, usable by the samplers.
pub struct UNetDenoiser<'a> {
    pub net: &'a UNet,
    pub params: &'a ParamSet,
}

impl Denoiser for UNetDenoiser<'_> {
    fn predict_epsilon(&self, x_t: &[f64], shape: (usize, usize, usize), t: usize) -> Vec<f64> {
        self.net
            .predict(self.params, x_t, shape, &vec![t; shape.0])
            .expect("sampler batches match the network input contract")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNet {
        UNet::new(UNetConfig { block_channels: vec![4, 8], time_embed_dim: 8, attention: false }).unwrap()
    }

    #[test]
    fn zero_head_predicts_zero() {
        let net = tiny();
        let p = net.init(1);
        let x = crate::rng::normals(&mut crate::rng::rng(2), 2 * 16 * 16);
        let out = net.predict(&p, &x, (2, 16, 16), &[5, 900]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_follows_input() {
        let net = tiny();
        let mut p = net.init(3);
        p.get_mut("out.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.1);
        for side in [32, 64] {
            let x = vec![0.5; side * side];
            let out = net.predict(&p, &x, (1, side, side), &[10]).unwrap();
            assert_eq!(out.len(), side * side);
            assert_eq!(out, net.predict(&p, &x, (1, side, side), &[10]).unwrap());
        }
    }

    #[test]
    fn indivisible_side_is_a_shape_error() {
        let net = UNet::new(UNetConfig::default()).unwrap();
        let p = net.init(0);
        assert!(matches!(net.predict(&p, &vec![0.0; 30 * 30], (1, 30, 30), &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_is_rejected() {
        assert!(UNet::new(UNetConfig { attention: true, ..UNetConfig::default() }).is_err());
    }
}
