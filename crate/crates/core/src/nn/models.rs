//! Network architectures: a small binary CNN and a U-Net noise predictor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Conv blocks (3×3 conv, SiLU, 2× average pool between blocks), global
/// average pooling and a linear head producing one logit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNetArch {
    pub image_side: usize,
    pub channels: Vec<usize>,
}

impl Default for ConvNetArch {
    fn default() -> Self {
        Self {
            image_side: 32,
            channels: vec![8, 16, 32, 32],
        }
    }
}

impl ConvNetArch {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::validation("conv net needs at least one block"));
        }
        let pools = self.channels.len() - 1;
        if !self.image_side.is_multiple_of(1 << pools) {
            return Err(Error::validation(format!(
                "image side {} not divisible by 2^{pools}",
                self.image_side
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvNet {
    arch: ConvNetArch,
    params: ParamStore,
    blocks: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

impl ConvNet {
    pub fn new(arch: ConvNetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (i, &c) in arch.channels.iter().enumerate() {
            let w = params.add_weight(&format!("block{i}.w"), &[c, cin, 3, 3], 1.4, &mut rng);
            let b = params.add_const(&format!("block{i}.b"), &[c], 0.0);
            blocks.push((w, b));
            cin = c;
        }
        let hw = params.add_weight("head.w", &[1, cin], 1.0, &mut rng);
        let hb = params.add_const("head.b", &[1], 0.0);
        Ok(Self {
            arch,
            params,
            blocks,
            head: (hw, hb),
        })
    }

    /// Rebuild the network around previously saved parameters.
    pub fn with_params(arch: ConvNetArch, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(arch, 0)?;
        net.params.check_layout(&params)?;
        net.params = params;
        Ok(net)
    }

    pub fn arch(&self) -> &ConvNetArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.arch.image_side;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape {
                expected: vec![shape.first().copied().unwrap_or(1), 1, s, s],
                got: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Logits `[n, 1]` for `x [n, 1, s, s]`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Var {
        let mut h = x;
        let last = self.blocks.len() - 1;
        for (i, &(w, b)) in self.blocks.iter().enumerate() {
            h = g.conv2d(h, p.var(w), p.var(b));
            h = g.silu(h);
            if i < last {
                h = g.avg_pool2(h);
            }
        }
        let pooled = g.global_avg_pool(h);
        g.linear(pooled, p.var(self.head.0), p.var(self.head.1))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let mut g = Graph::inference();
        let p = self.params.attach(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv);
        Ok(g.value(out).data().to_vec())
    }
}

/// Encoder/decoder with two resolution drops, skip concatenation and a
/// sinusoidal timestep embedding injected into every residual block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetArch {
    pub image_side: usize,
    pub base_channels: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        Self {
            image_side: 32,
            base_channels: 12,
            time_dim: 32,
            groups: 4,
        }
    }
}

impl UNetArch {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if !self.image_side.is_multiple_of(4) {
            return Err(Error::validation("U-Net image side must be divisible by 4"));
        }
        if self.groups == 0 || !c.is_multiple_of(self.groups) {
            return Err(Error::validation("U-Net base channels must be divisible by groups"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::validation("time embedding dim must be even"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    temb: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    skip: Option<(ParamId, ParamId)>,
}

impl ResBlock {
    fn new(
        params: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let norm = |params: &mut ParamStore, tag: &str, c: usize| {
            (
                params.add_const(&format!("{name}.{tag}.gamma"), &[c], 1.0),
                params.add_const(&format!("{name}.{tag}.beta"), &[c], 0.0),
            )
        };
        let norm1 = norm(params, "norm1", cin);
        let conv1 = (
            params.add_weight(&format!("{name}.conv1.w"), &[cout, cin, 3, 3], 1.0, rng),
            params.add_const(&format!("{name}.conv1.b"), &[cout], 0.0),
        );
        let temb = (
            params.add_weight(&format!("{name}.temb.w"), &[cout, temb_dim], 1.0, rng),
            params.add_const(&format!("{name}.temb.b"), &[cout], 0.0),
        );
        let norm2 = norm(params, "norm2", cout);
        let conv2 = (
            params.add_weight(&format!("{name}.conv2.w"), &[cout, cout, 3, 3], 0.5, rng),
            params.add_const(&format!("{name}.conv2.b"), &[cout], 0.0),
        );
        let skip = (cin != cout).then(|| {
            (
                params.add_weight(&format!("{name}.skip.w"), &[cout, cin, 1, 1], 1.0, rng),
                params.add_const(&format!("{name}.skip.b"), &[cout], 0.0),
            )
        });
        Self {
            norm1,
            conv1,
            temb,
            norm2,
            conv2,
            skip,
        }
    }

    fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var, temb_act: Var, groups: usize) -> Var {
        let h = g.group_norm(x, p.var(self.norm1.0), p.var(self.norm1.1), groups);
        let h = g.silu(h);
        let h = g.conv2d(h, p.var(self.conv1.0), p.var(self.conv1.1));
        let t = g.linear(temb_act, p.var(self.temb.0), p.var(self.temb.1));
        let h = g.add_channel(h, t);
        let h = g.group_norm(h, p.var(self.norm2.0), p.var(self.norm2.1), groups);
        let h = g.silu(h);
        let h = g.conv2d(h, p.var(self.conv2.0), p.var(self.conv2.1));
        let skip = match self.skip {
            Some((w, b)) => g.conv2d(x, p.var(w), p.var(b)),
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    arch: UNetArch,
    params: ParamStore,
    time_mlp: [(ParamId, ParamId); 2],
    conv_in: (ParamId, ParamId),
    enc1: ResBlock,
    enc2: ResBlock,
    mid: ResBlock,
    dec2: ResBlock,
    dec1: ResBlock,
    norm_out: (ParamId, ParamId),
    conv_out: (ParamId, ParamId),
}

impl UNet {
    pub fn new(arch: UNetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = arch.base_channels;
        let td = arch.time_dim;
        let temb_dim = 2 * td;
        let time_mlp = [
            (
                params.add_weight("time.0.w", &[temb_dim, td], 1.0, &mut rng),
                params.add_const("time.0.b", &[temb_dim], 0.0),
            ),
            (
                params.add_weight("time.1.w", &[temb_dim, temb_dim], 1.0, &mut rng),
                params.add_const("time.1.b", &[temb_dim], 0.0),
            ),
        ];
        let conv_in = (
            params.add_weight("in.w", &[c, 1, 3, 3], 1.0, &mut rng),
            params.add_const("in.b", &[c], 0.0),
        );
        let enc1 = ResBlock::new(&mut params, "enc1", c, c, temb_dim, &mut rng);
        let enc2 = ResBlock::new(&mut params, "enc2", c, 2 * c, temb_dim, &mut rng);
        let mid = ResBlock::new(&mut params, "mid", 2 * c, 2 * c, temb_dim, &mut rng);
        let dec2 = ResBlock::new(&mut params, "dec2", 4 * c, 2 * c, temb_dim, &mut rng);
        let dec1 = ResBlock::new(&mut params, "dec1", 3 * c, c, temb_dim, &mut rng);
        let norm_out = (
            params.add_const("out.gamma", &[c], 1.0),
            params.add_const("out.beta", &[c], 0.0),
        );
        let conv_out = (
            params.add_weight("out.w", &[1, c, 3, 3], 0.1, &mut rng),
            params.add_const("out.b", &[1], 0.0),
        );
        Ok(Self {
            arch,
            params,
            time_mlp,
            conv_in,
            enc1,
            enc2,
            mid,
            dec2,
            dec1,
            norm_out,
            conv_out,
        })
    }

    pub fn with_params(arch: UNetArch, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(arch, 0)?;
        net.params.check_layout(&params)?;
        net.params = params;
        Ok(net)
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sinusoidal features `[n, time_dim]` of integer timesteps.
    pub fn time_features(&self, steps: &[usize]) -> Tensor {
        let half = self.arch.time_dim / 2;
        let mut data = Vec::with_capacity(steps.len() * 2 * half);
        for &t in steps {
            for i in 0..half {
                let freq = (-(10_000f32.ln()) * i as f32 / half as f32).exp();
                data.push((t as f32 * freq).sin());
            }
            for i in 0..half {
                let freq = (-(10_000f32.ln()) * i as f32 / half as f32).exp();
                data.push((t as f32 * freq).cos());
            }
        }
        Tensor::from_vec(&[steps.len(), 2 * half], data).expect("time feature size")
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var, steps: &[usize]) -> Var {
        let groups = self.arch.groups;
        let tf = g.constant(self.time_features(steps));
        let t = g.linear(tf, p.var(self.time_mlp[0].0), p.var(self.time_mlp[0].1));
        let t = g.silu(t);
        let t = g.linear(t, p.var(self.time_mlp[1].0), p.var(self.time_mlp[1].1));
        let temb = g.silu(t);

        let h0 = g.conv2d(x, p.var(self.conv_in.0), p.var(self.conv_in.1));
        let e1 = self.enc1.forward(g, p, h0, temb, groups);
        let d = g.avg_pool2(e1);
        let e2 = self.enc2.forward(g, p, d, temb, groups);
        let d = g.avg_pool2(e2);
        let m = self.mid.forward(g, p, d, temb, groups);
        let u = g.upsample2(m);
        let u = g.concat(u, e2);
        let u = self.dec2.forward(g, p, u, temb, groups);
        let u = g.upsample2(u);
        let u = g.concat(u, e1);
        let u = self.dec1.forward(g, p, u, temb, groups);
        let u = g.group_norm(u, p.var(self.norm_out.0), p.var(self.norm_out.1), groups);
        let u = g.silu(u);
        g.conv2d(u, p.var(self.conv_out.0), p.var(self.conv_out.1))
    }

    /// Noise prediction for a batch `x [n, 1, s, s]` at per-sample timesteps.
    pub fn predict(&self, x: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let s = self.arch.image_side;
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s || shape[0] != steps.len() {
            return Err(Error::Shape {
                expected: vec![steps.len(), 1, s, s],
                got: shape.to_vec(),
            });
        }
        let mut g = Graph::inference();
        let p = self.params.attach(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv, steps);
        Ok(g.value(out).clone())
    }
}
