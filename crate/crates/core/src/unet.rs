//! Time-conditional U-Net used as the frozen base noise predictor and, with
//! a zero-initialized two-way output head, as the conditioning module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::{
    add_channel_bias, attention2d, avg_pool2, conv2d, group_norm, linear, nearest_upsample2, silu,
    sinusoidal_time_embedding, AttentionWeights,
};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Spatial extents at which self-attention is inserted.
    pub attention_resolutions: Vec<usize>,
    /// 1 for a noise predictor, 2 for a `(gamma, nu)` split head.
    pub out_heads: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub image_size: usize,
}

impl UNetConfig {
    /// Frozen base model for 32x32 RGB.
    pub fn base_default() -> Self {
        UNetConfig {
            in_channels: 3,
            out_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 4],
            res_blocks_per_level: 2,
            attention_resolutions: vec![16],
            out_heads: 1,
            time_embed_dim: 128,
            norm_groups: 8,
            image_size: 32,
        }
    }

    /// Conditioning module reading `{x_t, eps_t, seg, sketch}` (8 channels).
    pub fn mcm_default() -> Self {
        UNetConfig {
            in_channels: 8,
            out_channels: 3,
            base_channels: 16,
            channel_multipliers: vec![1, 1, 2],
            res_blocks_per_level: 2,
            attention_resolutions: vec![16],
            out_heads: 2,
            time_embed_dim: 64,
            norm_groups: 8,
            image_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad(format!("channel multipliers must be nonempty and >= 1: {:?}", self.channel_multipliers));
        }
        if !(self.out_heads == 1 || self.out_heads == 2) {
            return bad(format!("out_heads must be 1 or 2, got {}", self.out_heads));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.time_embed_dim == 0 {
            return bad("time_embed_dim must be positive".into());
        }
        if self.base_channels % 2 != 0 {
            return bad("base_channels must be even (sinusoidal embedding width)".into());
        }
        let levels = self.channel_multipliers.len();
        if self.image_size == 0 || self.image_size % (1 << (levels - 1)) != 0 {
            return bad(format!("image size {} not divisible by 2^{}", self.image_size, levels - 1));
        }
        for &m in &self.channel_multipliers {
            if (self.base_channels * m) % self.norm_groups != 0 {
                return bad(format!("norm groups {} do not divide {} channels", self.norm_groups, self.base_channels * m));
            }
        }
        if self.base_channels % self.norm_groups != 0 {
            return bad("norm groups must divide base channels".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ResBlockIds {
    norm1: NormIds,
    conv1: ConvIds,
    temb: ConvIds,
    norm2: NormIds,
    conv2: ConvIds,
    skip: Option<ConvIds>,
}

#[derive(Debug, Clone)]
struct AttnIds {
    norm: NormIds,
    q: ConvIds,
    k: ConvIds,
    v: ConvIds,
    o: ConvIds,
}

#[derive(Debug, Clone)]
struct Block {
    res: ResBlockIds,
    attn: Option<AttnIds>,
}

#[derive(Debug, Clone)]
struct Layout {
    temb1: ConvIds,
    temb2: ConvIds,
    conv_in: ConvIds,
    down: Vec<Vec<Block>>,
    mid: (ResBlockIds, AttnIds, ResBlockIds),
    up: Vec<(Vec<Block>, Option<ConvIds>)>,
    out_norm: NormIds,
    heads: Vec<ConvIds>,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// Kaiming-uniform with `a = sqrt(5)`: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::rand_uniform(shape, -bound, bound, &mut self.rng);
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvIds> {
        Ok(ConvIds {
            w: self.weight(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k)?,
            b: self.zeros(format!("{name}.bias"), &[cout])?,
        })
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvIds> {
        Ok(ConvIds {
            w: self.zeros(format!("{name}.weight"), &[cout, cin, k, k])?,
            b: self.zeros(format!("{name}.bias"), &[cout])?,
        })
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Result<ConvIds> {
        Ok(ConvIds {
            w: self.weight(format!("{name}.weight"), &[fout, fin], fin)?,
            b: self.zeros(format!("{name}.bias"), &[fout])?,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<NormIds> {
        Ok(NormIds {
            g: self.store.add(format!("{name}.gain"), Tensor::ones(&[c]))?,
            b: self.zeros(format!("{name}.bias"), &[c])?,
        })
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, tdim: usize) -> Result<ResBlockIds> {
        Ok(ResBlockIds {
            norm1: self.norm(&format!("{name}.norm1"), cin)?,
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3)?,
            temb: self.linear(&format!("{name}.temb"), tdim, cout)?,
            norm2: self.norm(&format!("{name}.norm2"), cout)?,
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3)?,
            skip: if cin != cout { Some(self.conv(&format!("{name}.skip"), cin, cout, 1)?) } else { None },
        })
    }

    fn attn(&mut self, name: &str, c: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            norm: self.norm(&format!("{name}.norm"), c)?,
            q: self.conv(&format!("{name}.q"), c, c, 1)?,
            k: self.conv(&format!("{name}.k"), c, c, 1)?,
            v: self.conv(&format!("{name}.v"), c, c, 1)?,
            o: self.conv(&format!("{name}.proj"), c, c, 1)?,
        })
    }
}

/// Network weights plus the structural layout that addresses them.
#[derive(Debug, Clone)]
pub struct UNet<T: Scalar> {
    cfg: UNetConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> UNet<T> {
    /// Deterministic initialization from `seed`. With two output heads both
    /// head convolutions start at exactly zero.
    pub fn build(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed) };
        let ch = cfg.base_channels;
        let tdim = cfg.time_embed_dim;
        let temb1 = b.linear("time_embed.0", ch, tdim)?;
        let temb2 = b.linear("time_embed.1", tdim, tdim)?;
        let conv_in = b.conv("conv_in", cfg.in_channels, ch, 3)?;

        let levels = cfg.channel_multipliers.len();
        let mut skip_channels = vec![ch];
        let mut cur = ch;
        let mut res = cfg.image_size;
        let mut down = Vec::with_capacity(levels);
        for (i, &m) in cfg.channel_multipliers.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..cfg.res_blocks_per_level {
                let name = format!("down.{i}.{j}");
                let r = b.res_block(&name, cur, ch * m, tdim)?;
                cur = ch * m;
                let attn = if cfg.attention_resolutions.contains(&res) {
                    Some(b.attn(&format!("{name}.attn"), cur)?)
                } else {
                    None
                };
                blocks.push(Block { res: r, attn });
                skip_channels.push(cur);
            }
            if i + 1 != levels {
                res /= 2;
                skip_channels.push(cur);
            }
            down.push(blocks);
        }
        let mid = (b.res_block("mid.0", cur, cur, tdim)?, b.attn("mid.attn", cur)?, b.res_block("mid.1", cur, cur, tdim)?);

        let mut up = Vec::with_capacity(levels);
        for (i, &m) in cfg.channel_multipliers.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for j in 0..=cfg.res_blocks_per_level {
                let name = format!("up.{i}.{j}");
                let skip = skip_channels.pop().expect("skip stack balanced");
                let r = b.res_block(&name, cur + skip, ch * m, tdim)?;
                cur = ch * m;
                let attn = if cfg.attention_resolutions.contains(&res) {
                    Some(b.attn(&format!("{name}.attn"), cur)?)
                } else {
                    None
                };
                blocks.push(Block { res: r, attn });
            }
            let upsample = if i != 0 {
                res *= 2;
                Some(b.conv(&format!("up.{i}.upsample"), cur, cur, 3)?)
            } else {
                None
            };
            up.push((blocks, upsample));
        }
        debug_assert!(skip_channels.is_empty());
        let out_norm = b.norm("out.norm", cur)?;
        let heads = if cfg.out_heads == 1 {
            vec![b.conv("out.conv", cur, cfg.out_channels, 3)?]
        } else {
            vec![
                b.zero_conv("out.gamma", cur, cfg.out_channels, 3)?,
                b.zero_conv("out.nu", cur, cfg.out_channels, 3)?,
            ]
        };
        let layout = Layout { temb1, temb2, conv_in, down, mid, up, out_norm, heads };
        Ok(UNet { cfg: cfg.clone(), params: store, layout })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.all_frozen()
    }

    /// Names of the output-head parameters.
    pub fn head_parameter_names(&self) -> Vec<String> {
        self.layout
            .heads
            .iter()
            .flat_map(|h| [h.w, h.b])
            .map(|id| self.params.get(id).name.clone())
            .collect()
    }

    fn v(&self, id: ParamId) -> Var<T> {
        self.params.var(id)
    }

    fn norm_act(&self, x: &Var<T>, n: &NormIds) -> Result<Var<T>> {
        silu(&group_norm(x, self.cfg.norm_groups, &self.v(n.g), &self.v(n.b))?)
    }

    fn conv3(&self, x: &Var<T>, c: &ConvIds) -> Result<Var<T>> {
        conv2d(x, &self.v(c.w), Some(&self.v(c.b)), 1, 1)
    }

    fn res_block(&self, x: &Var<T>, temb_act: &Var<T>, r: &ResBlockIds) -> Result<Var<T>> {
        let h = self.conv3(&self.norm_act(x, &r.norm1)?, &r.conv1)?;
        let t = linear(temb_act, &self.v(r.temb.w), Some(&self.v(r.temb.b)))?;
        let h = add_channel_bias(&h, &t)?;
        let h = self.conv3(&self.norm_act(&h, &r.norm2)?, &r.conv2)?;
        let skip = match &r.skip {
            Some(s) => conv2d(x, &self.v(s.w), Some(&self.v(s.b)), 1, 0)?,
            None => x.clone(),
        };
        skip.add(&h)
    }

    fn attn(&self, x: &Var<T>, a: &AttnIds) -> Result<Var<T>> {
        let h = group_norm(x, self.cfg.norm_groups, &self.v(a.norm.g), &self.v(a.norm.b))?;
        let vars: Vec<Var<T>> = [&a.q, &a.k, &a.v, &a.o].iter().flat_map(|c| [self.v(c.w), self.v(c.b)]).collect();
        let w = AttentionWeights {
            wq: &vars[0],
            bq: &vars[1],
            wk: &vars[2],
            bk: &vars[3],
            wv: &vars[4],
            bv: &vars[5],
            wo: &vars[6],
            bo: &vars[7],
        };
        x.add(&attention2d(&h, &w)?)
    }

    fn block(&self, x: &Var<T>, temb: &Var<T>, b: &Block) -> Result<Var<T>> {
        let h = self.res_block(x, temb, &b.res)?;
        match &b.attn {
            Some(a) => self.attn(&h, a),
            None => Ok(h),
        }
    }

    /// Raw forward pass: one output tensor per head.
    pub fn forward(&self, x: &Var<T>, ts: &[usize]) -> Result<Vec<Var<T>>> {
        let shape = x.shape();
        let cfg = &self.cfg;
        if shape.len() != 4 || shape[1] != cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "unet input",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), cfg.in_channels, cfg.image_size, cfg.image_size],
            });
        }
        if shape[2] != cfg.image_size || shape[3] != cfg.image_size {
            return Err(Error::InvalidArgument(format!(
                "spatial extent {}x{} does not match configured {}",
                shape[2], shape[3], cfg.image_size
            )));
        }
        if ts.len() != shape[0] {
            return Err(Error::InvalidArgument(format!("{} timesteps for batch of {}", ts.len(), shape[0])));
        }
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let emb = Var::constant(sinusoidal_time_embedding::<T>(&tf, cfg.base_channels)?);
        let l = &self.layout;
        let temb = linear(&emb, &self.v(l.temb1.w), Some(&self.v(l.temb1.b)))?;
        let temb = linear(&silu(&temb)?, &self.v(l.temb2.w), Some(&self.v(l.temb2.b)))?;
        let temb_act = silu(&temb)?;

        let mut h = self.conv3(x, &l.conv_in)?;
        let mut skips = vec![h.clone()];
        let levels = l.down.len();
        for (i, blocks) in l.down.iter().enumerate() {
            for b in blocks {
                h = self.block(&h, &temb_act, b)?;
                skips.push(h.clone());
            }
            if i + 1 != levels {
                h = avg_pool2(&h)?;
                skips.push(h.clone());
            }
        }
        h = self.res_block(&h, &temb_act, &l.mid.0)?;
        h = self.attn(&h, &l.mid.1)?;
        h = self.res_block(&h, &temb_act, &l.mid.2)?;
        for (blocks, upsample) in &l.up {
            for b in blocks {
                let s = skips.pop().expect("skip stack balanced");
                h = Var::concat1(&[&h, &s])?;
                h = self.block(&h, &temb_act, b)?;
            }
            if let Some(u) = upsample {
                h = self.conv3(&nearest_upsample2(&h)?, u)?;
            }
        }
        let h = self.norm_act(&h, &l.out_norm)?;
        l.heads.iter().map(|c| self.conv3(&h, c)).collect()
    }
}
