use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_batch, Denoiser};
use crate::error::{DdadError, Result};
use crate::image::ImageTensor;
use crate::nn::{Conv2d, Graph, GroupNorm, Linear, ParamStore, Scalar, Tensor, Var};
use crate::schedule::ScheduleConfig;

/// Architecture hyper-parameters. Serialised into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; one 2x downsample between
    /// consecutive levels.
    pub channel_mults: Vec<usize>,
    pub num_res_blocks: usize,
    /// Number of attention sites, filled from the lowest resolution upward
    /// (middle block first, then the deepest level on both paths, ...).
    pub attention_layers: usize,
    pub groups: usize,
    /// Width of the timestep embedding. `0` means `4 * base_channels`.
    #[serde(default)]
    pub time_embed_dim: usize,
    /// 1 or 2. With 2 the image is space-to-depth folded before the first
    /// convolution, quartering the spatial work.
    #[serde(default = "one")]
    pub patch_size: usize,
}

fn one() -> usize {
    1
}

impl UNetConfig {
    /// Full-scale network (base 64, four levels, 4 attention sites).
    pub fn full() -> Self {
        Self {
            in_channels: 3,
            base_channels: 64,
            channel_mults: vec![1, 2, 3, 4],
            num_res_blocks: 2,
            attention_layers: 4,
            groups: 32,
            time_embed_dim: 0,
            patch_size: 1,
        }
    }

    /// Reduced network (base 32, three levels, 2 attention sites).
    pub fn small() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            num_res_blocks: 1,
            attention_layers: 2,
            groups: 8,
            ..Self::full()
        }
    }

    /// Desk-sized network for CPU runs on 64x64 synthetic data.
    pub fn desk() -> Self {
        Self {
            base_channels: 24,
            channel_mults: vec![1, 2, 2],
            num_res_blocks: 1,
            attention_layers: 1,
            groups: 8,
            patch_size: 2,
            ..Self::full()
        }
    }

    /// A few hundred parameters; for gradient checks.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            base_channels: 2,
            channel_mults: vec![1],
            num_res_blocks: 1,
            attention_layers: 1,
            groups: 1,
            time_embed_dim: 4,
            patch_size: 1,
        }
    }

    fn embed_dim(&self) -> usize {
        if self.time_embed_dim == 0 { 4 * self.base_channels } else { self.time_embed_dim }
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        self.patch_size << (self.channel_mults.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DdadError::InvalidConfig(m));
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("channel_mults must be non-empty and positive".into());
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return bad(format!("base_channels must be even and positive, got {}", self.base_channels));
        }
        if !matches!(self.patch_size, 1 | 2) {
            return bad(format!("patch_size must be 1 or 2, got {}", self.patch_size));
        }
        for &m in &self.channel_mults {
            if (m * self.base_channels) % self.groups != 0 {
                return bad(format!("{} channels not divisible into {} groups", m * self.base_channels, self.groups));
            }
        }
        let sites = 1 + 2 * self.channel_mults.len();
        if self.attention_layers > sites {
            return bad(format!("at most {sites} attention sites for this depth, got {}", self.attention_layers));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        temb: usize,
        groups: usize,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups.min(cin)),
            conv1: Conv2d::same3(store, rng, &format!("{name}.conv1"), cin, cout),
            time: Linear::new(store, rng, &format!("{name}.time"), temb, cout),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups.min(cout)),
            conv2: Conv2d::same3(store, rng, &format!("{name}.conv2"), cout, cout).zeroed(store),
            skip: (cin != cout).then(|| Conv2d::pointwise(store, rng, &format!("{name}.skip"), cin, cout)),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, h);
        let t = self.time.forward(g, temb);
        let h = g.add_channel(h, t);
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, x),
            None => x,
        };
        g.add(s, h)
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttnBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize, groups: usize) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), c, groups.min(c)),
            q: Conv2d::pointwise(store, rng, &format!("{name}.q"), c, c),
            k: Conv2d::pointwise(store, rng, &format!("{name}.k"), c, c),
            v: Conv2d::pointwise(store, rng, &format!("{name}.v"), c, c),
            proj: Conv2d::pointwise(store, rng, &format!("{name}.proj"), c, c).zeroed(store),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.norm.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let o = g.attention(q, k, v);
        let o = self.proj.forward(g, o);
        g.add(x, o)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

impl Stage {
    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> Var {
        let h = self.res.forward(g, x, temb);
        match &self.attn {
            Some(a) => a.forward(g, h),
            None => h,
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Vec<Stage>>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid2: ResBlock,
    up: Vec<Vec<Stage>>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Which attention sites are enabled: (middle, per-level down, per-level up).
fn attention_sites(levels: usize, count: usize) -> (bool, Vec<bool>, Vec<bool>) {
    let mut down = vec![false; levels];
    let mut up = vec![false; levels];
    let mid = count >= 1;
    let mut left = count.saturating_sub(1);
    for level in (0..levels).rev() {
        for site in [&mut down[level], &mut up[level]] {
            if left > 0 {
                *site = true;
                left -= 1;
            }
        }
    }
    (mid, down, up)
}

/// ADM-style U-Net noise predictor bound to one variance schedule.
#[derive(Clone, Debug)]
pub struct UNetDenoiser<T: Scalar = f32> {
    config: UNetConfig,
    schedule: ScheduleConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// The trained denoiser used by the pipeline.
pub type DenoiserModel = UNetDenoiser<f32>;

impl<T: Scalar> UNetDenoiser<T> {
    pub fn new(config: UNetConfig, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;
        let b = config.base_channels;
        let temb = config.embed_dim();
        let groups = config.groups;
        let levels = config.channel_mults.len();
        let (mid_attn, down_attn, up_attn) = attention_sites(levels, config.attention_layers);
        let img_c = config.in_channels * config.patch_size * config.patch_size;

        let time1 = Linear::new(s, r, "time.0", b, temb);
        let time2 = Linear::new(s, r, "time.1", temb, temb);
        let conv_in = Conv2d::same3(s, r, "conv_in", img_c, b);

        let mut skip_ch = vec![b];
        let mut ch = b;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for (level, &m) in config.channel_mults.iter().enumerate() {
            let out = b * m;
            let mut stages = Vec::new();
            for i in 0..config.num_res_blocks {
                let name = format!("down.{level}.{i}");
                let res = ResBlock::new(s, r, &name, ch, out, temb, groups);
                let attn = down_attn[level].then(|| AttnBlock::new(s, r, &format!("{name}.attn"), out, groups));
                stages.push(Stage { res, attn });
                ch = out;
                skip_ch.push(ch);
            }
            down.push(stages);
            if level + 1 < levels {
                downsample.push(Conv2d::new(s, r, &format!("down.{level}.sample"), ch, ch, 3, 2, 1));
                skip_ch.push(ch);
            }
        }

        let mid1 = ResBlock::new(s, r, "mid.0", ch, ch, temb, groups);
        let mid_attn = mid_attn.then(|| AttnBlock::new(s, r, "mid.attn", ch, groups));
        let mid2 = ResBlock::new(s, r, "mid.1", ch, ch, temb, groups);

        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for (level, &m) in config.channel_mults.iter().enumerate().rev() {
            let out = b * m;
            let mut stages = Vec::new();
            for i in 0..=config.num_res_blocks {
                let name = format!("up.{level}.{i}");
                let cin = ch + skip_ch.pop().expect("skip channels balanced");
                let res = ResBlock::new(s, r, &name, cin, out, temb, groups);
                let attn = up_attn[level].then(|| AttnBlock::new(s, r, &format!("{name}.attn"), out, groups));
                stages.push(Stage { res, attn });
                ch = out;
            }
            up.push(stages);
            if level > 0 {
                upsample.push(Conv2d::same3(s, r, &format!("up.{level}.sample"), ch, ch));
            }
        }
        debug_assert!(skip_ch.is_empty());

        let norm_out = GroupNorm::new(s, "norm_out", ch, groups.min(ch));
        let conv_out = Conv2d::same3(s, r, "conv_out", ch, img_c).zeroed(s);

        let layout = Layout {
            time1,
            time2,
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upsample,
            norm_out,
            conv_out,
        };
        Ok(Self { config, schedule, params: store, layout })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.schedule
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

    /// Same architecture with parameters cast to another precision.
    pub fn cast<U: Scalar>(&self) -> UNetDenoiser<U> {
        UNetDenoiser {
            config: self.config.clone(),
            schedule: self.schedule,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Sinusoidal embedding of the raw timestep values, `[N, base_channels]`.
    fn timestep_features(&self, t: &[usize]) -> Tensor<T> {
        let dim = self.config.base_channels;
        let half = dim / 2;
        let mut data = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            let mut row = vec![0.0f64; dim];
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
                row[i] = (ti as f64 * freq).cos();
                row[half + i] = (ti as f64 * freq).sin();
            }
            data.extend(row.into_iter().map(T::from_f64_lossy));
        }
        Tensor::new(vec![t.len(), dim], data)
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let m = self.config.size_multiple();
        if c != self.config.in_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(DdadError::InvalidConfig(format!(
                "input {c}x{h}x{w} incompatible with the network ({} channels, sides divisible by {m})",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Records the network on `g`. `x` is `[N, C, H, W]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Var, t: &[usize]) -> Var {
        let l = &self.layout;
        let tf = g.input(self.timestep_features(t));
        let temb = l.time1.forward(g, tf);
        let temb = g.silu(temb);
        let temb = l.time2.forward(g, temb);
        let temb = g.silu(temb);

        let mut h = if self.config.patch_size == 2 { g.pixel_unshuffle(x) } else { x };
        h = l.conv_in.forward(g, h);
        let mut skips = vec![h];
        for (level, stages) in l.down.iter().enumerate() {
            for stage in stages {
                h = stage.forward(g, h, temb);
                skips.push(h);
            }
            if let Some(ds) = l.downsample.get(level) {
                h = ds.forward(g, h);
                skips.push(h);
            }
        }

        h = l.mid1.forward(g, h, temb);
        if let Some(a) = &l.mid_attn {
            h = a.forward(g, h);
        }
        h = l.mid2.forward(g, h, temb);

        for (i, stages) in l.up.iter().enumerate() {
            for stage in stages {
                let s = skips.pop().expect("skip balanced");
                h = g.concat(h, s);
                h = stage.forward(g, h, temb);
            }
            if let Some(us) = l.upsample.get(i) {
                h = g.upsample2x(h);
                h = us.forward(g, h);
            }
        }

        h = l.norm_out.forward(g, h);
        h = g.silu(h);
        h = l.conv_out.forward(g, h);
        if self.config.patch_size == 2 { g.pixel_shuffle(h) } else { h }
    }

    /// Inference on an engine tensor batch.
    pub fn predict_tensor(&self, x: Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        self.check_input(&x.shape)?;
        let mut g = Graph::inference(&self.params);
        let xv = g.input(x);
        let out = self.forward(&mut g, xv, t);
        Ok(g.take_value(out))
    }
}

/// Images per forward pass at inference; bounds peak memory.
const INFERENCE_CHUNK: usize = 8;

impl<T: Scalar> Denoiser for UNetDenoiser<T> {
    fn timesteps(&self) -> usize {
        self.schedule.timesteps
    }

    fn predict_noise_batch(&self, x_t: &[ImageTensor], t: &[usize]) -> Result<Vec<ImageTensor>> {
        check_batch(x_t, t, self.timesteps())?;
        let mut out = Vec::with_capacity(x_t.len());
        for (xs, ts) in x_t.chunks(INFERENCE_CHUNK).zip(t.chunks(INFERENCE_CHUNK)) {
            let y = self.predict_tensor(ImageTensor::batch_to_engine(xs), ts)?;
            out.extend(ImageTensor::batch_from_engine(&y));
        }
        Ok(out)
    }
}
