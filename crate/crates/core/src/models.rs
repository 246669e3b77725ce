//! Generators and discriminator.
//!
//! All networks take `[N, 1, H, W]` tensors. Spectral models use only
//! vertical filters, so the columns of a fringe B-scan (its A-scans) are
//! processed independently; the per-column discriminator scores every
//! A-scan separately and averages the scores of each image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array2;
use crate::autodiff::layers::{BatchNorm, Conv2d, Dense, Prelu};
use crate::autodiff::{Ctx, Graph, Mode, ParamSet, Precision, Tensor, Var};
use crate::error::{Error, Result};

/// Slope of the discriminator's leaky activations.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Input range tolerance of the generators.
pub const RANGE_TOL: f64 = 1e-6;

/// A network that owns its parameters.
pub trait Network: Send + Sync {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var>;

    /// Inference-mode forward pass with frozen parameters.
    fn infer(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        let mut g = Graph::new(precision);
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, self.params(), Mode::Infer, false);
        let y = self.forward(&mut ctx, xv)?;
        drop(ctx);
        Ok(g.value(y).clone())
    }
}

fn check_range(g: &Graph, x: Var) -> Result<()> {
    if let Some(v) = g.value(x).data().iter().find(|v| !(v.abs() <= 1.0 + RANGE_TOL)) {
        return Err(Error::domain(format!("generator input {v} outside [-1, 1]")));
    }
    Ok(())
}

fn check_kernel(kernel: (usize, usize)) -> Result<()> {
    if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
        return Err(Error::domain(format!("kernel {kernel:?} must have odd extents")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrganGeneratorConfig {
    pub n_res_blocks: usize,
    pub channels: usize,
    /// `(height, width)`; `(k, 1)` filters along depth only.
    pub kernel: (usize, usize),
}

impl Default for SrganGeneratorConfig {
    fn default() -> Self {
        Self {
            n_res_blocks: 8,
            channels: 64,
            kernel: (3, 3),
        }
    }
}

impl SrganGeneratorConfig {
    pub fn desk() -> Self {
        Self {
            n_res_blocks: 4,
            channels: 16,
            kernel: (3, 1),
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    act: Prelu,
    conv2: Conv2d,
    bn2: BatchNorm,
}

/// Residual-block generator without upsampling; output has the input shape.
#[derive(Debug, Clone)]
pub struct SrganGenerator {
    config: SrganGeneratorConfig,
    params: ParamSet,
    head: Conv2d,
    head_act: Prelu,
    blocks: Vec<ResBlock>,
    post: Conv2d,
    post_bn: BatchNorm,
    tail: Conv2d,
}

impl SrganGenerator {
    pub fn new(config: SrganGeneratorConfig, seed: u64) -> Result<Self> {
        if config.n_res_blocks == 0 || config.channels == 0 {
            return Err(Error::domain("generator needs at least one block and one channel"));
        }
        check_kernel(config.kernel)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (c, k) = (config.channels, config.kernel);
        let head = Conv2d::new(&mut ps, "g.head", 1, c, k, (1, 1), (1, 1), &mut rng);
        let head_act = Prelu::new(&mut ps, "g.head.act", c);
        let blocks = (0..config.n_res_blocks)
            .map(|i| {
                let n = format!("g.res{i}");
                ResBlock {
                    conv1: Conv2d::new(&mut ps, &format!("{n}.conv1"), c, c, k, (1, 1), (1, 1), &mut rng),
                    bn1: BatchNorm::new(&mut ps, &format!("{n}.bn1"), c),
                    act: Prelu::new(&mut ps, &format!("{n}.act"), c),
                    conv2: Conv2d::new(&mut ps, &format!("{n}.conv2"), c, c, k, (1, 1), (1, 1), &mut rng),
                    bn2: BatchNorm::new(&mut ps, &format!("{n}.bn2"), c),
                }
            })
            .collect();
        let post = Conv2d::new(&mut ps, "g.post", c, c, k, (1, 1), (1, 1), &mut rng);
        let post_bn = BatchNorm::new(&mut ps, "g.post.bn", c);
        let tail = Conv2d::new(&mut ps, "g.tail", c, 1, k, (1, 1), (1, 1), &mut rng);
        Ok(Self {
            config,
            params: ps,
            head,
            head_act,
            blocks,
            post,
            post_bn,
            tail,
        })
    }

    pub fn config(&self) -> &SrganGeneratorConfig {
        &self.config
    }
}

impl Network for SrganGenerator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        check_range(ctx.graph, x)?;
        let h = self.head.forward(ctx, x)?;
        let h = self.head_act.forward(ctx, h)?;
        let mut y = h;
        for b in &self.blocks {
            let r = b.conv1.forward(ctx, y)?;
            let r = b.bn1.forward(ctx, r)?;
            let r = b.act.forward(ctx, r)?;
            let r = b.conv2.forward(ctx, r)?;
            let r = b.bn2.forward(ctx, r)?;
            y = ctx.graph.add(y, r)?;
        }
        let p = self.post.forward(ctx, y)?;
        let p = self.post_bn.forward(ctx, p)?;
        let p = ctx.graph.add(p, h)?;
        let out = self.tail.forward(ctx, p)?;
        Ok(ctx.graph.tanh(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    /// `(channels, in_shape)` of the images, i.e. `(C, H, W)`.
    pub input_shape: (usize, usize, usize),
    /// `(out_channels, stride)` per conv block.
    pub conv_blocks: Vec<(usize, (usize, usize))>,
    pub kernel: (usize, usize),
    pub dense_units: usize,
    /// Score each column of the input on its own and average the column
    /// probabilities per image. `input_shape` is then the shape of one
    /// column, `(C, H, 1)`, and images of any width are accepted.
    pub per_column: bool,
}

impl DiscriminatorConfig {
    /// Six blocks doubling channels from `base` at every strided block.
    pub fn vgg_style(input_shape: (usize, usize, usize), base: usize, kernel: (usize, usize), vertical_only: bool) -> Self {
        let s = if vertical_only { (2, 1) } else { (2, 2) };
        let conv_blocks = vec![
            (base, (1, 1)),
            (base, s),
            (base * 2, (1, 1)),
            (base * 2, s),
            (base * 4, (1, 1)),
            (base * 4, s),
        ];
        Self {
            input_shape,
            conv_blocks,
            kernel,
            dense_units: base * 4,
            per_column: false,
        }
    }

    /// Every block strided, doubling channels each time.
    pub fn light(
        input_shape: (usize, usize, usize),
        base: usize,
        n_blocks: usize,
        kernel: (usize, usize),
        vertical_only: bool,
    ) -> Self {
        let s = if vertical_only { (2, 1) } else { (2, 2) };
        Self {
            input_shape,
            conv_blocks: (0..n_blocks).map(|i| (base << i, s)).collect(),
            kernel,
            dense_units: base * 2,
            per_column: false,
        }
    }

    /// A 1-D classifier of single A-scans of length `len`.
    pub fn ascan(len: usize, base: usize, n_blocks: usize, kernel_len: usize) -> Self {
        Self {
            per_column: true,
            ..Self::light((1, len, 1), base, n_blocks, (kernel_len, 1), true)
        }
    }

    /// Spatial size after the conv stack.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let (mut c, mut h, mut w) = self.input_shape;
        for &(ch, (sh, sw)) in &self.conv_blocks {
            // Same padding: ceil division.
            h = h.div_ceil(sh);
            w = w.div_ceil(sw);
            c = ch;
        }
        (c, h, w)
    }
}

#[derive(Debug, Clone)]
struct DiscBlock {
    conv: Conv2d,
    bn: Option<BatchNorm>,
}

/// VGG-style classifier: leaky conv blocks, dense head, sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    blocks: Vec<DiscBlock>,
    fc1: Dense,
    fc2: Dense,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        check_kernel(config.kernel)?;
        let (c0, h0, w0) = config.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 || config.dense_units == 0 {
            return Err(Error::domain("discriminator shapes must be positive"));
        }
        if config.per_column && w0 != 1 {
            return Err(Error::domain("a per-column discriminator takes width-1 inputs"));
        }
        if config.conv_blocks.is_empty()
            || !config.conv_blocks.iter().any(|&(_, (sh, sw))| sh > 1 || sw > 1)
            || config.conv_blocks.iter().any(|&(ch, (sh, sw))| ch == 0 || sh == 0 || sw == 0)
        {
            return Err(Error::domain("discriminator needs at least one strided block"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut in_ch = c0;
        let blocks = config
            .conv_blocks
            .iter()
            .enumerate()
            .map(|(i, &(ch, stride))| {
                let conv = Conv2d::new(&mut ps, &format!("d.conv{i}"), in_ch, ch, config.kernel, stride, (1, 1), &mut rng);
                let bn = (i > 0).then(|| BatchNorm::new(&mut ps, &format!("d.bn{i}"), ch));
                in_ch = ch;
                DiscBlock { conv, bn }
            })
            .collect();
        let (c, h, w) = config.feature_shape();
        let fc1 = Dense::new(&mut ps, "d.fc1", c * h * w, config.dense_units, &mut rng);
        let fc2 = Dense::new(&mut ps, "d.fc2", config.dense_units, 1, &mut rng);
        Ok(Self {
            config,
            params: ps,
            blocks,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }
}

impl Network for Discriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Probabilities of shape `[N, 1]`.
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut xs = ctx.graph.shape(x).to_vec();
        let (c, h, w) = self.config.input_shape;
        let fits = xs.len() == 4 && xs[1..3] == [c, h] && (self.config.per_column || xs[3] == w);
        if !fits {
            let w = if self.config.per_column { "W".to_string() } else { w.to_string() };
            return Err(Error::shape(format!(
                "discriminator expects [N, {c}, {h}, {w}], got {xs:?}"
            )));
        }
        let mut y = x;
        if self.config.per_column && xs[3] != 1 {
            y = ctx.graph.columns_to_batch(x)?;
            xs = ctx.graph.shape(y).to_vec();
        }
        for b in &self.blocks {
            y = b.conv.forward(ctx, y)?;
            if let Some(bn) = &b.bn {
                y = bn.forward(ctx, y)?;
            }
            y = ctx.graph.leaky_relu(y, LEAKY_SLOPE);
        }
        let (fc, fh, fw) = self.config.feature_shape();
        let y = ctx.graph.reshape(y, &[xs[0], fc * fh * fw])?;
        let y = self.fc1.forward(ctx, y)?;
        let y = ctx.graph.leaky_relu(y, LEAKY_SLOPE);
        let y = self.fc2.forward(ctx, y)?;
        let p = ctx.graph.sigmoid(y);
        let (n, cols) = (ctx.graph.shape(x)[0], ctx.graph.shape(x)[3]);
        if !self.config.per_column || cols == 1 {
            return Ok(p);
        }
        let p = ctx.graph.reshape(p, &[n, cols])?;
        let avg = ctx.graph.constant(Tensor::full(&[1, cols], 1.0 / cols as f64));
        let zero = ctx.graph.constant(Tensor::zeros(&[1]));
        ctx.graph.linear(p, avg, zero)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResUNetAConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Dilation rates per level, `depth + 1` entries (the last is the bridge).
    pub dilation_sets: Vec<Vec<usize>>,
    pub kernel_len: usize,
    /// Add the input to the tail output instead of squashing with tanh, so
    /// the network learns a correction to the degraded fringe. The tail
    /// starts at zero, so an untrained network is the identity.
    pub input_skip: bool,
}

pub const MAX_BRANCHES: usize = 8;

impl ResUNetAConfig {
    /// The rates `{1, 3, 15, 31}` on every level, keeping only those whose
    /// span `d·(k-1)` fits inside that level's feature length.
    pub fn with_default_dilations(depth: usize, base_channels: usize, kernel_len: usize, input_len: usize) -> Self {
        Self::truncated(depth, base_channels, kernel_len, input_len, &[1, 3, 15, 31])
    }

    pub fn truncated(depth: usize, base_channels: usize, kernel_len: usize, input_len: usize, rates: &[usize]) -> Self {
        let dilation_sets = (0..=depth)
            .map(|lvl| {
                let len = input_len >> lvl;
                let kept: Vec<usize> = rates
                    .iter()
                    .copied()
                    .filter(|&d| d * kernel_len.saturating_sub(1) < len.max(1))
                    .collect();
                if kept.is_empty() {
                    vec![1]
                } else {
                    kept
                }
            })
            .collect();
        Self {
            depth,
            base_channels,
            dilation_sets,
            kernel_len,
            input_skip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.kernel_len % 2 == 0 {
            return Err(Error::domain("ResUNet-a needs channels and an odd kernel length"));
        }
        if self.dilation_sets.len() != self.depth + 1 {
            return Err(Error::domain(format!(
                "{} dilation sets given for depth {}",
                self.dilation_sets.len(),
                self.depth
            )));
        }
        for set in &self.dilation_sets {
            if set.is_empty() || set.len() > MAX_BRANCHES || set.contains(&0) {
                return Err(Error::domain(format!("invalid dilation set {set:?}")));
            }
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone)]
struct Branch {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

/// Identity plus parallel dilated branches.
#[derive(Debug, Clone)]
struct ResABlock {
    branches: Vec<Branch>,
}

impl ResABlock {
    fn new(ps: &mut ParamSet, name: &str, ch: usize, k: usize, rates: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let branches = rates
            .iter()
            .map(|&d| {
                let n = format!("{name}.d{d}");
                Branch {
                    bn1: BatchNorm::new(ps, &format!("{n}.bn1"), ch),
                    conv1: Conv2d::new(ps, &format!("{n}.conv1"), ch, ch, (k, 1), (1, 1), (d, 1), rng),
                    bn2: BatchNorm::new(ps, &format!("{n}.bn2"), ch),
                    conv2: Conv2d::new(ps, &format!("{n}.conv2"), ch, ch, (k, 1), (1, 1), (d, 1), rng),
                }
            })
            .collect();
        Self { branches }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut terms = vec![x];
        for b in &self.branches {
            let y = b.bn1.forward(ctx, x)?;
            let y = ctx.graph.relu(y);
            let y = b.conv1.forward(ctx, y)?;
            let y = b.bn2.forward(ctx, y)?;
            let y = ctx.graph.relu(y);
            terms.push(b.conv2.forward(ctx, y)?);
        }
        ctx.graph.add_all(&terms)
    }
}

#[derive(Debug, Clone)]
struct Level {
    block: ResABlock,
    down: Conv2d,
    up: Conv2d,
    dec_block: ResABlock,
}

/// U-shaped 1-D network of ResUNet-a blocks.
#[derive(Debug, Clone)]
pub struct ResUNetA {
    config: ResUNetAConfig,
    params: ParamSet,
    head: Conv2d,
    levels: Vec<Level>,
    bridge: ResABlock,
    tail: Conv2d,
}

impl ResUNetA {
    pub fn new(config: ResUNetAConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let k = config.kernel_len;
        let head = Conv2d::new(&mut ps, "u.head", 1, config.channels(0), (k, 1), (1, 1), (1, 1), &mut rng);
        let mut levels = Vec::with_capacity(config.depth);
        for lvl in 0..config.depth {
            let (c, c2) = (config.channels(lvl), config.channels(lvl + 1));
            let n = format!("u.l{lvl}");
            let block = ResABlock::new(&mut ps, &format!("{n}.enc"), c, k, &config.dilation_sets[lvl], &mut rng);
            let down = Conv2d::new(&mut ps, &format!("{n}.down"), c, c2, (k, 1), (2, 1), (1, 1), &mut rng);
            let up = Conv2d::new(&mut ps, &format!("{n}.up"), c2, c, (k, 1), (1, 1), (1, 1), &mut rng);
            let dec_block = ResABlock::new(&mut ps, &format!("{n}.dec"), c, k, &config.dilation_sets[lvl], &mut rng);
            levels.push(Level {
                block,
                down,
                up,
                dec_block,
            });
        }
        let bridge = ResABlock::new(
            &mut ps,
            "u.bridge",
            config.channels(config.depth),
            k,
            &config.dilation_sets[config.depth],
            &mut rng,
        );
        let tail = Conv2d::new(&mut ps, "u.tail", config.channels(0), 1, (k, 1), (1, 1), (1, 1), &mut rng);
        if config.input_skip {
            // Start as the identity on the degraded input.
            for p in ps.iter_mut().filter(|p| p.name.starts_with("u.tail.")) {
                p.value.data_mut().fill(0.0);
            }
        }
        Ok(Self {
            config,
            params: ps,
            head,
            levels,
            bridge,
            tail,
        })
    }

    pub fn config(&self) -> &ResUNetAConfig {
        &self.config
    }
}

impl Network for ResUNetA {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Input `[N, 1, L, W]`; each of the `W` columns is an A-scan and is
    /// transformed independently of the others.
    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let xs = ctx.graph.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != 1 {
            return Err(Error::shape(format!("ResUNet-a expects [N, 1, L, W], got {xs:?}")));
        }
        let unit = 1usize << self.config.depth;
        if xs[2] % unit != 0 || xs[2] == 0 {
            return Err(Error::domain(format!(
                "length {} is not divisible by 2^{}",
                xs[2], self.config.depth
            )));
        }
        check_range(ctx.graph, x)?;
        let mut y = self.head.forward(ctx, x)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for lvl in &self.levels {
            y = lvl.block.forward(ctx, y)?;
            skips.push(y);
            y = lvl.down.forward(ctx, y)?;
        }
        y = self.bridge.forward(ctx, y)?;
        for (lvl, skip) in self.levels.iter().zip(skips).rev() {
            let u = ctx.graph.upsample_nearest(y, (2, 1))?;
            let u = lvl.up.forward(ctx, u)?;
            let u = ctx.graph.add(u, skip)?;
            y = lvl.dec_block.forward(ctx, u)?;
        }
        let out = self.tail.forward(ctx, y)?;
        if self.config.input_skip {
            ctx.graph.add(out, x)
        } else {
            Ok(ctx.graph.tanh(out))
        }
    }
}

/// Stacks single-channel images into a `[N, 1, H, W]` tensor.
pub fn image_batch(images: &[&Array2]) -> Result<Tensor> {
    let (h, w) = images
        .first()
        .ok_or_else(|| Error::shape("empty batch"))?
        .shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.shape() != (h, w) {
            return Err(Error::shape("images in a batch must share a shape"));
        }
        data.extend_from_slice(im.as_slice());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Inverse of [`image_batch`].
pub fn split_images(t: &Tensor) -> Result<Vec<Array2>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(format!("expected [N, 1, H, W], got {s:?}")));
    }
    let plane = s[2] * s[3];
    t.data()
        .chunks(plane.max(1))
        .take(s[0])
        .map(|c| Array2::from_vec(s[2], s[3], c.to_vec()))
        .collect()
}
