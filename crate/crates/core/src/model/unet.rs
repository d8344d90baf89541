use ndarray::{Array4, ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, BnCache, BnStats};
use super::params::{Grads, NamedArray, ParamStore};
use crate::{rng, Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsample {
    /// 2×2 stride-2 transposed convolution.
    Transposed,
    /// Nearest-neighbour 2× upsampling (no parameters).
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Number of down/up stages. Three stages give 15 feature + head convolutions.
    pub depth: usize,
    pub dropout: f64,
    /// Fraction of the running statistics kept at each update:
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub bn_momentum: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub upsample: Upsample,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 64,
            depth: 3,
            dropout: 0.5,
            bn_momentum: 0.9,
            in_channels: 1,
            out_channels: 1,
            upsample: Upsample::Transposed,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("model.base_channels must be positive"));
        }
        if !(1..=6).contains(&self.depth) {
            return Err(Error::config("model.depth must be in 1..=6"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("model.bn_momentum must be in [0, 1]"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("model.in_channels must be positive"));
        }
        if self.out_channels != 1 {
            return Err(Error::config("model.out_channels must be 1 (binary segmentation)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm and dropout drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    conv: Conv,
    bn: Bn,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    a: Unit,
    b: Unit,
}

enum Init {
    He(usize),
    Lecun(usize),
    Zero,
    One,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Schema {
    params: Vec<Entry>,
    buffers: Vec<Entry>,
}

impl Schema {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.push(Entry { name, shape, init });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.buffers.push(Entry { name, shape, init });
        self.buffers.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Conv {
        let w = self.param(format!("{prefix}.weight"), vec![cout, cin, k, k], Init::He(cin * k * k));
        let b = bias.then(|| self.param(format!("{prefix}.bias"), vec![cout], Init::Zero));
        Conv { w, b }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Bn {
        Bn {
            gamma: self.param(format!("{prefix}.gamma"), vec![c], Init::One),
            beta: self.param(format!("{prefix}.beta"), vec![c], Init::Zero),
            mean: self.buffer(format!("{prefix}.running_mean"), vec![c], Init::Zero),
            var: self.buffer(format!("{prefix}.running_var"), vec![c], Init::One),
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> Block {
        let a = Unit { conv: self.conv(&format!("{prefix}.conv1"), cin, cout, 3, false), bn: self.bn(&format!("{prefix}.bn1"), cout) };
        let b = Unit { conv: self.conv(&format!("{prefix}.conv2"), cout, cout, 3, false), bn: self.bn(&format!("{prefix}.bn2"), cout) };
        Block { a, b }
    }
}

/// U-Net architecture: encoder blocks of two conv-BN-ReLU units with 2×2
/// max pooling, a two-unit bottleneck, decoder blocks with skip
/// concatenation, dropout after the bottleneck and every decoder block, and
/// a 1×1 output head producing logits.
///
/// The struct holds only the architecture; weights live in a [`ParamStore`]
/// so the same architecture serves the student and the teacher.
pub struct UNet {
    cfg: UNetConfig,
    enc: Vec<Block>,
    bottleneck: Block,
    /// Transposed-conv (weight, bias) per level, `None` for nearest upsampling.
    up: Vec<Option<(usize, usize)>>,
    dec: Vec<Block>,
    head: Conv,
    schema: Schema,
}

const BOTTLENECK_DROPOUT: u64 = 100;

struct UnitCache<T> {
    input: Array4<T>,
    bn: BnCache<T>,
}

struct BlockCache<T> {
    a: UnitCache<T>,
    b: UnitCache<T>,
}

struct Cache<T> {
    enc: Vec<BlockCache<T>>,
    pool_args: Vec<Vec<u8>>,
    skip_channels: Vec<usize>,
    bottleneck: BlockCache<T>,
    bottleneck_mask: Option<Array4<T>>,
    up_inputs: Vec<Array4<T>>,
    dec: Vec<BlockCache<T>>,
    dec_masks: Vec<Option<Array4<T>>>,
    head_input: Array4<T>,
}

/// Output of [`UNet::forward`].
pub struct ForwardPass<T> {
    pub logits: Array4<T>,
    /// Batch statistics per batch-norm layer (train mode only), in buffer order.
    pub batch_stats: Vec<BnStats<T>>,
    cache: Option<Cache<T>>,
}

impl<T> ForwardPass<T> {
    pub fn is_tracked(&self) -> bool {
        self.cache.is_some()
    }
}

struct Run<'a, T> {
    p: &'a ParamStore<T>,
    mode: Mode,
    track: bool,
    stats: Vec<BnStats<T>>,
}

impl<T: Real> Run<'_, T> {
    fn unit(&mut self, u: &Unit, x: Array4<T>) -> (Array4<T>, Option<UnitCache<T>>) {
        let w = &self.p.params[u.conv.w].value;
        let z = layers::conv2d_forward(&x, w, u.conv.b.map(|b| &self.p.params[b].value));
        let gamma = &self.p.params[u.bn.gamma].value;
        let beta = &self.p.params[u.bn.beta].value;
        match self.mode {
            Mode::Eval => {
                let rm = &self.p.buffers[u.bn.mean].value;
                let rv = &self.p.buffers[u.bn.var].value;
                (layers::bn_relu_forward_eval(&z, gamma, beta, rm, rv), None)
            }
            Mode::Train { .. } => {
                let (cache, stats, out) = layers::bn_relu_forward_train(&z, gamma, beta);
                self.stats.push(stats);
                let cache = self.track.then(|| UnitCache { input: x, bn: cache });
                (out, cache)
            }
        }
    }

    fn block(&mut self, blk: &Block, x: Array4<T>) -> (Array4<T>, Option<BlockCache<T>>) {
        let (h, a) = self.unit(&blk.a, x);
        let (out, b) = self.unit(&blk.b, h);
        let cache = match (a, b) {
            (Some(a), Some(b)) => Some(BlockCache { a, b }),
            _ => None,
        };
        (out, cache)
    }

    fn dropout(&self, cfg: &UNetConfig, h: &mut Array4<T>, layer: u64) -> Option<Array4<T>> {
        match self.mode {
            Mode::Train { dropout_seed } if cfg.dropout > 0.0 => {
                let mask = layers::dropout_mask::<T>(h.dim(), cfg.dropout, dropout_seed, layer);
                *h *= &mask;
                self.track.then_some(mask)
            }
            _ => None,
        }
    }
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = Schema::default();
        let base = cfg.base_channels;
        let width = |level: usize| base << level;
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for level in 0..cfg.depth {
            enc.push(s.block(&format!("enc{}", level + 1), cin, width(level)));
            cin = width(level);
        }
        let bottom = width(cfg.depth);
        let bottleneck = s.block("bottleneck", cin, bottom);
        let mut up = vec![None; cfg.depth];
        let mut dec: Vec<Option<Block>> = vec![None; cfg.depth];
        let mut below = bottom;
        for level in (0..cfg.depth).rev() {
            let skip = width(level);
            let up_out = match cfg.upsample {
                Upsample::Transposed => {
                    let name = format!("up{}", level + 1);
                    let w = s.param(format!("{name}.weight"), vec![below, skip, 2, 2], Init::He(below));
                    let b = s.param(format!("{name}.bias"), vec![skip], Init::Zero);
                    up[level] = Some((w, b));
                    skip
                }
                Upsample::Nearest => below,
            };
            dec[level] = Some(s.block(&format!("dec{}", level + 1), up_out + skip, skip));
            below = skip;
        }
        let head_w = s.param("head.weight".into(), vec![cfg.out_channels, base, 1, 1], Init::Lecun(base));
        let head_b = s.param("head.bias".into(), vec![cfg.out_channels], Init::Zero);
        Ok(UNet {
            enc,
            bottleneck,
            up,
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head: Conv { w: head_w, b: Some(head_b) },
            schema: s,
            cfg,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Feature convolutions plus the output head; upsampling layers are not counted.
    pub fn conv_layer_count(&self) -> usize {
        2 * self.enc.len() + 2 + 2 * self.dec.len() + 1
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.schema.params.iter().map(|e| e.name.as_str()).collect()
    }

    /// Spatial dimensions must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.cfg.depth
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut r = rng::stream(seed, &[rng::INIT]);
        let mut build = |e: &Entry| {
            let n: usize = e.shape.iter().product();
            let values: Vec<T> = match e.init {
                Init::Zero => vec![T::zero(); n],
                Init::One => vec![T::one(); n],
                Init::He(fan) | Init::Lecun(fan) => {
                    let gain = if matches!(e.init, Init::He(_)) { 2.0 } else { 1.0 };
                    let dist = Normal::new(0.0, (gain / fan as f64).sqrt()).unwrap();
                    (0..n).map(|_| T::of(dist.sample(&mut r))).collect()
                }
            };
            NamedArray { name: e.name.clone(), value: ArrayD::from_shape_vec(IxDyn(&e.shape), values).unwrap() }
        };
        ParamStore {
            params: self.schema.params.iter().map(&mut build).collect(),
            buffers: self.schema.buffers.iter().map(&mut build).collect(),
        }
    }

    fn check_input<T: Real>(&self, p: &ParamStore<T>, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let m = self.size_multiple();
        if c != self.cfg.in_channels {
            return Err(Error::contract(format!("expected {} input channels, got {c}", self.cfg.in_channels)));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::contract(format!("input {h}x{w} is not divisible by {m}")));
        }
        if p.params.len() != self.schema.params.len() || p.buffers.len() != self.schema.buffers.len() {
            return Err(Error::contract("parameter store does not match the architecture"));
        }
        Ok(())
    }

    /// Forward pass producing logits. With `track = false` no activations are
    /// retained, so the pass cannot be back-propagated (teacher evaluation).
    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Array4<T>, mode: Mode, track: bool) -> Result<ForwardPass<T>> {
        self.check_input(p, x)?;
        let track = track && matches!(mode, Mode::Train { .. });
        let mut run = Run { p, mode, track, stats: Vec::new() };
        let mut h = x.as_standard_layout().into_owned();
        let mut enc_caches = Vec::new();
        let mut pool_args = Vec::new();
        let mut skips = Vec::new();
        for blk in &self.enc {
            let (s, c) = run.block(blk, h);
            let (pooled, arg) = layers::maxpool2_forward(&s);
            enc_caches.extend(c);
            pool_args.push(arg);
            skips.push(s);
            h = pooled;
        }
        let (mut h, bottleneck_cache) = run.block(&self.bottleneck, h);
        let bottleneck_mask = run.dropout(&self.cfg, &mut h, BOTTLENECK_DROPOUT);

        let depth = self.cfg.depth;
        let mut up_inputs = Vec::new();
        let mut dec_caches = Vec::new();
        let mut dec_masks = Vec::new();
        let mut skip_channels = Vec::new();
        for level in (0..depth).rev() {
            let u = match self.up[level] {
                Some((w, b)) => layers::conv_transpose2x2_forward(&h, &p.params[w].value, &p.params[b].value),
                None => layers::upsample2_forward(&h),
            };
            if track {
                up_inputs.push(h);
            }
            let skip = skips.pop().unwrap();
            skip_channels.push(u.dim().1);
            let cat = layers::concat_channels(&u, &skip);
            let (mut out, c) = run.block(&self.dec[level], cat);
            dec_caches.extend(c);
            dec_masks.push(run.dropout(&self.cfg, &mut out, BOTTLENECK_DROPOUT + 1 + level as u64));
            h = out;
        }
        let head = &self.head;
        let logits = layers::conv2d_forward(&h, &p.params[head.w].value, head.b.map(|b| &p.params[b].value));
        let cache = match (track, bottleneck_cache) {
            (true, Some(bottleneck)) => Some(Cache {
                enc: enc_caches,
                pool_args,
                skip_channels,
                bottleneck,
                bottleneck_mask,
                up_inputs,
                dec: dec_caches,
                dec_masks,
                head_input: h,
            }),
            _ => None,
        };
        Ok(ForwardPass { logits, batch_stats: run.stats, cache })
    }

    fn unit_backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        u: &Unit,
        c: &UnitCache<T>,
        g: &Array4<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let (dz, dgamma, dbeta) = layers::bn_relu_backward(&c.bn, &p.params[u.bn.gamma].value, &p.params[u.bn.beta].value, g);
        grads.accumulate(u.bn.gamma, &dgamma);
        grads.accumulate(u.bn.beta, &dbeta);
        let cg = layers::conv2d_backward(&c.input, &p.params[u.conv.w].value, &dz, need_dx, u.conv.b.is_some());
        grads.accumulate(u.conv.w, &cg.dw);
        if let (Some(b), Some(db)) = (u.conv.b, cg.db.as_ref()) {
            grads.accumulate(b, db);
        }
        cg.dx
    }

    fn block_backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        blk: &Block,
        c: &BlockCache<T>,
        g: &Array4<T>,
        grads: &mut Grads<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let g = self.unit_backward(p, &blk.b, &c.b, g, grads, true).unwrap();
        self.unit_backward(p, &blk.a, &c.a, &g, grads, need_dx)
    }

    /// Gradients of `sum(grad_logits * logits)` with respect to every parameter.
    pub fn backward<T: Real>(&self, p: &ParamStore<T>, pass: &ForwardPass<T>, grad_logits: &Array4<T>) -> Result<Grads<T>> {
        let cache = pass
            .cache
            .as_ref()
            .ok_or_else(|| Error::contract("backward requires a tracked train-mode forward pass"))?;
        if grad_logits.dim() != pass.logits.dim() {
            return Err(Error::contract("gradient shape does not match the logits"));
        }
        let mut grads = Grads::zeros_for(p);
        let head = &self.head;
        let hg = layers::conv2d_backward(&cache.head_input, &p.params[head.w].value, grad_logits, true, true);
        grads.accumulate(head.w, &hg.dw);
        grads.accumulate(head.b.unwrap(), hg.db.as_ref().unwrap());
        let mut g = hg.dx.unwrap();

        let depth = self.cfg.depth;
        let mut skip_grads: Vec<Option<Array4<T>>> = (0..depth).map(|_| None).collect();
        // Decoder stages were recorded deepest-first; walk them back shallowest-first.
        for i in (0..depth).rev() {
            let level = depth - 1 - i;
            if let Some(mask) = &cache.dec_masks[i] {
                g *= mask;
            }
            let gc = self.block_backward(p, &self.dec[level], &cache.dec[i], &g, &mut grads, true).unwrap();
            let (gu, gs) = layers::split_channels(&gc, cache.skip_channels[i]);
            skip_grads[level] = Some(gs);
            g = match self.up[level] {
                Some((w, b)) => {
                    let (dx, dw, db) = layers::conv_transpose2x2_backward(&cache.up_inputs[i], &p.params[w].value, &gu);
                    grads.accumulate(w, &dw);
                    grads.accumulate(b, &db);
                    dx
                }
                None => layers::upsample2_backward(&gu),
            };
        }
        if let Some(mask) = &cache.bottleneck_mask {
            g *= mask;
        }
        g = self.block_backward(p, &self.bottleneck, &cache.bottleneck, &g, &mut grads, true).unwrap();
        for level in (0..depth).rev() {
            let mut gs = layers::maxpool2_backward(&g, &cache.pool_args[level]);
            gs += skip_grads[level].as_ref().unwrap();
            match self.block_backward(p, &self.enc[level], &cache.enc[level], &gs, &mut grads, level > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats<T: Real>(&self, p: &mut ParamStore<T>, stats: &[BnStats<T>]) {
        let m = T::of(self.cfg.bn_momentum);
        let keep = T::one() - m;
        let bns = self.enc.iter().chain(std::iter::once(&self.bottleneck)).chain(self.dec.iter().rev());
        let units = bns.flat_map(|b| [b.a, b.b]);
        for (u, s) in units.zip(stats) {
            p.buffers[u.bn.mean].value.zip_mut_with(&s.mean.view().into_dyn(), |r, &b| *r = m * *r + keep * b);
            p.buffers[u.bn.var].value.zip_mut_with(&s.var.view().into_dyn(), |r, &b| *r = m * *r + keep * b);
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
