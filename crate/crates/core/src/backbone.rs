//! Configurable UNet noise predictor with named activation taps.
//!
//! The network follows the reference pixel-space layout: a stem convolution,
//! down stages of residual blocks (with single-head self-attention at selected
//! resolutions) separated by strided-conv downsampling, two middle blocks
//! around an attention layer, and up stages with one extra block per stage
//! consuming skip concatenations, closed by a normalized output projection.
//! Timestep embeddings are sinusoidal, passed through a two-layer MLP, and
//! injected additively into every residual block.
//!
//! A *tap* names the output of one residual unit (the block plus its attached
//! attention, when present). Taps are enumerated in forward-pass order: all
//! down blocks, the two middle blocks, then all up blocks. Requesting a tap
//! never alters the computation; truncating at a tap yields an [`Encoder`]
//! that pools the tap activation into a feature vector at a fixed timestep.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::container::TensorMap;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, silu, silu_backward, timestep_embedding, upsample_nearest2,
    upsample_nearest2_backward, AttnCache, Conv2d, GnCache, Gradients, GroupNorm, Init, Linear,
    ParamStore, SelfAttention2d,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DDAEConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub attention_resolutions: BTreeSet<usize>,
    pub image_size: usize,
    pub in_channels: usize,
    pub time_embed_dim: usize,
}

impl DDAEConfig {
    /// Small default that trains in reasonable time on one CPU core.
    pub fn desk() -> Self {
        DDAEConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            blocks_per_resolution: 1,
            attention_resolutions: [8].into_iter().collect(),
            image_size: 32,
            in_channels: 3,
            time_embed_dim: 128,
        }
    }

    /// The reference 35.7M-parameter CIFAR-10 configuration.
    pub fn ddpm_cifar10() -> Self {
        DDAEConfig {
            base_channels: 128,
            channel_multipliers: vec![1, 2, 2, 2],
            blocks_per_resolution: 2,
            attention_resolutions: [16].into_iter().collect(),
            image_size: 32,
            in_channels: 3,
            time_embed_dim: 512,
        }
    }

    pub fn stages(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Feature-map size at a down/up stage.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.image_size >> stage
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels * self.channel_multipliers[stage]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::parameter(format!(
                "base_channels must be positive and even, got {}",
                self.base_channels
            )));
        }
        if self.channel_multipliers.is_empty() {
            return Err(Error::parameter("channel_multipliers must be non-empty"));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(Error::parameter("channel_multipliers must be positive"));
        }
        if self.blocks_per_resolution == 0 {
            return Err(Error::parameter("blocks_per_resolution must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::parameter("in_channels must be positive"));
        }
        if self.time_embed_dim == 0 {
            return Err(Error::parameter("time_embed_dim must be positive"));
        }
        let down_factor = 1usize << (self.stages() - 1);
        if self.image_size == 0 || self.image_size % down_factor != 0 {
            return Err(Error::parameter(format!(
                "image_size {} is not divisible by 2^(stages-1) = {down_factor}",
                self.image_size
            )));
        }
        let realized: BTreeSet<usize> =
            (0..self.stages()).map(|s| self.stage_resolution(s)).collect();
        for &r in &self.attention_resolutions {
            if !realized.contains(&r) {
                return Err(Error::parameter(format!(
                    "attention_resolutions contains {r}, which is not among realized sizes {realized:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapPath {
    Down,
    Mid,
    Up,
}

impl fmt::Display for TapPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapPath::Down => write!(f, "down"),
            TapPath::Mid => write!(f, "mid"),
            TapPath::Up => write!(f, "up"),
        }
    }
}

/// Identifies one residual-unit output. `stage` is the resolution-stage index
/// (mid blocks use the deepest stage), `block` counts blocks within the
/// (path, stage) group, and `resolution` is the activation's spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapId {
    pub path: TapPath,
    pub stage: usize,
    pub block: usize,
    pub resolution: usize,
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}[{}].block[{}]@{}",
            self.path, self.stage, self.block, self.resolution
        )
    }
}

#[derive(Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    cout: usize,
}

struct ResBlockCache {
    x: Array4<f32>,
    gn1c: GnCache,
    a: Array4<f32>,
    hsum: Array4<f32>,
    gn2c: GnCache,
    c: Array4<f32>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let gn1 = GroupNorm::new(store, &format!("{name}.gn1"), cin);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1, Init::He, rng);
        let temb_proj = Linear::new(store, &format!("{name}.temb"), temb_dim, cout, Init::He, rng);
        let gn2 = GroupNorm::new(store, &format!("{name}.gn2"), cout);
        // closing conv starts at zero so a fresh block is identity-plus-skip
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, Init::Zero, rng);
        let skip = if cin != cout {
            Some(Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, Init::He, rng))
        } else {
            None
        };
        ResBlock { gn1, conv1, temb_proj, gn2, conv2, skip, cout }
    }

    fn forward(
        &self,
        store: &ParamStore,
        x: &Array4<f32>,
        silu_temb: &Array2<f32>,
    ) -> (Array4<f32>, ResBlockCache) {
        let (a, gn1c) = self.gn1.forward(store, x);
        let h = self.conv1.forward(store, &silu(&a));
        let tproj = self.temb_proj.forward(store, silu_temb);
        let mut hsum = h;
        let (n, c, _, _) = hsum.dim();
        for i in 0..n {
            for ch in 0..c {
                let add = tproj[[i, ch]];
                hsum.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v + add);
            }
        }
        let (cc, gn2c) = self.gn2.forward(store, &hsum);
        let e = self.conv2.forward(store, &silu(&cc));
        let out = match &self.skip {
            Some(conv) => e + conv.forward(store, x),
            None => e + x,
        };
        (out, ResBlockCache { x: x.clone(), gn1c, a, hsum, gn2c, c: cc })
    }

    /// Returns the input gradient (when requested) and the block's
    /// contribution to the shared `silu(temb)` gradient.
    fn backward(
        &self,
        store: &ParamStore,
        cache: &ResBlockCache,
        silu_temb: &Array2<f32>,
        dout: &Array4<f32>,
        grads: &mut Gradients,
        need_dx: bool,
    ) -> (Option<Array4<f32>>, Array2<f32>) {
        let d_conv2_in = self
            .conv2
            .backward(store, &silu(&cache.c), dout, grads, true)
            .unwrap();
        let dc = silu_backward(&cache.c, &d_conv2_in);
        let dh = self
            .gn2
            .backward(store, &cache.hsum, &cache.gn2c, &dc, grads, true)
            .unwrap();
        // timestep injection: gradient of the per-channel broadcast add
        let (n, _, _, _) = dh.dim();
        let mut pooled = Array2::zeros((n, self.cout));
        for i in 0..n {
            for ch in 0..self.cout {
                pooled[[i, ch]] = dh.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum();
            }
        }
        let dsilu_temb = self
            .temb_proj
            .backward(store, silu_temb, &pooled, grads, true)
            .unwrap();
        let d_conv1_in = self
            .conv1
            .backward(store, &silu(&cache.a), &dh, grads, true)
            .unwrap();
        let da = silu_backward(&cache.a, &d_conv1_in);
        let dx_main = self
            .gn1
            .backward(store, &cache.x, &cache.gn1c, &da, grads, need_dx);
        let dx = if need_dx {
            let mut dx = dx_main.unwrap();
            match &self.skip {
                Some(conv) => {
                    dx += &conv.backward(store, &cache.x, dout, grads, true).unwrap();
                }
                None => dx += dout,
            }
            Some(dx)
        } else {
            if let Some(conv) = &self.skip {
                conv.backward(store, &cache.x, dout, grads, false);
            }
            None
        };
        (dx, dsilu_temb)
    }
}

#[derive(Debug)]
struct Unit {
    block: ResBlock,
    attn: Option<SelfAttention2d>,
    tap: TapId,
}

struct UnitCache {
    res: ResBlockCache,
    attn: Option<(Array4<f32>, AttnCache)>,
    /// Skip-stack index this unit's up-path concat consumed, with the main
    /// channel count at the split point.
    consumed_skip: Option<(usize, usize)>,
}

#[derive(Debug)]
struct DownStage {
    units: Vec<Unit>,
    downsample: Option<Conv2d>,
}

#[derive(Debug)]
struct UpStage {
    units: Vec<Unit>,
    upsample: Option<Conv2d>,
}

#[derive(Debug)]
struct TimeEmbed {
    l1: Linear,
    l2: Linear,
    sin_dim: usize,
}

struct TimeCache {
    sin: Array2<f32>,
    a1: Array2<f32>,
    temb: Array2<f32>,
    silu_temb: Array2<f32>,
}

impl TimeEmbed {
    fn forward(&self, store: &ParamStore, t: &[usize]) -> TimeCache {
        let sin = timestep_embedding(t, self.sin_dim);
        let a1 = self.l1.forward(store, &sin);
        let temb = self.l2.forward(store, &silu(&a1));
        let silu_temb = silu(&temb);
        TimeCache { sin, a1, temb, silu_temb }
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &TimeCache,
        dsilu_temb: &Array2<f32>,
        grads: &mut Gradients,
    ) {
        let dtemb = silu_backward(&cache.temb, dsilu_temb);
        let da1s = self
            .l2
            .backward(store, &silu(&cache.a1), &dtemb, grads, true)
            .unwrap();
        let da1 = silu_backward(&cache.a1, &da1s);
        self.l1.backward(store, &cache.sin, &da1, grads, false);
    }
}

#[derive(Debug)]
pub struct DDAENetwork {
    config: DDAEConfig,
    store: ParamStore,
    time: TimeEmbed,
    stem: Conv2d,
    down: Vec<DownStage>,
    mid: (Unit, Unit),
    up: Vec<UpStage>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    taps: Vec<TapId>,
}

/// Everything retained by a training-mode forward pass.
pub struct FwdCache {
    time: TimeCache,
    x_in: Array4<f32>,
    down: Vec<(Vec<UnitCache>, Option<Array4<f32>>)>,
    mid: Vec<UnitCache>,
    up: Vec<(Vec<UnitCache>, Option<Array4<f32>>)>,
    /// (input to out_norm, gn stats, normalized pre-activation)
    head: Option<(Array4<f32>, GnCache, Array4<f32>)>,
    n_skip_pushes: usize,
    /// Tap ordinal the forward stopped after, if truncated.
    stopped_at: Option<usize>,
}

enum RunMode<'a> {
    /// Plain inference; optionally collect tap activations, optionally stop
    /// after the last requested tap.
    Infer { taps: &'a [TapId], stop_after_taps: bool },
    /// Keep caches for a backward pass; optionally stop after one tap.
    Train { stop_at: Option<usize> },
}

struct RunOutput {
    eps: Option<Array4<f32>>,
    taps: Vec<Array4<f32>>,
    cache: Option<FwdCache>,
    /// Activation at the stop tap, for truncated training runs.
    stop_activation: Option<Array4<f32>>,
}

/// Channel-wise concatenation with guaranteed standard layout.
fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    let mut out = Array4::zeros((n, ca + cb, h, w));
    for i in 0..n {
        let mut oi = out.index_axis_mut(Axis(0), i);
        oi.slice_mut(ndarray::s![..ca, .., ..])
            .assign(&a.index_axis(Axis(0), i));
        oi.slice_mut(ndarray::s![ca.., .., ..])
            .assign(&b.index_axis(Axis(0), i));
    }
    out
}

/// Builds an initialized network. Taps are enumerated in forward order.
pub fn build_ddae(config: &DDAEConfig, seed: u64) -> Result<DDAENetwork> {
    config.validate()?;
    let mut rng = crate::nn::substream(seed, "init");
    let mut store = ParamStore::new();
    let temb_dim = config.time_embed_dim;

    let time = TimeEmbed {
        l1: Linear::new(&mut store, "time.l1", config.base_channels, temb_dim, Init::He, &mut rng),
        l2: Linear::new(&mut store, "time.l2", temb_dim, temb_dim, Init::He, &mut rng),
        sin_dim: config.base_channels,
    };
    let stem = Conv2d::new(
        &mut store, "stem", config.in_channels, config.base_channels, 3, 1, 1, Init::He, &mut rng,
    );

    let stages = config.stages();
    let mut taps = Vec::new();
    let mut down = Vec::new();
    let mut ch = config.base_channels;
    for s in 0..stages {
        let res = config.stage_resolution(s);
        let cout = config.stage_channels(s);
        let mut units = Vec::new();
        for b in 0..config.blocks_per_resolution {
            let name = format!("down.{s}.block.{b}");
            let block = ResBlock::new(&mut store, &name, ch, cout, temb_dim, &mut rng);
            ch = cout;
            let attn = config
                .attention_resolutions
                .contains(&res)
                .then(|| SelfAttention2d::new(&mut store, &format!("{name}.attn"), cout, &mut rng));
            let tap = TapId { path: TapPath::Down, stage: s, block: b, resolution: res };
            taps.push(tap);
            units.push(Unit { block, attn, tap });
        }
        let downsample = (s + 1 < stages).then(|| {
            Conv2d::new(&mut store, &format!("down.{s}.downsample"), ch, ch, 3, 2, 1, Init::He, &mut rng)
        });
        down.push(DownStage { units, downsample });
    }

    let mid_res = config.stage_resolution(stages - 1);
    let mid_stage = stages - 1;
    let mid1 = Unit {
        block: ResBlock::new(&mut store, "mid.block.0", ch, ch, temb_dim, &mut rng),
        attn: Some(SelfAttention2d::new(&mut store, "mid.block.0.attn", ch, &mut rng)),
        tap: TapId { path: TapPath::Mid, stage: mid_stage, block: 0, resolution: mid_res },
    };
    let mid2 = Unit {
        block: ResBlock::new(&mut store, "mid.block.1", ch, ch, temb_dim, &mut rng),
        attn: None,
        tap: TapId { path: TapPath::Mid, stage: mid_stage, block: 1, resolution: mid_res },
    };
    taps.push(mid1.tap);
    taps.push(mid2.tap);

    // skip channel bookkeeping mirrors the forward pushes
    let mut skip_ch = vec![config.base_channels];
    for s in 0..stages {
        for _ in 0..config.blocks_per_resolution {
            skip_ch.push(config.stage_channels(s));
        }
        if s + 1 < stages {
            skip_ch.push(config.stage_channels(s));
        }
    }

    let mut up = Vec::new();
    for s in (0..stages).rev() {
        let res = config.stage_resolution(s);
        let cout = config.stage_channels(s);
        let mut units = Vec::new();
        for b in 0..config.blocks_per_resolution + 1 {
            let cin = ch + skip_ch.pop().expect("skip stack underflow");
            let name = format!("up.{s}.block.{b}");
            let block = ResBlock::new(&mut store, &name, cin, cout, temb_dim, &mut rng);
            ch = cout;
            let attn = config
                .attention_resolutions
                .contains(&res)
                .then(|| SelfAttention2d::new(&mut store, &format!("{name}.attn"), cout, &mut rng));
            let tap = TapId { path: TapPath::Up, stage: s, block: b, resolution: res };
            taps.push(tap);
            units.push(Unit { block, attn, tap });
        }
        let upsample = (s > 0).then(|| {
            Conv2d::new(&mut store, &format!("up.{s}.upsample"), ch, ch, 3, 1, 1, Init::He, &mut rng)
        });
        up.push(UpStage { units, upsample });
    }

    let out_norm = GroupNorm::new(&mut store, "out.norm", ch);
    let out_conv = Conv2d::new(
        &mut store, "out.conv", ch, config.in_channels, 3, 1, 1, Init::Zero, &mut rng,
    );

    Ok(DDAENetwork {
        config: config.clone(),
        store,
        time,
        stem,
        down,
        mid: (mid1, mid2),
        up,
        out_norm,
        out_conv,
        taps,
    })
}

impl DDAENetwork {
    pub fn config(&self) -> &DDAEConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// All taps in forward-pass order.
    pub fn tap_index(&self) -> &[TapId] {
        &self.taps
    }

    pub fn tap_ordinal(&self, tap: &TapId) -> Result<usize> {
        self.taps
            .iter()
            .position(|t| t == tap)
            .ok_or_else(|| Error::contract(format!("unknown tap {tap}")))
    }

    pub fn tap_channels(&self, tap: &TapId) -> Result<usize> {
        self.tap_ordinal(tap)?;
        Ok(self.config.stage_channels(tap.stage))
    }

    /// Report form `"k/K (ordinal block@resolution)"`, `k` 1-based in forward
    /// order.
    pub fn render_tap(&self, tap: &TapId) -> Result<String> {
        let k = self.tap_ordinal(tap)? + 1;
        let ord = match tap.block + 1 {
            1 => "1st".to_string(),
            2 => "2nd".to_string(),
            3 => "3rd".to_string(),
            n => format!("{n}th"),
        };
        Ok(format!("{k}/{} ({ord} block@{})", self.taps.len(), tap.resolution))
    }

    fn check_input(&self, x: &Array4<f32>, t: &[usize]) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if c != self.config.in_channels
            || h != self.config.image_size
            || w != self.config.image_size
        {
            return Err(Error::contract(format!(
                "input shape [{n}, {c}, {h}, {w}] does not match configured [{}, {}, {}]",
                self.config.in_channels, self.config.image_size, self.config.image_size
            )));
        }
        if t.len() != n {
            return Err(Error::contract(format!(
                "got {} level indices for a batch of {n}",
                t.len()
            )));
        }
        if t.iter().any(|&ti| ti == 0) {
            return Err(Error::contract("level indices are 1-based; got t=0"));
        }
        Ok(())
    }

    fn run_unit(
        &self,
        unit: &Unit,
        h: &Array4<f32>,
        time: &TimeCache,
        keep: bool,
    ) -> (Array4<f32>, Option<UnitCache>) {
        let (mut out, res_cache) = unit.block.forward(&self.store, h, &time.silu_temb);
        let attn_cache = unit.attn.as_ref().map(|attn| {
            let attn_in = out.clone();
            let (o, c) = attn.forward(&self.store, &attn_in);
            out = o;
            (attn_in, c)
        });
        let uc = keep.then(|| UnitCache {
            res: res_cache,
            attn: attn_cache,
            consumed_skip: None,
        });
        (out, uc)
    }

    fn run(&self, x: &Array4<f32>, t: &[usize], mode: RunMode) -> Result<RunOutput> {
        self.check_input(x, t)?;
        let store = &self.store;
        let (collect, stop_at, keep_cache) = match &mode {
            RunMode::Infer { taps, stop_after_taps } => {
                let ords: Vec<usize> = taps
                    .iter()
                    .map(|tp| self.tap_ordinal(tp))
                    .collect::<Result<_>>()?;
                let stop = if *stop_after_taps { ords.iter().max().copied() } else { None };
                (ords, stop, false)
            }
            RunMode::Train { stop_at } => {
                if let Some(s) = stop_at {
                    if *s >= self.taps.len() {
                        return Err(Error::contract(format!("tap ordinal {s} out of range")));
                    }
                }
                (Vec::new(), *stop_at, true)
            }
        };

        let time = self.time.forward(store, t);
        let mut collected: Vec<(usize, Array4<f32>)> = Vec::new();
        let mut down_caches: Vec<(Vec<UnitCache>, Option<Array4<f32>>)> = Vec::new();
        let mut mid_caches: Vec<UnitCache> = Vec::new();
        let mut up_caches: Vec<(Vec<UnitCache>, Option<Array4<f32>>)> = Vec::new();
        let mut head = None;

        let mut h = self.stem.forward(store, x);
        let mut skips: Vec<Array4<f32>> = vec![h.clone()];
        let mut ordinal = 0usize;
        let mut done = false;

        'outer: {
            for stage in &self.down {
                let mut stage_caches = Vec::new();
                for unit in &stage.units {
                    let (out, uc) = self.run_unit(unit, &h, &time, keep_cache);
                    h = out;
                    if let Some(uc) = uc {
                        stage_caches.push(uc);
                    }
                    skips.push(h.clone());
                    if collect.contains(&ordinal) {
                        collected.push((ordinal, h.clone()));
                    }
                    if stop_at == Some(ordinal) {
                        done = true;
                        down_caches.push((stage_caches, None));
                        break 'outer;
                    }
                    ordinal += 1;
                }
                let mut down_in = None;
                if let Some(conv) = &stage.downsample {
                    if keep_cache {
                        down_in = Some(h.clone());
                    }
                    h = conv.forward(store, &h);
                    skips.push(h.clone());
                }
                down_caches.push((stage_caches, down_in));
            }

            for unit in [&self.mid.0, &self.mid.1] {
                let (out, uc) = self.run_unit(unit, &h, &time, keep_cache);
                h = out;
                if let Some(uc) = uc {
                    mid_caches.push(uc);
                }
                if collect.contains(&ordinal) {
                    collected.push((ordinal, h.clone()));
                }
                if stop_at == Some(ordinal) {
                    done = true;
                    break 'outer;
                }
                ordinal += 1;
            }

            for stage in &self.up {
                let mut stage_caches = Vec::new();
                for unit in &stage.units {
                    let skip = skips.pop().expect("skip stack underflow");
                    let skip_idx = skips.len();
                    let h_ch = h.dim().1;
                    let cat = concat_channels(&h, &skip);
                    let (mut out, res_cache) = unit.block.forward(store, &cat, &time.silu_temb);
                    let attn_cache = unit.attn.as_ref().map(|attn| {
                        let attn_in = out.clone();
                        let (o, c) = attn.forward(store, &attn_in);
                        out = o;
                        (attn_in, c)
                    });
                    h = out;
                    if keep_cache {
                        stage_caches.push(UnitCache {
                            res: res_cache,
                            attn: attn_cache,
                            consumed_skip: Some((skip_idx, h_ch)),
                        });
                    }
                    if collect.contains(&ordinal) {
                        collected.push((ordinal, h.clone()));
                    }
                    if stop_at == Some(ordinal) {
                        done = true;
                        up_caches.push((stage_caches, None));
                        break 'outer;
                    }
                    ordinal += 1;
                }
                let mut up_in = None;
                if let Some(conv) = &stage.upsample {
                    if keep_cache {
                        up_in = Some(h.clone());
                    }
                    h = conv.forward(store, &upsample_nearest2(&h));
                }
                up_caches.push((stage_caches, up_in));
            }
        }

        let eps = if done {
            None
        } else {
            let (gn_out, gnc) = self.out_norm.forward(store, &h);
            let e = self.out_conv.forward(store, &silu(&gn_out));
            if keep_cache {
                head = Some((h.clone(), gnc, gn_out));
            }
            Some(e)
        };

        let n_skip_pushes = {
            let s = self.config.stages();
            1 + s * self.config.blocks_per_resolution + (s - 1)
        };

        // order collected taps to match the request
        let mut taps_out = Vec::new();
        if let RunMode::Infer { taps, .. } = &mode {
            for tp in *taps {
                let ord = self.tap_ordinal(tp)?;
                let found = collected
                    .iter()
                    .find(|(o, _)| *o == ord)
                    .expect("tap was requested but not collected");
                taps_out.push(found.1.clone());
            }
        }

        let cache = keep_cache.then(|| FwdCache {
            time,
            x_in: x.clone(),
            down: down_caches,
            mid: mid_caches,
            up: up_caches,
            head,
            n_skip_pushes,
            stopped_at: done.then(|| stop_at.unwrap()),
        });

        Ok(RunOutput {
            eps,
            taps: taps_out,
            cache,
            stop_activation: done.then_some(h),
        })
    }

    /// Predicts the noise component of `x_t`.
    pub fn forward_eps(&self, x: &Array4<f32>, t: &[usize]) -> Result<Array4<f32>> {
        let out = self.run(x, t, RunMode::Infer { taps: &[], stop_after_taps: false })?;
        Ok(out.eps.unwrap())
    }

    /// Full forward plus one tap activation from the same pass.
    pub fn forward_with_tap(
        &self,
        x: &Array4<f32>,
        t: &[usize],
        tap: &TapId,
    ) -> Result<(Array4<f32>, Array4<f32>)> {
        let out = self.run(
            x,
            t,
            RunMode::Infer { taps: std::slice::from_ref(tap), stop_after_taps: false },
        )?;
        Ok((out.eps.unwrap(), out.taps.into_iter().next().unwrap()))
    }

    /// Collects several taps in one pass; stops at the deepest requested tap
    /// when the full output is not needed.
    pub fn forward_taps(
        &self,
        x: &Array4<f32>,
        t: &[usize],
        taps: &[TapId],
        stop_after_taps: bool,
    ) -> Result<(Option<Array4<f32>>, Vec<Array4<f32>>)> {
        let out = self.run(x, t, RunMode::Infer { taps, stop_after_taps })?;
        Ok((out.eps, out.taps))
    }

    /// Training-mode forward: returns the prediction and the cache needed by
    /// [`Self::backward_from_eps`].
    pub fn forward_train(&self, x: &Array4<f32>, t: &[usize]) -> Result<(Array4<f32>, FwdCache)> {
        let out = self.run(x, t, RunMode::Train { stop_at: None })?;
        Ok((out.eps.unwrap(), out.cache.unwrap()))
    }

    /// Truncated training-mode forward, stopping after `tap`. Returns the tap
    /// activation and the cache for [`Self::backward_from_tap`].
    pub fn forward_train_to_tap(
        &self,
        x: &Array4<f32>,
        t: &[usize],
        tap: &TapId,
    ) -> Result<(Array4<f32>, FwdCache)> {
        let ord = self.tap_ordinal(tap)?;
        let out = self.run(x, t, RunMode::Train { stop_at: Some(ord) })?;
        Ok((out.stop_activation.unwrap(), out.cache.unwrap()))
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_unit(
        &self,
        unit: &Unit,
        uc: &UnitCache,
        cache: &FwdCache,
        dh: Array4<f32>,
        grads: &mut Gradients,
        dsilu_temb: &mut Array2<f32>,
        skip_grads: &mut [Option<Array4<f32>>],
        need_dx: bool,
    ) -> Option<Array4<f32>> {
        let store = &self.store;
        let d_after_attn = match (&unit.attn, &uc.attn) {
            (Some(attn), Some((attn_in, ac))) => attn.backward(store, attn_in, ac, &dh, grads),
            _ => dh,
        };
        let want_dx = need_dx || uc.consumed_skip.is_some();
        let (dxcat, dtemb) = unit.block.backward(
            store,
            &uc.res,
            &cache.time.silu_temb,
            &d_after_attn,
            grads,
            want_dx,
        );
        *dsilu_temb += &dtemb;
        match uc.consumed_skip {
            Some((skip_idx, h_ch)) => {
                let dxcat = dxcat.unwrap();
                let dmain = dxcat.slice(ndarray::s![.., ..h_ch, .., ..]).to_owned();
                let dskip = dxcat.slice(ndarray::s![.., h_ch.., .., ..]).to_owned();
                match &mut skip_grads[skip_idx] {
                    Some(g) => *g += &dskip,
                    slot => *slot = Some(dskip),
                }
                Some(dmain)
            }
            None => dxcat,
        }
    }

    /// Backpropagates from a gradient on the noise prediction. Returns
    /// accumulated parameter gradients and, when requested, the gradient with
    /// respect to the network input.
    pub fn backward_from_eps(
        &self,
        cache: &FwdCache,
        d_eps: &Array4<f32>,
        need_dx: bool,
    ) -> (Gradients, Option<Array4<f32>>) {
        assert!(cache.stopped_at.is_none(), "cache is truncated");
        let store = &self.store;
        let mut grads = Gradients::new(store);
        let mut dsilu_temb = Array2::zeros(cache.time.silu_temb.dim());
        let mut skip_grads: Vec<Option<Array4<f32>>> = vec![None; cache.n_skip_pushes];

        let (head_in, gnc, gn_out) = cache.head.as_ref().unwrap();
        let d_act = self
            .out_conv
            .backward(store, &silu(gn_out), d_eps, &mut grads, true)
            .unwrap();
        let d_gn_out = silu_backward(gn_out, &d_act);
        let mut dh = self
            .out_norm
            .backward(store, head_in, gnc, &d_gn_out, &mut grads, true)
            .unwrap();

        for (stage, (caches, up_in)) in self.up.iter().zip(&cache.up).rev() {
            if let (Some(conv), Some(up_in)) = (&stage.upsample, up_in) {
                let upsampled = upsample_nearest2(up_in);
                let d_up = conv.backward(store, &upsampled, &dh, &mut grads, true).unwrap();
                dh = upsample_nearest2_backward(&d_up);
            }
            for (unit, uc) in stage.units.iter().zip(caches).rev() {
                dh = self
                    .backward_unit(unit, uc, cache, dh, &mut grads, &mut dsilu_temb, &mut skip_grads, true)
                    .unwrap();
            }
        }

        for (unit, uc) in [&self.mid.1, &self.mid.0].into_iter().zip(cache.mid.iter().rev()) {
            dh = self
                .backward_unit(unit, uc, cache, dh, &mut grads, &mut dsilu_temb, &mut skip_grads, true)
                .unwrap();
        }

        let dx = self.backward_down_and_stem(
            cache, dh, &mut grads, &mut dsilu_temb, &mut skip_grads, need_dx,
        );
        self.time.backward(store, &cache.time, &dsilu_temb, &mut grads);
        (grads, dx)
    }

    /// Backpropagates from a gradient on a tap activation produced by
    /// [`Self::forward_train_to_tap`].
    pub fn backward_from_tap(
        &self,
        cache: &FwdCache,
        tap: &TapId,
        d_act: &Array4<f32>,
        need_dx: bool,
    ) -> Result<(Gradients, Option<Array4<f32>>)> {
        let ord = self.tap_ordinal(tap)?;
        if cache.stopped_at != Some(ord) {
            return Err(Error::contract(format!(
                "cache was not truncated at tap {tap} (stopped at {:?})",
                cache.stopped_at
            )));
        }
        let store = &self.store;
        let mut grads = Gradients::new(store);
        let mut dsilu_temb = Array2::zeros(cache.time.silu_temb.dim());
        let mut skip_grads: Vec<Option<Array4<f32>>> = vec![None; cache.n_skip_pushes];
        let mut dh = d_act.clone();

        match tap.path {
            TapPath::Up => {
                for (stage, (caches, up_in)) in self.up.iter().zip(&cache.up).rev() {
                    if let (Some(conv), Some(up_in)) = (&stage.upsample, up_in) {
                        let upsampled = upsample_nearest2(up_in);
                        let d_up = conv.backward(store, &upsampled, &dh, &mut grads, true).unwrap();
                        dh = upsample_nearest2_backward(&d_up);
                    }
                    for (unit, uc) in stage.units.iter().zip(caches).rev() {
                        dh = self
                            .backward_unit(unit, uc, cache, dh, &mut grads, &mut dsilu_temb, &mut skip_grads, true)
                            .unwrap();
                    }
                }
                for (unit, uc) in [&self.mid.1, &self.mid.0].into_iter().zip(cache.mid.iter().rev()) {
                    dh = self
                        .backward_unit(unit, uc, cache, dh, &mut grads, &mut dsilu_temb, &mut skip_grads, true)
                        .unwrap();
                }
            }
            TapPath::Mid => {
                for (unit, uc) in [&self.mid.1, &self.mid.0]
                    .into_iter()
                    .rev()
                    .take(cache.mid.len())
                    .rev()
                    .zip(cache.mid.iter().rev())
                {
                    dh = self
                        .backward_unit(unit, uc, cache, dh, &mut grads, &mut dsilu_temb, &mut skip_grads, true)
                        .unwrap();
                }
            }
            TapPath::Down => {}
        }

        let dx = self.backward_down_and_stem(
            cache, dh, &mut grads, &mut dsilu_temb, &mut skip_grads, need_dx,
        );
        self.time.backward(store, &cache.time, &dsilu_temb, &mut grads);
        Ok((grads, dx))
    }

    /// Shared tail of every backward pass: down stages deep-to-shallow, then
    /// the stem. For truncated caches the incoming gradient seeds the deepest
    /// unit that actually ran.
    fn backward_down_and_stem(
        &self,
        cache: &FwdCache,
        dh_in: Array4<f32>,
        grads: &mut Gradients,
        dsilu_temb: &mut Array2<f32>,
        skip_grads: &mut [Option<Array4<f32>>],
        need_dx: bool,
    ) -> Option<Array4<f32>> {
        let store = &self.store;
        let mut dh = dh_in;
        // push indices: stem = 0, then per stage its blocks and downsample
        let mut push_idx: Vec<(usize, Option<usize>)> = Vec::new();
        {
            let mut idx = 1usize;
            for s in 0..self.config.stages() {
                let first = idx;
                idx += self.config.blocks_per_resolution;
                let ds = (s + 1 < self.config.stages()).then(|| {
                    let v = idx;
                    idx += 1;
                    v
                });
                push_idx.push((first, ds));
            }
        }

        for (s, (stage, (caches, down_in))) in self.down.iter().zip(&cache.down).enumerate().rev()
        {
            if caches.is_empty() && down_in.is_none() {
                continue; // truncated before this stage ran
            }
            let (first_push, ds_push) = push_idx[s];
            if let (Some(conv), Some(din)) = (&stage.downsample, down_in) {
                let mut d_out = dh;
                if let Some(g) = skip_grads[ds_push.unwrap()].take() {
                    d_out += &g;
                }
                dh = conv.backward(store, din, &d_out, grads, true).unwrap();
            }
            for (b, (unit, uc)) in stage.units.iter().zip(caches).enumerate().rev() {
                let mut d_out = dh;
                if let Some(g) = skip_grads[first_push + b].take() {
                    d_out += &g;
                }
                dh = self
                    .backward_unit(unit, uc, cache, d_out, grads, dsilu_temb, skip_grads, true)
                    .unwrap();
            }
        }
        let mut d_stem_out = dh;
        if let Some(g) = skip_grads[0].take() {
            d_stem_out += &g;
        }
        self.stem.backward(store, &cache.x_in, &d_stem_out, grads, need_dx)
    }

    /// Saves weights to the container format, with the configuration as a
    /// JSON sidecar at `<path>.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.store.to_tensor_map().save(path)?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        std::fs::write(&sidecar, json).map_err(|e| Error::io(e, sidecar))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar = sidecar_path(path);
        let raw = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(e, sidecar))?;
        let config: DDAEConfig = serde_json::from_str(&raw)?;
        let mut net = build_ddae(&config, 0)?;
        let map = TensorMap::load(path)?;
        net.store.load_tensor_map(&map)?;
        Ok(net)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// A truncation of the network at one tap with the timestep fixed: clean or
/// noised images in, pooled feature vectors out.
pub struct Encoder {
    net: DDAENetwork,
    tap: TapId,
    t_fixed: usize,
}

/// Truncates `net` at `tap`, fixing the timestep input to `t_fixed`. The
/// encoder owns a copy of the weights.
pub fn truncate(net: &DDAENetwork, tap: &TapId, t_fixed: usize) -> Result<Encoder> {
    net.tap_ordinal(tap)?;
    if t_fixed == 0 {
        return Err(Error::contract("t_fixed is 1-based; got 0"));
    }
    let mut copy = build_ddae(&net.config, 0)?;
    copy.store.load_tensor_map(&net.store.to_tensor_map())?;
    Ok(Encoder { net: copy, tap: *tap, t_fixed })
}

impl Encoder {
    pub fn tap(&self) -> &TapId {
        &self.tap
    }

    pub fn t_fixed(&self) -> usize {
        self.t_fixed
    }

    pub fn network(&self) -> &DDAENetwork {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut DDAENetwork {
        &mut self.net
    }

    pub fn feature_dim(&self) -> usize {
        self.net.tap_channels(&self.tap).unwrap()
    }

    /// Pooled tap activation at the fixed timestep, `[N, C_tap]`.
    pub fn encode(&self, x: &Array4<f32>) -> Result<Array2<f32>> {
        let t = vec![self.t_fixed; x.dim().0];
        let (_, acts) = self
            .net
            .forward_taps(x, &t, std::slice::from_ref(&self.tap), true)?;
        Ok(global_avg_pool(&acts[0]))
    }

    /// Training-mode encode keeping the cache; pair with
    /// [`Self::backward_features`].
    pub fn encode_train(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Array4<f32>, FwdCache)> {
        let t = vec![self.t_fixed; x.dim().0];
        let (act, cache) = self.net.forward_train_to_tap(&x.clone(), &t, &self.tap)?;
        Ok((global_avg_pool(&act), act, cache))
    }

    /// Backpropagates a gradient on the pooled features into the encoder's
    /// parameters (and optionally its input).
    pub fn backward_features(
        &self,
        cache: &FwdCache,
        act_shape: (usize, usize, usize, usize),
        d_features: &Array2<f32>,
        need_dx: bool,
    ) -> Result<(Gradients, Option<Array4<f32>>)> {
        let d_act = crate::nn::global_avg_pool_backward(d_features, act_shape.2, act_shape.3);
        self.net.backward_from_tap(cache, &self.tap, &d_act, need_dx)
    }
}
