//! The conditional noise predictor.
//!
//! Four parts:
//! - a sinusoidal embedding of the time step,
//! - an image encoder (two residual blocks, RGB to `base_channels`),
//! - a segmentation encoder (two residual blocks, classes to `base_channels`),
//! - a U-shaped encoder-decoder over the summed encodings, time-conditioned
//!   in every residual block, with efficient attention at the bottleneck.
//!
//! Stage `i` of the encoder-decoder works at `base_channels * 2^i` channels
//! and `1 / 2^i` resolution. Down-sampling is a stride-2 convolution,
//! up-sampling is nearest-neighbour followed by a convolution, and skip
//! connections are concatenated on the channel axis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::attention::{AttentionBlock, AttentionCache};
use crate::nn::layers::{
    silu, silu_backward, upsample_nearest2, upsample_nearest2_backward, Conv2d, ConvCache,
    GroupNorm, NormCache, ResBlock, ResBlockCache,
};
use crate::nn::{time_embed, ParamKind, ParamStore};
use crate::tensor::{Image, NoiseTensor, Real, SegMap, Tensor};

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub attention_at_bottleneck: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 3,
            embed_dim: 64,
            num_classes: 8,
            attention_at_bottleneck: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.base_channels < 4 {
            return bad(format!("base_channels must be >= 4, got {}", self.base_channels));
        }
        if self.depth < 1 {
            return bad("depth must be >= 1".into());
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim must be even and >= 2, got {}", self.embed_dim));
        }
        if self.num_classes < 1 || self.num_classes > 256 {
            return bad(format!("num_classes must lie in 1..=256, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Channel width of encoder-decoder stage `level` (`0..=depth`).
    pub fn stage_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(DenoiserNetwork::<f32>::new(self.clone(), 0)?.params().len())
    }
}

#[derive(Debug, Clone)]
struct DownStage {
    blocks: [ResBlock; 2],
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: Conv2d,
    blocks: [ResBlock; 2],
}

#[derive(Debug, Clone)]
struct ForwardRecord<F> {
    temb: Vec<F>,
    image_enc: Vec<ResBlockCache<F>>,
    seg_enc: Vec<ResBlockCache<F>>,
    down: Vec<(Vec<ResBlockCache<F>>, ConvCache<F>)>,
    mid_in: ResBlockCache<F>,
    attention: Option<AttentionCache<F>>,
    mid_out: ResBlockCache<F>,
    /// In execution order (deepest stage first).
    up: Vec<(ConvCache<F>, Vec<ResBlockCache<F>>)>,
    out_norm: NormCache<F>,
    out_pre: Tensor<F>,
    out_gate: Tensor<F>,
    out_conv: ConvCache<F>,
    output_shape: (usize, usize, usize),
}

/// Noise predictor `eps(s_t, x, t)` with recorded forward state for backprop.
#[derive(Debug, Clone)]
pub struct DenoiserNetwork<F: Real = f32> {
    config: DenoiserConfig,
    params: ParamStore<F>,
    image_enc: [ResBlock; 2],
    seg_enc: [ResBlock; 2],
    down: Vec<DownStage>,
    mid_in: ResBlock,
    attention: Option<AttentionBlock>,
    mid_out: ResBlock,
    /// In execution order (deepest stage first).
    up: Vec<UpStage>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    record: Option<ForwardRecord<F>>,
}

/// Networks are equal when their configuration and parameters are.
impl<F: Real> PartialEq for DenoiserNetwork<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<F: Real> DenoiserNetwork<F> {
    /// Builds and initializes a network. Convolution and projection weights
    /// use fan-in scaled uniform draws, biases and norm shifts start at
    /// zero, norm scales at one, and the final convolution at zero so an
    /// untrained network predicts no noise.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let base = config.base_channels;
        let emb = Some(config.embed_dim);

        let image_enc = [
            ResBlock::new(s, rng, "image_enc.0", 3, base, KERNEL, None),
            ResBlock::new(s, rng, "image_enc.1", base, base, KERNEL, None),
        ];
        let seg_enc = [
            ResBlock::new(s, rng, "seg_enc.0", config.num_classes, base, KERNEL, None),
            ResBlock::new(s, rng, "seg_enc.1", base, base, KERNEL, None),
        ];

        let mut down = Vec::with_capacity(config.depth);
        let mut cin = base;
        for level in 0..config.depth {
            let ch = config.stage_channels(level);
            let name = format!("down.{level}");
            down.push(DownStage {
                blocks: [
                    ResBlock::new(s, rng, &format!("{name}.block0"), cin, ch, KERNEL, emb),
                    ResBlock::new(s, rng, &format!("{name}.block1"), ch, ch, KERNEL, emb),
                ],
                down: Conv2d::new(
                    s,
                    rng,
                    &format!("{name}.downsample"),
                    ch,
                    ch,
                    KERNEL,
                    2,
                    ParamKind::ConvKernel,
                    false,
                ),
            });
            cin = ch;
        }

        let bottom = config.stage_channels(config.depth);
        let mid_in = ResBlock::new(s, rng, "mid.block0", cin, bottom, KERNEL, emb);
        let attention = config
            .attention_at_bottleneck
            .then(|| AttentionBlock::new(s, rng, "mid.attention", bottom));
        let mid_out = ResBlock::new(s, rng, "mid.block1", bottom, bottom, KERNEL, emb);

        let mut up = Vec::with_capacity(config.depth);
        let mut cin = bottom;
        for level in (0..config.depth).rev() {
            let ch = config.stage_channels(level);
            let name = format!("up.{level}");
            up.push(UpStage {
                up: Conv2d::new(
                    s,
                    rng,
                    &format!("{name}.upsample"),
                    cin,
                    cin,
                    KERNEL,
                    1,
                    ParamKind::ConvKernel,
                    false,
                ),
                blocks: [
                    ResBlock::new(s, rng, &format!("{name}.block0"), cin + ch, ch, KERNEL, emb),
                    ResBlock::new(s, rng, &format!("{name}.block1"), ch, ch, KERNEL, emb),
                ],
            });
            cin = ch;
        }

        let out_norm = GroupNorm::new(s, rng, "out.norm", base);
        let out_conv = Conv2d::new(
            s,
            rng,
            "out.conv",
            base,
            config.num_classes,
            KERNEL,
            1,
            ParamKind::ConvKernel,
            true,
        );

        Ok(Self {
            config,
            params: store,
            image_enc,
            seg_enc,
            down,
            mid_in,
            attention,
            mid_out,
            up,
            out_norm,
            out_conv,
            record: None,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn has_record(&self) -> bool {
        self.record.is_some()
    }

    /// Same architecture and values at another precision.
    pub fn cast<G: Real>(&self) -> DenoiserNetwork<G> {
        let mut net = DenoiserNetwork::<G>::new(self.config.clone(), 0).expect("validated config");
        for (dst, src) in net.params.values_mut().iter_mut().zip(self.params.values()) {
            *dst = G::of(src.f64());
        }
        net
    }

    pub fn check_input(&self, noisy: &SegMap<F>, image: &Image<F>) -> Result<()> {
        let (c, h, w) = noisy.shape();
        if c != self.config.num_classes {
            return Err(Error::Shape(format!(
                "network predicts {} classes, segmentation map has {c}",
                self.config.num_classes
            )));
        }
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got {}",
                image.channels()
            )));
        }
        if (image.height(), image.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "image is {}x{} but segmentation map is {h}x{w}",
                image.height(),
                image.width()
            )));
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} is not a positive multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Predicts the total noise in `noisy` and records the intermediate
    /// state needed by [`Self::backward`].
    pub fn forward(
        &mut self,
        noisy: &SegMap<F>,
        image: &Image<F>,
        t: usize,
    ) -> Result<NoiseTensor<F>> {
        let (out, record) = self.run(noisy, image, t)?;
        self.record = Some(record);
        Ok(out)
    }

    /// Like [`Self::forward`] without keeping any state.
    pub fn predict(&self, noisy: &SegMap<F>, image: &Image<F>, t: usize) -> Result<NoiseTensor<F>> {
        self.run(noisy, image, t).map(|(out, _)| out)
    }

    fn run(
        &self,
        noisy: &SegMap<F>,
        image: &Image<F>,
        t: usize,
    ) -> Result<(NoiseTensor<F>, ForwardRecord<F>)> {
        self.check_input(noisy, image)?;
        let p = self.params.values();
        let temb: Vec<F> = time_embed(t, self.config.embed_dim)?
            .values()
            .iter()
            .map(|&v| F::of(v))
            .collect();
        let te = Some(temb.as_slice());

        let encode = |blocks: &[ResBlock; 2], x: &Tensor<F>| -> Result<_> {
            let (h, c0) = blocks[0].forward(p, x, None)?;
            let (h, c1) = blocks[1].forward(p, &h, None)?;
            Ok((h, vec![c0, c1]))
        };
        let (fi, image_enc) = encode(&self.image_enc, image)?;
        let (fs, seg_enc) = encode(&self.seg_enc, noisy)?;
        let mut h = fi;
        h.data_mut()
            .iter_mut()
            .zip(fs.data())
            .for_each(|(a, &b)| *a += b);

        let mut skips = Vec::with_capacity(self.down.len());
        let mut down = Vec::with_capacity(self.down.len());
        for stage in &self.down {
            let (x, c0) = stage.blocks[0].forward(p, &h, te)?;
            let (x, c1) = stage.blocks[1].forward(p, &x, te)?;
            let (x_down, dc) = stage.down.forward(p, &x)?;
            skips.push(x);
            down.push((vec![c0, c1], dc));
            h = x_down;
        }

        let (x, mid_in) = self.mid_in.forward(p, &h, te)?;
        let (x, attention) = match &self.attention {
            Some(att) => {
                let (y, cache) = att.forward(p, &x)?;
                (y, Some(cache))
            }
            None => (x, None),
        };
        let (mut h, mid_out) = self.mid_out.forward(p, &x, te)?;

        let mut up = Vec::with_capacity(self.up.len());
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            let (x, uc) = stage.up.forward(p, &upsample_nearest2(&h))?;
            let x = x.concat_channels(&skip)?;
            let (x, c0) = stage.blocks[0].forward(p, &x, te)?;
            let (x, c1) = stage.blocks[1].forward(p, &x, te)?;
            up.push((uc, vec![c0, c1]));
            h = x;
        }

        let (out_pre, out_norm) = self.out_norm.forward(p, &h)?;
        let (act, out_gate) = silu(&out_pre);
        let (out, out_conv) = self.out_conv.forward(p, &act)?;
        let output_shape = out.shape();
        Ok((
            out,
            ForwardRecord {
                temb,
                image_enc,
                seg_enc,
                down,
                mid_in,
                attention,
                mid_out,
                up,
                out_norm,
                out_pre,
                out_gate,
                out_conv,
                output_shape,
            },
        ))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient at the output of the last [`Self::forward`] call.
    ///
    /// The recorded state is consumed.
    pub fn backward(&mut self, grad_output: &NoiseTensor<F>) -> Result<Vec<F>> {
        let rec = self.record.take().ok_or(Error::NoForwardRecord)?;
        if grad_output.shape() != rec.output_shape {
            let shape = grad_output.shape();
            self.record = Some(rec);
            return Err(Error::Shape(format!(
                "output gradient {shape:?} does not match the recorded output"
            )));
        }
        let p = self.params.values();
        let mut grads = vec![F::zero(); p.len()];
        let g = grads.as_mut_slice();
        let te = Some(rec.temb.as_slice());

        let dh = self.out_conv.backward(p, g, &rec.out_conv, grad_output);
        let dh = silu_backward(&rec.out_pre, &rec.out_gate, &dh);
        let mut dh = self.out_norm.backward(p, g, &rec.out_norm, &dh);

        let mut skip_grads = Vec::with_capacity(self.up.len());
        for (stage, (uc, caches)) in self.up.iter().zip(&rec.up).rev() {
            let dx = stage.blocks[1].backward(p, g, &caches[1], te, &dh);
            let dx = stage.blocks[0].backward(p, g, &caches[0], te, &dx);
            let (d_up, d_skip) = dx.split_channels(stage.up.cout);
            skip_grads.push(d_skip);
            let d_up = stage.up.backward(p, g, uc, &d_up);
            dh = upsample_nearest2_backward(&d_up);
        }

        let dx = self.mid_out.backward(p, g, &rec.mid_out, te, &dh);
        let dx = match (&self.attention, &rec.attention) {
            (Some(att), Some(cache)) => att.backward(p, g, cache, &dx),
            _ => dx,
        };
        dh = self.mid_in.backward(p, g, &rec.mid_in, te, &dx);

        // skip_grads[0] belongs to level 0, the last stage walked above
        for (stage, (caches, dc)) in self.down.iter().zip(&rec.down).rev() {
            let mut dx = stage.down.backward(p, g, dc, &dh);
            let d_skip = skip_grads.pop().expect("one skip gradient per stage");
            dx.data_mut()
                .iter_mut()
                .zip(d_skip.data())
                .for_each(|(a, &b)| *a += b);
            let dx = stage.blocks[1].backward(p, g, &caches[1], te, &dx);
            dh = stage.blocks[0].backward(p, g, &caches[0], te, &dx);
        }

        for (blocks, caches) in [(&self.image_enc, &rec.image_enc), (&self.seg_enc, &rec.seg_enc)] {
            let dx = blocks[1].backward(p, g, &caches[1], None, &dh);
            blocks[0].backward(p, g, &caches[0], None, &dx);
        }
        Ok(grads)
    }
}
