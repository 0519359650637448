//! Feature extractors mapping images to `[B, C, H, W]` feature maps.
//!
//! Backbones sit behind the [`Encoder`] trait and are looked up by name in an
//! [`EncoderRegistry`]; only the small U-Net ships here.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::batch::ImageBatch;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{conv2d_block, max_pool2, upsample2, Bound, Conv2d, ParamStore};
use crate::tensor::Tensor;

pub trait Encoder: Send + Sync {
    fn name(&self) -> &'static str;

    fn out_channels(&self) -> usize;

    /// Input height and width must be multiples of this.
    fn spatial_multiple(&self) -> usize;

    /// `x [B, 3, H, W]` to `Z [B, C, H, W]`.
    fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var>;
}

pub type EncoderBuilder =
    fn(&ModelConfig, &mut ParamStore, &mut ChaCha8Rng) -> Result<Box<dyn Encoder>>;

pub struct EncoderRegistry {
    builders: BTreeMap<&'static str, EncoderBuilder>,
}

impl Default for EncoderRegistry {
    fn default() -> Self {
        let mut r = Self {
            builders: BTreeMap::new(),
        };
        r.register("unet", |cfg, store, rng| {
            Ok(Box::new(UNet::new(
                store,
                cfg.encoder_depth,
                cfg.encoder_width,
                cfg.channels,
                rng,
            )))
        });
        r
    }
}

impl EncoderRegistry {
    pub fn register(&mut self, name: &'static str, builder: EncoderBuilder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(
        &self,
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Box<dyn Encoder>> {
        let builder = self
            .builders
            .get(cfg.encoder.as_str())
            .ok_or_else(|| Error::Unknown {
                kind: "encoder",
                name: cfg.encoder.clone(),
                available: self.names().join(", "),
            })?;
        builder(cfg, store, rng)
    }
}

/// Check `x` against an encoder's shape contract before running it.
pub fn check_input(encoder: &dyn Encoder, x: &ImageBatch) -> Result<()> {
    let (_, h, w) = x.dims();
    let m = encoder.spatial_multiple();
    if h % m != 0 {
        return Err(Error::Shape(format!("height {h} is not divisible by {m}")));
    }
    if w % m != 0 {
        return Err(Error::Shape(format!("width {w} is not divisible by {m}")));
    }
    Ok(())
}

/// Run an encoder outside of training, on frozen parameters.
pub fn encode(encoder: &dyn Encoder, params: &ParamStore, x: &ImageBatch) -> Result<Tensor> {
    check_input(encoder, x)?;
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let xv = g.constant(x.tensor().clone());
    let z = encoder.encode(&mut g, &bound, xv)?;
    Ok(g.value(z).clone())
}

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Clone, Debug)]
struct DoubleConv {
    first: Conv2d,
    second: Conv2d,
}

impl DoubleConv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            first: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, rng),
            second: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let x = conv2d_block(g, p, &self.first, x)?;
        conv2d_block(g, p, &self.second, x)
    }
}

/// Contracting/expanding U-Net with concatenated skips, max-pool down,
/// bilinear up and a 1x1 projection to the output channels.
#[derive(Clone, Debug)]
pub struct UNet {
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<DoubleConv>,
    head: Conv2d,
    depth: usize,
    out_channels: usize,
}

impl UNet {
    pub fn new(
        store: &mut ParamStore,
        depth: usize,
        width: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut down = Vec::with_capacity(depth);
        let mut cin = 3;
        for level in 0..depth {
            let cout = width << level;
            down.push(DoubleConv::new(
                store,
                &format!("encoder.down{level}"),
                cin,
                cout,
                rng,
            ));
            cin = cout;
        }
        let bottleneck = DoubleConv::new(store, "encoder.bottleneck", cin, width << depth, rng);
        let mut up = Vec::with_capacity(depth);
        let mut below = width << depth;
        for level in (0..depth).rev() {
            let skip = width << level;
            up.push(DoubleConv::new(
                store,
                &format!("encoder.up{level}"),
                below + skip,
                skip,
                rng,
            ));
            below = skip;
        }
        let head = Conv2d::new(store, "encoder.head", width, out_channels, 1, rng);
        Self {
            down,
            bottleneck,
            up,
            head,
            depth,
            out_channels,
        }
    }
}

impl Encoder for UNet {
    fn name(&self) -> &'static str {
        "unet"
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = x;
        for stage in &self.down {
            h = stage.forward(g, p, h)?;
            skips.push(h);
            h = max_pool2(g, h)?;
        }
        h = self.bottleneck.forward(g, p, h)?;
        for stage in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let upsampled = upsample2(g, h)?;
            let joined = g.concat_channels(&[upsampled, skip])?;
            h = stage.forward(g, p, joined)?;
        }
        self.head.forward(g, p, h)
    }
}
