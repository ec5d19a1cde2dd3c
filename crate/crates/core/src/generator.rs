//! The translation network `G(x, y) = F(E_c(x), E_s(y))`.
//!
//! `E_c` maps the source to a content code at 1/4 resolution, `E_s` maps the
//! reference to one `(gamma, beta)` pair per style-injection site, and the
//! decoder `F` runs a residual-free ASC bottleneck followed by FST
//! upsampling blocks that inject style right after each upsampling.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylefat_autograd::{Scalar, Tensor};

use crate::error::{ensure, Error, Result};
use crate::layers::{act, global_avg_pool, Conv2d, Linear};
use crate::normalization::{in_unchecked, lin_unchecked, polin_unchecked, AffineStyle, MixWeights};
use crate::params::{Constraint, ParamId, ParamStore};
use crate::types::ImageBatch;

/// Normalization used where the architecture places plain PoLIN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolinMode {
    Polin,
    In,
    Lin,
}

/// Normalization used at every style-injection site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaPolinMode {
    Adapolin,
    Adain,
    Adalin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub bottleneck_channels: usize,
    /// Convolution layers in the ASC bottleneck.
    pub asc_depth: usize,
    pub fst_count: usize,
    pub style_dim: usize,
    /// `false` swaps the ASC block for residual blocks.
    pub use_asc: bool,
    /// `false` turns FST blocks into plain upsampling blocks (IN, no style).
    pub use_fst_style_injection: bool,
    /// `false` replaces the bottleneck's adaptive normalizations with their
    /// plain counterpart, so style reaches the decoder only through FST.
    pub bottleneck_style_injection: bool,
    pub polin_mode: PolinMode,
    pub adapolin_mode: AdaPolinMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 128,
            base_channels: 64,
            bottleneck_channels: 256,
            asc_depth: 4,
            fst_count: 2,
            style_dim: 256,
            use_asc: true,
            use_fst_style_injection: true,
            bottleneck_style_injection: true,
            polin_mode: PolinMode::Polin,
            adapolin_mode: AdaPolinMode::Adapolin,
        }
    }
}

/// Downsampling stages in the content encoder (content code is 1/4 size).
pub const CONTENT_DOWNSAMPLES: usize = 2;
const STYLE_DOWNSAMPLES: usize = 4;
const CONTENT_PLAIN_BLOCKS: usize = 2;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.image_size >= 16 && self.image_size.is_power_of_two(),
            Config,
            "image_size must be a power of two >= 16, got {}",
            self.image_size
        );
        ensure!(
            self.fst_count == CONTENT_DOWNSAMPLES,
            Config,
            "fst_count must equal the {CONTENT_DOWNSAMPLES} content downsampling stages, got {}",
            self.fst_count
        );
        ensure!(
            self.bottleneck_channels >= 4 && self.bottleneck_channels % (1 << self.fst_count) == 0,
            Config,
            "bottleneck_channels must be divisible by {}, got {}",
            1 << self.fst_count,
            self.bottleneck_channels
        );
        ensure!(
            self.base_channels >= 1 && self.asc_depth >= 1 && self.style_dim >= 1,
            Config,
            "base_channels, asc_depth and style_dim must be positive"
        );
        Ok(())
    }

    /// Width of the decoder feature map after FST stage `stage`.
    pub fn fst_out_channels(&self, stage: usize) -> usize {
        self.bottleneck_channels >> (stage + 1)
    }
}

/// Bottleneck content code `[N, C_b, S/4, S/4]`.
#[derive(Clone, Debug)]
pub struct ContentCode<T: Scalar>(pub Tensor<T>);

/// Per-site style parameters, one entry per style-injection site in
/// decoding order.
#[derive(Clone, Debug)]
pub struct StyleParams<T: Scalar> {
    pub per_site: Vec<AffineStyle<T>>,
}

#[derive(Clone, Debug)]
pub struct StyleSite {
    pub name: String,
    pub channels: usize,
}

#[derive(Clone, Debug)]
enum NormLayer {
    Instance,
    Lin { rho: ParamId },
    Polin { weight: ParamId, bias: ParamId },
    AdaPolin { weight: ParamId, site: usize },
    AdaIn { site: usize },
    AdaLin { rho: ParamId, site: usize },
}

impl NormLayer {
    fn plain<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, mode: PolinMode) -> Self {
        match mode {
            PolinMode::In => NormLayer::Instance,
            PolinMode::Lin => NormLayer::Lin {
                rho: store.add(
                    format!("{name}.rho"),
                    Tensor::full(&[channels], T::from_f64_lossy(0.5)),
                    Constraint::UnitInterval,
                ),
            },
            PolinMode::Polin => {
                let init = MixWeights::<T>::instance_selection(channels);
                NormLayer::Polin {
                    weight: store.add(format!("{name}.mix"), init.weight, Constraint::Free),
                    bias: store.add(
                        format!("{name}.mix_bias"),
                        Tensor::zeros(&[channels]),
                        Constraint::Free,
                    ),
                }
            }
        }
    }

    fn adaptive<T: Scalar>(
        store: &mut ParamStore<T>,
        sites: &mut Vec<StyleSite>,
        name: &str,
        channels: usize,
        mode: AdaPolinMode,
    ) -> Self {
        let site = sites.len();
        sites.push(StyleSite {
            name: name.to_string(),
            channels,
        });
        match mode {
            AdaPolinMode::Adain => NormLayer::AdaIn { site },
            AdaPolinMode::Adalin => NormLayer::AdaLin {
                rho: store.add(
                    format!("{name}.rho"),
                    Tensor::full(&[channels], T::from_f64_lossy(0.5)),
                    Constraint::UnitInterval,
                ),
                site,
            },
            AdaPolinMode::Adapolin => {
                let init = MixWeights::<T>::instance_selection(channels);
                NormLayer::AdaPolin {
                    weight: store.add(format!("{name}.mix"), init.weight, Constraint::Free),
                    site,
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, p: &ParamStore<T>, z: &Tensor<T>, style: &StyleParams<T>) -> Tensor<T> {
        match self {
            NormLayer::Instance => in_unchecked(z),
            NormLayer::Lin { rho } => lin_unchecked(z, p.get(*rho)),
            NormLayer::Polin { weight, bias } => polin_unchecked(z, p.get(*weight), Some(p.get(*bias))),
            NormLayer::AdaPolin { weight, site } => {
                style.per_site[*site].apply(&polin_unchecked(z, p.get(*weight), None))
            }
            NormLayer::AdaIn { site } => style.per_site[*site].apply(&in_unchecked(z)),
            NormLayer::AdaLin { rho, site } => {
                style.per_site[*site].apply(&lin_unchecked(z, p.get(*rho)))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    norm1: NormLayer,
    conv2: Conv2d,
    norm2: NormLayer,
}

#[derive(Clone, Debug)]
enum Bottleneck {
    /// `asc_depth` x [conv3x3 -> adaptive norm -> activation], no skips.
    Asc(Vec<(Conv2d, NormLayer)>),
    /// Residual blocks holding the same number of convolutions.
    Residual(Vec<ResBlock>),
}

#[derive(Clone, Debug)]
struct FstBlock {
    conv1: Conv2d,
    norm1: NormLayer,
    conv2: Conv2d,
    norm2: NormLayer,
}

#[derive(Clone, Debug)]
struct ContentEncoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    blocks: Vec<Conv2d>,
}

#[derive(Clone, Debug)]
struct StyleEncoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    latent: Linear,
    heads: Vec<Linear>,
}

/// Layer layout of a generator; parameters live in a separate store so the
/// live and averaged generators can share one architecture.
#[derive(Clone, Debug)]
pub struct GeneratorArch {
    config: GeneratorConfig,
    content: ContentEncoder,
    style: StyleEncoder,
    bottleneck: Bottleneck,
    fst: Vec<FstBlock>,
    to_rgb: Conv2d,
    sites: Vec<StyleSite>,
    bottleneck_sites: usize,
}

/// Generator architecture plus one parameter set.
#[derive(Clone, Debug)]
pub struct Generator<T: Scalar> {
    arch: Arc<GeneratorArch>,
    params: ParamStore<T>,
}

impl<T: Scalar> Generator<T> {
    /// Builds a generator with parameters drawn from `seed`.
    pub fn new(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        let (b, cb) = (config.base_channels, config.bottleneck_channels);

        let mut downs = Vec::new();
        let mut ch = b;
        for i in 0..CONTENT_DOWNSAMPLES {
            let out = if i + 1 == CONTENT_DOWNSAMPLES { cb } else { ch * 2 };
            downs.push(Conv2d::new(&mut store, rng, &format!("enc_c.down{i}"), ch, out, 4, 2, 1, true));
            ch = out;
        }
        let content = ContentEncoder {
            stem: Conv2d::new(&mut store, rng, "enc_c.stem", 3, b, 7, 1, 3, true),
            downs,
            blocks: (0..CONTENT_PLAIN_BLOCKS)
                .map(|i| Conv2d::new(&mut store, rng, &format!("enc_c.block{i}"), cb, cb, 3, 1, 1, true))
                .collect(),
        };

        let mut sites = Vec::new();
        let bottleneck_norm = |store: &mut ParamStore<T>, sites: &mut Vec<StyleSite>, name: &str| {
            if config.bottleneck_style_injection {
                NormLayer::adaptive(store, sites, name, cb, config.adapolin_mode)
            } else {
                NormLayer::plain(store, name, cb, config.polin_mode)
            }
        };
        let bottleneck = if config.use_asc {
            Bottleneck::Asc(
                (0..config.asc_depth)
                    .map(|i| {
                        let name = format!("dec.asc{i}");
                        let conv = Conv2d::new(&mut store, rng, &format!("{name}.conv"), cb, cb, 3, 1, 1, true);
                        let norm = bottleneck_norm(&mut store, &mut sites, &format!("{name}.norm"));
                        (conv, norm)
                    })
                    .collect(),
            )
        } else {
            Bottleneck::Residual(
                (0..config.asc_depth.div_ceil(2))
                    .map(|i| {
                        let name = format!("dec.res{i}");
                        let conv1 = Conv2d::new(&mut store, rng, &format!("{name}.conv1"), cb, cb, 3, 1, 1, true);
                        let norm1 = bottleneck_norm(&mut store, &mut sites, &format!("{name}.norm1"));
                        let conv2 = Conv2d::new(&mut store, rng, &format!("{name}.conv2"), cb, cb, 3, 1, 1, true);
                        let norm2 = bottleneck_norm(&mut store, &mut sites, &format!("{name}.norm2"));
                        ResBlock { conv1, norm1, conv2, norm2 }
                    })
                    .collect(),
            )
        };
        let bottleneck_sites = sites.len();

        let mut fst = Vec::new();
        let mut ch = cb;
        for stage in 0..config.fst_count {
            let out = config.fst_out_channels(stage);
            let name = format!("dec.fst{stage}");
            let conv1 = Conv2d::new(&mut store, rng, &format!("{name}.conv1"), ch, out, 3, 1, 1, true);
            let norm1 = if config.use_fst_style_injection {
                NormLayer::adaptive(&mut store, &mut sites, &format!("{name}.norm1"), out, config.adapolin_mode)
            } else {
                NormLayer::Instance
            };
            let conv2 = Conv2d::new(&mut store, rng, &format!("{name}.conv2"), out, out, 3, 1, 1, true);
            let norm2 = if config.use_fst_style_injection {
                NormLayer::plain(&mut store, &format!("{name}.norm2"), out, config.polin_mode)
            } else {
                NormLayer::Instance
            };
            fst.push(FstBlock { conv1, norm1, conv2, norm2 });
            ch = out;
        }
        let to_rgb = Conv2d::new(&mut store, rng, "dec.to_rgb", ch, 3, 7, 1, 3, true);

        let mut s_downs = Vec::new();
        let mut sch = b;
        for i in 0..STYLE_DOWNSAMPLES {
            let out = (b << (i + 1)).min(cb);
            s_downs.push(Conv2d::new(&mut store, rng, &format!("enc_s.down{i}"), sch, out, 4, 2, 1, true));
            sch = out;
        }
        let d = config.style_dim;
        let style = StyleEncoder {
            stem: Conv2d::new(&mut store, rng, "enc_s.stem", 3, b, 7, 1, 3, true),
            downs: s_downs,
            latent: Linear::new(&mut store, rng, "enc_s.latent", sch, d, (2.0 / sch as f64).sqrt(), |_| 0.0),
            heads: sites
                .iter()
                .map(|site| {
                    let c = site.channels;
                    // [gamma | beta]; gamma starts around 1, beta around 0
                    Linear::new(
                        &mut store,
                        rng,
                        &format!("enc_s.head.{}", site.name),
                        d,
                        2 * c,
                        (1.0 / d as f64).sqrt(),
                        |j| if j < c { 1.0 } else { 0.0 },
                    )
                })
                .collect(),
        };

        let arch = GeneratorArch {
            config: config.clone(),
            content,
            style,
            bottleneck,
            fst,
            to_rgb,
            sites,
            bottleneck_sites,
        };
        Ok(Generator {
            arch: Arc::new(arch),
            params: store,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.arch.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture with another parameter set of identical layout.
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        self.params.ensure_same_layout(&params)?;
        Ok(Generator {
            arch: Arc::clone(&self.arch),
            params,
        })
    }

    /// Style-injection sites in decoding order.
    pub fn style_sites(&self) -> &[StyleSite] {
        &self.arch.sites
    }

    /// Ids of parameters whose name starts with `prefix` (`enc_c.`, `enc_s.`
    /// or `dec.`).
    pub fn param_group(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|id| self.params.name(*id).starts_with(prefix))
            .collect()
    }

    pub fn encode_content(&self, x: &ImageBatch<T>) -> Result<ContentCode<T>> {
        Ok(ContentCode(self.content_forward(x.tensor())))
    }

    pub fn encode_style(&self, y: &ImageBatch<T>) -> Result<StyleParams<T>> {
        Ok(self.style_forward(y.tensor()))
    }

    /// Style latent `[N, d_s]` before the per-site heads.
    pub fn style_latent(&self, y: &ImageBatch<T>) -> Tensor<T> {
        self.latent_forward(y.tensor())
    }

    /// The bottleneck block (ASC, or residual blocks when ablated).
    pub fn asc_block(&self, alpha: &ContentCode<T>, style: &StyleParams<T>) -> Result<Tensor<T>> {
        self.check_code(alpha)?;
        self.check_style(style, alpha.0.shape()[0])?;
        Ok(self.bottleneck_forward(&alpha.0, style))
    }

    /// One FST block: upsample x2 -> conv3x3 -> AdaPoLIN -> act -> conv3x3
    /// -> PoLIN -> act.
    pub fn fst_block(&self, f: &Tensor<T>, style: &StyleParams<T>, stage: usize) -> Result<Tensor<T>> {
        ensure!(
            stage < self.arch.fst.len(),
            Contract,
            "FST stage {stage} out of range (have {})",
            self.arch.fst.len()
        );
        let expected = self.fst_in_channels(stage);
        ensure!(
            f.ndim() == 4 && f.shape()[1] == expected,
            Shape,
            "FST stage {stage} expects [N, {expected}, H, W], got {:?}",
            f.shape()
        );
        self.check_style(style, f.shape()[0])?;
        Ok(self.fst_forward(f, style, stage))
    }

    /// Decoder `F(alpha, style)`: bottleneck, FST stack, RGB head with tanh.
    pub fn decode(&self, alpha: &ContentCode<T>, style: &StyleParams<T>) -> Result<ImageBatch<T>> {
        self.check_code(alpha)?;
        self.check_style(style, alpha.0.shape()[0])?;
        Ok(ImageBatch::from_network(self.decode_forward(&alpha.0, style)))
    }

    /// `x~ = F(E_c(x), E_s(y))`.
    pub fn translate(&self, x: &ImageBatch<T>, y: &ImageBatch<T>) -> Result<ImageBatch<T>> {
        ensure!(
            x.size() == y.size(),
            Shape,
            "source {}px and reference {}px differ in resolution",
            x.size(),
            y.size()
        );
        ensure!(
            x.len() == y.len() || y.len() == 1,
            Shape,
            "reference batch {} must match source batch {} or be 1",
            y.len(),
            x.len()
        );
        let alpha = self.content_forward(x.tensor());
        let style = self.style_forward(y.tensor());
        Ok(ImageBatch::from_network(self.decode_forward(&alpha, &style)))
    }

    fn fst_in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.arch.config.bottleneck_channels
        } else {
            self.arch.config.fst_out_channels(stage - 1)
        }
    }

    fn check_code(&self, alpha: &ContentCode<T>) -> Result<()> {
        let cb = self.arch.config.bottleneck_channels;
        ensure!(
            alpha.0.ndim() == 4 && alpha.0.shape()[1] == cb,
            Shape,
            "content code must be [N, {cb}, h, w], got {:?}",
            alpha.0.shape()
        );
        Ok(())
    }

    fn check_style(&self, style: &StyleParams<T>, batch: usize) -> Result<()> {
        let sites = &self.arch.sites;
        if style.per_site.len() != sites.len() {
            return Err(Error::Contract(format!(
                "expected style parameters for {} sites, got {}",
                sites.len(),
                style.per_site.len()
            )));
        }
        for (s, site) in style.per_site.iter().zip(sites) {
            ensure!(
                s.channels() == site.channels && (s.batch() == batch || s.batch() == 1),
                Shape,
                "style site {} expects {} channels for batch {batch}, got {:?}",
                site.name,
                site.channels,
                s.gamma.shape()
            );
        }
        Ok(())
    }

    pub(crate) fn content_forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (p, enc) = (&self.params, &self.arch.content);
        let mut h = act(&in_unchecked(&enc.stem.forward(p, x)));
        for conv in enc.downs.iter().chain(enc.blocks.iter()) {
            h = act(&in_unchecked(&conv.forward(p, &h)));
        }
        h
    }

    fn latent_forward(&self, y: &Tensor<T>) -> Tensor<T> {
        let (p, enc) = (&self.params, &self.arch.style);
        let mut h = act(&enc.stem.forward(p, y));
        for conv in &enc.downs {
            h = act(&conv.forward(p, &h));
        }
        enc.latent.forward(p, &global_avg_pool(&h))
    }

    pub(crate) fn style_forward(&self, y: &Tensor<T>) -> StyleParams<T> {
        let heads = &self.arch.style.heads;
        if heads.is_empty() {
            return StyleParams { per_site: Vec::new() };
        }
        let latent = self.latent_forward(y);
        let per_site = heads
            .iter()
            .zip(&self.arch.sites)
            .map(|(head, site)| {
                let gb = head.forward(&self.params, &latent);
                let c = site.channels;
                let n = gb.shape()[0];
                AffineStyle {
                    gamma: gb.narrow(1, 0, c).reshape(&[n, c, 1, 1]),
                    beta: gb.narrow(1, c, c).reshape(&[n, c, 1, 1]),
                }
            })
            .collect();
        StyleParams { per_site }
    }

    fn bottleneck_forward(&self, alpha: &Tensor<T>, style: &StyleParams<T>) -> Tensor<T> {
        let p = &self.params;
        match &self.arch.bottleneck {
            Bottleneck::Asc(layers) => layers.iter().fold(alpha.clone(), |h, (conv, norm)| {
                act(&norm.forward(p, &conv.forward(p, &h), style))
            }),
            Bottleneck::Residual(blocks) => blocks.iter().fold(alpha.clone(), |h, b| {
                let r = act(&b.norm1.forward(p, &b.conv1.forward(p, &h), style));
                let r = b.norm2.forward(p, &b.conv2.forward(p, &r), style);
                h.add(&r)
            }),
        }
    }

    fn fst_forward(&self, f: &Tensor<T>, style: &StyleParams<T>, stage: usize) -> Tensor<T> {
        let (p, b) = (&self.params, &self.arch.fst[stage]);
        let h = f.upsample_nearest2x();
        let h = act(&b.norm1.forward(p, &b.conv1.forward(p, &h), style));
        act(&b.norm2.forward(p, &b.conv2.forward(p, &h), style))
    }

    pub(crate) fn decode_forward(&self, alpha: &Tensor<T>, style: &StyleParams<T>) -> Tensor<T> {
        let mut h = self.bottleneck_forward(alpha, style);
        for stage in 0..self.arch.fst.len() {
            h = self.fst_forward(&h, style, stage);
        }
        self.arch.to_rgb.forward(&self.params, &h).tanh()
    }

    /// Number of style sites owned by the bottleneck (the rest are FST).
    pub fn bottleneck_site_count(&self) -> usize {
        self.arch.bottleneck_sites
    }
}
