//! Toy-scale content/style networks.
//!
//! Layout:
//! - `stem`: one 3×3 conv shared by the content encoder and both style encoders.
//! - `e_c`: three more convs (two stride 2), content feature at 1/4 resolution.
//! - `e_s` / `e_t`: two stride-2 convs, global pooling, linear head to a style code.
//! - `g_s` / `g_t`: conv + instance norm + style modulation blocks with nearest
//!   upsampling, sigmoid output.
//! - `g_c`: 3×3 conv, 1×1 classifier, bilinear ×4 upsampling, softmax.
//! - `d_img_s` / `d_img_t` / `d_out`: three stride-2 4×4 convs, 1/8 resolution scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::datamodel::{Domain, DomainTag, Image, ProbabilityMap};
use crate::error::{Error, Result};

const IN_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub stem_channels: usize,
    pub encoder_channels: usize,
    pub content_channels: usize,
    pub style_channels: usize,
    pub style_dim: usize,
    pub generator_channels: [usize; 2],
    pub segmenter_channels: usize,
    pub discriminator_channels: [usize; 2],
    /// Standard deviation of the normal initializer; `None` selects He scaling.
    pub init_std: Option<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            stem_channels: 16,
            encoder_channels: 32,
            content_channels: 64,
            style_channels: 16,
            style_dim: 8,
            generator_channels: [32, 16],
            segmenter_channels: 32,
            discriminator_channels: [16, 32],
            init_std: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    S2T,
    T2S,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Discriminator {
    ImageSource,
    ImageTarget,
    Output,
}

/// Content feature map of one image (`[1, C_c, H/4, W/4]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeature {
    pub feature: Tensor,
    pub image_height: usize,
    pub image_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode {
    pub code: Vec<f64>,
}

impl StyleCode {
    pub fn zeros(dim: usize) -> Self {
        Self {
            code: vec![0.0; dim],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.code.len()], self.code.clone())
    }
}

/// Input to [`Networks::discriminate`].
pub enum Realness<'a> {
    Image(&'a Image),
    Probs(&'a ProbabilityMap),
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct StyleEncoder {
    conv1: Conv,
    conv2: Conv,
    fc: Dense,
}

#[derive(Clone, Debug)]
struct GenBlock {
    conv: Conv,
    gamma: Dense,
    beta: Dense,
}

#[derive(Clone, Debug)]
struct Generator {
    blocks: [GenBlock; 2],
    out: Conv,
}

#[derive(Clone, Debug)]
struct PatchDisc {
    convs: [Conv; 3],
}

/// Parameter-group prefixes used by the trainer's optimizers.
pub const SEGMENTATION_GROUP: [&str; 3] = ["stem.", "e_c.", "g_c."];
pub const GENERATOR_GROUP: [&str; 4] = ["e_s.", "e_t.", "g_s.", "g_t."];
pub const OUTPUT_DISC_GROUP: [&str; 1] = ["d_out."];
pub const IMAGE_DISC_GROUP: [&str; 2] = ["d_img_s.", "d_img_t."];

/// All networks and their parameters.
#[derive(Clone, Debug)]
pub struct Networks {
    config: NetworkConfig,
    pub params: ParamStore,
    stem: Conv,
    content: [Conv; 3],
    style_s: StyleEncoder,
    style_t: StyleEncoder,
    gen_s: Generator,
    gen_t: Generator,
    seg: [Conv; 2],
    d_img_s: PatchDisc,
    d_img_t: PatchDisc,
    d_out: PatchDisc,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    init_std: Option<f64>,
}

impl Builder {
    fn normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = self
            .init_std
            .unwrap_or_else(|| (2.0 / fan_in as f64).sqrt());
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| dist.sample(&mut self.rng)).collect(),
        )
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Conv {
        let w = self.normal(&[cout, cin, k, k], cin * k * k);
        Conv {
            w: self.store.insert(format!("{name}.weight"), w),
            b: self
                .store
                .insert(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            pad,
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        let w = self.normal(&[dout, din], din);
        Dense {
            w: self.store.insert(format!("{name}.weight"), w),
            b: self
                .store
                .insert(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    fn style_encoder(&mut self, name: &str, c: &NetworkConfig) -> StyleEncoder {
        StyleEncoder {
            conv1: self.conv(
                &format!("{name}.conv1"),
                c.stem_channels,
                c.style_channels,
                3,
                2,
                1,
            ),
            conv2: self.conv(
                &format!("{name}.conv2"),
                c.style_channels,
                c.style_channels,
                3,
                2,
                1,
            ),
            fc: self.dense(&format!("{name}.fc"), c.style_channels, c.style_dim),
        }
    }

    fn generator(&mut self, name: &str, c: &NetworkConfig) -> Generator {
        let [g1, g2] = c.generator_channels;
        let block = |b: &mut Self, i: usize, cin: usize, cout: usize| GenBlock {
            conv: b.conv(&format!("{name}.conv{i}"), cin, cout, 3, 1, 1),
            gamma: b.dense(&format!("{name}.mod{i}.gamma"), c.style_dim, cout),
            beta: b.dense(&format!("{name}.mod{i}.beta"), c.style_dim, cout),
        };
        let b1 = block(self, 1, c.content_channels, g1);
        let b2 = block(self, 2, g1, g2);
        Generator {
            blocks: [b1, b2],
            out: self.conv(&format!("{name}.conv3"), g2, 3, 3, 1, 1),
        }
    }

    fn patch_disc(&mut self, name: &str, cin: usize, c: &NetworkConfig) -> PatchDisc {
        let [d1, d2] = c.discriminator_channels;
        PatchDisc {
            convs: [
                self.conv(&format!("{name}.conv1"), cin, d1, 4, 2, 1),
                self.conv(&format!("{name}.conv2"), d1, d2, 4, 2, 1),
                self.conv(&format!("{name}.conv3"), d2, 1, 4, 2, 1),
            ],
        }
    }
}

impl Networks {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.clone();
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            init_std: c.init_std,
        };
        let stem = b.conv("stem.conv", 3, c.stem_channels, 3, 1, 1);
        let content = [
            b.conv("e_c.conv1", c.stem_channels, c.encoder_channels, 3, 2, 1),
            b.conv("e_c.conv2", c.encoder_channels, c.content_channels, 3, 2, 1),
            b.conv("e_c.conv3", c.content_channels, c.content_channels, 3, 1, 1),
        ];
        let style_s = b.style_encoder("e_s", &c);
        let style_t = b.style_encoder("e_t", &c);
        let gen_s = b.generator("g_s", &c);
        let gen_t = b.generator("g_t", &c);
        let seg = [
            b.conv(
                "g_c.conv1",
                c.content_channels,
                c.segmenter_channels,
                3,
                1,
                1,
            ),
            b.conv("g_c.conv2", c.segmenter_channels, c.num_classes, 1, 1, 0),
        ];
        let d_img_s = b.patch_disc("d_img_s", 3, &c);
        let d_img_t = b.patch_disc("d_img_t", 3, &c);
        let d_out = b.patch_disc("d_out", c.num_classes, &c);
        Ok(Self {
            config,
            params: b.store,
            stem,
            content,
            style_s,
            style_t,
            gen_s,
            gen_t,
            seg,
            d_img_s,
            d_img_t,
            d_out,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Parameter ids of the shared first convolution.
    pub fn stem_params(&self) -> [ParamId; 2] {
        [self.stem.w, self.stem.b]
    }

    pub fn group(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| prefixes.iter().any(|p| self.params.name(id).starts_with(p)))
            .collect()
    }

    fn conv(&self, g: &mut Graph, x: Var, c: &Conv) -> Var {
        let w = g.param(&self.params, c.w);
        let b = g.param(&self.params, c.b);
        g.conv2d(x, w, Some(b), c.stride, c.pad)
    }

    fn dense(&self, g: &mut Graph, x: Var, d: &Dense) -> Var {
        let w = g.param(&self.params, d.w);
        let b = g.param(&self.params, d.b);
        g.linear(x, w, Some(b))
    }

    /// Shared first stage applied to a `[N, 3, H, W]` batch.
    pub fn stem_forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv(g, x, &self.stem);
        g.relu(y)
    }

    pub fn content_from_stem(&self, g: &mut Graph, s: Var) -> Var {
        let mut h = s;
        for c in &self.content {
            h = self.conv(g, h, c);
            h = g.relu(h);
        }
        h
    }

    pub fn style_from_stem(&self, g: &mut Graph, s: Var, domain: Domain) -> Var {
        let enc = match domain {
            Domain::Source => &self.style_s,
            Domain::Target => &self.style_t,
        };
        let h = self.conv(g, s, &enc.conv1);
        let h = g.relu(h);
        let h = self.conv(g, h, &enc.conv2);
        let h = g.relu(h);
        let h = g.global_avg_pool(h);
        self.dense(g, h, &enc.fc)
    }

    pub fn content_forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = self.stem_forward(g, x);
        self.content_from_stem(g, s)
    }

    pub fn style_forward(&self, g: &mut Graph, x: Var, domain: Domain) -> Var {
        let s = self.stem_forward(g, x);
        self.style_from_stem(g, s, domain)
    }

    /// `G_s` or `G_t` on `style [N, d_s]` and `content [N, C_c, h, w]`.
    pub fn generate_forward(&self, g: &mut Graph, style: Var, content: Var, domain: Domain) -> Var {
        let gen = match domain {
            Domain::Source => &self.gen_s,
            Domain::Target => &self.gen_t,
        };
        let mut h = content;
        for block in &gen.blocks {
            h = self.conv(g, h, &block.conv);
            h = g.instance_norm(h, IN_EPS);
            let gamma = self.dense(g, style, &block.gamma);
            let beta = self.dense(g, style, &block.beta);
            h = g.modulate(h, gamma, beta);
            h = g.relu(h);
            h = g.upsample_nearest(h, 2);
        }
        let out = self.conv(g, h, &gen.out);
        g.sigmoid(out)
    }

    /// `G_c`: class probabilities at `(height, width)`.
    pub fn segment_forward(&self, g: &mut Graph, content: Var, height: usize, width: usize) -> Var {
        let h = self.conv(g, content, &self.seg[0]);
        let h = g.relu(h);
        let logits = self.conv(g, h, &self.seg[1]);
        let up = g.upsample_bilinear(logits, height, width);
        g.softmax_channels(up)
    }

    pub fn discriminate_forward(&self, g: &mut Graph, x: Var, which: Discriminator) -> Var {
        let d = match which {
            Discriminator::ImageSource => &self.d_img_s,
            Discriminator::ImageTarget => &self.d_img_t,
            Discriminator::Output => &self.d_out,
        };
        let mut h = self.conv(g, x, &d.convs[0]);
        h = g.leaky_relu(h, LEAK);
        h = self.conv(g, h, &d.convs[1]);
        h = g.leaky_relu(h, LEAK);
        self.conv(g, h, &d.convs[2])
    }

    fn check_finite(t: &Tensor, what: &str) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(what.to_string()))
        }
    }

    pub fn encode_content(&self, image: &Image) -> Result<ContentFeature> {
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let c = self.content_forward(&mut g, x);
        Self::check_finite(g.value(c), "content encoder")?;
        Ok(ContentFeature {
            feature: g.value(c).clone(),
            image_height: image.height(),
            image_width: image.width(),
        })
    }

    pub fn encode_style(&self, image: &Image, domain: Domain) -> Result<StyleCode> {
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let s = self.style_forward(&mut g, x, domain);
        Self::check_finite(g.value(s), "style encoder")?;
        Ok(StyleCode {
            code: g.value(s).data().to_vec(),
        })
    }

    pub fn generate_image(
        &self,
        style: &StyleCode,
        content: &ContentFeature,
        domain: Domain,
    ) -> Result<Image> {
        let c = &self.config;
        if style.code.len() != c.style_dim {
            return Err(Error::contract(format!(
                "style code has {} entries, expected {}",
                style.code.len(),
                c.style_dim
            )));
        }
        let fs = content.feature.shape();
        if fs.len() != 4
            || fs[0] != 1
            || fs[1] != c.content_channels
            || fs[2] * 4 != content.image_height
            || fs[3] * 4 != content.image_width
        {
            return Err(Error::contract(format!(
                "content feature shape {fs:?} does not match the network"
            )));
        }
        let mut g = Graph::new();
        let s = g.constant(style.to_tensor());
        let f = g.constant(content.feature.clone());
        let out = self.generate_forward(&mut g, s, f, domain);
        Self::check_finite(g.value(out), "generator")?;
        let tag = match domain {
            Domain::Source => DomainTag::TranslatedSource,
            Domain::Target => DomainTag::TranslatedTarget,
        };
        Image::from_batch(g.value(out), 0, tag)
    }

    pub fn segment(&self, content: &ContentFeature) -> Result<ProbabilityMap> {
        let fs = content.feature.shape();
        if fs.len() != 4 || fs[1] != self.config.content_channels {
            return Err(Error::contract("content feature channel mismatch"));
        }
        let mut g = Graph::new();
        let f = g.constant(content.feature.clone());
        let p = self.segment_forward(&mut g, f, content.image_height, content.image_width);
        Self::check_finite(g.value(p), "segmenter")?;
        ProbabilityMap::from_batch(g.value(p), 0)
    }

    /// Class probabilities for an image.
    pub fn predict(&self, image: &Image) -> Result<ProbabilityMap> {
        self.segment(&self.encode_content(image)?)
    }

    /// s2t: `G_t(E_t(donor), E_c(src))`; t2s: `G_s(E_s(donor), E_c(src))`.
    pub fn translate(
        &self,
        src: &Image,
        style_donor: &Image,
        direction: Direction,
    ) -> Result<Image> {
        let content = self.encode_content(src)?;
        let domain = match direction {
            Direction::S2T => Domain::Target,
            Direction::T2S => Domain::Source,
        };
        let style = self.encode_style(style_donor, domain)?;
        self.generate_image(&style, &content, domain)
    }

    pub fn discriminate(&self, input: Realness<'_>, which: Discriminator) -> Result<Tensor> {
        let x = match (&input, which) {
            (Realness::Image(img), Discriminator::ImageSource | Discriminator::ImageTarget) => {
                img.to_tensor()
            }
            (Realness::Probs(p), Discriminator::Output) => {
                if p.num_classes() != self.config.num_classes {
                    return Err(Error::contract("probability map class count mismatch"));
                }
                p.to_tensor()
            }
            _ => {
                return Err(Error::contract(format!(
                    "discriminator {which:?} does not accept this input kind"
                )))
            }
        };
        let mut g = Graph::new();
        let v = g.constant(x);
        let out = self.discriminate_forward(&mut g, v, which);
        Self::check_finite(g.value(out), "discriminator")?;
        let (_, _, h, w) = g.value(out).dims4();
        Ok(g.value(out).clone().reshape(&[h, w]))
    }

    pub fn save_checkpoint(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            networks: self.config.clone(),
            params: self
                .params
                .named()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            extra,
        };
        let text = serde_json::to_string(&ckpt)?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Loads parameters and network config; returns the `extra` section too.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut nets = Networks::new(ckpt.networks, 0)?;
        if ckpt.params.len() != nets.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, network expects {}",
                ckpt.params.len(),
                nets.params.len()
            )));
        }
        for (name, t) in ckpt.params {
            let id = nets
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if nets.params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            *nets.params.get_mut(id) = t;
        }
        Ok((nets, ckpt.extra))
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("num_classes", self.num_classes),
            ("stem_channels", self.stem_channels),
            ("encoder_channels", self.encoder_channels),
            ("content_channels", self.content_channels),
            ("style_channels", self.style_channels),
            ("style_dim", self.style_dim),
            (
                "generator_channels",
                self.generator_channels[0].min(self.generator_channels[1]),
            ),
            ("segmenter_channels", self.segmenter_channels),
            (
                "discriminator_channels",
                self.discriminator_channels[0].min(self.discriminator_channels[1]),
            ),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("networks.{name} must be positive")));
        }
        if let Some(s) = self.init_std {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config("networks.init_std must be positive".into()));
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "styleless-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    networks: NetworkConfig,
    params: BTreeMap<String, Tensor>,
    #[serde(default)]
    extra: serde_json::Value,
}
