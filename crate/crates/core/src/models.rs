//! Embedding networks: ResNet-12 and the four-layer C128F convnet.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fewshot::Classifier;
use crate::graph::Var;
use crate::implant::{widen, ImplantSpec, ImplantStream};
use crate::nn::checkpoint::{Checkpoint, CheckpointMeta, Record};
use crate::nn::{ConvUnit, ParamStore, Session};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const KNOWN_ARCHS: &[&str] = &["resnet12", "c128f"];
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    ResNet12,
    C128F,
}

impl ArchKind {
    pub fn id(self) -> &'static str {
        match self {
            ArchKind::ResNet12 => "resnet12",
            ArchKind::C128F => "c128f",
        }
    }

    pub fn default_channels(self) -> [usize; 4] {
        match self {
            ArchKind::ResNet12 => [64, 128, 256, 512],
            ArchKind::C128F => [64, 64, 128, 128],
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ArchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet12" => Ok(ArchKind::ResNet12),
            "c128f" => Ok(ArchKind::C128F),
            other => Err(Error::Argument(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub kind: ArchKind,
    pub block_channels: [usize; 4],
    /// Input height, width, channels.
    pub input: [usize; 3],
}

impl ArchitectureConfig {
    pub fn new(kind: ArchKind, input: [usize; 3]) -> Self {
        ArchitectureConfig {
            kind,
            block_channels: kind.default_channels(),
            input,
        }
    }

    /// Divide every block width by `div` (topology unchanged).
    pub fn width_div(kind: ArchKind, div: usize, input: [usize; 3]) -> Result<Self> {
        if div == 0 {
            return Err(Error::Argument("width divisor must be >= 1".into()));
        }
        let mut c = Self::new(kind, input);
        for w in &mut c.block_channels {
            *w /= div;
            if *w == 0 {
                return Err(Error::Argument(format!("width divisor {div} leaves an empty block")));
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.contains(&0) || self.input.contains(&0) {
            return Err(Error::Argument(format!("invalid architecture {self:?}")));
        }
        let (h, w) = self.output_hw();
        if h == 0 || w == 0 {
            return Err(Error::Argument(format!(
                "input {}x{} too small for four 2x2 pools",
                self.input[0], self.input[1]
            )));
        }
        Ok(())
    }

    /// Spatial size of the feature map after four 2x2 pools.
    pub fn output_hw(&self) -> (usize, usize) {
        let mut h = self.input[0];
        let mut w = self.input[1];
        for _ in 0..4 {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    pub fn feature_depth(&self) -> usize {
        self.block_channels[3]
    }

    pub fn num_layers(&self) -> usize {
        match self.kind {
            ArchKind::ResNet12 => 12,
            ArchKind::C128F => 4,
        }
    }

    /// Whether conv layer `l` (zero-based) is the last of its block, so its
    /// output is followed by a max-pool.
    pub fn ends_block(&self, l: usize) -> bool {
        match self.kind {
            ArchKind::ResNet12 => l % 3 == 2,
            ArchKind::C128F => true,
        }
    }

    /// Channels of base conv layer `l`'s input and output.
    pub fn layer_channels(&self, l: usize) -> (usize, usize) {
        match self.kind {
            ArchKind::ResNet12 => {
                let b = l / 3;
                let out = self.block_channels[b];
                let inp = if !l.is_multiple_of(3) {
                    out
                } else if b == 0 {
                    self.input[2]
                } else {
                    self.block_channels[b - 1]
                };
                (inp, out)
            }
            ArchKind::C128F => {
                let inp = if l == 0 {
                    self.input[2]
                } else {
                    self.block_channels[l - 1]
                };
                (inp, self.block_channels[l])
            }
        }
    }
}

/// One embedding tensor `h x w x d`, stored as `r = h·w` rows of depth `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Argument("feature map dimensions must be >= 1".into()));
        }
        Ok(FeatureMap {
            h,
            w,
            values: Tensor::new(vec![h * w, d], data)?,
        })
    }

    /// Split an NHWC batch into per-example maps.
    pub fn split_batch(batch: &Tensor) -> Result<Vec<FeatureMap>> {
        let s = batch.shape();
        if s.len() != 4 {
            return Err(Error::shape("split_batch", s, &[4]));
        }
        let per = s[1] * s[2] * s[3];
        batch
            .data()
            .chunks(per.max(1))
            .take(s[0])
            .map(|c| FeatureMap::new(s[1], s[2], s[3], c.to_vec()))
            .collect()
    }

    pub fn r(&self) -> usize {
        self.h * self.w
    }

    pub fn d(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn fiber(&self, k: usize) -> &[f64] {
        self.values.row(k)
    }

    pub fn fibers(&self) -> impl Iterator<Item = &[f64]> {
        self.values.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Gap,
    Gmp,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(Pooling::Gap),
            "gmp" => Ok(Pooling::Gmp),
            other => Err(Error::Argument(format!("unknown pooling {other:?}"))),
        }
    }
}

/// Reduce a feature map to a `d`-vector by spatial mean or max.
pub fn pool_embedding(fm: &FeatureMap, mode: Pooling) -> Vec<f64> {
    let d = fm.d();
    match mode {
        Pooling::Gap => {
            let mut out = vec![0.0; d];
            for f in fm.fibers() {
                for (o, v) in out.iter_mut().zip(f) {
                    *o += v;
                }
            }
            let r = fm.r() as f64;
            out.iter_mut().for_each(|v| *v /= r);
            out
        }
        Pooling::Gmp => {
            let mut out = vec![f64::NEG_INFINITY; d];
            for f in fm.fibers() {
                for (o, v) in out.iter_mut().zip(f) {
                    *o = o.max(*v);
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Residual {
        units: Box<[ConvUnit; 3]>,
        shortcut: ConvUnit,
    },
    Plain(ConvUnit),
}

/// Base embedding network φ.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ArchitectureConfig,
    blocks: Vec<Block>,
}

/// Base-stream results of a forward pass.
#[derive(Debug, Clone)]
pub struct BaseForward {
    /// Final pooled feature map `[n, h, w, d]`.
    pub output: Var,
    /// Input activation of every conv layer from `first_tap` on.
    pub taps: Vec<Var>,
}

impl Network {
    pub fn new(config: ArchitectureConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Purpose::Init, 0);
        let mut blocks = Vec::new();
        for b in 0..4 {
            let name = format!("base.block{}", b + 1);
            match config.kind {
                ArchKind::ResNet12 => {
                    let (cin, cout) = config.layer_channels(3 * b);
                    let units = [
                        ConvUnit::new(store, &format!("{name}.unit1"), 3, cin, cout, true, &mut rng),
                        ConvUnit::new(store, &format!("{name}.unit2"), 3, cout, cout, true, &mut rng),
                        ConvUnit::new(store, &format!("{name}.unit3"), 3, cout, cout, false, &mut rng),
                    ];
                    let shortcut = ConvUnit::new(store, &format!("{name}.shortcut"), 1, cin, cout, false, &mut rng);
                    blocks.push(Block::Residual {
                        units: Box::new(units),
                        shortcut,
                    });
                }
                ArchKind::C128F => {
                    let (cin, cout) = config.layer_channels(b);
                    blocks.push(Block::Plain(ConvUnit::new(store, &name, 3, cin, cout, true, &mut rng)));
                }
            }
        }
        Ok(Network { config, blocks })
    }

    /// Run the base stream. Inputs of conv layers `first_tap..` are
    /// reported in `taps` for implant streams.
    pub fn forward(&self, s: &mut Session, x: Var, first_tap: usize) -> Result<BaseForward> {
        let want = &self.config.input;
        let got = s.graph.shape(x).to_vec();
        if got.len() != 4 || got[1..] != want[..] {
            return Err(Error::shape("embed", &got, &[0, want[0], want[1], want[2]]));
        }
        let mut taps = Vec::new();
        let mut layer = 0;
        let tap = |layer: usize, v: Var, taps: &mut Vec<Var>| {
            if layer >= first_tap {
                taps.push(v);
            }
        };
        let mut h = x;
        for block in &self.blocks {
            h = match block {
                Block::Residual { units, shortcut } => {
                    let input = h;
                    let mut y = input;
                    for u in units.iter() {
                        tap(layer, y, &mut taps);
                        y = u.forward(s, y)?;
                        layer += 1;
                    }
                    let sc = shortcut.forward(s, input)?;
                    let sum = s.graph.add(y, sc)?;
                    s.graph.swish(sum)
                }
                Block::Plain(u) => {
                    tap(layer, h, &mut taps);
                    layer += 1;
                    u.forward(s, h)?
                }
            };
            h = s.graph.max_pool2(h)?;
        }
        Ok(BaseForward { output: h, taps })
    }

    pub fn param_prefix(&self) -> &'static str {
        "base."
    }
}

/// A complete model: embedding network, optional base-class classifier and
/// optional implant stream, all sharing one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub net: Network,
    pub head: Option<Classifier>,
    pub implant: Option<ImplantStream>,
    pub seed: u64,
}

impl Model {
    pub fn new(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::new(config, &mut store, seed)?;
        Ok(Model {
            store,
            net,
            head: None,
            implant: None,
            seed,
        })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.net.config
    }

    /// Depth of the embedding, including implant channels.
    pub fn embedding_depth(&self) -> usize {
        self.net.config.feature_depth() + self.implant.as_ref().map_or(0, |i| i.out_channels())
    }

    pub fn add_classifier(&mut self, classes: usize, tau: f64) -> Result<()> {
        let d = self.embedding_depth();
        self.head = Some(Classifier::new(&mut self.store, classes, d, tau, self.seed)?);
        Ok(())
    }

    pub fn tau(&self) -> Option<f64> {
        self.head.as_ref().map(|h| h.tau(&self.store))
    }

    /// Feature map of a batch `[n, h, w, c]` inside a session.
    pub fn embed_var(&self, s: &mut Session, x: Var) -> Result<Var> {
        match &self.implant {
            None => Ok(self.net.forward(s, x, usize::MAX)?.output),
            Some(imp) => {
                let base = self.net.forward(s, x, imp.spec.first_layer)?;
                imp.forward(s, &self.net.config, &base.taps, base.output)
            }
        }
    }

    /// Eval-mode embedding of a batch of images, `[n, h, w, c] -> [n, h', w', d]`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.net.config.input[..] {
            let want = self.net.config.input;
            return Err(Error::shape("embed", s, &[0, want[0], want[1], want[2]]));
        }
        let n = s[0];
        let per: usize = s[1..].iter().product();
        let (oh, ow) = self.net.config.output_hw();
        let d = self.embedding_depth();
        let mut out = Vec::with_capacity(n * oh * ow * d);
        for start in (0..n).step_by(EMBED_CHUNK) {
            let end = (start + EMBED_CHUNK).min(n);
            let chunk = Tensor::new(
                vec![end - start, s[1], s[2], s[3]],
                images.data()[start * per..end * per].to_vec(),
            )?;
            let mut sess = Session::new(&self.store, false);
            let x = sess.graph.constant(chunk);
            let y = self.embed_var(&mut sess, x)?;
            out.extend_from_slice(sess.graph.value(y).data());
        }
        Tensor::new(vec![n, oh, ow, d], out)
    }

    pub fn embed_maps(&self, images: &Tensor) -> Result<Vec<FeatureMap>> {
        FeatureMap::split_batch(&self.embed(images)?)
    }

    /// Freeze every base parameter; batch norms switch to running stats.
    pub fn freeze_base(&mut self) -> usize {
        self.store.freeze_prefix(self.net.param_prefix())
    }

    pub fn base_checksum(&self) -> String {
        self.store.checksum(self.net.param_prefix())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = &self.net.config;
        let (first, channels) = self
            .implant
            .as_ref()
            .map_or((0, 0), |i| (i.spec.first_layer, i.spec.channels));
        Checkpoint {
            meta: CheckpointMeta {
                arch: cfg.kind.id().to_string(),
                widths: cfg.block_channels.to_vec(),
                input: cfg.input,
                tau: self.tau().unwrap_or(0.0),
                seed: self.seed,
                implant_first_layer: first,
                implant_channels: channels,
            },
            records: self
                .store
                .iter()
                .map(|(_, p)| Record {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let m = &ck.meta;
        let kind: ArchKind = m
            .arch
            .parse()
            .map_err(|_| Error::format(8, format!("unknown architecture id {:?}", m.arch)))?;
        let widths: [usize; 4] = m
            .widths
            .clone()
            .try_into()
            .map_err(|_| Error::format(0, format!("expected 4 block widths, got {}", m.widths.len())))?;
        let config = ArchitectureConfig {
            kind,
            block_channels: widths,
            input: m.input,
        };
        config.validate().map_err(|e| Error::format(0, e.to_string()))?;
        if m.implant_channels > 0 && !ck.records.iter().any(|r| r.name.starts_with("base.")) {
            return Err(Error::format(0, "widened checkpoint has no base parameters"));
        }
        let mut model = Model::new(config, m.seed)?;
        if let Some(w) = ck.record("head.weight") {
            let classes = w.shape().first().copied().unwrap_or(0);
            model.add_classifier(classes, m.tau)?;
        }
        if m.implant_channels > 0 {
            let spec = ImplantSpec {
                first_layer: m.implant_first_layer,
                channels: m.implant_channels,
            };
            widen(&mut model, spec).map_err(|e| Error::format(0, e.to_string()))?;
        }
        let expected = model.store.len();
        if expected != ck.records.len() {
            return Err(Error::format(
                0,
                format!("checkpoint has {} records, model expects {expected}", ck.records.len()),
            ));
        }
        for r in &ck.records {
            let id = model
                .store
                .id(&r.name)
                .ok_or_else(|| Error::format(0, format!("unexpected record {:?}", r.name)))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != r.value.shape() {
                return Err(Error::format(
                    0,
                    format!(
                        "record {:?} has shape {:?}, expected {:?}",
                        r.name,
                        r.value.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.value = r.value.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path, KNOWN_ARCHS)?)
    }
}
