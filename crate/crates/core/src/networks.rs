//! Generator and pixel-wise discriminator networks, plus the checkpoint
//! bundle that carries them.
//!
//! Both networks work on `[N, C, H, W]` tensors with colors in `[-1, 1]`.
//! The generator sees the composite and its mask as four input channels and
//! its output is composited back over the input, so pixels outside the mask
//! are never changed.

use std::fs;
use std::io::Write;
use std::path::Path;

use harmonizer_nn::{Bound, Graph, Initializer, ParamId, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Frame, Mask};

const LEAK: f32 = 0.2;
const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    Batch,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorArch {
    /// Encoder-decoder with skip concatenation at every level.
    Unet,
    /// Encoder, residual blocks at the bottleneck, decoder without skips.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub arch: GeneratorArch,
    pub input_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub max_channels: usize,
    pub norm: Norm,
    /// Only used by the residual architecture.
    pub residual_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            arch: GeneratorArch::Unet,
            input_channels: 4,
            base_channels: 64,
            depth: 4,
            max_channels: 512,
            norm: Norm::Instance,
            residual_blocks: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub max_channels: usize,
    pub norm: Norm,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            base_channels: 64,
            depth: 4,
            max_channels: 512,
            norm: Norm::Instance,
        }
    }
}

fn check_structure(
    what: &str,
    input_channels: usize,
    expected_inputs: usize,
    base: usize,
    depth: usize,
    max: usize,
) -> Result<()> {
    if input_channels != expected_inputs {
        return Err(Error::Config(format!(
            "{what}: input_channels must be {expected_inputs}, got {input_channels}"
        )));
    }
    if depth == 0 || depth > 12 {
        return Err(Error::Config(format!(
            "{what}: depth must lie in 1..=12, got {depth}"
        )));
    }
    if base == 0 || max < base {
        return Err(Error::Config(format!(
            "{what}: need 0 < base_channels <= max_channels, got {base} and {max}"
        )));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        check_structure(
            "generator",
            self.input_channels,
            4,
            self.base_channels,
            self.depth,
            self.max_channels,
        )
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        check_structure(
            "discriminator",
            self.input_channels,
            3,
            self.base_channels,
            self.depth,
            self.max_channels,
        )
    }
}

/// Error unless `width` and `height` are multiples of `2^depth`.
pub fn check_spatial(width: usize, height: usize, depth: usize) -> Result<()> {
    let factor = 1usize << depth;
    if width == 0 || height == 0 || !width.is_multiple_of(factor) || !height.is_multiple_of(factor)
    {
        return Err(Error::Dimension(format!(
            "input {width}x{height} is not divisible by {factor} (2^depth); pad or resize it first"
        )));
    }
    Ok(())
}

fn channels(base: usize, max: usize, level: usize) -> usize {
    (base << level).min(max)
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    kernel: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        Self {
            weight: store.push(
                format!("{name}.weight"),
                init.conv_weight(cout, cin, kernel, 1.0),
            ),
            bias: store.push(format!("{name}.bias"), init.bias(cout)),
            kernel,
        }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var, stride: usize) -> Var {
        g.conv2d(
            x,
            p.var(self.weight),
            p.var(self.bias),
            stride,
            self.kernel / 2,
        )
    }
}

fn normalize(g: &mut Graph, x: Var, norm: Norm) -> Var {
    match norm {
        Norm::Instance => g.normalize(x, true, NORM_EPS),
        Norm::Batch => g.normalize(x, false, NORM_EPS),
        Norm::None => x,
    }
}

/// UNet body shared by both networks.
#[derive(Clone, Debug)]
struct UNet {
    stem: Conv,
    down: Vec<Conv>,
    up: Vec<Conv>,
    head: Conv,
    norm: Norm,
}

impl UNet {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        cin: usize,
        cout: usize,
        base: usize,
        depth: usize,
        max: usize,
        norm: Norm,
    ) -> Self {
        let stem = Conv::new(store, init, "stem", cin, base, 3);
        let down = (1..=depth)
            .map(|k| {
                let (a, b) = (channels(base, max, k - 1), channels(base, max, k));
                Conv::new(store, init, &format!("down{k}"), a, b, 3)
            })
            .collect();
        // up[k - 1] maps level k back to level k - 1 after concatenation.
        let up = (1..=depth)
            .map(|k| {
                let (below, above) = (channels(base, max, k - 1), channels(base, max, k));
                Conv::new(store, init, &format!("up{k}"), above + below, below, 3)
            })
            .collect();
        let head = Conv::new(store, init, "head", base, cout, 1);
        Self {
            stem,
            down,
            up,
            head,
            norm,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let stem = self.stem.apply(g, p, x, 1);
        let mut h = g.leaky_relu(stem, LEAK);
        let mut skips = vec![h];
        for conv in &self.down {
            let y = conv.apply(g, p, h, 2);
            let y = normalize(g, y, self.norm);
            h = g.leaky_relu(y, LEAK);
            skips.push(h);
        }
        skips.pop();
        for conv in self.up.iter().rev() {
            let skip = skips.pop().expect("one skip per level");
            let y = g.upsample2x(h);
            let y = g.concat(y, skip);
            let y = conv.apply(g, p, y, 1);
            let y = normalize(g, y, self.norm);
            h = g.relu(y);
        }
        self.head.apply(g, p, h, 1)
    }
}

#[derive(Clone, Debug)]
struct ResNet {
    stem: Conv,
    down: Vec<Conv>,
    blocks: Vec<(Conv, Conv)>,
    up: Vec<Conv>,
    head: Conv,
    norm: Norm,
}

impl ResNet {
    fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &GeneratorConfig) -> Self {
        let (base, max) = (cfg.base_channels, cfg.max_channels);
        let stem = Conv::new(store, init, "stem", cfg.input_channels, base, 3);
        let down = (1..=cfg.depth)
            .map(|k| {
                Conv::new(
                    store,
                    init,
                    &format!("down{k}"),
                    channels(base, max, k - 1),
                    channels(base, max, k),
                    3,
                )
            })
            .collect();
        let c = channels(base, max, cfg.depth);
        let blocks = (0..cfg.residual_blocks)
            .map(|i| {
                (
                    Conv::new(store, init, &format!("block{i}.a"), c, c, 3),
                    Conv::new(store, init, &format!("block{i}.b"), c, c, 3),
                )
            })
            .collect();
        let up = (1..=cfg.depth)
            .map(|k| {
                Conv::new(
                    store,
                    init,
                    &format!("up{k}"),
                    channels(base, max, k),
                    channels(base, max, k - 1),
                    3,
                )
            })
            .collect();
        let head = Conv::new(store, init, "head", base, 3, 1);
        Self {
            stem,
            down,
            blocks,
            up,
            head,
            norm: cfg.norm,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let stem = self.stem.apply(g, p, x, 1);
        let mut h = g.relu(stem);
        for conv in &self.down {
            let y = conv.apply(g, p, h, 2);
            let y = normalize(g, y, self.norm);
            h = g.relu(y);
        }
        for (a, b) in &self.blocks {
            let y = a.apply(g, p, h, 1);
            let y = normalize(g, y, self.norm);
            let y = g.relu(y);
            let y = b.apply(g, p, y, 1);
            let y = normalize(g, y, self.norm);
            h = g.add(h, y);
        }
        for conv in self.up.iter().rev() {
            let y = g.upsample2x(h);
            let y = conv.apply(g, p, y, 1);
            let y = normalize(g, y, self.norm);
            h = g.relu(y);
        }
        self.head.apply(g, p, h, 1)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Unet(UNet),
    Residual(ResNet),
}

/// The harmonization network `G`.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    body: Body,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let body = match config.arch {
            GeneratorArch::Unet => Body::Unet(UNet::new(
                &mut params,
                &mut init,
                config.input_channels,
                3,
                config.base_channels,
                config.depth,
                config.max_channels,
                config.norm,
            )),
            GeneratorArch::Residual => Body::Residual(ResNet::new(&mut params, &mut init, &config)),
        };
        Ok(Self {
            config,
            params,
            body,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Raw network output in `[-1, 1]` for a `[N, 4, H, W]` input.
    pub fn forward_raw(&self, g: &mut Graph, p: &Bound, input: Var) -> Var {
        let out = match &self.body {
            Body::Unet(net) => net.forward(g, p, input),
            Body::Residual(net) => net.forward(g, p, input),
        };
        g.tanh(out)
    }

    /// Harmonized frame `mask * R + (1 - mask) * comp` and the raw output
    /// `R`. `comp` is `[N, 3, H, W]`, `mask` is `[N, 1, H, W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, comp: Var, mask: Var) -> Result<(Var, Var)> {
        let [_, _, h, w] = g.value(comp).shape();
        check_spatial(w, h, self.config.depth)?;
        let input = g.concat(comp, mask);
        let raw = self.forward_raw(g, p, input);
        let out = g.composite(mask, raw, comp);
        Ok((out, raw))
    }
}

/// The pixel-wise disharmony discriminator `D`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    body: UNet,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let body = UNet::new(
            &mut params,
            &mut init,
            config.input_channels,
            1,
            config.base_channels,
            config.depth,
            config.max_channels,
            config.norm,
        );
        Ok(Self {
            config,
            params,
            body,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Linear per-pixel scores `[N, 1, H, W]` for a `[N, 3, H, W]` input.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.value(x).shape();
        check_spatial(w, h, self.config.depth)?;
        Ok(self.body.forward(g, p, x))
    }
}

pub fn build_generator(config: GeneratorConfig, seed: u64) -> Result<Generator> {
    Generator::new(config, seed)
}

pub fn build_discriminator(config: DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    Discriminator::new(config, seed)
}

/// Harmonize one frame. The network output is composited in `[0, 1]`
/// space, so pixels with `mask == 0` come back bit-identical.
pub fn generate(gen: &Generator, frame: &Frame, mask: &Mask) -> Result<Frame> {
    if frame.dims() != mask.dims() {
        return Err(Error::Dimension(format!(
            "generate: frame {:?} vs mask {:?}",
            frame.dims(),
            mask.dims()
        )));
    }
    let (w, h) = frame.dims();
    check_spatial(w, h, gen.config.depth)?;
    let mut g = Graph::new();
    let p = gen.params.bind(&mut g, false);
    let comp = g.constant(frame.to_signed_tensor());
    let m = g.constant(mask.to_tensor());
    let input = g.concat(comp, m);
    let raw = gen.forward_raw(&mut g, &p, input);
    let raw = g.value(raw);
    if !raw.all_finite() {
        return Err(Error::Numeric(
            "generator produced non-finite values".into(),
        ));
    }
    let plane = w * h;
    let mut out = frame.clone();
    for c in 0..3 {
        let r = &raw.data()[c * plane..(c + 1) * plane];
        for (i, px) in out.plane_mut(c).iter_mut().enumerate() {
            let m = mask.data()[i];
            if m != 0.0 {
                let harmonized = ((r[i] + 1.0) * 0.5).clamp(0.0, 1.0);
                *px = m * harmonized + (1.0 - m) * *px;
            }
        }
    }
    Ok(out)
}

/// Unclamped per-pixel discriminator scores; 0 means harmonious, 1
/// disharmonious.
#[derive(Clone, Debug, PartialEq)]
pub struct DisharmonyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DisharmonyMap {
    /// Clamp to `[0, 1]` for use as a soft mask.
    pub fn to_mask(&self) -> Mask {
        Mask::from_vec(
            self.width,
            self.height,
            self.values.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
        .expect("map and mask sizes agree")
    }
}

pub fn discriminate(disc: &Discriminator, frame: &Frame) -> Result<DisharmonyMap> {
    let (w, h) = frame.dims();
    let mut g = Graph::new();
    let p = disc.params.bind(&mut g, false);
    let x = g.constant(frame.to_signed_tensor());
    let out = disc.forward(&mut g, &p, x)?;
    let values = g.value(out).data().to_vec();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "discriminator produced non-finite values".into(),
        ));
    }
    Ok(DisharmonyMap {
        width: w,
        height: h,
        values,
    })
}

/// Adam moments for one network, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub generator: AdamState,
    pub discriminator: AdamState,
}

/// Both networks plus training progress; what a checkpoint file holds.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub optimizer: Option<OptimizerState>,
    /// Index of the epoch in progress.
    pub epoch: u64,
    /// Steps already taken inside `epoch`.
    pub epoch_step: u64,
    /// Total optimizer steps taken.
    pub step: u64,
}

const MAGIC: &[u8; 8] = b"HRMZCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    generator: GeneratorConfig,
    discriminator: DiscriminatorConfig,
    epoch: u64,
    epoch_step: u64,
    step: u64,
    generator_params: Vec<TensorEntry>,
    discriminator_params: Vec<TensorEntry>,
    /// Adam step counts for generator and discriminator, when present.
    optimizer_steps: Option<(u64, u64)>,
}

fn entries(store: &ParamStore) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
        })
        .collect()
}

fn push_floats(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn load_store(
    store: &mut ParamStore,
    expected: &[TensorEntry],
    reader: &mut Reader<'_>,
) -> Result<()> {
    if store.len() != expected.len() {
        return Err(Error::format(
            reader.path,
            format!(
                "expected {} tensors, checkpoint lists {}",
                store.len(),
                expected.len()
            ),
        ));
    }
    for (param, entry) in store.iter_mut().zip(expected) {
        if param.name != entry.name || param.value.shape() != entry.shape {
            return Err(Error::format(
                reader.path,
                format!(
                    "tensor {} {:?} does not match {} {:?}",
                    entry.name,
                    entry.shape,
                    param.name,
                    param.value.shape()
                ),
            ));
        }
        let data = reader.floats(param.value.len())?;
        param.value.data_mut().copy_from_slice(&data);
    }
    Ok(())
}

impl ModelBundle {
    pub fn new(
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            generator: Generator::new(generator, seed)?,
            discriminator: Discriminator::new(discriminator, seed.wrapping_add(1))?,
            optimizer: None,
            epoch: 0,
            epoch_step: 0,
            step: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            generator: self.generator.config.clone(),
            discriminator: self.discriminator.config.clone(),
            epoch: self.epoch,
            epoch_step: self.epoch_step,
            step: self.step,
            generator_params: entries(&self.generator.params),
            discriminator_params: entries(&self.discriminator.params),
            optimizer_steps: self
                .optimizer
                .as_ref()
                .map(|o| (o.generator.step, o.discriminator.step)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in self
            .generator
            .params
            .iter()
            .chain(self.discriminator.params.iter())
        {
            push_floats(&mut buf, p.value.data());
        }
        if let Some(opt) = &self.optimizer {
            for state in [&opt.generator, &opt.discriminator] {
                for moments in [&state.first, &state.second] {
                    for m in moments {
                        push_floats(&mut buf, m);
                    }
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write to a sibling file first so a crash never leaves a torn checkpoint.
        let tmp = path.with_extension("partial");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        drop(file);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Load networks and, when present, optimizer state.
    pub fn load(path: &Path) -> Result<Self> {
        Self::read(path, true)
    }

    /// Load networks only.
    pub fn load_for_inference(path: &Path) -> Result<Self> {
        Self::read(path, false)
    }

    fn read(path: &Path, with_optimizer: bool) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut reader = Reader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if reader.take(8)? != MAGIC {
            return Err(Error::format(
                path,
                "not a harmonizer checkpoint (bad magic)",
            ));
        }
        let len = u64::from_le_bytes(reader.take(8)?.try_into().expect("eight bytes")) as usize;
        if len > bytes.len() {
            return Err(Error::format(path, "checkpoint is truncated"));
        }
        let header: Header =
            serde_json::from_slice(reader.take(len)?).map_err(|e| Error::json(path, e))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {}", header.format_version),
            ));
        }
        let mut generator = Generator::new(header.generator, 0)?;
        let mut discriminator = Discriminator::new(header.discriminator, 0)?;
        load_store(&mut generator.params, &header.generator_params, &mut reader)?;
        load_store(
            &mut discriminator.params,
            &header.discriminator_params,
            &mut reader,
        )?;
        let optimizer = match header.optimizer_steps {
            Some((g_step, d_step)) if with_optimizer => {
                let mut read_state = |store: &ParamStore, step: u64| -> Result<AdamState> {
                    let mut moments = [Vec::new(), Vec::new()];
                    for m in &mut moments {
                        for p in store.iter() {
                            m.push(reader.floats(p.value.len())?);
                        }
                    }
                    let [first, second] = moments;
                    Ok(AdamState {
                        step,
                        first,
                        second,
                    })
                };
                let g = read_state(&generator.params, g_step)?;
                let d = read_state(&discriminator.params, d_step)?;
                Some(OptimizerState {
                    generator: g,
                    discriminator: d,
                })
            }
            _ => None,
        };
        Ok(Self {
            generator,
            discriminator,
            optimizer,
            epoch: header.epoch,
            epoch_step: header.epoch_step,
            step: header.step,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use harmonizer_nn::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_gen(arch: GeneratorArch) -> GeneratorConfig {
        GeneratorConfig {
            arch,
            base_channels: 4,
            depth: 2,
            max_channels: 8,
            residual_blocks: 1,
            ..GeneratorConfig::default()
        }
    }

    fn small_disc() -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: 4,
            depth: 2,
            max_channels: 8,
            ..DiscriminatorConfig::default()
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Frame {
        Frame::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
        Mask::from_fn(w, h, |_, _| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
    }

    #[test]
    fn unet_shape_contract() {
        let cfg = GeneratorConfig {
            base_channels: 16,
            depth: 3,
            ..GeneratorConfig::default()
        };
        let gen = Generator::new(cfg, 0).unwrap();
        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, false);
        let comp = g.constant(Tensor::zeros([1, 3, 64, 64]));
        let mask = g.constant(Tensor::zeros([1, 1, 64, 64]));
        let (out, raw) = gen.forward(&mut g, &p, comp, mask).unwrap();
        assert_eq!(g.value(out).shape(), [1, 3, 64, 64]);
        assert_eq!(g.value(raw).shape(), [1, 3, 64, 64]);
    }

    #[test]
    fn same_seed_same_parameters() {
        for arch in [GeneratorArch::Unet, GeneratorArch::Residual] {
            let a = Generator::new(small_gen(arch), 5).unwrap();
            let b = Generator::new(small_gen(arch), 5).unwrap();
            let c = Generator::new(small_gen(arch), 6).unwrap();
            assert_eq!(a.params().checksum(), b.params().checksum());
            assert_ne!(a.params().checksum(), c.params().checksum());
        }
    }

    #[test]
    fn outputs_are_finite_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for arch in [GeneratorArch::Unet, GeneratorArch::Residual] {
            let gen = Generator::new(small_gen(arch), 2).unwrap();
            let frame = random_frame(&mut rng, 16, 12);
            let out = generate(&gen, &frame, &Mask::filled(16, 12, 1.0)).unwrap();
            assert!(out
                .data()
                .iter()
                .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
        let disc = Discriminator::new(small_disc(), 3).unwrap();
        let map = discriminate(&disc, &random_frame(&mut rng, 16, 12)).unwrap();
        assert_eq!((map.width, map.height, map.values.len()), (16, 12, 192));
    }

    #[test]
    fn compositing_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen = Generator::new(small_gen(GeneratorArch::Unet), 2).unwrap();
        let frame = random_frame(&mut rng, 8, 8);
        assert_eq!(generate(&gen, &frame, &Mask::new(8, 8)).unwrap(), frame);

        let full = generate(&gen, &frame, &Mask::filled(8, 8, 1.0)).unwrap();
        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, false);
        let x = g.constant(frame.to_signed_tensor());
        let m = g.constant(Mask::filled(8, 8, 1.0).to_tensor());
        let input = g.concat(x, m);
        let raw = gen.forward_raw(&mut g, &p, input);
        let raw = g.value(raw);
        for (a, r) in full.data().iter().zip(raw.data()) {
            assert_eq!(*a, ((r + 1.0) * 0.5).clamp(0.0, 1.0));
        }

        for _ in 0..5 {
            let frame = random_frame(&mut rng, 8, 8);
            let mask = random_mask(&mut rng, 8, 8);
            let out = generate(&gen, &frame, &mask).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    if mask.get(x, y) == 0.0 {
                        assert_eq!(out.get(x, y), frame.get(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let gen = Generator::new(small_gen(GeneratorArch::Unet), 0).unwrap();
        let err = generate(&gen, &Frame::new(10, 8), &Mask::new(10, 8)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        let disc = Discriminator::new(small_disc(), 0).unwrap();
        assert!(discriminate(&disc, &Frame::new(8, 6)).is_err());
        assert!(Generator::new(
            GeneratorConfig {
                depth: 0,
                ..GeneratorConfig::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn parameter_gradients_are_finite_and_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for arch in [GeneratorArch::Unet, GeneratorArch::Residual] {
            let gen = Generator::new(small_gen(arch), 1).unwrap();
            let mut g = Graph::new();
            let p = gen.params().bind(&mut g, true);
            let comp = g.constant(random_frame(&mut rng, 8, 8).to_signed_tensor());
            let mask = g.constant(random_mask(&mut rng, 8, 8).to_tensor());
            let target = g.constant(random_frame(&mut rng, 8, 8).to_signed_tensor());
            let (out, _) = gen.forward(&mut g, &p, comp, mask).unwrap();
            let loss = crate::losses::reconstruction_var(&mut g, out, target).unwrap();
            let grads = g.backward(loss);
            let mut total = 0.0f64;
            for &v in p.vars() {
                let grad = grads.get(v).expect("every parameter receives a gradient");
                assert!(grad.all_finite());
                total += grad.data().iter().map(|x| (*x as f64).abs()).sum::<f64>();
            }
            assert!(total > 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle =
            ModelBundle::new(small_gen(GeneratorArch::Residual), small_disc(), 9).unwrap();
        bundle.step = 17;
        bundle.epoch = 2;
        bundle.epoch_step = 3;
        let moments = |store: &ParamStore, v: f32| -> Vec<Vec<f32>> {
            store.iter().map(|p| vec![v; p.value.len()]).collect()
        };
        bundle.optimizer = Some(OptimizerState {
            generator: AdamState {
                step: 17,
                first: moments(bundle.generator.params(), 0.5),
                second: moments(bundle.generator.params(), 0.25),
            },
            discriminator: AdamState {
                step: 16,
                first: moments(bundle.discriminator.params(), -0.5),
                second: moments(bundle.discriminator.params(), 0.125),
            },
        });
        let path = dir.path().join("model.ckpt");
        bundle.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        assert_eq!(loaded.generator.config(), bundle.generator.config());
        assert_eq!(loaded.discriminator.config(), bundle.discriminator.config());
        assert_eq!(
            loaded.generator.params().checksum(),
            bundle.generator.params().checksum()
        );
        assert_eq!(
            loaded.discriminator.params().checksum(),
            bundle.discriminator.params().checksum()
        );
        assert_eq!(loaded.optimizer, bundle.optimizer);
        assert_eq!((loaded.step, loaded.epoch, loaded.epoch_step), (17, 2, 3));
        assert!(ModelBundle::load_for_inference(&path)
            .unwrap()
            .optimizer
            .is_none());

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            ModelBundle::load(&path),
            Err(Error::Format { .. })
        ));
        fs::write(&path, b"garbage!garbage!").unwrap();
        assert!(matches!(
            ModelBundle::load(&path),
            Err(Error::Format { .. })
        ));
    }
}
