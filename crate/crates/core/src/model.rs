//! Encoder, attention bottleneck and decoder of the volumetric retrieval
//! network, built on the [`crate::autodiff`] tape.
//!
//! Layout: a learned 1×1 embedding of the six static features is
//! concatenated with the nine TBB channels; stage 1 runs at full resolution
//! and stages 2–4 halve it, so the bottleneck sits at 1/8 resolution. The
//! bottleneck applies residual multi-head self-attention and feeds a
//! rectified 18-channel PWV head. The decoder upsamples three times, fusing
//! the encoder skips by channel concatenation, and ends in a 72-layer value
//! head (refined by one residual 3×3×3 volume convolution) and a surface
//! probability head.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::fields::{
    denormalize_rate, model_input, PrecipVolume, SpectralScene, SurfaceField, INPUT_CHANNELS, LAYERS, PWV_LAYERS,
    STATIC_CHANNELS, TBB_CHANNELS,
};
use crate::tensor::Tensor;
use crate::tensorfile::{read_tensor, write_tensor, TensorFile};

/// Downsampling stages between the input and the bottleneck.
pub const N_DOWNSAMPLES: usize = 3;
/// Spatial reduction factor of the bottleneck.
pub const BOTTLENECK_FACTOR: usize = 1 << N_DOWNSAMPLES;
/// PWV targets are divided by this (mm) before supervision.
pub const PWV_SCALE_MM: f64 = 10.0;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub attention_heads: usize,
    pub out_layers: usize,
    pub pwv_channels: usize,
    pub decoder_head_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::scaled(8)
    }
}

impl ModelConfig {
    /// Full-width channels `[128, 256, 512, 1024]` and head width 128,
    /// divided by `divisor` (8 gives the toy model).
    pub fn scaled(divisor: usize) -> Self {
        ModelConfig {
            in_channels: INPUT_CHANNELS,
            stage_channels: [128, 256, 512, 1024].map(|c| c / divisor),
            attention_heads: 4,
            out_layers: LAYERS,
            pwv_channels: PWV_LAYERS,
            decoder_head_width: 128 / divisor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != INPUT_CHANNELS || self.out_layers != LAYERS || self.pwv_channels != PWV_LAYERS {
            return Err(Error::validation(format!(
                "model must map {INPUT_CHANNELS} input channels to {LAYERS} layers and {PWV_LAYERS} PWV channels"
            )));
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("stage_channels must be positive and strictly increasing"));
        }
        if self.attention_heads == 0 || !self.stage_channels[3].is_multiple_of(self.attention_heads) {
            return Err(Error::validation("bottleneck channels must divide evenly into attention heads"));
        }
        if self.decoder_head_width == 0 {
            return Err(Error::validation("decoder_head_width must be positive"));
        }
        Ok(())
    }

    pub fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(BOTTLENECK_FACTOR) || !w.is_multiple_of(BOTTLENECK_FACTOR) {
            return Err(Error::ConfigMismatch(format!(
                "scene {h}x{w} is not divisible by the bottleneck factor {BOTTLENECK_FACTOR}"
            )));
        }
        Ok(())
    }

    /// Every learnable tensor with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Shape)> {
        let [c1, c2, c3, c4] = self.stage_channels;
        let hw = self.decoder_head_width;
        let mut v: Vec<(String, Shape)> = vec![
            ("embed.w".into(), [STATIC_CHANNELS, STATIC_CHANNELS, 1, 1]),
            ("embed.b".into(), [STATIC_CHANNELS, 1, 1, 1]),
        ];
        let mut conv_bn = |name: &str, cout: usize, cin: usize| {
            v.push((format!("{name}.conv.w"), [cout, cin, 3, 3]));
            v.push((format!("{name}.bn.gamma"), [cout, 1, 1, 1]));
            v.push((format!("{name}.bn.beta"), [cout, 1, 1, 1]));
        };
        conv_bn("enc1", c1, self.in_channels);
        conv_bn("enc2", c2, c1);
        conv_bn("enc3", c3, c2);
        conv_bn("enc4", c4, c3);
        conv_bn("dec3", c3, c4 + c3);
        conv_bn("dec2", c2, c3 + c2);
        conv_bn("dec1", hw, c2 + c1);
        for p in ["q", "k", "v", "o"] {
            v.push((format!("attn.w{p}"), [c4, c4, 1, 1]));
        }
        v.push(("pwv_head.w".into(), [self.pwv_channels, c4, 1, 1]));
        v.push(("pwv_head.b".into(), [self.pwv_channels, 1, 1, 1]));
        v.push(("value_head.w".into(), [self.out_layers, hw, 1, 1]));
        v.push(("value_head.b".into(), [self.out_layers, 1, 1, 1]));
        v.push(("refine3d.k".into(), [1, 3, 3, 3]));
        v.push(("prob_head.w".into(), [1, hw, 1, 1]));
        v.push(("prob_head.b".into(), [1, 1, 1, 1]));
        v
    }

    /// Batch-norm layer names, which also key the running statistics.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        let [c1, c2, c3, c4] = self.stage_channels;
        vec![
            ("enc1".into(), c1),
            ("enc2".into(), c2),
            ("enc3".into(), c3),
            ("enc4".into(), c4),
            ("dec3".into(), c3),
            ("dec2".into(), c2),
            ("dec1".into(), self.decoder_head_width),
        ]
    }
}

/// Learnable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
    /// `<layer>.bn.running_mean` / `<layer>.bn.running_var`.
    pub buffers: BTreeMap<String, Tensor>,
}

fn gain(name: &str) -> f64 {
    // layers followed by GELU get He scaling
    if name.ends_with(".conv.w") || name == "embed.w" {
        2f64.sqrt()
    } else {
        1.0
    }
}

/// Fan-in scaled uniform initialization; biases and BN shifts start at 0,
/// BN scales at 1. The volume refinement starts as a no-op.
pub fn init(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".b") || name.ends_with(".beta") || name == "refine3d.k" {
            vec![0.0; n]
        } else if name.ends_with(".gamma") {
            vec![1.0; n]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = gain(&name) * (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        tensors.insert(name, Tensor::new(shape.to_vec(), data)?);
    }
    let mut buffers = BTreeMap::new();
    for (layer, c) in config.bn_layers() {
        buffers.insert(format!("{layer}.bn.running_mean"), Tensor::zeros(&[c]));
        buffers.insert(format!("{layer}.bn.running_var"), Tensor::filled(&[c], 1.0));
    }
    Ok(Parameters {
        config: config.clone(),
        tensors,
        buffers,
    })
}

impl Parameters {
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().chain(self.buffers.values()).all(Tensor::is_finite)
    }

    fn bn_mode(&self, layer: &str, train: bool) -> BnMode {
        if train {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: self.buffers[&format!("{layer}.bn.running_mean")].data().to_vec(),
                var: self.buffers[&format!("{layer}.bn.running_var")].data().to_vec(),
            }
        }
    }

    /// Fold a training forward pass's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        for (layer, var) in &pass.bn_nodes {
            let Some((mean, unbiased)) = pass.tape.batch_stats(*var) else { continue };
            for (key, batch) in [("running_mean", mean), ("running_var", unbiased)] {
                let buf = self.buffers.get_mut(&format!("{layer}.bn.{key}")).expect("buffer exists");
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
    }
}

/// A batch of model inputs: normalized TBB and raw static features.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// `N×9×H×W`
    pub tbb: Vec<f64>,
    /// `N×6×H×W`
    pub static_features: Vec<f64>,
}

impl Batch {
    pub fn from_scenes(scenes: &[&SpectralScene]) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| Error::validation("empty batch"))?;
        let (h, w) = (first.h, first.w);
        let plane = h * w;
        let mut tbb = Vec::with_capacity(scenes.len() * TBB_CHANNELS * plane);
        let mut static_features = Vec::with_capacity(scenes.len() * STATIC_CHANNELS * plane);
        for s in scenes {
            if (s.h, s.w) != (h, w) {
                return Err(Error::validation("all scenes in a batch must share H×W"));
            }
            let x = model_input(s)?;
            tbb.extend_from_slice(&x.data()[..TBB_CHANNELS * plane]);
            static_features.extend_from_slice(&x.data()[TBB_CHANNELS * plane..]);
        }
        Ok(Batch {
            n: scenes.len(),
            h,
            w,
            tbb,
            static_features,
        })
    }
}

/// A recorded forward pass, kept for back-propagation.
#[derive(Debug)]
pub struct ForwardPass {
    pub tape: Tape,
    pub params: BTreeMap<String, Var>,
    pub latent: Var,
    pub skips: [Var; 3],
    pub attention: Var,
    pub features: Var,
    /// `N×72×H×W`, normalized rates in (0, 1).
    pub value: Var,
    /// `N×1×H×W`
    pub prob: Var,
    /// `N×18×H/8×W/8`, in units of [`PWV_SCALE_MM`].
    pub pwv: Var,
    pub bn_nodes: Vec<(String, Var)>,
}

struct Builder<'a> {
    tape: Tape,
    params: &'a Parameters,
    vars: BTreeMap<String, Var>,
    bn_nodes: Vec<(String, Var)>,
    train: bool,
}

impl Builder<'_> {
    fn p(&mut self, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let t = &self.params.tensors[name];
        let shape: Shape = t.dims().try_into().expect("parameters are 4-d");
        let v = self.tape.leaf(shape, t.data().to_vec());
        self.vars.insert(name.to_string(), v);
        v
    }

    fn conv_bn_gelu(&mut self, name: &str, x: Var, stride: usize) -> Var {
        let w = self.p(&format!("{name}.conv.w"));
        let g = self.p(&format!("{name}.bn.gamma"));
        let b = self.p(&format!("{name}.bn.beta"));
        let c = self.tape.conv2d(x, w, None, stride, 1);
        let mode = self.params.bn_mode(name, self.train);
        let n = self.tape.batch_norm(c, g, b, &mode);
        self.bn_nodes.push((name.to_string(), n));
        self.tape.gelu(n)
    }

    fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.tape.conv2d(x, w, Some(b), 1, 0)
    }
}

/// Run the network; `train` selects batch statistics in batch norm.
pub fn forward_pass(params: &Parameters, batch: &Batch, train: bool) -> Result<ForwardPass> {
    let cfg = &params.config;
    cfg.check_dims(batch.h, batch.w)?;
    let (n, h, w) = (batch.n, batch.h, batch.w);
    let mut b = Builder {
        tape: Tape::new(),
        params,
        vars: BTreeMap::new(),
        bn_nodes: Vec::new(),
        train,
    };
    let tbb = b.tape.leaf([n, TBB_CHANNELS, h, w], batch.tbb.clone());
    let stat = b.tape.leaf([n, STATIC_CHANNELS, h, w], batch.static_features.clone());

    // encode
    let e = b.linear("embed", stat);
    let e = b.tape.gelu(e);
    let x = b.tape.concat(tbb, e);
    let a1 = b.conv_bn_gelu("enc1", x, 1);
    let a2 = b.conv_bn_gelu("enc2", a1, 2);
    let a3 = b.conv_bn_gelu("enc3", a2, 2);
    let latent = b.conv_bn_gelu("enc4", a3, 2);

    // bottleneck
    let wa = ["q", "k", "v", "o"].map(|s| b.p(&format!("attn.w{s}")));
    let attention = b.tape.attention(latent, wa, cfg.attention_heads);
    let features = b.tape.add(latent, attention);
    let pw = b.linear("pwv_head", features);
    let pwv = b.tape.relu(pw);

    // decode
    let mut d = features;
    for (name, skip) in [("dec3", a3), ("dec2", a2), ("dec1", a1)] {
        let u = b.tape.upsample2x(d);
        let c = b.tape.concat(u, skip);
        d = b.conv_bn_gelu(name, c, 1);
    }
    let z = b.linear("value_head", d);
    let k = b.p("refine3d.k");
    let r = b.tape.conv3d(z, k);
    let zr = b.tape.add(z, r);
    let value = b.tape.sigmoid(zr);
    let pl = b.linear("prob_head", d);
    let prob = b.tape.sigmoid(pl);

    Ok(ForwardPass {
        tape: b.tape,
        params: b.vars,
        latent,
        skips: [a1, a2, a3],
        attention,
        features,
        value,
        prob,
        pwv,
        bn_nodes: b.bn_nodes,
    })
}

/// One sample's model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub h: usize,
    pub w: usize,
    /// `72×H×W` normalized rates in (0, 1).
    pub value: Vec<f64>,
    /// `H×W` rain probabilities in (0, 1).
    pub prob: Vec<f64>,
    /// `18×H/8×W/8`, mm.
    pub pwv: Vec<f64>,
}

impl Prediction {
    /// Rates in mm h⁻¹.
    pub fn volume(&self) -> PrecipVolume {
        PrecipVolume {
            h: self.h,
            w: self.w,
            rate: self.value.iter().map(|&v| denormalize_rate(v)).collect(),
        }
    }

    pub fn probability(&self) -> SurfaceField {
        SurfaceField {
            h: self.h,
            w: self.w,
            rate: self.prob.clone(),
        }
    }

    /// Bit-level equality, distinguishing `-0.0` and NaN payloads.
    pub fn bit_eq(&self, other: &Prediction) -> bool {
        let same = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        (self.h, self.w) == (other.h, other.w)
            && same(&self.value, &other.value)
            && same(&self.prob, &other.prob)
            && same(&self.pwv, &other.pwv)
    }
}

impl ForwardPass {
    pub fn predictions(&self) -> Vec<Prediction> {
        let [n, _, h, w] = self.tape.shape(self.value);
        let (v, p, q) = (self.tape.value(self.value), self.tape.value(self.prob), self.tape.value(self.pwv));
        let (vl, pl, ql) = (v.len() / n, p.len() / n, q.len() / n);
        (0..n)
            .map(|i| Prediction {
                h,
                w,
                value: v[i * vl..(i + 1) * vl].to_vec(),
                prob: p[i * pl..(i + 1) * pl].to_vec(),
                pwv: q[i * ql..(i + 1) * ql].iter().map(|x| x * PWV_SCALE_MM).collect(),
            })
            .collect()
    }
}

/// Inference-mode forward pass over a set of scenes.
pub fn forward(params: &Parameters, scenes: &[&SpectralScene]) -> Result<Vec<Prediction>> {
    let batch = Batch::from_scenes(scenes)?;
    Ok(forward_pass(params, &batch, false)?.predictions())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub steps: u64,
    /// Tensor name → file name, for parameters and buffers alike.
    pub tensors: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write one f64 TensorFile per tensor plus a JSON manifest into `dir`.
pub fn save_checkpoint(dir: &Path, params: &Parameters, seed: u64, steps: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for (name, t) in params.tensors.iter().chain(&params.buffers) {
        let file = format!("{name}.vptn");
        write_tensor(dir.join(&file), &TensorFile::f64(t.clone()).with_meta("name", name))?;
        files.insert(name.clone(), file);
    }
    let manifest = CheckpointManifest {
        config: params.config.clone(),
        seed,
        steps,
        tensors: files,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Parameters, CheckpointManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let cfg = &manifest.config;
    cfg.validate()?;
    let mut expected: BTreeMap<String, Vec<usize>> =
        cfg.parameter_shapes().into_iter().map(|(n, s)| (n, s.to_vec())).collect();
    let bn: BTreeMap<String, Vec<usize>> = cfg
        .bn_layers()
        .into_iter()
        .flat_map(|(l, c)| [(format!("{l}.bn.running_mean"), vec![c]), (format!("{l}.bn.running_var"), vec![c])])
        .collect();
    let mut tensors = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    if manifest.tensors.len() != expected.len() + bn.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint lists {} tensors, config implies {}",
            manifest.tensors.len(),
            expected.len() + bn.len()
        )));
    }
    for (name, file) in &manifest.tensors {
        let t = read_tensor(dir.join(file))?.tensor;
        let (want, into) = match expected.remove(name) {
            Some(s) => (s, &mut tensors),
            None => match bn.get(name) {
                Some(s) => (s.clone(), &mut buffers),
                None => return Err(Error::ConfigMismatch(format!("unexpected tensor {name} in checkpoint"))),
            },
        };
        if t.dims() != want.as_slice() {
            return Err(Error::ConfigMismatch(format!(
                "tensor {name} has shape {:?}, config implies {want:?}",
                t.dims()
            )));
        }
        into.insert(name.clone(), t);
    }
    if let Some(missing) = expected.keys().next() {
        return Err(Error::ConfigMismatch(format!("checkpoint is missing {missing}")));
    }
    let params = Parameters {
        config: manifest.config.clone(),
        tensors,
        buffers,
    };
    if !params.is_finite() {
        return Err(Error::validation("checkpoint contains non-finite values"));
    }
    Ok((params, manifest))
}
