//! The synthesis network.
//!
//! Four single-channel encoder streams (T1, AP, VP and an HBP placeholder
//! that always receives zeros) each run a U-Net style ladder of conv blocks
//! with a residual Gabor texture layer at every scale. Per scale, the
//! streams are fused by availability-masked channel attention, and the
//! clinical vector is projected and broadcast onto the fused map. A decoder
//! climbs back to full resolution through upsample/concat/conv blocks and a
//! 1×1 head with tanh, rescaled to `[0, 1]`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gabor::{gabor_layer, make_gabor_bank, GaborParams};
use crate::volume::{PhaseVolume, Volume, CLINICAL_DIM};

/// Encoder streams in fusion order.
pub const STREAMS: [&str; 4] = ["t1", "ap", "vp", "hbp"];
pub const N_STREAMS: usize = STREAMS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaborSettings {
    pub wavelength: f64,
    pub orientations: Vec<f64>,
    pub phase: f64,
    pub sigma: f64,
    pub aspect: f64,
    pub size: usize,
}

impl From<&GaborParams> for GaborSettings {
    fn from(p: &GaborParams) -> Self {
        GaborSettings {
            wavelength: p.wavelength,
            orientations: p.orientations.clone(),
            phase: p.phase,
            sigma: p.sigma,
            aspect: p.aspect,
            size: p.size,
        }
    }
}

impl From<&GaborSettings> for GaborParams {
    fn from(s: &GaborSettings) -> Self {
        GaborParams {
            wavelength: s.wavelength,
            orientations: s.orientations.clone(),
            phase: s.phase,
            sigma: s.sigma,
            aspect: s.aspect,
            size: s.size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    /// Number of scales; channels double at each one.
    pub depth: usize,
    pub clinical_dim: usize,
    /// Hidden width of each per-phase attention scorer.
    pub attention_hidden: usize,
    pub gabor_on: bool,
    pub clinical_on: bool,
    pub gabor: GaborSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            depth: 5,
            clinical_dim: CLINICAL_DIM,
            attention_hidden: 8,
            gabor_on: true,
            clinical_on: true,
            gabor: GaborSettings::from(&GaborParams::default()),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument("model depth must be >= 2".into()));
        }
        if self.base_channels == 0 || self.attention_hidden == 0 {
            return Err(Error::InvalidArgument(
                "channel widths must be positive".into(),
            ));
        }
        if self.clinical_dim != CLINICAL_DIM {
            return Err(Error::InvalidArgument(format!(
                "clinical_dim must be {CLINICAL_DIM}"
            )));
        }
        GaborParams::from(&self.gabor).validate()
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Spatial sizes must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// Learnable tensors in a fixed, config-determined order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }
}

/// Parameter handles of one forward pass, in [`ParamSet`] order.
pub struct ParamVars<'a> {
    names: &'a [String],
    vars: &'a [Var],
}

impl ParamVars<'_> {
    fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }
}

/// One batch of network inputs. Unavailable phases may hold anything;
/// the availability flags decide and their data is replaced by zeros.
#[derive(Clone, Debug)]
pub struct InputBatch {
    /// T1, AP, VP, each `[N,1,H,W]`.
    pub phases: [Tensor; 3],
    /// Per sample: (AP available, VP available).
    pub available: Vec<(bool, bool)>,
    /// `[N, 22]`, standardized.
    pub clinical: Tensor,
}

impl InputBatch {
    pub fn batch_size(&self) -> usize {
        self.available.len()
    }

    /// Builds a batch from `(volume, slice)` pairs.
    pub fn from_slices(items: &[(&PhaseVolume, usize)]) -> Result<InputBatch> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let [_, h, w] = first.0.shape();
        let n = items.len();
        let mut phases = [
            Vec::with_capacity(n * h * w),
            Vec::with_capacity(n * h * w),
            Vec::with_capacity(n * h * w),
        ];
        let mut available = Vec::with_capacity(n);
        let mut clinical = Vec::with_capacity(n * CLINICAL_DIM);
        for &(v, z) in items {
            if v.shape()[1..] != [h, w] {
                return Err(Error::shape("batch", "slices differ in size"));
            }
            phases[0].extend_from_slice(v.t1.slice(z));
            phases[1].extend_from_slice(v.ap.slice(z));
            phases[2].extend_from_slice(v.vp.slice(z));
            available.push((v.ap_available, v.vp_available));
            clinical.extend_from_slice(&v.clinical_features());
        }
        let [t1, ap, vp] = phases;
        Ok(InputBatch {
            phases: [
                Tensor::new([n, 1, h, w], t1)?,
                Tensor::new([n, 1, h, w], ap)?,
                Tensor::new([n, 1, h, w], vp)?,
            ],
            available,
            clinical: Tensor::new([n, CLINICAL_DIM], clinical)?,
        })
    }

    /// Phase inputs with unavailable phases replaced by zero tensors.
    pub fn gated_phases(&self) -> [Tensor; 3] {
        let mut out = self.phases.clone();
        let n = self.batch_size();
        let inner = out[0].numel() / n.max(1);
        for (i, &(ap, vp)) in self.available.iter().enumerate() {
            for (p, avail) in [(1usize, ap), (2, vp)] {
                if !avail {
                    out[p].data_mut()[i * inner..(i + 1) * inner].fill(0.0);
                }
            }
        }
        out
    }

    /// `[N, 4]` availability over the four streams.
    pub fn stream_mask(&self) -> Vec<bool> {
        self.available
            .iter()
            .flat_map(|&(ap, vp)| [true, ap, vp, true])
            .collect()
    }
}

/// Values exposed from a forward pass for inspection.
pub struct ForwardOutput {
    /// `[N,1,H,W]` prediction in `[0, 1]`.
    pub prediction: Var,
    /// Per scale `[N, 4]` attention weights.
    pub attention: Vec<Var>,
    /// Deepest fused feature map `[N, C, h, w]`.
    pub bottleneck: Var,
}

#[derive(Clone, Debug)]
pub struct TriPfNet {
    config: ModelConfig,
    params: ParamSet,
    bank: Arc<Tensor>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

impl TriPfNet {
    /// Fresh network: fan-in scaled uniform weights, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let n_orient = config.gabor.orientations.len();
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let lecun = |fan_in: usize| (3.0 / fan_in as f64).sqrt();

        let conv = |params: &mut ParamSet,
                    rng: &mut ChaCha8Rng,
                    name: String,
                    cin,
                    cout,
                    k,
                    bound: f64| {
            params.push(format!("{name}.w"), uniform(rng, &[cout, cin, k, k], bound));
            params.push(format!("{name}.b"), Tensor::zeros([cout]));
        };

        for stream in STREAMS {
            for s in 0..config.depth {
                let cin = if s == 0 { 1 } else { config.channels(s - 1) };
                let c = config.channels(s);
                let p = format!("enc.{stream}.s{s}");
                conv(
                    &mut params,
                    &mut rng,
                    format!("{p}.conv1"),
                    cin,
                    c,
                    3,
                    he(cin * 9),
                );
                conv(
                    &mut params,
                    &mut rng,
                    format!("{p}.conv2"),
                    c,
                    c,
                    3,
                    he(c * 9),
                );
                if config.gabor_on {
                    // small mixing weights keep the residual branch near identity at start
                    conv(
                        &mut params,
                        &mut rng,
                        format!("{p}.gabor_mix"),
                        c * n_orient,
                        c,
                        1,
                        0.1 * lecun(c * n_orient),
                    );
                }
            }
        }
        for s in 0..config.depth {
            let c = config.channels(s);
            let h = config.attention_hidden;
            for stream in STREAMS {
                let p = format!("fuse.s{s}.{stream}");
                params.push(format!("{p}.mlp1.w"), uniform(&mut rng, &[h, c], he(c)));
                params.push(format!("{p}.mlp1.b"), Tensor::zeros([h]));
                params.push(format!("{p}.mlp2.w"), uniform(&mut rng, &[1, h], lecun(h)));
                params.push(format!("{p}.mlp2.b"), Tensor::zeros([1]));
            }
            if config.clinical_on {
                params.push(
                    format!("clin.s{s}.w"),
                    uniform(
                        &mut rng,
                        &[c, config.clinical_dim],
                        0.1 * lecun(config.clinical_dim),
                    ),
                );
                params.push(format!("clin.s{s}.b"), Tensor::zeros([c]));
            }
        }
        for s in (0..config.depth - 1).rev() {
            let c = config.channels(s);
            let cin = c + config.channels(s + 1);
            conv(
                &mut params,
                &mut rng,
                format!("dec.s{s}.conv1"),
                cin,
                c,
                3,
                he(cin * 9),
            );
            conv(
                &mut params,
                &mut rng,
                format!("dec.s{s}.conv2"),
                c,
                c,
                3,
                he(c * 9),
            );
        }
        let c0 = config.channels(0);
        conv(
            &mut params,
            &mut rng,
            "head".to_string(),
            c0,
            1,
            1,
            lecun(c0),
        );

        let bank = Arc::new(make_gabor_bank(&GaborParams::from(&config.gabor))?);
        Ok(TriPfNet {
            config,
            params,
            bank,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn gabor_bank(&self) -> &Arc<Tensor> {
        &self.bank
    }

    /// Registers every parameter on `tape`.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    fn vars<'a>(&'a self, vars: &'a [Var]) -> ParamVars<'a> {
        assert_eq!(vars.len(), self.params.len(), "parameter handle count");
        ParamVars {
            names: &self.params.names,
            vars,
        }
    }

    fn conv_block(&self, tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
        let h = tape.conv2d(
            x,
            pv.get(&format!("{prefix}.conv1.w")),
            Some(pv.get(&format!("{prefix}.conv1.b"))),
            1,
            1,
        )?;
        let h = tape.relu(h);
        let h = tape.conv2d(
            h,
            pv.get(&format!("{prefix}.conv2.w")),
            Some(pv.get(&format!("{prefix}.conv2.b"))),
            1,
            1,
        )?;
        Ok(tape.relu(h))
    }

    /// Multiscale encoder for one stream; returns one feature map per scale.
    pub fn erge_encode(
        &self,
        tape: &mut Tape,
        params: &[Var],
        stream: &str,
        image: Var,
    ) -> Result<Vec<Var>> {
        let [_, _, h, w] = match *tape.value(image).shape() {
            [n, 1, h, w] => [n, 1, h, w],
            ref s => {
                return Err(Error::shape(
                    "erge_encode",
                    format!("expected [N,1,H,W], got {s:?}"),
                ))
            }
        };
        let m = self.config.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                "erge_encode",
                format!("spatial size {h}x{w} must be divisible by {m}"),
            ));
        }
        let pv = self.vars(params);
        let mut feats = Vec::with_capacity(self.config.depth);
        let mut x = image;
        for s in 0..self.config.depth {
            if s > 0 {
                x = tape.maxpool2d(x, 2)?;
            }
            let prefix = format!("enc.{stream}.s{s}");
            x = self.conv_block(tape, &pv, &prefix, x)?;
            if self.config.gabor_on {
                x = gabor_layer(
                    tape,
                    x,
                    &self.bank,
                    pv.get(&format!("{prefix}.gabor_mix.w")),
                    pv.get(&format!("{prefix}.gabor_mix.b")),
                )?;
            }
            feats.push(x);
        }
        Ok(feats)
    }

    /// Attention fusion at one scale. `features` are in [`STREAMS`] order,
    /// `mask` is `[N, 4]` availability and `clinical` is `[N, 22]` (ignored
    /// when clinical conditioning is off). Returns the fused map and the
    /// attention weights.
    pub fn fuse_scale(
        &self,
        tape: &mut Tape,
        params: &[Var],
        scale: usize,
        features: &[Var],
        mask: &[bool],
        clinical: Var,
    ) -> Result<(Var, Var)> {
        if features.len() != N_STREAMS {
            return Err(Error::InvalidArgument(format!(
                "fusion expects {N_STREAMS} streams, got {}",
                features.len()
            )));
        }
        let pv = self.vars(params);
        let mut scores: Option<Var> = None;
        for (stream, &f) in STREAMS.iter().zip(features) {
            let p = format!("fuse.s{scale}.{stream}");
            let pooled = tape.mean_spatial(f)?;
            let h = tape.affine(
                pooled,
                pv.get(&format!("{p}.mlp1.w")),
                pv.get(&format!("{p}.mlp1.b")),
            )?;
            let h = tape.relu(h);
            let score = tape.affine(
                h,
                pv.get(&format!("{p}.mlp2.w")),
                pv.get(&format!("{p}.mlp2.b")),
            )?;
            scores = Some(match scores {
                None => score,
                Some(acc) => tape.concat_channels(acc, score)?,
            });
        }
        let weights = tape.masked_softmax(scores.expect("four streams"), mask)?;
        let mut fused = tape.weighted_sum(features, weights)?;
        if self.config.clinical_on {
            let proj = tape.affine(
                clinical,
                pv.get(&format!("clin.s{scale}.w")),
                pv.get(&format!("clin.s{scale}.b")),
            )?;
            fused = tape.add_spatial(fused, proj)?;
        }
        Ok((fused, weights))
    }

    /// Decoder from fused per-scale maps (shallowest first) to `[N,1,H,W]`
    /// in `[0, 1]`.
    pub fn decode(&self, tape: &mut Tape, params: &[Var], fused: &[Var]) -> Result<Var> {
        if fused.len() != self.config.depth {
            return Err(Error::InvalidArgument(format!(
                "decoder expects {} scales, got {}",
                self.config.depth,
                fused.len()
            )));
        }
        let pv = self.vars(params);
        let mut x = fused[self.config.depth - 1];
        for s in (0..self.config.depth - 1).rev() {
            let up = tape.upsample_nearest(x, 2)?;
            let cat = tape.concat_channels(up, fused[s])?;
            x = self.conv_block(tape, &pv, &format!("dec.s{s}"), cat)?;
        }
        let y = tape.conv2d(x, pv.get("head.w"), Some(pv.get("head.b")), 1, 0)?;
        let y = tape.tanh(y);
        let y = tape.shift(y, 1.0);
        Ok(tape.scale(y, 0.5))
    }

    /// Full forward pass with inputs already on the tape. `inputs` are the
    /// T1/AP/VP `[N,1,H,W]` values *after* availability gating.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        params: &[Var],
        inputs: [Var; 3],
        mask: &[bool],
        clinical: Var,
    ) -> Result<ForwardOutput> {
        let n = tape.value(inputs[0]).shape()[0];
        let (h, w) = {
            let s = tape.value(inputs[0]).shape();
            (s[2], s[3])
        };
        let mut streams = Vec::with_capacity(N_STREAMS);
        for (stream, &x) in STREAMS[..3].iter().zip(&inputs) {
            streams.push(self.erge_encode(tape, params, stream, x)?);
        }
        // The HBP placeholder sees the same zero image for every sample, so
        // it is encoded once and tiled across the batch.
        let zero = tape.constant(Tensor::zeros([1, 1, h, w]));
        let placeholder = self.erge_encode(tape, params, STREAMS[3], zero)?;
        let placeholder = placeholder
            .into_iter()
            .map(|f| {
                if n == 1 {
                    Ok(f)
                } else {
                    tape.repeat_batch(f, n)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        streams.push(placeholder);

        let mut fused = Vec::with_capacity(self.config.depth);
        let mut attention = Vec::with_capacity(self.config.depth);
        for s in 0..self.config.depth {
            let feats: Vec<Var> = streams.iter().map(|f| f[s]).collect();
            let (f, a) = self.fuse_scale(tape, params, s, &feats, mask, clinical)?;
            fused.push(f);
            attention.push(a);
        }
        let prediction = self.decode(tape, params, &fused)?;
        Ok(ForwardOutput {
            prediction,
            attention,
            bottleneck: fused[self.config.depth - 1],
        })
    }

    /// Forward pass from an [`InputBatch`]; gating by availability flags is
    /// applied here.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        batch: &InputBatch,
    ) -> Result<ForwardOutput> {
        let [t1, ap, vp] = batch.gated_phases();
        let inputs = [tape.constant(t1), tape.constant(ap), tape.constant(vp)];
        let clinical = tape.constant(batch.clinical.clone());
        self.forward_vars(tape, params, inputs, &batch.stream_mask(), clinical)
    }

    /// Inference-only prediction `[N,1,H,W]`.
    pub fn predict(&self, batch: &InputBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let out = self.forward(&mut tape, &params, batch)?;
        Ok(tape.value(out.prediction).clone())
    }

    /// Synthesized HBP for one slice of a volume, as `[1,1,H,W]`.
    pub fn synthesize(&self, v: &PhaseVolume, slice: usize) -> Result<Tensor> {
        if slice >= v.t1.depth() {
            return Err(Error::InvalidArgument(format!(
                "slice {slice} out of range for depth {}",
                v.t1.depth()
            )));
        }
        if v.t1.data().iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidArgument(
                "T1 is missing (all-zero volume); T1 is a mandatory input".into(),
            ));
        }
        self.predict(&InputBatch::from_slices(&[(v, slice)])?)
    }

    /// Synthesized HBP for every slice of a volume.
    pub fn synthesize_volume(&self, v: &PhaseVolume, batch_size: usize) -> Result<Volume> {
        let [d, h, w] = v.shape();
        let mut out = Vec::with_capacity(d * h * w);
        if v.t1.data().iter().all(|&x| x == 0.0) {
            return Err(Error::InvalidArgument(
                "T1 is missing (all-zero volume); T1 is a mandatory input".into(),
            ));
        }
        let slices: Vec<usize> = (0..d).collect();
        for chunk in slices.chunks(batch_size.max(1)) {
            let items: Vec<(&PhaseVolume, usize)> = chunk.iter().map(|&z| (v, z)).collect();
            let pred = self.predict(&InputBatch::from_slices(&items)?)?;
            out.extend_from_slice(pred.data());
        }
        Volume::new([d, h, w], out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.params.to_entries())
    }

    /// Rebuilds a network for `config` and fills it from a checkpoint,
    /// requiring exactly the parameters the config defines.
    pub fn load(config: ModelConfig, path: &std::path::Path) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        Self::from_entries(config, entries, &path.display().to_string())
    }

    pub fn from_entries(
        config: ModelConfig,
        entries: Vec<(String, Tensor)>,
        record: &str,
    ) -> Result<Self> {
        let mut net = TriPfNet::new(config, 0)?;
        if entries.len() != net.params.len() {
            return Err(Error::parse(
                record,
                format!(
                    "checkpoint has {} tensors, config expects {}",
                    entries.len(),
                    net.params.len()
                ),
            ));
        }
        for (i, (name, t)) in entries.into_iter().enumerate() {
            if name != net.params.names[i] || t.shape() != net.params.tensors[i].shape() {
                return Err(Error::parse(
                    record,
                    format!(
                        "entry {i} is {name} {:?}, expected {} {:?}",
                        t.shape(),
                        net.params.names[i],
                        net.params.tensors[i].shape()
                    ),
                ));
            }
            net.params.tensors[i] = t;
        }
        Ok(net)
    }
}
