use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{InputKind, MaskKind, ModelConfig, DF_CHANNELS};
use super::filter::{apply_complex_mask, apply_real_mask, deep_filter};
use crate::dsp::{mel_partition, BandPartition, Spectrogram, StftPlan};
use crate::layers::{ConvBlock, Ctx, Direction, Linear, Mode, ParamStore, Rnn, TransformerLayer};
use crate::tensor::{read_checkpoint, write_checkpoint, RnnKind, Tensor, Var};
use crate::{Error, Result};

/// Floor inside the log power spectrum.
pub const LPS_FLOOR: f64 = 1e-8;

/// Full-band time transformer with its `K·E ↔ E` projections.
#[derive(Clone, Debug)]
pub struct FullBand {
    pub pre: Linear,
    pub layer: TransformerLayer,
    pub post: Linear,
}

#[derive(Clone, Debug)]
pub struct MptBlock {
    /// Bidirectional, along the band axis of each frame.
    pub t1: Option<TransformerLayer>,
    /// Along time, per band.
    pub t2: TransformerLayer,
    /// Along time on the pooled full-band feature, added residually.
    pub t3: Option<FullBand>,
}

/// Group GRUs over the per-frame deep-filter channels and the tap projection.
#[derive(Clone, Debug)]
pub struct DfHead {
    pub groups: Vec<Rnn>,
    pub taps: Linear,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub wave: Vec<f64>,
    pub spec: Spectrogram,
}

/// Tape handles of a waveform forward pass.
#[derive(Clone, Debug)]
pub struct WaveForward {
    pub wave: Var,
    pub re: Var,
    pub im: Var,
    /// Spectrogram of the scaled input.
    pub input: Spectrogram,
}

#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    partition: BandPartition,
    stft: StftPlan,
    mode: Mode,
    pub store: ParamStore,
    pub compress: Vec<Linear>,
    pub conv: ConvBlock,
    pub blocks: Vec<MptBlock>,
    pub decompress: Vec<Linear>,
    pub df: Option<DfHead>,
}

/// RMS of a waveform, or 1 for silence.
pub fn rms_scale(wave: &[f64]) -> f64 {
    let rms = (wave.iter().map(|v| v * v).sum::<f64>() / wave.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        rms
    } else {
        1.0
    }
}

/// Zero weights and a unit `τ = 0` bias: every bin starts as a pass-through filter.
fn identity_taps(store: &mut ParamStore, taps: &Linear, n: usize) {
    taps.zero(store);
    let bias = store.get_mut(taps.bias).data_mut();
    for f in 0..bias.len() / (2 * n) {
        bias[f * 2 * n] = 1.0;
    }
}

impl Model {
    /// Builds a network with weights drawn from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let partition = mel_partition(c.bins(), c.bands, c.sample_rate)?;
        let e = c.dim;
        let time_dir = if c.causal { Direction::Uni } else { Direction::Bi };

        let compress = partition
            .widths()
            .iter()
            .enumerate()
            .map(|(k, w)| {
                Linear::new(&mut store, &format!("compress.band{k}"), c.input.channels() * w, e, &mut rng)
            })
            .collect();
        let conv = ConvBlock::new(&mut store, "conv", e, &mut rng);
        let blocks = (0..c.blocks)
            .map(|i| {
                let name = |t: &str| format!("block{i}.{t}");
                let t1 = c.variant.has_t1().then(|| {
                    TransformerLayer::new(&mut store, &name("t1"), e, c.expansion, c.rnn, Direction::Bi, &mut rng)
                });
                let t2 = TransformerLayer::new(&mut store, &name("t2"), e, c.expansion, c.rnn, time_dir, &mut rng);
                let t3 = c.variant.has_t3().then(|| FullBand {
                    pre: Linear::new(&mut store, &name("t3.pre"), c.bands * e, e, &mut rng),
                    layer: TransformerLayer::new(&mut store, &name("t3"), e, c.expansion, c.rnn, time_dir, &mut rng),
                    post: Linear::new(&mut store, &name("t3.post"), e, c.bands * e, &mut rng),
                });
                MptBlock { t1, t2, t3 }
            })
            .collect();
        let d = c.decoder_channels();
        let decompress = partition
            .widths()
            .iter()
            .enumerate()
            .map(|(k, w)| Linear::new(&mut store, &format!("decompress.band{k}"), e, d * w, &mut rng))
            .collect();
        let df = c.deep_filter.then(|| DfHead {
            groups: (0..c.df_groups)
                .map(|g| {
                    Rnn::new(
                        &mut store,
                        &format!("df.gru{g}"),
                        RnnKind::Gru,
                        Direction::Uni,
                        c.df_group_input(),
                        c.df_hidden,
                        &mut rng,
                    )
                })
                .collect(),
            taps: Linear::new(
                &mut store,
                "df.taps",
                c.df_groups * c.df_hidden,
                c.bins() * 2 * c.df_taps,
                &mut rng,
            ),
        });
        if let Some(head) = &df {
            identity_taps(&mut store, &head.taps, c.df_taps);
        }
        Ok(Self {
            config: c.clone(),
            stft: StftPlan::new(c.fft, c.hop)?,
            mode: Mode::Eval,
            partition,
            store,
            compress,
            conv,
            blocks,
            decompress,
            df,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Normalization mode used by the inference entry points; `Eval` after build.
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn partition(&self) -> &BandPartition {
        &self.partition
    }

    pub fn stft_plan(&self) -> &StftPlan {
        &self.stft
    }

    /// Trainable parameters per submodule, in network order.
    pub fn census(&self) -> Vec<(String, usize)> {
        let mut out = vec![
            ("compression".to_string(), self.store.count_prefix("compress.")),
            ("conv".to_string(), self.store.count_prefix("conv.")),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (t, present) in [("t1", b.t1.is_some()), ("t2", true), ("t3", b.t3.is_some())] {
                if present {
                    let name = format!("block{i}.{t}");
                    let n = self.store.count_prefix(&format!("{name}."));
                    out.push((name, n));
                }
            }
        }
        out.push(("decompression".into(), self.store.count_prefix("decompress.")));
        out.push(("df_head".into(), self.store.count_prefix("df.")));
        out
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Transformer layers per block.
    pub fn transformers_per_block(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .map(|b| 1 + b.t1.is_some() as usize + b.t3.is_some() as usize)
            .collect()
    }

    /// Network input features `[T, F, channels]` of a normalized spectrogram.
    pub fn input_features(&self, spec: &Spectrogram) -> Tensor {
        let (t, f) = (spec.frames, spec.bins);
        match self.config.input {
            InputKind::Lps => Tensor::from_fn(&[t, f, 1], |i| {
                (spec.re[i] * spec.re[i] + spec.im[i] * spec.im[i] + LPS_FLOOR).ln()
            }),
            InputKind::Complex => Tensor::from_fn(&[t, f, 2], |i| {
                if i % 2 == 0 {
                    spec.re[i / 2]
                } else {
                    spec.im[i / 2]
                }
            }),
        }
    }

    /// `[T, F, channels]` → `[T, K, E]` with one linear per band.
    pub fn freq_compress(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let ch = self.config.input.channels();
        if shape.len() != 3 || shape[1] != self.partition.bins() || shape[2] != ch {
            return Err(Error::Precondition(format!(
                "compression expects [T, {}, {ch}], got {shape:?}",
                self.partition.bins()
            )));
        }
        let t = shape[0];
        let mut bands = Vec::with_capacity(self.compress.len());
        for (k, lin) in self.compress.iter().enumerate() {
            let r = self.partition.range(k);
            let w = r.len();
            let part = ctx.tape.slice(x, 1, r.start, r.end)?;
            let part = ctx.tape.reshape(part, &[t, w * ch])?;
            let y = lin.forward(ctx, part)?;
            bands.push(ctx.tape.reshape(y, &[t, 1, self.config.dim])?);
        }
        Ok(ctx.tape.concat(&bands, 1)?)
    }

    /// One MPT block on `[T, K, E]`.
    pub fn mpt_block(&self, ctx: &mut Ctx, index: usize, x: Var) -> Result<Var> {
        let block = &self.blocks[index];
        let (k, e) = (self.config.bands, self.config.dim);
        let mut x = x;
        if let Some(t1) = &block.t1 {
            x = t1.forward(ctx, x)?;
        }
        let per_band = ctx.tape.permute(x, &[1, 0, 2])?;
        let per_band = block.t2.forward(ctx, per_band)?;
        x = ctx.tape.permute(per_band, &[1, 0, 2])?;
        if let Some(fb) = &block.t3 {
            let t = ctx.tape.shape(x)[0];
            let flat = ctx.tape.reshape(x, &[1, t, k * e])?;
            let pooled = fb.pre.forward(ctx, flat)?;
            let y = fb.layer.forward(ctx, pooled)?;
            let y = fb.post.forward(ctx, y)?;
            let y = ctx.tape.reshape(y, &[t, k, e])?;
            x = ctx.tape.add(x, y)?;
        }
        Ok(x)
    }

    /// `[T, K, E]` → `[T, F, D]` with one linear per band.
    pub fn freq_decompress(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.config.bands || shape[2] != self.config.dim {
            return Err(Error::Precondition(format!(
                "decompression expects [T, {}, {}], got {shape:?}",
                self.config.bands, self.config.dim
            )));
        }
        let t = shape[0];
        let d = self.config.decoder_channels();
        let mut parts = Vec::with_capacity(self.decompress.len());
        for (k, lin) in self.decompress.iter().enumerate() {
            let w = self.partition.range(k).len();
            let band = ctx.tape.slice(x, 1, k, k + 1)?;
            let band = ctx.tape.reshape(band, &[t, self.config.dim])?;
            let y = lin.forward(ctx, band)?;
            parts.push(ctx.tape.reshape(y, &[t, w, d])?);
        }
        Ok(ctx.tape.concat(&parts, 1)?)
    }

    /// Deep-filter taps `[T, F, 2N]` from the DF channels of `[T, F, D]`.
    pub fn df_taps(&self, ctx: &mut Ctx, decoded: Var) -> Result<Var> {
        let head = self
            .df
            .as_ref()
            .ok_or_else(|| Error::Precondition("model has no deep filter".into()))?;
        let c = &self.config;
        let (t, f) = (ctx.tape.shape(decoded)[0], c.bins());
        let m = c.mask.channels();
        let chans = ctx.tape.slice(decoded, 2, m, m + DF_CHANNELS)?;
        let chans = ctx.tape.reshape(chans, &[1, t, DF_CHANNELS * f])?;
        let gi = c.df_group_input();
        let mut outs = Vec::with_capacity(head.groups.len());
        for (g, rnn) in head.groups.iter().enumerate() {
            let part = ctx.tape.slice(chans, 2, g * gi, (g + 1) * gi)?;
            outs.push(rnn.forward(ctx, part)?);
        }
        let hidden = if outs.len() == 1 {
            outs[0]
        } else {
            ctx.tape.concat(&outs, 2)?
        };
        let taps = head.taps.forward(ctx, hidden)?;
        Ok(ctx.tape.reshape(taps, &[t, f, 2 * c.df_taps])?)
    }

    /// Mask stream followed by the optional deep-filter stream.
    ///
    /// `decoded` is `[T, F, D]`; `re`/`im` are the noisy spectrum `[T, F]`.
    pub fn dual_stream_filter(&self, ctx: &mut Ctx, decoded: Var, re: Var, im: Var) -> Result<(Var, Var)> {
        let shape = ctx.tape.shape(decoded).to_vec();
        let d = self.config.decoder_channels();
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::Precondition(format!(
                "dual-stream filter expects {d} channels, got {shape:?}"
            )));
        }
        let (t, f) = (shape[0], shape[1]);
        let channel = |ctx: &mut Ctx, c: usize| -> Result<Var> {
            let s = ctx.tape.slice(decoded, 2, c, c + 1)?;
            Ok(ctx.tape.reshape(s, &[t, f])?)
        };
        let (r1, i1) = match self.config.mask {
            MaskKind::Real => {
                let m = channel(ctx, 0)?;
                let gain = ctx.tape.sigmoid(m)?;
                apply_real_mask(&mut ctx.tape, gain, re, im)?
            }
            MaskKind::Complex => {
                let mr = channel(ctx, 0)?;
                let mi = channel(ctx, 1)?;
                apply_complex_mask(&mut ctx.tape, mr, mi, re, im)?
            }
        };
        if self.df.is_none() {
            return Ok((r1, i1));
        }
        let taps = self.df_taps(ctx, decoded)?;
        deep_filter(&mut ctx.tape, taps, r1, i1)
    }

    /// Runs the network on a (normalized) spectrogram; returns the enhanced
    /// real and imaginary parts `[T, F]`.
    pub fn spectral_forward(&self, ctx: &mut Ctx, spec: &Spectrogram) -> Result<(Var, Var)> {
        spec.validate()?;
        if spec.bins != self.config.bins() {
            return Err(Error::Precondition(format!(
                "spectrogram has {} bins, model expects {}",
                spec.bins,
                self.config.bins()
            )));
        }
        let (t, f) = (spec.frames, spec.bins);
        let feats = ctx.input(self.input_features(spec));
        let re = ctx.input(Tensor::new(vec![t, f], spec.re.clone())?);
        let im = ctx.input(Tensor::new(vec![t, f], spec.im.clone())?);
        let mut x = self.freq_compress(ctx, feats)?;
        x = self.conv.forward(ctx, x)?;
        for i in 0..self.blocks.len() {
            x = self.mpt_block(ctx, i, x)?;
        }
        let decoded = self.freq_decompress(ctx, x)?;
        self.dual_stream_filter(ctx, decoded, re, im)
    }

    /// Waveform estimate on the tape, in the units of `wave / scale`, with
    /// the input length.
    pub fn waveform_forward(&self, ctx: &mut Ctx, wave: &[f64], scale: f64) -> Result<WaveForward> {
        let n = wave.len();
        let scaled: Vec<f64> = wave.iter().map(|v| v / scale).collect();
        let spec = self.stft.stft(&scaled, self.config.sample_rate)?;
        let (re, im) = self.spectral_forward(ctx, &spec)?;
        let y = self.stft.istft_on_tape(&mut ctx.tape, re, im)?;
        let len = ctx.tape.shape(y)[0];
        let y = if len < n {
            let pad = ctx.input(Tensor::zeros(&[n - len]));
            ctx.tape.concat(&[y, pad], 0)?
        } else {
            y
        };
        Ok(WaveForward { wave: y, re, im, input: spec })
    }

    /// Inference with a fixed input scale instead of the input's RMS.
    pub fn forward_scaled(&self, wave: &[f64], scale: f64) -> Result<ForwardOutput> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Precondition(format!("scale must be positive, got {scale}")));
        }
        let mut ctx = Ctx::new(&self.store, self.mode, false);
        let out = self.waveform_forward(&mut ctx, wave, scale)?;
        let rescale = |v: Var| -> Vec<f64> { ctx.tape.value(v).data().iter().map(|x| x * scale).collect() };
        Ok(ForwardOutput {
            wave: rescale(out.wave),
            spec: out.input.with_values(rescale(out.re), rescale(out.im)),
        })
    }

    /// RMS-normalized inference; output has the input's length and level.
    pub fn forward(&self, wave: &[f64]) -> Result<ForwardOutput> {
        if wave.len() < self.config.fft {
            return Err(Error::Precondition(format!(
                "input of {} samples is shorter than one {}-sample frame",
                wave.len(),
                self.config.fft
            )));
        }
        self.forward_scaled(wave, rms_scale(wave))
    }

    /// Enhanced spectrogram of a spectrogram input.
    pub fn enhance_spectrogram(&self, spec: &Spectrogram) -> Result<Spectrogram> {
        let mut ctx = Ctx::new(&self.store, self.mode, false);
        let (re, im) = self.spectral_forward(&mut ctx, spec)?;
        Ok(spec.with_values(
            ctx.tape.value(re).data().to_vec(),
            ctx.tape.value(im).data().to_vec(),
        ))
    }

    /// Zeroes every residual-branch output projection and sets the heads to
    /// a unit complex mask and identity deep-filter taps, so the network
    /// passes its input spectrum through unchanged.
    pub fn set_identity_bypass(&mut self) -> Result<()> {
        if self.config.mask != MaskKind::Complex {
            return Err(Error::Precondition(
                "identity bypass needs a complex mask; a sigmoid gain cannot reach 1".into(),
            ));
        }
        let store = &mut self.store;
        for b in &self.blocks {
            if let Some(t1) = &b.t1 {
                t1.zero_residual(store);
            }
            b.t2.zero_residual(store);
            if let Some(fb) = &b.t3 {
                fb.layer.zero_residual(store);
                fb.post.zero(store);
            }
        }
        let d = self.config.decoder_channels();
        for lin in &self.decompress {
            lin.zero(store);
            let bias = store.get_mut(lin.bias).data_mut();
            for j in 0..bias.len() / d {
                bias[j * d] = 1.0;
            }
        }
        if let Some(df) = &self.df {
            identity_taps(store, &df.taps, self.config.df_taps);
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        write_checkpoint(file, &self.store.to_checkpoint())
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let entries = read_checkpoint(BufReader::new(File::open(path)?))?;
        self.store.load_checkpoint(entries)
    }

    /// Builds the network for `config` and restores weights from `path`.
    pub fn from_checkpoint(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        model.load_checkpoint(path)?;
        Ok(model)
    }
}
