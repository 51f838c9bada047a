use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::tensor::RnnKind;
use crate::{Error, Result};

/// Which of the three block transformers are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Band-axis and per-band time-axis transformers.
    OneTwo,
    /// Per-band and full-band time-axis transformers.
    TwoThree,
    /// All three.
    OneTwoThree,
}

impl Variant {
    pub fn has_t1(self) -> bool {
        matches!(self, Variant::OneTwo | Variant::OneTwoThree)
    }

    pub fn has_t3(self) -> bool {
        matches!(self, Variant::TwoThree | Variant::OneTwoThree)
    }

    pub fn transformer_count(self) -> usize {
        match self {
            Variant::OneTwoThree => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::OneTwo => "1+2",
            Variant::TwoThree => "2+3",
            Variant::OneTwoThree => "1+2+3",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1+2" => Ok(Variant::OneTwo),
            "2+3" => Ok(Variant::TwoThree),
            "1+2+3" => Ok(Variant::OneTwoThree),
            _ => Err(Error::Config(format!("variant: expected 1+2, 2+3 or 1+2+3, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputKind {
    /// Log power spectrum, one channel.
    Lps,
    /// Real and imaginary parts, two channels.
    Complex,
}

impl InputKind {
    pub fn channels(self) -> usize {
        match self {
            InputKind::Lps => 1,
            InputKind::Complex => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Sigmoid gain applied to magnitude.
    Real,
    /// Unbounded complex multiplier.
    Complex,
}

impl MaskKind {
    pub fn channels(self) -> usize {
        match self {
            MaskKind::Real => 1,
            MaskKind::Complex => 2,
        }
    }
}

/// Channels per bin that feed the deep-filter head.
pub const DF_CHANNELS: usize = 2;

/// Complete hyperparameter record of a network.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub fft: usize,
    pub hop: usize,
    /// Mel band count `K`.
    pub bands: usize,
    /// MPT block count `B`.
    pub blocks: usize,
    /// Feature size `E`.
    pub dim: usize,
    /// Feed-forward expansion `C`; the RNN hidden size is `C·E`.
    pub expansion: usize,
    pub variant: Variant,
    pub rnn: RnnKind,
    pub causal: bool,
    pub input: InputKind,
    pub mask: MaskKind,
    pub deep_filter: bool,
    pub df_taps: usize,
    pub df_groups: usize,
    pub df_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            fft: 320,
            hop: 160,
            bands: 30,
            blocks: 2,
            dim: 28,
            expansion: 1,
            variant: Variant::TwoThree,
            rnn: RnnKind::Gru,
            causal: true,
            input: InputKind::Lps,
            mask: MaskKind::Real,
            deep_filter: true,
            df_taps: 5,
            df_groups: 2,
            df_hidden: 48,
        }
    }
}

const KEYS: [&str; 16] = [
    "sample_rate",
    "fft",
    "hop",
    "K",
    "B",
    "E",
    "C",
    "variant",
    "rnn",
    "causal",
    "input",
    "mask",
    "deep_filter",
    "df_taps",
    "df_groups",
    "df_hidden",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl ModelConfig {
    pub fn bins(&self) -> usize {
        self.fft / 2 + 1
    }

    pub fn frames_per_second(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Decompression output channels per bin.
    pub fn decoder_channels(&self) -> usize {
        self.mask.channels() + if self.deep_filter { DF_CHANNELS } else { 0 }
    }

    /// Input width of each deep-filter group RNN.
    pub fn df_group_input(&self) -> usize {
        DF_CHANNELS * self.bins() / self.df_groups
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sample_rate == 0 {
            return fail("sample_rate: must be positive".into());
        }
        if self.fft < 2 || self.fft % 2 != 0 {
            return fail(format!("fft: must be even and at least 2, got {}", self.fft));
        }
        if self.hop == 0 || self.hop > self.fft {
            return fail(format!("hop: must be in 1..={}, got {}", self.fft, self.hop));
        }
        if self.bands == 0 || self.bands > self.bins() {
            return fail(format!("K: must be in 1..={}, got {}", self.bins(), self.bands));
        }
        for (key, v) in [("B", self.blocks), ("E", self.dim), ("C", self.expansion)] {
            if v == 0 {
                return fail(format!("{key}: must be positive"));
            }
        }
        match (self.input, self.mask) {
            (InputKind::Lps, MaskKind::Real) | (InputKind::Complex, MaskKind::Complex) => {}
            (i, m) => {
                return fail(format!(
                    "input/mask: {} input requires a {} mask, got {}",
                    input_name(i),
                    mask_name(mask_for(i)),
                    mask_name(m)
                ))
            }
        }
        if self.variant == Variant::TwoThree && self.expansion != 1 {
            return fail(format!("variant: 2+3 requires C = 1, got C = {}", self.expansion));
        }
        if self.deep_filter {
            if self.df_taps == 0 {
                return fail("df_taps: must be positive".into());
            }
            if self.df_hidden == 0 {
                return fail("df_hidden: must be positive".into());
            }
            if self.df_groups == 0 || (DF_CHANNELS * self.bins()) % self.df_groups != 0 {
                return fail(format!(
                    "df_groups: must divide {} deep-filter inputs, got {}",
                    DF_CHANNELS * self.bins(),
                    self.df_groups
                ));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored,
    /// absent keys keep their defaults, unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", n + 1)));
            }
            match key {
                "sample_rate" => cfg.sample_rate = parse_num(key, value)?,
                "fft" => cfg.fft = parse_num(key, value)?,
                "hop" => cfg.hop = parse_num(key, value)?,
                "K" => cfg.bands = parse_num(key, value)?,
                "B" => cfg.blocks = parse_num(key, value)?,
                "E" => cfg.dim = parse_num(key, value)?,
                "C" => cfg.expansion = parse_num(key, value)?,
                "variant" => cfg.variant = value.parse()?,
                "rnn" => {
                    cfg.rnn = match value {
                        "gru" => RnnKind::Gru,
                        "lstm" => RnnKind::Lstm,
                        _ => return Err(Error::Config(format!("rnn: expected gru or lstm, got {value:?}"))),
                    }
                }
                "causal" => cfg.causal = parse_bool(key, value)?,
                "input" => {
                    cfg.input = match value {
                        "lps" => InputKind::Lps,
                        "complex" => InputKind::Complex,
                        _ => return Err(Error::Config(format!("input: expected lps or complex, got {value:?}"))),
                    }
                }
                "mask" => {
                    cfg.mask = match value {
                        "real" => MaskKind::Real,
                        "complex" => MaskKind::Complex,
                        _ => return Err(Error::Config(format!("mask: expected real or complex, got {value:?}"))),
                    }
                }
                "deep_filter" => cfg.deep_filter = parse_bool(key, value)?,
                "df_taps" => cfg.df_taps = parse_num(key, value)?,
                "df_groups" => cfg.df_groups = parse_num(key, value)?,
                "df_hidden" => cfg.df_hidden = parse_num(key, value)?,
                _ => unreachable!(),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn input_name(i: InputKind) -> &'static str {
    match i {
        InputKind::Lps => "lps",
        InputKind::Complex => "complex",
    }
}

fn mask_name(m: MaskKind) -> &'static str {
    match m {
        MaskKind::Real => "real",
        MaskKind::Complex => "complex",
    }
}

fn mask_for(i: InputKind) -> MaskKind {
    match i {
        InputKind::Lps => MaskKind::Real,
        InputKind::Complex => MaskKind::Complex,
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rnn = match self.rnn {
            RnnKind::Gru => "gru",
            RnnKind::Lstm => "lstm",
        };
        writeln!(f, "sample_rate = {}", self.sample_rate)?;
        writeln!(f, "fft = {}", self.fft)?;
        writeln!(f, "hop = {}", self.hop)?;
        writeln!(f, "K = {}", self.bands)?;
        writeln!(f, "B = {}", self.blocks)?;
        writeln!(f, "E = {}", self.dim)?;
        writeln!(f, "C = {}", self.expansion)?;
        writeln!(f, "variant = {}", self.variant)?;
        writeln!(f, "rnn = {rnn}")?;
        writeln!(f, "causal = {}", self.causal)?;
        writeln!(f, "input = {}", input_name(self.input))?;
        writeln!(f, "mask = {}", mask_name(self.mask))?;
        writeln!(f, "deep_filter = {}", self.deep_filter)?;
        writeln!(f, "df_taps = {}", self.df_taps)?;
        writeln!(f, "df_groups = {}", self.df_groups)?;
        writeln!(f, "df_hidden = {}", self.df_hidden)
    }
}
