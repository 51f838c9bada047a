//! Closed-form cost model and budget planner.

use std::fmt;

use crate::layers::{head_count, ConvBlock, Direction, Linear, Rnn, TransformerLayer};
use crate::model::{InputKind, MaskKind, ModelConfig, Variant};
use crate::tensor::RnnKind;
use crate::{Error, Result};

/// Default relative tolerance of a [`Budget`].
pub const DEFAULT_TOLERANCE: f64 = 0.15;

/// Budgets at or above this use the complex-input, three-transformer family.
pub const COMPLEX_THRESHOLD: f64 = 250e6;

/// Budgets at or above this switch the feed-forward RNN to LSTM.
pub const LSTM_THRESHOLD: f64 = 1.5e9;

/// Deep-filter hidden sizes tried by the planner, largest first.
pub const DF_HIDDEN_CHOICES: [usize; 5] = [48, 32, 16, 8, 4];

/// Largest share of the budget the deep-filter head may take.
pub const DF_BUDGET_SHARE: f64 = 0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct CostEntry {
    pub component: String,
    pub macs_per_s: f64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub frames_per_s: f64,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn total_macs_per_s(&self) -> f64 {
        self.entries.iter().map(|e| e.macs_per_s).sum()
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn entry(&self, component: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.component == component)
    }

    /// `component,macs_per_s,params` rows with a trailing total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,macs_per_s,params\n");
        for e in &self.entries {
            out += &format!("{},{},{}\n", e.component, e.macs_per_s, e.params);
        }
        out += &format!("total,{},{}\n", self.total_macs_per_s(), self.total_params());
        out
    }
}

fn human(v: f64) -> String {
    match v {
        v if v >= 1e9 => format!("{:.2}G", v / 1e9),
        v if v >= 1e6 => format!("{:.2}M", v / 1e6),
        v if v >= 1e3 => format!("{:.2}K", v / 1e3),
        v => format!("{v:.0}"),
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>12} {:>12}", "component", "MACs/s", "params")?;
        for e in &self.entries {
            writeln!(f, "{:<16} {:>12} {:>12}", e.component, human(e.macs_per_s), e.params)?;
        }
        write!(
            f,
            "{:<16} {:>12} {:>12}",
            "total",
            human(self.total_macs_per_s()),
            self.total_params()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub target_macs_per_s: f64,
    pub tolerance: f64,
}

impl Budget {
    pub fn new(target_macs_per_s: f64) -> Result<Self> {
        Self::with_tolerance(target_macs_per_s, DEFAULT_TOLERANCE)
    }

    pub fn with_tolerance(target_macs_per_s: f64, tolerance: f64) -> Result<Self> {
        if !(target_macs_per_s.is_finite() && target_macs_per_s > 0.0) {
            return Err(Error::Config(format!(
                "budget: target must be positive, got {target_macs_per_s}"
            )));
        }
        if !(tolerance.is_finite() && tolerance > 0.0) {
            return Err(Error::Config(format!("budget: tolerance must be positive, got {tolerance}")));
        }
        Ok(Self {
            target_macs_per_s,
            tolerance,
        })
    }
}

/// MACs of one RNN step.
pub fn rnn_step_macs(kind: RnnKind, direction: Direction, input: usize, hidden: usize) -> usize {
    let pass = kind.gates() * hidden * (input + hidden);
    match direction {
        Direction::Uni => pass,
        Direction::Bi => 2 * pass + 2 * hidden * hidden,
    }
}

/// MACs of one transformer token: projections, attention, feed-forward.
pub fn transformer_token_macs(dim: usize, expansion: usize, kind: RnnKind, direction: Direction) -> usize {
    let hidden = expansion * dim;
    let d_head = dim / head_count(dim);
    4 * dim * dim + 2 * dim * d_head + 2 * dim + rnn_step_macs(kind, direction, dim, hidden) + hidden * dim
}

/// Per-frame MACs and parameter count of the deep-filter head.
pub fn df_head_cost(config: &ModelConfig) -> (usize, usize) {
    if !config.deep_filter {
        return (0, 0);
    }
    let (g, h) = (config.df_groups, config.df_hidden);
    let i = config.df_group_input();
    let out = config.bins() * 2 * config.df_taps;
    let macs = g * rnn_step_macs(RnnKind::Gru, Direction::Uni, i, h) + g * h * out;
    let params = g * Rnn::param_count(RnnKind::Gru, Direction::Uni, i, h) + Linear::param_count(g * h, out);
    (macs, params)
}

fn cost_report(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let c = config;
    let fps = c.frames_per_second();
    let (k, e, f) = (c.bands, c.dim, c.bins());
    let time_dir = if c.causal { Direction::Uni } else { Direction::Bi };
    let mut entries = Vec::new();
    let mut push = |name: String, frame_macs: usize, params: usize| {
        entries.push(CostEntry {
            component: name,
            macs_per_s: frame_macs as f64 * fps,
            params,
        })
    };
    let ch = c.input.channels();
    push("compression".into(), ch * f * e, ch * f * e + k * e);
    push("conv".into(), k * (9 * e + e * e), ConvBlock::param_count(e));
    for b in 0..c.blocks {
        if c.variant.has_t1() {
            push(
                format!("block{b}.t1"),
                k * transformer_token_macs(e, c.expansion, c.rnn, Direction::Bi),
                TransformerLayer::param_count(e, c.expansion, c.rnn, Direction::Bi),
            );
        }
        push(
            format!("block{b}.t2"),
            k * transformer_token_macs(e, c.expansion, c.rnn, time_dir),
            TransformerLayer::param_count(e, c.expansion, c.rnn, time_dir),
        );
        if c.variant.has_t3() {
            push(
                format!("block{b}.t3"),
                transformer_token_macs(e, c.expansion, c.rnn, time_dir) + 2 * k * e * e,
                TransformerLayer::param_count(e, c.expansion, c.rnn, time_dir)
                    + Linear::param_count(k * e, e)
                    + Linear::param_count(e, k * e),
            );
        }
    }
    let d = c.decoder_channels();
    push("decompression".into(), e * d * f, e * d * f + d * f);
    push("mask_head".into(), 0, 0);
    let (df_macs, df_params) = df_head_cost(c);
    push("df_head".into(), df_macs, df_params);
    Ok(CostReport {
        frames_per_s: fps,
        entries,
    })
}

/// Multiply-accumulates per second of audio, itemized per submodule.
pub fn count_macs(config: &ModelConfig) -> Result<CostReport> {
    cost_report(config)
}

/// Trainable parameters, itemized per submodule; equals the built model's census.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    cost_report(config)
}

fn planner_family(target: f64) -> (InputKind, MaskKind, Variant, usize, RnnKind) {
    let rnn = if target < LSTM_THRESHOLD { RnnKind::Gru } else { RnnKind::Lstm };
    if target < COMPLEX_THRESHOLD {
        (InputKind::Lps, MaskKind::Real, Variant::TwoThree, 1, rnn)
    } else {
        (InputKind::Complex, MaskKind::Complex, Variant::OneTwoThree, 2, rnn)
    }
}

/// Configuration whose MACs/s is closest to the budget in log ratio.
pub fn plan(budget: &Budget) -> Result<ModelConfig> {
    let target = budget.target_macs_per_s;
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::Config(format!("budget: target must be positive, got {target}")));
    }
    let (input, mask, variant, expansion, rnn) = planner_family(target);
    let base = ModelConfig {
        input,
        mask,
        variant,
        expansion,
        rnn,
        causal: true,
        ..ModelConfig::default()
    };
    let df_hidden = DF_HIDDEN_CHOICES
        .iter()
        .copied()
        .find(|&h| {
            let cfg = ModelConfig { df_hidden: h, ..base.clone() };
            df_head_cost(&cfg).0 as f64 * cfg.frames_per_second() <= DF_BUDGET_SHARE * target
        })
        .unwrap_or(DF_HIDDEN_CHOICES[DF_HIDDEN_CHOICES.len() - 1]);

    let mut best: Option<(f64, ModelConfig)> = None;
    for dim in (8..=128).step_by(4) {
        for blocks in 1..=8 {
            for bands in 28..=32 {
                let cfg = ModelConfig {
                    dim,
                    blocks,
                    bands,
                    df_hidden,
                    ..base.clone()
                };
                let macs = count_macs(&cfg)?.total_macs_per_s();
                let score = (macs / target).ln().abs();
                if best.as_ref().map_or(true, |(s, _)| score < *s) {
                    best = Some((score, cfg));
                }
            }
        }
    }
    let (_, cfg) = best.expect("non-empty grid");
    let macs = count_macs(&cfg)?.total_macs_per_s();
    if (macs / target - 1.0).abs() > budget.tolerance {
        return Err(Error::Infeasible(format!(
            "no configuration within {:.0}% of {} MACs/s; closest is {}",
            budget.tolerance * 100.0,
            human(target),
            human(macs)
        )));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gru_step_cost() {
        assert_eq!(rnn_step_macs(RnnKind::Gru, Direction::Uni, 16, 16), 1536);
        assert_eq!(rnn_step_macs(RnnKind::Lstm, Direction::Uni, 16, 16), 2048);
    }

    #[test]
    fn csv_has_total_row() {
        let r = count_macs(&ModelConfig::default()).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("component,macs_per_s,params\n"));
        assert!(csv.lines().last().unwrap().starts_with("total,"));
        assert_eq!(csv.lines().count(), r.entries.len() + 2);
    }

    #[test]
    fn budget_rejects_nonpositive() {
        assert!(Budget::new(0.0).is_err());
        assert!(Budget::new(-1.0).is_err());
        assert!(Budget::with_tolerance(1e6, 0.0).is_err());
    }
}
