use crate::{Error, Result};

/// Contiguous split of `F` frequency bins into `K` bands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandPartition {
    boundaries: Vec<usize>,
}

impl BandPartition {
    pub fn from_boundaries(boundaries: Vec<usize>) -> Result<Self> {
        let ok = boundaries.len() >= 2
            && boundaries[0] == 0
            && boundaries.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::Precondition(format!(
                "band boundaries {boundaries:?} must start at 0 and strictly increase"
            )));
        }
        Ok(Self { boundaries })
    }

    pub fn bands(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn bins(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn range(&self, band: usize) -> std::ops::Range<usize> {
        self.boundaries[band]..self.boundaries[band + 1]
    }

    pub fn widths(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Splits `bins` STFT bins into `bands` Mel-spaced contiguous bands.
///
/// Edges are spaced uniformly on the Mel axis between 0 Hz and Nyquist and
/// rounded to the nearest bin. Edges that collide are pushed forward one bin
/// at a time so every band keeps at least one bin. Rounding can leave a
/// band wider than its upper neighbor, so the resulting widths are sorted
/// ascending; band count and total coverage are unchanged.
pub fn mel_partition(bins: usize, bands: usize, sample_rate: u32) -> Result<BandPartition> {
    if bands == 0 || bands > bins {
        return Err(Error::Precondition(format!(
            "cannot split {bins} bins into {bands} bands"
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let mut edges = vec![0usize];
    for i in 1..bands {
        let hz = mel_to_hz(top * i as f64 / bands as f64);
        let snapped = (bins as f64 * hz / nyquist).round() as usize;
        let lo = edges[i - 1] + 1;
        let hi = bins - (bands - i);
        edges.push(snapped.clamp(lo, hi));
    }
    edges.push(bins);
    let mut widths: Vec<usize> = edges.windows(2).map(|w| w[1] - w[0]).collect();
    widths.sort_unstable();
    let mut boundaries = Vec::with_capacity(bands + 1);
    boundaries.push(0);
    for w in widths {
        boundaries.push(boundaries.last().unwrap() + w);
    }
    BandPartition::from_boundaries(boundaries)
}
