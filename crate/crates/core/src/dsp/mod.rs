//! STFT analysis/synthesis, Mel band partitioning and WAV I/O.

mod mel;
mod stft;
mod wav;

pub use mel::{hz_to_mel, mel_partition, mel_to_hz, BandPartition};
pub use stft::{hann, istft, stft, Spectrogram, StftPlan};
pub use wav::{decode_wav, encode_wav, wav_read, wav_write};
