use ndarray::Array2;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::dsp;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mel extraction settings. Millisecond and Hz quantities are exact
/// rationals so the hop size can be checked for integrality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub n_mels: usize,
    #[serde(with = "rational_str")]
    pub frame_shift_ms: Ratio<u64>,
    #[serde(with = "rational_str")]
    pub frame_length_ms: Ratio<u64>,
    #[serde(with = "rational_str")]
    pub fmin_hz: Ratio<u64>,
    #[serde(with = "rational_str")]
    pub fmax_hz: Ratio<u64>,
    pub log_floor: OrderedF64,
}

/// `f64` wrapper so configs stay `Eq` (compared bitwise).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderedF64(pub f64);

impl PartialEq for OrderedF64 {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for OrderedF64 {}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 24_000,
            n_mels: 80,
            frame_shift_ms: Ratio::new(25, 2),
            frame_length_ms: Ratio::from_integer(50),
            fmin_hz: Ratio::from_integer(0),
            fmax_hz: Ratio::from_integer(12_000),
            log_floor: OrderedF64(1e-10),
        }
    }
}

impl MelConfig {
    fn samples(&self, ms: Ratio<u64>, what: &str) -> Result<usize> {
        let samples = ms * Ratio::from_integer(self.sample_rate_hz as u64) / Ratio::from_integer(1000);
        if !samples.is_integer() {
            return Err(Error::Config(format!(
                "{what} of {ms} ms is {samples} samples at {} Hz, not an integer",
                self.sample_rate_hz
            )));
        }
        Ok(samples.to_integer() as usize)
    }

    /// Hop in samples; 300 at the defaults.
    pub fn hop_samples(&self) -> Result<usize> {
        self.samples(self.frame_shift_ms, "frame shift")
    }

    /// Analysis window (and FFT size) in samples; 1200 at the defaults.
    pub fn win_samples(&self) -> Result<usize> {
        self.samples(self.frame_length_ms, "frame length")
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1000.0 / ratio_f64(self.frame_shift_ms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if self.frame_shift_ms >= self.frame_length_ms {
            return Err(Error::Config("frame shift must be shorter than frame length".into()));
        }
        if self.fmin_hz >= self.fmax_hz || ratio_f64(self.fmax_hz) > self.sample_rate_hz as f64 / 2.0 {
            return Err(Error::Config("need fmin < fmax <= sample_rate / 2".into()));
        }
        if !(self.log_floor.0 > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        self.hop_samples()?;
        self.win_samples()?;
        Ok(())
    }

    pub fn log_floor_value(&self) -> f64 {
        self.log_floor.0.ln()
    }

    pub fn filterbank<F: Scalar>(&self) -> Result<Array2<F>> {
        Ok(dsp::mel_filterbank(
            self.sample_rate_hz as f64,
            self.win_samples()?,
            self.n_mels,
            ratio_f64(self.fmin_hz),
            ratio_f64(self.fmax_hz),
        ))
    }
}

pub fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Log-mel frames `[T × n_mels]` together with the settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<F> {
    pub frames: Array2<F>,
    pub config: MelConfig,
}

impl<F: Scalar> MelSpectrogram<F> {
    pub fn new(frames: Array2<F>, config: MelConfig) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::InvalidInput("mel spectrogram needs at least one frame".into()));
        }
        if frames.ncols() != config.n_mels {
            return Err(Error::Shape(format!(
                "mel has {} bins, config says {}",
                frames.ncols(),
                config.n_mels
            )));
        }
        Ok(Self { frames, config })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// Natural-log mel energies of a waveform sampled at `cfg.sample_rate_hz`.
///
/// Frames are centre padded, giving `floor(len / hop) + 1` rows.
pub fn compute_mel<F: Scalar>(waveform: &[F], cfg: &MelConfig) -> Result<MelSpectrogram<F>> {
    if waveform.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    cfg.validate()?;
    let hop = cfg.hop_samples()?;
    let n_fft = cfg.win_samples()?;
    let window = dsp::hann_window::<F>(n_fft);
    let spec = dsp::stft(waveform, n_fft, hop, &window);
    let magnitude = spec.mapv(|c| c.norm());
    let fb = cfg.filterbank::<F>()?;
    let floor = F::lit(cfg.log_floor.0);
    let frames = magnitude.dot(&fb.t()).mapv(|v| v.max(floor).ln());
    MelSpectrogram::new(frames, cfg.clone())
}

/// Serialises `Ratio<u64>` as `"12.5"`, `"50"` or `"1/3"`.
pub(crate) mod rational_str {
    use num_rational::Ratio;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn format(r: &Ratio<u64>) -> String {
        let (n, d) = (*r.numer(), *r.denom());
        if d == 1 {
            return n.to_string();
        }
        // Terminating decimal iff the denominator only has factors 2 and 5.
        let mut rest = d;
        let (mut twos, mut fives) = (0u32, 0u32);
        while rest % 2 == 0 {
            rest /= 2;
            twos += 1;
        }
        while rest % 5 == 0 {
            rest /= 5;
            fives += 1;
        }
        if rest != 1 {
            return format!("{n}/{d}");
        }
        let digits = twos.max(fives);
        let scaled = n * 10u64.pow(digits) / d;
        let int = scaled / 10u64.pow(digits);
        let frac = scaled % 10u64.pow(digits);
        format!("{int}.{frac:0width$}", width = digits as usize)
    }

    pub fn parse(s: &str) -> Result<Ratio<u64>, String> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let n: u64 = n.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let d: u64 = d.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            if d == 0 {
                return Err(format!("{s}: zero denominator"));
            }
            return Ok(Ratio::new(n, d));
        }
        if let Some((int, frac)) = s.split_once('.') {
            let digits = frac.len() as u32;
            let int: u64 = if int.is_empty() {
                0
            } else {
                int.parse().map_err(|e| format!("{s}: {e}"))?
            };
            let frac_v: u64 = frac.parse().map_err(|e| format!("{s}: {e}"))?;
            let scale = 10u64.pow(digits);
            return Ok(Ratio::new(int * scale + frac_v, scale));
        }
        s.parse::<u64>()
            .map(Ratio::from_integer)
            .map_err(|e| format!("{s}: {e}"))
    }

    pub fn serialize<S: Serializer>(r: &Ratio<u64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Ratio<u64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(u64),
            Float(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Text(t) => parse(&t).map_err(de::Error::custom),
            Raw::Int(i) => Ok(Ratio::from_integer(i)),
            Raw::Float(f) => parse(&format!("{f}")).map_err(de::Error::custom),
        }
    }
}
