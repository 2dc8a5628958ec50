//! Packed image datasets (`MAEDS1`), per-channel statistics, augmentation and
//! deterministic batching.
//!
//! Packed layout (little-endian):
//!
//! ```text
//! "MAEDS1"
//! u32 count, u32 height, u32 width, u32 channels, u32 n_classes
//! count × { u32 label, height·width·channels bytes (row-major, interleaved) }
//! ```

mod augment;
pub mod synth;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

pub use augment::{
    augment, center_crop, crop, flip_columns, hflip, random_resized_crop, resize_bilinear, resize_shorter, standardize,
    to_unit, unstandardize, AugmentMode, AugmentSpec,
};

pub const DATASET_MAGIC: &[u8; 6] = b"MAEDS1";
pub const HEADER_LEN: usize = 6 + 5 * 4;

/// Labelled 8-bit images sharing one size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
    labels: Vec<u32>,
    pixels: Vec<u8>,
}

impl PackedDataset {
    pub fn new(height: usize, width: usize, channels: usize, n_classes: usize) -> Self {
        Self {
            height,
            width,
            channels,
            n_classes,
            labels: Vec::new(),
            pixels: Vec::new(),
        }
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, label: u32, pixels: &[u8]) -> Result<()> {
        if pixels.len() != self.sample_len() {
            return Err(Error::Data(format!(
                "sample has {} bytes, expected {}x{}x{}",
                pixels.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if label as usize >= self.n_classes {
            return Err(Error::Data(format!("label {label} outside {} classes", self.n_classes)));
        }
        self.labels.push(label);
        self.pixels.extend_from_slice(pixels);
        Ok(())
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Subset with the given sample indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::new(self.height, self.width, self.channels, self.n_classes);
        for &i in idx {
            out.labels.push(self.labels[i]);
            out.pixels.extend_from_slice(self.pixels(i));
        }
        out
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        for v in [self.len(), self.height, self.width, self.channels, self.n_classes] {
            let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit the u32 header")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        let n = self.sample_len();
        for (i, &label) in self.labels.iter().enumerate() {
            w.write_all(&label.to_le_bytes())?;
            w.write_all(&self.pixels[i * n..(i + 1) * n])?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self> {
        let mut r = Reader { inner: r, offset: 0 };
        let mut magic = [0u8; 6];
        r.fill(&mut magic, "magic")?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad dataset magic".into(),
            });
        }
        let count = r.u32("count")? as usize;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        let channels = r.u32("channels")? as usize;
        let n_classes = r.u32("n_classes")? as usize;
        let mut ds = Self::new(height, width, channels, n_classes);
        let n = ds.sample_len();
        ds.labels.reserve(count.min(1 << 20));
        ds.pixels.reserve((count * n).min(1 << 28));
        let mut buf = vec![0u8; n];
        for i in 0..count {
            let at = r.offset;
            let label = r.u32("label")?;
            if label as usize >= n_classes {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("record {i}: label {label} outside {n_classes} classes"),
                });
            }
            r.fill(&mut buf, "pixels")?;
            ds.labels.push(label);
            ds.pixels.extend_from_slice(&buf);
        }
        let mut extra = [0u8; 1];
        if r.inner.read(&mut extra)? != 0 {
            return Err(Error::Format {
                offset: r.offset,
                msg: "trailing bytes after the last record".into(),
            });
        }
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        // read in pieces so that a truncation reports how far the data went
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        offset: self.offset + done as u64,
                        msg: format!("truncated while reading {what}"),
                    })
                }
                Ok(k) => done += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Per-channel mean and standard deviation of pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Mean 0, std 1 for every channel.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn compute(ds: &PackedDataset) -> Self {
        let c = ds.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in ds.pixels.iter().enumerate() {
            let x = v as f64 / 255.0;
            sum[i % c] += x;
            sq[i % c] += x * x;
        }
        let count = (ds.pixels.len() / c.max(1)).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count - m * m).max(0.0);
                // a constant channel standardizes to zero rather than NaN
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    /// Sidecar text: all means, then all stds, one decimal value per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in self.mean.iter().chain(&self.std) {
            s.push_str(&format!("{v}\n"));
        }
        s
    }

    pub fn parse(text: &str, channels: usize) -> Result<Self> {
        let values = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.parse::<f64>()
                    .map_err(|_| Error::Data(format!("stats line {}: `{l}` is not a number", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != 2 * channels {
            return Err(Error::Data(format!(
                "stats file holds {} values, expected {}",
                values.len(),
                2 * channels
            )));
        }
        let (mean, std) = values.split_at(channels);
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Data("stats standard deviations must be positive".into()));
        }
        Ok(Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, channels: usize) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, channels)
    }
}

/// `<name>.stats` next to a packed dataset.
pub fn stats_path(dataset: impl AsRef<Path>) -> PathBuf {
    dataset.as_ref().with_extension("stats")
}

/// Dataset plus the statistics from its sidecar, or freshly computed ones
/// when the sidecar is missing.
pub fn load_with_stats(path: impl AsRef<Path>) -> Result<(PackedDataset, ChannelStats)> {
    let ds = PackedDataset::load(&path)?;
    let sidecar = stats_path(&path);
    let stats = if sidecar.exists() {
        ChannelStats::load(sidecar, ds.channels)?
    } else {
        ChannelStats::compute(&ds)
    };
    Ok((ds, stats))
}

/// Epoch permutation of `0..n`, a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::keyed(seed, Domain::Shuffle, &[epoch]));
    order
}

/// Sample indices of each batch of an epoch; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    epoch_order(n, seed, epoch).chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// A batch of augmented, standardized images `[b, out, out, C]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
}

/// Builds the batch for `indices`; augmentation randomness for sample `i` is
/// keyed by `(seed, epoch, i)`.
pub fn make_batch(
    ds: &PackedDataset,
    indices: &[usize],
    spec: &AugmentSpec,
    stats: &ChannelStats,
    seed: u64,
    epoch: u64,
) -> Result<Batch> {
    let out = spec.out_size;
    let per = out * out * ds.channels;
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        let mut r = rng::keyed(seed, Domain::Augment, &[epoch, i as u64]);
        let img = augment(ds.pixels(i), [ds.height, ds.width, ds.channels], spec, stats, &mut r)?;
        data.extend_from_slice(img.data());
    }
    Ok(Batch {
        indices: indices.to_vec(),
        images: Tensor::new(vec![indices.len(), out, out, ds.channels], data)?,
        labels: indices.iter().map(|&i| ds.label(i)).collect(),
    })
}

/// Iterator over the augmented batches of one epoch.
pub fn batches<'a>(
    ds: &'a PackedDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    spec: &'a AugmentSpec,
    stats: &'a ChannelStats,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    batch_indices(ds.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |idx| make_batch(ds, &idx, spec, stats, seed, epoch))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_text_round_trip() {
        let s = ChannelStats {
            mean: vec![0.5, 0.25, 0.125],
            std: vec![0.2, 0.3, 0.1],
        };
        assert_eq!(ChannelStats::parse(&s.to_text(), 3).unwrap(), s);
        assert!(ChannelStats::parse("1\n2\n", 3).is_err());
        assert_eq!(stats_path("a/corpus.maeds"), PathBuf::from("a/corpus.stats"));
    }
}
