use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense `batch × channels × length` activations.
///
/// Storage is channel-major (`[channel][batch][length]`) so that a channel's
/// values across the whole batch are contiguous; convolutions, batch norm and
/// per-channel spectra all read it that way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    batch: usize,
    channels: usize,
    length: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, channels: usize, length: usize) -> Self {
        Self {
            batch,
            channels,
            length,
            data: vec![0.0; batch * channels * length],
        }
    }

    /// Builds from raw channel-major storage.
    pub fn from_channel_major(
        batch: usize,
        channels: usize,
        length: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != batch * channels * length {
            return Err(Error::invalid(format!(
                "{} values cannot fill a {batch}x{channels}x{length} tensor",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            channels,
            length,
            data,
        })
    }

    /// Builds from per-instance `[channel][length]` series.
    pub fn from_instances(instances: &[Vec<Vec<f64>>]) -> Result<Self> {
        let batch = instances.len();
        let channels = instances.first().map_or(0, |i| i.len());
        let length = instances
            .first()
            .and_then(|i| i.first())
            .map_or(0, |c| c.len());
        let mut t = Self::zeros(batch, channels, length);
        for (n, inst) in instances.iter().enumerate() {
            if inst.len() != channels {
                return Err(Error::invalid("instances differ in channel count"));
            }
            for (c, series) in inst.iter().enumerate() {
                if series.len() != length {
                    return Err(Error::invalid("instances differ in length"));
                }
                t.series_mut(n, c).copy_from_slice(series);
            }
        }
        Ok(t)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, n: usize, c: usize) -> usize {
        (c * self.batch + n) * self.length
    }

    pub fn get(&self, n: usize, c: usize, t: usize) -> f64 {
        self.data[self.offset(n, c) + t]
    }

    pub fn set(&mut self, n: usize, c: usize, t: usize, v: f64) {
        let o = self.offset(n, c);
        self.data[o + t] = v;
    }

    /// The time series of channel `c` of instance `n`.
    pub fn series(&self, n: usize, c: usize) -> &[f64] {
        let o = self.offset(n, c);
        &self.data[o..o + self.length]
    }

    pub fn series_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let o = self.offset(n, c);
        let len = self.length;
        &mut self.data[o..o + len]
    }

    /// All batch values of channel `c`, contiguous.
    pub fn channel(&self, c: usize) -> &[f64] {
        let w = self.batch * self.length;
        &self.data[c * w..(c + 1) * w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let w = self.batch * self.length;
        &mut self.data[c * w..(c + 1) * w]
    }

    /// Copies out the listed instances in order.
    pub fn select(&self, indices: &[usize]) -> Tensor3 {
        let mut out = Tensor3::zeros(indices.len(), self.channels, self.length);
        for (dst, &src) in indices.iter().enumerate() {
            for c in 0..self.channels {
                out.series_mut(dst, c).copy_from_slice(self.series(src, c));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn relu_in_place(&mut self) {
        for x in &mut self.data {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
}

/// A captured unit output (`O_l`), tagged with the unit it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub unit_index: usize,
    pub data: Tensor3,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_round_trip() {
        let inst = vec![
            vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]],
            vec![vec![7.0, 8.0, 9.0], vec![10.0, 11.0, 12.0]],
        ];
        let t = Tensor3::from_instances(&inst).unwrap();
        assert_eq!(t.get(1, 0, 2), 9.0);
        assert_eq!(t.channel(1), &[4.0, 5.0, 6.0, 10.0, 11.0, 12.0]);
        let s = t.select(&[1]);
        assert_eq!(s.series(0, 1), &[10.0, 11.0, 12.0]);
    }
}
