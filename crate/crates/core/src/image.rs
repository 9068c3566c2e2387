//! Dense image and label-map containers. Node `p` of a grid graph is pixel
//! `(p / width, p % width)`.

use serde::{Deserialize, Serialize};

/// Row-major `height x width x channels` image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    /// Channel-major copy (`channels x height x width`).
    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.num_pixels();
        let mut out = vec![0.0; n * self.channels];
        for p in 0..n {
            for c in 0..self.channels {
                out[c * n + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = y * self.width + x;
                let dst = y * self.width + (self.width - 1 - x);
                out.pixel_mut(dst).copy_from_slice(self.pixel(src));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Self {
        assert_eq!(labels.len(), height * width);
        LabelMap { height, width, labels }
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.labels[y * self.width + (self.width - 1 - x)] = self.labels[y * self.width + x];
            }
        }
        out
    }

    /// `h x w` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> LabelMap {
        let labels = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.labels[(top + y) * self.width + left + x])
            .collect();
        LabelMap { height: h, width: w, labels }
    }
}

impl Image {
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        let mut out = Image::zeros(h, w, self.channels);
        for y in 0..h {
            for x in 0..w {
                out.pixel_mut(y * w + x)
                    .copy_from_slice(self.pixel((top + y) * self.width + left + x));
            }
        }
        out
    }
}
