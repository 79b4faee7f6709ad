use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Frames × height × width × channels, row-major, `f32`.
#[derive(Clone, PartialEq)]
pub struct VideoTensor {
    dims: [usize; 4],
    data: Vec<f32>,
}

impl std::fmt::Debug for VideoTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VideoTensor{:?}", self.dims)
    }
}

impl VideoTensor {
    pub fn from_data(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let dims = [frames, height, width, channels];
        if dims.contains(&0) {
            return Err(Error::Shape(format!("video dims must be positive, got {dims:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("video dims {dims:?} need {} values, got {}", dims.iter().product::<usize>(), data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn full(frames: usize, height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::from_data(frames, height, width, channels, vec![value; frames * height * width * channels])
    }

    pub fn zeros_like(&self) -> Self {
        Self { dims: self.dims, data: vec![0.0; self.data.len()] }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn offset(&self, f: usize, y: usize, x: usize, c: usize) -> usize {
        ((f * self.dims[1] + y) * self.dims[2] + x) * self.dims[3] + c
    }

    pub fn get(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(f, y, x, c)]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, c: usize, v: f32) {
        let o = self.offset(f, y, x, c);
        self.data[o] = v;
    }

    /// Pixel slice (all channels) at `(f, y, x)`.
    pub fn pixel(&self, f: usize, y: usize, x: usize) -> &[f32] {
        let o = self.offset(f, y, x, 0);
        &self.data[o..o + self.dims[3]]
    }

    /// Frame `f` as its own single-frame video.
    pub fn frame(&self, f: usize) -> VideoTensor {
        let n = self.dims[1] * self.dims[2] * self.dims[3];
        Self { dims: [1, self.dims[1], self.dims[2], self.dims[3]], data: self.data[f * n..(f + 1) * n].to_vec() }
    }

    /// Copy channel 0 into `channels` channels (depth at the model boundary).
    pub fn replicate_channels(&self, channels: usize) -> VideoTensor {
        let pixels = self.data.len() / self.dims[3];
        let mut data = Vec::with_capacity(pixels * channels);
        for p in 0..pixels {
            let v = self.data[p * self.dims[3]];
            data.extend(std::iter::repeat_n(v, channels));
        }
        Self { dims: [self.dims[0], self.dims[1], self.dims[2], channels], data }
    }

    /// Channel mean, collapsing to a single channel.
    pub fn mean_channels(&self) -> VideoTensor {
        let c = self.dims[3];
        let data = self.data.chunks(c).map(|px| px.iter().sum::<f32>() / c as f32).collect();
        Self { dims: [self.dims[0], self.dims[1], self.dims[2], 1], data }
    }

    pub fn clamp_unit(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && v.abs() <= 1.0 + 1e-6)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&self.dims, self.data.clone()).expect("dims match data")
    }

    pub fn from_tensor(t: Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [f, h, w, c] => Self::from_data(f, h, w, c, t.into_data()),
            ref s => Err(Error::Shape(format!("expected rank-4 video tensor, got {s:?}"))),
        }
    }

    /// Batch `[N, F, H, W, C]` of equally shaped videos.
    pub fn stack(videos: &[VideoTensor]) -> Result<Tensor<f32>> {
        let first = videos.first().ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
        let mut data = Vec::with_capacity(first.data.len() * videos.len());
        for (i, v) in videos.iter().enumerate() {
            if v.dims != first.dims {
                return Err(Error::Shape(format!("batch item {i} is {:?}, item 0 is {:?}", v.dims, first.dims)));
            }
            data.extend_from_slice(&v.data);
        }
        let [f, h, w, c] = first.dims;
        Tensor::from_vec(&[videos.len(), f, h, w, c], data)
    }

    /// Inverse of [`VideoTensor::stack`].
    pub fn unstack(batch: &Tensor<f32>) -> Result<Vec<VideoTensor>> {
        let &[n, f, h, w, c] = batch.shape() else {
            return Err(Error::Shape(format!("expected rank-5 batch, got {:?}", batch.shape())));
        };
        let len = f * h * w * c;
        (0..n).map(|i| Self::from_data(f, h, w, c, batch.data()[i * len..(i + 1) * len].to_vec())).collect()
    }
}

/// `[0, 255] → [-1, 1]`.
pub fn byte_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`] on the 8-bit lattice; clamps out-of-range input.
pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}
