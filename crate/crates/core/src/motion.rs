//! Animation parameter sequences and their `LSFM` file format.

use std::path::Path;

use crate::binio::{read_file, Reader, Writer};
use crate::error::{shape_err, Error, Result};
use crate::features::MOTION_FPS;
use crate::flame::FRAME_DIM;
use crate::numerics::Tensor;
use crate::Scalar;

const MAGIC: &[u8; 4] = b"LSFM";

/// `T × 53` animation frames: 50 expression coefficients then 3 jaw radians.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub fps: u32,
    pub frames: usize,
    pub data: Vec<f32>,
}

impl MotionSequence {
    pub fn new(frames: usize, data: Vec<f32>) -> Result<Self> {
        Self::with_fps(MOTION_FPS, frames, data)
    }

    pub fn with_fps(fps: u32, frames: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * FRAME_DIM {
            return Err(shape_err!(
                "motion of {frames} frames needs {} values, got {}",
                frames * FRAME_DIM,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("motion sequence has non-finite values".into()));
        }
        Ok(Self { fps, frames, data })
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        if t.cols() != FRAME_DIM {
            return Err(shape_err!("motion tensor has {} columns", t.cols()));
        }
        let data = t.data().iter().map(|v| v.to_f64_lossy() as f32).collect();
        Self::new(t.rows(), data)
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::matrix(
            self.frames,
            FRAME_DIM,
            self.data.iter().map(|&v| S::of(v as f64)).collect(),
        )
        .expect("consistent motion block")
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * FRAME_DIM..(t + 1) * FRAME_DIM]
    }

    /// First `frames` frames.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        Self {
            fps: self.fps,
            frames,
            data: self.data[..frames * FRAME_DIM].to_vec(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(MAGIC);
        w.u32(self.fps);
        w.usize(self.frames)?;
        w.usize(FRAME_DIM)?;
        w.f32s(self.data.iter().copied());
        Ok(w.finish())
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MAGIC, "motion file")?;
        let fps = r.u32()?;
        let frames = r.usize()?;
        let dim = r.usize()?;
        if dim != FRAME_DIM {
            return Err(Error::Format(format!("motion file: frame width {dim}, expected {FRAME_DIM}")));
        }
        let data = r.f32s(frames * dim)?;
        r.finish()?;
        Self::with_fps(fps, frames, data).map_err(|e| Error::Format(format!("motion file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}
