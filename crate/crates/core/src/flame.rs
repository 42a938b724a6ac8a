//! Linear blendshape decoder from 53-value animation frames to vertices.
//!
//! A frame holds 50 expression coefficients followed by 3 jaw rotations in
//! radians. Jaw rotation is linearized into three displacement vectors, so
//! the whole decoder is one affine map of `(shape, frame)`. Units are mm.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, Reader, Writer};
use crate::error::{config_err, shape_err, Error, Result};
use crate::{rng_for, Scalar};

pub const N_EXPR: usize = 50;
pub const N_JAW: usize = 3;
pub const FRAME_DIM: usize = N_EXPR + N_JAW;
pub const N_SHAPE: usize = 300;
pub const MIN_VERTICES: usize = 12;

/// Largest displacement component a unit expression coefficient may cause.
pub const MAX_EXPR_MM: f64 = 5.0;

const MAGIC: &[u8; 4] = b"LSFB";

/// Identity coefficients of a neutral face (300 values).
#[derive(Clone, Debug, PartialEq)]
pub struct NeutralShape {
    params: Vec<f32>,
}

impl NeutralShape {
    pub fn new(params: Vec<f32>) -> Result<Self> {
        if params.len() != N_SHAPE {
            return Err(Error::Input(format!(
                "neutral shape needs {N_SHAPE} values, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("neutral shape has non-finite values".into()));
        }
        Ok(Self { params })
    }

    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; N_SHAPE],
        }
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }
}

/// `T × V × 3` vertex positions in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct VertexSequence<S> {
    pub frames: usize,
    pub vertices: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> VertexSequence<S> {
    pub fn new(frames: usize, vertices: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != frames * vertices * 3 {
            return Err(shape_err!(
                "vertex sequence {frames}x{vertices}x3 needs {} values, got {}",
                frames * vertices * 3,
                data.len()
            ));
        }
        Ok(Self {
            frames,
            vertices,
            data,
        })
    }

    #[inline]
    pub fn at(&self, t: usize, v: usize) -> [S; 3] {
        let i = (t * self.vertices + v) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn frame(&self, t: usize) -> &[S] {
        let n = self.vertices * 3;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.vertices == other.vertices
    }
}

/// Named vertex subset used by the region metrics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionMask {
    pub name: String,
    pub vertex_indices: Vec<usize>,
}

impl RegionMask {
    pub fn new(name: impl Into<String>, mut vertex_indices: Vec<usize>) -> Result<Self> {
        vertex_indices.sort_unstable();
        vertex_indices.dedup();
        let mask = Self {
            name: name.into(),
            vertex_indices,
        };
        if mask.vertex_indices.is_empty() {
            return Err(Error::Input(format!("region '{}' is empty", mask.name)));
        }
        Ok(mask)
    }

    pub fn validate(&self, vertices: usize) -> Result<()> {
        if self.vertex_indices.is_empty() {
            return Err(Error::Input(format!("region '{}' is empty", self.name)));
        }
        if self.vertex_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input(format!(
                "region '{}' indices are not sorted and unique",
                self.name
            )));
        }
        if let Some(&v) = self.vertex_indices.iter().find(|&&v| v >= vertices) {
            return Err(Error::Input(format!(
                "region '{}' index {v} out of {vertices} vertices",
                self.name
            )));
        }
        Ok(())
    }

    pub fn is_disjoint(&self, other: &RegionMask) -> bool {
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.vertex_indices, &other.vertex_indices);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Equal => return false,
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        true
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

/// Lip and upper-face regions of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub lip: RegionMask,
    pub upper_face: RegionMask,
}

impl RegionMasks {
    pub fn validate(&self, vertices: usize) -> Result<()> {
        self.lip.validate(vertices)?;
        self.upper_face.validate(vertices)?;
        if !self.lip.is_disjoint(&self.upper_face) {
            return Err(Error::Input("lip and upper-face regions overlap".into()));
        }
        Ok(())
    }

    /// Writes `lip.json` and `upper_face.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.lip.save(&dir.join("lip.json"))?;
        self.upper_face.save(&dir.join("upper_face.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            lip: RegionMask::load(&dir.join("lip.json"))?,
            upper_face: RegionMask::load(&dir.join("upper_face.json"))?,
        })
    }
}

/// Template plus shape, expression and jaw displacement bases.
/// Bases are stored one basis vector per row, each of length `3V`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendshapeModel<S> {
    vertices: usize,
    template: Vec<S>,
    shape_basis: Vec<S>,
    expr_basis: Vec<S>,
    jaw_basis: Vec<S>,
}

impl<S: Scalar> BlendshapeModel<S> {
    pub fn new(
        vertices: usize,
        template: Vec<S>,
        shape_basis: Vec<S>,
        expr_basis: Vec<S>,
        jaw_basis: Vec<S>,
    ) -> Result<Self> {
        let n = vertices * 3;
        if vertices == 0
            || template.len() != n
            || shape_basis.len() != N_SHAPE * n
            || expr_basis.len() != N_EXPR * n
            || jaw_basis.len() != N_JAW * n
        {
            return Err(shape_err!("blendshape blocks inconsistent with V={vertices}"));
        }
        let all = template
            .iter()
            .chain(&shape_basis)
            .chain(&expr_basis)
            .chain(&jaw_basis);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("blendshape model has non-finite entries".into()));
        }
        Ok(Self {
            vertices,
            template,
            shape_basis,
            expr_basis,
            jaw_basis,
        })
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn template(&self) -> &[S] {
        &self.template
    }

    pub fn expr_basis(&self, k: usize) -> &[S] {
        let n = self.vertices * 3;
        &self.expr_basis[k * n..(k + 1) * n]
    }

    pub fn jaw_basis(&self, k: usize) -> &[S] {
        let n = self.vertices * 3;
        &self.jaw_basis[k * n..(k + 1) * n]
    }

    pub fn shape_basis(&self, k: usize) -> &[S] {
        let n = self.vertices * 3;
        &self.shape_basis[k * n..(k + 1) * n]
    }

    pub fn cast<T: Scalar>(&self) -> BlendshapeModel<T> {
        let c = |v: &[S]| v.iter().map(|x| T::of(x.to_f64_lossy())).collect();
        BlendshapeModel {
            vertices: self.vertices,
            template: c(&self.template),
            shape_basis: c(&self.shape_basis),
            expr_basis: c(&self.expr_basis),
            jaw_basis: c(&self.jaw_basis),
        }
    }

    /// Displacement of the neutral shape from the template.
    fn shape_offset(&self, shape: &NeutralShape) -> Vec<S> {
        let n = self.vertices * 3;
        let mut off = vec![S::zero(); n];
        for (k, &c) in shape.params().iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let c = S::of(c as f64);
            for (o, &b) in off.iter_mut().zip(&self.shape_basis[k * n..(k + 1) * n]) {
                *o = *o + c * b;
            }
        }
        off
    }

    fn decode_with_offset(&self, shape_off: &[S], frame: &[f32], out: &mut [S]) {
        let n = self.vertices * 3;
        let mut off = shape_off.to_vec();
        let coeffs = frame[..N_EXPR]
            .iter()
            .enumerate()
            .map(|(k, &c)| (&self.expr_basis[k * n..(k + 1) * n], c))
            .chain(
                frame[N_EXPR..]
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| (&self.jaw_basis[k * n..(k + 1) * n], c)),
            );
        for (basis, c) in coeffs {
            if c == 0.0 {
                continue;
            }
            let c = S::of(c as f64);
            for (o, &b) in off.iter_mut().zip(basis) {
                *o = *o + c * b;
            }
        }
        for ((o, &t), &d) in out.iter_mut().zip(&self.template).zip(&off) {
            *o = t + d;
        }
    }

    /// Vertices (`V × 3`, flattened) of one frame.
    pub fn decode_frame(&self, shape: &NeutralShape, frame: &[f32]) -> Result<Vec<S>> {
        check_frame(frame)?;
        let mut out = vec![S::zero(); self.vertices * 3];
        self.decode_with_offset(&self.shape_offset(shape), frame, &mut out);
        Ok(out)
    }

    /// Frame-wise decode of a `T × 53` row-major motion block.
    pub fn decode_frames(&self, shape: &NeutralShape, frames: &[f32]) -> Result<VertexSequence<S>> {
        if frames.len() % FRAME_DIM != 0 {
            return Err(shape_err!("motion data is not a multiple of {FRAME_DIM}"));
        }
        let t = frames.len() / FRAME_DIM;
        let n = self.vertices * 3;
        let off = self.shape_offset(shape);
        let mut data = vec![S::zero(); t * n];
        for (frame, out) in frames.chunks(FRAME_DIM).zip(data.chunks_mut(n.max(1))) {
            check_frame(frame)?;
            self.decode_with_offset(&off, frame, out);
        }
        VertexSequence::new(t, self.vertices, data)
    }
}

fn check_frame(frame: &[f32]) -> Result<()> {
    if frame.len() != FRAME_DIM {
        return Err(Error::Input(format!(
            "frame needs {FRAME_DIM} values, got {}",
            frame.len()
        )));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("frame has non-finite values".into()));
    }
    Ok(())
}

impl BlendshapeModel<f32> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(MAGIC);
        w.usize(self.vertices)?;
        for block in [
            &self.template,
            &self.shape_basis,
            &self.expr_basis,
            &self.jaw_basis,
        ] {
            w.f32s(block.iter().copied());
        }
        Ok(w.finish())
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, MAGIC, "blendshape model")?;
        let v = r.usize()?;
        let n = v * 3;
        let template = r.f32s(n)?;
        let shape_basis = r.f32s(N_SHAPE * n)?;
        let expr_basis = r.f32s(N_EXPR * n)?;
        let jaw_basis = r.f32s(N_JAW * n)?;
        r.finish()?;
        Self::new(v, template, shape_basis, expr_basis, jaw_basis)
            .map_err(|e| Error::Format(format!("blendshape model: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Deterministic stand-in face model with `vertices` vertices.
///
/// Vertices lie on a grid over a half-ellipsoid ordered from the top of the
/// face down. The top third forms the upper-face region and the bottom
/// third the lip region. Expression channels 0..20 and the jaw act on the
/// lower face, channels 20..50 on the upper face, each with a Gaussian
/// falloff around a seeded center.
pub fn synth_model(seed: u64, vertices: usize) -> Result<(BlendshapeModel<f32>, RegionMasks)> {
    if vertices < MIN_VERTICES {
        return Err(config_err!(
            "blendshape model needs at least {MIN_VERTICES} vertices, got {vertices}"
        ));
    }
    let mut rng = rng_for(seed, 0xB1E0);
    let cols = (vertices as f64).sqrt().ceil() as usize;
    let rows = vertices.div_ceil(cols);

    let mut template = Vec::with_capacity(vertices * 3);
    for i in 0..vertices {
        let (r, c) = (i / cols, i % cols);
        let u = if rows > 1 { r as f64 / (rows - 1) as f64 } else { 0.5 };
        let w = if cols > 1 { c as f64 / (cols - 1) as f64 } else { 0.5 };
        let theta = (w - 0.5) * std::f64::consts::PI * 0.8;
        let y = 75.0 * (1.0 - 2.0 * u);
        let x = 60.0 * theta.sin();
        let z = 40.0 * theta.cos() * (1.0 - (y / 80.0).powi(2)).max(0.0).sqrt();
        for base in [x, y, z] {
            template.push((base + rng.gen_range(-1.0..1.0)) as f32);
        }
    }

    let third = vertices / 3;
    let upper: Vec<usize> = (0..third).collect();
    let lower: Vec<usize> = (vertices - third..vertices).collect();
    let pos = |v: usize| -> [f64; 3] {
        [
            template[3 * v] as f64,
            template[3 * v + 1] as f64,
            template[3 * v + 2] as f64,
        ]
    };

    let localized = |centers: &[usize], amplitude: f64, rng: &mut crate::Rng| -> Vec<f32> {
        let center = pos(centers[rng.gen_range(0..centers.len())]);
        let mut dir = [0.0f64; 3];
        for d in dir.iter_mut() {
            *d = rng.gen_range(-1.0..1.0);
        }
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
        let sigma: f64 = 30.0;
        let mut basis = Vec::with_capacity(vertices * 3);
        for v in 0..vertices {
            let p = pos(v);
            let d2: f64 = (0..3).map(|k| (p[k] - center[k]).powi(2)).sum();
            let fall = (-d2 / (2.0 * sigma * sigma)).exp();
            for d in dir {
                basis.push((amplitude * fall * d / norm) as f32);
            }
        }
        basis
    };

    let mut expr_basis = Vec::with_capacity(N_EXPR * vertices * 3);
    for k in 0..N_EXPR {
        let region = if k < 20 { &lower } else { &upper };
        let amp = rng.gen_range(2.0..0.9 * MAX_EXPR_MM);
        expr_basis.extend(localized(region, amp, &mut rng));
    }

    // jaw: mm per radian, strongest at the bottom of the face
    let mut jaw_basis = Vec::with_capacity(N_JAW * vertices * 3);
    for k in 0..N_JAW {
        let amp = if k == 0 { 60.0 } else { 15.0 };
        jaw_basis.extend(localized(&lower, amp, &mut rng));
    }

    let mut shape_basis = Vec::with_capacity(N_SHAPE * vertices * 3);
    for k in 0..N_SHAPE {
        let amp = 3.0 / ((k + 1) as f64).sqrt();
        for _ in 0..vertices * 3 {
            shape_basis.push((amp * rng.gen_range(-1.0..1.0)) as f32);
        }
    }

    let model = BlendshapeModel::new(vertices, template, shape_basis, expr_basis, jaw_basis)?;
    let masks = RegionMasks {
        lip: RegionMask::new("lip", lower)?,
        upper_face: RegionMask::new("upper_face", upper)?,
    };
    Ok((model, masks))
}
