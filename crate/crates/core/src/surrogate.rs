//! Point-cloud network standing in for the grasp simulator.
//!
//! A shared per-point encoder (three tanh layers, max-pooled) is concatenated
//! with object/pose features and the normalised log-stiffness, then fed to a
//! five-layer head predicting the 10 outcome values. Reverse mode is written
//! out by hand for this fixed shape.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codesign::{l_opt_with_grad, LossWeights};
use crate::datagen::DatasetRecord;
use crate::error::{Error, Result};
use crate::femsim::{run_episode, MotionScript, Scene, StiffnessVector};
use crate::posegen::GraspPose;
use crate::{seed, NUM_BLOCKS};

pub const GLOBAL_FEATURES: usize = 9;
pub const OUTPUTS: usize = 10;
const ENCODER_LAYERS: usize = 3;
const HEAD_LAYERS: usize = 5;
const MAGIC: &[u8; 8] = b"SGSURR\0\x01";
const FORMAT_VERSION: u32 = 1;

/// Fully connected layer, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, w: vec![0.0; n_in * n_out], b: vec![0.0; n_out] }
    }

    fn xavier(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = (0..n_in * n_out).map(|_| rng.gen_range(-a..a)).collect();
        Self { n_in, n_out, w, b: vec![0.0; n_out] }
    }

    #[inline]
    fn apply(&self, x: &[f64], y: &mut [f64], tanh: bool) {
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            let s = row.iter().zip(x).fold(self.b[o], |s, (a, b)| s + a * b);
            *yo = if tanh { s.tanh() } else { s };
        }
    }

    /// Back-propagates `dy` (with respect to this layer's output activation)
    /// to `dx`, accumulating parameter gradients into `g` when given.
    fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], tanh: bool, mut g: Option<&mut Dense>, dx: &mut [f64]) {
        dx.fill(0.0);
        for o in 0..self.n_out {
            let dz = if tanh { dy[o] * (1.0 - y[o] * y[o]) } else { dy[o] };
            if dz == 0.0 {
                continue;
            }
            let lo = o * self.n_in;
            if let Some(g) = g.as_mut() {
                g.b[o] += dz;
                for (gw, xi) in g.w[lo..lo + self.n_in].iter_mut().zip(x) {
                    *gw += dz * xi;
                }
            }
            for (d, wi) in dx.iter_mut().zip(&self.w[lo..lo + self.n_in]) {
                *d += dz * wi;
            }
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(&self.b)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

/// Per-feature affine standardisation `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Mean and standard deviation of `rows`; near-constant features keep
    /// scale 1.
    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0.0;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1.0;
            for j in 0..dim {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        if n == 0.0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = (0..dim)
            .map(|j| {
                let var = (sq[j] / n - mean[j] * mean[j]).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 * (1.0 + mean[j].abs()) { sd } else { 1.0 }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = (x[j] - self.mean[j]) / self.scale[j];
        }
    }

    fn validate(&self, role: &str, dim: usize) -> Result<()> {
        if self.mean.len() != dim || self.scale.len() != dim {
            return Err(Error::ShapeMismatch { role: role.into(), expected: dim, actual: self.mean.len() });
        }
        if !self.mean.iter().all(|m| m.is_finite()) || !self.scale.iter().all(|s| s.is_finite() && *s != 0.0) {
            return Err(Error::ModelFormat(format!("{role} normalisation is not finite and non-zero")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub points: Standardizer,
    pub globals: Standardizer,
    /// Applied to normalised log-stiffness, see [`StiffnessVector::to_unit`].
    pub stiffness: Standardizer,
    pub targets: Standardizer,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            points: Standardizer::identity(3),
            globals: Standardizer::identity(GLOBAL_FEATURES),
            stiffness: Standardizer::identity(NUM_BLOCKS),
            targets: Standardizer::identity(OUTPUTS),
        }
    }
}

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub point_width: usize,
    pub head_width: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { point_width: 64, head_width: 128 }
    }
}

impl Architecture {
    pub fn head_input(&self) -> usize {
        self.point_width + GLOBAL_FEATURES + NUM_BLOCKS
    }

    fn encoder_dims(&self) -> [(usize, usize); ENCODER_LAYERS] {
        let p = self.point_width;
        [(3, p), (p, p), (p, p)]
    }

    fn head_dims(&self) -> [(usize, usize); HEAD_LAYERS] {
        let h = self.head_width;
        [(self.head_input(), h), (h, h), (h, h), (h, h), (h, OUTPUTS)]
    }
}

/// Object and pose context: CoM and world up-axis in the gripper frame,
/// density, and the two finger offsets.
pub fn context_features(com_world: [f64; 3], density: f64, pose: &GraspPose) -> [f64; GLOBAL_FEATURES] {
    let iso = pose.isometry();
    let com = iso.inverse_transform_point(&Point3::from(com_world));
    let up = iso.rotation.inverse() * Vector3::y();
    [com.x, com.y, com.z, up.x, up.y, up.z, density, pose.s1, pose.s2]
}

/// Raw network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateInput {
    /// Partial point cloud in the gripper frame (m).
    pub points: Vec<[f64; 3]>,
    pub globals: [f64; GLOBAL_FEATURES],
    pub stiffness: StiffnessVector,
}

impl SurrogateInput {
    pub fn from_record(r: &DatasetRecord) -> Self {
        Self {
            points: r.points.clone(),
            globals: context_features(r.com, r.density, &r.grasp_pose()),
            stiffness: r.k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub f: [f64; 6],
    pub dq: [f64; 3],
    pub c_g: f64,
}

impl Prediction {
    pub fn from_array(a: &[f64; OUTPUTS]) -> Self {
        Self {
            f: [a[0], a[1], a[2], a[3], a[4], a[5]],
            dq: [a[6], a[7], a[8]],
            c_g: a[9],
        }
    }

    pub fn to_array(&self) -> [f64; OUTPUTS] {
        let mut a = [0.0; OUTPUTS];
        a[..6].copy_from_slice(&self.f);
        a[6..9].copy_from_slice(&self.dq);
        a[9] = self.c_g;
        a
    }
}

/// Max-pooled point features and the point that won each feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub pooled: Vec<f64>,
    argmax: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub arch: Architecture,
    pub encoder: Vec<Dense>,
    pub head: Vec<Dense>,
    pub norm: Normalization,
}

impl SurrogateModel {
    /// Glorot-uniform weights, zero biases, identity normalisation.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        Self {
            arch,
            encoder: arch.encoder_dims().iter().map(|&(i, o)| Dense::xavier(i, o, &mut rng)).collect(),
            head: arch.head_dims().iter().map(|&(i, o)| Dense::xavier(i, o, &mut rng)).collect(),
            norm: Normalization::identity(),
        }
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            encoder: arch.encoder_dims().iter().map(|&(i, o)| Dense::zeros(i, o)).collect(),
            head: arch.head_dims().iter().map(|&(i, o)| Dense::zeros(i, o)).collect(),
            norm: Normalization::identity(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.layers().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(&self.head)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain(self.head.iter_mut())
    }

    /// Flat view of every weight and bias, encoder first.
    pub fn parameters(&self) -> Vec<f64> {
        self.layers().flat_map(|l| l.params().copied()).collect()
    }

    pub fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        let n = self.num_parameters();
        if p.len() != n {
            return Err(Error::ShapeMismatch { role: "parameters".into(), expected: n, actual: p.len() });
        }
        for (dst, &src) in self.layers_mut().flat_map(|l| l.params_mut()).zip(p) {
            *dst = src;
        }
        Ok(())
    }

    fn zero_like(&self) -> Self {
        Self::zeros(self.arch)
    }

    fn point_activations(&self, p: &[f64; 3], acts: &mut [Vec<f64>; ENCODER_LAYERS]) {
        let mut q = [0.0; 3];
        self.norm.points.apply(p, &mut q);
        let [a0, a1, a2] = acts;
        self.encoder[0].apply(&q, a0, true);
        self.encoder[1].apply(a0, a1, true);
        self.encoder[2].apply(a1, a2, true);
    }

    /// Runs the shared point encoder and max-pools over points.
    pub fn encode(&self, points: &[[f64; 3]]) -> Result<Encoding> {
        if points.is_empty() {
            return Err(Error::ShapeMismatch { role: "point cloud".into(), expected: 1, actual: 0 });
        }
        let w = self.arch.point_width;
        let mut acts = [vec![0.0; w], vec![0.0; w], vec![0.0; w]];
        let mut pooled = vec![f64::NEG_INFINITY; w];
        let mut argmax = vec![0; w];
        for (i, p) in points.iter().enumerate() {
            self.point_activations(p, &mut acts);
            for j in 0..w {
                if acts[2][j] > pooled[j] {
                    pooled[j] = acts[2][j];
                    argmax[j] = i;
                }
            }
        }
        Ok(Encoding { pooled, argmax })
    }

    fn head_input(&self, enc: &Encoding, globals: &[f64; GLOBAL_FEATURES], u: &[f64; NUM_BLOCKS]) -> Vec<f64> {
        let pw = self.arch.point_width;
        let mut x = vec![0.0; self.arch.head_input()];
        x[..pw].copy_from_slice(&enc.pooled);
        self.norm.globals.apply(globals, &mut x[pw..pw + GLOBAL_FEATURES]);
        self.norm.stiffness.apply(u, &mut x[pw + GLOBAL_FEATURES..]);
        x
    }

    /// Head activations, last one being the normalised output.
    fn head_forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(HEAD_LAYERS);
        for (i, l) in self.head.iter().enumerate() {
            let mut y = vec![0.0; l.n_out];
            let input = if i == 0 { x } else { &acts[i - 1] };
            l.apply(input, &mut y, i + 1 < HEAD_LAYERS);
            acts.push(y);
        }
        acts
    }

    /// Back-propagates `dy` on the normalised output through the head and
    /// returns the gradient with respect to the head input.
    fn head_backward(&self, x: &[f64], acts: &[Vec<f64>], dy: &[f64], mut grad: Option<&mut SurrogateModel>) -> Vec<f64> {
        let mut d = dy.to_vec();
        for i in (0..HEAD_LAYERS).rev() {
            let l = &self.head[i];
            let input = if i == 0 { x } else { &acts[i - 1] };
            let mut dx = vec![0.0; l.n_in];
            let g = grad.as_mut().map(|g| &mut g.head[i]);
            l.backward(input, &acts[i], &d, i + 1 < HEAD_LAYERS, g, &mut dx);
            d = dx;
        }
        d
    }

    fn denormalize(&self, y: &[f64]) -> [f64; OUTPUTS] {
        let t = &self.norm.targets;
        std::array::from_fn(|j| t.mean[j] + t.scale[j] * y[j])
    }

    /// Prediction from a cached encoding and normalised log-stiffness `u`.
    pub fn predict_encoded(&self, enc: &Encoding, globals: &[f64; GLOBAL_FEATURES], u: &[f64; NUM_BLOCKS]) -> Prediction {
        let x = self.head_input(enc, globals, u);
        let acts = self.head_forward(&x);
        Prediction::from_array(&self.denormalize(&acts[HEAD_LAYERS - 1]))
    }

    pub fn forward(&self, input: &SurrogateInput) -> Result<Prediction> {
        let enc = self.encode(&input.points)?;
        Ok(self.predict_encoded(&enc, &input.globals, &input.stiffness.to_unit()))
    }

    /// Value of `objective(prediction)` and its gradient with respect to the
    /// normalised log-stiffness `u`. The objective returns its value and its
    /// gradient with respect to the 10 raw outputs.
    pub fn objective_grad_encoded<F>(
        &self,
        enc: &Encoding,
        globals: &[f64; GLOBAL_FEATURES],
        u: &[f64; NUM_BLOCKS],
        objective: F,
    ) -> (f64, [f64; NUM_BLOCKS])
    where
        F: Fn(&Prediction) -> (f64, [f64; OUTPUTS]),
    {
        let x = self.head_input(enc, globals, u);
        let acts = self.head_forward(&x);
        let pred = Prediction::from_array(&self.denormalize(&acts[HEAD_LAYERS - 1]));
        let (value, d_pred) = objective(&pred);
        let dy: Vec<f64> = (0..OUTPUTS).map(|j| d_pred[j] * self.norm.targets.scale[j]).collect();
        let dx = self.head_backward(&x, &acts, &dy, None);
        let off = self.arch.point_width + GLOBAL_FEATURES;
        let g = std::array::from_fn(|j| dx[off + j] / self.norm.stiffness.scale[j]);
        (value, g)
    }

    /// Gradient of the optimisation loss with respect to the normalised
    /// log-stiffness of `input`.
    pub fn grad_wrt_stiffness(&self, input: &SurrogateInput, w: &LossWeights) -> Result<[f64; NUM_BLOCKS]> {
        let enc = self.encode(&input.points)?;
        let (_, g) = self.objective_grad_encoded(&enc, &input.globals, &input.stiffness.to_unit(), |p| l_opt_with_grad(p, w));
        Ok(g)
    }

    /// Mean L1 over records and outputs in normalised target units.
    pub fn l1_loss(&self, records: &[DatasetRecord]) -> Result<f64> {
        let groups = group_records(records);
        let mut total = 0.0;
        for g in &groups {
            total += self.group_loss(records, g, None, 0.0)?;
        }
        Ok(total / (records.len() * OUTPUTS) as f64)
    }

    /// [`l1_loss`](Self::l1_loss) and its gradient with respect to every
    /// parameter, in the order of [`parameters`](Self::parameters).
    pub fn l1_loss_and_grad(&self, records: &[DatasetRecord]) -> Result<(f64, Vec<f64>)> {
        let groups = group_records(records);
        let scale = 1.0 / (records.len() * OUTPUTS) as f64;
        let mut grad = self.zero_like();
        let mut total = 0.0;
        for g in &groups {
            total += self.group_loss(records, g, Some(&mut grad), scale)?;
        }
        Ok((total * scale, grad.parameters()))
    }

    /// Summed absolute error of one cloud's records; accumulates the gradient
    /// of `scale * sum` when `grad` is given.
    fn group_loss(&self, records: &[DatasetRecord], members: &[usize], mut grad: Option<&mut SurrogateModel>, scale: f64) -> Result<f64> {
        let first = &records[members[0]];
        let enc = self.encode(&first.points)?;
        let pw = self.arch.point_width;
        let mut d_pooled = vec![0.0; pw];
        let mut total = 0.0;
        for &i in members {
            let r = &records[i];
            let input = SurrogateInput::from_record(r);
            let x = self.head_input(&enc, &input.globals, &r.k.to_unit());
            let acts = self.head_forward(&x);
            let y = &acts[HEAD_LAYERS - 1];
            let mut t = [0.0; OUTPUTS];
            self.norm.targets.apply(&r.targets(), &mut t);
            let mut dy = [0.0; OUTPUTS];
            for j in 0..OUTPUTS {
                let e = y[j] - t[j];
                total += e.abs();
                dy[j] = scale * if e > 0.0 { 1.0 } else if e < 0.0 { -1.0 } else { 0.0 };
            }
            if let Some(g) = grad.as_deref_mut() {
                let dx = self.head_backward(&x, &acts, &dy, Some(g));
                for j in 0..pw {
                    d_pooled[j] += dx[j];
                }
            }
        }
        if let Some(g) = grad {
            self.encoder_backward(&first.points, &enc, &d_pooled, g);
        }
        Ok(total)
    }

    /// Max-pooling routes each feature's gradient to its winning point only.
    fn encoder_backward(&self, points: &[[f64; 3]], enc: &Encoding, d_pooled: &[f64], grad: &mut SurrogateModel) {
        let w = self.arch.point_width;
        let mut winners: Vec<usize> = enc.argmax.clone();
        winners.sort_unstable();
        winners.dedup();
        let mut acts = [vec![0.0; w], vec![0.0; w], vec![0.0; w]];
        for &pi in &winners {
            let mut d3 = vec![0.0; w];
            for j in 0..w {
                if enc.argmax[j] == pi {
                    d3[j] = d_pooled[j];
                }
            }
            if d3.iter().all(|&d| d == 0.0) {
                continue;
            }
            self.point_activations(&points[pi], &mut acts);
            let mut q = [0.0; 3];
            self.norm.points.apply(&points[pi], &mut q);
            let mut d2 = vec![0.0; w];
            self.encoder[2].backward(&acts[1], &acts[2], &d3, true, Some(&mut grad.encoder[2]), &mut d2);
            let mut d1 = vec![0.0; w];
            self.encoder[1].backward(&acts[0], &acts[1], &d2, true, Some(&mut grad.encoder[1]), &mut d1);
            let mut d0 = [0.0; 3];
            self.encoder[0].backward(&q, &acts[0], &d1, true, Some(&mut grad.encoder[0]), &mut d0);
        }
    }

    /// Fits input and target normalisation to `records`.
    pub fn fit_normalization(&mut self, records: &[DatasetRecord]) {
        let points: Vec<[f64; 3]> = records.iter().flat_map(|r| r.points.iter().copied()).collect();
        let globals: Vec<[f64; GLOBAL_FEATURES]> = records.iter().map(|r| SurrogateInput::from_record(r).globals).collect();
        let u: Vec<[f64; NUM_BLOCKS]> = records.iter().map(|r| r.k.to_unit()).collect();
        let t: Vec<[f64; OUTPUTS]> = records.iter().map(|r| r.targets()).collect();
        self.norm = Normalization {
            points: Standardizer::fit(3, points.iter().map(|p| &p[..])),
            globals: Standardizer::fit(GLOBAL_FEATURES, globals.iter().map(|p| &p[..])),
            stiffness: Standardizer::fit(NUM_BLOCKS, u.iter().map(|p| &p[..])),
            targets: Standardizer::fit(OUTPUTS, t.iter().map(|p| &p[..])),
        };
    }

    fn validate(&self) -> Result<()> {
        for (l, &(i, o)) in self.encoder.iter().zip(&self.arch.encoder_dims()).chain(self.head.iter().zip(&self.arch.head_dims())) {
            if l.n_in != i || l.n_out != o || l.w.len() != i * o || l.b.len() != o {
                return Err(Error::ModelFormat(format!("layer shape {}x{} does not match architecture", l.n_out, l.n_in)));
            }
        }
        if self.encoder.len() != ENCODER_LAYERS || self.head.len() != HEAD_LAYERS {
            return Err(Error::ModelFormat("wrong layer count".into()));
        }
        self.norm.points.validate("points", 3)?;
        self.norm.globals.validate("globals", GLOBAL_FEATURES)?;
        self.norm.stiffness.validate("stiffness", NUM_BLOCKS)?;
        self.norm.targets.validate("targets", OUTPUTS)
    }

    /// Path of the JSON sidecar written next to a weights file.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes little-endian weights to `path` and normalisation to the sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.num_parameters());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&((ENCODER_LAYERS + HEAD_LAYERS) as u32).to_le_bytes());
        for l in self.layers() {
            buf.extend_from_slice(&(l.n_in as u32).to_le_bytes());
            buf.extend_from_slice(&(l.n_out as u32).to_le_bytes());
        }
        for v in self.layers().flat_map(|l| l.params()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        let side = Sidecar { format_version: FORMAT_VERSION, architecture: self.arch, normalization: self.norm.clone() };
        std::fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = Self::sidecar_path(path);
        for p in [path, side_path.as_path()] {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(&side_path)?)?;
        if side.format_version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported sidecar version {}", side.format_version)));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(Error::ModelFormat("bad magic bytes".into()));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported weights version {version}")));
        }
        let n_layers = cur.u32()? as usize;
        if n_layers != ENCODER_LAYERS + HEAD_LAYERS {
            return Err(Error::ModelFormat(format!("expected {} layers, found {n_layers}", ENCODER_LAYERS + HEAD_LAYERS)));
        }
        let mut model = Self::zeros(side.architecture);
        let dims: Vec<(usize, usize)> = (0..n_layers).map(|_| Ok((cur.u32()? as usize, cur.u32()? as usize))).collect::<Result<_>>()?;
        for (l, (i, o)) in model.layers().zip(&dims) {
            if (l.n_in, l.n_out) != (*i, *o) {
                return Err(Error::ModelFormat(format!("layer {o}x{i} does not match the sidecar architecture")));
            }
        }
        let n = model.num_parameters();
        let params: Vec<f64> = (0..n).map(|_| cur.f64()).collect::<Result<_>>()?;
        if cur.pos != bytes.len() {
            return Err(Error::ModelFormat("trailing bytes".into()));
        }
        model.set_parameters(&params)?;
        model.norm = side.normalization;
        model.validate()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    architecture: Architecture,
    normalization: Normalization,
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::ModelFormat("truncated weights file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Indices of records sharing one point cloud, in first-appearance order.
fn group_records(records: &[DatasetRecord]) -> Vec<Vec<usize>> {
    let mut index: HashMap<(String, [u64; 8], usize), usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let key = (r.object_id.clone(), r.pose.map(f64::to_bits), r.points.len());
        match index.get(&key) {
            Some(&g) if records[groups[g][0]].points == r.points => groups[g].push(i),
            _ => {
                index.insert(key, groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// How records are assigned to the validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Individual records; validation clouds also appear in training with
    /// other stiffness vectors.
    Record,
    /// Whole point clouds, so validation poses are unseen.
    #[default]
    Cloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Records per batch; whole point clouds are kept together.
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub split: SplitMode,
    /// Decoupled (AdamW) weight decay per unit learning rate.
    pub weight_decay: f64,
    /// Return the parameters of the epoch with the lowest validation L1.
    pub keep_best: bool,
    pub seed: u64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            validation_fraction: 0.2,
            split: SplitMode::Cloud,
            weight_decay: 0.0,
            keep_best: true,
            seed: 0,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::validation("validation_fraction", "must lie in (0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Loss curves; `val_l1[0]` is the untrained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_l1: Vec<f64>,
    pub val_l1: Vec<f64>,
    pub train_records: usize,
    pub val_records: usize,
    /// Set when the returned model is the best-validation epoch rather than the last.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    /// Epoch whose parameters the trained model holds.
    pub fn returned_epoch(&self) -> usize {
        self.best_epoch.unwrap_or(self.val_l1.len() - 1)
    }

    /// Validation L1 of the returned model.
    pub fn final_val_l1(&self) -> f64 {
        self.val_l1[self.returned_epoch()]
    }

    /// One row per epoch; `returned` marks the epoch the model was taken from.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_l1,val_l1,returned\n");
        let kept = self.returned_epoch();
        for (e, v) in self.val_l1.iter().enumerate() {
            let t = if e == 0 { String::new() } else { format!("{:e}", self.train_l1[e - 1]) };
            s.push_str(&format!("{e},{t},{v:e},{}\n", u8::from(e == kept)));
        }
        s
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * ((self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS) + decay * params[i]);
        }
    }
}

/// Splits records into (train, validation). With a single unit to split,
/// both sets are that unit.
pub fn split_records(records: &[DatasetRecord], validation_fraction: f64, mode: SplitMode, seed: u64) -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
    let mut rng = seed::rng(seed::derive(seed, "split", 0));
    let mut groups = match mode {
        SplitMode::Cloud => group_records(records),
        SplitMode::Record => (0..records.len()).map(|i| vec![i]).collect(),
    };
    groups.shuffle(&mut rng);
    let n_val = if groups.len() < 2 {
        0
    } else {
        ((groups.len() as f64 * validation_fraction).round() as usize).clamp(1, groups.len() - 1)
    };
    let (val_groups, train_groups) = groups.split_at(n_val);
    let collect = |gs: &[Vec<usize>]| -> Vec<DatasetRecord> { gs.iter().flatten().map(|&i| records[i].clone()).collect() };
    let train_set = collect(train_groups);
    let val_set = if n_val == 0 { train_set.clone() } else { collect(val_groups) };
    (train_set, val_set)
}

/// Trains a fresh model on `records` with L1 loss and Adam.
///
/// Records are split by point cloud, so validation poses are unseen. With a
/// single cloud the validation set is the training set.
pub fn train(records: &[DatasetRecord], cfg: &TrainConfig) -> Result<(SurrogateModel, TrainReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::validation("dataset", "empty"));
    }
    let (train_set, val_set) = split_records(records, cfg.validation_fraction, cfg.split, cfg.seed);
    let mut rng = seed::rng(seed::derive(cfg.seed, "train", 0));

    let mut model = SurrogateModel::new(cfg.architecture, seed::derive(cfg.seed, "init", 0));
    model.fit_normalization(&train_set);
    let train_groups = group_records(&train_set);
    let mut report = TrainReport {
        val_l1: vec![model.l1_loss(&val_set)?],
        train_records: train_set.len(),
        val_records: val_set.len(),
        ..Default::default()
    };
    let mut params = model.parameters();
    let mut adam = Adam::new(params.len());
    let mut order: Vec<usize> = (0..train_groups.len()).collect();
    let mut best = (report.val_l1[0], params.clone());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> = vec![Vec::new()];
        let mut count = 0;
        for &g in &order {
            if count >= cfg.batch_size {
                batches.push(Vec::new());
                count = 0;
            }
            batches.last_mut().unwrap().push(g);
            count += train_groups[g].len();
        }
        let mut epoch_loss = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let n: usize = batch.iter().map(|&g| train_groups[g].len()).sum();
            let scale = 1.0 / (n * OUTPUTS) as f64;
            let mut grad = model.zero_like();
            let mut loss = 0.0;
            for &g in batch {
                loss += model.group_loss(&train_set, &train_groups[g], Some(&mut grad), scale)?;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += loss;
            let g = grad.parameters();
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            adam.step(&mut params, &g, cfg.learning_rate, cfg.weight_decay);
            model.set_parameters(&params)?;
        }
        report.train_l1.push(epoch_loss / (train_set.len() * OUTPUTS) as f64);
        report.val_l1.push(model.l1_loss(&val_set)?);
        log::debug!("epoch {epoch}: train {:.4} val {:.4}", report.train_l1[epoch], report.val_l1[epoch + 1]);
        if report.val_l1[epoch + 1] < best.0 {
            best = (report.val_l1[epoch + 1], params.clone());
        }
    }
    if cfg.keep_best {
        report.best_epoch = Some(report.val_l1.iter().position(|&v| v == best.0).unwrap_or(0));
        model.set_parameters(&best.1)?;
    }
    Ok((model, report))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub fem_median: f64,
    pub surrogate_median: f64,
    pub ratio: f64,
}

/// Median wall time of a full simulator episode over that of one surrogate
/// forward pass (including the point encoder).
#[allow(clippy::too_many_arguments)]
pub fn timing_ratio(
    model: &SurrogateModel,
    scene: &Scene,
    k: &StiffnessVector,
    pose: &GraspPose,
    script: &MotionScript,
    input: &SurrogateInput,
    fem_reps: usize,
    surrogate_reps: usize,
) -> Result<TimingReport> {
    let mut fem = Vec::with_capacity(fem_reps);
    for _ in 0..fem_reps.max(1) {
        let t = Instant::now();
        let r = run_episode(scene, k, pose, script)?;
        std::hint::black_box(&r);
        fem.push(t.elapsed().as_secs_f64());
    }
    let mut sur = Vec::with_capacity(surrogate_reps);
    for _ in 0..surrogate_reps.max(1) {
        let t = Instant::now();
        let p = model.forward(std::hint::black_box(input))?;
        std::hint::black_box(&p);
        sur.push(t.elapsed().as_secs_f64());
    }
    let fem_median = median(fem);
    let surrogate_median = median(sur);
    Ok(TimingReport { fem_median, surrogate_median, ratio: fem_median / surrogate_median })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_stiffness, StiffnessDistribution};

    fn small() -> Architecture {
        Architecture { point_width: 8, head_width: 12 }
    }

    fn record(i: u64, cloud: u64) -> DatasetRecord {
        let mut rng = seed::rng(seed::derive(5, "cloud", cloud));
        let points = (0..16).map(|_| [rng.gen_range(-0.03..0.03), rng.gen_range(-0.1..0.0), rng.gen_range(-0.01..0.01)]).collect();
        let mut rng = seed::rng(seed::derive(5, "rec", i));
        DatasetRecord {
            object_id: format!("o{cloud}"),
            points,
            com: [0.0, 0.02, 0.0],
            density: 8.0,
            k: sample_stiffness(i, StiffnessDistribution::LogUniform),
            pose: [0.0, 0.1, 0.0, 0.1 * cloud as f64, 0.0, 0.0, 0.01, 0.012],
            wrench: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            dq: std::array::from_fn(|_| rng.gen_range(-0.01..0.01)),
            c_g: rng.gen_range(0..2),
        }
    }

    #[test]
    fn zero_weights_predict_zero() {
        let m = SurrogateModel::zeros(Architecture::default());
        let p = m.forward(&SurrogateInput::from_record(&record(0, 0))).unwrap();
        assert_eq!(p.to_array(), [0.0; OUTPUTS]);
    }

    #[test]
    fn permutation_invariant() {
        let m = SurrogateModel::new(Architecture::default(), 3);
        let mut input = SurrogateInput::from_record(&record(0, 0));
        let a = m.forward(&input).unwrap();
        input.points.reverse();
        input.points.shuffle(&mut seed::rng(9));
        assert_eq!(m.forward(&input).unwrap(), a);
    }

    #[test]
    fn empty_cloud_names_role() {
        let m = SurrogateModel::new(small(), 1);
        let mut input = SurrogateInput::from_record(&record(0, 0));
        input.points.clear();
        match m.forward(&input) {
            Err(Error::ShapeMismatch { role, .. }) => assert_eq!(role, "point cloud"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parameter_gradient_matches_differences() {
        let recs: Vec<_> = (0..6).map(|i| record(i, i % 2)).collect();
        let mut m = SurrogateModel::new(small(), 4);
        m.fit_normalization(&recs);
        let (_, g) = m.l1_loss_and_grad(&recs).unwrap();
        let p0 = m.parameters();
        let eps = 1e-6;
        let mut rng = seed::rng(1);
        for _ in 0..40 {
            let i = rng.gen_range(0..p0.len());
            let mut p = p0.clone();
            p[i] += eps;
            m.set_parameters(&p).unwrap();
            let up = m.l1_loss(&recs).unwrap();
            p[i] -= 2.0 * eps;
            m.set_parameters(&p).unwrap();
            let dn = m.l1_loss(&recs).unwrap();
            let fd = (up - dn) / (2.0 * eps);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn duplicated_dataset_same_loss() {
        let recs: Vec<_> = (0..5).map(|i| record(i, i)).collect();
        let m = SurrogateModel::new(small(), 4);
        let twice: Vec<_> = recs.iter().chain(&recs).cloned().collect();
        let a = m.l1_loss(&recs).unwrap();
        let b = m.l1_loss(&twice).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn memorises_a_single_record() {
        let recs = vec![record(0, 0); 4];
        let cfg = TrainConfig { epochs: 2000, learning_rate: 1e-3, architecture: small(), ..Default::default() };
        let (_, rep) = train(&recs, &cfg).unwrap();
        let best = rep.train_l1.iter().rev().take(50).fold(f64::INFINITY, |a, &b| a.min(b));
        assert!(best < 1e-3, "{best}");
    }

    #[test]
    fn training_is_deterministic() {
        let recs: Vec<_> = (0..12).map(|i| record(i, i % 4)).collect();
        let cfg = TrainConfig { epochs: 3, architecture: small(), ..Default::default() };
        let (a, ra) = train(&recs, &cfg).unwrap();
        let (b, rb) = train(&recs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn save_load_bit_exact() {
        let recs: Vec<_> = (0..6).map(|i| record(i, i % 3)).collect();
        let mut m = SurrogateModel::new(small(), 2);
        m.fit_normalization(&recs);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.save(&path).unwrap();
        let l = SurrogateModel::load(&path).unwrap();
        assert_eq!(l, m);
        let input = SurrogateInput::from_record(&recs[0]);
        assert_eq!(l.forward(&input).unwrap(), m.forward(&input).unwrap());
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(SurrogateModel::load(&path), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let m = SurrogateModel::new(small(), 2);
        let input = SurrogateInput::from_record(&record(0, 0));
        let enc = m.encode(&input.points).unwrap();
        let (_, g) = m.objective_grad_encoded(&enc, &input.globals, &input.stiffness.to_unit(), |_| (3.0, [0.0; OUTPUTS]));
        assert_eq!(g, [0.0; NUM_BLOCKS]);
    }

    #[test]
    fn one_wide_network_matches_hand_computation() {
        let mut m = SurrogateModel::zeros(Architecture { point_width: 1, head_width: 1 });
        m.encoder[0].w = vec![0.5, -0.25, 1.0];
        m.encoder[0].b = vec![0.1];
        m.encoder[1].w = vec![2.0];
        m.encoder[1].b = vec![-0.3];
        m.encoder[2].w = vec![-1.5];
        m.encoder[2].b = vec![0.2];
        m.head[0].w[0] = 0.7;
        m.head[0].w[1] = 0.01;
        m.head[0].w[10] = 0.3;
        m.head[0].b[0] = 0.05;
        for l in &mut m.head[1..4] {
            l.w[0] = 1.1;
        }
        for j in 0..OUTPUTS {
            m.head[4].w[j] = 0.1 * j as f64 - 0.4;
            m.head[4].b[j] = 0.01 * j as f64;
        }
        let pts = [[0.2, -0.4, 0.1], [-0.3, 0.5, 0.6]];
        let k = StiffnessVector::uniform(2e6);
        let mut globals = [0.0; GLOBAL_FEATURES];
        globals[0] = 3.0;
        let input = SurrogateInput { points: pts.to_vec(), globals, stiffness: k };

        let feat = |p: [f64; 3]| (-1.5 * (2.0 * (0.5 * p[0] - 0.25 * p[1] + p[2] + 0.1).tanh() - 0.3).tanh() + 0.2).tanh();
        let pooled = feat(pts[0]).max(feat(pts[1]));
        let u0 = (2e6f64 / crate::E_MIN).ln() / (crate::E_MAX / crate::E_MIN).ln();
        let mut z = (0.7 * pooled + 0.01 * 3.0 + 0.3 * u0 + 0.05).tanh();
        for _ in 0..3 {
            z = (1.1 * z).tanh();
        }
        let got = m.forward(&input).unwrap().to_array();
        for j in 0..OUTPUTS {
            let expect = (0.1 * j as f64 - 0.4) * z + 0.01 * j as f64;
            assert!((got[j] - expect).abs() < 1e-15, "{j}: {} vs {expect}", got[j]);
        }
    }
}
