//! One-step predictor: a multilayer perceptron applied to every periodic stencil
//! `U_{i-k..=i+k}` with shared weights, optionally added to the classical step.
//!
//! Inputs are divided by `input_scale`; the network output is multiplied by
//! `output_scale`. Parameters are stored layer by layer as a row-major weight
//! matrix `(out, in)` followed by the bias.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, CplError, Result};
use crate::fv::Scheme;
use crate::grid::{GridState, Mesh1D};
use crate::reference::{read_f64, read_u32, read_u64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    #[inline]
    fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative from the pre-activation `z` and the activation `a`.
    #[inline]
    fn grad(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub stencil_radius: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    /// Predict a correction added to the classical step instead of the state itself.
    pub residual_mode: bool,
    /// Limiter setting of the classical baseline in residual mode.
    pub baseline_berger: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            stencil_radius: 3,
            hidden_widths: vec![32, 32],
            activation: Activation::Tanh,
            residual_mode: true,
            baseline_berger: true,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stencil_radius < 1 {
            return Err(CplError::InvalidConfig("stencil_radius must be >= 1".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(CplError::InvalidConfig("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn stencil_len(&self) -> usize {
        2 * self.stencil_radius + 1
    }

    /// `[2k+1, hidden..., 1]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.stencil_len()];
        s.extend(&self.hidden_widths);
        s.push(1);
        s
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn scheme(&self) -> Scheme {
        Scheme { use_berger: self.baseline_berger, ..Scheme::default() }
    }
}

/// Fixed input/output scalings stored with the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_scale: f64,
    pub output_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { input_scale: 1.0, output_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub theta: Vec<f64>,
    pub arch: ArchSpec,
    pub rng_seed: u64,
    pub norm: Normalization,
}

/// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<PredictorParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(arch.param_count());
    for w in arch.layer_sizes().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        theta.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)));
        theta.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(PredictorParams { theta, arch: arch.clone(), rng_seed: seed, norm: Normalization::default() })
}

/// Activations of every layer, cell-major: `acts[l][i * width + j]`.
pub(crate) struct Tape {
    pre: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
}

impl PredictorParams {
    pub fn check(&self) -> Result<()> {
        self.arch.validate()?;
        if self.theta.len() != self.arch.param_count() {
            return Err(CplError::ShapeMismatch { expected: self.arch.param_count(), found: self.theta.len() });
        }
        ensure_finite(&self.theta, "parameters")
    }

    /// Network output per cell, before `output_scale`.
    pub(crate) fn raw_output(&self, u: &[f64]) -> (Vec<f64>, Tape) {
        let n = u.len();
        let k = self.arch.stencil_radius as isize;
        let sizes = self.arch.layer_sizes();
        let inv = 1.0 / self.norm.input_scale;
        let mut input = Vec::with_capacity(n * sizes[0]);
        for i in 0..n as isize {
            for o in -k..=k {
                input.push(u[(i + o).rem_euclid(n as isize) as usize] * inv);
            }
        }
        let mut pre = Vec::with_capacity(sizes.len() - 1);
        let mut acts = vec![input];
        let mut off = 0;
        let last = sizes.len() - 2;
        for (l, w) in sizes.windows(2).enumerate() {
            let (din, dout) = (w[0], w[1]);
            let weights = &self.theta[off..off + din * dout];
            let bias = &self.theta[off + din * dout..off + din * dout + dout];
            off += din * dout + dout;
            let x = &acts[l];
            let mut z = vec![0.0; n * dout];
            for i in 0..n {
                let xi = &x[i * din..(i + 1) * din];
                for j in 0..dout {
                    let row = &weights[j * din..(j + 1) * din];
                    z[i * dout + j] = bias[j] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let a = if l == last { z.clone() } else { z.iter().map(|&v| self.arch.activation.eval(v)).collect() };
            pre.push(z);
            acts.push(a);
        }
        let out = acts.last().expect("output layer").clone();
        (out, Tape { pre, acts })
    }

    /// Reverse pass of [`raw_output`]: returns `(d/dtheta, d/du)` for upstream `g`
    /// on the raw output.
    pub(crate) fn raw_output_vjp(&self, tape: &Tape, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = g.len();
        let sizes = self.arch.layer_sizes();
        let mut grad = vec![0.0; self.theta.len()];
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut off = 0;
        for w in sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let last = sizes.len() - 2;
        let mut delta = g.to_vec();
        for l in (0..sizes.len() - 1).rev() {
            let (din, dout) = (sizes[l], sizes[l + 1]);
            if l != last {
                for (d, (z, a)) in delta.iter_mut().zip(tape.pre[l].iter().zip(&tape.acts[l + 1])) {
                    *d *= self.arch.activation.grad(*z, *a);
                }
            }
            let o = offsets[l];
            let weights = &self.theta[o..o + din * dout];
            let x = &tape.acts[l];
            let mut back = vec![0.0; n * din];
            {
                let (gw, gb) = grad[o..o + din * dout + dout].split_at_mut(din * dout);
                for i in 0..n {
                    let xi = &x[i * din..(i + 1) * din];
                    let bi = &mut back[i * din..(i + 1) * din];
                    for j in 0..dout {
                        let d = delta[i * dout + j];
                        if d == 0.0 {
                            continue;
                        }
                        gb[j] += d;
                        let row = &weights[j * din..(j + 1) * din];
                        for ((gwj, xv), (bv, wv)) in gw[j * din..(j + 1) * din].iter_mut().zip(xi).zip(bi.iter_mut().zip(row)) {
                            *gwj += d * xv;
                            *bv += d * wv;
                        }
                    }
                }
            }
            delta = back;
        }
        // scatter stencil gradients back onto cells
        let k = self.arch.stencil_radius as isize;
        let width = sizes[0];
        let inv = 1.0 / self.norm.input_scale;
        let mut gu = vec![0.0; n];
        for i in 0..n {
            for (s, o) in (-k..=k).enumerate() {
                gu[(i as isize + o).rem_euclid(n as isize) as usize] += delta[i * width + s] * inv;
            }
        }
        (grad, gu)
    }

    pub(crate) fn predict_values(&self, u: &[f64], mesh: &Mesh1D) -> (Vec<f64>, Tape) {
        let (raw, tape) = self.raw_output(u);
        let s = self.norm.output_scale;
        let out = if self.arch.residual_mode {
            let base = self.arch.scheme().step_values(u, mesh);
            base.iter().zip(&raw).map(|(b, r)| b + s * r).collect()
        } else {
            raw.iter().map(|r| s * r).collect()
        };
        (out, tape)
    }

    pub(crate) fn predict_vjp(&self, u: &[f64], mesh: &Mesh1D, tape: &Tape, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = self.norm.output_scale;
        let g: Vec<f64> = upstream.iter().map(|v| v * s).collect();
        let (gt, mut gu) = self.raw_output_vjp(tape, &g);
        if self.arch.residual_mode {
            let gb = self.arch.scheme().step_vjp(u, mesh, upstream);
            gu.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
        }
        (gt, gu)
    }
}

/// `U^{n+1}` predicted from `state`.
pub fn forward(params: &PredictorParams, state: &GridState, mesh: &Mesh1D) -> Result<GridState> {
    let (out, _) = params.predict_values(&state.values, mesh);
    ensure_finite(&out, "network output")?;
    Ok(GridState::with_time(out, state.time_index + 1))
}

/// Gradients of `upstream . forward(state)` with respect to the parameters and the input state.
pub fn backward(params: &PredictorParams, state: &GridState, mesh: &Mesh1D, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (_, tape) = params.predict_values(&state.values, mesh);
    params.predict_vjp(&state.values, mesh, &tape, upstream)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CPLCKPT\0";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Parameters plus the optimizer step count they were saved at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PredictorParams,
    pub step_count: u64,
}

impl Checkpoint {
    /// Little-endian layout:
    ///
    /// ```text
    /// magic "CPLCKPT\0" | u32 version
    /// | u64 stencil_radius | u64 n_hidden | u64 width[n_hidden]
    /// | u8 activation (0 tanh, 1 softplus) | u8 residual_mode | u8 baseline_berger
    /// | f64 input_scale | f64 output_scale | u64 rng_seed | u64 step_count
    /// | u64 n_params | f64 theta[n_params]
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let p = &self.params;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(p.arch.stencil_radius as u64).to_le_bytes())?;
        w.write_all(&(p.arch.hidden_widths.len() as u64).to_le_bytes())?;
        for &h in &p.arch.hidden_widths {
            w.write_all(&(h as u64).to_le_bytes())?;
        }
        let act = match p.arch.activation {
            Activation::Tanh => 0u8,
            Activation::Softplus => 1,
        };
        w.write_all(&[act, p.arch.residual_mode as u8, p.arch.baseline_berger as u8])?;
        w.write_all(&p.norm.input_scale.to_le_bytes())?;
        w.write_all(&p.norm.output_scale.to_le_bytes())?;
        w.write_all(&p.rng_seed.to_le_bytes())?;
        w.write_all(&self.step_count.to_le_bytes())?;
        w.write_all(&(p.theta.len() as u64).to_le_bytes())?;
        for v in &p.theta {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CplError::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(CplError::Format(format!("unsupported checkpoint version {version}")));
        }
        let stencil_radius = read_u64(r)? as usize;
        let n_hidden = read_u64(r)? as usize;
        if n_hidden > 64 {
            return Err(CplError::Format(format!("implausible hidden layer count {n_hidden}")));
        }
        let hidden_widths = (0..n_hidden).map(|_| read_u64(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut flags = [0u8; 3];
        r.read_exact(&mut flags)?;
        let activation = match flags[0] {
            0 => Activation::Tanh,
            1 => Activation::Softplus,
            other => return Err(CplError::Format(format!("unknown activation tag {other}"))),
        };
        let arch = ArchSpec { stencil_radius, hidden_widths, activation, residual_mode: flags[1] != 0, baseline_berger: flags[2] != 0 };
        let norm = Normalization { input_scale: read_f64(r)?, output_scale: read_f64(r)? };
        let rng_seed = read_u64(r)?;
        let step_count = read_u64(r)?;
        let n_params = read_u64(r)? as usize;
        if n_params != arch.param_count() {
            return Err(CplError::Format(format!(
                "parameter count {n_params} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let theta = (0..n_params).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        let params = PredictorParams { theta, arch, rng_seed, norm };
        params.check()?;
        Ok(Checkpoint { params, step_count })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn mesh(n: usize) -> Mesh1D {
        let dx = 1.0 / n as f64;
        Mesh1D::new(n, dx, Mesh1D::stable_dt(dx, 0.01, 1.5, 0.4), 0.01).unwrap()
    }

    fn field(m: &Mesh1D) -> GridState {
        GridState::from_fn(m, |x| (2.0 * PI * x).sin() + 0.3 * (6.0 * PI * x).cos() + 0.1)
    }

    #[test]
    fn init_examples() {
        let arch = ArchSpec { stencil_radius: 2, hidden_widths: vec![8], ..ArchSpec::default() };
        assert_eq!(arch.param_count(), 57);
        let a = init_params(&arch, 4).unwrap();
        let b = init_params(&arch, 4).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.theta.len(), 57);
        for seed in 0..100 {
            let p = init_params(&ArchSpec::default(), seed).unwrap();
            assert!(p.theta.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn zero_weights() {
        let m = mesh(32);
        let u = field(&m);
        let mut p = init_params(&ArchSpec::default(), 0).unwrap();
        p.theta.iter_mut().for_each(|v| *v = 0.0);
        let out = forward(&p, &u, &m).unwrap();
        assert_eq!(out.values, p.arch.scheme().step(&u, &m).unwrap().values);
        p.arch.residual_mode = false;
        assert!(forward(&p, &u, &m).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shift_equivariance() {
        let m = mesh(32);
        let u = field(&m);
        let mut p = init_params(&ArchSpec::default(), 3).unwrap();
        p.norm = Normalization { input_scale: 1.3, output_scale: 0.01 };
        let base = forward(&p, &u, &m).unwrap();
        for j in [1isize, 5, -7] {
            let a = forward(&p, &u.rotated(j), &m).unwrap();
            assert_eq!(a.values, base.rotated(j).values);
        }
    }

    fn check_backward(arch: ArchSpec) {
        let m = mesh(16);
        let u = field(&m);
        let mut p = init_params(&arch, 11).unwrap();
        // nonzero biases so every parameter is exercised
        for (i, v) in p.theta.iter_mut().enumerate() {
            if *v == 0.0 {
                *v = 0.1 * ((i as f64) * 0.7).sin();
            }
        }
        p.norm = Normalization { input_scale: 1.2, output_scale: 0.5 };
        let g: Vec<f64> = (0..16).map(|i| ((i * 3) as f64).cos()).collect();
        let (gt, gu) = backward(&p, &u, &m, &g);
        let obj = |p: &PredictorParams, s: &GridState| -> f64 {
            forward(p, s, &m).unwrap().values.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let mut worst = 0.0f64;
        for j in 0..p.theta.len() {
            let mut pp = p.clone();
            pp.theta[j] += h;
            let mut pm = p.clone();
            pm.theta[j] -= h;
            let fd = (obj(&pp, &u) - obj(&pm, &u)) / (2.0 * h);
            worst = worst.max((fd - gt[j]).abs() / gt[j].abs().max(1e-3));
        }
        for i in 0..16 {
            let mut up = u.clone();
            up.values[i] += h;
            let mut um = u.clone();
            um.values[i] -= h;
            let fd = (obj(&p, &up) - obj(&p, &um)) / (2.0 * h);
            worst = worst.max((fd - gu[i]).abs() / gu[i].abs().max(1e-3));
        }
        assert!(worst <= 1e-5, "max relative error {worst}");

        let zero = vec![0.0; 16];
        let (z1, z2) = backward(&p, &u, &m, &zero);
        assert!(z1.iter().chain(&z2).all(|&v| v == 0.0) || p.arch.residual_mode);
        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let (d1, d2) = backward(&p, &u, &m, &g2);
        assert!(d1.iter().zip(&gt).all(|(a, b)| *a == 2.0 * b));
        assert!(d2.iter().zip(&gu).all(|(a, b)| *a == 2.0 * b));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for activation in [Activation::Tanh, Activation::Softplus] {
            for residual_mode in [true, false] {
                check_backward(ArchSpec { stencil_radius: 2, hidden_widths: vec![8], activation, residual_mode, baseline_berger: true });
            }
        }
        check_backward(ArchSpec { stencil_radius: 1, hidden_widths: vec![6, 5], ..ArchSpec::default() });
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = mesh(16);
        let p = init_params(&ArchSpec { hidden_widths: vec![8], ..ArchSpec::default() }, 1).unwrap();
        let (a, b) = backward(&p, &field(&m), &m, &[0.0; 16]);
        assert!(a.iter().chain(&b).all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = init_params(&ArchSpec { activation: Activation::Softplus, ..ArchSpec::default() }, 9).unwrap();
        p.norm = Normalization { input_scale: 2.5, output_scale: 3e-4 };
        let ck = Checkpoint { params: p, step_count: 1234 };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&mut buf.as_slice()).unwrap(), ck);
        buf.truncate(buf.len() - 8);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
    }
}
