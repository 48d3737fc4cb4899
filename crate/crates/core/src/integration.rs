//! Attentive knowledge integration: residual single-head cross-attention from
//! a query onto its retrieved neighbors,
//!
//! ```text
//! out = f + Σ_k softmax_k( Q(f) · K(n_k) / sqrt(d) ) · V(n_k)
//! ```
//!
//! where each of `Q`, `K`, `V` is an affine `d → d` map followed by the SiLU
//! nonlinearity `g(x) = x · sigmoid(x)`. The image and text branches have the
//! same shape and separate parameters.
//!
//! Parameters live in one flat buffer laid out exactly like the MMLP
//! checkpoint: per branch (image first) `W_Q, b_Q, W_K, b_K, W_V, b_V`, weights
//! row-major.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector;

pub const MMLP_MAGIC: &[u8; 4] = b"MMLP";
pub const MMLP_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Image,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights uniform in `[-1/sqrt(d), 1/sqrt(d)]`, biases zero.
    ScaledUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationParams {
    dim: usize,
    data: Vec<f32>,
}

impl IntegrationParams {
    /// Parameters in one branch: `3 · (d² + d)`.
    pub fn branch_len(dim: usize) -> usize {
        3 * (dim * dim + dim)
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![0.0; 2 * Self::branch_len(dim)] }
    }

    pub fn init(seed: u64, dim: usize, scheme: InitScheme) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        let mut params = Self::zeros(dim);
        match scheme {
            InitScheme::ScaledUniform => {
                let bound = 1.0 / (dim as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for branch in [Branch::Image, Branch::Text] {
                    for proj in [Projection::Query, Projection::Key, Projection::Value] {
                        let (w, _) = params.affine_mut(branch, proj);
                        w.iter_mut().for_each(|x| *x = dist.sample(&mut rng));
                    }
                }
            }
        }
        Ok(params)
    }

    pub fn from_vec(dim: usize, data: Vec<f32>) -> Result<Self> {
        let expected = 2 * Self::branch_len(dim);
        if data.len() != expected {
            return Err(Error::ShapeMismatch { expected, found: data.len() });
        }
        if !vector::all_finite(&data) {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    fn branch_offset(&self, branch: Branch) -> usize {
        match branch {
            Branch::Image => 0,
            Branch::Text => Self::branch_len(self.dim),
        }
    }

    pub fn branch(&self, branch: Branch) -> BranchParams<'_> {
        let start = self.branch_offset(branch);
        BranchParams { dim: self.dim, data: &self.data[start..start + Self::branch_len(self.dim)] }
    }

    pub fn branch_mut(&mut self, branch: Branch) -> &mut [f32] {
        let start = self.branch_offset(branch);
        let len = Self::branch_len(self.dim);
        &mut self.data[start..start + len]
    }

    pub fn affine_mut(&mut self, branch: Branch, proj: Projection) -> (&mut [f32], &mut [f32]) {
        let d = self.dim;
        let slice = self.branch_mut(branch);
        let start = proj as usize * (d * d + d);
        let (w, b) = slice[start..start + d * d + d].split_at_mut(d * d);
        (w, b)
    }
}

/// Read-only view of one branch's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BranchParams<'a> {
    dim: usize,
    data: &'a [f32],
}

impl<'a> BranchParams<'a> {
    pub fn new(dim: usize, data: &'a [f32]) -> Result<Self> {
        let expected = IntegrationParams::branch_len(dim);
        if data.len() != expected {
            return Err(Error::ShapeMismatch { expected, found: data.len() });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }

    /// `(weight, bias)` of one projection.
    pub fn affine(&self, proj: Projection) -> (&'a [f32], &'a [f32]) {
        let d = self.dim;
        let start = proj as usize * (d * d + d);
        self.data[start..start + d * d + d].split_at(d * d)
    }

    fn project(&self, proj: Projection, x: &[f32], pre: &mut [f32], post: &mut [f32]) {
        let (w, b) = self.affine(proj);
        vector::matvec(w, x, pre);
        for ((p, o), bi) in pre.iter_mut().zip(post.iter_mut()).zip(b) {
            *p += bi;
            *o = silu(*p);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationOutput {
    pub integrated: Vec<f32>,
    /// Softmax weights over the neighbors, in neighbor order.
    pub attention: Vec<f32>,
}

/// Forward intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct Trace {
    q_pre: Vec<f32>,
    q: Vec<f32>,
    k_pre: Vec<f32>,
    k: Vec<f32>,
    v_pre: Vec<f32>,
    v: Vec<f32>,
    pub attention: Vec<f32>,
    pub output: Vec<f32>,
}

fn check_shapes<N: AsRef<[f32]>>(query: &[f32], neighbors: &[N], dim: usize) -> Result<()> {
    if neighbors.is_empty() {
        return Err(Error::invalid("at least one neighbor is required"));
    }
    if query.len() != dim {
        return Err(Error::ShapeMismatch { expected: dim, found: query.len() });
    }
    if let Some(n) = neighbors.iter().find(|n| n.as_ref().len() != dim) {
        return Err(Error::ShapeMismatch { expected: dim, found: n.as_ref().len() });
    }
    Ok(())
}

pub(crate) fn forward_trace<N: AsRef<[f32]>>(query: &[f32], neighbors: &[N], params: BranchParams<'_>) -> Trace {
    let d = params.dim;
    let kn = neighbors.len();
    let mut t = Trace {
        q_pre: vec![0.0; d],
        q: vec![0.0; d],
        k_pre: vec![0.0; kn * d],
        k: vec![0.0; kn * d],
        v_pre: vec![0.0; kn * d],
        v: vec![0.0; kn * d],
        attention: vec![0.0; kn],
        output: query.to_vec(),
    };
    params.project(Projection::Query, query, &mut t.q_pre, &mut t.q);
    let scale = 1.0 / (d as f32).sqrt();
    let mut scores = vec![0.0; kn];
    for (j, n) in neighbors.iter().enumerate() {
        let rows = j * d..(j + 1) * d;
        params.project(Projection::Key, n.as_ref(), &mut t.k_pre[rows.clone()], &mut t.k[rows.clone()]);
        params.project(Projection::Value, n.as_ref(), &mut t.v_pre[rows.clone()], &mut t.v[rows.clone()]);
        scores[j] = vector::dot(&t.q, &t.k[rows]) * scale;
    }
    t.attention = vector::softmax(&scores);
    for (a, v) in t.attention.iter().zip(t.v.chunks_exact(d)) {
        vector::axpy(*a, v, &mut t.output);
    }
    t
}

/// Gradient of `upstream · out` w.r.t. the branch parameters, accumulated
/// into `param_grad` (branch layout); returns the gradient w.r.t. the query.
pub(crate) fn backward_trace<N: AsRef<[f32]>>(
    trace: &Trace,
    query: &[f32],
    neighbors: &[N],
    params: BranchParams<'_>,
    upstream: &[f32],
    param_grad: &mut [f32],
) -> Vec<f32> {
    let d = params.dim;
    let scale = 1.0 / (d as f32).sqrt();
    let block = d * d + d;
    let (gq, rest) = param_grad.split_at_mut(block);
    let (gk, gv) = rest.split_at_mut(block);
    let (gq_w, gq_b) = gq.split_at_mut(d * d);
    let (gk_w, gk_b) = gk.split_at_mut(d * d);
    let (gv_w, gv_b) = gv.split_at_mut(d * d);

    // residual path
    let mut g_query = upstream.to_vec();

    // d out / d a_j = upstream · v_j ; softmax backward
    let g_attn: Vec<f32> = trace.v.chunks_exact(d).map(|v| vector::dot(upstream, v)).collect();
    let mean: f32 = trace.attention.iter().zip(&g_attn).map(|(a, g)| a * g).sum();
    let g_scores: Vec<f32> = trace.attention.iter().zip(&g_attn).map(|(a, g)| a * (g - mean)).collect();

    let mut g_q = vec![0.0; d];
    let mut g_pre = vec![0.0; d];
    for (j, n) in neighbors.iter().enumerate() {
        let n = n.as_ref();
        let rows = j * d..(j + 1) * d;
        let k = &trace.k[rows.clone()];
        vector::axpy(g_scores[j] * scale, k, &mut g_q);

        // key path
        let gs = g_scores[j] * scale;
        for ((gp, qi), kp) in g_pre.iter_mut().zip(&trace.q).zip(&trace.k_pre[rows.clone()]) {
            *gp = gs * qi * silu_grad(*kp);
        }
        vector::outer_acc(&g_pre, n, gk_w);
        vector::add_assign(gk_b, &g_pre);

        // value path
        let a = trace.attention[j];
        for ((gp, ui), vp) in g_pre.iter_mut().zip(upstream).zip(&trace.v_pre[rows]) {
            *gp = a * ui * silu_grad(*vp);
        }
        vector::outer_acc(&g_pre, n, gv_w);
        vector::add_assign(gv_b, &g_pre);
    }

    // query path
    for ((gp, gqi), qp) in g_pre.iter_mut().zip(&g_q).zip(&trace.q_pre) {
        *gp = gqi * silu_grad(*qp);
    }
    vector::outer_acc(&g_pre, query, gq_w);
    vector::add_assign(gq_b, &g_pre);
    let (wq, _) = params.affine(Projection::Query);
    vector::matvec_t_acc(wq, &g_pre, &mut g_query);
    g_query
}

/// Integrates `neighbors` into `query` with one branch's parameters.
pub fn integrate<N: AsRef<[f32]>>(
    query: &[f32],
    neighbors: &[N],
    params: BranchParams<'_>,
) -> Result<IntegrationOutput> {
    check_shapes(query, neighbors, params.dim)?;
    let t = forward_trace(query, neighbors, params);
    Ok(IntegrationOutput { integrated: t.output, attention: t.attention })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchGradient {
    /// Same layout as the branch parameters.
    pub params: Vec<f32>,
    pub query: Vec<f32>,
}

/// Exact gradients of `upstream · integrate(query, neighbors)` with respect to
/// the branch parameters and the query.
pub fn integrate_backward<N: AsRef<[f32]>>(
    query: &[f32],
    neighbors: &[N],
    params: BranchParams<'_>,
    upstream: &[f32],
) -> Result<BranchGradient> {
    check_shapes(query, neighbors, params.dim)?;
    if upstream.len() != params.dim {
        return Err(Error::ShapeMismatch { expected: params.dim, found: upstream.len() });
    }
    let t = forward_trace(query, neighbors, params);
    let mut grad = vec![0.0; IntegrationParams::branch_len(params.dim)];
    let g_query = backward_trace(&t, query, neighbors, params, upstream, &mut grad);
    Ok(BranchGradient { params: grad, query: g_query })
}

pub fn encode_params(params: &IntegrationParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + params.data.len() * 4);
    out.extend_from_slice(MMLP_MAGIC);
    out.extend_from_slice(&MMLP_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.dim as u32).to_le_bytes());
    for x in &params.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<IntegrationParams> {
    if bytes.len() < 10 || &bytes[..4] != MMLP_MAGIC {
        return Err(Error::MalformedHeader("not an MMLP file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MMLP_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported MMLP version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::MalformedHeader("dimension is zero".into()));
    }
    let payload = &bytes[10..];
    let expected = 2 * IntegrationParams::branch_len(dim) * 4;
    if payload.len() != expected {
        if payload.len().is_multiple_of(4) {
            let floats = payload.len() / 4;
            // 6(d² + d) = floats; solve for d when the payload is self-consistent
            let found = (1..=floats).find(|&d| 6 * (d * d + d) >= floats).unwrap_or(0);
            if 6 * (found * found + found) == floats {
                return Err(Error::DimensionMismatch { declared: dim, found });
            }
        }
        return Err(Error::TruncatedPayload { expected, found: payload.len() });
    }
    let data: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { item: i });
    }
    IntegrationParams::from_vec(dim, data)
}

pub fn save_params(params: &IntegrationParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<IntegrationParams> {
    decode_params(&fs::read(path)?)
}
