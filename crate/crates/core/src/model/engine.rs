//! Packed-batch forward pass and manual backpropagation.
//!
//! A batch is a set of variable-length sequences concatenated row-wise into
//! one `N × width` matrix. Position-wise operations run on the whole matrix;
//! causal attention runs per sequence segment.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};

use super::{Adapter, ForwardTrace, LayerTrace, ModelState, ModuleId, Routing, TrainingExample};
use crate::error::{DmeaError, Result};
use crate::numerics::{column_sums, softmax_unchecked};
use crate::taskgen::TokenId;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Which losses an example contributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSelector {
    Task,
    Data,
    /// `task + mu · data`
    Train { mu: f64 },
}

/// Parameters that receive gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trainable {
    pub backbone: bool,
    pub modules: BTreeSet<ModuleId>,
    /// Gradients for the coefficients of groups that request them.
    pub coefficients: bool,
}

impl Trainable {
    pub fn nothing() -> Trainable {
        Trainable::default()
    }

    pub fn modules(ids: impl IntoIterator<Item = ModuleId>, coefficients: bool) -> Trainable {
        Trainable {
            backbone: false,
            modules: ids.into_iter().collect(),
            coefficients,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradStore {
    pub backbone: Option<Vec<f64>>,
    pub modules: BTreeMap<ModuleId, Vec<f64>>,
    pub coefficients: Option<Vec<Vec<f64>>>,
}

impl GradStore {
    pub fn squared_norm(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        self.backbone.as_deref().map_or(0.0, sq)
            + self.modules.values().map(|v| sq(v)).sum::<f64>()
            + self.coefficients.iter().flatten().map(|v| sq(v)).sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    /// Euclidean norm over the given modules' parameters only.
    pub fn module_norm(&self, ids: &BTreeSet<ModuleId>) -> f64 {
        self.modules
            .iter()
            .filter(|(id, _)| ids.contains(id))
            .map(|(_, v)| v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.backbone.iter().flatten().all(|v| v.is_finite())
            && self.modules.values().flatten().all(|v| v.is_finite())
            && self.coefficients.iter().flatten().flatten().all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &GradStore, scale: f64) {
        if let Some(ob) = &other.backbone {
            let b = self.backbone.get_or_insert_with(|| vec![0.0; ob.len()]);
            b.iter_mut().zip(ob).for_each(|(a, x)| *a += scale * x);
        }
        for (id, og) in &other.modules {
            let g = self.modules.entry(*id).or_insert_with(|| vec![0.0; og.len()]);
            g.iter_mut().zip(og).for_each(|(a, x)| *a += scale * x);
        }
        if let Some(oc) = &other.coefficients {
            let c = self
                .coefficients
                .get_or_insert_with(|| oc.iter().map(|l| vec![0.0; l.len()]).collect());
            for (cl, ol) in c.iter_mut().zip(oc) {
                cl.iter_mut().zip(ol).for_each(|(a, x)| *a += scale * x);
            }
        }
    }
}

/// One token sequence with its loss region and weight.
#[derive(Debug, Clone)]
pub struct WeightedSequence<'a> {
    pub tokens: &'a [TokenId],
    /// First position whose token is predicted (needs ≥ 1).
    pub predict_from: usize,
    pub weight: f64,
}

/// Sequences sharing one routing.
#[derive(Debug, Clone)]
pub struct ObjectiveGroup<'a> {
    pub routing: &'a Routing,
    pub sequences: Vec<WeightedSequence<'a>>,
    /// Whether this group's routing coefficients receive gradients.
    pub coefficient_grads: bool,
}

impl<'a> ObjectiveGroup<'a> {
    pub fn from_examples(
        routing: &'a Routing,
        examples: impl IntoIterator<Item = &'a TrainingExample>,
        selector: LossSelector,
        weight: f64,
        coefficient_grads: bool,
    ) -> ObjectiveGroup<'a> {
        let mut sequences = Vec::new();
        for ex in examples {
            push_example(&mut sequences, ex, selector, weight);
        }
        ObjectiveGroup {
            routing,
            sequences,
            coefficient_grads,
        }
    }

    pub fn push(&mut self, example: &'a TrainingExample, selector: LossSelector, weight: f64) {
        push_example(&mut self.sequences, example, selector, weight);
    }
}

fn push_example<'a>(out: &mut Vec<WeightedSequence<'a>>, ex: &'a TrainingExample, sel: LossSelector, w: f64) {
    let task = WeightedSequence {
        tokens: &ex.task.tokens,
        predict_from: ex.task.answer_start,
        weight: w,
    };
    let data = |scale: f64| WeightedSequence {
        tokens: &ex.data.tokens,
        predict_from: 1,
        weight: w * scale,
    };
    match sel {
        LossSelector::Task => out.push(task),
        LossSelector::Data => out.push(data(1.0)),
        LossSelector::Train { mu } => {
            out.push(task);
            if mu != 0.0 {
                out.push(data(mu));
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum HeadRows {
    All,
    Rows(Vec<usize>),
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
struct MemberCache {
    id: ModuleId,
    pre: Array2<f64>,
    act: Array2<f64>,
    out: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LnCache,
    a1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    ln2: LnCache,
    a2: Array2<f64>,
    u: Array2<f64>,
    gact: Array2<f64>,
    x_ffn: Array2<f64>,
    members: Vec<MemberCache>,
    weights: Vec<f64>,
    x_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Pass {
    segments: Vec<(usize, usize)>,
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    af: Array2<f64>,
    head_rows: Vec<usize>,
    pub(crate) logits: Array2<f64>,
}

impl Pass {
    /// Final-block output at the last row of every segment (`segments × width`).
    pub(crate) fn segment_last_hidden(&self) -> Array2<f64> {
        let rows: Vec<usize> = self.segments.iter().map(|&(s, l)| s + l - 1).collect();
        self.layers.last().expect("at least one layer").x_out.select(Axis(0), &rows)
    }

    pub(crate) fn into_trace(self) -> ForwardTrace {
        let final_hidden = self.layers.last().map(|l| l.x_out.clone()).unwrap_or_default();
        let layers = self
            .layers
            .into_iter()
            .map(|lc| LayerTrace {
                member_outputs: lc.members.iter().map(|mc| &lc.x_ffn + &mc.out).collect(),
                fused_output: lc.x_out,
            })
            .collect();
        ForwardTrace {
            layers,
            final_hidden,
            logits: self.logits,
        }
    }
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (n, m) = x.dim();
    let mut xhat = Array2::zeros((n, m));
    let mut y = Array2::zeros((n, m));
    let mut rstd = Vec::with_capacity(n);
    for (r, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / m as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let mut xr = xhat.row_mut(r);
        let mut yr = y.row_mut(r);
        for j in 0..m {
            let h = (row[j] - mean) * rs;
            xr[j] = h;
            yr[j] = h * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns dL/dx and accumulates gamma/beta grads when requested.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Array2<f64> {
    let (n, m) = dy.dim();
    if let Some((gg, gb)) = grads {
        for r in 0..n {
            for j in 0..m {
                gg[j] += dy[[r, j]] * cache.xhat[[r, j]];
                gb[j] += dy[[r, j]];
            }
        }
    }
    let mut dx = Array2::zeros((n, m));
    for r in 0..n {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..m {
            let d = dy[[r, j]] * g[j];
            mean_d += d;
            mean_dx += d * cache.xhat[[r, j]];
        }
        mean_d /= m as f64;
        mean_dx /= m as f64;
        let rs = cache.rstd[r];
        for j in 0..m {
            let d = dy[[r, j]] * g[j];
            dx[[r, j]] = rs * (d - mean_d - cache.xhat[[r, j]] * mean_dx);
        }
    }
    dx
}

fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

fn adapter_forward(adapter: &Adapter, x: &Array2<f64>) -> MemberCache {
    let pre = linear(x, adapter.down_w(), adapter.down_b());
    let act = pre.mapv(gelu);
    let out = linear(&act, adapter.up_w(), adapter.up_b());
    MemberCache {
        id: adapter.id,
        pre,
        act,
        out,
    }
}

pub(crate) fn forward_packed(state: &ModelState, seqs: &[&[TokenId]], routing: &Routing, head: HeadRows) -> Pass {
    let bb = &state.backbone;
    let cfg = &bb.config;
    let p = &bb.params[..];
    let lay = &bb.layout;
    let (m, nh, dh) = (cfg.hidden_width, cfg.num_heads, cfg.head_width());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut segments = Vec::with_capacity(seqs.len());
    let mut tokens = Vec::new();
    for s in seqs {
        segments.push((tokens.len(), s.len()));
        tokens.extend_from_slice(s);
    }
    let n = tokens.len();

    let tok_emb = lay.tok_emb.mat(p);
    let pos_emb = lay.pos_emb.mat(p);
    let mut x = Array2::zeros((n, m));
    for &(start, len) in &segments {
        for i in 0..len {
            let mut row = x.row_mut(start + i);
            row.assign(&tok_emb.row(tokens[start + i] as usize));
            row += &pos_emb.row(i);
        }
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for (l, bl) in lay.blocks.iter().enumerate() {
        let (a1, ln1) = layer_norm(&x, bl.ln1_g.vec(p), bl.ln1_b.vec(p));
        let qkv = linear(&a1, bl.qkv_w.mat(p), bl.qkv_b.vec(p));
        let mut att = Array2::zeros((n, m));
        let mut probs = Vec::with_capacity(segments.len() * nh);
        for &(start, len) in &segments {
            let rows = start..start + len;
            for h in 0..nh {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), m + h * dh..m + (h + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * m + h * dh..2 * m + (h + 1) * dh]);
                let mut sc = q.dot(&k.t());
                for i in 0..len {
                    let mut row = sc.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = 0.0;
                    for j in 0..=i {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    }
                    for j in 0..=i {
                        row[j] /= sum;
                    }
                    for j in i + 1..len {
                        row[j] = 0.0;
                    }
                }
                let out = sc.dot(&v);
                att.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&out);
                probs.push(sc);
            }
        }
        let mut x_mid = linear(&att, bl.proj_w.mat(p), bl.proj_b.vec(p));
        x_mid += &x;
        let (a2, ln2) = layer_norm(&x_mid, bl.ln2_g.vec(p), bl.ln2_b.vec(p));
        let u = linear(&a2, bl.fc1_w.mat(p), bl.fc1_b.vec(p));
        let gact = u.mapv(gelu);
        let mut x_ffn = linear(&gact, bl.fc2_w.mat(p), bl.fc2_b.vec(p));
        x_ffn += &x_mid;

        let route = &routing.layers[l];
        let weights = if route.modules.is_empty() {
            Vec::new()
        } else {
            softmax_unchecked(&route.coefficients)
        };
        let members: Vec<MemberCache> = route
            .modules
            .iter()
            .map(|id| adapter_forward(&state.adapters[id], &x_ffn))
            .collect();
        let mut x_out = x_ffn.clone();
        for (mc, w) in members.iter().zip(&weights) {
            x_out.scaled_add(*w, &mc.out);
        }
        x = x_out.clone();
        layers.push(LayerCache {
            ln1,
            a1,
            qkv,
            probs,
            att,
            ln2,
            a2,
            u,
            gact,
            x_ffn,
            members,
            weights,
            x_out,
        });
    }

    let (af, lnf) = layer_norm(&x, lay.lnf_g.vec(p), lay.lnf_b.vec(p));
    let head_rows = match head {
        HeadRows::All => (0..n).collect(),
        HeadRows::Rows(r) => r,
    };
    let af_rows = af.select(Axis(0), &head_rows);
    let logits = linear(&af_rows, lay.head_w.mat(p), lay.head_b.vec(p));

    Pass {
        segments,
        tokens,
        layers,
        lnf,
        af,
        head_rows,
        logits,
    }
}

fn acc_mat_mul(a: ArrayView2<f64>, b: ArrayView2<f64>, mut dst: ArrayViewMut2<f64>) {
    general_mat_mul(1.0, &a, &b, 1.0, &mut dst);
}

fn acc_vec(dst: &mut [f64], src: ArrayView1<f64>) {
    dst.iter_mut().zip(src.iter()).for_each(|(d, s)| *d += s);
}

/// Lowest layer whose parameters (or slot coefficients) need gradients.
fn lowest_trainable_layer(routing: &Routing, trainable: &Trainable, coefficient_grads: bool) -> Option<usize> {
    if trainable.backbone {
        return Some(0);
    }
    routing.layers.iter().position(|l| {
        (coefficient_grads && trainable.coefficients && !l.modules.is_empty())
            || l.modules.iter().any(|id| trainable.modules.contains(id))
    })
}

fn backward(
    state: &ModelState,
    pass: &Pass,
    dlogits: &Array2<f64>,
    routing: &Routing,
    trainable: &Trainable,
    coefficient_grads: bool,
    grads: &mut GradStore,
) {
    let Some(lowest) = lowest_trainable_layer(routing, trainable, coefficient_grads) else {
        return;
    };
    let bb = &state.backbone;
    let cfg = &bb.config;
    let p = &bb.params[..];
    let lay = &bb.layout;
    let (m, nh, dh) = (cfg.hidden_width, cfg.num_heads, cfg.head_width());
    let scale = 1.0 / (dh as f64).sqrt();
    let n = pass.tokens.len();
    let want_coeffs = coefficient_grads && trainable.coefficients;

    let mut gb = if trainable.backbone {
        Some(grads.backbone.take().unwrap_or_else(|| vec![0.0; lay.total]))
    } else {
        None
    };

    let head_w = lay.head_w.mat(p);
    let d_rows = dlogits.dot(&head_w.t());
    let mut d_af = Array2::zeros((n, m));
    for (i, &r) in pass.head_rows.iter().enumerate() {
        let mut row = d_af.row_mut(r);
        row += &d_rows.row(i);
    }
    if let Some(g) = gb.as_mut() {
        let af_rows = pass.af.select(Axis(0), &pass.head_rows);
        acc_mat_mul(af_rows.t(), dlogits.view(), lay.head_w.mat_mut(g));
        acc_vec(&mut g[lay.head_b.range()], column_sums(dlogits.view()).view());
    }
    let mut dx = {
        let ln_grads = gb.as_mut().map(|g| split_pair(g, lay.lnf_g.range(), lay.lnf_b.range()));
        layer_norm_backward(&d_af, &pass.lnf, lay.lnf_g.vec(p), ln_grads)
    };

    if want_coeffs && grads.coefficients.is_none() {
        grads.coefficients = Some(routing.layers.iter().map(|l| vec![0.0; l.modules.len()]).collect());
    }

    for l in (lowest..cfg.num_layers).rev() {
        let lc = &pass.layers[l];
        let bl = &lay.blocks[l];
        let need_input = l > lowest || trainable.backbone;

        // adapter slot: x_out = x_ffn + Σ w_t o_t
        let mut dx_ffn = if need_input { dx.clone() } else { Array2::zeros((0, 0)) };
        if !lc.members.is_empty() {
            let dots: Vec<f64> = lc.members.iter().map(|mc| (&dx * &mc.out).sum()).collect();
            if want_coeffs {
                let mean: f64 = lc.weights.iter().zip(&dots).map(|(w, d)| w * d).sum();
                let cg = &mut grads.coefficients.as_mut().unwrap()[l];
                for t in 0..lc.members.len() {
                    cg[t] += lc.weights[t] * (dots[t] - mean);
                }
            }
            for (mc, &w) in lc.members.iter().zip(&lc.weights) {
                let adapter = &state.adapters[&mc.id];
                let train_this = trainable.modules.contains(&mc.id);
                if !train_this && !need_input {
                    continue;
                }
                let d_out = &dx * w;
                let de = d_out.dot(&adapter.up_w().t());
                let mut dpre = de;
                dpre.zip_mut_with(&mc.pre, |d, &z| *d *= gelu_grad(z));
                if train_this {
                    let offs = adapter.grad_offsets();
                    let g = grads
                        .modules
                        .entry(mc.id)
                        .or_insert_with(|| vec![0.0; adapter.params.len()]);
                    let (mb, b) = (adapter.width, adapter.bottleneck);
                    {
                        let dst = ArrayViewMut2::from_shape((mb, b), &mut g[offs[0]..offs[1]]).unwrap();
                        acc_mat_mul(lc.x_ffn.t(), dpre.view(), dst);
                    }
                    acc_vec(&mut g[offs[1]..offs[2]], column_sums(dpre.view()).view());
                    {
                        let dst = ArrayViewMut2::from_shape((b, mb), &mut g[offs[2]..offs[3]]).unwrap();
                        acc_mat_mul(mc.act.t(), d_out.view(), dst);
                    }
                    acc_vec(&mut g[offs[3]..], column_sums(d_out.view()).view());
                }
                if need_input {
                    acc_mat_mul(dpre.view(), adapter.down_w().t(), dx_ffn.view_mut());
                }
            }
        }
        if !need_input {
            break;
        }

        // feed-forward: x_ffn = x_mid + gelu(a2·W1 + b1)·W2 + b2
        let fc2_w = bl.fc2_w.mat(p);
        let fc1_w = bl.fc1_w.mat(p);
        if let Some(g) = gb.as_mut() {
            acc_mat_mul(lc.gact.t(), dx_ffn.view(), bl.fc2_w.mat_mut(g));
            acc_vec(&mut g[bl.fc2_b.range()], column_sums(dx_ffn.view()).view());
        }
        let mut du = dx_ffn.dot(&fc2_w.t());
        du.zip_mut_with(&lc.u, |d, &z| *d *= gelu_grad(z));
        if let Some(g) = gb.as_mut() {
            acc_mat_mul(lc.a2.t(), du.view(), bl.fc1_w.mat_mut(g));
            acc_vec(&mut g[bl.fc1_b.range()], column_sums(du.view()).view());
        }
        let da2 = du.dot(&fc1_w.t());
        let mut dx_mid = {
            let ln_grads = gb.as_mut().map(|g| split_pair(g, bl.ln2_g.range(), bl.ln2_b.range()));
            layer_norm_backward(&da2, &lc.ln2, bl.ln2_g.vec(p), ln_grads)
        };
        dx_mid += &dx_ffn;

        // attention: x_mid = x_in + att·Wo + bo
        let proj_w = bl.proj_w.mat(p);
        if let Some(g) = gb.as_mut() {
            acc_mat_mul(lc.att.t(), dx_mid.view(), bl.proj_w.mat_mut(g));
            acc_vec(&mut g[bl.proj_b.range()], column_sums(dx_mid.view()).view());
        }
        let datt = dx_mid.dot(&proj_w.t());
        let mut dqkv = Array2::zeros((n, 3 * m));
        for (si, &(start, len)) in pass.segments.iter().enumerate() {
            let rows = start..start + len;
            for h in 0..nh {
                let pr = &lc.probs[si * nh + h];
                let q = lc.qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = lc.qkv.slice(s![rows.clone(), m + h * dh..m + (h + 1) * dh]);
                let v = lc.qkv.slice(s![rows.clone(), 2 * m + h * dh..2 * m + (h + 1) * dh]);
                let da = datt.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let dp = da.dot(&v.t());
                let dv = pr.t().dot(&da);
                let mut ds = Array2::zeros((len, len));
                for i in 0..len {
                    let mut r = 0.0;
                    for j in 0..=i {
                        r += dp[[i, j]] * pr[[i, j]];
                    }
                    for j in 0..=i {
                        ds[[i, j]] = pr[[i, j]] * (dp[[i, j]] - r) * scale;
                    }
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), m + h * dh..m + (h + 1) * dh]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * m + h * dh..2 * m + (h + 1) * dh]).assign(&dv);
            }
        }
        let qkv_w = bl.qkv_w.mat(p);
        if let Some(g) = gb.as_mut() {
            acc_mat_mul(lc.a1.t(), dqkv.view(), bl.qkv_w.mat_mut(g));
            acc_vec(&mut g[bl.qkv_b.range()], column_sums(dqkv.view()).view());
        }
        let da1 = dqkv.dot(&qkv_w.t());
        let mut dx_in = {
            let ln_grads = gb.as_mut().map(|g| split_pair(g, bl.ln1_g.range(), bl.ln1_b.range()));
            layer_norm_backward(&da1, &lc.ln1, bl.ln1_g.vec(p), ln_grads)
        };
        dx_in += &dx_mid;
        dx = dx_in;
    }

    if let Some(mut g) = gb {
        for &(start, len) in &pass.segments {
            for i in 0..len {
                let tok = pass.tokens[start + i] as usize;
                let src = dx.row(start + i);
                let te = lay.tok_emb.offset + tok * m;
                let pe = lay.pos_emb.offset + i * m;
                for j in 0..m {
                    g[te + j] += src[j];
                    g[pe + j] += src[j];
                }
            }
        }
        grads.backbone = Some(g);
    }
}

fn split_pair(
    g: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

/// Weighted next-token loss over all groups, with gradients when requested.
pub(crate) fn evaluate(
    state: &ModelState,
    groups: &[ObjectiveGroup<'_>],
    trainable: &Trainable,
    want_grads: bool,
) -> Result<(f64, GradStore)> {
    let mut total = 0.0;
    let mut grads = GradStore::default();
    for group in groups {
        if group.sequences.is_empty() {
            continue;
        }
        let seqs: Vec<&[TokenId]> = group.sequences.iter().map(|s| s.tokens).collect();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        let mut start = 0;
        for s in &group.sequences {
            if s.predict_from == 0 || s.predict_from >= s.tokens.len() {
                return Err(DmeaError::InvalidSample("empty prediction region".into()));
            }
            for j in s.predict_from..s.tokens.len() {
                rows.push(start + j - 1);
                targets.push(s.tokens[j] as usize);
                weights.push(s.weight);
            }
            start += s.tokens.len();
        }
        let pass = forward_packed(state, &seqs, group.routing, HeadRows::Rows(rows));
        let mut dlogits = pass.logits.clone();
        for (i, mut row) in dlogits.rows_mut().into_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let lse = max + sum.ln();
            total += weights[i] * (lse - pass.logits[[i, targets[i]]]);
            row.mapv_inplace(|v| weights[i] * v / sum);
            row[targets[i]] -= weights[i];
        }
        if !total.is_finite() {
            return Err(DmeaError::NumericalFailure("loss is not finite".into()));
        }
        if want_grads {
            backward(state, &pass, &dlogits, group.routing, trainable, group.coefficient_grads, &mut grads);
        }
    }
    if want_grads && !grads.is_finite() {
        return Err(DmeaError::NumericalFailure("gradient is not finite".into()));
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_differences() {
        for x in [-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
