//! Parameters and layers.
//!
//! A [`ParamStore`] owns every tensor a model learns (plus non-trainable
//! buffers like batch-norm running statistics), addressed by stable path
//! names so checkpoints can round-trip. A [`Session`] binds parameters into
//! a fresh [`Graph`] for one forward/backward pass and carries the
//! train/eval mode.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {}",
            name
        );
        value.requires_grad = trainable;
        value.grad = None;
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, trainable });
        ParamId(id)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.add(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        debug_assert_eq!(self.entries[id.0].value.shape(), value.shape());
        let trainable = self.entries[id.0].trainable;
        let mut value = value;
        value.requires_grad = trainable;
        self.entries[id.0].value = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> &ParamEntry {
        &self.entries[index]
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut ParamEntry {
        &mut self.entries[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    /// Number of trainable scalar parameters.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.iter_mut() {
            if e.trainable {
                e.value.zero_grad();
            }
        }
    }

    /// Accumulate harvested per-pass gradients into the persistent buffers.
    pub fn apply_grads(&mut self, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            let e = &mut self.entries[id.0];
            let buf = e.value.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, t) in updates {
            self.set(id, t);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active. The salt seeds dropout masks.
    Train { rng_salt: u64 },
    /// Frozen statistics, dropout off.
    Eval,
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// One forward/backward pass: a graph plus the parameter bindings made on it.
pub struct Session<'a> {
    pub graph: Graph,
    pub mode: Mode,
    params: &'a ParamStore,
    bound: Vec<Option<Value>>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Session {
            graph: Graph::new(),
            mode,
            params,
            bound: vec![None; params.len()],
            buffer_updates: Vec::new(),
        }
    }

    /// Bind a parameter into the graph (at most once per session).
    pub fn param(&mut self, id: ParamId) -> Value {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let mut t = self.params.get(id).clone();
        t.grad = None;
        let v = self.graph.input(t);
        self.bound[id.index()] = Some(v);
        v
    }

    /// Read a buffer without recording it on the graph.
    pub fn buffer_value(&self, id: ParamId) -> &Tensor {
        self.params.get(id)
    }

    /// Schedule a buffer write to apply after the pass.
    pub fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    /// Tear down the session, harvesting parameter gradients (if backward
    /// ran) and pending buffer updates. Ends the borrow of the store.
    pub fn finish(self) -> SessionReport {
        let mut param_grads = Vec::new();
        for (idx, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if self.params.entry(idx).trainable {
                    if let Some(g) = self.graph.grad(*v) {
                        param_grads.push((ParamId(idx), g.to_vec()));
                    }
                }
            }
        }
        SessionReport {
            graph: self.graph,
            param_grads,
            buffer_updates: self.buffer_updates,
        }
    }
}

pub struct SessionReport {
    pub graph: Graph,
    pub param_grads: Vec<(ParamId, Vec<f64>)>,
    pub buffer_updates: Vec<(ParamId, Tensor)>,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// 3x3 (or kxk) convolution with SAME padding.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = Tensor::randn(&[k, k, in_c, out_c], he_std(k * k * in_c), rng);
        Conv2d {
            w: ps.add(format!("{name}.w"), w, true),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[out_c]), true),
            stride,
            dilation: 1,
        }
    }

    pub fn forward(&self, ses: &mut Session, x: Value) -> Result<Value> {
        let w = ses.param(self.w);
        let b = ses.param(self.b);
        ses.graph.conv2d(x, w, b, self.stride, self.dilation)
    }
}

/// Depthwise 3x3 with dilation, then pointwise 1x1: the separable
/// convolution used by the multi-scale fusion branches.
pub struct SeparableConv2d {
    pub dw: ParamId,
    pub pw: Conv2d,
    pub dilation: usize,
}

impl SeparableConv2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, dilation: usize, rng: &mut Rng) -> Self {
        let dw = Tensor::randn(&[3, 3, channels], he_std(9), rng);
        SeparableConv2d {
            dw: ps.add(format!("{name}.dw"), dw, true),
            pw: Conv2d::new(ps, &format!("{name}.pw"), channels, channels, 1, 1, rng),
            dilation,
        }
    }

    pub fn forward(&self, ses: &mut Session, x: Value) -> Result<Value> {
        let dw = ses.param(self.dw);
        let mid = ses.graph.depthwise_conv2d(x, dw, self.dilation)?;
        self.pw.forward(ses, mid)
    }
}

/// Transposed 2x2 stride-2 convolution (spatial doubling).
pub struct ConvTranspose2 {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvTranspose2 {
    pub fn new(ps: &mut ParamStore, name: &str, in_c: usize, out_c: usize, rng: &mut Rng) -> Self {
        let w = Tensor::randn(&[2, 2, in_c, out_c], he_std(4 * in_c), rng);
        ConvTranspose2 {
            w: ps.add(format!("{name}.w"), w, true),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[out_c]), true),
        }
    }

    pub fn forward(&self, ses: &mut Session, x: Value) -> Result<Value> {
        let w = ses.param(self.w);
        let b = ses.param(self.b);
        ses.graph.conv_transpose2(x, w, b)
    }
}

/// Fully connected layer on (B, in) features.
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(ps: &mut ParamStore, name: &str, in_f: usize, out_f: usize, rng: &mut Rng) -> Self {
        let w = Tensor::randn(&[in_f, out_f], he_std(in_f), rng);
        Dense {
            w: ps.add(format!("{name}.w"), w, true),
            b: ps.add(format!("{name}.b"), Tensor::zeros(&[out_f]), true),
        }
    }

    pub fn forward(&self, ses: &mut Session, x: Value) -> Result<Value> {
        let w = ses.param(self.w);
        let b = ses.param(self.b);
        ses.graph.dense(x, w, b)
    }
}

/// Batch normalization over all axes except the last (channels/features).
///
/// Training uses batch statistics and folds them into the running buffers
/// with momentum 0.9; evaluation is the frozen affine map.
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, features: usize) -> Self {
        BatchNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[features]), true),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[features]), true),
            running_mean: ps.buffer(format!("{name}.running_mean"), Tensor::zeros(&[features])),
            running_var: ps.buffer(format!("{name}.running_var"), Tensor::ones(&[features])),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ses: &mut Session, x: Value) -> Result<Value> {
        let shape = ses.graph.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("batch_norm", "needs rank >= 1"));
        }
        let axes: Vec<usize> = (0..shape.len() - 1).collect();
        let gamma = self.bound_affine(ses, &shape)?;
        match ses.mode {
            Mode::Train { .. } => {
                let g = &mut ses.graph;
                let m = g.reduce_mean(x, &axes, true)?;
                let mb = g.broadcast_to(m, shape.clone())?;
                let centered = g.sub(x, mb)?;
                let sq = g.mul(centered, centered)?;
                let v = g.reduce_mean(sq, &axes, true)?;
                let ve = g.add_scalar(v, self.eps);
                let sd = g.sqrt(ve);
                let sdb = g.broadcast_to(sd, shape.clone())?;
                let xhat = g.div(centered, sdb)?;
                let out = apply_affine(g, xhat, gamma, &shape)?;
                // fold batch stats into the running buffers
                let batch_mean = ses.graph.detach(m).into_data();
                let batch_var = ses.graph.detach(v).into_data();
                self.update_running(ses, batch_mean, batch_var);
                Ok(out)
            }
            Mode::Eval => {
                let rm = ses.buffer_value(self.running_mean).clone();
                let rv = ses.buffer_value(self.running_var).clone();
                let features = rm.len();
                let inv: Vec<f64> = rv.data().iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let g = &mut ses.graph;
                let rm_c = g.constant(rm);
                let inv_c = g.constant(Tensor::new(vec![features], inv)?);
                let rm_b = g.broadcast_to(rm_c, shape.clone())?;
                let centered = g.sub(x, rm_b)?;
                let inv_b = g.broadcast_to(inv_c, shape.clone())?;
                let xhat = g.mul(centered, inv_b)?;
                apply_affine(g, xhat, gamma, &shape)
            }
        }
    }

    fn bound_affine(&self, ses: &mut Session, _shape: &[usize]) -> Result<(Value, Value)> {
        let gamma = ses.param(self.gamma);
        let beta = ses.param(self.beta);
        Ok((gamma, beta))
    }

    fn update_running(&self, ses: &mut Session, batch_mean: Vec<f64>, batch_var: Vec<f64>) {
        let m = self.momentum;
        let old_mean = ses.buffer_value(self.running_mean).clone();
        let old_var = ses.buffer_value(self.running_var).clone();
        let new_mean: Vec<f64> = old_mean
            .data()
            .iter()
            .zip(&batch_mean)
            .map(|(o, b)| m * o + (1.0 - m) * b)
            .collect();
        let new_var: Vec<f64> = old_var
            .data()
            .iter()
            .zip(&batch_var)
            .map(|(o, b)| m * o + (1.0 - m) * b)
            .collect();
        let features = new_mean.len();
        ses.push_update(
            self.running_mean,
            Tensor::new(vec![features], new_mean).expect("running mean shape"),
        );
        ses.push_update(
            self.running_var,
            Tensor::new(vec![features], new_var).expect("running var shape"),
        );
    }

    /// Overwrite running statistics (identity by default after new()).
    pub fn set_running(&self, ps: &mut ParamStore, mean: Tensor, var: Tensor) {
        ps.set(self.running_mean, mean);
        ps.set(self.running_var, var);
    }
}

fn apply_affine(g: &mut Graph, xhat: Value, (gamma, beta): (Value, Value), shape: &[usize]) -> Result<Value> {
    let gb = g.broadcast_to(gamma, shape.to_vec())?;
    let bb = g.broadcast_to(beta, shape.to_vec())?;
    let scaled = g.mul(xhat, gb)?;
    g.add(scaled, bb)
}

/// Inverted dropout; identity in eval mode. Masks are drawn from a stream
/// keyed by the session's rng salt and this layer's stream id, so a given
/// (seed, epoch, batch) always sees the same mask.
pub struct Dropout {
    pub p: f64,
    pub stream_id: u64,
}

impl Dropout {
    pub fn new(p: f64, stream_id: u64) -> Self {
        Dropout { p, stream_id }
    }

    pub fn forward(&self, ses: &mut Session, x: Value) -> Result<Value> {
        match ses.mode {
            Mode::Eval => Ok(x),
            Mode::Train { rng_salt } => {
                if self.p == 0.0 {
                    return Ok(x);
                }
                let shape = ses.graph.shape(x).to_vec();
                let n: usize = shape.iter().product();
                let mut rng = Rng::substream(rng_salt, self.stream_id);
                let keep = 1.0 - self.p;
                let data: Vec<f64> = (0..n)
                    .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = ses.graph.constant(Tensor::new(shape, data)?);
                ses.graph.mul(x, mask)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_rejects_nothing_but_tracks_counts() {
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from(0);
        let a = ps.add("a", Tensor::randn(&[2, 3], 1.0, &mut rng), true);
        let _b = ps.buffer("b", Tensor::zeros(&[4]));
        assert_eq!(ps.num_trainable(), 6);
        assert!(ps.get(a).requires_grad);
        assert_eq!(ps.find("b").map(|i| i.index()), Some(1));
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from(1);
        let id = ps.add("w", Tensor::randn(&[2], 1.0, &mut rng), true);
        let mut ses = Session::new(&ps, Mode::Eval);
        let v1 = ses.param(id);
        let v2 = ses.param(id);
        assert_eq!(v1, v2);
        assert_eq!(ses.graph.len(), 1);
    }

    #[test]
    fn grads_flow_back_to_store() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let mut ses = Session::new(&ps, Mode::Eval);
        let w = ses.param(id);
        let sq = ses.graph.mul(w, w).unwrap();
        let loss = ses.graph.sum_all(sq);
        ses.graph.backward(loss).unwrap();
        let report = ses.finish();
        ps.zero_grads();
        ps.apply_grads(&report.param_grads);
        assert_eq!(ps.get(id).grad.as_deref().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn batchnorm_eval_is_affine_identity_with_default_buffers() {
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, "bn", 2);
        let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.0, -0.5, 1.0]).unwrap();
        let mut ses = Session::new(&ps, Mode::Eval);
        let xv = ses.graph.input(x.clone());
        let y = bn.forward(&mut ses, xv).unwrap();
        // gamma=1, beta=0, mean=0, var=1 -> y = x / sqrt(1+eps)
        let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
        for (a, b) in ses.graph.data(y).iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut ps = ParamStore::new();
        let bn = BatchNorm::new(&mut ps, "bn", 1);
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut ses = Session::new(&ps, Mode::Train { rng_salt: 0 });
        let xv = ses.graph.input(x);
        let y = bn.forward(&mut ses, xv).unwrap();
        let out = ses.graph.data(y).to_vec();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        // running stats moved toward the batch: mean 2.5, var 1.25
        let report = ses.finish();
        ps.apply_updates(report.buffer_updates);
        let rm = ps.get(bn.running_mean).data()[0];
        let rv = ps.get(bn.running_var).data()[0];
        assert!((rm - 0.25).abs() < 1e-12); // 0.9*0 + 0.1*2.5
        assert!((rv - (0.9 + 0.125)).abs() < 1e-12); // 0.9*1 + 0.1*1.25
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_deterministic() {
        let mut ps = ParamStore::new();
        let drop = Dropout::new(0.5, 7);
        let x = Tensor::ones(&[1, 64]);

        let mut ses = Session::new(&ps, Mode::Eval);
        let xv = ses.graph.input(x.clone());
        let y = drop.forward(&mut ses, xv).unwrap();
        assert_eq!(ses.graph.data(y), x.data());
        drop_check(&mut ps, &drop, &x);
    }

    fn drop_check(ps: &mut ParamStore, drop: &Dropout, x: &Tensor) {
        let run = |ps: &ParamStore| {
            let mut ses = Session::new(ps, Mode::Train { rng_salt: 99 });
            let xv = ses.graph.input(x.clone());
            let y = drop.forward(&mut ses, xv).unwrap();
            ses.graph.data(y).to_vec()
        };
        let a = run(ps);
        let b = run(ps);
        assert_eq!(a, b);
        assert!(a.iter().any(|&v| v == 0.0));
        assert!(a.iter().any(|&v| v == 2.0));
    }
}
