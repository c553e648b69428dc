//! Task interaction at one decoder level.
//!
//! Two pathways exchange information between the spatial (segmentation)
//! stream and the per-sample classification vector:
//!
//! * seg -> clf: a learned 1x1 attention over the decoder features is
//!   pooled, projected to the classification width and gated into the
//!   classification vector as a residual.
//! * clf -> seg: the classification vector is projected into decoder
//!   channel space, squashed to [0,1], gated, and applied as a bounded
//!   multiplicative factor `mu = 1 + tau * gate * proj`, so every feature
//!   keeps its sign and is amplified by at most `1 + tau`.

use crate::error::{Error, Result};
use crate::graph::Value;
use crate::nn::{BatchNorm, Conv2d, Dense, ParamStore, Session};
use crate::rng::Rng;

/// Fixed amplification bound; `mu` lives in [1.0, 1 + TAU].
pub const TAU: f64 = 0.7;

/// Width of the classification feature vector at every level.
pub const CLF_WIDTH: usize = 256;

pub struct TimLevelParams {
    /// 1x1 conv producing the spatial attention over decoder features.
    pub attn: Conv2d,
    /// Dense + BN projecting pooled attention to the classification width.
    pub ctx_dense: Dense,
    pub ctx_bn: BatchNorm,
    /// Gate on the injected context (single dense + sigmoid).
    pub clf_gate: Dense,
    /// Projection of the classification vector into channel space.
    pub proj: Dense,
    /// Gate on the modulation strength (single dense + sigmoid).
    pub seg_gate: Dense,
    pub channels: usize,
}

impl TimLevelParams {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Self {
        TimLevelParams {
            attn: Conv2d::new(ps, &format!("{name}.attn"), channels, channels, 1, 1, rng),
            ctx_dense: Dense::new(ps, &format!("{name}.ctx"), channels, CLF_WIDTH, rng),
            ctx_bn: BatchNorm::new(ps, &format!("{name}.ctx_bn"), CLF_WIDTH),
            clf_gate: Dense::new(ps, &format!("{name}.clf_gate"), CLF_WIDTH, CLF_WIDTH, rng),
            proj: Dense::new(ps, &format!("{name}.proj"), CLF_WIDTH, channels, rng),
            seg_gate: Dense::new(ps, &format!("{name}.seg_gate"), channels, channels, rng),
            channels,
        }
    }

    fn check(&self, ses: &Session, d: Value, f_clf: Value) -> Result<()> {
        let ds = ses.graph.shape(d);
        let fs = ses.graph.shape(f_clf);
        if ds.len() != 4 || ds[3] != self.channels {
            return Err(Error::invalid(
                "tim",
                format!("decoder features {:?} do not match level channels {}", ds, self.channels),
            ));
        }
        if fs.len() != 2 || fs[1] != CLF_WIDTH || fs[0] != ds[0] {
            return Err(Error::shapes("tim clf features", fs, &[ds[0], CLF_WIDTH]));
        }
        Ok(())
    }

    /// Inject pooled spatial context into the classification vector.
    pub fn seg_to_clf(&self, ses: &mut Session, d: Value, f_clf: Value) -> Result<Value> {
        self.check(ses, d, f_clf)?;
        let a = self.attn.forward(ses, d)?;
        let a = ses.graph.relu(a);
        let pooled = ses.graph.gap(a)?;
        let ctx = self.ctx_dense.forward(ses, pooled)?;
        let ctx = self.ctx_bn.forward(ses, ctx)?;
        let gate = self.clf_gate.forward(ses, ctx)?;
        let gate = ses.graph.sigmoid(gate);
        let inject = ses.graph.mul(gate, ctx)?;
        ses.graph.add(f_clf, inject)
    }

    /// Modulate decoder features by the bounded classification prior.
    pub fn clf_to_seg(&self, ses: &mut Session, d: Value, f_clf: Value) -> Result<Value> {
        self.check(ses, d, f_clf)?;
        let shape = ses.graph.shape(d).to_vec();
        let (b, c) = (shape[0], shape[3]);
        let proj = self.proj.forward(ses, f_clf)?;
        let proj = ses.graph.sigmoid(proj);
        let pooled = ses.graph.gap(d)?;
        let gate = self.seg_gate.forward(ses, pooled)?;
        let gate = ses.graph.sigmoid(gate);
        let strength = ses.graph.mul(gate, proj)?;
        let strength = ses.graph.reshape(strength, vec![b, 1, 1, c])?;
        let strength = ses.graph.broadcast_to(strength, shape)?;
        let mu = ses.graph.affine(strength, TAU, 1.0);
        ses.graph.mul(d, mu)
    }

    /// Both pathways: returns (enhanced decoder features, enhanced
    /// classification features).
    pub fn forward(&self, ses: &mut Session, d: Value, f_clf: Value) -> Result<(Value, Value)> {
        let f_enh = self.seg_to_clf(ses, d, f_clf)?;
        let d_enh = self.clf_to_seg(ses, d, f_clf)?;
        Ok((d_enh, f_enh))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn setup(channels: usize) -> (ParamStore, TimLevelParams) {
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from(42);
        let tim = TimLevelParams::new(&mut ps, "tim", channels, &mut rng);
        (ps, tim)
    }

    #[test]
    fn zero_gate_preserves_clf_features_exactly() {
        let (mut ps, tim) = setup(8);
        // force the gate to 0: sigmoid(-1e9) underflows to exactly 0
        let gate_w = ps.get_mut(tim.clf_gate.w);
        gate_w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let gate_b = ps.get_mut(tim.clf_gate.b);
        gate_b.data_mut().iter_mut().for_each(|v| *v = -1e9);

        let mut rng = Rng::seed_from(1);
        let d = Tensor::randn(&[2, 4, 4, 8], 1.0, &mut rng);
        let f = Tensor::randn(&[2, CLF_WIDTH], 1.0, &mut rng);
        let mut ses = Session::new(&ps, Mode::Eval);
        let dv = ses.graph.input(d);
        let fv = ses.graph.input(f.clone());
        let out = tim.seg_to_clf(&mut ses, dv, fv).unwrap();
        assert_eq!(ses.graph.data(out), f.data());
    }

    #[test]
    fn zero_decoder_features_yield_bias_driven_context() {
        let (mut ps, tim) = setup(4);
        // identity BN statistics in eval mode
        let eps = 1e-5;
        tim.ctx_bn.set_running(
            &mut ps,
            Tensor::zeros(&[CLF_WIDTH]),
            Tensor::full(&[CLF_WIDTH], 1.0 - eps),
        );
        // give the context dense a recognizable bias
        let bias: Vec<f64> = (0..CLF_WIDTH).map(|i| 0.01 * i as f64 - 1.0).collect();
        ps.set(
            tim.ctx_dense.b,
            Tensor::new(vec![CLF_WIDTH], bias.clone()).unwrap(),
        );

        let d = Tensor::zeros(&[1, 3, 3, 4]);
        let f = Tensor::zeros(&[1, CLF_WIDTH]);
        let mut ses = Session::new(&ps, Mode::Eval);
        let dv = ses.graph.input(d);
        let fv = ses.graph.input(f);
        let out = tim.seg_to_clf(&mut ses, dv, fv).unwrap();

        // hand evaluation: ctx = bias (zeros through conv/GAP/dense weights),
        // gate = sigmoid(W_g . ctx + b_g), out = 0 + gate * ctx
        let gw = ps.get(tim.clf_gate.w).data();
        let gb = ps.get(tim.clf_gate.b).data();
        for j in 0..CLF_WIDTH {
            let mut z = gb[j];
            for i in 0..CLF_WIDTH {
                z += bias[i] * gw[i * CLF_WIDTH + j];
            }
            let gate = crate::graph::sigmoid(z);
            let expect = gate * bias[j];
            let got = ses.graph.data(out)[j];
            assert!((got - expect).abs() < 1e-10, "j={}: {} vs {}", j, got, expect);
        }
    }

    #[test]
    fn saturated_gates_give_factor_one_point_seven() {
        let (mut ps, tim) = setup(8);
        for id in [tim.proj.w, tim.seg_gate.w] {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for id in [tim.proj.b, tim.seg_gate.b] {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 1e9);
        }
        let mut rng = Rng::seed_from(2);
        let d = Tensor::randn(&[1, 4, 4, 8], 1.0, &mut rng);
        let f = Tensor::randn(&[1, CLF_WIDTH], 1.0, &mut rng);
        let mut ses = Session::new(&ps, Mode::Eval);
        let dv = ses.graph.input(d.clone());
        let fv = ses.graph.input(f);
        let out = tim.clf_to_seg(&mut ses, dv, fv).unwrap();
        for (o, i) in ses.graph.data(out).iter().zip(d.data()) {
            assert!((o - 1.7 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_is_identity_modulation() {
        let (mut ps, tim) = setup(8);
        ps.get_mut(tim.seg_gate.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        ps.get_mut(tim.seg_gate.b).data_mut().iter_mut().for_each(|v| *v = -1e9);
        let mut rng = Rng::seed_from(3);
        let d = Tensor::randn(&[2, 3, 3, 8], 1.0, &mut rng);
        let f = Tensor::randn(&[2, CLF_WIDTH], 1.0, &mut rng);
        let mut ses = Session::new(&ps, Mode::Eval);
        let dv = ses.graph.input(d.clone());
        let fv = ses.graph.input(f);
        let out = tim.clf_to_seg(&mut ses, dv, fv).unwrap();
        assert_eq!(ses.graph.data(out), d.data());
    }

    #[test]
    fn modulation_preserves_sign_and_never_shrinks() {
        let (ps, tim) = setup(8);
        let mut rng = Rng::seed_from(4);
        let d = Tensor::randn(&[2, 4, 4, 8], 2.0, &mut rng);
        let f = Tensor::randn(&[2, CLF_WIDTH], 2.0, &mut rng);
        let mut ses = Session::new(&ps, Mode::Eval);
        let dv = ses.graph.input(d.clone());
        let fv = ses.graph.input(f);
        let out = tim.clf_to_seg(&mut ses, dv, fv).unwrap();
        for (o, i) in ses.graph.data(out).iter().zip(d.data()) {
            assert!(o.signum() == i.signum() || *i == 0.0);
            assert!(o.abs() >= i.abs());
            assert!(o.abs() <= 1.7 * i.abs() + 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (ps, tim) = setup(8);
        let d = Tensor::zeros(&[1, 4, 4, 16]);
        let f = Tensor::zeros(&[1, CLF_WIDTH]);
        let mut ses = Session::new(&ps, Mode::Eval);
        let dv = ses.graph.input(d);
        let fv = ses.graph.input(f);
        assert!(tim.clf_to_seg(&mut ses, dv, fv).is_err());
        assert!(tim.seg_to_clf(&mut ses, dv, fv).is_err());
    }
}
