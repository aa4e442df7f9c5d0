//! Additive attention gate and the dual attention gate that fuses the
//! pyramid, main and transformer branches of the encoder.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{expect_rank4, resample_to, sigmoid, Conv2d, ConvOptions, Resampling};
use crate::params::ParamBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionGateSpec {
    pub gate_channels: usize,
    pub feat_channels: usize,
    pub inter_channels: usize,
}

impl AttentionGateSpec {
    /// Internal width defaults to `max(feat_channels / 2, 8)`.
    pub fn new(gate_channels: usize, feat_channels: usize) -> Self {
        Self {
            gate_channels,
            feat_channels,
            inter_channels: (feat_channels / 2).max(8),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gate_channels == 0 || self.feat_channels == 0 || self.inter_channels == 0 {
            return Err(Error::config(format!(
                "attention gate widths must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `alpha = sigmoid(psi(relu(W_g g + W_x x + b)))`, `out = x * alpha`.
#[derive(Debug, Clone)]
pub struct AttentionGate {
    spec: AttentionGateSpec,
    w_gate: Conv2d,
    w_feat: Conv2d,
    psi: Conv2d,
}

impl AttentionGate {
    pub fn new(spec: AttentionGateSpec, pb: ParamBuilder) -> Result<Self> {
        spec.validate()?;
        let no_bias = ConvOptions {
            bias: false,
            ..Default::default()
        };
        Ok(Self {
            spec,
            w_gate: Conv2d::new(
                spec.gate_channels,
                spec.inter_channels,
                1,
                ConvOptions::default(),
                pb.pp("w_gate"),
            )?,
            w_feat: Conv2d::new(spec.feat_channels, spec.inter_channels, 1, no_bias, pb.pp("w_feat"))?,
            psi: Conv2d::new(spec.inter_channels, 1, 1, ConvOptions::default(), pb.pp("psi"))?,
        })
    }

    pub fn spec(&self) -> &AttentionGateSpec {
        &self.spec
    }

    /// Gated features together with the single-channel coefficient map.
    pub fn forward_with_coefficients(&self, g: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (gb, gc, gh, gw) = expect_rank4(g, "attention gate signal")?;
        let (xb, xc, xh, xw) = expect_rank4(x, "attention gate features")?;
        if (gb, gh, gw) != (xb, xh, xw) {
            return Err(Error::shape(format!(
                "gate {:?} and features {:?} must share batch and spatial size",
                g.dims(),
                x.dims()
            )));
        }
        if gc != self.spec.gate_channels || xc != self.spec.feat_channels {
            return Err(Error::config(format!(
                "attention gate expects ({}, {}) channels, got ({gc}, {xc})",
                self.spec.gate_channels, self.spec.feat_channels
            )));
        }
        let joint = (self.w_gate.forward(g)? + self.w_feat.forward(x)?)?.relu()?;
        // Clamping keeps f32 coefficients strictly inside (0, 1).
        let logits = self.psi.forward(&joint)?.clamp(-PSI_LOGIT_LIMIT, PSI_LOGIT_LIMIT)?;
        let alpha = sigmoid(&logits)?;
        let out = x.broadcast_mul(&alpha)?;
        Ok((out, alpha))
    }

    pub fn forward(&self, g: &Tensor, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_coefficients(g, x)?.0)
    }
}

/// Bound on the coefficient logits; `sigmoid(±15)` is representable in f32
/// without rounding to 0 or 1.
pub const PSI_LOGIT_LIMIT: f32 = 15.0;

/// Which tensor gates which inside the dual gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DagWiring {
    /// Pyramid gates main; main gates transformer.
    #[default]
    Mixed,
    /// Transformer gates main; pyramid gates main.
    MainGated,
}

/// Which of the three inputs a dual gate consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DagInputs {
    pub pyramid: bool,
    pub transformer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualAttentionGateSpec {
    pub pyramid_channels: usize,
    pub main_channels: usize,
    pub transformer_channels: usize,
    pub target_resolution: (usize, usize),
    pub wiring: DagWiring,
}

impl DualAttentionGateSpec {
    pub fn new(
        pyramid_channels: usize,
        main_channels: usize,
        transformer_channels: usize,
        target_resolution: (usize, usize),
    ) -> Self {
        Self {
            pyramid_channels,
            main_channels,
            transformer_channels,
            target_resolution,
            wiring: DagWiring::Mixed,
        }
    }

    /// Output width for the given set of live inputs.
    pub fn out_channels(&self, inputs: DagInputs) -> usize {
        match (self.wiring, inputs.pyramid, inputs.transformer) {
            (DagWiring::Mixed, _, true) => self.main_channels + self.transformer_channels,
            (DagWiring::MainGated, true, true) => 2 * self.main_channels,
            (DagWiring::MainGated, false, true) => self.main_channels,
            (_, true, false) => self.main_channels,
            (_, false, false) => self.main_channels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DagOutput {
    pub fused: Tensor,
    /// Coefficient maps of the live gates, first gate first.
    pub alphas: Vec<Tensor>,
    pub resampling: [Resampling; 3],
}

/// Two attention gates whose outputs are concatenated along channels.
///
/// With the default wiring gate one rescales the main features using the
/// pyramid features, and gate two rescales the transformer features using
/// the main features. A missing pyramid input leaves the main features
/// ungated next to gate two; a missing transformer input leaves gate one
/// alone.
#[derive(Debug, Clone)]
pub struct DualAttentionGate {
    spec: DualAttentionGateSpec,
    inputs: DagInputs,
    first: Option<AttentionGate>,
    second: Option<AttentionGate>,
}

impl DualAttentionGate {
    pub fn new(spec: DualAttentionGateSpec, inputs: DagInputs, pb: ParamBuilder) -> Result<Self> {
        if spec.target_resolution.0 == 0 || spec.target_resolution.1 == 0 {
            return Err(Error::config("dual gate target resolution must be positive"));
        }
        if !inputs.pyramid && !inputs.transformer {
            return Err(Error::config(
                "a dual attention gate needs the pyramid or the transformer input",
            ));
        }
        let (p, m, t) = (
            spec.pyramid_channels,
            spec.main_channels,
            spec.transformer_channels,
        );
        let (first, second) = match spec.wiring {
            DagWiring::Mixed => (
                inputs
                    .pyramid
                    .then(|| AttentionGate::new(AttentionGateSpec::new(p, m), pb.pp("ag_pyramid_main")))
                    .transpose()?,
                inputs
                    .transformer
                    .then(|| AttentionGate::new(AttentionGateSpec::new(m, t), pb.pp("ag_main_transformer")))
                    .transpose()?,
            ),
            DagWiring::MainGated => (
                inputs
                    .transformer
                    .then(|| AttentionGate::new(AttentionGateSpec::new(t, m), pb.pp("ag_transformer_main")))
                    .transpose()?,
                inputs
                    .pyramid
                    .then(|| AttentionGate::new(AttentionGateSpec::new(p, m), pb.pp("ag_pyramid_main")))
                    .transpose()?,
            ),
        };
        Ok(Self {
            spec,
            inputs,
            first,
            second,
        })
    }

    pub fn spec(&self) -> &DualAttentionGateSpec {
        &self.spec
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels(self.inputs)
    }

    pub fn forward(
        &self,
        pyramid: Option<&Tensor>,
        main: &Tensor,
        transformer: Option<&Tensor>,
    ) -> Result<DagOutput> {
        let (th, tw) = self.spec.target_resolution;
        let (mb, ..) = expect_rank4(main, "dual gate main input")?;
        for (name, t) in [("pyramid", pyramid), ("transformer", transformer)] {
            if let Some(t) = t {
                let (b, ..) = expect_rank4(t, "dual gate input")?;
                if b != mb {
                    return Err(Error::shape(format!(
                        "dual gate {name} batch {b} differs from main batch {mb}"
                    )));
                }
            }
        }
        let need = |present: bool, wanted: bool, name: &str| -> Result<()> {
            if present != wanted {
                return Err(Error::config(format!(
                    "dual gate built with {name}={wanted} but called with {name}={present}"
                )));
            }
            Ok(())
        };
        need(pyramid.is_some(), self.inputs.pyramid, "pyramid")?;
        need(transformer.is_some(), self.inputs.transformer, "transformer")?;

        let mut resampling = [Resampling::Identity; 3];
        let (main, r) = resample_to(main, th, tw)?;
        resampling[1] = r;
        let pyramid = match pyramid {
            Some(p) => {
                let (p, r) = resample_to(p, th, tw)?;
                resampling[0] = r;
                Some(p)
            }
            None => None,
        };
        let transformer = match transformer {
            Some(t) => {
                let (t, r) = resample_to(t, th, tw)?;
                resampling[2] = r;
                Some(t)
            }
            None => None,
        };

        let mut parts = Vec::with_capacity(2);
        let mut alphas = Vec::with_capacity(2);
        match self.spec.wiring {
            DagWiring::Mixed => {
                match (&self.first, &pyramid) {
                    (Some(ag), Some(p)) => {
                        let (o, a) = ag.forward_with_coefficients(p, &main)?;
                        parts.push(o);
                        alphas.push(a);
                    }
                    _ => parts.push(main.clone()),
                }
                if let (Some(ag), Some(t)) = (&self.second, &transformer) {
                    let (o, a) = ag.forward_with_coefficients(&main, t)?;
                    parts.push(o);
                    alphas.push(a);
                }
            }
            DagWiring::MainGated => {
                if let (Some(ag), Some(t)) = (&self.first, &transformer) {
                    let (o, a) = ag.forward_with_coefficients(t, &main)?;
                    parts.push(o);
                    alphas.push(a);
                }
                if let (Some(ag), Some(p)) = (&self.second, &pyramid) {
                    let (o, a) = ag.forward_with_coefficients(p, &main)?;
                    parts.push(o);
                    alphas.push(a);
                }
            }
        }
        let fused = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            Tensor::cat(&parts, 1)?
        };
        Ok(DagOutput {
            fused,
            alphas,
            resampling,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    const BOTH: DagInputs = DagInputs {
        pyramid: true,
        transformer: true,
    };

    #[test]
    fn default_inter_width() {
        assert_eq!(AttentionGateSpec::new(4, 64).inter_channels, 32);
        assert_eq!(AttentionGateSpec::new(4, 6).inter_channels, 8);
    }

    #[test]
    fn ag_shape_contract() {
        let store = ParamStore::new(0);
        let ag = AttentionGate::new(AttentionGateSpec::new(64, 64), store.root()).unwrap();
        let out = ag.forward(&randn(&[2, 64, 28, 28], 1), &randn(&[2, 64, 28, 28], 2)).unwrap();
        assert_eq!(out.dims(), &[2, 64, 28, 28]);
    }

    #[test]
    fn ag_spatial_mismatch_is_shape_error() {
        let store = ParamStore::new(0);
        let ag = AttentionGate::new(AttentionGateSpec::new(4, 4), store.root()).unwrap();
        let err = ag.forward(&randn(&[1, 4, 8, 8], 1), &randn(&[1, 4, 4, 4], 2)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_psi_halves_the_features() {
        let store = ParamStore::new(0);
        let ag = AttentionGate::new(AttentionGateSpec::new(8, 8), store.root()).unwrap();
        let dev = Device::Cpu;
        store.assign("psi.weight", &Tensor::zeros((1, 8, 1, 1), DType::F32, &dev).unwrap()).unwrap();
        store.assign("psi.bias", &Tensor::zeros(1, DType::F32, &dev).unwrap()).unwrap();
        let x = randn(&[1, 8, 5, 5], 3);
        let out = ag.forward(&randn(&[1, 8, 5, 5], 4), &x).unwrap();
        for (o, v) in flat(&out).iter().zip(flat(&x)) {
            assert!((o - 0.5 * v).abs() <= 1e-6);
        }
    }

    #[test]
    fn bias_offsets_saturate_the_gate() {
        let store = ParamStore::new(0);
        let ag = AttentionGate::new(AttentionGateSpec::new(4, 4), store.root()).unwrap();
        let dev = Device::Cpu;
        store.assign("psi.weight", &Tensor::zeros((1, 8, 1, 1), DType::F32, &dev).unwrap()).unwrap();
        let g = randn(&[1, 4, 6, 6], 5);
        let x = randn(&[1, 4, 6, 6], 6);
        store.assign("psi.bias", &Tensor::new(&[-20f32], &dev).unwrap()).unwrap();
        let low = ag.forward(&g, &x).unwrap();
        assert!(flat(&low).iter().all(|v| v.abs() < 1e-6));
        store.assign("psi.bias", &Tensor::new(&[20f32], &dev).unwrap()).unwrap();
        let high = ag.forward(&g, &x).unwrap();
        for (h, v) in flat(&high).iter().zip(flat(&x)) {
            assert!((h - v).abs() < 1e-5);
        }
    }

    #[test]
    fn extreme_logits_stay_strictly_inside() {
        let store = ParamStore::new(0);
        let ag = AttentionGate::new(AttentionGateSpec::new(4, 4), store.root()).unwrap();
        let dev = Device::Cpu;
        let g = randn(&[1, 4, 5, 5], 1);
        let x = randn(&[1, 4, 5, 5], 2);
        for b in [-1e4f32, 1e4] {
            store.assign("psi.bias", &Tensor::new(&[b], &dev).unwrap()).unwrap();
            let (_, a) = ag.forward_with_coefficients(&g, &x).unwrap();
            assert!(flat(&a).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn dag_mixed_resolutions() {
        let store = ParamStore::new(1);
        let spec = DualAttentionGateSpec::new(64, 64, 64, (28, 28));
        let dag = DualAttentionGate::new(spec, BOTH, store.root()).unwrap();
        let out = dag
            .forward(
                Some(&randn(&[1, 64, 28, 28], 1)),
                &randn(&[1, 64, 56, 56], 2),
                Some(&randn(&[1, 64, 28, 28], 3)),
            )
            .unwrap();
        assert_eq!(out.fused.dims(), &[1, 128, 28, 28]);
        assert_eq!(out.resampling[1], Resampling::MaxPool(2));
    }

    #[test]
    fn dag_zero_inputs_zero_biases_give_zero() {
        let store = ParamStore::new(1);
        let spec = DualAttentionGateSpec::new(4, 4, 4, (8, 8));
        let dag = DualAttentionGate::new(spec, BOTH, store.root()).unwrap();
        for name in store.names() {
            if name.ends_with("bias") {
                let v = store.get(&name).unwrap();
                store.assign(&name, &v.zeros_like().unwrap()).unwrap();
            }
        }
        let z = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let out = dag.forward(Some(&z), &z, Some(&z)).unwrap();
        assert!(flat(&out.fused).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dag_batch_mismatch_rejected() {
        let store = ParamStore::new(1);
        let spec = DualAttentionGateSpec::new(4, 4, 4, (8, 8));
        let dag = DualAttentionGate::new(spec, BOTH, store.root()).unwrap();
        let err = dag
            .forward(
                Some(&randn(&[2, 4, 8, 8], 0)),
                &randn(&[1, 4, 8, 8], 0),
                Some(&randn(&[1, 4, 8, 8], 0)),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn dag_single_gate_variants() {
        let store = ParamStore::new(1);
        let spec = DualAttentionGateSpec::new(8, 16, 32, (8, 8));
        let no_pvt = DualAttentionGate::new(
            spec,
            DagInputs { pyramid: true, transformer: false },
            store.root().pp("a"),
        )
        .unwrap();
        let out = no_pvt.forward(Some(&randn(&[1, 8, 8, 8], 0)), &randn(&[1, 16, 8, 8], 1), None).unwrap();
        assert_eq!(out.fused.dims(), &[1, 16, 8, 8]);
        assert_eq!(out.alphas.len(), 1);

        let no_pyr = DualAttentionGate::new(
            spec,
            DagInputs { pyramid: false, transformer: true },
            store.root().pp("b"),
        )
        .unwrap();
        let out = no_pyr.forward(None, &randn(&[1, 16, 8, 8], 1), Some(&randn(&[1, 32, 4, 4], 2))).unwrap();
        assert_eq!(out.fused.dims(), &[1, 48, 8, 8]);
        assert_eq!(out.resampling[2], Resampling::Upsample(2));

        assert!(DualAttentionGate::new(
            spec,
            DagInputs { pyramid: false, transformer: false },
            store.root().pp("c"),
        )
        .is_err());
    }

    #[test]
    fn main_gated_wiring_gates_main_twice() {
        let store = ParamStore::new(1);
        let mut spec = DualAttentionGateSpec::new(8, 16, 32, (8, 8));
        spec.wiring = DagWiring::MainGated;
        let dag = DualAttentionGate::new(spec, BOTH, store.root()).unwrap();
        let out = dag
            .forward(
                Some(&randn(&[1, 8, 8, 8], 0)),
                &randn(&[1, 16, 8, 8], 1),
                Some(&randn(&[1, 32, 8, 8], 2)),
            )
            .unwrap();
        assert_eq!(out.fused.dims(), &[1, 32, 8, 8]);
        assert_eq!(dag.out_channels(), 32);
    }

    #[test]
    fn dag_gradients_reach_all_inputs() {
        let store = ParamStore::new(1);
        let spec = DualAttentionGateSpec::new(4, 6, 8, (8, 8));
        let dag = DualAttentionGate::new(spec, BOTH, store.root()).unwrap();
        let p = candle_core::Var::from_tensor(&randn(&[1, 4, 8, 8], 0)).unwrap();
        let m = candle_core::Var::from_tensor(&randn(&[1, 6, 16, 16], 1)).unwrap();
        let t = candle_core::Var::from_tensor(&randn(&[1, 8, 4, 4], 2)).unwrap();
        let out = dag.forward(Some(p.as_tensor()), m.as_tensor(), Some(t.as_tensor())).unwrap();
        let grads = out.fused.sum_all().unwrap().backward().unwrap();
        for v in [&p, &m, &t] {
            let g = grads.get(v).expect("gradient");
            let n: f32 = g.abs().unwrap().sum_all().unwrap().to_scalar().unwrap();
            assert!(n > 0.0 && n.is_finite());
        }
    }
}
