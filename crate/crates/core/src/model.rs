//! The GRN architecture: individual encoder over band features, learnable
//! prototype bank with attention-induced resonance, a shared shallow CNN over
//! the multi-subject resonance tensor, and the difference/commonality fusion
//! head, trained with cross-entropy plus an attention-weighted prototype
//! regularizer.

use crate::autograd::{AdamState, Graph, NodeId, Tensor};
use crate::error::{GrnError, Result};
use crate::seeding::normal01;
use crate::signal::FeatureGrid;
use crate::synchrony::ResonanceTensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Model hyperparameters. Desk defaults keep the full test suite fast; the
/// larger published scale (d=256) remains configurable.
#[derive(Debug, Clone, PartialEq)]
pub struct GrnConfig {
    pub d: usize,
    pub m_prototypes: usize,
    pub k_r: usize,
    pub channels: usize,
    pub bands: usize,
    pub hidden: usize,
    pub conv_channels: usize,
    pub n_classes: usize,
    pub lambda_proto: f64,
    pub temperature: f64,
}

impl Default for GrnConfig {
    fn default() -> Self {
        Self {
            d: 32,
            m_prototypes: 8,
            k_r: 3,
            channels: 8,
            bands: 5,
            hidden: 64,
            conv_channels: 8,
            n_classes: 3,
            lambda_proto: 0.1,
            temperature: 1.0,
        }
    }
}

impl GrnConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("m_prototypes", self.m_prototypes),
            ("k_r", self.k_r),
            ("bands", self.bands),
            ("hidden", self.hidden),
            ("conv_channels", self.conv_channels),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return Err(GrnError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.channels < 3 {
            return Err(GrnError::Config(format!(
                "channels must be >= 3 so the 3x3 resonance kernel fits, got {}",
                self.channels
            )));
        }
        if self.lambda_proto < 0.0 {
            return Err(GrnError::Config(format!(
                "lambda_proto must be >= 0, got {}",
                self.lambda_proto
            )));
        }
        if self.temperature <= 0.0 {
            return Err(GrnError::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Width of the fusion input: F, R, G, F-R, F-G, F.R, F.G.
    pub fn fusion_width(&self) -> usize {
        7 * self.d
    }
}

/// Which views feed the fusion head; mirrors the ablation table. Masked views
/// are replaced by zeros together with their interaction terms so the fusion
/// width (and parameter count) never changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    IndividualOnly,
    ProtoOnly,
    ResonanceOnly,
    FullNoProtoreg,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::IndividualOnly,
        Variant::ProtoOnly,
        Variant::ResonanceOnly,
        Variant::FullNoProtoreg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::IndividualOnly => "individual_only",
            Variant::ProtoOnly => "proto_only",
            Variant::ResonanceOnly => "resonance_only",
            Variant::FullNoProtoreg => "full_no_protoreg",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                GrnError::Config(format!(
                    "unknown variant '{s}' (expected one of: full, individual_only, proto_only, resonance_only, full_no_protoreg)"
                ))
            })
    }

    pub fn uses_r(&self) -> bool {
        matches!(self, Variant::Full | Variant::ProtoOnly | Variant::FullNoProtoreg)
    }

    pub fn uses_g(&self) -> bool {
        matches!(self, Variant::Full | Variant::ResonanceOnly | Variant::FullNoProtoreg)
    }

    /// The prototype regularizer only applies when prototypes are in the loss
    /// path and the variant keeps the regularizer.
    pub fn uses_protoreg(&self) -> bool {
        matches!(self, Variant::Full | Variant::ProtoOnly)
    }

    pub fn needs_tensors(&self) -> bool {
        self.uses_g()
    }
}

/// Per-feature affine normalization with statistics frozen from the training
/// split of the current fold.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[&FeatureGrid]) -> Result<Self> {
        if features.is_empty() {
            return Err(GrnError::Invalid("standardizer needs at least one grid".into()));
        }
        let width = features[0].values.len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; width];
        for f in features {
            for (m, v) in mean.iter_mut().zip(&f.values) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; width];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(&f.values).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.iter().map(|v| v.sqrt().max(1e-8)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, grid: &FeatureGrid) -> Vec<f64> {
        grid.values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

// Parameter slots, in binding order.
pub const P_ENC_W1: usize = 0;
pub const P_ENC_B1: usize = 1;
pub const P_ENC_W2: usize = 2;
pub const P_ENC_B2: usize = 3;
pub const P_PROTOS: usize = 4;
pub const P_RES_KERNEL: usize = 5;
pub const P_RES_BIAS: usize = 6;
pub const P_RES_W: usize = 7;
pub const P_RES_B: usize = 8;
pub const P_FUSE_W1: usize = 9;
pub const P_FUSE_B1: usize = 10;
pub const P_FUSE_W2: usize = 11;
pub const P_FUSE_B2: usize = 12;
pub const N_PARAMS: usize = 13;

/// One trainable tensor with its Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: &'static str,
    pub value: Tensor,
    pub state: AdamState,
}

/// All trainable state plus the frozen feature standardizer.
#[derive(Debug, Clone)]
pub struct GrnModel {
    pub cfg: GrnConfig,
    pub params: Vec<Param>,
    pub standardizer: Option<Standardizer>,
}

fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * a).collect();
    Tensor::new(shape, data).expect("xavier shape")
}

impl GrnModel {
    /// Seeded initialization: Xavier-uniform weights and kernels, zero biases,
    /// prototypes from a normal with std 1/sqrt(d) so their norms match
    /// unit-scale embeddings.
    pub fn init(cfg: &GrnConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let in_dim = cfg.channels * cfg.bands;
        let proto_scale = 1.0 / (cfg.d as f64).sqrt();
        let proto_data: Vec<f64> = (0..cfg.m_prototypes * cfg.d)
            .map(|_| normal01(rng) * proto_scale)
            .collect();
        let protos = Tensor::new(vec![cfg.m_prototypes, cfg.d], proto_data)?;
        for m in 0..cfg.m_prototypes {
            let row = &protos.data()[m * cfg.d..(m + 1) * cfg.d];
            if row.iter().all(|v| *v == 0.0) {
                return Err(GrnError::Invalid(format!("prototype {m} initialized to zero")));
            }
        }
        let kernel_fan_in = 2 * 3 * 3;
        let kernel_fan_out = cfg.conv_channels * 3 * 3;
        let params = vec![
            Param {
                name: "enc.w1",
                value: xavier(rng, vec![in_dim, cfg.hidden], in_dim, cfg.hidden),
                state: AdamState::new(in_dim * cfg.hidden),
            },
            Param {
                name: "enc.b1",
                value: Tensor::zeros(vec![cfg.hidden]),
                state: AdamState::new(cfg.hidden),
            },
            Param {
                name: "enc.w2",
                value: xavier(rng, vec![cfg.hidden, cfg.d], cfg.hidden, cfg.d),
                state: AdamState::new(cfg.hidden * cfg.d),
            },
            Param {
                name: "enc.b2",
                value: Tensor::zeros(vec![cfg.d]),
                state: AdamState::new(cfg.d),
            },
            Param {
                name: "protos",
                value: protos,
                state: AdamState::new(cfg.m_prototypes * cfg.d),
            },
            Param {
                name: "res.kernel",
                value: xavier(
                    rng,
                    vec![cfg.conv_channels, 2, 3, 3],
                    kernel_fan_in,
                    kernel_fan_out,
                ),
                state: AdamState::new(cfg.conv_channels * 2 * 9),
            },
            Param {
                name: "res.bias",
                value: Tensor::zeros(vec![cfg.conv_channels]),
                state: AdamState::new(cfg.conv_channels),
            },
            Param {
                name: "res.w",
                value: xavier(rng, vec![cfg.conv_channels, cfg.d], cfg.conv_channels, cfg.d),
                state: AdamState::new(cfg.conv_channels * cfg.d),
            },
            Param {
                name: "res.b",
                value: Tensor::zeros(vec![cfg.d]),
                state: AdamState::new(cfg.d),
            },
            Param {
                name: "fuse.w1",
                value: xavier(
                    rng,
                    vec![cfg.fusion_width(), cfg.hidden],
                    cfg.fusion_width(),
                    cfg.hidden,
                ),
                state: AdamState::new(cfg.fusion_width() * cfg.hidden),
            },
            Param {
                name: "fuse.b1",
                value: Tensor::zeros(vec![cfg.hidden]),
                state: AdamState::new(cfg.hidden),
            },
            Param {
                name: "fuse.w2",
                value: xavier(rng, vec![cfg.hidden, cfg.n_classes], cfg.hidden, cfg.n_classes),
                state: AdamState::new(cfg.hidden * cfg.n_classes),
            },
            Param {
                name: "fuse.b2",
                value: Tensor::zeros(vec![cfg.n_classes]),
                state: AdamState::new(cfg.n_classes),
            },
        ];
        Ok(Self {
            cfg: cfg.clone(),
            params,
            standardizer: None,
        })
    }

    pub fn fit_standardizer(&mut self, train_features: &[&FeatureGrid]) -> Result<()> {
        self.standardizer = Some(Standardizer::fit(train_features)?);
        Ok(())
    }

    /// Flatten and standardize a batch of feature grids into `[n, C*B]`.
    /// Errors when the standardizer has not been fitted.
    pub fn prepare_features(&self, grids: &[&FeatureGrid]) -> Result<Tensor> {
        let std = self
            .standardizer
            .as_ref()
            .ok_or_else(|| GrnError::Invalid("standardizer not fitted; fit on the training split first".into()))?;
        let width = self.cfg.channels * self.cfg.bands;
        let mut data = Vec::with_capacity(grids.len() * width);
        for g in grids {
            if g.values.len() != width {
                return Err(GrnError::Shape {
                    op: "prepare_features",
                    details: format!(
                        "grid is {}x{} but the model expects {}x{}",
                        g.channels, g.bands, self.cfg.channels, self.cfg.bands
                    ),
                });
            }
            data.extend(std.apply(g));
        }
        Tensor::new(vec![grids.len(), width], data)
    }

    /// Pack a batch of resonance tensors into conv input `[n*K_r, 2, C, C]`,
    /// with PLV on channel 0 and CoH on channel 1.
    pub fn prepare_tensors(&self, tensors: &[&ResonanceTensor]) -> Result<Tensor> {
        let c = self.cfg.channels;
        let k_r = self.cfg.k_r;
        let mut data = vec![0.0; tensors.len() * k_r * 2 * c * c];
        for (n, t) in tensors.iter().enumerate() {
            if t.k_r != k_r || t.channels != c {
                return Err(GrnError::Shape {
                    op: "prepare_tensors",
                    details: format!(
                        "tensor is K_r={} C={} but the model expects K_r={} C={}",
                        t.k_r, t.channels, k_r, c
                    ),
                });
            }
            for k in 0..k_r {
                for i in 0..c {
                    for j in 0..c {
                        for kind in 0..2 {
                            let img = n * k_r + k;
                            data[((img * 2 + kind) * c + i) * c + j] = t.at(k, i, j, kind);
                        }
                    }
                }
            }
        }
        Tensor::new(vec![tensors.len() * k_r, 2, c, c], data)
    }

    /// Insert every parameter as a graph leaf; `trainable` controls whether
    /// gradients flow.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect()
    }
}

/// Node handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Trace {
    pub f: NodeId,
    pub alpha: NodeId,
    pub r: NodeId,
    pub g_emb: NodeId,
    pub logits: NodeId,
}

/// Individual encoder: standardized features through a two-layer ReLU MLP.
pub fn encode(g: &mut Graph, bound: &[NodeId], x: NodeId) -> Result<NodeId> {
    let h = g.matmul(x, bound[P_ENC_W1])?;
    let h = g.add(h, bound[P_ENC_B1])?;
    let h = g.relu(h)?;
    let f = g.matmul(h, bound[P_ENC_W2])?;
    g.add(f, bound[P_ENC_B2])
}

/// Scaled dot-product attention over the prototype bank:
/// `alpha = softmax((F P^T) / (sqrt(d) * tau))` rowwise.
pub fn prototype_attention(
    g: &mut Graph,
    f: NodeId,
    protos: NodeId,
    d: usize,
    tau: f64,
) -> Result<NodeId> {
    let pt = g.transpose(protos)?;
    let sim = g.matmul(f, pt)?;
    let sim = g.scale(sim, 1.0 / ((d as f64).sqrt() * tau))?;
    g.softmax(sim)
}

/// Prototype-induced resonance `R = alpha P`.
pub fn prototype_resonance(g: &mut Graph, alpha: NodeId, protos: NodeId) -> Result<NodeId> {
    g.matmul(alpha, protos)
}

/// Resonance encoder: shared 3x3 conv over each reference slice's 2-channel
/// synchrony image, ReLU, global average pool, mean over the K_r slices, then
/// a linear map to the embedding width. Sharing one kernel and averaging keeps
/// the module independent of K_r.
pub fn res_encode(
    g: &mut Graph,
    bound: &[NodeId],
    conv_input: NodeId,
    n: usize,
    k_r: usize,
) -> Result<NodeId> {
    let conv = g.conv2d(conv_input, bound[P_RES_KERNEL], bound[P_RES_BIAS])?;
    let act = g.relu(conv)?;
    let pooled = g.mean_pool_spatial(act)?; // [n*k_r, conv_channels]
    let conv_channels = g.value(pooled).shape()[1];
    let grouped = g.reshape(pooled, vec![n, k_r, conv_channels])?;
    let avg = g.mean_axis(grouped, 1)?; // [n, conv_channels]
    let out = g.matmul(avg, bound[P_RES_W])?;
    g.add(out, bound[P_RES_B])
}

/// Difference/commonality fusion: concat(F, R, G, F-R, F-G, F.R, F.G) through
/// a two-layer MLP to class logits.
pub fn fuse(
    g: &mut Graph,
    bound: &[NodeId],
    f: NodeId,
    r: NodeId,
    g_emb: NodeId,
    variant: Variant,
) -> Result<NodeId> {
    let n = g.value(f).shape()[0];
    let d = g.value(f).shape()[1];
    let zero = g.leaf(Tensor::zeros(vec![n, d]), false);
    let (rb, f_r, fr) = if variant.uses_r() {
        (r, g.sub(f, r)?, g.mul(f, r)?)
    } else {
        (zero, zero, zero)
    };
    let (gb, f_g, fg) = if variant.uses_g() {
        (g_emb, g.sub(f, g_emb)?, g.mul(f, g_emb)?)
    } else {
        (zero, zero, zero)
    };
    let z = g.concat(&[f, rb, gb, f_r, f_g, fr, fg])?;
    let h = g.matmul(z, bound[P_FUSE_W1])?;
    let h = g.add(h, bound[P_FUSE_B1])?;
    let h = g.relu(h)?;
    let logits = g.matmul(h, bound[P_FUSE_W2])?;
    g.add(logits, bound[P_FUSE_B2])
}

/// Full forward pass. `conv_input` may be `None` for variants that do not use
/// the multi-subject tensor; G is then a zero view.
pub fn forward_full(
    g: &mut Graph,
    model: &GrnModel,
    bound: &[NodeId],
    x: NodeId,
    conv_input: Option<NodeId>,
    variant: Variant,
) -> Result<Trace> {
    let cfg = &model.cfg;
    let n = g.value(x).shape()[0];
    let f = encode(g, bound, x)?;
    let alpha = prototype_attention(g, f, bound[P_PROTOS], cfg.d, cfg.temperature)?;
    let r = prototype_resonance(g, alpha, bound[P_PROTOS])?;
    let g_emb = match conv_input {
        Some(ci) if variant.uses_g() => res_encode(g, bound, ci, n, cfg.k_r)?,
        Some(_) | None => {
            if variant.uses_g() {
                return Err(GrnError::Invalid(format!(
                    "variant {} needs resonance tensors",
                    variant.as_str()
                )));
            }
            g.leaf(Tensor::zeros(vec![n, cfg.d]), false)
        }
    };
    let logits = fuse(g, bound, f, r, g_emb, variant)?;
    Ok(Trace {
        f,
        alpha,
        r,
        g_emb,
        logits,
    })
}

/// Training objective: mean cross-entropy plus `lambda` times the mean
/// attention-weighted squared distance between embeddings and prototypes,
/// normalized by the embedding width. Gradients flow into F, the attention
/// weights, and the prototypes alike.
pub fn loss(
    g: &mut Graph,
    model: &GrnModel,
    bound: &[NodeId],
    trace: &Trace,
    labels: &[usize],
    variant: Variant,
) -> Result<NodeId> {
    let cfg = &model.cfg;
    let ce = g.cross_entropy_with_logits(trace.logits, labels)?;
    let lambda = if variant.uses_protoreg() {
        cfg.lambda_proto
    } else {
        0.0
    };
    if lambda == 0.0 {
        return Ok(ce);
    }
    let dist = g.weighted_sqdist(trace.f, bound[P_PROTOS], trace.alpha)?;
    let total = g.sum(dist)?;
    let mean = g.scale(total, lambda / (labels.len() as f64 * cfg.d as f64))?;
    g.add(ce, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    fn tiny_cfg() -> GrnConfig {
        GrnConfig {
            d: 16,
            m_prototypes: 4,
            k_r: 2,
            channels: 4,
            bands: 5,
            hidden: 8,
            conv_channels: 3,
            n_classes: 3,
            lambda_proto: 0.1,
            temperature: 1.0,
        }
    }

    fn grid(cfg: &GrnConfig, fill: impl Fn(usize) -> f64) -> FeatureGrid {
        let n = cfg.channels * cfg.bands;
        FeatureGrid {
            values: (0..n).map(fill).collect(),
            channels: cfg.channels,
            bands: cfg.bands,
            subject_id: 0,
            trial_id: 0,
            label: 0,
        }
    }

    fn fitted_model(cfg: &GrnConfig, seed: u64) -> GrnModel {
        let mut rng = rng_from(&[seed]);
        let mut model = GrnModel::init(cfg, &mut rng).unwrap();
        let train: Vec<FeatureGrid> = (0..6)
            .map(|i| grid(cfg, |j| ((i * 31 + j * 7) % 17) as f64 * 0.21 - 1.3))
            .collect();
        let refs: Vec<&FeatureGrid> = train.iter().collect();
        model.fit_standardizer(&refs).unwrap();
        model
    }

    fn zeros_tensor(cfg: &GrnConfig) -> ResonanceTensor {
        ResonanceTensor {
            values: vec![0.0; cfg.k_r * cfg.channels * cfg.channels * 2],
            k_r: cfg.k_r,
            channels: cfg.channels,
            reference_subject_ids: vec![0; cfg.k_r],
        }
    }

    fn random_tensor(cfg: &GrnConfig, seed: u64) -> ResonanceTensor {
        let mut rng = rng_from(&[seed]);
        ResonanceTensor {
            values: (0..cfg.k_r * cfg.channels * cfg.channels * 2)
                .map(|_| rng.gen::<f64>())
                .collect(),
            k_r: cfg.k_r,
            channels: cfg.channels,
            reference_subject_ids: vec![1; cfg.k_r],
        }
    }

    #[test]
    fn forward_shapes_end_to_end() {
        let cfg = tiny_cfg();
        let model = fitted_model(&cfg, 1);
        let grids: Vec<FeatureGrid> = (0..4).map(|i| grid(&cfg, move |j| (i + j) as f64 * 0.1)).collect();
        let grid_refs: Vec<&FeatureGrid> = grids.iter().collect();
        let tensors: Vec<ResonanceTensor> = (0..4).map(|i| random_tensor(&cfg, i as u64)).collect();
        let tensor_refs: Vec<&ResonanceTensor> = tensors.iter().collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let x = model.prepare_features(&grid_refs).unwrap();
        let xn = g.leaf(x, false);
        let conv = model.prepare_tensors(&tensor_refs).unwrap();
        assert_eq!(conv.shape(), &[8, 2, 4, 4]);
        let cn = g.leaf(conv, false);
        let trace = forward_full(&mut g, &model, &bound, xn, Some(cn), Variant::Full).unwrap();
        assert_eq!(g.value(trace.f).shape(), &[4, 16]);
        assert_eq!(g.value(trace.alpha).shape(), &[4, 4]);
        assert_eq!(g.value(trace.r).shape(), &[4, 16]);
        assert_eq!(g.value(trace.g_emb).shape(), &[4, 16]);
        assert_eq!(g.value(trace.logits).shape(), &[4, 3]);
        // attention rows are a distribution
        for row in 0..4 {
            let a = &g.value(trace.alpha).data()[row * 4..(row + 1) * 4];
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(a.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny_cfg();
        let model = fitted_model(&cfg, 2);
        let gr = grid(&cfg, |j| j as f64 * 0.05);
        let run = || {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let x = model.prepare_features(&[&gr]).unwrap();
            let xn = g.leaf(x, false);
            let f = encode(&mut g, &bound, xn).unwrap();
            g.value(f).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unfitted_standardizer_is_an_error() {
        let cfg = tiny_cfg();
        let mut rng = rng_from(&[3]);
        let model = GrnModel::init(&cfg, &mut rng).unwrap();
        let gr = grid(&cfg, |_| 0.0);
        assert!(model.prepare_features(&[&gr]).is_err());
    }

    #[test]
    fn attention_uniform_when_orthogonal() {
        // F orthogonal to every prototype: all similarities zero, softmax uniform.
        let mut g = Graph::new();
        let f = g.leaf(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap(), false);
        let protos = g.leaf(
            Tensor::new(
                vec![3, 4],
                vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap(),
            false,
        );
        let alpha = prototype_attention(&mut g, f, protos, 4, 1.0).unwrap();
        for v in g.value(alpha).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_concentrates_on_aligned_prototype() {
        let mut g = Graph::new();
        let f = g.leaf(Tensor::new(vec![1, 4], vec![3.0, 0.0, 0.0, 0.0]).unwrap(), false);
        let protos = g.leaf(
            Tensor::new(
                vec![3, 4],
                vec![12.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            )
            .unwrap(),
            false,
        );
        let alpha = prototype_attention(&mut g, f, protos, 4, 1.0).unwrap();
        assert!(g.value(alpha).data()[0] > 0.99);
    }

    #[test]
    fn resonance_selection_and_average() {
        let protos_t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        // one-hot picks the prototype exactly
        let mut g = Graph::new();
        let protos = g.leaf(protos_t.clone(), false);
        let alpha = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(), false);
        let r = prototype_resonance(&mut g, alpha, protos).unwrap();
        assert_eq!(g.value(r).data(), &[-1.0, 0.5, 4.0]);
        // uniform averages them
        let mut g = Graph::new();
        let protos = g.leaf(protos_t, false);
        let alpha = g.leaf(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(), false);
        let r = prototype_resonance(&mut g, alpha, protos).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 1.25, 3.5]);
    }

    #[test]
    fn resonance_stays_in_prototype_hull() {
        let cfg = tiny_cfg();
        let model = fitted_model(&cfg, 5);
        let grids: Vec<FeatureGrid> = (0..3).map(|i| grid(&cfg, move |j| ((i * j) as f64).sin())).collect();
        let grid_refs: Vec<&FeatureGrid> = grids.iter().collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = model.prepare_features(&grid_refs).unwrap();
        let xn = g.leaf(x, false);
        let trace = forward_full(&mut g, &model, &bound, xn, None, Variant::ProtoOnly).unwrap();
        let r = g.value(trace.r).data().to_vec();
        let protos = &model.params[P_PROTOS].value;
        let mut rng = rng_from(&[99]);
        for _ in 0..100 {
            let u: Vec<f64> = (0..cfg.d).map(|_| normal01(&mut rng)).collect();
            for b in 0..3 {
                let ru: f64 = (0..cfg.d).map(|j| r[b * cfg.d + j] * u[j]).sum();
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for m in 0..cfg.m_prototypes {
                    let pu: f64 = (0..cfg.d)
                        .map(|j| protos.data()[m * cfg.d + j] * u[j])
                        .sum();
                    lo = lo.min(pu);
                    hi = hi.max(pu);
                }
                assert!(ru >= lo - 1e-12 && ru <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn resonance_invariant_to_prototype_permutation() {
        // Swapping two prototypes permutes the attention weights with them;
        // with two terms the recombination is bit-exact.
        let mut g = Graph::new();
        let f = g.leaf(Tensor::new(vec![1, 3], vec![0.4, -0.2, 0.9]).unwrap(), false);
        let protos = g.leaf(
            Tensor::new(vec![2, 3], vec![0.3, 0.1, -0.5, 1.2, 0.7, 0.2]).unwrap(),
            false,
        );
        let alpha = prototype_attention(&mut g, f, protos, 3, 1.0).unwrap();
        let r1 = prototype_resonance(&mut g, alpha, protos).unwrap();
        let v1 = g.value(r1).data().to_vec();

        let mut g2 = Graph::new();
        let f2 = g2.leaf(Tensor::new(vec![1, 3], vec![0.4, -0.2, 0.9]).unwrap(), false);
        let swapped = g2.leaf(
            Tensor::new(vec![2, 3], vec![1.2, 0.7, 0.2, 0.3, 0.1, -0.5]).unwrap(),
            false,
        );
        let alpha2 = prototype_attention(&mut g2, f2, swapped, 3, 1.0).unwrap();
        let r2 = prototype_resonance(&mut g2, alpha2, swapped).unwrap();
        for (a, b) in v1.iter().zip(g2.value(r2).data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn res_encode_invariant_to_reference_order() {
        let cfg = tiny_cfg();
        let model = fitted_model(&cfg, 7);
        let t = random_tensor(&cfg, 123);
        // permute the K_r slices (k_r = 2: swap)
        let c = cfg.channels;
        let slice = c * c * 2;
        let mut permuted_values = t.values.clone();
        permuted_values.rotate_left(slice);
        let permuted = ResonanceTensor {
            values: permuted_values,
            ..t.clone()
        };
        let run = |tensor: &ResonanceTensor| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let conv = model.prepare_tensors(&[tensor]).unwrap();
            let cn = g.leaf(conv, false);
            let out = res_encode(&mut g, &bound, cn, 1, cfg.k_r).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(&t);
        let b = run(&permuted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn res_encode_zero_tensor_gives_bias_image() {
        let cfg = tiny_cfg();
        let model = fitted_model(&cfg, 8);
        let t0 = zeros_tensor(&cfg);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let conv = model.prepare_tensors(&[&t0, &t0]).unwrap();
        let cn = g.leaf(conv, false);
        let out = res_encode(&mut g, &bound, cn, 2, cfg.k_r).unwrap();
        let v = g.value(out).data();
        // identical across the batch
        for j in 0..cfg.d {
            assert_eq!(v[j].to_bits(), v[cfg.d + j].to_bits());
        }
        // equals relu(conv bias) pooled -> linear (bias is zero at init, so
        // compute the expected image directly)
        let kernel_bias = model.params[P_RES_BIAS].value.data();
        let pooled: Vec<f64> = kernel_bias.iter().map(|b| b.max(0.0)).collect();
        let w = model.params[P_RES_W].value.data();
        let b2 = model.params[P_RES_B].value.data();
        for j in 0..cfg.d {
            let mut expect = b2[j];
            for (ch, p) in pooled.iter().enumerate() {
                expect += p * w[ch * cfg.d + j];
            }
            assert!((v[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_width_and_zero_views() {
        let cfg = GrnConfig::default();
        assert_eq!(cfg.fusion_width(), 224);
        let tiny = tiny_cfg();
        let model = fitted_model(&tiny, 9);
        // all views zero: logits equal the bias pathway for every row
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let f = g.leaf(Tensor::zeros(vec![2, tiny.d]), false);
        let r = g.leaf(Tensor::zeros(vec![2, tiny.d]), false);
        let ge = g.leaf(Tensor::zeros(vec![2, tiny.d]), false);
        let logits = fuse(&mut g, &bound, f, r, ge, Variant::Full).unwrap();
        let v = g.value(logits).data();
        let hidden: Vec<f64> = model.params[P_FUSE_B1].value.data().iter().map(|b| b.max(0.0)).collect();
        let w2 = model.params[P_FUSE_W2].value.data();
        let b2 = model.params[P_FUSE_B2].value.data();
        for cls in 0..tiny.n_classes {
            let mut expect = b2[cls];
            for (h, hv) in hidden.iter().enumerate() {
                expect += hv * w2[h * tiny.n_classes + cls];
            }
            assert!((v[cls] - expect).abs() < 1e-12);
            assert!((v[tiny.n_classes + cls] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_r_and_g_changes_logits() {
        let cfg = tiny_cfg();
        let model = fitted_model(&cfg, 10);
        let mut rng = rng_from(&[44]);
        let fv: Vec<f64> = (0..cfg.d).map(|_| normal01(&mut rng)).collect();
        let rv: Vec<f64> = (0..cfg.d).map(|_| normal01(&mut rng)).collect();
        let gv: Vec<f64> = (0..cfg.d).map(|_| normal01(&mut rng)).collect();
        let run = |a: &[f64], b: &[f64]| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let f = g.leaf(Tensor::new(vec![1, cfg.d], fv.clone()).unwrap(), false);
            let r = g.leaf(Tensor::new(vec![1, cfg.d], a.to_vec()).unwrap(), false);
            let ge = g.leaf(Tensor::new(vec![1, cfg.d], b.to_vec()).unwrap(), false);
            let logits = fuse(&mut g, &bound, f, r, ge, Variant::Full).unwrap();
            g.value(logits).data().to_vec()
        };
        let ab = run(&rv, &gv);
        let ba = run(&gv, &rv);
        let diff: f64 = ab.iter().zip(&ba).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "fusion is symmetric in R and G: diff = {diff}");
    }

    #[test]
    fn loss_closed_forms() {
        let cfg = tiny_cfg();
        let model = fitted_model(&cfg, 11);
        let grids: Vec<FeatureGrid> = (0..3).map(|i| grid(&cfg, move |j| (i + j) as f64 * 0.07)).collect();
        let grid_refs: Vec<&FeatureGrid> = grids.iter().collect();
        let labels = [0usize, 1, 2];
        // lambda inactive via variant: total equals plain cross-entropy
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = model.prepare_features(&grid_refs).unwrap();
        let xn = g.leaf(x, false);
        let trace = forward_full(&mut g, &model, &bound, xn, None, Variant::IndividualOnly).unwrap();
        let total = loss(&mut g, &model, &bound, &trace, &labels, Variant::IndividualOnly).unwrap();
        let ce = g.cross_entropy_with_logits(trace.logits, &labels).unwrap();
        assert_eq!(g.value(total).item().to_bits(), g.value(ce).item().to_bits());
        // uniform logits: CE = ln(L) whatever the labels
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![3, 3]), false);
        let ce = g.cross_entropy_with_logits(logits, &labels).unwrap();
        assert!((g.value(ce).item() - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn proto_term_vanishes_on_matched_onehot() {
        // F equal to a prototype and attention one-hot on it: zero distance.
        let mut g = Graph::new();
        let protos = g.leaf(
            Tensor::new(vec![2, 3], vec![0.5, -0.2, 0.8, 1.0, 1.0, 1.0]).unwrap(),
            false,
        );
        let f = g.leaf(Tensor::new(vec![1, 3], vec![0.5, -0.2, 0.8]).unwrap(), false);
        let alpha = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), false);
        let d = g.weighted_sqdist(f, protos, alpha).unwrap();
        assert_eq!(g.value(d).data(), &[0.0]);
    }

    #[test]
    fn individual_only_leaves_prototypes_and_resenc_untouched() {
        let cfg = tiny_cfg();
        let model = fitted_model(&cfg, 12);
        let grids: Vec<FeatureGrid> = (0..4).map(|i| grid(&cfg, move |j| (i * j) as f64 * 0.03)).collect();
        let grid_refs: Vec<&FeatureGrid> = grids.iter().collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let x = model.prepare_features(&grid_refs).unwrap();
        let xn = g.leaf(x, false);
        let trace = forward_full(&mut g, &model, &bound, xn, None, Variant::IndividualOnly).unwrap();
        let total = loss(&mut g, &model, &bound, &trace, &[0, 1, 2, 0], Variant::IndividualOnly).unwrap();
        g.backward(total).unwrap();
        for idx in [P_PROTOS, P_RES_KERNEL, P_RES_BIAS, P_RES_W, P_RES_B] {
            assert!(
                g.grad(bound[idx]).iter().all(|v| *v == 0.0),
                "{} received gradient in individual_only",
                model.params[idx].name
            );
        }
        // encoder and fusion do receive gradient
        assert!(g.grad(bound[P_ENC_W1]).iter().any(|v| *v != 0.0));
        assert!(g.grad(bound[P_FUSE_W1]).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn one_proto_step_decreases_weighted_distance() {
        let cfg = tiny_cfg();
        let mut model = fitted_model(&cfg, 13);
        let grids: Vec<FeatureGrid> = (0..4).map(|i| grid(&cfg, move |j| ((i + 2) * j) as f64 * 0.04)).collect();
        let grid_refs: Vec<&FeatureGrid> = grids.iter().collect();
        let measure = |model: &GrnModel| -> f64 {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let x = model.prepare_features(&grid_refs).unwrap();
            let xn = g.leaf(x, false);
            let f = encode(&mut g, &bound, xn).unwrap();
            let alpha = prototype_attention(&mut g, f, bound[P_PROTOS], cfg.d, cfg.temperature).unwrap();
            let d = g.weighted_sqdist(f, bound[P_PROTOS], alpha).unwrap();
            let s = g.sum(d).unwrap();
            g.value(s).item()
        };
        let before = measure(&model);
        // one optimizer step on the prototype regularizer alone
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let x = model.prepare_features(&grid_refs).unwrap();
        let xn = g.leaf(x, false);
        let f = encode(&mut g, &bound, xn).unwrap();
        let alpha = prototype_attention(&mut g, f, bound[P_PROTOS], cfg.d, cfg.temperature).unwrap();
        let d = g.weighted_sqdist(f, bound[P_PROTOS], alpha).unwrap();
        let s = g.sum(d).unwrap();
        g.backward(s).unwrap();
        let adam = AdamConfig::new(1e-3, 0.0);
        for (i, p) in model.params.iter_mut().enumerate() {
            let grad = g.grad(bound[i]).to_vec();
            crate::autograd::adam_step(p.value.data_mut(), &grad, &mut p.state, &adam);
        }
        let after = measure(&model);
        assert!(after < before, "distance {before} -> {after}");
    }

    #[test]
    fn variant_parsing_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("both").is_err());
    }
}
