//! MLP encoder `f` and projection head `g`.
//!
//! The encoder is a stack of affine layers with relu between them and no
//! activation on the last one. The head is affine -> relu -> affine followed
//! by row L2 normalization, so its output rows can be compared directly by
//! dot product.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, Purpose};

pub mod checkpoint;

const ENCODER: &str = "encoder";
const HEAD: &str = "head";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    /// Widths of the encoder layers. The last one is the feature width.
    pub encoder_layers: Vec<usize>,
    pub projection_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderConfig {
    /// Desk-scale defaults: two 64-wide layers and a 32-wide projection.
    pub fn toy(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_layers: vec![64, 64],
            projection_dim: 32,
            seed: 0,
        }
    }

    /// Defaults for flattened 32x32x3 images.
    pub fn cifar() -> Self {
        Self {
            input_dim: 3072,
            encoder_layers: vec![256, 512],
            projection_dim: 128,
            seed: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder_layers.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers.is_empty() {
            return Err(Error::config("encoder needs at least one layer"));
        }
        if self.input_dim == 0 || self.projection_dim == 0 || self.encoder_layers.contains(&0) {
            return Err(Error::config("all layer widths must be at least 1"));
        }
        Ok(())
    }
}

/// Parameters of `f` (and, until discarded, `g`) registered in a [`ParamSet`].
///
/// Names are `encoder.{i}.weight` (`fan_in x fan_out`), `encoder.{i}.bias`
/// (`1 x fan_out`) and `head.{0,1}.{weight,bias}`, stored in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: EncoderConfig,
    params: ParamSet,
}

fn weight_name(block: &str, i: usize) -> String {
    format!("{block}.{i}.weight")
}

fn bias_name(block: &str, i: usize) -> String {
    format!("{block}.{i}.bias")
}

impl ModelParams {
    /// Scaled-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, Purpose::Init, &[]);
        let mut params = ParamSet::new();
        let mut add_layer = |params: &mut ParamSet, block: &str, i: usize, fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(weight_name(block, i), Matrix::from_raw(fan_in, fan_out, w));
            params.push(bias_name(block, i), Matrix::zeros(1, fan_out));
        };
        let mut fan_in = config.input_dim;
        for (i, &width) in config.encoder_layers.iter().enumerate() {
            add_layer(&mut params, ENCODER, i, fan_in, width);
            fan_in = width;
        }
        let feature = config.feature_dim();
        add_layer(&mut params, HEAD, 0, feature, feature);
        add_layer(&mut params, HEAD, 1, feature, config.projection_dim);
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Wraps an existing parameter set, checking that its names and shapes
    /// chain from `input_dim` through the configured widths.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let model = Self { config, params };
        let mut expected = Vec::new();
        let mut fan_in = model.config.input_dim;
        for (i, &w) in model.config.encoder_layers.iter().enumerate() {
            expected.push((weight_name(ENCODER, i), (fan_in, w)));
            expected.push((bias_name(ENCODER, i), (1, w)));
            fan_in = w;
        }
        if model.has_head() {
            let f = model.config.feature_dim();
            expected.push((weight_name(HEAD, 0), (f, f)));
            expected.push((bias_name(HEAD, 0), (1, f)));
            expected.push((weight_name(HEAD, 1), (f, model.config.projection_dim)));
            expected.push((bias_name(HEAD, 1), (1, model.config.projection_dim)));
        }
        if expected.len() != model.params.len() {
            return Err(Error::Format {
                what: "model parameters",
                detail: format!("expected {} tensors, got {}", expected.len(), model.params.len()),
            });
        }
        for ((name, shape), p) in expected.iter().zip(model.params.iter()) {
            if &p.name != name || p.value.shape() != *shape {
                return Err(Error::Format {
                    what: "model parameters",
                    detail: format!(
                        "expected {name} {shape:?}, got {} {:?}",
                        p.name,
                        p.value.shape()
                    ),
                });
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn has_head(&self) -> bool {
        self.params.index_of(&weight_name(HEAD, 0)).is_ok()
    }

    /// Drops the projection head, keeping only the encoder.
    pub fn into_encoder(mut self) -> Self {
        self.params.retain(|name| name.starts_with(ENCODER));
        self
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let layers = |tape: &mut Tape, block: &str, count: usize| -> Vec<(NodeId, NodeId)> {
            (0..count)
                .map(|i| {
                    let w = self.params.index_of(&weight_name(block, i)).expect("layer exists");
                    let b = self.params.index_of(&bias_name(block, i)).expect("layer exists");
                    (tape.param(&self.params, w), tape.param(&self.params, b))
                })
                .collect()
        };
        let encoder = layers(tape, ENCODER, self.config.encoder_layers.len());
        let head = self.has_head().then(|| layers(tape, HEAD, 2));
        BoundModel {
            input_dim: self.config.input_dim,
            encoder,
            head,
        }
    }
}

/// Parameter nodes of a model on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    input_dim: usize,
    encoder: Vec<(NodeId, NodeId)>,
    head: Option<Vec<(NodeId, NodeId)>>,
}

fn affine(tape: &mut Tape, x: NodeId, (w, b): (NodeId, NodeId)) -> Result<NodeId> {
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

impl BoundModel {
    /// `f(x)`: one feature row per input row.
    pub fn encode(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim {
            return Err(Error::shape(
                "encode",
                format!("input has {cols} columns, model expects {}", self.input_dim),
            ));
        }
        let mut h = x;
        let last = self.encoder.len() - 1;
        for (i, &layer) in self.encoder.iter().enumerate() {
            h = affine(tape, h, layer)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// `g(features)`: unit-norm rows.
    pub fn project(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let head = self.head.as_ref().ok_or(Error::MissingHead)?;
        let h = affine(tape, features, head[0])?;
        let h = tape.relu(h)?;
        let h = affine(tape, h, head[1])?;
        tape.normalize_rows(h)
    }
}

/// Forward pass through the encoder only.
pub fn encode(model: &ModelParams, x: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(x.clone());
    let out = bound.encode(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

/// Forward pass through the projection head only.
pub fn project(model: &ModelParams, features: &Matrix) -> Result<Matrix> {
    if features.cols() != model.config.feature_dim() {
        return Err(Error::shape(
            "project",
            format!(
                "features have {} columns, head expects {}",
                features.cols(),
                model.config.feature_dim()
            ),
        ));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let f = tape.constant(features.clone());
    let out = bound.project(&mut tape, f)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::matrix::norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            encoder_layers: vec![5, 4],
            projection_dim: 3,
            seed: 42,
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Straight-line forward pass written against plain slices.
    fn reference_affine(x: &Matrix, w: &Matrix, b: &Matrix, relu: bool) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), w.cols());
        for i in 0..x.rows() {
            for j in 0..w.cols() {
                let mut acc = b.get(0, j);
                for k in 0..x.cols() {
                    acc += x.get(i, k) * w.get(k, j);
                }
                out.set(i, j, if relu { acc.max(0.0) } else { acc });
            }
        }
        out
    }

    fn p<'a>(m: &'a ModelParams, name: &str) -> &'a Matrix {
        m.params().value(m.params().index_of(name).unwrap())
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelParams::init(&small()).unwrap();
        let b = ModelParams::init(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 43;
        assert_ne!(a, ModelParams::init(&other).unwrap());
        for param in a.params().iter() {
            if param.name.ends_with("bias") {
                assert!(param.value.as_slice().iter().all(|&v| v == 0.0));
            } else {
                let (fan_in, fan_out) = param.value.shape();
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                assert!(param.value.as_slice().iter().all(|v| v.abs() <= bound));
            }
        }
        assert_eq!(p(&a, "encoder.0.weight").shape(), (3, 5));
        assert_eq!(p(&a, "encoder.1.weight").shape(), (5, 4));
        assert_eq!(p(&a, "head.1.weight").shape(), (4, 3));
    }

    #[test]
    fn invalid_configs() {
        let mut c = small();
        c.encoder_layers = vec![];
        assert!(ModelParams::init(&c).is_err());
        let mut c = small();
        c.encoder_layers = vec![4, 0];
        assert!(ModelParams::init(&c).is_err());
    }

    #[test]
    fn zero_model_gives_zero_features() {
        let mut m = ModelParams::init(&small()).unwrap();
        for param in m.params_mut().iter_mut() {
            param.value.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        let f = encode(&m, &Matrix::zeros(2, 3)).unwrap();
        assert!(f.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let config = EncoderConfig {
            input_dim: 3,
            encoder_layers: vec![3],
            projection_dim: 2,
            seed: 0,
        };
        let mut m = ModelParams::init(&config).unwrap();
        let w = m.params().index_of("encoder.0.weight").unwrap();
        *m.params_mut().value_mut(w) = Matrix::identity(3);
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, -0.5]]).unwrap();
        assert_eq!(encode(&m, &x).unwrap(), x);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelParams::init(&small()).unwrap();
        for param in m.params_mut().iter_mut() {
            let (r, c) = param.value.shape();
            param.value = random(&mut rng, r, c);
        }
        let x = random(&mut rng, 3, 3);
        let h = reference_affine(&x, p(&m, "encoder.0.weight"), p(&m, "encoder.0.bias"), true);
        let f = reference_affine(&h, p(&m, "encoder.1.weight"), p(&m, "encoder.1.bias"), false);
        let got = encode(&m, &x).unwrap();
        for (a, b) in got.as_slice().iter().zip(f.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }

        let g = reference_affine(&f, p(&m, "head.0.weight"), p(&m, "head.0.bias"), true);
        let mut z = reference_affine(&g, p(&m, "head.1.weight"), p(&m, "head.1.bias"), false);
        for i in 0..z.rows() {
            let n = norm(z.row(i));
            z.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        let got = project(&m, &f).unwrap();
        for (a, b) in got.as_slice().iter().zip(z.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_rows_are_unit_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ModelParams::init(&small()).unwrap();
        let mut f = random(&mut rng, 4, 4);
        let dup = f.row(0).to_vec();
        f.row_mut(3).copy_from_slice(&dup);
        let z = project(&m, &f).unwrap();
        for row in z.iter_rows() {
            assert!((norm(row) - 1.0).abs() <= 1e-12);
        }
        assert_eq!(z.row(0), z.row(3));
    }

    #[test]
    fn projection_of_zero_row_errors() {
        let mut m = ModelParams::init(&small()).unwrap();
        for param in m.params_mut().iter_mut() {
            param.value.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(matches!(
            project(&m, &Matrix::filled(1, 4, 1.0)),
            Err(Error::ZeroRow { row: 0 })
        ));
    }

    #[test]
    fn shape_errors_and_missing_head() {
        let m = ModelParams::init(&small()).unwrap();
        assert!(matches!(encode(&m, &Matrix::zeros(1, 4)), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(project(&m, &Matrix::zeros(1, 3)), Err(Error::ShapeMismatch { .. })));
        let enc = m.into_encoder();
        assert!(!enc.has_head());
        assert_eq!(enc.params().len(), 4);
        assert!(matches!(project(&enc, &Matrix::filled(1, 4, 1.0)), Err(Error::MissingHead)));
    }

    #[test]
    fn composite_gradient_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = ModelParams::init(&small()).unwrap();
        for param in m.params_mut().iter_mut() {
            let (r, c) = param.value.shape();
            param.value = random(&mut rng, r, c);
        }
        let x = random(&mut rng, 4, 3);
        let w = random(&mut rng, 4, 3);
        let config = m.config().clone();
        let f = |tape: &mut Tape, ps: &ParamSet| {
            let model = ModelParams::from_params(config.clone(), ps.clone())?;
            let bound = model.bind(tape);
            let xc = tape.constant(x.clone());
            let h = bound.encode(tape, xc)?;
            let z = bound.project(tape, h)?;
            let wc = tape.constant(w.clone());
            let prod = tape.mul(z, wc)?;
            tape.sum(prod)
        };
        let err = grad_check(f, m.params(), 1e-6).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }
}
