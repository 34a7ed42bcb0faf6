//! Encoder and projector MLPs shared by both views.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::coder::SegmentConfig;
use crate::diffcore::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Layer widths of an MLP, input first. ReLU sits between layers, not after
/// the last one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl TryFrom<Vec<usize>> for MlpSpec {
    type Error = Error;
    fn try_from(widths: Vec<usize>) -> Result<Self> {
        MlpSpec::new(widths)
    }
}

impl From<MlpSpec> for Vec<usize> {
    fn from(s: MlpSpec) -> Self {
        s.widths
    }
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs an input and at least one layer width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive: {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Weight `in x out` and bias `out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array,
    pub bias: Array,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect();
                Dense {
                    weight: Array::new(vec![fan_in, fan_out], data).unwrap(),
                    bias: Array::zeros(&[fan_out]),
                }
            })
            .collect();
        Self { spec, layers }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.layers.len() != self.spec.num_layers() {
            return Err(Error::Config(format!(
                "{name}: {} layers stored for spec {:?}",
                self.layers.len(),
                self.spec.widths
            )));
        }
        for (k, (layer, w)) in self.layers.iter().zip(self.spec.widths.windows(2)).enumerate() {
            if layer.weight.shape() != [w[0], w[1]] || layer.bias.shape() != [w[1]] {
                return Err(Error::Config(format!(
                    "{name} layer {k}: weight {:?} / bias {:?} do not match widths {} -> {}",
                    layer.weight.shape(),
                    layer.bias.shape(),
                    w[0],
                    w[1]
                )));
            }
            if !layer.weight.is_finite() || !layer.bias.is_finite() {
                return Err(Error::Config(format!("{name} layer {k} has non-finite parameters")));
            }
        }
        Ok(())
    }
}

/// Encoder and projector parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Mlp,
    pub projector: Mlp,
    pub seed: u64,
}

/// Parameter leaves of a [`ModelParams`] on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    encoder: Vec<(Var, Var)>,
    projector: Vec<(Var, Var)>,
}

impl BoundModel {
    /// Leaves in [`ModelParams::tensors`] order.
    pub fn leaves(&self) -> Vec<Var> {
        self.encoder
            .iter()
            .chain(&self.projector)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

impl ModelParams {
    /// Gaussian weights with std `sqrt(2 / fan_in)`, zero biases. Encoder
    /// layers draw from the seeded stream first, then projector layers.
    pub fn init(
        encoder: MlpSpec,
        projector: MlpSpec,
        segments: &SegmentConfig,
        seed: u64,
    ) -> Result<Self> {
        check_specs(&encoder, &projector, segments)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::init(encoder, &mut rng);
        let projector = Mlp::init(projector, &mut rng);
        Ok(Self {
            encoder,
            projector,
            seed,
        })
    }

    /// Checks stored shapes against the specs and the segment geometry.
    pub fn validate(&self, segments: &SegmentConfig) -> Result<()> {
        check_specs(&self.encoder.spec, &self.projector.spec, segments)?;
        self.encoder.check("encoder")?;
        self.projector.check("projector")
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.spec.input_dim()
    }

    pub fn representation_dim(&self) -> usize {
        self.encoder.spec.output_dim()
    }

    /// Named parameter tensors: `encoder.{k}.weight`, `encoder.{k}.bias`,
    /// then the projector's.
    pub fn tensors(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (name, mlp) in [("encoder", &self.encoder), ("projector", &self.projector)] {
            for (k, layer) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{k}.weight"), &layer.weight));
                out.push((format!("{name}.{k}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        self.encoder
            .layers
            .iter_mut()
            .chain(self.projector.layers.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Whether tensor `k` (in [`Self::tensors`] order) is a bias.
    pub fn is_bias(k: usize) -> bool {
        k % 2 == 1
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut bind = |mlp: &Mlp| {
            mlp.layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect::<Vec<_>>()
        };
        let encoder = bind(&self.encoder);
        let projector = bind(&self.projector);
        BoundModel { encoder, projector }
    }

    /// Reuses leaves already on a tape, given in [`Self::tensors`] order.
    pub fn bind_leaves(&self, leaves: &[Var]) -> Result<BoundModel> {
        let expected = 2 * (self.encoder.layers.len() + self.projector.layers.len());
        if leaves.len() != expected {
            return Err(Error::Usage(format!("{} leaves for {expected} parameter tensors", leaves.len())));
        }
        let pairs: Vec<(Var, Var)> = leaves.chunks(2).map(|c| (c[0], c[1])).collect();
        let (encoder, projector) = pairs.split_at(self.encoder.layers.len());
        Ok(BoundModel {
            encoder: encoder.to_vec(),
            projector: projector.to_vec(),
        })
    }

    /// Gradients for every tensor, in [`Self::tensors`] order.
    pub fn collect_gradients(&self, bound: &BoundModel, grads: &mut Gradients) -> Vec<Array> {
        bound
            .leaves()
            .into_iter()
            .zip(self.tensors())
            .map(|(v, (_, a))| grads.take(v).unwrap_or_else(|| Array::zeros(a.shape())))
            .collect()
    }

    /// Encoder output for a frozen batch, off any training tape.
    pub fn represent(&self, inputs: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let x = tape.constant(inputs.clone());
        let layers: Vec<(Var, Var)> = self
            .encoder
            .layers
            .iter()
            .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
            .collect();
        let out = forward(&mut tape, &layers, x, &self.encoder.spec)?;
        Ok(tape.value(out).clone())
    }

    /// Projector output (embedding) for a frozen batch.
    pub fn embed(&self, inputs: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(inputs.clone());
        let rep = encode(&mut tape, self, &bound, x)?;
        let emb = project(&mut tape, self, &bound, rep)?;
        Ok(tape.value(emb).clone())
    }
}

fn check_specs(encoder: &MlpSpec, projector: &MlpSpec, segments: &SegmentConfig) -> Result<()> {
    if encoder.output_dim() != projector.input_dim() {
        return Err(Error::Config(format!(
            "encoder output width {} does not feed projector input width {}",
            encoder.output_dim(),
            projector.input_dim()
        )));
    }
    if projector.output_dim() != segments.embed_dim() {
        return Err(Error::Config(format!(
            "projector output width {} must equal {} segments x {} units = {}",
            projector.output_dim(),
            segments.num_segments(),
            segments.segment_dim(),
            segments.embed_dim()
        )));
    }
    Ok(())
}

fn forward(tape: &mut Tape, layers: &[(Var, Var)], input: Var, spec: &MlpSpec) -> Result<Var> {
    let (_, width) = tape.value(input).dims2()?;
    if width != spec.input_dim() {
        return Err(Error::shape("mlp input", &[tape.shape(input), spec.widths()]));
    }
    let mut h = input;
    for (k, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if k + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Representation: encoder forward on the tape.
pub fn encode(tape: &mut Tape, params: &ModelParams, bound: &BoundModel, batch: Var) -> Result<Var> {
    forward(tape, &bound.encoder, batch, &params.encoder.spec)
}

/// Embedding: projector forward on the tape.
pub fn project(tape: &mut Tape, params: &ModelParams, bound: &BoundModel, representation: Var) -> Result<Var> {
    forward(tape, &bound.projector, representation, &params.projector.spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(w: &[usize]) -> MlpSpec {
        MlpSpec::new(w.to_vec()).unwrap()
    }

    fn small(seed: u64) -> ModelParams {
        let seg = SegmentConfig::new(2, 2).unwrap();
        ModelParams::init(spec(&[3, 5, 4]), spec(&[4, 6, 4]), &seg, seed).unwrap()
    }

    #[test]
    fn spec_rules() {
        assert!(MlpSpec::new(vec![4]).is_err());
        assert!(MlpSpec::new(vec![4, 0, 2]).is_err());
        assert_eq!(spec(&[4, 8, 2]).num_layers(), 2);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(small(3), small(3));
        assert_ne!(small(3).encoder.layers[0].weight, small(4).encoder.layers[0].weight);
    }

    #[test]
    fn init_checks_dimensions() {
        let seg = SegmentConfig::new(2, 2).unwrap();
        assert!(ModelParams::init(spec(&[3, 5]), spec(&[4, 4]), &seg, 0).is_err());
        assert!(ModelParams::init(spec(&[3, 4]), spec(&[4, 6]), &seg, 0).is_err());
    }

    #[test]
    fn zero_input_gives_zero_first_preactivation() {
        let p = small(1);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let x = tape.constant(Array::zeros(&[2, 3]));
        let (w, b) = bound.encoder[0];
        let z = tape.matmul(x, w).unwrap();
        let z = tape.add_row(z, b).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_propagate() {
        let seg = SegmentConfig::new(2, 3).unwrap();
        for enc in [vec![5, 7], vec![5, 8, 7], vec![5, 9, 8, 7]] {
            for proj in [vec![7, 6], vec![7, 4, 6], vec![7, 3, 4, 6]] {
                let p = ModelParams::init(spec(&enc), spec(&proj), &seg, 0).unwrap();
                let x = Array::filled(&[4, 5], 0.3);
                assert_eq!(p.represent(&x).unwrap().shape(), &[4, 7]);
                assert_eq!(p.embed(&x).unwrap().shape(), &[4, 6]);
            }
        }
    }

    #[test]
    fn wrong_input_width_is_an_error() {
        let p = small(0);
        assert!(matches!(p.represent(&Array::zeros(&[2, 4])), Err(Error::Shape { .. })));
    }

    #[test]
    fn tensor_names_and_bias_flags() {
        let p = small(0);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "encoder.0.weight");
        assert_eq!(names[3], "encoder.1.bias");
        assert_eq!(names[4], "projector.0.weight");
        assert!(ModelParams::is_bias(3) && !ModelParams::is_bias(4));
        assert_eq!(p.num_parameters(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 6 + 6 + 6 * 4 + 4);
    }
}
