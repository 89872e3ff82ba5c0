//! Encoder + MLP patch classifier with position injection at the final dense
//! layer, reverse-mode gradients, Adam and model files.
//!
//! Architecture for patch size `p`:
//!
//! ```text
//! p x p x 1 -> conv3x3(c1) -> ReLU -> maxpool2 -> conv3x3(c2) -> ReLU -> maxpool2
//!           -> flatten (c2 * ceil(p/4)^2) -> dense(hidden) -> ReLU
//!           -> concat(position x 3) -> dense(1) -> sigmoid
//! ```

mod adam;
mod io;
mod layers;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use io::{load_model, load_model_expecting, model_bytes, save_model, MODEL_MAGIC};
pub use layers::{conv2d_forward, sigmoid};

use rand::Rng;

use crate::error::{Error, Result};
use crate::patches::NormStats;
use crate::seeds;
use layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, maxpool_forward, pooled,
    relu_inplace,
};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;
pub const N_POS: usize = 3;
pub const KERNEL: usize = 3;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const FC1_W: usize = 4;
const FC1_B: usize = 5;
const FC2_W: usize = 6;
const FC2_B: usize = 7;

/// Shape configuration of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub patch_size: usize,
    pub channels: [usize; 2],
    pub hidden: usize,
    /// When false the position input is replaced by zeros.
    pub position_features: bool,
}

impl ModelSpec {
    pub fn new(patch_size: usize) -> Self {
        ModelSpec {
            patch_size,
            channels: [8, 16],
            hidden: 32,
            position_features: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 || self.patch_size == 0 {
            return Err(Error::EvenPatchSize(self.patch_size));
        }
        if self.channels.contains(&0) || self.hidden == 0 {
            return Err(Error::InvalidParameter("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Side length after the first pooling.
    pub fn side1(&self) -> usize {
        pooled(self.patch_size)
    }

    /// Side length after the second pooling, `ceil(p / 4)`.
    pub fn side2(&self) -> usize {
        pooled(self.side1())
    }

    pub fn flat(&self) -> usize {
        self.channels[1] * self.side2() * self.side2()
    }

    pub fn param_shapes(&self) -> [Vec<usize>; 8] {
        let [c1, c2] = self.channels;
        [
            vec![KERNEL, KERNEL, 1, c1],
            vec![c1],
            vec![KERNEL, KERNEL, c1, c2],
            vec![c2],
            vec![self.hidden, self.flat()],
            vec![self.hidden],
            vec![1, self.hidden + N_POS],
            vec![1],
        ]
    }

    /// Patch size, feature layout and channel spec, as stored in model files.
    pub fn fingerprint(&self) -> String {
        format!(
            "p={} features=dx,dy,dist position={} channels=1,{},{} hidden={}",
            self.patch_size,
            if self.position_features { "on" } else { "off" },
            self.channels[0],
            self.channels[1],
            self.hidden
        )
    }
}

/// Parameters, optimizer state and the intensity window used in training.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
    pub norm: Option<NormStats>,
}

/// One training example.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub pixels: &'a [f64],
    pub pos: [f64; 3],
    pub label: u8,
}

impl CnnModel {
    /// All-zero parameters.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let params: Vec<Tensor> = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(CnnModel {
            adam: AdamState::new(&params),
            spec,
            params,
            norm: None,
        })
    }

    /// He-uniform weights, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    /// Fan-in is `9 * cin` for the convolutions and the input width for dense layers.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut model = CnnModel::zeros(spec)?;
        let mut rng = seeds::rng(seed);
        let [c1, _] = spec.channels;
        let fan_in = [
            (CONV1_W, KERNEL * KERNEL),
            (CONV2_W, KERNEL * KERNEL * c1),
            (FC1_W, spec.flat()),
            (FC2_W, spec.hidden + N_POS),
        ];
        for (idx, fan) in fan_in {
            let limit = (6.0 / fan as f64).sqrt();
            for w in model.params[idx].data.iter_mut() {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    /// Lesion probability of one (already normalized) patch.
    pub fn forward(&self, pixels: &[f64], pos: [f64; 3]) -> Result<f64> {
        let mut ws = Workspace::new(&self.spec);
        self.forward_with(&mut ws, pixels, pos)
    }

    /// As [`CnnModel::forward`], reusing scratch buffers.
    pub fn forward_with(&self, ws: &mut Workspace, pixels: &[f64], pos: [f64; 3]) -> Result<f64> {
        let p = self.spec.patch_size;
        if pixels.len() != p * p {
            return Err(Error::ShapeMismatch(format!(
                "model expects {p}x{p} patches, got {} pixels",
                pixels.len()
            )));
        }
        if ws.spec != self.spec {
            *ws = Workspace::new(&self.spec);
        }
        Ok(self.run_forward(ws, pixels, pos))
    }

    fn run_forward(&self, ws: &mut Workspace, pixels: &[f64], pos: [f64; 3]) -> f64 {
        let s = &self.spec;
        let (p, q1, q2) = (s.patch_size, s.side1(), s.side2());
        let [c1, c2] = s.channels;
        let prm = &self.params;

        conv_forward(
            pixels,
            p,
            p,
            1,
            &prm[CONV1_W].data,
            &prm[CONV1_B].data,
            KERNEL,
            c1,
            &mut ws.a1,
        );
        relu_inplace(&mut ws.a1);
        maxpool_forward(&ws.a1, p, p, c1, &mut ws.m1, &mut ws.arg1);
        conv_forward(
            &ws.m1,
            q1,
            q1,
            c1,
            &prm[CONV2_W].data,
            &prm[CONV2_B].data,
            KERNEL,
            c2,
            &mut ws.a2,
        );
        relu_inplace(&mut ws.a2);
        maxpool_forward(&ws.a2, q1, q1, c2, &mut ws.m2, &mut ws.arg2);
        debug_assert_eq!(ws.m2.len(), c2 * q2 * q2);
        let hidden = s.hidden;
        dense_forward(
            &ws.m2,
            &prm[FC1_W].data,
            &prm[FC1_B].data,
            &mut ws.head[..hidden],
        );
        relu_inplace(&mut ws.head[..hidden]);
        let pos = if s.position_features { pos } else { [0.0; 3] };
        ws.head[hidden..].copy_from_slice(&pos);
        let mut z = [0.0];
        dense_forward(&ws.head, &prm[FC2_W].data, &prm[FC2_B].data, &mut z);
        ws.logit = z[0];
        sigmoid(z[0]).clamp(PROB_EPS, 1.0 - PROB_EPS)
    }

    /// Mean binary cross-entropy over `batch` and its exact gradient with
    /// respect to every parameter.
    pub fn backward(&self, batch: &[Sample<'_>]) -> Result<(f64, Vec<Tensor>)> {
        let mut ws = Workspace::new(&self.spec);
        let mut grads: Vec<Tensor> = self
            .spec
            .param_shapes()
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        let (loss, _) = self.accumulate_gradients(&mut ws, batch, &mut grads)?;
        Ok((loss, grads))
    }

    /// Adds the mean-loss gradient of `batch` into `grads`. Returns the mean
    /// loss and the number of samples classified correctly (`prob >= 0.5` is positive).
    pub fn accumulate_gradients(
        &self,
        ws: &mut Workspace,
        batch: &[Sample<'_>],
        grads: &mut [Tensor],
    ) -> Result<(f64, usize)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if ws.spec != self.spec {
            *ws = Workspace::new(&self.spec);
        }
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut correct = 0;
        for sample in batch {
            let prob = self.forward_with(ws, sample.pixels, sample.pos)?;
            loss += loss_bce(prob, sample.label);
            correct += usize::from(u8::from(prob >= 0.5) == sample.label);
            // d(BCE)/d(logit) = sigmoid(z) - y
            let dz = (sigmoid(ws.logit) - f64::from(sample.label)) / n;
            self.backprop(ws, sample.pixels, dz, grads);
        }
        Ok((loss / n, correct))
    }

    fn backprop(&self, ws: &mut Workspace, pixels: &[f64], dz: f64, grads: &mut [Tensor]) {
        let s = self.spec;
        let (p, q1) = (s.patch_size, s.side1());
        let [c1, c2] = s.channels;
        let hidden = s.hidden;
        let prm = &self.params;

        // final dense layer over [hidden activations, position]
        {
            let (gw, rest) = grads[FC2_W..].split_at_mut(1);
            dense_backward(
                &ws.head,
                &prm[FC2_W].data,
                &[dz],
                &mut gw[0].data,
                &mut rest[0].data,
                Some(&mut ws.g_head),
            );
        }
        for (g, h) in ws.g_head[..hidden].iter_mut().zip(&ws.head[..hidden]) {
            if *h <= 0.0 {
                *g = 0.0;
            }
        }
        {
            let (gw, rest) = grads[FC1_W..].split_at_mut(1);
            dense_backward(
                &ws.m2,
                &prm[FC1_W].data,
                &ws.g_head[..hidden],
                &mut gw[0].data,
                &mut rest[0].data,
                Some(&mut ws.g_m2),
            );
        }
        ws.g_a2.iter_mut().for_each(|v| *v = 0.0);
        for (g, &at) in ws.g_m2.iter().zip(&ws.arg2) {
            ws.g_a2[at] += g;
        }
        for (g, a) in ws.g_a2.iter_mut().zip(&ws.a2) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        ws.g_m1.iter_mut().for_each(|v| *v = 0.0);
        {
            let (gw, rest) = grads[CONV2_W..].split_at_mut(1);
            conv_backward(
                &ws.m1,
                q1,
                q1,
                c1,
                &prm[CONV2_W].data,
                KERNEL,
                c2,
                &ws.g_a2,
                &mut gw[0].data,
                &mut rest[0].data,
                Some(&mut ws.g_m1),
            );
        }
        ws.g_a1.iter_mut().for_each(|v| *v = 0.0);
        for (g, &at) in ws.g_m1.iter().zip(&ws.arg1) {
            ws.g_a1[at] += g;
        }
        for (g, a) in ws.g_a1.iter_mut().zip(&ws.a1) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        let (gw, rest) = grads[CONV1_W..].split_at_mut(1);
        conv_backward(
            pixels,
            p,
            p,
            1,
            &prm[CONV1_W].data,
            KERNEL,
            c1,
            &ws.g_a1,
            &mut gw[0].data,
            &mut rest[0].data,
            None,
        );
    }
}

/// Scratch buffers for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Workspace {
    spec: ModelSpec,
    a1: Vec<f64>,
    m1: Vec<f64>,
    arg1: Vec<usize>,
    a2: Vec<f64>,
    m2: Vec<f64>,
    arg2: Vec<usize>,
    head: Vec<f64>,
    logit: f64,
    g_head: Vec<f64>,
    g_m2: Vec<f64>,
    g_a2: Vec<f64>,
    g_m1: Vec<f64>,
    g_a1: Vec<f64>,
}

impl Workspace {
    pub fn new(spec: &ModelSpec) -> Self {
        let (p, q1, q2) = (spec.patch_size, spec.side1(), spec.side2());
        let [c1, c2] = spec.channels;
        Workspace {
            spec: *spec,
            a1: vec![0.0; p * p * c1],
            m1: vec![0.0; q1 * q1 * c1],
            arg1: vec![0; q1 * q1 * c1],
            a2: vec![0.0; q1 * q1 * c2],
            m2: vec![0.0; q2 * q2 * c2],
            arg2: vec![0; q2 * q2 * c2],
            head: vec![0.0; spec.hidden + N_POS],
            logit: 0.0,
            g_head: vec![0.0; spec.hidden + N_POS],
            g_m2: vec![0.0; q2 * q2 * c2],
            g_a2: vec![0.0; q1 * q1 * c2],
            g_m1: vec![0.0; q1 * q1 * c1],
            g_a1: vec![0.0; p * p * c1],
        }
    }
}

/// `-[y ln(prob) + (1 - y) ln(1 - prob)]` with `prob` clamped to `[1e-12, 1 - 1e-12]`.
pub fn loss_bce(prob: f64, label: u8) -> f64 {
    let q = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -q.ln()
    } else {
        -(1.0 - q).ln()
    }
}

pub fn mean_bce(probs: &[f64], labels: &[u8]) -> f64 {
    let total: f64 = probs.iter().zip(labels).map(|(p, y)| loss_bce(*p, *y)).sum();
    total / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_outputs_half() {
        let m = CnnModel::zeros(ModelSpec::new(11)).unwrap();
        assert_eq!(m.forward(&[0.3; 121], [1.0, 2.0, 3.0]).unwrap(), 0.5);
    }

    #[test]
    fn dense_input_width() {
        for (p, q) in [(5, 2), (7, 2), (9, 3), (11, 3)] {
            let s = ModelSpec::new(p);
            assert_eq!(s.side2(), q);
            assert_eq!(s.flat(), 16 * q * q);
        }
    }

    #[test]
    fn wrong_patch_size_rejected() {
        let m = CnnModel::zeros(ModelSpec::new(5)).unwrap();
        assert!(matches!(
            m.forward(&[0.0; 24], [0.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(CnnModel::zeros(ModelSpec::new(4)).is_err());
    }

    #[test]
    fn bce_values() {
        assert!((loss_bce(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss_bce(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        let near = loss_bce(1.0 - 1e-12, 1);
        assert!((near - 1e-12).abs() < 1e-15, "{near}");
        assert!(loss_bce(0.0, 1).is_finite());
        assert!(loss_bce(1.0, 0).is_finite());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let s = ModelSpec::new(11);
        let a = CnnModel::init(s, 9).unwrap();
        assert_eq!(a, CnnModel::init(s, 9).unwrap());
        assert_ne!(a, CnnModel::init(s, 10).unwrap());
        let limit = (6.0f64 / 9.0).sqrt();
        assert!(a.params[CONV1_W].data.iter().all(|w| w.abs() < limit));
        assert!(a.params[CONV1_B].data.iter().all(|w| *w == 0.0));
    }
}
