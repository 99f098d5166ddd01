//! Feature extractor `G` with a main head `F` and auxiliary heads `F1, F2, ...`.
//!
//! All heads are linear layers of identical shape on top of the shared
//! features. Auxiliary heads see the features as constants: none of their
//! backward passes produce a gradient for `G`, whether the loss is
//! cross-entropy on labeled data or the discrepancy on unlabeled data.
//!
//! Initialization: backbone weights are drawn from `U(-√(6/fan_in), √(6/fan_in))`,
//! head weights from `U(-1/√fan_in, 1/√fan_in)`, biases are zero. Every layer
//! draws from its own forked stream, so `G` and `F` are identical for a seed
//! regardless of how many auxiliary heads are attached.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, DistanceKind};
use crate::numeric::{relu_in_place, softmax_rows_in_place, Direction, Matrix, Rng};

pub const DEFAULT_AUX_HEADS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config(format!(
                "all layer widths must be >= 1: input {} hidden {:?}",
                self.input_dim, self.hidden_dims
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// Affine layer `x · W + b` with `W` of shape `(in, out)` and `b` of shape `(1, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Matrix::zeros(inputs, outputs),
            bias: Matrix::zeros(1, outputs),
        }
    }

    fn uniform(inputs: usize, outputs: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..inputs * outputs)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Linear {
            weight: Matrix::from_vec(inputs, outputs, data).expect("length matches"),
            bias: Matrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        out.add_row_broadcast(self.bias.data())?;
        Ok(out)
    }

    /// Parameter gradients given the layer input and the gradient on its output.
    fn grads(&self, input: &Matrix, grad_out: &Matrix) -> Result<Linear> {
        let weight = input.matmul_tn(grad_out)?;
        let bias = Matrix::from_vec(1, grad_out.cols(), grad_out.column_sums())?;
        Ok(Linear { weight, bias })
    }

    fn step(&mut self, grads: &Linear, rate: f64, direction: Direction) -> Result<()> {
        let alpha = direction.sign() * rate;
        self.weight.axpy(alpha, &grads.weight)?;
        self.bias.axpy(alpha, &grads.bias)
    }

    fn add(&mut self, other: &Linear) -> Result<()> {
        self.weight.axpy(1.0, &other.weight)?;
        self.bias.axpy(1.0, &other.bias)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Main,
    /// Zero-based auxiliary head index; `Aux(0)` is `F1`.
    Aux(usize),
}

impl Head {
    pub const F1: Head = Head::Aux(0);
    pub const F2: Head = Head::Aux(1);
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    /// Post-activation output of every backbone layer; the last one is `G(x)`.
    hidden: Vec<Matrix>,
    /// `G(x)` when the backbone has no layers.
    passthrough: Option<Matrix>,
    pub logits_main: Matrix,
    pub logits_aux: Vec<Matrix>,
    pub p: Matrix,
    pub p_aux: Vec<Matrix>,
}

impl ForwardRecord {
    pub fn features(&self) -> &Matrix {
        self.hidden
            .last()
            .or(self.passthrough.as_ref())
            .expect("record always holds features")
    }

    pub fn p1(&self) -> &Matrix {
        &self.p_aux[0]
    }

    pub fn p2(&self) -> &Matrix {
        &self.p_aux[1]
    }

    pub fn batch_size(&self) -> usize {
        self.p.rows()
    }

    pub fn aux_refs(&self) -> Vec<&Matrix> {
        self.p_aux.iter().collect()
    }
}

/// Gradient slots. `None` means the loss does not reach those parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Option<Vec<Linear>>,
    pub main: Option<Linear>,
    pub aux: Vec<Option<Linear>>,
}

impl Gradients {
    fn empty(aux_heads: usize) -> Self {
        Gradients {
            backbone: None,
            main: None,
            aux: vec![None; aux_heads],
        }
    }

    /// Sums another set of gradients into this one, slot by slot.
    pub fn merge(&mut self, other: Gradients) -> Result<()> {
        fn merge_slot(dst: &mut Option<Linear>, src: Option<Linear>) -> Result<()> {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.add(&s),
                (None, s) => {
                    *dst = s;
                    Ok(())
                }
                (Some(_), None) => Ok(()),
            }
        }
        match (self.backbone.as_mut(), other.backbone) {
            (Some(d), Some(s)) => {
                for (a, b) in d.iter_mut().zip(&s) {
                    a.add(b)?;
                }
            }
            (None, s) => self.backbone = s,
            (Some(_), None) => {}
        }
        merge_slot(&mut self.main, other.main)?;
        if self.aux.len() != other.aux.len() {
            return Err(Error::config("gradient sets disagree on the number of auxiliary heads"));
        }
        for (d, s) in self.aux.iter_mut().zip(other.aux) {
            merge_slot(d, s)?;
        }
        Ok(())
    }
}

/// Classifier with a shared backbone, a main head and (by default two) auxiliary heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreeHeadClassifier {
    spec: MlpSpec,
    backbone: Vec<Linear>,
    main: Linear,
    aux: Vec<Linear>,
}

impl ThreeHeadClassifier {
    pub fn init(spec: &MlpSpec, rng: &Rng) -> Result<Self> {
        Self::init_with_heads(spec, DEFAULT_AUX_HEADS, rng)
    }

    pub fn init_with_heads(spec: &MlpSpec, aux_heads: usize, rng: &Rng) -> Result<Self> {
        spec.validate()?;
        if aux_heads < 2 {
            return Err(Error::config(format!("need at least 2 auxiliary heads, got {aux_heads}")));
        }
        let mut backbone = Vec::with_capacity(spec.hidden_dims.len());
        let mut fan_in = spec.input_dim;
        for (l, &width) in spec.hidden_dims.iter().enumerate() {
            let mut r = rng.fork_named(&format!("backbone.{l}"));
            let bound = (6.0 / fan_in as f64).sqrt();
            backbone.push(Linear::uniform(fan_in, width, bound, &mut r));
            fan_in = width;
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let main = Linear::uniform(fan_in, spec.num_classes, bound, &mut rng.fork_named("main"));
        let aux = (0..aux_heads)
            .map(|i| {
                let mut r = rng.fork_named(&format!("aux.{i}"));
                Linear::uniform(fan_in, spec.num_classes, bound, &mut r)
            })
            .collect();
        Ok(ThreeHeadClassifier {
            spec: spec.clone(),
            backbone,
            main,
            aux,
        })
    }

    /// Model with every weight and bias at zero.
    pub fn zeroed(spec: &MlpSpec, aux_heads: usize) -> Result<Self> {
        spec.validate()?;
        let mut fan_in = spec.input_dim;
        let mut backbone = Vec::new();
        for &w in &spec.hidden_dims {
            backbone.push(Linear::zeros(fan_in, w));
            fan_in = w;
        }
        Ok(ThreeHeadClassifier {
            spec: spec.clone(),
            backbone,
            main: Linear::zeros(fan_in, spec.num_classes),
            aux: (0..aux_heads).map(|_| Linear::zeros(fan_in, spec.num_classes)).collect(),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn num_aux_heads(&self) -> usize {
        self.aux.len()
    }

    pub fn backbone(&self) -> &[Linear] {
        &self.backbone
    }

    pub fn main_head(&self) -> &Linear {
        &self.main
    }

    pub fn aux_head(&self, i: usize) -> &Linear {
        &self.aux[i]
    }

    pub fn aux_head_mut(&mut self, i: usize) -> &mut Linear {
        &mut self.aux[i]
    }

    pub fn main_head_mut(&mut self) -> &mut Linear {
        &mut self.main
    }

    pub fn backbone_mut(&mut self) -> &mut [Linear] {
        &mut self.backbone
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: x.shape(),
                right: (self.spec.input_dim, self.spec.feature_dim()),
            });
        }
        Ok(())
    }

    /// `G(x)` only.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.backbone {
            h = layer.forward(&h)?;
            relu_in_place(&mut h);
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardRecord> {
        self.check_input(x)?;
        let mut hidden = Vec::with_capacity(self.backbone.len());
        for layer in &self.backbone {
            let mut h = layer.forward(hidden.last().unwrap_or(x))?;
            relu_in_place(&mut h);
            hidden.push(h);
        }
        let passthrough = hidden.is_empty().then(|| x.clone());
        let feats = hidden.last().or(passthrough.as_ref()).expect("features");
        let logits_main = self.main.forward(feats)?;
        let logits_aux = self
            .aux
            .iter()
            .map(|h| h.forward(feats))
            .collect::<Result<Vec<_>>>()?;
        let mut p = logits_main.clone();
        softmax_rows_in_place(&mut p);
        let p_aux = logits_aux
            .iter()
            .map(|l| {
                let mut q = l.clone();
                softmax_rows_in_place(&mut q);
                q
            })
            .collect();
        Ok(ForwardRecord {
            hidden,
            passthrough,
            logits_main,
            logits_aux,
            p,
            p_aux,
        })
    }

    /// Main-head class predictions.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let feats = self.features(x)?;
        Ok(self.main.forward(&feats)?.argmax_rows())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    fn check_record(&self, record: &ForwardRecord, x: Option<&Matrix>) -> Result<()> {
        if record.p_aux.len() != self.aux.len() {
            return Err(Error::config("forward record does not match the model's head count"));
        }
        if let Some(x) = x {
            if x.rows() != record.batch_size() {
                return Err(Error::ShapeMismatch {
                    op: "backward",
                    left: x.shape(),
                    right: record.p.shape(),
                });
            }
        }
        Ok(())
    }

    /// Backpropagates a gradient on `G(x)` through the backbone.
    fn backbone_grads(&self, record: &ForwardRecord, x: &Matrix, grad_feat: Matrix) -> Result<Vec<Linear>> {
        let mut grads = Vec::with_capacity(self.backbone.len());
        let mut grad = grad_feat;
        for l in (0..self.backbone.len()).rev() {
            let out = &record.hidden[l];
            for (g, &a) in grad.data_mut().iter_mut().zip(out.data()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            let input = if l == 0 { x } else { &record.hidden[l - 1] };
            grads.push(self.backbone[l].grads(input, &grad)?);
            if l > 0 {
                grad = grad.matmul_nt(&self.backbone[l].weight)?;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    /// Cross-entropy gradients for one head.
    ///
    /// `Head::Main` fills the main-head and backbone slots. An auxiliary head
    /// fills only its own slot.
    pub fn backward_ce(&self, record: &ForwardRecord, x: &Matrix, labels: &[usize], head: Head) -> Result<Gradients> {
        self.check_record(record, Some(x))?;
        let mut out = Gradients::empty(self.aux.len());
        let feats = record.features();
        match head {
            Head::Main => {
                let dlogits = losses::cross_entropy_logit_grad(&record.p, labels)?;
                out.main = Some(self.main.grads(feats, &dlogits)?);
                if !self.backbone.is_empty() {
                    let dfeat = dlogits.matmul_nt(&self.main.weight)?;
                    out.backbone = Some(self.backbone_grads(record, x, dfeat)?);
                }
            }
            Head::Aux(i) => {
                let p = record
                    .p_aux
                    .get(i)
                    .ok_or_else(|| Error::config(format!("no auxiliary head {i}")))?;
                let dlogits = losses::cross_entropy_logit_grad(p, labels)?;
                out.aux[i] = Some(self.aux[i].grads(feats, &dlogits)?);
            }
        }
        Ok(out)
    }

    /// Cross-entropy gradients for every head at once.
    pub fn backward_ce_all(&self, record: &ForwardRecord, x: &Matrix, labels: &[usize]) -> Result<Gradients> {
        let mut g = self.backward_ce(record, x, labels, Head::Main)?;
        for i in 0..self.aux.len() {
            g.merge(self.backward_ce(record, x, labels, Head::Aux(i))?)?;
        }
        Ok(g)
    }

    /// Gradients of the discrepancy loss with respect to the auxiliary heads only.
    pub fn backward_dis(&self, record: &ForwardRecord, kind: DistanceKind) -> Result<Gradients> {
        self.check_record(record, None)?;
        let aux = record.aux_refs();
        let prob_grads = losses::discrepancy_prob_grads(&record.p, &aux, kind);
        let feats = record.features();
        let mut out = Gradients::empty(self.aux.len());
        for (i, pg) in prob_grads.iter().enumerate() {
            let dlogits = losses::softmax_backward(&record.p_aux[i], pg);
            out.aux[i] = Some(self.aux[i].grads(feats, &dlogits)?);
        }
        Ok(out)
    }

    /// Applies every present gradient slot with the given rate and sign.
    pub fn apply(&mut self, grads: &Gradients, rate: f64, direction: Direction) -> Result<()> {
        if let Some(bb) = &grads.backbone {
            for (layer, g) in self.backbone.iter_mut().zip(bb) {
                layer.step(g, rate, direction)?;
            }
        }
        if let Some(g) = &grads.main {
            self.main.step(g, rate, direction)?;
        }
        for (head, g) in self.aux.iter_mut().zip(&grads.aux) {
            if let Some(g) = g {
                head.step(g, rate, direction)?;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.main))
            .chain(&self.aux)
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// Serialized backbone and main head: the parameters the task model is made of.
    pub fn task_params_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Task<'a> {
            backbone: &'a [Linear],
            main: &'a Linear,
        }
        serde_json::to_vec(&Task {
            backbone: &self.backbone,
            main: &self.main,
        })
        .expect("serializing plain data")
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(
            w,
            &Checkpoint {
                format: CHECKPOINT_FORMAT.to_owned(),
                version: CHECKPOINT_VERSION,
                model: self.clone(),
            },
        )?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(r)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.model.validate_shapes()?;
        Ok(ck.model)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to memory");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    fn validate_shapes(&self) -> Result<()> {
        self.spec.validate()?;
        let mut fan_in = self.spec.input_dim;
        let bad = |what: &str| Error::config(format!("checkpoint layer shapes disagree with spec at {what}"));
        if self.backbone.len() != self.spec.hidden_dims.len() {
            return Err(bad("backbone depth"));
        }
        for (l, (layer, &w)) in self.backbone.iter().zip(&self.spec.hidden_dims).enumerate() {
            if layer.weight.shape() != (fan_in, w) || layer.bias.shape() != (1, w) {
                return Err(bad(&format!("backbone.{l}")));
            }
            fan_in = w;
        }
        let c = self.spec.num_classes;
        for (name, head) in std::iter::once(("main", &self.main)).chain(self.aux.iter().map(|h| ("aux", h))) {
            if head.weight.shape() != (fan_in, c) || head.bias.shape() != (1, c) {
                return Err(bad(name));
            }
        }
        if self.aux.len() < 2 {
            return Err(bad("aux head count"));
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "mcdal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ThreeHeadClassifier,
}
