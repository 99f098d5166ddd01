#![allow(dead_code)]

use mcdal_core::losses::{cross_entropy, discrepancy_loss_multi};
use mcdal_core::model::{Gradients, Linear};
use mcdal_core::{DistanceKind, Matrix, MlpSpec, Rng, ThreeHeadClassifier};

/// Which layer a parameter lives in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    Backbone(usize),
    Main,
    Aux(usize),
}

pub fn layer_mut(model: &mut ThreeHeadClassifier, layer: Layer) -> &mut Linear {
    match layer {
        Layer::Backbone(l) => &mut model.backbone_mut()[l],
        Layer::Main => model.main_head_mut(),
        Layer::Aux(i) => model.aux_head_mut(i),
    }
}

fn grad_layer(g: &Gradients, layer: Layer) -> Option<&Linear> {
    match layer {
        Layer::Backbone(l) => g.backbone.as_ref().map(|b| &b[l]),
        Layer::Main => g.main.as_ref(),
        Layer::Aux(i) => g.aux[i].as_ref(),
    }
}

pub fn layers(model: &ThreeHeadClassifier) -> Vec<Layer> {
    (0..model.backbone().len())
        .map(Layer::Backbone)
        .chain(std::iter::once(Layer::Main))
        .chain((0..model.num_aux_heads()).map(Layer::Aux))
        .collect()
}

/// Small network with random widths, heads and nonzero biases, plus a batch.
pub struct Case {
    pub model: ThreeHeadClassifier,
    pub x: Matrix,
    pub y: Vec<usize>,
}

pub fn random_case(seed: u64, classes: usize, aux_heads: usize) -> Case {
    let mut rng = Rng::new(seed);
    let dim = |rng: &mut Rng| 1 + (rng.uniform() * 16.0) as usize;
    let input = dim(&mut rng);
    let depth = 1 + (rng.uniform() * 2.0) as usize;
    let hidden: Vec<usize> = (0..depth).map(|_| dim(&mut rng)).collect();
    let spec = MlpSpec::new(input, hidden, classes).unwrap();
    let mut model = ThreeHeadClassifier::init_with_heads(&spec, aux_heads, &rng.fork(1)).unwrap();
    for layer in layers(&model) {
        let lin = layer_mut(&mut model, layer);
        for v in lin.bias.data_mut() {
            *v = 0.1 * rng.normal();
        }
        for v in lin.weight.data_mut() {
            *v *= 1.5;
        }
    }
    let batch = 1 + (rng.uniform() * 8.0) as usize;
    let data: Vec<f64> = (0..batch * input).map(|_| rng.normal()).collect();
    let x = Matrix::from_vec(batch, input, data).unwrap();
    let y = (0..batch).map(|_| (rng.uniform() * classes as f64) as usize).collect();
    Case { model, x, y }
}

pub fn ce_main(model: &ThreeHeadClassifier, x: &Matrix, y: &[usize]) -> f64 {
    cross_entropy(&model.forward(x).unwrap().p, y).unwrap()
}

pub fn ce_aux(model: &ThreeHeadClassifier, x: &Matrix, y: &[usize], i: usize) -> f64 {
    cross_entropy(&model.forward(x).unwrap().p_aux[i], y).unwrap()
}

pub fn dis_loss(model: &ThreeHeadClassifier, x: &Matrix, kind: DistanceKind) -> f64 {
    let rec = model.forward(x).unwrap();
    discrepancy_loss_multi(&rec.p, &rec.aux_refs(), kind).unwrap()
}

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative errors. A central difference at `FD_STEP`
/// on losses of order 1 carries cancellation noise near 1e-10, so entries
/// smaller than about 1e-5 cannot be resolved to 1e-4 relative accuracy.
pub const REL_FLOOR: f64 = 1e-5;

/// Largest relative error between the analytic gradient of `layer` and a
/// central difference of `loss`.
pub fn max_rel_error(
    model: &ThreeHeadClassifier,
    grads: &Gradients,
    layer: Layer,
    loss: impl Fn(&ThreeHeadClassifier) -> f64,
) -> f64 {
    let g = grad_layer(grads, layer).unwrap_or_else(|| panic!("no gradient for {layer:?}"));
    let mut worst = 0.0f64;
    for bias in [false, true] {
        let analytic = if bias { g.bias.data() } else { g.weight.data() };
        for (k, &a) in analytic.iter().enumerate() {
            let mut m = model.clone();
            let at = |m: &mut ThreeHeadClassifier, v: f64| {
                let lin = layer_mut(m, layer);
                let d = if bias { lin.bias.data_mut() } else { lin.weight.data_mut() };
                d[k] = v;
            };
            let base = {
                let lin = layer_mut(&mut m, layer);
                if bias {
                    lin.bias.data()[k]
                } else {
                    lin.weight.data()[k]
                }
            };
            at(&mut m, base + FD_STEP);
            let up = loss(&m);
            at(&mut m, base - FD_STEP);
            let down = loss(&m);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Max relative error of cross-entropy gradients over every head, each head
/// checked against its own loss.
pub fn ce_gradient_error(case: &Case) -> f64 {
    let Case { model, x, y } = case;
    let rec = model.forward(x).unwrap();
    let grads = model.backward_ce_all(&rec, x, y).unwrap();
    let mut worst = 0.0f64;
    for layer in layers(model) {
        let e = match layer {
            Layer::Aux(i) => max_rel_error(model, &grads, layer, |m| ce_aux(m, x, y, i)),
            _ => max_rel_error(model, &grads, layer, |m| ce_main(m, x, y)),
        };
        worst = worst.max(e);
    }
    worst
}

/// Max relative error of discrepancy-loss gradients over the auxiliary heads.
pub fn dis_gradient_error(case: &Case, kind: DistanceKind) -> f64 {
    let Case { model, x, .. } = case;
    let rec = model.forward(x).unwrap();
    let grads = model.backward_dis(&rec, kind).unwrap();
    (0..model.num_aux_heads())
        .map(|i| max_rel_error(model, &grads, Layer::Aux(i), |m| dis_loss(m, x, kind)))
        .fold(0.0, f64::max)
}
