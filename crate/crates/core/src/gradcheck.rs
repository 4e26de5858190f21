//! Central finite-difference checks of analytic gradients for layers,
//! whole networks and the Dice losses.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::netbuilder::{build_with, NetConfig, NetKind};
use crate::nn::{InputSlot, LayerKind, Mode, Network, NetworkSpec, Node, OutputSlot, Tensor};
use crate::train::{dice_loss_binary_grad, dice_loss_classes, dice_loss_multiclass, dice_loss_multiclass_grad};

/// Acceptance bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Magnitudes below this count as this when forming relative errors, so
/// that gradients that are zero up to rounding do not blow up the ratio.
pub const SCALE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub case: String,
    /// Number of scalar coordinates compared.
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Up to `k` distinct coordinates of a tensor with `n` entries.
fn coordinates(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Relative error of `analytic` against central differences of `f` at
/// `STEP`. A mismatch is re-measured at `STEP / 100`: a piecewise-linear
/// unit switching inside the wider interval spoils that difference only,
/// while a wrong gradient disagrees at both.
fn kink_tolerant_error(analytic: f64, f: &mut impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for h in [STEP, STEP / 100.0] {
        let numeric = (f(h)? - f(-h)?) / (2.0 * h);
        best = best.min(relative_error(analytic, numeric));
        if best <= TOLERANCE {
            break;
        }
    }
    Ok(best)
}

/// Checks `d(Σ w·outputs)` for every trainable parameter and every input of
/// a network, sampling at most `per_tensor` coordinates per tensor.
///
/// Whole networks are best checked in [`Mode::Eval`]: with batch statistics
/// a narrow bottleneck amplifies perturbations enough that the difference
/// quotient straddles activation kinks.
pub fn check_network(
    case: &str,
    spec: NetworkSpec,
    mode: Mode,
    batch: usize,
    seed: u64,
    per_tensor: usize,
) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(spec.clone(), seed)?;
    // Perturb the default initialisation so batch-norm affine terms matter.
    for t in net.params_mut().params.values_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let inputs: HashMap<String, Tensor> = spec
        .inputs
        .iter()
        .map(|s| (s.name.clone(), uniform(&mut rng, &[batch, s.channels, s.size, s.size], -1.0, 1.0)))
        .collect();
    let out = net.forward(inputs.clone(), mode)?;
    let weights: BTreeMap<String, Tensor> = out
        .iter()
        .map(|(k, v)| (k.clone(), uniform(&mut rng, v.shape(), -1.0, 1.0)))
        .collect();
    let input_grads = net.backward(&weights)?;
    net.clear_cache();

    let objective = |net: &mut Network, inputs: &HashMap<String, Tensor>| -> Result<f64> {
        let out = net.forward(inputs.clone(), mode)?;
        net.clear_cache();
        Ok(out
            .iter()
            .map(|(k, v)| v.data().iter().zip(weights[k].data()).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };

    let mut worst = 0.0f64;
    let mut count = 0;
    let names: Vec<String> = net.params().params.keys().cloned().collect();
    for name in names {
        let analytic = net.params().params[&name].grad().expect("grad slot").to_vec();
        for j in coordinates(&mut rng, analytic.len(), per_tensor) {
            let orig = net.params().params[&name].data()[j];
            let mut eval = |d: f64| -> Result<f64> {
                net.params_mut().params.get_mut(&name).expect("param").data_mut()[j] = orig + d;
                objective(&mut net, &inputs)
            };
            let e = kink_tolerant_error(analytic[j], &mut eval)?;
            eval(0.0)?;
            worst = worst.max(e);
            count += 1;
        }
    }
    for (name, x) in &inputs {
        let Some(g) = input_grads.get(name) else { continue };
        for j in coordinates(&mut rng, x.numel(), per_tensor) {
            let mut shifted = inputs.clone();
            let mut eval = |d: f64| -> Result<f64> {
                shifted.get_mut(name).expect("input").data_mut()[j] = x.data()[j] + d;
                objective(&mut net, &shifted)
            };
            worst = worst.max(kink_tolerant_error(g.data()[j], &mut eval)?);
            count += 1;
        }
    }
    Ok(GradCheck {
        case: case.to_string(),
        coordinates: count,
        max_rel_error: worst,
    })
}

/// One-layer network fed by inputs `a` (and `b` for two-input layers).
fn single_layer(layer: LayerKind, channels: &[usize], size: usize) -> NetworkSpec {
    let names = ["a", "b"];
    NetworkSpec {
        kind: NetKind::Roi,
        inputs: channels
            .iter()
            .zip(names)
            .map(|(&c, n)| InputSlot {
                name: n.to_string(),
                channels: c,
                size,
            })
            .collect(),
        nodes: vec![Node {
            name: "layer".into(),
            layer,
            inputs: names[..channels.len()].iter().map(|s| s.to_string()).collect(),
        }],
        outputs: vec![OutputSlot {
            name: "out".into(),
            node: "layer".into(),
        }],
        classes: 1,
    }
}

/// Layer kinds exercised by [`layer_cases`].
pub const LAYER_KINDS: [&str; 10] = [
    "conv2d",
    "batchnorm",
    "leaky_relu",
    "maxpool2",
    "upsample2",
    "concat",
    "add",
    "conv1x1_head",
    "sigmoid",
    "softmax",
];

/// A randomly shaped single-layer network of the named kind.
pub fn layer_case(kind: &str, rng: &mut impl Rng) -> NetworkSpec {
    let c = rng.gen_range(1..=3);
    let c2 = rng.gen_range(1..=3);
    let size = 2 * rng.gen_range(1..=3);
    match kind {
        "conv2d" => single_layer(LayerKind::conv3x3(c, c2), &[c], size),
        "batchnorm" => single_layer(LayerKind::batchnorm(c), &[c], size),
        "leaky_relu" => single_layer(LayerKind::leaky_relu(), &[c], size),
        "maxpool2" => single_layer(LayerKind::Maxpool2, &[c], size),
        "upsample2" => single_layer(LayerKind::Upsample2, &[c], size),
        "concat" => single_layer(LayerKind::Concat, &[c, c2], size),
        "add" => single_layer(LayerKind::Add, &[c, c], size),
        "conv1x1_head" => single_layer(
            LayerKind::Conv1x1Head {
                in_channels: c,
                out_channels: c2,
            },
            &[c],
            size,
        ),
        "sigmoid" => single_layer(LayerKind::Sigmoid, &[c], size),
        "softmax" => single_layer(LayerKind::Softmax, &[c + 1], size),
        other => panic!("unknown layer kind {other}"),
    }
}

/// Finite-difference check of a loss gradient with respect to `p`.
fn check_loss(
    case: &str,
    p: &Tensor,
    loss: impl Fn(&Tensor) -> Result<f64>,
    analytic: &Tensor,
    rng: &mut ChaCha8Rng,
    k: usize,
) -> Result<GradCheck> {
    let mut worst = 0.0f64;
    let idx = coordinates(rng, p.numel(), k);
    for &j in &idx {
        let mut q = p.clone();
        q.data_mut()[j] += STEP;
        let up = loss(&q)?;
        q.data_mut()[j] -= 2.0 * STEP;
        let down = loss(&q)?;
        worst = worst.max(relative_error(analytic.data()[j], (up - down) / (2.0 * STEP)));
    }
    Ok(GradCheck {
        case: case.to_string(),
        coordinates: idx.len(),
        max_rel_error: worst,
    })
}

/// Random class probabilities (softmax of uniform logits) and a one-hot target.
pub fn random_probabilities(rng: &mut impl Rng, shape: &[usize]) -> (Tensor, Tensor) {
    let (b, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let mut p = vec![0.0; b * c * hw];
    let mut g = vec![0.0; b * c * hw];
    for n in 0..b {
        for i in 0..hw {
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (k, l) in logits.iter().enumerate() {
                p[(n * c + k) * hw + i] = l.exp() / z;
            }
            g[(n * c + rng.gen_range(0..c)) * hw + i] = 1.0;
        }
    }
    (
        Tensor::new(shape.to_vec(), p).expect("shape"),
        Tensor::new(shape.to_vec(), g).expect("shape"),
    )
}

/// Gradient checks of the binary, four-class and three-class Dice losses.
pub fn loss_cases(seed: u64, eps: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let size = rng.gen_range(2..=5);
    let b = rng.gen_range(1..=3);

    let p = uniform(&mut rng, &[b, 1, size, size], 0.0, 1.0);
    let g = Tensor::new(
        p.shape().to_vec(),
        (0..p.numel()).map(|_| rng.gen_bool(0.5) as u8 as f64).collect(),
    )?;
    let (_, grad) = dice_loss_binary_grad(p.data(), g.data(), eps)?;
    let grad = Tensor::new(p.shape().to_vec(), grad)?;
    let f = |q: &Tensor| crate::train::dice_loss_binary(q.data(), g.data(), eps);
    out.push(check_loss(&format!("DL1 {:?}", p.shape()), &p, f, &grad, &mut rng, 40)?);

    for classes in [4, 3] {
        let (p, g) = random_probabilities(&mut rng, &[b, classes, size, size]);
        let (_, grad) = dice_loss_multiclass_grad(&p, &g, eps)?;
        let f = |q: &Tensor| dice_loss_multiclass(q, &g, classes, eps);
        let name = if classes == 4 { "DL2" } else { "DL3" };
        out.push(check_loss(&format!("{name} {:?}", p.shape()), &p, f, &grad, &mut rng, 40)?);
    }
    Ok(out)
}

/// A tiny instance of a full network kind (16x16 input, narrow widths).
pub fn tiny_network(kind: NetKind) -> Result<NetworkSpec> {
    build_with(kind, &NetConfig::new(kind, 0.5).with_input_size(16).with_base_width(4))
}

/// The complete suite: `rounds` randomized shapes per layer kind, a tiny
/// instance of every network kind and the three losses.
pub fn run_suite(seed: u64, rounds: usize) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for round in 0..rounds {
        for kind in LAYER_KINDS {
            let spec = layer_case(kind, &mut rng);
            let shape = spec.inputs.iter().map(|s| format!("{}x{}x{}", s.channels, s.size, s.size)).collect::<Vec<_>>().join("+");
            let batch = rng.gen_range(1..=3) + usize::from(kind == "batchnorm");
            let case = format!("{kind} [{batch}; {shape}]");
            let s = seed ^ ((round as u64 + 1) << 8);
            out.push(check_network(&case, spec.clone(), Mode::Train, batch, s, 30)?);
            if kind == "batchnorm" {
                out.push(check_network(&format!("{case} eval"), spec, Mode::Eval, batch, s, 30)?);
            }
        }
    }
    for kind in NetKind::ALL {
        out.push(check_network(&format!("{kind} net 16x16"), tiny_network(kind)?, Mode::Eval, 2, seed, 3)?);
    }
    for round in 0..rounds.max(1) {
        out.extend(loss_cases(seed.wrapping_add(round as u64), 1.0)?);
    }
    Ok(out)
}

/// DL2 evaluated on the first three channels of a four-class tensor equals
/// DL3 on those channels alone.
pub fn restricted_matches_three_class(p4: &Tensor, g4: &Tensor, eps: f64) -> Result<(f64, f64)> {
    let restricted = dice_loss_classes(p4, g4, &[0, 1, 2], eps)?;
    let take3 = |t: &Tensor| -> Result<Tensor> {
        let s = t.shape();
        let hw: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(s[0] * 3 * hw);
        for n in 0..s[0] {
            data.extend_from_slice(&t.data()[n * s[1] * hw..(n * s[1] + 3) * hw]);
        }
        let mut shape = s.to_vec();
        shape[1] = 3;
        Tensor::new(shape, data)
    };
    let three = dice_loss_multiclass(&take3(p4)?, &take3(g4)?, 3, eps)?;
    Ok((restricted, three))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_kind_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in LAYER_KINDS {
            let spec = layer_case(kind, &mut rng);
            let r = check_network(kind, spec, Mode::Train, 2, 9, 20).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn losses_pass() {
        for r in loss_cases(3, 1.0).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn lv_network_passes() {
        let r = check_network("lv", tiny_network(NetKind::Lv).unwrap(), Mode::Eval, 2, 1, 2).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn suite_passes() {
        let t = std::time::Instant::now();
        let all = run_suite(11, 2).unwrap();
        assert!(all.len() >= 20);
        for r in &all {
            assert!(r.passed(), "{r:?}");
        }
        eprintln!("{} checks in {:?}", all.len(), t.elapsed());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        assert!(relative_error(1.0, 1.001) > TOLERANCE);
        assert!(relative_error(1e-10, 0.0) < TOLERANCE);
    }
}
