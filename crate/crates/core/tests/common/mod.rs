//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hrcloud::autograd::{Graph, Mode};
use hrcloud::backbone::BackboneConfig;
use hrcloud::decoder::DecoderConfig;
use hrcloud::loss::{total_loss_graph, LossBreakdown, LossConfig};
use hrcloud::model::{AblationFlags, HrCloudNet, ModelConfig};
use hrcloud::params::{ParamId, ParamStore};
use hrcloud::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smallest model of a given width on square tiles.
pub fn tiny_model(width: usize, tile: usize, flags: AblationFlags) -> ModelConfig {
    ModelConfig {
        tile_size: tile,
        backbone: BackboneConfig {
            bottleneck_units: 1,
            basic_units: 1,
            ..BackboneConfig::tiny(width)
        },
        decoder: DecoderConfig {
            head_channels: 4,
            ..DecoderConfig::default()
        },
        ablation: flags,
    }
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(0.0..1.0))
}

/// One-hot `[n, 2, h, w]` target with random labels.
pub fn random_target(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<bool> = (0..n * h * w).map(|_| r.random_bool(0.4)).collect();
    let mut data = vec![0.0; n * 2 * h * w];
    for b in 0..n {
        for i in 0..h * w {
            let cloud = labels[b * h * w + i];
            data[(b * 2 + usize::from(cloud)) * h * w + i] = 1.0;
        }
    }
    Tensor::new(&[n, 2, h, w], data).unwrap()
}

/// Training-mode two-view loss and, optionally, its parameter gradients.
pub fn two_view_loss(
    net: &HrCloudNet,
    store: &ParamStore,
    x: &Tensor,
    x_aug: &Tensor,
    t: &Tensor,
    loss: &LossConfig,
    with_grads: bool,
) -> (LossBreakdown, BTreeMap<ParamId, Tensor>) {
    let mut g = Graph::new(store, Mode::Train);
    let xv = g.input(x.clone());
    let y = net.forward(&mut g, xv).unwrap();
    let xa = g.input(x_aug.clone());
    let ya = net.forward(&mut g, xa).unwrap();
    let (root, b) = total_loss_graph(&mut g, y, Some(ya), t, loss).unwrap();
    let grads = if with_grads {
        g.param_gradients(&g.backward(root))
    } else {
        BTreeMap::new()
    };
    (b, grads)
}

/// Teacher-view probabilities in training mode.
pub fn teacher_probs(net: &HrCloudNet, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut g = Graph::new(store, Mode::Train);
    let xv = g.input(x.clone());
    let y = net.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

/// A threshold in the widest gap between consecutive teacher probabilities, so entries
/// lie on both sides and small parameter perturbations cannot flip a mask entry.
pub fn threshold_in_gap(probs: &Tensor) -> (f64, f64) {
    let mut v = probs.data().to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2)
        .map(|w| ((w[0] + w[1]) / 2.0, w[1] - w[0]))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Exact parameter count of a model, computed from its configuration alone.
pub fn expected_parameter_count(cfg: &ModelConfig) -> usize {
    let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
    let conv_bias = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let b = &cfg.backbone;
    let f = cfg.ablation;
    let widths = b.widths();
    let (s, p) = (b.stem_width, b.bottleneck_planes);
    let mut n = conv_bn(3, s, 3) + conv_bn(s, s, 3);
    for u in 0..b.bottleneck_units {
        let cin = if u == 0 { s } else { 4 * p };
        n += conv_bn(cin, p, 1) + conv_bn(p, p, 3) + conv_bn(p, 4 * p, 1);
        if cin != 4 * p {
            n += conv_bn(cin, 4 * p, 1);
        }
    }
    n += conv_bn(4 * p, widths[0], 3);
    for stage in 2..=4usize {
        let branches = if f.use_multi_resolution { stage } else { 1 };
        if f.use_multi_resolution {
            let cin = if stage == 2 { 4 * p } else { widths[stage - 2] };
            n += conv_bn(cin, widths[stage - 1], 3);
        }
        let mut module = 0;
        for k in 0..branches {
            module += b.basic_units * 2 * conv_bn(widths[k], widths[k], 3);
            for j in 0..branches {
                if j > k {
                    module += conv_bn(widths[j], widths[k], 1);
                } else if j < k {
                    module += (k - j - 1) * conv_bn(widths[j], widths[j], 3) + conv_bn(widths[j], widths[k], 3);
                }
            }
        }
        n += b.modules_per_stage * module;
    }
    let branch: Vec<usize> = widths[..if f.use_multi_resolution { 4 } else { 1 }].to_vec();
    if f.use_cascaded_fusion {
        for k in 0..branch.len() - 1 {
            n += conv_bn(branch[k] + branch[k + 1], branch[k], 3) + conv_bn(branch[k], branch[k], 3);
        }
    }
    let c: usize = branch.iter().sum();
    let mut head_in = c;
    if f.use_pyramid_pooling {
        let bins = cfg.decoder.pyramid_bins.len();
        n += bins * conv_bias(c, c / 4, 1);
        head_in += bins * (c / 4);
    }
    let hc = cfg.decoder.head_channels;
    n + conv_bn(head_in, hc, 1) + conv_bias(hc, 2, 1)
}

/// Relative step for central differences. Batch-normalised kernels start tiny, so the
/// step is scaled by each tensor's rms: a fixed absolute step would be a large
/// relative move on such a kernel. Steps this large keep roundoff low; the occasional
/// kink they straddle is handled by re-measuring (see [`grad_check`]).
pub const FD_RELATIVE_STEP: f64 = 1e-4;
/// Gradient entries smaller than this fraction of the largest one are compared in
/// absolute terms, since the roundoff of the function divided by the step dominates them.
pub const FD_FLOOR_FRACTION: f64 = 1e-3;

/// Kernels scale with their own rms; biases and batch-norm affine vectors act on
/// activations of order one, whatever their current value.
pub fn fd_step(t: &Tensor) -> f64 {
    let rms = (t.data().iter().map(|v| v * v).sum::<f64>() / t.len().max(1) as f64).sqrt();
    let floor = if t.shape().len() == 1 { 1.0 } else { 1e-3 };
    FD_RELATIVE_STEP * rms.max(floor)
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Entries whose first central difference straddled a ReLU kink and were re-measured
    /// with a smaller step.
    pub remeasured: usize,
    pub worst: f64,
    pub worst_at: String,
}

/// Compares analytic gradients with central differences of `f` for the entries
/// `pick(len)` of every parameter tensor. An entry that misses `tol` is re-measured at
/// a tenth and a hundredth of the step: a kink inside `[v - h, v + h]` spoils one step
/// but not all three, while a wrong analytic gradient fails at every step.
pub fn grad_check(
    store: &mut ParamStore,
    analytic: &BTreeMap<ParamId, Tensor>,
    f: &dyn Fn(&ParamStore) -> f64,
    pick: &dyn Fn(usize) -> Vec<usize>,
    tol: f64,
) -> GradCheck {
    let largest = analytic
        .values()
        .flat_map(|g| g.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let floor = FD_FLOOR_FRACTION * largest;
    let mut report = GradCheck::default();
    let ids: Vec<ParamId> = store.param_ids().collect();
    for id in ids {
        let h0 = fd_step(store.param(id));
        for i in pick(store.param(id).len()) {
            let a = analytic.get(&id).map_or(0.0, |g| g.data()[i]);
            let v = store.param(id).data()[i];
            let mut best = (f64::INFINITY, 0.0);
            for (attempt, h) in [h0, h0 / 10.0, h0 / 100.0].into_iter().enumerate() {
                store.param_mut(id).data_mut()[i] = v + h;
                let plus = f(store);
                store.param_mut(id).data_mut()[i] = v - h;
                let minus = f(store);
                store.param_mut(id).data_mut()[i] = v;
                let numeric = (plus - minus) / (2.0 * h);
                let e = relative_error(a, numeric, floor);
                if e < best.0 {
                    best = (e, numeric);
                }
                if e < tol {
                    report.remeasured += usize::from(attempt > 0);
                    break;
                }
            }
            report.checked += 1;
            if best.0 > report.worst {
                report.worst = best.0;
                report.worst_at = format!("{}[{i}]: analytic {a:e}, numeric {:e}", store.param_name(id), best.1);
            }
        }
    }
    report
}

/// Up to `k` evenly spread indices of a tensor of length `len`.
pub fn spread(k: usize) -> impl Fn(usize) -> Vec<usize> {
    move |len| {
        let k = k.min(len);
        (0..k).map(|i| i * len / k).collect()
    }
}

pub fn every(len: usize) -> Vec<usize> {
    (0..len).collect()
}

/// The width-2 instance used for gradient checks: batch of two 32x32 views and a
/// confidence threshold that no small perturbation can cross.
pub struct GradInstance {
    pub net: HrCloudNet,
    pub store: ParamStore,
    pub x: Tensor,
    pub x_aug: Tensor,
    pub t: Tensor,
    pub loss: LossConfig,
}

impl GradInstance {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let (net, store) = hrcloud::model::build_model(cfg, seed).unwrap();
        let side = cfg.tile_size;
        let x = uniform(&[2, 3, side, side], seed + 1);
        let x_aug = uniform(&[2, 3, side, side], seed + 2);
        let t = random_target(2, side, side, seed + 3);
        let (tau, gap) = threshold_in_gap(&teacher_probs(&net, &store, &x));
        assert!(gap > 1e-4, "teacher probabilities leave no room for a stable threshold");
        let loss = LossConfig {
            tau,
            ..LossConfig::default()
        };
        Self {
            net,
            store,
            x,
            x_aug,
            t,
            loss,
        }
    }

    pub fn check(&mut self, pick: &dyn Fn(usize) -> Vec<usize>, tol: f64) -> GradCheck {
        let (base, analytic) = two_view_loss(&self.net, &self.store, &self.x, &self.x_aug, &self.t, &self.loss, true);
        assert!(base.masked_fraction > 0.0 && base.l_ce_aug > 0.0, "student term must be active");
        assert!(base.masked_fraction < 1.0, "confidence mask must gate some entries");
        let Self {
            net, x, x_aug, t, loss, ..
        } = &*self;
        let f = |s: &ParamStore| two_view_loss(net, s, x, x_aug, t, loss, false).0.total;
        let mut store = self.store.clone();
        grad_check(&mut store, &analytic, &f, pick, tol)
    }
}
