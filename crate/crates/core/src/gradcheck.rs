//! Finite-difference verification of the texture objective's gradients.

use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::extractor::{ExtractorConfig, FeatureExtractor};
use crate::nn::{Ctx, Graph, ParamId, ParamStore, Tensor};
use crate::texture_gan::{
    generator_objective, LossWeights, TextureDiscriminator, TextureGenerator,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over
    /// entries above the absolute floor.
    pub max_rel_err: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub size: usize,
    pub base_channels: usize,
    pub step: f64,
    pub rtol: f64,
    /// Differences below this are accepted regardless of the relative error.
    pub atol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            size: 8,
            base_channels: 1,
            step: 1e-6,
            rtol: 1e-3,
            atol: 1e-8,
            seed: 0,
        }
    }
}

struct Miniature {
    gen: TextureGenerator<f64>,
    disc: TextureDiscriminator<f64>,
    ext: FeatureExtractor<f64>,
    input: Tensor<f64>,
    mask: Tensor<f64>,
    gt: Tensor<f64>,
}

impl Miniature {
    fn new(cfg: &GradCheckConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let s = cfg.size;
        let gt: Vec<f64> = (0..s * s).map(|_| rng.random_range(-0.8..0.8)).collect();
        let mask: Vec<f64> = (0..s * s)
            .map(|i| {
                let (y, x) = (
                    (i / s) as f64 - s as f64 / 2.0,
                    (i % s) as f64 - s as f64 / 2.0,
                );
                if y * y + x * x <= (s as f64 / 4.0).powi(2) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let filled: Vec<f64> = gt
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m > 0.0 { 1.0 } else { g })
            .collect();
        let mut input = filled.clone();
        input.extend_from_slice(&filled);
        input.extend_from_slice(&filled);
        input.extend_from_slice(&mask);
        let ext = FeatureExtractor::new(&ExtractorConfig {
            width_divisor: 64,
            seed: cfg.seed,
        })
        .expect("64 divides 64");
        Self {
            gen: TextureGenerator::new(cfg.base_channels, cfg.seed + 1),
            disc: TextureDiscriminator::new(cfg.base_channels, cfg.seed + 2),
            ext,
            input: Tensor::from_vec(&[1, 4, s, s], input),
            mask: Tensor::from_vec(&[1, 1, s, s], mask),
            gt: Tensor::from_vec(&[1, 1, s, s], gt),
        }
    }

    /// Total loss and its graph; spectral norm vectors stay fixed (eval mode).
    fn total(&self) -> (f64, Graph<f64>, crate::nn::Var) {
        let mut g = Graph::new();
        let (x, m, gt) = (
            g.input(self.input.clone()),
            g.input(self.mask.clone()),
            g.input(self.gt.clone()),
        );
        let mut gctx = Ctx::new(&self.gen.store, false);
        let (o1, o2) = self.gen.forward(&mut g, &mut gctx, x, m);
        let mut dctx = Ctx::new(&self.disc.store, false);
        let s = self.disc.forward(&mut g, &mut dctx, o2, m);
        let l = generator_objective(&mut g, o1, o2, gt, s, &self.ext, &LossWeights::default());
        (g.value(l.total).item(), g, l.total)
    }
}

fn check_store(
    mini: &mut Miniature,
    which: fn(&mut Miniature) -> &mut ParamStore<f64>,
    analytic: &[(ParamId, Tensor<f64>)],
    cfg: &GradCheckConfig,
    report: &mut GradCheckReport,
) {
    for (id, grad) in analytic {
        for i in 0..grad.numel() {
            let orig = which(mini).value(*id).data()[i];
            which(mini).value_mut(*id).data_mut()[i] = orig + cfg.step;
            let lp = mini.total().0;
            which(mini).value_mut(*id).data_mut()[i] = orig - cfg.step;
            let lm = mini.total().0;
            which(mini).value_mut(*id).data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * cfg.step);
            let a = grad.data()[i];
            let diff = (a - num).abs();
            report.checked += 1;
            if diff <= cfg.atol {
                continue;
            }
            let rel = diff / a.abs().max(num.abs());
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > cfg.rtol {
                report.failures += 1;
            }
        }
    }
}

/// Compares analytic gradients of the total texture loss with central
/// differences for every generator and discriminator weight of a
/// double-precision miniature model.
pub fn texture_gradient_check(cfg: &GradCheckConfig) -> GradCheckReport {
    let mut mini = Miniature::new(cfg);
    let (_, g, total) = mini.total();
    let grads = g.backward(total);
    grads.apply(&g, &mut mini.gen.store);
    grads.apply(&g, &mut mini.disc.store);
    let take = |s: &ParamStore<f64>| -> Vec<(ParamId, Tensor<f64>)> {
        s.ids()
            .filter(|&id| s.is_trainable(id))
            .map(|id| {
                (
                    id,
                    s.grad(id)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(s.value(id).dims())),
                )
            })
            .collect()
    };
    let ga = take(&mini.gen.store);
    let da = take(&mini.disc.store);
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
    };
    check_store(&mut mini, |m| &mut m.gen.store, &ga, cfg, &mut report);
    check_store(&mut mini, |m| &mut m.disc.store, &da, cfg, &mut report);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miniature_gradients_match_finite_differences() {
        let r = texture_gradient_check(&GradCheckConfig::default());
        assert!(r.checked > 1000);
        assert_eq!(r.failures, 0, "{r:?}");
    }
}
