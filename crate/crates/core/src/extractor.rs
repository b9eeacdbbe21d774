//! Frozen VGG-16 style feature extractor truncated after its third pooling
//! layer, used for the perceptual loss and for FID features.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvGeom, Ctx, Graph, Init, ParamStore, Scalar, Tensor, Var};

/// ImageNet channel statistics applied after mapping `[-1, 1]` to `[0, 1]`.
const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `(torchvision feature index, full-width output channels)` per block.
const BLOCKS: [&[(usize, usize)]; 3] = [
    &[(0, 64), (2, 64)],
    &[(5, 128), (7, 128)],
    &[(10, 256), (12, 256), (14, 256)],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Channel widths are the VGG-16 widths divided by this factor.
    pub width_divisor: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            width_divisor: 1,
            seed: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    pub config: ExtractorConfig,
    pub store: ParamStore<T>,
    blocks: Vec<Vec<Conv2d>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Randomly initialized (He-normal) and frozen.
    pub fn new(config: &ExtractorConfig) -> Result<Self> {
        if config.width_divisor == 0 || 64 % config.width_divisor != 0 {
            return Err(Error::InvalidArgument(format!(
                "width_divisor must divide 64, got {}",
                config.width_divisor
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut in_ch = 3;
        let mut blocks = Vec::new();
        for block in BLOCKS {
            let mut convs = Vec::new();
            for &(idx, width) in block {
                let out = width / config.width_divisor;
                let std = (2.0 / (in_ch * 9) as f64).sqrt();
                let conv = Conv2d::new(
                    &mut store,
                    &format!("features.{idx}"),
                    in_ch,
                    out,
                    ConvGeom::same(3, 1),
                    true,
                    Init::Normal(std),
                    &mut rng,
                );
                convs.push(conv);
                in_ch = out;
            }
            blocks.push(convs);
        }
        store.freeze();
        Ok(Self {
            config: config.clone(),
            store,
            blocks,
        })
    }

    /// Channel count of each tapped pooling output.
    pub fn tap_channels(&self) -> [usize; 3] {
        let mut out = [0; 3];
        for (o, b) in out.iter_mut().zip(&self.blocks) {
            *o = b.last().unwrap().out_channels;
        }
        out
    }

    /// Replaces the weights, e.g. with pretrained VGG-16 values; names follow
    /// `features.{i}.weight` / `features.{i}.bias`.
    pub fn load<'a>(
        &mut self,
        lookup: impl Fn(&str) -> Option<(&'a [usize], Vec<f64>)>,
    ) -> Result<()> {
        self.store.import(lookup)?;
        self.store.freeze();
        Ok(())
    }

    /// Pool1..pool3 activations of a single-channel `[N, 1, H, W]` batch in `[-1, 1]`.
    pub fn taps(&self, g: &mut Graph<T>, x: Var) -> [Var; 3] {
        let mut chans = Vec::with_capacity(3);
        for c in 0..3 {
            let unit = g.scale(x, T::lit(0.5));
            let unit = g.add_scalar(unit, T::lit(0.5 - MEAN[c]));
            chans.push(g.scale(unit, T::lit(1.0 / STD[c])));
        }
        let mut h = g.concat(&chans, 1);
        let mut ctx = Ctx::new(&self.store, false);
        let mut taps = Vec::with_capacity(3);
        for block in &self.blocks {
            for conv in block {
                h = conv.forward(g, &mut ctx, h);
                h = g.relu(h);
            }
            h = g.max_pool2(h);
            taps.push(h);
        }
        [taps[0], taps[1], taps[2]]
    }

    /// Global-average-pooled pool3 features of each sample.
    pub fn pooled_features(&self, batch: &Tensor<T>) -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let [_, _, p3] = self.taps(&mut g, x);
        let gp = g.global_avg_pool(p3);
        let v = g.value(gp);
        let c = v.dims()[1];
        v.data()
            .chunks(c)
            .map(|row| row.iter().map(|x| x.to_f64().unwrap()).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_halve_resolution() {
        let ext = FeatureExtractor::<f32>::new(&ExtractorConfig {
            width_divisor: 16,
            seed: 1,
        })
        .unwrap();
        assert_eq!(ext.tap_channels(), [4, 8, 16]);
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 1, 32, 32], 0.1));
        let taps = ext.taps(&mut g, x);
        assert_eq!(g.dims(taps[0]), &[2, 4, 16, 16]);
        assert_eq!(g.dims(taps[2]), &[2, 16, 4, 4]);
        assert_eq!(ext.store.num_trainable(), 0);
    }

    #[test]
    fn rejects_bad_divisor() {
        assert!(FeatureExtractor::<f32>::new(&ExtractorConfig {
            width_divisor: 5,
            seed: 0
        })
        .is_err());
    }
}
