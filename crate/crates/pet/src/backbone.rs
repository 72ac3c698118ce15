//! Small convolutional feature extractor producing stride-8 features.
//!
//! Three stages of (conv3x3 + relu) x2 followed by a stride-2 conv3x3 + relu;
//! after the three stride-2 reductions each spatial element of the output is
//! one token covering an 8x8 pixel cell.

use rand::Rng;

use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::init;
use crate::numerics::{Graph, ParamId, ParamStore, Var};

struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
}

pub struct Backbone {
    layers: Vec<ConvLayer>,
}

impl Backbone {
    /// Register parameters under `prefix` with seeded He init and zero biases.
    pub fn register(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut cin = 3;
        for (stage, &width) in cfg.channels.iter().enumerate() {
            for (li, stride) in [(0, 1), (1, 1), (2, 2)] {
                let name = format!("{prefix}.stage{stage}.conv{li}");
                let fan_in = 3 * 3 * cin;
                let kernel = store.register(
                    &format!("{name}.weight"),
                    init::he_normal(rng, &[3, 3, cin, width], fan_in),
                )?;
                let bias = store.register(
                    &format!("{name}.bias"),
                    crate::numerics::Tensor::zeros(&[width]),
                )?;
                layers.push(ConvLayer { kernel, bias, stride });
                cin = width;
            }
        }
        Ok(Backbone { layers })
    }

    /// `[H,W,3] -> [H/8, W/8, c]`. H and W must be multiples of 8; padding to
    /// a multiple is the caller's job.
    pub fn extract(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Dim(format!("backbone expects [H,W,3], got {shape:?}")));
        }
        let (h, w) = (shape[0], shape[1]);
        if h % BackboneConfig::STRIDE != 0 || w % BackboneConfig::STRIDE != 0 {
            return Err(Error::Contract(format!(
                "backbone input {h}x{w} not a multiple of stride {}",
                BackboneConfig::STRIDE
            )));
        }
        let mut x = image;
        for layer in &self.layers {
            let k = g.param(store, layer.kernel)?;
            let b = g.param(store, layer.bias)?;
            x = g.conv2d(x, k, layer.stride, 1)?;
            x = g.bias_add(x, b)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            channels: vec![4, 6, 8],
            out_channels: 8,
        }
    }

    fn build(seed: u64) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::register(&mut store, &small_cfg(), &mut rng, "backbone").unwrap();
        (store, bb)
    }

    #[test]
    fn output_extent_is_input_over_eight() {
        let (store, bb) = build(0);
        for (h, w) in [(256usize, 256usize), (128, 64)] {
            let mut g = Graph::new();
            let img = g.leaf(Tensor::zeros(&[h, w, 3])).unwrap();
            let f = bb.extract(&mut g, &store, img).unwrap();
            assert_eq!(g.value(f).shape(), &[h / 8, w / 8, 8]);
        }
    }

    #[test]
    fn non_multiple_of_eight_is_contract_error() {
        let (store, bb) = build(0);
        let mut g = Graph::new();
        let img = g.leaf(Tensor::zeros(&[60, 64, 3])).unwrap();
        assert!(matches!(
            bb.extract(&mut g, &store, img),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_image_gives_finite_deterministic_output() {
        let (store, bb) = build(7);
        let run = || {
            let mut g = Graph::new();
            let img = g.leaf(Tensor::zeros(&[32, 32, 3])).unwrap();
            let f = bb.extract(&mut g, &store, img).unwrap();
            g.value(f).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn translation_by_stride_shifts_tokens_by_one() {
        // Random 192x192 image; shifting content 8px right must shift interior
        // tokens one to the right. Borders are excluded (padding effects).
        let (store, bb) = build(3);
        let (h, w) = (192usize, 192usize);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let base: Vec<f64> = (0..h * w * 3).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();

        let mut shifted = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 0..w - 8 {
                for c in 0..3 {
                    shifted[(y * w + x + 8) * 3 + c] = base[(y * w + x) * 3 + c];
                }
            }
        }

        let feat = |data: Vec<f64>| {
            let mut g = Graph::new();
            let img = g.leaf(Tensor::new(vec![h, w, 3], data).unwrap()).unwrap();
            let f = bb.extract(&mut g, &store, img).unwrap();
            g.value(f).data().to_vec()
        };
        let fa = feat(base);
        let fb = feat(shifted);

        let (gh, gw, c) = (h / 8, w / 8, 8usize);
        // receptive field of the stack is 43px, so stay 4+ tokens from borders
        for ty in 4..gh - 4 {
            for tx in 4..gw - 5 {
                for ch in 0..c {
                    let a = fa[(ty * gw + tx) * c + ch];
                    let b = fb[(ty * gw + tx + 1) * c + ch];
                    assert!(
                        (a - b).abs() < 1e-9,
                        "token ({ty},{tx}) ch {ch}: {a} vs {b}"
                    );
                }
            }
        }
    }
}
