//! Shared convolutional backbone and part partitioning.
//!
//! Two variants sit behind one interface: a small 4-block CNN (stride 8) that
//! trains in minutes on CPU, and a deeper residual network whose final stage
//! keeps stride 1 so the output map stays twice as tall (total stride 16).
//! Both produce a `(C, H, W)` feature map that is split into `K` equal
//! horizontal stripes, one per body part.

use ndarray::{Array3, Axis};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::NodeId;
use crate::config::{BackboneConfig, BackboneVariant};
use crate::error::{Error, Result};
use crate::model::{ConvSpec, ParamStore, Session};
use crate::Scalar;

enum Block {
    /// Convolution followed by ReLU.
    Conv(ConvSpec),
    /// Two 3x3 convolutions with a skip connection; ReLU after the sum.
    Residual {
        conv1: ConvSpec,
        conv2: ConvSpec,
        skip: Option<ConvSpec>,
    },
}

pub struct BackboneNet {
    blocks: Vec<Block>,
}

impl BackboneNet {
    pub fn init<F: Scalar>(
        cfg: &BackboneConfig,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = cfg.output_channels;
        // narrow configs keep at least 4 channels per stage so ReLU cannot
        // silence an entire layer
        let widths = [(c / 8).max(4), (c / 4).max(4), (c / 2).max(4), c];
        let blocks = match cfg.variant {
            BackboneVariant::Toy => {
                let downsamples = cfg.spatial_stride.trailing_zeros() as usize;
                if downsamples > 4 {
                    return Err(Error::config(
                        "toy backbone supports strides up to 16 (4 halvings)",
                    ));
                }
                let mut blocks = Vec::new();
                let mut cin = 3;
                for (i, &cout) in widths.iter().enumerate() {
                    let stride = if i < downsamples { 2 } else { 1 };
                    blocks.push(Block::Conv(ConvSpec::init(
                        store,
                        rng,
                        &format!("backbone.conv{i}"),
                        cin,
                        cout,
                        3,
                        stride,
                        1,
                    )));
                    cin = cout;
                }
                blocks
            }
            BackboneVariant::Paper => {
                // Stem halves the input, then four residual stages with
                // strides 2, 2, 2, 1; the final stage keeps full resolution.
                let mut blocks = vec![Block::Conv(ConvSpec::init(
                    store,
                    rng,
                    "backbone.stem",
                    3,
                    widths[0],
                    3,
                    2,
                    1,
                ))];
                let mut cin = widths[0];
                let strides = [2usize, 2, 2, 1];
                for (i, (&cout, &stride)) in widths.iter().zip(strides.iter()).enumerate() {
                    let conv1 = ConvSpec::init(
                        store,
                        rng,
                        &format!("backbone.stage{i}.conv1"),
                        cin,
                        cout,
                        3,
                        stride,
                        1,
                    );
                    let conv2 = ConvSpec::init(
                        store,
                        rng,
                        &format!("backbone.stage{i}.conv2"),
                        cout,
                        cout,
                        3,
                        1,
                        1,
                    );
                    let skip = if stride != 1 || cin != cout {
                        Some(ConvSpec::init(
                            store,
                            rng,
                            &format!("backbone.stage{i}.skip"),
                            cin,
                            cout,
                            1,
                            stride,
                            0,
                        ))
                    } else {
                        None
                    };
                    blocks.push(Block::Residual { conv1, conv2, skip });
                    cin = cout;
                }
                blocks
            }
        };
        Ok(BackboneNet { blocks })
    }

    /// Forward an image batch node `(n, 3, H, W)` to a feature map node
    /// `(n, C, H/stride, W/stride)`.
    pub fn forward<F: Scalar>(&self, s: &mut Session<F>, mut x: NodeId) -> NodeId {
        for block in &self.blocks {
            x = match block {
                Block::Conv(conv) => {
                    let y = conv.apply(s, x);
                    s.tape.relu(y)
                }
                Block::Residual { conv1, conv2, skip } => {
                    let y = conv1.apply(s, x);
                    let y = s.tape.relu(y);
                    let y = conv2.apply(s, y);
                    let shortcut = match skip {
                        Some(conv) => conv.apply(s, x),
                        None => x,
                    };
                    let summed = s.tape.add(y, shortcut);
                    s.tape.relu(summed)
                }
            };
        }
        x
    }
}

/// Split a `(C, H, W)` feature map into `k` contiguous horizontal stripes of
/// shape `(C, H/k, W)`, ordered top to bottom.
pub fn partition_parts<F: Scalar>(fm: &Array3<F>, k: usize) -> Result<Vec<Array3<F>>> {
    let h = fm.shape()[1];
    if k == 0 || h % k != 0 {
        return Err(Error::config(format!(
            "feature-map height {h} not divisible by part count {k}"
        )));
    }
    let stripe = h / k;
    Ok((0..k)
        .map(|part| {
            fm.slice_axis(Axis(1), ndarray::Slice::from(part * stripe..(part + 1) * stripe))
                .to_owned()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::Model;
    use ndarray::Array3;

    #[test]
    fn paper_variant_halves_the_usual_stride() {
        let mut cfg = ModelConfig::default();
        cfg.backbone = BackboneConfig::paper();
        cfg.backbone.output_channels = 16;
        cfg.embed_dim = 8;
        cfg.global_dim = 8;
        let model = Model::<f32>::new(cfg, 5).unwrap();
        let image = Array3::<f32>::from_shape_fn((3, 384, 128), |(c, y, x)| {
            ((c + y + x) % 13) as f32 * 0.05
        });
        let fm = model.feature_map(&image).unwrap();
        assert_eq!(fm.shape(), &[16, 24, 8]);
    }

    #[test]
    fn toy_variant_shape_contract() {
        let mut cfg = ModelConfig::default();
        cfg.backbone.input_height = 64;
        cfg.backbone.input_width = 32;
        cfg.backbone.output_channels = 16;
        cfg.parts = 4;
        cfg.embed_dim = 8;
        cfg.global_dim = 8;
        let model = Model::<f32>::new(cfg, 5).unwrap();
        let image = Array3::<f32>::from_shape_fn((3, 64, 32), |(c, y, x)| {
            ((c * 3 + y * 2 + x) % 5) as f32 * 0.1
        });
        let fm = model.feature_map(&image).unwrap();
        assert_eq!(fm.shape(), &[16, 8, 4]);
    }

    #[test]
    fn identical_images_produce_bitwise_equal_maps() {
        let mut cfg = ModelConfig::default();
        cfg.backbone.input_height = 32;
        cfg.backbone.input_width = 16;
        cfg.backbone.output_channels = 8;
        cfg.parts = 2;
        cfg.embed_dim = 4;
        cfg.global_dim = 4;
        let model = Model::<f32>::new(cfg, 11).unwrap();
        let image = Array3::<f32>::from_shape_fn((3, 32, 16), |(c, y, x)| {
            (c as f32 * 0.3 + y as f32 * 0.01 - x as f32 * 0.02).sin()
        });
        let a = model.feature_map(&image).unwrap();
        let b = model.feature_map(&image).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partition_covers_and_never_overlaps() {
        let fm = Array3::<f64>::from_shape_fn((5, 24, 8), |(c, y, x)| {
            (c * 1000 + y * 10 + x) as f64
        });
        let parts = partition_parts(&fm, 6).unwrap();
        assert_eq!(parts.len(), 6);
        for p in &parts {
            assert_eq!(p.shape(), &[5, 4, 8]);
        }
        let rebuilt = ndarray::concatenate(
            Axis(1),
            &parts.iter().map(|p| p.view()).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(rebuilt, fm);
    }

    #[test]
    fn partition_single_stripe_is_identity() {
        let fm = Array3::<f64>::from_shape_fn((2, 8, 4), |(c, y, x)| (c + y + x) as f64);
        let parts = partition_parts(&fm, 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], fm);
    }

    #[test]
    fn partition_rows_are_contiguous() {
        let fm = Array3::<f64>::from_shape_fn((1, 8, 2), |(_, y, _)| y as f64);
        let parts = partition_parts(&fm, 4).unwrap();
        for (i, p) in parts.iter().enumerate() {
            let rows: Vec<f64> = p.index_axis(Axis(0), 0).column(0).to_vec();
            assert_eq!(rows, vec![(2 * i) as f64, (2 * i + 1) as f64]);
        }
    }

    #[test]
    fn indivisible_height_is_rejected() {
        let fm = Array3::<f64>::zeros((2, 10, 4));
        assert!(partition_parts(&fm, 3).is_err());
    }
}
