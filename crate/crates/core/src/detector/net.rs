//! Classifier heads mapping a normalized feature plane to one logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelfile::ParamGroups;
use crate::nn::{self, Conv3x3, Linear, Param, Plane};

pub const MAX_WIDTH: usize = 32;
pub const RESIDUAL_BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    /// Logistic regression on the flattened feature, zero-initialized.
    Linear,
    /// Strided stem, three residual blocks, global average pool, linear
    /// readout.
    Resnet { width: usize },
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if let Self::Resnet { width } = *self {
            if width == 0 || width > MAX_WIDTH {
                return Err(Error::param(format!(
                    "residual classifier width {width} not in 1..={MAX_WIDTH}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    a: Conv3x3,
    b: Conv3x3,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ResNet {
    stem: Conv3x3,
    blocks: Vec<Block>,
    head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Classifier {
    Linear(Linear),
    Resnet(ResNet),
}

/// Intermediate values kept for the backward pass.
pub(crate) enum Tape {
    Linear,
    Resnet {
        stem_pre: Vec<f32>,
        /// Per block: input, pre-activation of `a`, activation of `a`,
        /// pre-activation of the block output.
        blocks: Vec<[Vec<f32>; 4]>,
        pooled: Vec<f32>,
    },
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, plane: Plane, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        Ok(match arch {
            Architecture::Linear => Self::Linear(Linear::zeroed(plane.area(), 1)),
            Architecture::Resnet { width } => {
                let stem = Conv3x3::new(1, width, 2, rng);
                let blocks = (0..RESIDUAL_BLOCKS)
                    .map(|_| Block {
                        a: Conv3x3::new(width, width, 1, rng),
                        b: Conv3x3::new(width, width, 1, rng),
                    })
                    .collect();
                Self::Resnet(ResNet {
                    stem,
                    blocks,
                    head: Linear::new(width, 1, rng),
                })
            }
        })
    }

    pub fn forward(&self, x: &[f32], plane: Plane) -> (f32, Tape) {
        match self {
            Self::Linear(l) => (l.forward(x)[0], Tape::Linear),
            Self::Resnet(net) => {
                let stem_pre = net.stem.forward(x, plane);
                let inner = net.stem.output_plane(plane);
                let mut h = nn::relu(&stem_pre);
                let mut blocks = Vec::with_capacity(net.blocks.len());
                for blk in &net.blocks {
                    let a_pre = blk.a.forward(&h, inner);
                    let a = nn::relu(&a_pre);
                    let mut out_pre = blk.b.forward(&a, inner);
                    for (o, i) in out_pre.iter_mut().zip(&h) {
                        *o += i;
                    }
                    let next = nn::relu(&out_pre);
                    blocks.push([h, a_pre, a, out_pre]);
                    h = next;
                }
                let area = inner.area() as f32;
                let pooled: Vec<f32> = h.chunks(inner.area()).map(|c| c.iter().sum::<f32>() / area).collect();
                let logit = net.head.forward(&pooled)[0];
                (
                    logit,
                    Tape::Resnet {
                        stem_pre,
                        blocks,
                        pooled,
                    },
                )
            }
        }
    }

    /// Accumulate parameter gradients for `d loss / d logit = grad`.
    pub fn backward(&mut self, x: &[f32], plane: Plane, tape: &Tape, grad: f32) {
        match (self, tape) {
            (Self::Linear(l), Tape::Linear) => {
                l.backward(x, &[grad]);
            }
            (
                Self::Resnet(net),
                Tape::Resnet {
                    stem_pre,
                    blocks,
                    pooled,
                },
            ) => {
                let inner = net.stem.output_plane(plane);
                let area = inner.area();
                let gp = net.head.backward(pooled, &[grad]);
                let mut g: Vec<f32> = gp
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / area as f32, area))
                    .collect();
                for (blk, saved) in net.blocks.iter_mut().zip(blocks).rev() {
                    let [input, a_pre, a, out_pre] = saved;
                    nn::relu_backward(out_pre, &mut g);
                    let mut ga = blk.b.backward(a, inner, &g);
                    nn::relu_backward(a_pre, &mut ga);
                    let gi = blk.a.backward(input, inner, &ga);
                    for (gv, v) in g.iter_mut().zip(gi) {
                        *gv += v;
                    }
                }
                nn::relu_backward(stem_pre, &mut g);
                net.stem.backward(x, plane, &g);
            }
            _ => unreachable!("tape produced by a different classifier"),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Self::Linear(l) => l.params_mut().into_iter().collect(),
            Self::Resnet(net) => {
                let mut v: Vec<&mut Param> = net.stem.params_mut().into_iter().collect();
                for blk in &mut net.blocks {
                    v.extend(blk.a.params_mut());
                    v.extend(blk.b.params_mut());
                }
                v.extend(net.head.params_mut());
                v
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Self::Linear(l) => l.params().into_iter().collect(),
            Self::Resnet(net) => {
                let mut v: Vec<&Param> = net.stem.params().into_iter().collect();
                for blk in &net.blocks {
                    v.extend(blk.a.params());
                    v.extend(blk.b.params());
                }
                v.extend(net.head.params());
                v
            }
        }
    }

    /// Names and shapes of the parameters, in [`Self::params`] order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let conv = |name: &str, c: &Conv3x3| {
            [
                (format!("{name}.weight"), vec![c.cout, c.cin, 3, 3]),
                (format!("{name}.bias"), vec![c.cout]),
            ]
        };
        let linear = |name: &str, l: &Linear| {
            [
                (format!("{name}.weight"), vec![l.outputs, l.inputs]),
                (format!("{name}.bias"), vec![l.outputs]),
            ]
        };
        match self {
            Self::Linear(l) => linear("linear", l).to_vec(),
            Self::Resnet(net) => {
                let mut v = conv("stem", &net.stem).to_vec();
                for (i, blk) in net.blocks.iter().enumerate() {
                    v.extend(conv(&format!("block{i}.a"), &blk.a));
                    v.extend(conv(&format!("block{i}.b"), &blk.b));
                }
                v.extend(linear("head", &net.head));
                v
            }
        }
    }

    pub fn groups(&self) -> ParamGroups {
        let mut g = ParamGroups::new();
        for ((name, shape), p) in self.layout().into_iter().zip(self.params()) {
            g.push_param(name, shape, p);
        }
        g
    }

    /// Replace every parameter with the stored group of the same name.
    pub fn load_groups(&mut self, groups: &mut ParamGroups) -> Result<()> {
        let layout = self.layout();
        for ((name, shape), p) in layout.into_iter().zip(self.params_mut()) {
            *p = Param::new(groups.take(&name, &shape)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(c: &Classifier, x: &[f32], plane: Plane) -> f64 {
        let (logit, _) = c.forward(x, plane);
        nn::softplus(-(logit as f64))
    }

    #[test]
    fn resnet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plane = Plane::new(6, 5);
        let mut c = Classifier::new(Architecture::Resnet { width: 3 }, plane, &mut rng).unwrap();
        for p in c.params_mut() {
            for v in p.value.iter_mut() {
                *v += rng.random_range(-0.3f32..0.3);
            }
        }
        let x: Vec<f32> = (0..plane.area()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let (logit, tape) = c.forward(&x, plane);
        let dlogit = -nn::sigmoid(-(logit as f64)) as f32;
        c.backward(&x, plane, &tape, dlogit);
        let analytic: Vec<Vec<f32>> = c.params().iter().map(|p| p.grad.clone()).collect();
        let h = 2e-3f32;
        let base = loss(&c, &x, plane);
        let (mut checked, mut kinks) = (0, 0);
        for (pi, grads) in analytic.iter().enumerate() {
            for j in (0..grads.len()).step_by(7) {
                let mut plus = c.clone();
                plus.params_mut()[pi].value[j] += h;
                let mut minus = c.clone();
                minus.params_mut()[pi].value[j] -= h;
                let (lp, lm) = (loss(&plus, &x, plane), loss(&minus, &x, plane));
                let right = (lp - base) / h as f64;
                let left = (base - lm) / h as f64;
                // A ReLU switching inside [-h, h] makes the one-sided slopes disagree.
                if (right - left).abs() > 4e-3 + 5e-2 * right.abs().max(left.abs()) {
                    kinks += 1;
                    continue;
                }
                checked += 1;
                let numeric = (lp - lm) / (2.0 * h as f64);
                let err = (numeric - grads[j] as f64).abs();
                assert!(err < 2e-3 + 2e-2 * numeric.abs(), "param {pi}[{j}]: {numeric} vs {}", grads[j]);
            }
        }
        assert!(kinks * 20 <= checked, "{kinks} kinks vs {checked} checked");
    }

    #[test]
    fn groups_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plane = Plane::new(8, 8);
        let c = Classifier::new(Architecture::Resnet { width: 4 }, plane, &mut rng).unwrap();
        let mut other = Classifier::new(Architecture::Resnet { width: 4 }, plane, &mut rng).unwrap();
        assert_ne!(c, other);
        other.load_groups(&mut c.groups()).unwrap();
        assert_eq!(c, other);
        let mut wrong = Classifier::new(Architecture::Resnet { width: 5 }, plane, &mut rng).unwrap();
        assert!(wrong.load_groups(&mut c.groups()).is_err());
    }

    #[test]
    fn width_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plane = Plane::new(4, 4);
        assert!(Classifier::new(Architecture::Resnet { width: 33 }, plane, &mut rng).is_err());
        assert!(Classifier::new(Architecture::Resnet { width: 0 }, plane, &mut rng).is_err());
    }
}
