use ndarray::Array4;

use super::{Activation, Conv2d, MaxPool2d, Param, Parameterized, Real};
use crate::{Error, Result};

/// One stage of a plain convolutional stack.
#[derive(Clone, Debug)]
pub enum ConvLayer<F: Real> {
    Conv(Conv2d<F>),
    Relu(Option<Array4<F>>),
    MaxPool(MaxPool2d),
}

impl<F: Real> ConvLayer<F> {
    pub fn relu() -> Self {
        ConvLayer::Relu(None)
    }

    /// Output `(channels, h, w)` for an input of `(c, h, w)`.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match self {
            ConvLayer::Conv(conv) => {
                if conv.in_channels != c {
                    return Err(Error::Shape(format!("{conv:?} cannot take {c} channels")));
                }
                let (ho, wo) = conv.output_hw(h, w)?;
                Ok((conv.out_channels, ho, wo))
            }
            ConvLayer::Relu(_) => Ok((c, h, w)),
            ConvLayer::MaxPool(pool) => {
                let (ho, wo) = pool.output_hw(h, w)?;
                Ok((c, ho, wo))
            }
        }
    }
}

/// Layers applied in order; parameters are named by layer index.
#[derive(Clone, Debug, Default)]
pub struct Sequential<F: Real> {
    pub layers: Vec<ConvLayer<F>>,
}

impl<F: Real> Sequential<F> {
    pub fn new(layers: Vec<ConvLayer<F>>) -> Self {
        Self { layers }
    }

    /// Shapes after every layer, computed from the output-size equation alone.
    pub fn plan(&self, input: (usize, usize, usize)) -> Result<Vec<(usize, usize, usize)>> {
        let mut shape = input;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    pub fn infer(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.infer_traced(x, |_, _| ())
    }

    /// Inference that reports each intermediate tensor shape to `trace`.
    pub fn infer_traced(
        &self,
        x: &Array4<F>,
        mut trace: impl FnMut(usize, (usize, usize, usize)),
    ) -> Result<Array4<F>> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                ConvLayer::Conv(conv) => conv.infer(&cur)?,
                ConvLayer::Relu(_) => Activation::Relu.apply(&cur),
                ConvLayer::MaxPool(pool) => pool.infer(&cur)?,
            };
            let (_, c, h, w) = cur.dim();
            trace(i, (c, h, w));
        }
        Ok(cur)
    }

    pub fn forward(&mut self, x: &Array4<F>) -> Result<Array4<F>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = match layer {
                ConvLayer::Conv(conv) => conv.forward(&cur)?,
                ConvLayer::Relu(cache) => {
                    let y = Activation::Relu.apply(&cur);
                    *cache = Some(cur);
                    y
                }
                ConvLayer::MaxPool(pool) => pool.forward(&cur)?,
            };
        }
        Ok(cur)
    }

    /// Backpropagate `dy`; input gradient is only formed when requested.
    pub fn backward(&mut self, dy: &Array4<F>, need_input_grad: bool) -> Result<Option<Array4<F>>> {
        let mut grad = dy.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let first = i == 0;
            grad = match layer {
                ConvLayer::Conv(conv) => match conv.backward(&grad, !first || need_input_grad)? {
                    Some(g) => g,
                    None => return Ok(None),
                },
                ConvLayer::Relu(cache) => {
                    let x = cache
                        .take()
                        .ok_or_else(|| Error::Shape("relu backward without forward".into()))?;
                    Activation::Relu.backward(&x, &grad)
                }
                ConvLayer::MaxPool(pool) => pool.backward(&grad)?,
            };
        }
        Ok(Some(grad))
    }
}

impl<F: Real> Parameterized<F> for Sequential<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            if let ConvLayer::Conv(conv) = layer {
                conv.visit(&super::join(prefix, &i.to_string()), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let ConvLayer::Conv(conv) = layer {
                conv.visit_mut(&super::join(prefix, &i.to_string()), f);
            }
        }
    }
}
