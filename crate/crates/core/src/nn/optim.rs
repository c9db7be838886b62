use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{real, Parameterized, Real};
use crate::checkpoint::NamedTensor;

pub trait Optimizer<F: Real> {
    /// Apply one update from the accumulated gradients.
    fn step(&mut self, model: &mut dyn Parameterized<F>);
}

/// Stochastic gradient descent with optional momentum and L2 decay.
#[derive(Clone, Debug)]
pub struct Sgd<F: Real> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }
}

impl<F: Real> Optimizer<F> for Sgd<F> {
    fn step(&mut self, model: &mut dyn Parameterized<F>) {
        let lr: F = real(self.lr);
        let mu: F = real(self.momentum);
        let wd: F = real(self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |name, p| {
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(v)
                .for_each(|w, &g, v| {
                    let g = g + wd * *w;
                    *v = mu * *v + g;
                    *w -= lr * *v;
                });
        });
    }
}

/// Adaptive moment estimation.
#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Moment estimates as `adam.m.<param>` / `adam.v.<param>` tensors.
    pub fn export_state(&self) -> Vec<NamedTensor> {
        let dump = |tag: &str, map: &BTreeMap<String, ArrayD<F>>| {
            map.iter()
                .map(|(k, a)| NamedTensor {
                    name: format!("adam.{tag}.{k}"),
                    shape: a.shape().to_vec(),
                    data: a.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
                })
                .collect::<Vec<_>>()
        };
        let mut out = dump("m", &self.m);
        out.extend(dump("v", &self.v));
        out
    }

    pub fn import_state(&mut self, t: u64, tensors: &BTreeMap<String, NamedTensor>) {
        self.t = t;
        for (name, tensor) in tensors {
            let (map, key) = if let Some(k) = name.strip_prefix("adam.m.") {
                (&mut self.m, k)
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                (&mut self.v, k)
            } else {
                continue;
            };
            let data = tensor.data.iter().map(|&x| real::<F>(f64::from(x))).collect();
            if let Ok(a) = ArrayD::from_shape_vec(tensor.shape.clone(), data) {
                map.insert(key.to_string(), a);
            }
        }
    }
}

impl<F: Real> Optimizer<F> for Adam<F> {
    fn step(&mut self, model: &mut dyn Parameterized<F>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let step = self.lr * (1.0 - b2.powi(self.t as i32)).sqrt() / (1.0 - b1.powi(self.t as i32));
        let (step, b1f, b2f, eps): (F, F, F, F) = (real(step), real(b1), real(b2), real(self.eps));
        let one = F::one();
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |name, p| {
            let m = ms
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = vs
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1f * *m + (one - b1f) * g;
                    *v = b2f * *v + (one - b2f) * g * g;
                    *w -= step * *m / (v.sqrt() + eps);
                });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, Parameterized};

    struct Quadratic(Param<f64>);

    impl Parameterized<f64> for Quadratic {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f("x", &self.0)
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("x", &mut self.0)
        }
    }

    fn minimise(opt: &mut dyn Optimizer<f64>) -> f64 {
        let mut q = Quadratic(Param::new(ndarray::arr1(&[5.0]).into_dyn()));
        for _ in 0..2000 {
            let x = q.0.value[[0]];
            q.0.grad[[0]] = 2.0 * (x - 1.5);
            opt.step(&mut q);
        }
        q.0.value[[0]]
    }

    #[test]
    fn optimisers_converge_on_a_quadratic() {
        assert!((minimise(&mut Sgd::new(0.05, 0.9, 0.0)) - 1.5).abs() < 1e-6);
        assert!((minimise(&mut Adam::new(0.05)) - 1.5).abs() < 1e-3);
    }
}
