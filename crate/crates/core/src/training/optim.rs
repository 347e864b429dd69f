use super::OptimizerKind;
use crate::model::Params;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First-order optimizer over any [`Params`] container.
#[derive(Debug, Clone)]
pub struct Optimizer<P> {
    kind: OptimizerKind,
    lr: f64,
    moments: Option<(P, P)>,
    steps: i32,
}

impl<P: Params> Optimizer<P> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            moments: None,
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut P, grads: &P) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => params.axpy(-self.lr, grads),
            OptimizerKind::Adam => {
                let (m, v) = self
                    .moments
                    .get_or_insert_with(|| (grads.zeros_like(), grads.zeros_like()));
                let c1 = 1.0 - BETA1.powi(self.steps);
                let c2 = 1.0 - BETA2.powi(self.steps);
                let lr = self.lr;
                let groups = params
                    .params_mut()
                    .into_iter()
                    .zip(grads.params())
                    .zip(m.params_mut())
                    .zip(v.params_mut());
                for (((p, g), m), v) in groups {
                    let (p, g) = (p.as_mut_slice(), g.as_slice());
                    let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
                    for i in 0..p.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::Dense;

    fn quadratic_grad(p: &Dense) -> Dense {
        // ∇ of ½‖W − 1‖² + ½‖b‖²
        Dense {
            weight: p.weight.map(|v| v - 1.0),
            bias: p.bias.clone(),
        }
    }

    #[test]
    fn both_kinds_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = Dense {
                weight: Matrix::zeros(2, 2),
                bias: Matrix::column(&[3.0, -2.0]),
            };
            let mut opt = Optimizer::new(kind, 0.1);
            for _ in 0..500 {
                let g = quadratic_grad(&p);
                opt.step(&mut p, &g);
            }
            assert!(p.weight.map(|v| v - 1.0).max_abs() < 1e-3, "{kind:?}");
            assert!(p.bias.max_abs() < 1e-3, "{kind:?}");
        }
    }

    #[test]
    fn first_adam_step_has_size_lr() {
        let mut p = Dense {
            weight: Matrix::zeros(1, 1),
            bias: Matrix::zeros(1, 1),
        };
        let g = Dense {
            weight: Matrix::column(&[5.0]),
            bias: Matrix::column(&[-0.01]),
        };
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        opt.step(&mut p, &g);
        assert!((p.weight[(0, 0)] + 0.1).abs() < 1e-8);
        assert!((p.bias[(0, 0)] - 0.1).abs() < 1e-5);
    }
}
