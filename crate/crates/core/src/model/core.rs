//! Temporal cores: small `r′ × r′` matrices `F_t` that carry all time
//! variation of a shared-basis adapter.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};
use crate::linalg::{expm_with_tape, ExpmTape, Matrix};
use crate::rng::SeededRng;

pub const MARKOV_HIDDEN: usize = 16;
pub const NONLIN_HIDDEN: usize = 32;
/// Largest rollout length accepted by the recurrent core.
pub const MARKOV_MAX_STEPS: f64 = 1.0e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoreVariant {
    LinDyn,
    Markov,
    NonLin,
}

impl CoreVariant {
    pub const ALL: [CoreVariant; 3] = [CoreVariant::LinDyn, CoreVariant::Markov, CoreVariant::NonLin];

    pub fn name(self) -> &'static str {
        match self {
            CoreVariant::LinDyn => "lindyn",
            CoreVariant::Markov => "markov",
            CoreVariant::NonLin => "nonlin",
        }
    }

    /// Exact trainable-parameter count `|W_F|` for a core of size `r′`.
    pub fn param_count(self, r_prime: usize) -> usize {
        let q = r_prime * r_prime;
        match self {
            CoreVariant::LinDyn => 2 * q,
            CoreVariant::Markov => {
                let h = MARKOV_HIDDEN;
                h * h + h + q * h + q + h
            }
            CoreVariant::NonLin => {
                let w = NONLIN_HIDDEN;
                (w + w) + (w * w + w) + (q * w + q)
            }
        }
    }
}

impl fmt::Display for CoreVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoreVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lindyn" => Ok(CoreVariant::LinDyn),
            "markov" => Ok(CoreVariant::Markov),
            "nonlin" => Ok(CoreVariant::NonLin),
            other => Err(Error::Argument(format!(
                "unknown core variant '{other}' (expected lindyn, markov, nonlin)"
            ))),
        }
    }
}

/// Linear flow `F_t = exp(t·𝒲)·F₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinDynCore {
    pub velocity: Matrix,
    pub f0: Matrix,
}

/// Input-free recurrence `h_s = tanh(W_h h_{s−1} + b_h)` read out as
/// `vec(F_t) = W_o h_t + b_o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovCore {
    pub w_h: Matrix,
    pub b_h: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
    pub h0: Matrix,
}

/// `vec(F_t) = MLP(t / time_scale)` with two tanh hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonLinCore {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
    /// Fixed normalizer; training timestamps map into `[0, 1]`.
    pub time_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum TemporalCore {
    LinDyn(LinDynCore),
    Markov(MarkovCore),
    NonLin(NonLinCore),
}

/// Intermediates of one core evaluation.
#[derive(Debug, Clone)]
pub enum CoreTape {
    LinDyn { t: f64, flow: Matrix, expm: ExpmTape },
    Markov { states: Vec<Matrix> },
    NonLin { input: f64, z1: Matrix, z2: Matrix },
}

fn vec_identity(r: usize, scale: f64) -> Matrix {
    Matrix::identity(r).scale(scale).reshape(r * r, 1)
}

impl TemporalCore {
    pub fn init(variant: CoreVariant, r_prime: usize, time_scale: f64, rng: &mut SeededRng) -> Self {
        match variant {
            CoreVariant::LinDyn => TemporalCore::LinDyn(LinDynCore {
                velocity: Matrix::from_fn(r_prime, r_prime, |_, _| 0.01 * rng.normal()),
                f0: Matrix::identity(r_prime).scale(0.1),
            }),
            CoreVariant::Markov => {
                let h = MARKOV_HIDDEN;
                let q = r_prime * r_prime;
                let wstd = 0.9 / (h as f64).sqrt();
                TemporalCore::Markov(MarkovCore {
                    w_h: Matrix::from_fn(h, h, |_, _| wstd * rng.normal()),
                    b_h: Matrix::zeros(h, 1),
                    w_o: Matrix::from_fn(q, h, |_, _| 0.01 * rng.normal()),
                    b_o: vec_identity(r_prime, 0.1),
                    h0: Matrix::from_fn(h, 1, |_, _| 0.5 * rng.normal()),
                })
            }
            CoreVariant::NonLin => {
                let w = NONLIN_HIDDEN;
                let q = r_prime * r_prime;
                let std2 = 1.0 / (w as f64).sqrt();
                TemporalCore::NonLin(NonLinCore {
                    w1: Matrix::from_fn(w, 1, |_, _| rng.normal()),
                    b1: Matrix::from_fn(w, 1, |_, _| rng.normal()),
                    w2: Matrix::from_fn(w, w, |_, _| std2 * rng.normal()),
                    b2: Matrix::zeros(w, 1),
                    w3: Matrix::from_fn(q, w, |_, _| 0.01 * rng.normal()),
                    b3: vec_identity(r_prime, 0.1),
                    time_scale: if time_scale > 0.0 { time_scale } else { 1.0 },
                })
            }
        }
    }

    pub fn variant(&self) -> CoreVariant {
        match self {
            TemporalCore::LinDyn(_) => CoreVariant::LinDyn,
            TemporalCore::Markov(_) => CoreVariant::Markov,
            TemporalCore::NonLin(_) => CoreVariant::NonLin,
        }
    }

    /// Side length `r′` of the produced core.
    pub fn size(&self) -> usize {
        match self {
            TemporalCore::LinDyn(c) => c.f0.rows(),
            TemporalCore::Markov(c) => (c.b_o.rows() as f64).sqrt().round() as usize,
            TemporalCore::NonLin(c) => (c.b3.rows() as f64).sqrt().round() as usize,
        }
    }

    pub fn eval(&self, t: f64) -> Result<Matrix> {
        Ok(self.eval_with_tape(t)?.0)
    }

    pub fn eval_with_tape(&self, t: f64) -> Result<(Matrix, CoreTape)> {
        if !t.is_finite() {
            return Err(Error::Argument(format!("non-finite timestamp {t}")));
        }
        let r = self.size();
        match self {
            TemporalCore::LinDyn(c) => {
                if t == 0.0 {
                    // exp(0) = I exactly; keep F(0) == F₀ bit for bit.
                    let (flow, tape) = expm_with_tape(&Matrix::zeros(r, r))?;
                    return Ok((c.f0.clone(), CoreTape::LinDyn { t, flow, expm: tape }));
                }
                let (flow, tape) = expm_with_tape(&c.velocity.scale(t))?;
                Ok((flow.dot(&c.f0), CoreTape::LinDyn { t, flow, expm: tape }))
            }
            TemporalCore::Markov(c) => {
                let steps = markov_steps(t)?;
                let mut states = Vec::with_capacity(steps + 1);
                states.push(c.h0.clone());
                for s in 0..steps {
                    let mut a = c.w_h.dot(&states[s]);
                    a.add_scaled(&c.b_h, 1.0);
                    states.push(a.map(f64::tanh));
                }
                let mut out = c.w_o.dot(states.last().expect("h0"));
                out.add_scaled(&c.b_o, 1.0);
                Ok((out.reshape(r, r), CoreTape::Markov { states }))
            }
            TemporalCore::NonLin(c) => {
                let input = t / c.time_scale;
                let mut a1 = c.w1.scale(input);
                a1.add_scaled(&c.b1, 1.0);
                let z1 = a1.map(f64::tanh);
                let mut a2 = c.w2.dot(&z1);
                a2.add_scaled(&c.b2, 1.0);
                let z2 = a2.map(f64::tanh);
                let mut out = c.w3.dot(&z2);
                out.add_scaled(&c.b3, 1.0);
                Ok((out.reshape(r, r), CoreTape::NonLin { input, z1, z2 }))
            }
        }
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂F_t`.
    pub fn backward(&self, tape: &CoreTape, grad_f: &Matrix, grads: &mut TemporalCore) {
        let r = self.size();
        match (self, tape, grads) {
            (TemporalCore::LinDyn(c), CoreTape::LinDyn { t, flow, expm }, TemporalCore::LinDyn(g)) => {
                g.f0.add_scaled(&flow.t_dot(grad_f), 1.0);
                if *t != 0.0 {
                    let d_flow = grad_f.dot_t(&c.f0);
                    g.velocity.add_scaled(&expm.backward(&d_flow), *t);
                }
            }
            (TemporalCore::Markov(c), CoreTape::Markov { states }, TemporalCore::Markov(g)) => {
                let d_out = grad_f.reshape(r * r, 1);
                let last = states.last().expect("h0");
                g.w_o.add_scaled(&d_out.dot_t(last), 1.0);
                g.b_o.add_scaled(&d_out, 1.0);
                let mut dh = c.w_o.t_dot(&d_out);
                for s in (1..states.len()).rev() {
                    let h = &states[s];
                    let da = dh.zip_with(h, |g, hv| g * (1.0 - hv * hv));
                    g.w_h.add_scaled(&da.dot_t(&states[s - 1]), 1.0);
                    g.b_h.add_scaled(&da, 1.0);
                    dh = c.w_h.t_dot(&da);
                }
                g.h0.add_scaled(&dh, 1.0);
            }
            (TemporalCore::NonLin(c), CoreTape::NonLin { input, z1, z2 }, TemporalCore::NonLin(g)) => {
                let d_out = grad_f.reshape(r * r, 1);
                g.w3.add_scaled(&d_out.dot_t(z2), 1.0);
                g.b3.add_scaled(&d_out, 1.0);
                let dz2 = c.w3.t_dot(&d_out);
                let da2 = dz2.zip_with(z2, |g, z| g * (1.0 - z * z));
                g.w2.add_scaled(&da2.dot_t(z1), 1.0);
                g.b2.add_scaled(&da2, 1.0);
                let dz1 = c.w2.t_dot(&da2);
                let da1 = dz1.zip_with(z1, |g, z| g * (1.0 - z * z));
                g.w1.add_scaled(&da1, *input);
                g.b1.add_scaled(&da1, 1.0);
            }
            _ => panic!("core, tape and gradient variants differ"),
        }
    }
}

fn markov_steps(t: f64) -> Result<usize> {
    if t < 0.0 || t.fract() != 0.0 || t > MARKOV_MAX_STEPS {
        return Err(Error::Argument(format!(
            "recurrent core needs a nonnegative integer step index, got {t}"
        )));
    }
    Ok(t as usize)
}

impl Params for TemporalCore {
    fn params(&self) -> Vec<&Matrix> {
        match self {
            TemporalCore::LinDyn(c) => vec![&c.velocity, &c.f0],
            TemporalCore::Markov(c) => vec![&c.w_h, &c.b_h, &c.w_o, &c.b_o, &c.h0],
            TemporalCore::NonLin(c) => vec![&c.w1, &c.b1, &c.w2, &c.b2, &c.w3, &c.b3],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            TemporalCore::LinDyn(c) => vec![&mut c.velocity, &mut c.f0],
            TemporalCore::Markov(c) => vec![&mut c.w_h, &mut c.b_h, &mut c.w_o, &mut c.b_o, &mut c.h0],
            TemporalCore::NonLin(c) => vec![
                &mut c.w1, &mut c.b1, &mut c.w2, &mut c.b2, &mut c.w3, &mut c.b3,
            ],
        }
    }

    fn param_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            TemporalCore::LinDyn(_) => &["velocity", "f0"],
            TemporalCore::Markov(_) => &["w_h", "b_h", "w_o", "b_o", "h0"],
            TemporalCore::NonLin(_) => &["w1", "b1", "w2", "b2", "w3", "b3"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}
