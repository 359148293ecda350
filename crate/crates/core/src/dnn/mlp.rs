//! Fully connected ReLU network with a linear output layer, batch-major.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::substream;

use super::DnnError;

/// Floating-point element type of a network.
pub trait Real:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<F> {
    /// Weights, `out × in`.
    pub w: Array2<F>,
    pub b: Array1<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<F> {
    pub layers: Vec<Layer<F>>,
}

/// Inverted-dropout masks for the hidden layers of one batch: entries are 0
/// or `1/(1 − rate)`.
#[derive(Clone, Debug)]
pub struct DropoutMasks<F> {
    pub masks: Vec<Array2<F>>,
}

impl<F: Real> DropoutMasks<F> {
    pub fn sample<R: Rng + ?Sized>(mlp: &Mlp<F>, batch: usize, rate: f64, rng: &mut R) -> Self {
        let keep = F::of(1.0 / (1.0 - rate));
        let masks = mlp.layers[..mlp.layers.len() - 1]
            .iter()
            .map(|l| {
                Array2::from_shape_fn((batch, l.b.len()), |_| {
                    if rng.random::<f64>() < rate {
                        F::zero()
                    } else {
                        keep
                    }
                })
            })
            .collect();
        DropoutMasks { masks }
    }
}

/// Per-parameter gradients, same shapes as the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub w: Vec<Array2<F>>,
    pub b: Vec<Array1<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn zeros_like(mlp: &Mlp<F>) -> Self {
        Gradients {
            w: mlp
                .layers
                .iter()
                .map(|l| Array2::zeros(l.w.raw_dim()))
                .collect(),
            b: mlp
                .layers
                .iter()
                .map(|l| Array1::zeros(l.b.raw_dim()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> F {
        let m = |acc: F, x: &F| acc.max(x.abs());
        let w = self
            .w
            .iter()
            .fold(F::zero(), |acc, a| a.iter().fold(acc, m));
        self.b.iter().fold(w, |acc, a| a.iter().fold(acc, m))
    }
}

/// Sets flush-to-zero and denormals-are-zero on the current thread while
/// alive. Subnormal activations otherwise slow the matrix kernels by an order
/// of magnitude once weights decay late in training.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[allow(deprecated)]
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
            // SAFETY: only the FTZ (bit 15) and DAZ (bit 6) flags change; SSE is
            // baseline on x86_64.
            let saved = unsafe { _mm_getcsr() };
            unsafe { _mm_setcsr(saved | 0x8040) };
            FlushDenormals { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        FlushDenormals {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    #[allow(deprecated)]
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: restores the value read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}

struct Cache<F> {
    /// Input of every layer.
    inputs: Vec<Array2<F>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Array2<F>>,
    output: Array2<F>,
}

fn relu_inplace<F: Real>(a: &mut Array2<F>) {
    a.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

impl<F: Real> Mlp<F> {
    /// He-normal weights (std √(2/fan_in)) and zero biases.
    pub fn he_init(sizes: &[usize], seed: u64) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = substream(seed, "dnn/init", l as u64);
                let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    F::of(std * rng.sample::<f64, _>(StandardNormal))
                });
                Layer {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                w: Array2::zeros((w[1], w[0])),
                b: Array1::zeros(w[1]),
            })
            .collect();
        Mlp { layers }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_len()];
        s.extend(self.layers.iter().map(|l| l.b.len()));
        s
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.ncols())
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.b.len())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<F>) -> Result<(), DnnError> {
        if x.ncols() != self.input_len() {
            return Err(DnnError::Shape {
                what: "input",
                expected: self.input_len(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<F>, masks: Option<&DropoutMasks<F>>, keep: bool) -> Cache<F> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut pre = Vec::with_capacity(if keep { last } else { 0 });
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w.t());
            z += &layer.b;
            if keep {
                inputs.push(a);
            }
            if l == last {
                return Cache {
                    inputs,
                    pre,
                    output: z,
                };
            }
            if keep {
                pre.push(z.clone());
            }
            relu_inplace(&mut z);
            if let Some(m) = masks {
                z *= &m.masks[l];
            }
            a = z;
        }
        unreachable!("network has at least one layer")
    }

    /// Batch forward pass; dropout masks switch on train mode.
    pub fn forward(
        &self,
        x: ArrayView2<F>,
        masks: Option<&DropoutMasks<F>>,
    ) -> Result<Array2<F>, DnnError> {
        self.check_input(&x)?;
        Ok(self.run(x, masks, false).output)
    }

    /// Mean squared error over batch and outputs, inference mode.
    pub fn mse(&self, x: ArrayView2<F>, y: ArrayView2<F>) -> Result<F, DnnError> {
        let out = self.forward(x, None)?;
        if out.dim() != y.dim() {
            return Err(DnnError::Shape {
                what: "target",
                expected: out.ncols(),
                got: y.ncols(),
            });
        }
        let n = F::of(out.len() as f64);
        Ok(Zip::from(&out)
            .and(&y)
            .fold(F::zero(), |acc, &o, &t| acc + (o - t) * (o - t))
            / n)
    }

    /// Loss and exact gradients of the batch MSE for fixed dropout masks.
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<F>,
        y: ArrayView2<F>,
        masks: Option<&DropoutMasks<F>>,
    ) -> Result<(F, Gradients<F>), DnnError> {
        self.check_input(&x)?;
        if x.nrows() == 0 {
            return Err(DnnError::Data("empty batch".into()));
        }
        let cache = self.run(x, masks, true);
        if cache.output.dim() != y.dim() {
            return Err(DnnError::Shape {
                what: "target",
                expected: cache.output.ncols(),
                got: y.ncols(),
            });
        }
        let count = F::of(cache.output.len() as f64);
        let mut delta = cache.output - y;
        let loss = delta.iter().fold(F::zero(), |acc, &d| acc + d * d) / count;
        delta *= F::of(2.0) / count;

        let nl = self.layers.len();
        let mut gw = Vec::with_capacity(nl);
        let mut gb = Vec::with_capacity(nl);
        for l in (0..nl).rev() {
            gw.push(delta.t().dot(&cache.inputs[l]));
            gb.push(delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].w);
                let z = &cache.pre[l - 1];
                match masks {
                    Some(m) => {
                        Zip::from(&mut back)
                            .and(z)
                            .and(&m.masks[l - 1])
                            .for_each(|d, &z, &k| {
                                *d = if z > F::zero() { *d * k } else { F::zero() };
                            })
                    }
                    None => Zip::from(&mut back).and(z).for_each(|d, &z| {
                        if z <= F::zero() {
                            *d = F::zero();
                        }
                    }),
                }
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok((loss, Gradients { w: gw, b: gb }))
    }

    pub fn cast<G: Real>(&self) -> Mlp<G> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: l.w.mapv(|v| G::of(v.as_f64())),
                    b: l.b.mapv(|v| G::of(v.as_f64())),
                })
                .collect(),
        }
    }
}
