use ndarray::{Array1, Array2, Array4, ArrayD, Ix2, Ix4, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Forward-pass cache for one layer: the input it saw and the output it
/// produced. Enough for every layer type here.
pub struct Cache {
    pub input: ArrayD<f64>,
    pub output: ArrayD<f64>,
}

pub trait Layer: Send + Sync {
    fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64>;
    /// Returns (gradient w.r.t. input, gradients w.r.t. own params).
    fn backward(&self, cache: &Cache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>);
    fn params(&self) -> Vec<&ArrayD<f64>> {
        Vec::new()
    }
    fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        Vec::new()
    }
}

/// Declarative layer description; serializable so checkpoints can rebuild the
/// exact architecture.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum LayerSpec {
    Dense { inp: usize, out: usize },
    Conv2d { in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize },
    Flatten,
    Reshape { shape: Vec<usize> },
    Relu,
    LeakyRelu { alpha: f64 },
    ScaledTanh { scale: f64 },
    Sigmoid,
}

impl LayerSpec {
    pub fn instantiate(&self, rng: &mut ChaCha8Rng) -> Box<dyn Layer> {
        match *self {
            LayerSpec::Dense { inp, out } => Box::new(Dense::init(inp, out, rng)),
            LayerSpec::Conv2d { in_c, out_c, kernel, stride, pad } => {
                Box::new(Conv2d::init(in_c, out_c, kernel, stride, pad, rng))
            }
            LayerSpec::Flatten => Box::new(Flatten),
            LayerSpec::Reshape { ref shape } => Box::new(Reshape { shape: shape.clone() }),
            LayerSpec::Relu => Box::new(Relu),
            LayerSpec::LeakyRelu { alpha } => Box::new(LeakyRelu { alpha }),
            LayerSpec::ScaledTanh { scale } => Box::new(ScaledTanh { scale }),
            LayerSpec::Sigmoid => Box::new(Sigmoid),
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> f64 {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.gen_range(-lim..lim)
}

pub struct Dense {
    w: ArrayD<f64>, // (in, out)
    b: ArrayD<f64>, // (out,)
}

impl Dense {
    fn init(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Dense {
        let w = Array2::from_shape_fn((inp, out), |_| xavier(rng, inp, out)).into_dyn();
        let b = Array1::zeros(out).into_dyn();
        Dense { w, b }
    }
}

impl Layer for Dense {
    fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let x = x.view().into_dimensionality::<Ix2>().expect("dense input 2d");
        let w = self.w.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        (x.dot(&w) + b).into_dyn()
    }

    fn backward(&self, cache: &Cache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        let x = cache.input.view().into_dimensionality::<Ix2>().unwrap();
        let g = grad_out.view().into_dimensionality::<Ix2>().unwrap();
        let w = self.w.view().into_dimensionality::<Ix2>().unwrap();
        let gw = x.t().dot(&g).into_dyn();
        let gb = g.sum_axis(ndarray::Axis(0)).into_dyn();
        let gx = g.dot(&w.t()).into_dyn();
        (gx, vec![gw, gb])
    }

    fn params(&self) -> Vec<&ArrayD<f64>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

pub struct Conv2d {
    w: ArrayD<f64>, // (out_c, in_c, k, k)
    b: ArrayD<f64>, // (out_c,)
    stride: usize,
    pad: usize,
}

impl Conv2d {
    fn init(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Conv2d {
        let fan_in = in_c * kernel * kernel;
        let fan_out = out_c * kernel * kernel;
        let w = Array4::from_shape_fn((out_c, in_c, kernel, kernel), |_| xavier(rng, fan_in, fan_out)).into_dyn();
        let b = Array1::zeros(out_c).into_dyn();
        Conv2d { w, b, stride, pad }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.shape()[2];
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }
}

impl Layer for Conv2d {
    fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let x = x.view().into_dimensionality::<Ix4>().expect("conv input 4d");
        let w = self.w.view().into_dimensionality::<Ix4>().unwrap();
        let (b, in_c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (out_c, k) = (w.shape()[0], w.shape()[2]);
        let (oh, ow) = self.out_hw(h, wd);
        let mut out = Array4::<f64>::zeros((b, out_c, oh, ow));
        for n in 0..b {
            for oc in 0..out_c {
                let bias = self.b[[oc]];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias;
                        for ic in 0..in_c {
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix as usize >= wd {
                                        continue;
                                    }
                                    acc += x[[n, ic, iy as usize, ix as usize]] * w[[oc, ic, ky, kx]];
                                }
                            }
                        }
                        out[[n, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        out.into_dyn()
    }

    fn backward(&self, cache: &Cache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        let x = cache.input.view().into_dimensionality::<Ix4>().unwrap();
        let g = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let w = self.w.view().into_dimensionality::<Ix4>().unwrap();
        let (b, in_c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (out_c, k) = (w.shape()[0], w.shape()[2]);
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let mut gx = Array4::<f64>::zeros((b, in_c, h, wd));
        let mut gw = Array4::<f64>::zeros((out_c, in_c, k, k));
        let mut gb = Array1::<f64>::zeros(out_c);
        for n in 0..b {
            for oc in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = g[[n, oc, oy, ox]];
                        gb[oc] += go;
                        for ic in 0..in_c {
                            for ky in 0..k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix as usize >= wd {
                                        continue;
                                    }
                                    gw[[oc, ic, ky, kx]] += go * x[[n, ic, iy as usize, ix as usize]];
                                    gx[[n, ic, iy as usize, ix as usize]] += go * w[[oc, ic, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx.into_dyn(), vec![gw.into_dyn(), gb.into_dyn()])
    }

    fn params(&self) -> Vec<&ArrayD<f64>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Layout-safe reshape: `into_shape` silently reinterprets f-order arrays
/// (e.g. `dot` against a transposed view returns one), so always copy in
/// logical order.
pub(crate) fn reshaped(a: &ArrayD<f64>, dims: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(dims), a.iter().copied().collect()).unwrap()
}

pub struct Flatten;

impl Layer for Flatten {
    fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let b = x.shape()[0];
        let rest: usize = x.shape()[1..].iter().product();
        reshaped(x, &[b, rest])
    }

    fn backward(&self, cache: &Cache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        (reshaped(grad_out, cache.input.shape()), Vec::new())
    }
}

/// Reshapes (b, prod(shape)) into (b, shape...).
pub struct Reshape {
    shape: Vec<usize>,
}

impl Layer for Reshape {
    fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let b = x.shape()[0];
        let mut dims = vec![b];
        dims.extend_from_slice(&self.shape);
        reshaped(x, &dims)
    }

    fn backward(&self, cache: &Cache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        (reshaped(grad_out, cache.input.shape()), Vec::new())
    }
}

pub struct Relu;

impl Layer for Relu {
    fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        x.mapv(|v| v.max(0.0))
    }

    fn backward(&self, cache: &Cache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        let mut g = grad_out.clone();
        g.zip_mut_with(&cache.input, |gv, &iv| {
            if iv <= 0.0 {
                *gv = 0.0
            }
        });
        (g, Vec::new())
    }
}

pub struct LeakyRelu {
    alpha: f64,
}

impl Layer for LeakyRelu {
    fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let a = self.alpha;
        x.mapv(|v| if v > 0.0 { v } else { a * v })
    }

    fn backward(&self, cache: &Cache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        let a = self.alpha;
        let mut g = grad_out.clone();
        g.zip_mut_with(&cache.input, |gv, &iv| {
            if iv <= 0.0 {
                *gv *= a
            }
        });
        (g, Vec::new())
    }
}

/// y = scale * tanh(x); bounds each output to (-scale, scale).
pub struct ScaledTanh {
    scale: f64,
}

impl Layer for ScaledTanh {
    fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let s = self.scale;
        x.mapv(|v| s * v.tanh())
    }

    fn backward(&self, cache: &Cache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        let s = self.scale;
        let mut g = grad_out.clone();
        g.zip_mut_with(&cache.output, |gv, &ov| {
            let t = ov / s;
            *gv *= s * (1.0 - t * t);
        });
        (g, Vec::new())
    }
}

pub struct Sigmoid;

impl Layer for Sigmoid {
    fn forward(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
    }

    fn backward(&self, cache: &Cache, grad_out: &ArrayD<f64>) -> (ArrayD<f64>, Vec<ArrayD<f64>>) {
        let mut g = grad_out.clone();
        g.zip_mut_with(&cache.output, |gv, &ov| *gv *= ov * (1.0 - ov));
        (g, Vec::new())
    }
}
