//! Soft Dice + cross-entropy, deep supervision weighting and the L2 penalty.
//!
//! Losses are evaluated in `f64` whatever the network precision and return
//! gradients with respect to the logits they were given.

use crate::error::{Error, Result};
use crate::pocketnet::{NetOutput, Network, ParamKind, Real, Tensor};

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Integer labels in N×X×Y×Z order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl LabelBatch {
    pub fn new(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                format!("{} labels for {shape:?}", shape.iter().product::<usize>()),
                data.len().to_string(),
            ));
        }
        Ok(LabelBatch { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Stride-`f` nearest-neighbour subsampling: output voxel `i` reads input `i·f`.
    pub fn downsample(&self, f: usize) -> LabelBatch {
        let [n, x, y, z] = self.shape;
        let (ox, oy, oz) = (x.div_ceil(f), y.div_ceil(f), z.div_ceil(f));
        let mut data = Vec::with_capacity(n * ox * oy * oz);
        for b in 0..n {
            for i in 0..ox {
                for j in 0..oy {
                    for k in 0..oz {
                        data.push(self.data[((b * x + i * f) * y + j * f) * z + k * f]);
                    }
                }
            }
        }
        LabelBatch {
            shape: [n, ox, oy, oz],
            data,
        }
    }
}

/// Scalar loss and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub grad: Tensor<T>,
}

/// Per-voxel softmax over channels, in `f64`.
fn softmax(logits: &Tensor<impl Real>) -> Vec<f64> {
    let c = logits.channels();
    let v = logits.voxels();
    let mut p = vec![0.0; logits.len()];
    for n in 0..logits.batch() {
        let src = logits.sample(n);
        let dst = &mut p[n * c * v..(n + 1) * c * v];
        for i in 0..v {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(src[ch * v + i].f64());
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (src[ch * v + i].f64() - mx).exp();
                dst[ch * v + i] = e;
                sum += e;
            }
            for ch in 0..c {
                dst[ch * v + i] /= sum;
            }
        }
    }
    p
}

/// `1 − mean_c softDice_c + mean CE`, Dice aggregated over the whole batch.
pub fn dice_ce_loss<T: Real>(logits: &Tensor<T>, target: &LabelBatch) -> Result<LossGrad<T>> {
    let [n, c, x, y, z] = logits.shape();
    if target.shape() != [n, x, y, z] {
        return Err(Error::shape(
            format!("target {:?}", [n, x, y, z]),
            format!("{:?}", target.shape()),
        ));
    }
    if let Some(&bad) = target.data().iter().find(|&&t| usize::from(t) >= c) {
        return Err(Error::Label {
            value: i64::from(bad),
            allowed: format!("0..{c}"),
        });
    }
    let v = x * y * z;
    let m = (n * v) as f64;
    let p = softmax(logits);
    let at = |b: usize, ch: usize, i: usize| (b * c + ch) * v + i;

    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    let mut ce = 0.0;
    for b in 0..n {
        for i in 0..v {
            let t = usize::from(target.data()[b * v + i]);
            for ch in 0..c {
                psum[ch] += p[at(b, ch, i)];
            }
            inter[t] += p[at(b, t, i)];
            gsum[t] += 1.0;
            // log p_t through log-sum-exp keeps saturated logits finite.
            let src = logits.sample(b);
            let zt = src[t * v + i].f64();
            let mx = (0..c).map(|ch| src[ch * v + i].f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c).map(|ch| (src[ch * v + i].f64() - mx).exp()).sum::<f64>().ln();
            ce += lse - zt;
        }
    }
    ce /= m;
    let mut dice_mean = 0.0;
    // dL/dp for the Dice part, per class: a_c·g − b_c.
    let mut coef_g = vec![0.0; c];
    let mut coef_1 = vec![0.0; c];
    for ch in 0..c {
        let s = psum[ch] + gsum[ch] + DICE_SMOOTH;
        let num = 2.0 * inter[ch] + DICE_SMOOTH;
        dice_mean += num / s;
        coef_g[ch] = -2.0 / (s * c as f64);
        coef_1[ch] = num / (s * s * c as f64);
    }
    dice_mean /= c as f64;
    let loss = 1.0 - dice_mean + ce;

    let mut grad = Tensor::zeros(logits.shape());
    let g = grad.data_mut();
    let mut dp = vec![0.0; c];
    for b in 0..n {
        for i in 0..v {
            let t = usize::from(target.data()[b * v + i]);
            let mut dot = 0.0;
            for ch in 0..c {
                let onehot = if ch == t { 1.0 } else { 0.0 };
                dp[ch] = coef_g[ch] * onehot + coef_1[ch];
                dot += dp[ch] * p[at(b, ch, i)];
            }
            for ch in 0..c {
                let pc = p[at(b, ch, i)];
                let onehot = if ch == t { 1.0 } else { 0.0 };
                let d = pc * (dp[ch] - dot) + (pc - onehot) / m;
                g[at(b, ch, i)] = T::lit(d);
            }
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Head weights `2^-d` (d = 0 is the main output), normalized to sum to 1.
pub fn deep_supervision_weights(heads: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=heads).map(|d| 0.5f64.powi(d as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Normalizes a user-supplied weight vector.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || total <= 0.0 {
        return Err(Error::Config(format!(
            "deep supervision weights {weights:?} must be non-negative with a positive sum"
        )));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Loss over the main and auxiliary outputs with the gradients for each.
#[derive(Clone, Debug)]
pub struct DeepSupervisionLoss<T> {
    pub loss: f64,
    pub main: Tensor<T>,
    pub aux: Vec<Tensor<T>>,
}

/// `Σ_d w_d · dice_ce_loss(output_d, target ↓ 2^d)`.
///
/// `weights` overrides the geometric default and must have one entry per output.
pub fn deep_supervision_loss<T: Real>(
    out: &NetOutput<T>,
    target: &LabelBatch,
    weights: Option<&[f64]>,
) -> Result<DeepSupervisionLoss<T>> {
    let heads = out.aux.len();
    let w = match weights {
        Some(w) if w.len() != heads + 1 => {
            return Err(Error::Config(format!(
                "{} deep supervision weights for {} outputs",
                w.len(),
                heads + 1
            )))
        }
        Some(w) => normalize_weights(w)?,
        None => deep_supervision_weights(heads),
    };
    let main = dice_ce_loss(&out.main, target)?;
    let mut loss = w[0] * main.loss;
    let mut main_grad = main.grad;
    main_grad.data_mut().iter_mut().for_each(|g| *g *= T::lit(w[0]));
    let dims = out.main.spatial();
    let mut aux_grads = Vec::with_capacity(heads);
    for (d, a) in out.aux.iter().enumerate() {
        let f = 1usize << (d + 1);
        let expect = dims.map(|n| n / f);
        if a.spatial() != expect || dims.iter().any(|n| n % f != 0) {
            return Err(Error::shape(
                format!("aux head {} dims {expect:?}", d + 1),
                format!("{:?}", a.spatial()),
            ));
        }
        let wd = w[d + 1];
        if wd == 0.0 {
            aux_grads.push(Tensor::zeros(a.shape()));
            continue;
        }
        let lg = dice_ce_loss(a, &target.downsample(f))?;
        loss += wd * lg.loss;
        let mut g = lg.grad;
        g.data_mut().iter_mut().for_each(|v| *v *= T::lit(wd));
        aux_grads.push(g);
    }
    Ok(DeepSupervisionLoss {
        loss,
        main: main_grad,
        aux: aux_grads,
    })
}

/// `coeff · Σ w²` over convolution kernels.
pub fn l2_penalty<T: Real>(net: &Network<T>, coeff: f64) -> f64 {
    if coeff == 0.0 {
        return 0.0;
    }
    let sum: f64 = net
        .params()
        .iter()
        .filter(|p| p.kind == ParamKind::Kernel)
        .flat_map(|p| p.value.iter())
        .map(|w| w.f64() * w.f64())
        .sum();
    coeff * sum
}

/// Adds the L2 gradient `2·coeff·w` to kernel gradients and returns the penalty.
pub fn apply_l2<T: Real>(net: &mut Network<T>, coeff: f64) -> f64 {
    let penalty = l2_penalty(net, coeff);
    if coeff != 0.0 {
        let two_c = T::lit(2.0 * coeff);
        for p in net.params_mut() {
            if p.kind == ParamKind::Kernel {
                for (g, &w) in p.grad.iter_mut().zip(&p.value) {
                    *g += two_c * w;
                }
            }
        }
    }
    penalty
}
