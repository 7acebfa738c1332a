//! Encoder-decoder network with constant (pocket) or doubling channel width.
//!
//! Layout for `levels = L`:
//!
//! ```text
//! enc[0]  = ResBlock(in → c0)
//! enc[l]  = down[l-1] (3³ stride-2 conv, c(l-1) → c(l)) then ResBlock(c(l) → c(l))
//! dec[l]  = up (2³ transposed conv, c(l+1) → c(l)), concat enc[l], ResBlock(2c(l) → c(l))
//! head    = 1³ conv c0 → classes;   aux[d] = 1³ conv c(d) → classes on level d
//! ```
//!
//! `c(l) = width` for pocket, `width · 2^l` for doubling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Buffer, BatchNorm3d, Conv3d, ConvTranspose3d, Param, ResBlock, ResCache, Unit, UnitCache};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Widening {
    /// Same channel count at every resolution level.
    Pocket,
    /// Channel count doubles with each downsampling.
    Doubling,
}

fn default_true() -> bool {
    true
}

fn default_convs() -> usize {
    2
}

fn default_kernel() -> usize {
    3
}

/// Declarative network description; weight shapes are a pure function of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub levels: usize,
    pub width: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    #[serde(default = "default_true")]
    pub residual: bool,
    #[serde(default)]
    pub deep_supervision_heads: usize,
    pub widening: Widening,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
    /// Conv units per resolution-level block.
    #[serde(default = "default_convs")]
    pub convs_per_block: usize,
    /// Seed for weight initialization.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            levels: 4,
            width: 32,
            kernel: 3,
            in_channels: 1,
            out_classes: 2,
            residual: true,
            deep_supervision_heads: 0,
            widening: Widening::Pocket,
            batch_norm: true,
            convs_per_block: 2,
            seed: 0,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.levels < 1 {
            return fail("levels must be >= 1".into());
        }
        if self.width < 1 {
            return fail("width must be >= 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel {} must be odd", self.kernel));
        }
        if self.in_channels < 1 || self.out_classes < 1 {
            return fail("in_channels and out_classes must be >= 1".into());
        }
        if self.deep_supervision_heads >= self.levels {
            return fail(format!(
                "deep_supervision_heads {} must be < levels {}",
                self.deep_supervision_heads, self.levels
            ));
        }
        if self.convs_per_block < 1 {
            return fail("convs_per_block must be >= 1".into());
        }
        Ok(())
    }

    /// Channel count at resolution level `l`.
    pub fn channels_at(&self, level: usize) -> usize {
        match self.widening {
            Widening::Pocket => self.width,
            Widening::Doubling => self.width << level,
        }
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_input_dims(&self, dims: [usize; 3]) -> Result<()> {
        let div = self.divisor();
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 || d % div != 0 {
                return Err(Error::shape(
                    format!("axis {axis} divisible by {div}"),
                    format!("axis {axis} = {d}"),
                ));
            }
        }
        Ok(())
    }
}

/// Logits from one forward pass: main head plus auxiliary heads at levels 1, 2, …
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput<T> {
    pub main: Tensor<T>,
    pub aux: Vec<Tensor<T>>,
}

/// Activation caches of a training forward pass.
pub struct Tape<T> {
    enc: Vec<ResCache<T>>,
    down: Vec<UnitCache<T>>,
    up_inputs: Vec<Tensor<T>>,
    dec: Vec<ResCache<T>>,
    level_out: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: ArchSpec,
    enc: Vec<ResBlock<T>>,
    /// `down[l]` maps level `l` to level `l + 1`.
    down: Vec<Unit<T>>,
    /// `up[l]` maps level `l + 1` to level `l`.
    up: Vec<ConvTranspose3d<T>>,
    /// `dec[l]` for `l < levels - 1`.
    dec: Vec<ResBlock<T>>,
    head: Conv3d<T>,
    /// `aux[d - 1]` reads level `d`.
    aux: Vec<Conv3d<T>>,
    /// Round conv outputs through half precision during training forwards.
    pub mixed_precision: bool,
}

impl<T: Real> Network<T> {
    pub fn build(spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let l = spec.levels;
        let k = spec.kernel;
        let c = |lvl| spec.channels_at(lvl);
        let mut enc = Vec::with_capacity(l);
        let mut down = Vec::with_capacity(l.saturating_sub(1));
        for lvl in 0..l {
            if lvl > 0 {
                let name = format!("down{}", lvl - 1);
                down.push(Unit {
                    conv: Conv3d::new(&name, c(lvl - 1), c(lvl), k, 2, k / 2, 2.0, &mut rng),
                    norm: spec.batch_norm.then(|| BatchNorm3d::new(&format!("{name}.norm"), c(lvl))),
                    relu: true,
                });
            }
            let cin = if lvl == 0 { spec.in_channels } else { c(lvl) };
            enc.push(ResBlock::new(
                &format!("enc{lvl}"),
                cin,
                c(lvl),
                spec.convs_per_block,
                k,
                spec.residual,
                spec.batch_norm,
                &mut rng,
            ));
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for lvl in 0..l.saturating_sub(1) {
            up.push(ConvTranspose3d::new(&format!("up{lvl}"), c(lvl + 1), c(lvl), &mut rng));
            dec.push(ResBlock::new(
                &format!("dec{lvl}"),
                2 * c(lvl),
                c(lvl),
                spec.convs_per_block,
                k,
                spec.residual,
                spec.batch_norm,
                &mut rng,
            ));
        }
        let head = Conv3d::new("head", c(0), spec.out_classes, 1, 1, 0, 1.0, &mut rng);
        let aux = (1..=spec.deep_supervision_heads)
            .map(|d| Conv3d::new(&format!("aux{d}"), c(d), spec.out_classes, 1, 1, 0, 1.0, &mut rng))
            .collect();
        Ok(Network {
            spec: spec.clone(),
            enc,
            down,
            up,
            dec,
            head,
            aux,
            mixed_precision: false,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.spec.in_channels),
                format!("{} channels", x.channels()),
            ));
        }
        self.spec.check_input_dims(x.spatial())
    }

    /// Eval-mode forward: running normalization statistics, no caches.
    pub fn forward(&self, x: &Tensor<T>) -> Result<NetOutput<T>> {
        self.check_input(x)?;
        let l = self.spec.levels;
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(l);
        for lvl in 0..l {
            let h = if lvl == 0 {
                self.enc[0].forward(x)
            } else {
                let d = self.down[lvl - 1].forward(&skips[lvl - 1]);
                self.enc[lvl].forward(&d)
            };
            skips.push(h);
        }
        let mut level_out: Vec<Option<Tensor<T>>> = vec![None; l];
        let mut h = skips[l - 1].clone();
        level_out[l - 1] = Some(h.clone());
        for lvl in (0..l - 1).rev() {
            let u = self.up[lvl].forward(&h);
            let cat = Tensor::concat_channels(&u, &skips[lvl]);
            h = self.dec[lvl].forward(&cat);
            level_out[lvl] = Some(h.clone());
        }
        let main = self.head.forward(level_out[0].as_ref().expect("level 0"));
        let aux = self
            .aux
            .iter()
            .enumerate()
            .map(|(i, a)| a.forward(level_out[i + 1].as_ref().expect("aux level")))
            .collect();
        Ok(NetOutput { main, aux })
    }

    /// Training forward: batch statistics, updates running statistics, returns the tape.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(NetOutput<T>, Tape<T>)> {
        self.check_input(x)?;
        let amp = self.mixed_precision;
        let l = self.spec.levels;
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(l);
        let mut enc_c = Vec::with_capacity(l);
        let mut down_c = Vec::with_capacity(l);
        for lvl in 0..l {
            let input = if lvl == 0 {
                x.clone()
            } else {
                let (d, c) = self.down[lvl - 1].forward_train(&skips[lvl - 1], amp);
                self.down[lvl - 1].update_running(&c);
                down_c.push(c);
                d
            };
            let (h, c) = self.enc[lvl].forward_train(&input, amp);
            self.enc[lvl].update_running(&c);
            enc_c.push(c);
            skips.push(h);
        }
        let mut level_out: Vec<Tensor<T>> = vec![Tensor::zeros([0; 5]); l];
        let mut up_inputs = vec![Tensor::zeros([0; 5]); l.saturating_sub(1)];
        let mut dec_c: Vec<Option<ResCache<T>>> = (0..l.saturating_sub(1)).map(|_| None).collect();
        let mut h = skips[l - 1].clone();
        level_out[l - 1] = h.clone();
        for lvl in (0..l - 1).rev() {
            let u = self.up[lvl].forward(&h);
            up_inputs[lvl] = h;
            let cat = Tensor::concat_channels(&u, &skips[lvl]);
            let (o, c) = self.dec[lvl].forward_train(&cat, amp);
            self.dec[lvl].update_running(&c);
            dec_c[lvl] = Some(c);
            h = o;
            level_out[lvl] = h.clone();
        }
        let main = self.head.forward(&level_out[0]);
        let aux = self
            .aux
            .iter()
            .enumerate()
            .map(|(i, a)| a.forward(&level_out[i + 1]))
            .collect();
        let tape = Tape {
            enc: enc_c,
            down: down_c,
            up_inputs,
            dec: dec_c.into_iter().map(|c| c.expect("decoder cache")).collect(),
            level_out,
        };
        Ok((NetOutput { main, aux }, tape))
    }

    /// Backpropagates logit gradients, accumulating parameter gradients.
    /// Returns the gradient with respect to the network input.
    pub fn backward(&mut self, tape: &Tape<T>, d_main: &Tensor<T>, d_aux: &[Tensor<T>]) -> Tensor<T> {
        let l = self.spec.levels;
        let mut d_level: Vec<Option<Tensor<T>>> = vec![None; l];
        let add = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(s) => s.add_assign(&g),
            None => *slot = Some(g),
        };
        let g = self.head.backward(&tape.level_out[0], d_main, true).expect("head dx");
        add(&mut d_level[0], g);
        for (i, dg) in d_aux.iter().enumerate().take(self.aux.len()) {
            let g = self.aux[i].backward(&tape.level_out[i + 1], dg, true).expect("aux dx");
            add(&mut d_level[i + 1], g);
        }
        let mut d_skip: Vec<Option<Tensor<T>>> = vec![None; l];
        for lvl in 0..l - 1 {
            let g = d_level[lvl].take().unwrap_or_else(|| Tensor::zeros(tape.level_out[lvl].shape()));
            let d_cat = self.dec[lvl].backward(&tape.dec[lvl], g, true).expect("dec dx");
            let (d_u, d_s) = d_cat.split_channels(self.spec.channels_at(lvl));
            add(&mut d_skip[lvl], d_s);
            let d_prev = self.up[lvl].backward(&tape.up_inputs[lvl], &d_u);
            add(&mut d_level[lvl + 1], d_prev);
        }
        // Bottleneck output gradient arrives through d_level[l - 1].
        if let Some(g) = d_level[l - 1].take() {
            add(&mut d_skip[l - 1], g);
        }
        let mut dx = None;
        for lvl in (0..l).rev() {
            let g = d_skip[lvl]
                .take()
                .unwrap_or_else(|| Tensor::zeros(tape.level_out[lvl].shape()));
            let d_in = self.enc[lvl].backward(&tape.enc[lvl], g, true).expect("enc dx");
            if lvl > 0 {
                let d_prev = self.down[lvl - 1]
                    .backward(&tape.down[lvl - 1], d_in, true)
                    .expect("down dx");
                add(&mut d_skip[lvl - 1], d_prev);
            } else {
                dx = Some(d_in);
            }
        }
        dx.expect("input gradient")
    }

    /// All trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for lvl in 0..self.spec.levels {
            if lvl > 0 {
                v.extend(self.down[lvl - 1].params());
            }
            v.extend(self.enc[lvl].params());
        }
        for lvl in 0..self.up.len() {
            v.extend(self.up[lvl].params());
            v.extend(self.dec[lvl].params());
        }
        v.extend(self.head.params());
        for a in &self.aux {
            v.extend(a.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        let mut downs = self.down.iter_mut();
        for (lvl, e) in self.enc.iter_mut().enumerate() {
            if lvl > 0 {
                v.extend(downs.next().expect("down unit").params_mut());
            }
            v.extend(e.params_mut());
        }
        for (u, d) in self.up.iter_mut().zip(self.dec.iter_mut()) {
            v.extend(u.params_mut());
            v.extend(d.params_mut());
        }
        v.extend(self.head.params_mut());
        for a in self.aux.iter_mut() {
            v.extend(a.params_mut());
        }
        v
    }

    pub fn buffers(&self) -> Vec<&Buffer<T>> {
        let mut v = Vec::new();
        for lvl in 0..self.spec.levels {
            if lvl > 0 {
                v.extend(self.down[lvl - 1].buffers());
            }
            v.extend(self.enc[lvl].buffers());
        }
        for d in &self.dec {
            v.extend(d.buffers());
        }
        v
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Buffer<T>> {
        let mut v = Vec::new();
        let mut downs = self.down.iter_mut();
        for (lvl, e) in self.enc.iter_mut().enumerate() {
            if lvl > 0 {
                v.extend(downs.next().expect("down unit").buffers_mut());
            }
            v.extend(e.buffers_mut());
        }
        for d in self.dec.iter_mut() {
            v.extend(d.buffers_mut());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Converts every parameter and buffer to another scalar type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut out = Network::<U>::build(&self.spec).expect("spec already validated");
        out.mixed_precision = self.mixed_precision;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.iter().map(|v| U::lit(v.f64())).collect();
        }
        for (dst, src) in out.buffers_mut().into_iter().zip(self.buffers()) {
            dst.value = src.value.iter().map(|v| U::lit(v.f64())).collect();
        }
        out
    }
}

fn conv_params(k: usize, cin: usize, cout: usize) -> usize {
    k * k * k * cin * cout + cout
}

/// Exact trainable-parameter count of `build_network(spec)` without building it.
pub fn count_parameters(spec: &ArchSpec) -> usize {
    let k = spec.kernel;
    let norm = |c: usize| if spec.batch_norm { 2 * c } else { 0 };
    let block = |cin: usize, cout: usize| {
        let mut n = 0;
        for i in 0..spec.convs_per_block {
            let ci = if i == 0 { cin } else { cout };
            n += conv_params(k, ci, cout) + norm(cout);
        }
        if spec.residual && cin != cout {
            n += conv_params(1, cin, cout);
        }
        n
    };
    let c = |l| spec.channels_at(l);
    let mut total = 0;
    for lvl in 0..spec.levels {
        if lvl > 0 {
            total += conv_params(k, c(lvl - 1), c(lvl)) + norm(c(lvl));
        }
        let cin = if lvl == 0 { spec.in_channels } else { c(lvl) };
        total += block(cin, c(lvl));
    }
    for lvl in 0..spec.levels.saturating_sub(1) {
        total += conv_params(2, c(lvl + 1), c(lvl));
        total += block(2 * c(lvl), c(lvl));
    }
    total += conv_params(1, c(0), spec.out_classes);
    for d in 1..=spec.deep_supervision_heads {
        total += conv_params(1, c(d), spec.out_classes);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(levels: usize, heads: usize) -> ArchSpec {
        ArchSpec {
            levels,
            width: 4,
            in_channels: 1,
            out_classes: 3,
            deep_supervision_heads: heads,
            seed: 3,
            ..ArchSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(small(3, 3).validate().is_err());
        assert!(ArchSpec { levels: 0, ..small(3, 0) }.validate().is_err());
        assert!(ArchSpec { width: 0, ..small(3, 0) }.validate().is_err());
        assert!(small(3, 2).validate().is_ok());
    }

    #[test]
    fn output_shapes_with_deep_supervision() {
        let net = Network::<f32>::build(&small(3, 2)).unwrap();
        let x = Tensor::filled([2, 1, 8, 8, 4], 0.5);
        let out = net.forward(&x).unwrap();
        assert_eq!(out.main.shape(), [2, 3, 8, 8, 4]);
        assert_eq!(out.aux.len(), 2);
        assert_eq!(out.aux[0].shape(), [2, 3, 4, 4, 2]);
        assert_eq!(out.aux[1].shape(), [2, 3, 2, 2, 1]);
    }

    #[test]
    fn rejects_bad_input() {
        let net = Network::<f32>::build(&small(3, 0)).unwrap();
        let err = net.forward(&Tensor::zeros([1, 1, 8, 6, 4])).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
        assert!(net.forward(&Tensor::zeros([1, 2, 8, 8, 4])).is_err());
    }

    #[test]
    fn pocket_widths_are_constant() {
        let net = Network::<f32>::build(&small(4, 0)).unwrap();
        for p in net.params() {
            if p.kind == super::super::layers::ParamKind::Kernel && !p.name.starts_with("head") {
                assert_eq!(p.shape[if p.name.starts_with("up") { 1 } else { 0 }], 4, "{}", p.name);
            }
        }
    }

    #[test]
    fn doubling_widths_double() {
        let spec = ArchSpec {
            widening: Widening::Doubling,
            ..small(3, 0)
        };
        let net = Network::<f32>::build(&spec).unwrap();
        let find = |n: &str| net.params().into_iter().find(|p| p.name == n).unwrap().shape.clone();
        assert_eq!(find("enc0.conv1.weight")[0], 4);
        assert_eq!(find("enc1.conv1.weight")[0], 8);
        assert_eq!(find("enc2.conv1.weight")[0], 16);
        assert_eq!(find("dec1.conv1.weight")[..2], [8, 16]);
    }

    #[test]
    fn count_matches_built_network() {
        for levels in 1..=4 {
            for heads in 0..levels {
                for widening in [Widening::Pocket, Widening::Doubling] {
                    for (residual, bn) in [(true, true), (false, true), (true, false)] {
                        let spec = ArchSpec {
                            widening,
                            residual,
                            batch_norm: bn,
                            ..small(levels, heads)
                        };
                        let net = Network::<f32>::build(&spec).unwrap();
                        assert_eq!(net.num_parameters(), count_parameters(&spec), "{spec:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_finite() {
        let net = Network::<f32>::build(&small(3, 1)).unwrap();
        let x = Tensor::from_vec([1, 1, 8, 8, 8], (0..512).map(|i| ((i * 37) % 17) as f32 / 17.0).collect());
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.main.all_finite());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut net = Network::<f64>::build(&small(3, 1)).unwrap();
        for p in net.params_mut() {
            let v = match p.kind {
                super::super::layers::ParamKind::Bias => 0.25,
                _ => 0.0,
            };
            p.value.iter_mut().for_each(|x| *x = v);
        }
        let x = Tensor::filled([1, 1, 4, 4, 4], 3.0);
        let out = net.forward(&x).unwrap();
        assert!(out.main.data().iter().all(|&v| v == 0.25));
        assert!(out.aux[0].data().iter().all(|&v| v == 0.25));
    }

    fn weighted_sum(out: &NetOutput<f64>, w: &[f64]) -> f64 {
        let mut it = w.iter().cycle();
        let mut acc = 0.0;
        for t in std::iter::once(&out.main).chain(out.aux.iter()) {
            acc += t.data().iter().map(|v| v * it.next().unwrap()).sum::<f64>();
        }
        acc
    }

    #[test]
    fn whole_network_gradients_match_finite_differences() {
        for widening in [Widening::Pocket, Widening::Doubling] {
            let spec = ArchSpec {
                levels: 3,
                width: 2,
                in_channels: 2,
                out_classes: 2,
                deep_supervision_heads: 1,
                widening,
                seed: 11,
                ..ArchSpec::default()
            };
            let mut net = Network::<f64>::build(&spec).unwrap();
            let x = Tensor::from_vec(
                [2, 2, 4, 4, 4],
                (0..256).map(|i| ((i * 7919) % 97) as f64 / 48.0 - 1.0).collect(),
            );
            let w: Vec<f64> = (0..61).map(|i| ((i * 31) % 13) as f64 / 6.0 - 1.0).collect();
            let (out, tape) = net.forward_train(&x).unwrap();
            let mut d_main = out.main.clone();
            let mut it = w.iter().cycle();
            d_main.data_mut().iter_mut().for_each(|v| *v = *it.next().unwrap());
            let mut d_aux = out.aux[0].clone();
            d_aux.data_mut().iter_mut().for_each(|v| *v = *it.next().unwrap());
            net.zero_grad();
            let dx = net.backward(&tape, &d_main, &[d_aux]);

            let loss = |n: &mut Network<f64>, x: &Tensor<f64>| {
                let (o, _) = n.forward_train(x).unwrap();
                weighted_sum(&o, &w)
            };
            let h = 1e-6;
            let analytic: Vec<(String, usize, f64)> = net
                .params()
                .iter()
                .flat_map(|p| {
                    let step = (p.numel() / 3).max(1);
                    (0..p.numel()).step_by(step).map(move |i| (p.name.clone(), i, p.grad[i]))
                })
                .collect();
            for (name, i, g) in analytic {
                let probe = |delta: f64| {
                    let mut n = net.clone();
                    n.params_mut().into_iter().find(|p| p.name == name).unwrap().value[i] += delta;
                    loss(&mut n, &x)
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                assert!((fd - g).abs() <= 1e-5 * (1.0 + fd.abs()), "{widening:?} {name}[{i}]: {g} vs {fd}");
            }
            for i in (0..x.len()).step_by(17) {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (loss(&mut net.clone(), &xp) - loss(&mut net.clone(), &xm)) / (2.0 * h);
                assert!((fd - dx.data()[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "dx[{i}]");
            }
        }
    }
}
