//! Parameterised layers built on [`Graph`] operations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{ConvGeom, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Forward-pass context for one network.
///
/// Buffer updates (running statistics, power-iteration vectors) are
/// collected here so the forward pass can borrow the store immutably.
pub struct Ctx<'a, T> {
    pub store: &'a ParamStore<T>,
    pub train: bool,
    updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            store,
            train,
            updates: Vec::new(),
        }
    }

    pub fn param(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.store, id)
    }

    fn update(&mut self, id: ParamId, t: Tensor<T>) {
        self.updates.push((id, t));
    }

    pub fn finish(self) -> BufferUpdates<T> {
        BufferUpdates(self.updates)
    }
}

/// Deferred buffer writes produced by a training-mode forward pass.
#[must_use]
pub struct BufferUpdates<T>(Vec<(ParamId, Tensor<T>)>);

impl<T: Scalar> BufferUpdates<T> {
    pub fn apply(self, store: &mut ParamStore<T>) {
        for (id, t) in self.0 {
            *store.value_mut(id) = t;
        }
    }
}

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `N(0, std²)`, the DCGAN convention.
    Normal(f64),
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn,
}

pub(crate) fn init_tensor<T: Scalar, R: Rng + ?Sized>(
    dims: &[usize],
    fan_in: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<T> {
    let n: usize = dims.iter().product();
    let data = match init {
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| T::lit(d.sample(rng))).collect()
        }
        Init::FanIn => {
            let b = 1.0 / (fan_in.max(1) as f64).sqrt();
            let d = Uniform::new_inclusive(-b, b).unwrap();
            (0..n).map(|_| T::lit(d.sample(rng))).collect()
        }
    };
    Tensor::from_vec(dims, data)
}

fn unit_random<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    let d = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..n).map(|_| d.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v.into_iter().map(T::lit).collect()
}

fn normalize<T: Scalar>(v: &mut [T]) {
    let n = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
    let n = n.max(T::lit(1e-12));
    v.iter_mut().for_each(|x| *x = *x / n);
}

#[derive(Clone, Debug)]
struct SpectralState {
    u: ParamId,
    v: ParamId,
}

/// 2-D convolution, optionally spectrally normalised.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    weight: ParamId,
    bias: Option<ParamId>,
    sn: Option<SpectralState>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        let fan_in = in_channels * k * k;
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[out_channels, in_channels, k, k], fan_in, init, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            in_channels,
            out_channels,
            geom,
            weight,
            bias,
            sn: None,
        }
    }

    /// Adds spectral normalisation with power-iteration buffers.
    pub fn spectral<T: Scalar, R: Rng + ?Sized>(
        mut self,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut R,
    ) -> Self {
        let rows = self.out_channels;
        let cols = self.in_channels * self.geom.kernel * self.geom.kernel;
        let mut u = unit_random(rows, rng);
        let mut v = unit_random(cols, rng);
        for _ in 0..SN_INIT_ITERS {
            power_iteration(store.value(self.weight).data(), rows, cols, &mut u, &mut v);
        }
        let u = store.add_buffer(format!("{name}.sn_u"), Tensor::from_vec(&[rows], u));
        let v = store.add_buffer(format!("{name}.sn_v"), Tensor::from_vec(&[cols], v));
        self.sn = Some(SpectralState { u, v });
        self
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn is_spectral(&self) -> bool {
        self.sn.is_some()
    }

    /// Weight as used in the forward pass (normalised when spectral).
    pub fn effective_weight<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>) -> Var {
        let w = ctx.param(g, self.weight);
        let Some(sn) = &self.sn else { return w };
        let mut u = ctx.store.value(sn.u).data().to_vec();
        let mut v = ctx.store.value(sn.v).data().to_vec();
        if ctx.train {
            let wt = ctx.store.value(self.weight);
            let rows = self.out_channels;
            let cols = wt.numel() / rows;
            power_iteration(wt.data(), rows, cols, &mut u, &mut v);
            ctx.update(sn.u, Tensor::from_vec(&[rows], u.clone()));
            ctx.update(sn.v, Tensor::from_vec(&[cols], v.clone()));
        }
        g.spectral_normalize(w, u, v).0
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = self.effective_weight(g, ctx);
        let b = self.bias.map(|b| ctx.param(g, b));
        g.conv2d(x, w, b, self.geom)
    }
}

/// Power iterations run when spectral normalisation is attached, so the
/// estimate is usable before the first training step.
const SN_INIT_ITERS: usize = 15;

/// One power-iteration step on the `rows×cols` matrix `w`.
fn power_iteration<T: Scalar>(w: &[T], rows: usize, cols: usize, u: &mut [T], v: &mut [T]) {
    T::gemm(true, false, cols, 1, rows, T::one(), w, u, T::zero(), v);
    normalize(v);
    T::gemm(false, false, rows, 1, cols, T::one(), w, v, T::zero(), u);
    normalize(u);
}

/// Transposed convolution with weight `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(
                &[in_channels, out_channels, k, k],
                out_channels * k * k,
                init,
                rng,
            ),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Self {
            in_channels,
            out_channels,
            geom,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.param(g, self.weight);
        let b = self.bias.map(|b| ctx.param(g, b));
        g.conv_transpose2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(&[out_features, in_features], in_features, init, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])));
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = ctx.param(g, self.weight);
        let b = self.bias.map(|b| ctx.param(g, b));
        g.linear(x, w, b)
    }
}

/// Batch normalisation with running statistics (momentum 0.1).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
        }
    }

    /// Accepts `[N, C, H, W]` or `[N, C]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let gamma = ctx.param(g, self.gamma);
        let beta = ctx.param(g, self.beta);
        let eps = T::lit(BN_EPS);
        if ctx.train {
            let (y, mean, var) = g.batch_norm(x, gamma, beta, None, eps);
            let d = g.dims(x);
            let m = d[0] * d[2..].iter().product::<usize>();
            let unbias = if m > 1 {
                T::lit(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            let mom = T::lit(BN_MOMENTUM);
            let keep = T::one() - mom;
            let rm = ctx.store.value(self.running_mean).data();
            let rv = ctx.store.value(self.running_var).data();
            let nm: Vec<T> = rm
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| keep * r + mom * b)
                .collect();
            let nv: Vec<T> = rv
                .iter()
                .zip(&var)
                .map(|(&r, &b)| keep * r + mom * b * unbias)
                .collect();
            ctx.update(self.running_mean, Tensor::from_vec(&[self.channels], nm));
            ctx.update(self.running_var, Tensor::from_vec(&[self.channels], nv));
            y
        } else {
            let rm = ctx.store.value(self.running_mean).data().to_vec();
            let rv = ctx.store.value(self.running_var).data().to_vec();
            g.batch_norm(x, gamma, beta, Some((&rm, &rv)), eps).0
        }
    }
}

/// Activation applied after gating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

/// Instance-norm epsilon used inside gated layers.
pub const IN_EPS: f64 = 1e-5;

/// Gated convolution: `IN(φ(conv_f(x) ⊙ σ(conv_g(x))))`.
///
/// Feature and gate kernels are stored separately and evaluated as one
/// fused convolution.
#[derive(Clone, Debug)]
pub struct GatedConv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geom: ConvGeom,
    pub activation: Activation,
    pub instance_norm: bool,
    feature_w: ParamId,
    feature_b: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    name: String,
}

/// Intermediate values of a gated layer.
pub struct GatedOut {
    pub output: Var,
    pub gate: Var,
}

impl GatedConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        activation: Activation,
        instance_norm: bool,
        rng: &mut R,
    ) -> Self {
        let k = geom.kernel;
        let fan_in = in_channels * k * k;
        let dims = [out_channels, in_channels, k, k];
        let feature_w = store.add(
            format!("{name}.feature.weight"),
            init_tensor(&dims, fan_in, Init::FanIn, rng),
        );
        let feature_b = store.add(
            format!("{name}.feature.bias"),
            Tensor::zeros(&[out_channels]),
        );
        let gate_w = store.add(
            format!("{name}.gate.weight"),
            init_tensor(&dims, fan_in, Init::FanIn, rng),
        );
        let gate_b = store.add(format!("{name}.gate.bias"), Tensor::zeros(&[out_channels]));
        Self {
            in_channels,
            out_channels,
            geom,
            activation,
            instance_norm,
            feature_w,
            feature_b,
            gate_w,
            gate_b,
            name: name.into(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn feature_ids(&self) -> (ParamId, ParamId) {
        (self.feature_w, self.feature_b)
    }

    pub fn gate_ids(&self) -> (ParamId, ParamId) {
        (self.gate_w, self.gate_b)
    }

    pub fn forward_full<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<'_, T>,
        x: Var,
    ) -> GatedOut {
        let wf = ctx.param(g, self.feature_w);
        let wg = ctx.param(g, self.gate_w);
        let bf = ctx.param(g, self.feature_b);
        let bg = ctx.param(g, self.gate_b);
        let w = g.concat(&[wf, wg], 0);
        let b = g.concat(&[bf, bg], 0);
        let y = g.conv2d(x, w, Some(b), self.geom);
        let o = self.out_channels;
        let feat = g.narrow(y, 1, 0, o);
        let gate_logits = g.narrow(y, 1, o, o);
        let gate = g.sigmoid(gate_logits);
        let mut out = g.mul(feat, gate);
        if let Activation::LeakyRelu(s) = self.activation {
            out = g.leaky_relu(out, T::lit(s));
        }
        if self.instance_norm {
            out = g.instance_norm(out, T::lit(IN_EPS));
        }
        GatedOut { output: out, gate }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        self.forward_full(g, ctx, x).output
    }
}

/// Largest singular value of `w` viewed as `[dims[0], rest]`, by power iteration.
pub fn top_singular_value<T: Scalar>(w: &Tensor<T>, iters: usize) -> f64 {
    let rows = w.dims()[0];
    let cols = w.numel() / rows;
    let a: Vec<f64> = w.data().iter().map(|v| v.to_f64().unwrap()).collect();
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0f64;
    for _ in 0..iters {
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = (0..cols).map(|c| a[r * cols + c] * v[c]).sum();
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        u.iter_mut().for_each(|x| *x /= nu);
        for (c, vc) in v.iter_mut().enumerate() {
            *vc = (0..rows).map(|r| a[r * cols + c] * u[r]).sum();
        }
        sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= sigma.max(1e-300));
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gated_conv_preserves_size_and_gate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let layer = GatedConv2d::new(
            &mut store,
            "g",
            1,
            3,
            ConvGeom::same(3, 1),
            Activation::LeakyRelu(0.2),
            true,
            &mut rng,
        );
        let mut g = Graph::new();
        let x = g.input(init_tensor(&[1, 1, 8, 8], 1, Init::Normal(1.0), &mut rng));
        let mut ctx = Ctx::new(&store, true);
        let out = layer.forward_full(&mut g, &mut ctx, x);
        assert_eq!(g.dims(out.output), &[1, 3, 8, 8]);
        assert!(g.value(out.gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn spectral_norm_bounds_top_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(
            &mut store,
            "c",
            3,
            4,
            ConvGeom::new(3, 1, 1, 1),
            true,
            Init::Normal(1.0),
            &mut rng,
        )
        .spectral(&mut store, "c", &mut rng);
        for _ in 0..30 {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&store, true);
            let w = conv.effective_weight(&mut g, &mut ctx);
            let _ = g.value(w);
            ctx.finish().apply(&mut store);
        }
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&store, false);
        let w = conv.effective_weight(&mut g, &mut ctx);
        let s = top_singular_value(g.value(w), 200);
        assert!((s - 1.0).abs() < 1e-2, "sigma {s}");
    }

    #[test]
    fn batchnorm_running_stats_move_toward_batch() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]));
        let mut ctx = Ctx::new(&store, true);
        let y = bn.forward(&mut g, &mut ctx, x);
        let mean = g.value(y).sum() / 4.0;
        assert!(mean.abs() < 1e-12);
        ctx.finish().apply(&mut store);
        let rm = store.value(store.find("bn.running_mean").unwrap()).data()[0];
        assert!((rm - 0.4).abs() < 1e-12);
    }
}
