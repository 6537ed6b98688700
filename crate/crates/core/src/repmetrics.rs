//! Label-free representation diagnostics and generation metrics: alignment
//! and uniformity on the unit hypersphere, Fréchet distance over pluggable
//! embedders, and the noise-conditional classifier used for guided sampling.

use ndarray::{Array1, Array2, Array4, Axis};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{DDAENetwork, Encoder, TapId};
use crate::corruption::{noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::nn::{
    cross_entropy, global_avg_pool, log_softmax, silu, silu_backward, substream, Adam, AdamOpts,
    Gradients, Init, Linear, LrSchedule, ParamId, ParamStore,
};
use crate::probe::ProbeOpts;
use crate::trainer::sample_levels;

/// Anything that maps a noised batch at level `t` to pooled features.
pub trait FeatureFn {
    fn features(&self, x: &Array4<f32>, t: usize) -> Result<Array2<f32>>;
}

impl<F> FeatureFn for F
where
    F: Fn(&Array4<f32>, usize) -> Result<Array2<f32>>,
{
    fn features(&self, x: &Array4<f32>, t: usize) -> Result<Array2<f32>> {
        self(x, t)
    }
}

/// Pooled activations of one tap, conditioned on the corruption level.
pub struct TapFeatures<'a> {
    pub net: &'a DDAENetwork,
    pub tap: TapId,
}

impl FeatureFn for TapFeatures<'_> {
    fn features(&self, x: &Array4<f32>, t: usize) -> Result<Array2<f32>> {
        let t_vec = vec![t; x.dim().0];
        let (_, acts) = self
            .net
            .forward_taps(x, &t_vec, std::slice::from_ref(&self.tap), true)?;
        Ok(global_avg_pool(&acts[0]))
    }
}

/// Row-normalizes onto the unit hypersphere.
fn unit_rows(f: &Array2<f32>) -> Result<Array2<f32>> {
    let mut out = f.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::numerical(
                "zero-norm feature cannot be projected to the unit hypersphere",
            ));
        }
        let inv = (1.0 / norm) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Mean squared distance between unit-normalized feature rows; the metric
/// core shared by the sampled and exhaustive alignment paths. Value in [0,4].
pub fn alignment_paired(f1: &Array2<f32>, f2: &Array2<f32>) -> Result<f64> {
    if f1.dim() != f2.dim() {
        return Err(Error::contract("alignment: feature tables differ in shape"));
    }
    let (a, b) = (unit_rows(f1)?, unit_rows(f2)?);
    let n = a.dim().0;
    let mut acc = 0.0f64;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let mut d = 0.0f64;
        for (x, y) in ra.iter().zip(rb.iter()) {
            let diff = (x - y) as f64;
            d += diff * diff;
        }
        acc += d;
    }
    Ok(acc / n as f64)
}

/// Log-mean Gaussian-kernel similarity between unit-normalized rows of two
/// tables of equal size. Value in [-8, 0].
pub fn uniformity_paired(f1: &Array2<f32>, f2: &Array2<f32>) -> Result<f64> {
    if f1.dim() != f2.dim() {
        return Err(Error::contract("uniformity: feature tables differ in shape"));
    }
    let (a, b) = (unit_rows(f1)?, unit_rows(f2)?);
    let n = a.dim().0;
    let mut acc = 0.0f64;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let mut d = 0.0f64;
        for (x, y) in ra.iter().zip(rb.iter()) {
            let diff = (x - y) as f64;
            d += diff * diff;
        }
        acc += (-2.0 * d).exp();
    }
    Ok((acc / n as f64).ln())
}

const PAIR_BATCH: usize = 64;

/// Noise-draw sensitivity of features: expected squared hypersphere distance
/// between two independent noisings of the same image at level `t`.
pub fn alignment(
    f: &impl FeatureFn,
    dataset: &Dataset,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    n_pairs: usize,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::contract("alignment needs n_pairs >= 1"));
    }
    sched.check_level(t)?;
    let (_, c, h, w) = dataset.images.dim();
    let mut total = 0.0f64;
    let mut done = 0usize;
    while done < n_pairs {
        let take = PAIR_BATCH.min(n_pairs - done);
        let mut x = Array4::zeros((take, c, h, w));
        for row in 0..take {
            let i = rng.random_range(0..dataset.len());
            x.index_axis_mut(Axis(0), row)
                .assign(&dataset.images.index_axis(Axis(0), i));
        }
        let t_vec = vec![t; take];
        let e1 = Array4::from_shape_simple_fn(x.dim(), || {
            let v: f32 = StandardNormal.sample(rng);
            v
        });
        let e2 = Array4::from_shape_simple_fn(x.dim(), || {
            let v: f32 = StandardNormal.sample(rng);
            v
        });
        let f1 = f.features(&noise(&x, &t_vec, &e1, sched)?, t)?;
        let f2 = f.features(&noise(&x, &t_vec, &e2, sched)?, t)?;
        total += alignment_paired(&f1, &f2)? * take as f64;
        done += take;
    }
    Ok(total / n_pairs as f64)
}

/// Whether a uniformity pair shares one noise draw (the default) or draws
/// independently per element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairEps {
    Shared,
    Independent,
}

/// Feature spread: log-mean Gaussian-kernel similarity between noised
/// features of i.i.d. image pairs (ordered, drawn with replacement).
pub fn uniformity(
    f: &impl FeatureFn,
    dataset: &Dataset,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    n_pairs: usize,
    eps_mode: PairEps,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::contract("uniformity needs n_pairs >= 1"));
    }
    sched.check_level(t)?;
    let (_, c, h, w) = dataset.images.dim();
    let mut kernel_sum = 0.0f64;
    let mut done = 0usize;
    while done < n_pairs {
        let take = PAIR_BATCH.min(n_pairs - done);
        let mut xa = Array4::zeros((take, c, h, w));
        let mut xb = Array4::zeros((take, c, h, w));
        for row in 0..take {
            let i = rng.random_range(0..dataset.len());
            let j = rng.random_range(0..dataset.len());
            xa.index_axis_mut(Axis(0), row)
                .assign(&dataset.images.index_axis(Axis(0), i));
            xb.index_axis_mut(Axis(0), row)
                .assign(&dataset.images.index_axis(Axis(0), j));
        }
        let t_vec = vec![t; take];
        let ea = Array4::from_shape_simple_fn(xa.dim(), || {
            let v: f32 = StandardNormal.sample(rng);
            v
        });
        let eb = match eps_mode {
            PairEps::Shared => ea.clone(),
            PairEps::Independent => Array4::from_shape_simple_fn(xa.dim(), || {
                let v: f32 = StandardNormal.sample(rng);
                v
            }),
        };
        let fa = f.features(&noise(&xa, &t_vec, &ea, sched)?, t)?;
        let fb = f.features(&noise(&xb, &t_vec, &eb, sched)?, t)?;
        // accumulate the raw kernel mean so chunking does not bias the log
        let (ua, ub) = (unit_rows(&fa)?, unit_rows(&fb)?);
        for (ra, rb) in ua.rows().into_iter().zip(ub.rows()) {
            let mut d = 0.0f64;
            for (x, y) in ra.iter().zip(rb.iter()) {
                let diff = (x - y) as f64;
                d += diff * diff;
            }
            kernel_sum += (-2.0 * d).exp();
        }
        done += take;
    }
    Ok((kernel_sum / n_pairs as f64).ln())
}

/// First two moments of an embedded sample set.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

/// Sample mean and unbiased covariance of feature rows.
pub fn gaussian_summary(features: &Array2<f32>) -> Result<GaussianSummary> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(Error::contract(format!(
            "gaussian summary needs at least 2 rows, got {n}"
        )));
    }
    let mut mean = Array1::<f64>::zeros(d);
    for row in features.rows() {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v as f64;
        }
    }
    mean /= n as f64;
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in features.rows() {
        let centered: Vec<f64> = row
            .iter()
            .zip(mean.iter())
            .map(|(&v, &m)| v as f64 - m)
            .collect();
        for i in 0..d {
            for j in i..d {
                cov[[i, j]] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[[i, j]] / denom;
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(GaussianSummary { mean, cov })
}

const EIG_CLIP: f64 = -1e-6;

/// Symmetric eigendecomposition with clipping of slightly negative
/// eigenvalues; fails when an eigenvalue is materially negative.
fn sym_eig_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < EIG_CLIP {
            return Err(Error::numerical(format!(
                "{what}: covariance is not PSD (min eigenvalue {v:.3e})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

/// Fréchet distance between Gaussian summaries:
/// `|mu1-mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2))`, with the cross term
/// computed through the stabilized `C1^(1/2) C2 C1^(1/2)` form.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::contract("frechet_distance: dimension mismatch"));
    }
    let s1 = sym_eig_sqrt(&to_dmatrix(&a.cov), "first summary")?;
    // PSD check on the second covariance comes through the product term
    let c2 = to_dmatrix(&b.cov);
    let inner = &s1 * &c2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sym_eig_sqrt(&inner, "cross term")?;
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..a.cov.dim().0).map(|i| a.cov[[i, i]]).sum();
    let tr_b: f64 = (0..b.cov.dim().0).map(|i| b.cov[[i, i]]).sum();
    let tr_cross = cross.trace();
    Ok(mean_term + tr_a + tr_b - 2.0 * tr_cross)
}

/// Maps image batches to embedding rows for Fréchet comparisons.
pub trait Embedder {
    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>>;
}

/// Flattened raw pixels.
pub struct IdentityEmbedder;

impl Embedder for IdentityEmbedder {
    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        let (n, c, h, w) = images.dim();
        Ok(images.to_shape((n, c * h * w)).unwrap().to_owned())
    }
}

/// Linear PCA of (optionally spatially subsampled) pixels, fitted on a
/// reference set.
pub struct PcaEmbedder {
    mean: Array1<f64>,
    /// `[out_dim, in_dim]` projection.
    components: Array2<f64>,
    stride: usize,
}

impl PcaEmbedder {
    fn flatten(images: &Array4<f32>, stride: usize) -> Array2<f64> {
        let (n, c, h, w) = images.dim();
        let (hs, ws) = (h.div_ceil(stride), w.div_ceil(stride));
        let mut out = Array2::zeros((n, c * hs * ws));
        for i in 0..n {
            let mut k = 0usize;
            for ch in 0..c {
                for y in (0..h).step_by(stride) {
                    for x in (0..w).step_by(stride) {
                        out[[i, k]] = images[[i, ch, y, x]] as f64;
                        k += 1;
                    }
                }
            }
        }
        out
    }

    /// Fits the top `out_dim` principal directions of `reference`.
    pub fn fit(reference: &Array4<f32>, out_dim: usize, stride: usize) -> Result<Self> {
        let flat = Self::flatten(reference, stride);
        let (n, d) = flat.dim();
        if n < 2 {
            return Err(Error::contract("PCA needs at least 2 reference images"));
        }
        if out_dim == 0 || out_dim > d {
            return Err(Error::parameter(format!(
                "PCA output dim {out_dim} outside [1, {d}]"
            )));
        }
        let mean = flat.mean_axis(Axis(0)).unwrap();
        let mut cov = DMatrix::zeros(d, d);
        for row in flat.rows() {
            let c: Vec<f64> = row.iter().zip(mean.iter()).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        cov /= (n - 1) as f64;
        let eig = cov.symmetric_eigen();
        // eigenvalues ascendingly unordered in nalgebra; sort descending
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
        let mut components = Array2::zeros((out_dim, d));
        for (k, &col) in order.iter().take(out_dim).enumerate() {
            for i in 0..d {
                components[[k, i]] = eig.eigenvectors[(i, col)];
            }
        }
        Ok(PcaEmbedder { mean, components, stride })
    }
}

impl Embedder for PcaEmbedder {
    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        let flat = Self::flatten(images, self.stride);
        let (n, d) = flat.dim();
        if d != self.mean.len() {
            return Err(Error::contract(format!(
                "PCA embedder fitted for {} dims, got {d}",
                self.mean.len()
            )));
        }
        let k = self.components.dim().0;
        let mut out = Array2::zeros((n, k));
        for i in 0..n {
            for kk in 0..k {
                let mut acc = 0.0f64;
                for j in 0..d {
                    acc += (flat[[i, j]] - self.mean[j]) * self.components[[kk, j]];
                }
                out[[i, kk]] = acc as f32;
            }
        }
        Ok(out)
    }
}

/// Pooled features of a truncated encoder.
pub struct EncoderEmbedder(pub Encoder);

impl Embedder for EncoderEmbedder {
    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        self.0.encode(images)
    }
}

/// Fréchet distance between embedded real and generated image sets.
pub fn fid(
    embedder: &dyn Embedder,
    real: &Array4<f32>,
    generated: &Array4<f32>,
) -> Result<f64> {
    if real.dim().0 == 0 || generated.dim().0 == 0 {
        return Err(Error::contract("fid: image sets must be non-empty"));
    }
    let a = gaussian_summary(&embedder.embed(real)?)?;
    let b = gaussian_summary(&embedder.embed(generated)?)?;
    frechet_distance(&a, &b)
}

/// Two-layer MLP over pooled tap features with a learned per-level embedding
/// table added to the input: a classifier of noised images conditioned on the
/// noise level.
pub struct ClassifierHead {
    pub store: ParamStore,
    l1: Linear,
    l2: Linear,
    tau: ParamId,
    pub feature_dim: usize,
    pub classes: usize,
    pub t_max: usize,
}

struct HeadCache {
    z: Array2<f32>,
    a: Array2<f32>,
}

impl ClassifierHead {
    pub fn new(feature_dim: usize, classes: usize, t_max: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "classifier-init");
        let hidden = feature_dim;
        let l1 = Linear::new(&mut store, "cls.l1", feature_dim, hidden, Init::He, &mut rng);
        let l2 = Linear::new(&mut store, "cls.l2", hidden, classes, Init::He, &mut rng);
        let tau = store.add("cls.tau", ndarray::ArrayD::zeros(vec![t_max, feature_dim]));
        ClassifierHead { store, l1, l2, tau, feature_dim, classes, t_max }
    }

    fn forward_cached(&self, features: &Array2<f32>, t: &[usize]) -> (Array2<f32>, HeadCache) {
        let tau = self.store.get(self.tau);
        let mut z = features.clone();
        for (mut row, &ti) in z.rows_mut().into_iter().zip(t) {
            for (v, tv) in row.iter_mut().zip(tau.index_axis(Axis(0), ti - 1).iter()) {
                *v += *tv as f32;
            }
        }
        let a = self.l1.forward(&self.store, &z);
        let h = silu(&a);
        let logits = self.l2.forward(&self.store, &h);
        (logits, HeadCache { z, a })
    }

    /// Class logits for pooled features extracted at per-item levels `t`.
    pub fn logits(&self, features: &Array2<f32>, t: &[usize]) -> Result<Array2<f32>> {
        self.check_t(t)?;
        Ok(self.forward_cached(features, t).0)
    }

    fn check_t(&self, t: &[usize]) -> Result<()> {
        for &ti in t {
            if ti < 1 || ti > self.t_max {
                return Err(Error::contract(format!(
                    "classifier level t={ti} outside [1, {}]",
                    self.t_max
                )));
            }
        }
        Ok(())
    }

    /// Backward through the head; accumulates parameter gradients and
    /// returns the gradient on the input features.
    fn backward(
        &self,
        cache: &HeadCache,
        t: &[usize],
        dlogits: &Array2<f32>,
        grads: &mut Gradients,
    ) -> Array2<f32> {
        let dh = self
            .l2
            .backward(&self.store, &silu(&cache.a), dlogits, grads, true)
            .unwrap();
        let da = silu_backward(&cache.a, &dh);
        let dz = self
            .l1
            .backward(&self.store, &cache.z, &da, grads, true)
            .unwrap();
        {
            let dtau = grads.slot_mut(self.tau, &self.store);
            for (row, &ti) in dz.rows().into_iter().zip(t) {
                for (g, &v) in dtau
                    .index_axis_mut(Axis(0), ti - 1)
                    .iter_mut()
                    .zip(row.iter())
                {
                    *g += v;
                }
            }
        }
        dz
    }
}

impl ClassifierHead {
    /// Saves the head weights plus a JSON sidecar recording its dimensions
    /// and the tap it was trained against.
    pub fn save(&self, path: &std::path::Path, tap: &TapId) -> Result<()> {
        self.store.to_tensor_map().save(path)?;
        let sidecar = serde_json::json!({
            "feature_dim": self.feature_dim,
            "classes": self.classes,
            "t_max": self.t_max,
            "tap": tap,
        });
        let meta = path.with_extension("json");
        std::fs::write(&meta, serde_json::to_string_pretty(&sidecar)?)
            .map_err(|e| Error::io(e, meta))
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, TapId)> {
        let meta_path = path.with_extension("json");
        let raw = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(e, meta_path))?;
        let meta: serde_json::Value = serde_json::from_str(&raw)?;
        let feature_dim = meta["feature_dim"].as_u64().unwrap_or(0) as usize;
        let classes = meta["classes"].as_u64().unwrap_or(0) as usize;
        let t_max = meta["t_max"].as_u64().unwrap_or(0) as usize;
        let tap: TapId = serde_json::from_value(meta["tap"].clone())?;
        if feature_dim == 0 || classes == 0 || t_max == 0 {
            return Err(Error::data("classifier sidecar is missing dimensions"));
        }
        let mut head = ClassifierHead::new(feature_dim, classes, t_max, 0);
        let map = crate::container::TensorMap::load(path)?;
        head.store.load_tensor_map(&map)?;
        Ok((head, tap))
    }
}

/// Trains the classifier head on frozen backbone features over uniformly
/// sampled levels. The backbone is never written to.
pub fn train_noise_cond_classifier(
    net: &DDAENetwork,
    tap: &TapId,
    dataset: &Dataset,
    sched: &NoiseSchedule,
    opts: &ProbeOpts,
) -> Result<ClassifierHead> {
    let dim = net.tap_channels(tap)?;
    let mut head = ClassifierHead::new(dim, dataset.num_classes, sched.levels(), opts.seed);
    let n = dataset.len();
    let steps = n.div_ceil(opts.batch_size) * opts.epochs;
    let adam_opts = match opts.lr_schedule {
        LrSchedule::Constant => AdamOpts::with_lr(opts.learning_rate),
        LrSchedule::Cosine => AdamOpts::cosine(opts.learning_rate, steps),
    };
    let mut adam = Adam::new(&head.store, adam_opts);
    for epoch in 0..opts.epochs {
        let mut order_rng = substream(opts.seed, &format!("cls-order.{epoch}"));
        let mut noise_rng = substream(opts.seed, &format!("cls-noising.{epoch}"));
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = order_rng.random_range(0..=i);
            idx.swap(i, j);
        }
        for chunk in idx.chunks(opts.batch_size) {
            let sub = dataset.select(chunk);
            let t = sample_levels(&mut noise_rng, chunk.len(), sched.levels());
            let eps = Array4::from_shape_simple_fn(sub.images.dim(), || {
                let v: f32 = StandardNormal.sample(&mut noise_rng);
                v
            });
            let x_t = noise(&sub.images, &t, &eps, sched)?;
            let features = {
                let (_, acts) = net.forward_taps(&x_t, &t, std::slice::from_ref(tap), true)?;
                global_avg_pool(&acts[0])
            };
            let (logits, cache) = head.forward_cached(&features, &t);
            let (_, dlogits) = cross_entropy(&logits, &sub.labels);
            let mut grads = Gradients::new(&head.store);
            head.backward(&cache, &t, &dlogits, &mut grads);
            adam.step(&mut head.store, &grads);
        }
    }
    Ok(head)
}

/// Log-softmax class scores for a noised batch, plus the raw logits.
pub fn classify_noised(
    head: &ClassifierHead,
    net: &DDAENetwork,
    tap: &TapId,
    x_t: &Array4<f32>,
    t: &[usize],
) -> Result<(Array2<f32>, Array2<f32>)> {
    let feat = TapFeatures { net, tap: *tap };
    let features = feat.features_multi(x_t, t)?;
    let logits = head.logits(&features, t)?;
    let logp = log_softmax(&logits);
    Ok((logits, logp))
}

impl TapFeatures<'_> {
    /// Pooled features with per-item levels.
    fn features_multi(&self, x: &Array4<f32>, t: &[usize]) -> Result<Array2<f32>> {
        let (_, acts) = self
            .net
            .forward_taps(x, t, std::slice::from_ref(&self.tap), true)?;
        Ok(global_avg_pool(&acts[0]))
    }
}

/// `d log p_t(y | x_t) / d x_t` through the frozen encoder and head, plus the
/// per-item log-probabilities of the target class.
pub fn log_prob_grad(
    head: &ClassifierHead,
    net: &DDAENetwork,
    tap: &TapId,
    x_t: &Array4<f32>,
    t: usize,
    target: usize,
) -> Result<(Array1<f64>, Array4<f32>)> {
    if target >= head.classes {
        return Err(Error::contract(format!(
            "target label {target} outside [0, {})",
            head.classes
        )));
    }
    let n = x_t.dim().0;
    let t_vec = vec![t; n];
    head.check_t(&t_vec)?;
    let (act, cache) = net.forward_train_to_tap(x_t, &t_vec, tap)?;
    let features = global_avg_pool(&act);
    let (logits, head_cache) = head.forward_cached(&features, &t_vec);
    let logp = log_softmax(&logits);
    let target_logp = Array1::from_iter(logp.rows().into_iter().map(|r| r[target] as f64));
    // d logp[target] / d logits = onehot(target) - softmax
    let mut dlogits = logp.mapv(|v| -v.exp());
    for mut row in dlogits.rows_mut() {
        row[target] += 1.0;
    }
    let mut head_grads = Gradients::new(&head.store);
    let dfeat = head.backward(&head_cache, &t_vec, &dlogits, &mut head_grads);
    let d_act = crate::nn::global_avg_pool_backward(&dfeat, act.dim().2, act.dim().3);
    let (_, dx) = net.backward_from_tap(&cache, tap, &d_act, true)?;
    Ok((target_logp, dx.unwrap()))
}

/// Noise prediction and class logits from one shared forward pass.
pub fn predict_eps_and_logits(
    net: &DDAENetwork,
    head: &ClassifierHead,
    tap: &TapId,
    x_t: &Array4<f32>,
    t: &[usize],
) -> Result<(Array4<f32>, Array2<f32>)> {
    let (eps, act) = net.forward_with_tap(x_t, t, tap)?;
    let features = global_avg_pool(&act);
    let logits = head.logits(&features, t)?;
    Ok((eps, logits))
}

/// Classifier accuracy on noised held-out images at each level in `ts`.
pub fn sweep_accuracy(
    head: &ClassifierHead,
    net: &DDAENetwork,
    tap: &TapId,
    dataset: &Dataset,
    sched: &NoiseSchedule,
    ts: &[usize],
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(ts.len());
    for &t in ts {
        sched.check_level(t)?;
        let mut rng = substream(seed, &format!("sweep.{t}"));
        let mut hits = 0usize;
        let mut row = 0usize;
        while row < dataset.len() {
            let take = PAIR_BATCH.min(dataset.len() - row);
            let batch = dataset
                .images
                .slice(ndarray::s![row..row + take, .., .., ..])
                .to_owned();
            let t_vec = vec![t; take];
            let eps = Array4::from_shape_simple_fn(batch.dim(), || {
                let v: f32 = StandardNormal.sample(&mut rng);
                v
            });
            let x_t = noise(&batch, &t_vec, &eps, sched)?;
            let (logits, _) = classify_noised(head, net, tap, &x_t, &t_vec)?;
            for (r, &y) in logits.rows().into_iter().zip(&dataset.labels[row..row + take]) {
                if crate::nn::argmax_row(r.as_slice().unwrap()) == y {
                    hits += 1;
                }
            }
            row += take;
        }
        out.push((t, hits as f64 / dataset.len() as f64));
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < v.len() {
            let mut j = i;
            while j + 1 < v.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let (ra, rb) = (rank(xs), rank(ys));
    let mean = (n as f64 + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..n {
        let (a, b) = (ra[i] - mean, rb[i] - mean);
        num += a * b;
        da += a * a;
        db += b * b;
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_ddae, DDAEConfig};
    use crate::corruption::make_vp_schedule;
    use crate::harness::data::generate_synthetic;
    use crate::nn::testutil::{randn2, randn4, seeded};

    #[test]
    fn alignment_trivial_values() {
        // constant encoder: identical features, alignment 0
        let f1 = Array2::from_elem((5, 3), 0.7f32);
        assert_eq!(alignment_paired(&f1, &f1).unwrap(), 0.0);
        // orthonormal unit vectors: |e1 - e2|^2 = 2
        let mut a = Array2::zeros((1, 2));
        let mut b = Array2::zeros((1, 2));
        a[[0, 0]] = 1.0;
        b[[0, 1]] = 1.0;
        assert!((alignment_paired(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        // zero-norm feature is a normalization error
        let z = Array2::zeros((1, 2));
        assert!(alignment_paired(&z, &b).is_err());
    }

    #[test]
    fn uniformity_trivial_and_antipodal() {
        let f = Array2::from_elem((4, 3), 1.0f32);
        assert_eq!(uniformity_paired(&f, &f).unwrap(), 0.0);
        // two antipodal unit vectors, all four ordered pairs enumerated:
        // value = log((2 + 2 e^-8) / 4)
        let mut fa = Array2::zeros((4, 2));
        let mut fb = Array2::zeros((4, 2));
        // pairs (u,u), (v,v), (u,v), (v,u) with v = -u
        for (i, (x, y)) in [(1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0)]
            .into_iter()
            .enumerate()
        {
            fa[[i, 0]] = x as f32;
            fb[[i, 0]] = y as f32;
        }
        let expect = ((2.0 + 2.0 * (-8.0f64).exp()) / 4.0).ln();
        let got = uniformity_paired(&fa, &fb).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn exhaustive_pair_oracle_matches_brute_force() {
        // a stub feature map: deterministic nonlinear projection of pixels
        let mut rng = seeded(3);
        let proj = randn2((12, 6), &mut rng); // 12 = 3*2*2 image dims
        let feat = |x: &Array4<f32>| -> Array2<f32> {
            let (n, _, _, _) = x.dim();
            let flat = x.to_shape((n, 12)).unwrap().to_owned();
            let mut out = Array2::zeros((n, 6));
            for i in 0..n {
                for j in 0..6 {
                    let mut acc = 0.0f32;
                    for k in 0..12 {
                        acc += flat[[i, k]] * proj[[k, j]];
                    }
                    out[[i, j]] = (acc + 0.3).tanh() + 0.1;
                }
            }
            out
        };
        let sched = make_vp_schedule(10, 1e-3, 0.02).unwrap();
        let images = randn4((8, 3, 2, 2), &mut rng).mapv(|v| v.tanh());
        let t = 4usize;
        let a = sched.alpha(t).unwrap();
        let s = sched.sigma(t).unwrap();
        // fixed eps set: two draws per image
        let e1 = randn4((8, 3, 2, 2), &mut rng);
        let e2 = randn4((8, 3, 2, 2), &mut rng);
        let x1 = images.clone() * a + &e1 * s;
        let x2 = images.clone() * a + &e2 * s;
        let (f1, f2) = (feat(&x1), feat(&x2));

        // brute force: naive per-pair loops with scalar normalization
        let mut align_acc = 0.0f64;
        for i in 0..8 {
            let (ra, rb) = (f1.row(i), f2.row(i));
            let na: f64 = ra.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = rb.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let mut d = 0.0f64;
            for k in 0..6 {
                let diff = ra[k] as f64 / na - rb[k] as f64 / nb;
                d += diff * diff;
            }
            align_acc += d;
        }
        let align_oracle = align_acc / 8.0;
        let align_got = alignment_paired(&f1, &f2).unwrap();
        assert!((align_got - align_oracle).abs() < 1e-6);

        // uniformity over all 64 ordered pairs, shared eps e1
        let fa = feat(&x1);
        let mut kernel = 0.0f64;
        for i in 0..8 {
            for j in 0..8 {
                let (ra, rb) = (fa.row(i), fa.row(j));
                let na: f64 = ra.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = rb.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let mut d = 0.0f64;
                for k in 0..6 {
                    let diff = ra[k] as f64 / na - rb[k] as f64 / nb;
                    d += diff * diff;
                }
                kernel += (-2.0 * d).exp();
            }
        }
        let uni_oracle = (kernel / 64.0).ln();
        // enumerate the same ordered pairs through the paired API
        let mut ua = Array2::zeros((64, 6));
        let mut ub = Array2::zeros((64, 6));
        for i in 0..8 {
            for j in 0..8 {
                ua.row_mut(i * 8 + j).assign(&fa.row(i));
                ub.row_mut(i * 8 + j).assign(&fa.row(j));
            }
        }
        let uni_got = uniformity_paired(&ua, &ub).unwrap();
        assert!((uni_got - uni_oracle).abs() < 1e-6, "{uni_got} vs {uni_oracle}");
    }

    #[test]
    fn metrics_are_invariant_to_power_of_two_scaling() {
        let mut rng = seeded(5);
        let f1 = randn2((6, 4), &mut rng);
        let f2 = randn2((6, 4), &mut rng);
        let a = alignment_paired(&f1, &f2).unwrap();
        let b = alignment_paired(&f1.mapv(|v| v * 4.0), &f2.mapv(|v| v * 4.0)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let u = uniformity_paired(&f1, &f2).unwrap();
        let v = uniformity_paired(&f1.mapv(|v| v * 4.0), &f2.mapv(|v| v * 4.0)).unwrap();
        assert_eq!(u.to_bits(), v.to_bits());
    }

    #[test]
    fn sampled_metrics_run_on_a_network() {
        let cfg = DDAEConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 1,
            attention_resolutions: [4].into_iter().collect(),
            image_size: 8,
            in_channels: 3,
            time_embed_dim: 16,
        };
        let net = build_ddae(&cfg, 1).unwrap();
        let tap = net.tap_index()[3];
        let feat = TapFeatures { net: &net, tap };
        let sched = make_vp_schedule(20, 1e-3, 0.05).unwrap();
        let full = generate_synthetic(10, 7);
        let mut images = Array4::zeros((10, 3, 8, 8));
        for i in 0..10 {
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        images[[i, c, y, x]] = full.images[[i, c, y * 4, x * 4]];
                    }
                }
            }
        }
        let ds = Dataset { images, labels: full.labels, num_classes: 10 };
        let mut rng = seeded(9);
        let a = alignment(&feat, &ds, 3, &sched, &mut rng, 32).unwrap();
        assert!((0.0..=4.0).contains(&a), "alignment {a}");
        let u = uniformity(&feat, &ds, 3, &sched, &mut rng, 32, PairEps::Shared).unwrap();
        assert!((-8.0..=0.0).contains(&u), "uniformity {u}");
        assert!(alignment(&feat, &ds, 3, &sched, &mut rng, 0).is_err());
    }

    #[test]
    fn frechet_identity_and_closed_forms() {
        let mut rng = seeded(11);
        let f = randn2((40, 3), &mut rng);
        let s = gaussian_summary(&f).unwrap();
        let d = frechet_distance(&s, &s).unwrap();
        assert!(d.abs() < 1e-6, "self distance {d}");

        // D=1: means 0 and 1, unit variances -> (mu diff)^2 + (sd diff)^2 = 1
        let a = GaussianSummary { mean: ndarray::arr1(&[0.0]), cov: ndarray::arr2(&[[1.0]]) };
        let b = GaussianSummary { mean: ndarray::arr1(&[1.0]), cov: ndarray::arr2(&[[1.0]]) };
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-10);

        // D=2 diagonal: decouples into per-dimension closed forms
        let a = GaussianSummary {
            mean: ndarray::arr1(&[0.5, -1.0]),
            cov: ndarray::arr2(&[[2.0, 0.0], [0.0, 0.5]]),
        };
        let b = GaussianSummary {
            mean: ndarray::arr1(&[-0.5, 1.0]),
            cov: ndarray::arr2(&[[1.0, 0.0], [0.0, 3.0]]),
        };
        let expect = (1.0f64
            + (2.0f64.sqrt() - 1.0).powi(2))
            + (4.0 + (0.5f64.sqrt() - 3.0f64.sqrt()).powi(2));
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");

        // symmetry
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8);

        // materially non-PSD input names the eigenvalue
        let bad = GaussianSummary {
            mean: ndarray::arr1(&[0.0, 0.0]),
            cov: ndarray::arr2(&[[1.0, 0.0], [0.0, -0.5]]),
        };
        let err = frechet_distance(&bad, &a).unwrap_err();
        assert!(err.to_string().contains("eigenvalue"), "{err}");
    }

    #[test]
    fn fid_identity_and_mean_shift() {
        let mut rng = seeded(13);
        let real = randn4((30, 1, 3, 3), &mut rng);
        let same = real.clone();
        let d = fid(&IdentityEmbedder, &real, &same).unwrap();
        assert!(d.abs() < 1e-6);
        // constant shift c with an identity embedder: D * c^2
        let c = 0.35f32;
        let shifted = real.mapv(|v| v + c);
        let d = fid(&IdentityEmbedder, &real, &shifted).unwrap();
        let expect = 9.0 * (c as f64).powi(2);
        assert!((d - expect).abs() < 1e-4, "{d} vs {expect}");
        assert!(fid(&IdentityEmbedder, &real, &Array4::zeros((0, 1, 3, 3))).is_err());
    }

    #[test]
    fn pca_embedder_reduces_and_is_deterministic() {
        let mut rng = seeded(15);
        let images = randn4((24, 3, 8, 8), &mut rng);
        let pca = PcaEmbedder::fit(&images, 5, 2).unwrap();
        let e1 = pca.embed(&images).unwrap();
        let e2 = pca.embed(&images).unwrap();
        assert_eq!(e1.dim(), (24, 5));
        assert_eq!(e1, e2);
        assert!(PcaEmbedder::fit(&images, 0, 2).is_err());
    }

    #[test]
    fn classifier_head_basics() {
        let mut rng = seeded(17);
        let features = randn2((6, 8), &mut rng);
        let t = vec![1usize, 2, 3, 4, 5, 6];
        let mut head = ClassifierHead::new(8, 10, 10, 1);
        // zero all weights: logits uniform, log p = -log(K)
        for id in head.store.ids().collect::<Vec<_>>() {
            head.store.get_mut(id).fill(0.0);
        }
        let logits = head.logits(&features, &t).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let logp = log_softmax(&logits);
        for &v in logp.iter() {
            assert!((v as f64 + (10.0f64).ln()).abs() < 1e-6);
        }
        // softmax normalization
        let head = ClassifierHead::new(8, 10, 10, 2);
        let logits = head.logits(&features, &t).unwrap();
        let logp = log_softmax(&logits);
        for row in logp.rows() {
            let s: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // level range check
        assert!(head.logits(&features, &[0, 1, 2, 3, 4, 5]).is_err());
        assert!(head.logits(&features, &[1, 2, 3, 4, 5, 11]).is_err());
    }

    #[test]
    fn classifier_training_leaves_backbone_untouched() {
        let cfg = DDAEConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 1,
            attention_resolutions: [4].into_iter().collect(),
            image_size: 8,
            in_channels: 3,
            time_embed_dim: 16,
        };
        let net = build_ddae(&cfg, 3).unwrap();
        let sched = make_vp_schedule(10, 1e-3, 0.05).unwrap();
        let full = generate_synthetic(20, 21);
        let mut images = Array4::zeros((20, 3, 8, 8));
        for i in 0..20 {
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        images[[i, c, y, x]] = full.images[[i, c, y * 4, x * 4]];
                    }
                }
            }
        }
        let ds = Dataset { images, labels: full.labels, num_classes: 10 };
        let hash = net.store().weight_hash();
        let tap = net.tap_index()[2];
        let opts = ProbeOpts { epochs: 2, batch_size: 10, ..Default::default() };
        let head = train_noise_cond_classifier(&net, &tap, &ds, &sched, &opts).unwrap();
        assert_eq!(net.store().weight_hash(), hash);

        // one shared pass yields both heads' outputs
        let x = ds.images.slice(ndarray::s![..4, .., .., ..]).to_owned();
        let t = vec![2usize; 4];
        let (eps, logits) = predict_eps_and_logits(&net, &head, &tap, &x, &t).unwrap();
        let eps_ref = net.forward_eps(&x, &t).unwrap();
        for (a, b) in eps.iter().zip(eps_ref.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let (logits_ref, _) = classify_noised(&head, &net, &tap, &x, &t).unwrap();
        for (a, b) in logits.iter().zip(logits_ref.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let cfg = DDAEConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_resolution: 1,
            attention_resolutions: [4].into_iter().collect(),
            image_size: 8,
            in_channels: 3,
            time_embed_dim: 16,
        };
        let mut net = build_ddae(&cfg, 5).unwrap();
        // give the zero-initialized closing convs some signal
        let mut rng = seeded(50);
        for id in net.store().ids().collect::<Vec<_>>() {
            let name = net.store().name(id).to_string();
            if name.contains("conv2.weight") || name.contains("proj.weight") {
                let shape = net.store().get(id).shape().to_vec();
                let fan: usize = shape[1..].iter().product();
                *net.store_mut().get_mut(id) = Init::Scaled(0.5).tensor(&shape, fan, &mut rng);
            }
        }
        let tap = net.tap_index()[4];
        let head = ClassifierHead::new(net.tap_channels(&tap).unwrap(), 4, 10, 3);
        let x = randn4((2, 3, 8, 8), &mut rng).mapv(|v| v.tanh());
        let t = 4usize;
        let target = 2usize;
        let (logp, grad) = log_prob_grad(&head, &net, &tap, &x, t, target).unwrap();
        assert_eq!(logp.len(), 2);
        let scale = grad.iter().map(|&v| (v as f64).abs()).fold(0.0, f64::max);
        for p in 0..8usize {
            let idx = p * x.len() / 8;
            let mut xp = x.clone();
            let orig = xp.as_slice().unwrap()[idx];
            let h = 1e-2f32;
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let (up, _) = log_prob_grad(&head, &net, &tap, &xp, t, target).unwrap();
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let (down, _) = log_prob_grad(&head, &net, &tap, &xp, t, target).unwrap();
            let item = idx / (x.len() / 2);
            let fd = (up[item] - down[item]) / (2.0 * h as f64);
            let an = grad.as_slice().unwrap()[idx] as f64;
            let tol = 1e-2 * fd.abs().max(an.abs()).max(0.05 * scale).max(1e-7);
            assert!((fd - an).abs() <= tol, "pixel {idx}: fd {fd:.4e} vs {an:.4e}");
        }
        assert!(log_prob_grad(&head, &net, &tap, &x, t, 9).is_err());
    }

    #[test]
    fn spearman_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&xs, &[5.0, 5.0, 5.0, 5.0]), 0.0);
    }
}
