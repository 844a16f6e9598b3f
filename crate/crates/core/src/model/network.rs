//! The embedding encoder: 5x5 stem convolution, 2x2 max-pool, a stack of
//! (naive stride-2 inception, standard inception) blocks, global average
//! pooling, a linear projection and L2 normalization.

use std::sync::Arc;

use super::layers::{
    BnUpdate, BranchCache, ConvBnRelu, ConvBnReluCache, Inception, MaxPool, Mode, ParamId, ParamRole, ParamSpec,
    Registry, Weights, BN_MOMENTUM,
};
use super::nn::{matmul, Scalar, Tensor};
use super::ArchConfig;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Network {
    arch: ArchConfig,
    specs: Vec<ParamSpec>,
    stem: ConvBnRelu,
    stem_pool: MaxPool,
    blocks: Vec<(Inception, Inception)>,
    head_weight: ParamId,
    head_bias: ParamId,
}

/// Everything a training-mode forward pass must remember for `backward`.
#[derive(Debug)]
pub struct Trace<F> {
    stem: ConvBnReluCache<F>,
    stem_pool_arg: Vec<u32>,
    stem_hw: (usize, usize),
    blocks: Vec<(Vec<BranchCache<F>>, Vec<BranchCache<F>>)>,
    pooled: Vec<F>,
    last_shape: (usize, usize, usize),
    raw: Vec<F>,
    norms: Vec<F>,
    pub updates: Vec<BnUpdate<F>>,
}

#[derive(Debug)]
pub struct ForwardOutput<F> {
    /// Projection output before normalization, `n x dim`.
    pub raw: Vec<F>,
    /// Unit-norm embeddings, `n x dim`.
    pub embeddings: Vec<F>,
    pub trace: Option<Trace<F>>,
}

impl Network {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut reg = Registry::default();
        let stem = ConvBnRelu::new(&mut reg, "stem", 1, arch.stem_channels, 5, 1);
        let stem_pool = MaxPool { k: 2, stride: 2, pad: 0 };
        let mut in_c = arch.stem_channels;
        let blocks = arch
            .block_channels
            .iter()
            .enumerate()
            .map(|(i, &out_c)| {
                let naive = Inception::new(&mut reg, &format!("block{i}.naive"), in_c, out_c, 2, true);
                let standard = Inception::new(&mut reg, &format!("block{i}.inception"), out_c, out_c, 1, false);
                in_c = out_c;
                (naive, standard)
            })
            .collect();
        let head_weight = reg.register(
            "head.weight".into(),
            vec![arch.embedding_dim, in_c],
            ParamRole::LinearWeight,
            in_c,
        );
        let head_bias = reg.register("head.bias".into(), vec![arch.embedding_dim], ParamRole::LinearBias, in_c);
        Self {
            arch: arch.clone(),
            specs: reg.specs,
            stem,
            stem_pool,
            blocks,
            head_weight,
            head_bias,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn head_weight(&self) -> ParamId {
        self.head_weight
    }

    pub fn head_bias(&self) -> ParamId {
        self.head_bias
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    /// `x` is `n x 1 x frames x bands`.
    pub fn forward<F: Scalar>(&self, weights: &Weights<F>, x: Tensor<F>, mode: Mode) -> ForwardOutput<F> {
        let n = x.n;
        let mut updates = Vec::new();
        let x = Arc::new(x);
        let (h, stem_cache) = self.stem.forward(weights, &x, mode, &mut updates);
        let stem_hw = (h.h, h.w);
        let (pooled, stem_pool_arg) = self.stem_pool.forward(&h);
        drop(h);
        let mut cur = Arc::new(pooled);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (naive, standard) in &self.blocks {
            let (y, c1) = naive.forward(weights, &cur, mode, &mut updates);
            let y = Arc::new(y);
            let (z, c2) = standard.forward(weights, &y, mode, &mut updates);
            block_caches.push(c1.zip(c2));
            cur = Arc::new(z);
        }
        let (c, plane) = (cur.c, cur.plane());
        let inv_plane = F::one() / F::from_usize(plane).unwrap();
        let gap: Vec<F> = cur
            .data
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<F>() * inv_plane)
            .collect();
        let d = self.arch.embedding_dim;
        let mut raw = vec![F::zero(); n * d];
        let bias = weights.get(self.head_bias);
        for row in raw.chunks_mut(d) {
            row.copy_from_slice(bias);
        }
        matmul(n, c, d, &gap, false, weights.get(self.head_weight), true, F::one(), &mut raw);
        let floor = F::from_f64_lossy(NORM_FLOOR);
        let norms: Vec<F> = raw
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt().max(floor))
            .collect();
        let embeddings: Vec<F> = raw
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, &nrm)| r.iter().map(move |&v| v / nrm))
            .collect();
        let trace = match mode {
            Mode::Eval => None,
            Mode::Train => Some(Trace {
                stem: stem_cache.expect("train cache"),
                stem_pool_arg,
                stem_hw,
                blocks: block_caches.into_iter().map(|c| c.expect("train cache")).collect(),
                pooled: gap,
                last_shape: (c, cur.h, cur.w),
                raw: raw.clone(),
                norms,
                updates,
            }),
        };
        ForwardOutput { raw, embeddings, trace }
    }

    /// Back-propagates `d_embeddings` (gradient w.r.t. the normalized output) and
    /// accumulates parameter gradients into `grads`.
    pub fn backward<F: Scalar>(&self, weights: &Weights<F>, trace: Trace<F>, d_embeddings: &[F], grads: &mut Weights<F>) {
        let d = self.arch.embedding_dim;
        let n = trace.norms.len();
        assert_eq!(d_embeddings.len(), n * d, "embedding gradient shape");
        let floor = F::from_f64_lossy(NORM_FLOOR);
        let mut d_raw = vec![F::zero(); n * d];
        for i in 0..n {
            let r = &trace.raw[i * d..(i + 1) * d];
            let de = &d_embeddings[i * d..(i + 1) * d];
            let nrm = trace.norms[i];
            let out = &mut d_raw[i * d..(i + 1) * d];
            if nrm > floor {
                let dot: F = r.iter().zip(de).map(|(&a, &b)| a * b).sum::<F>() / nrm;
                for ((o, &g), &rv) in out.iter_mut().zip(de).zip(r) {
                    *o = (g - rv / nrm * dot) / nrm;
                }
            } else {
                for (o, &g) in out.iter_mut().zip(de) {
                    *o = g / floor;
                }
            }
        }
        let (c, h, w) = trace.last_shape;
        matmul(d, n, c, &d_raw, true, &trace.pooled, false, F::one(), grads.get_mut(self.head_weight));
        {
            let gb = grads.get_mut(self.head_bias);
            for row in d_raw.chunks(d) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut d_gap = vec![F::zero(); n * c];
        matmul(n, d, c, &d_raw, false, weights.get(self.head_weight), false, F::zero(), &mut d_gap);
        let plane = h * w;
        let inv_plane = F::one() / F::from_usize(plane).unwrap();
        let mut dy = Tensor::zeros(n, c, h, w);
        for (chunk, &g) in dy.data.chunks_mut(plane).zip(&d_gap) {
            chunk.iter_mut().for_each(|v| *v = g * inv_plane);
        }
        for ((naive, standard), (c1, c2)) in self.blocks.iter().zip(trace.blocks).rev() {
            let dmid = standard.backward(weights, c2, dy, grads);
            dy = naive.backward(weights, c1, dmid, grads);
        }
        let (sh, sw) = trace.stem_hw;
        let d_stem = self.stem_pool.backward(&dy, &trace.stem_pool_arg, sh, sw);
        self.stem.backward(weights, trace.stem, d_stem, grads, false);
    }

    /// Folds the batch statistics of a training pass into the running estimates.
    pub fn apply_bn_updates<F: Scalar>(&self, weights: &mut Weights<F>, updates: &[BnUpdate<F>]) {
        let m = F::from_f64_lossy(BN_MOMENTUM);
        let keep = F::one() - m;
        for u in updates {
            for (r, &b) in weights.get_mut(u.running_mean).iter_mut().zip(&u.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in weights.get_mut(u.running_var).iter_mut().zip(&u.unbiased_var) {
                *r = keep * *r + m * b;
            }
        }
    }
}
