//! Geometric self-attention and cross-attention with fixed pseudo-random
//! weights. Self-attention scores use the structure embedding as a relative
//! position term, so features are invariant to rigid motion of either cloud.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FeatureExtractor, FeatureSet};
use crate::cloud::PointCloud;
use crate::embedding::{embed_cloud, EmbeddingConfig, GeometricEmbedding};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub embedding: EmbeddingConfig,
    pub seed: u64,
    pub blocks: usize,
    /// Upper bound on cloud size; embeddings are dense `n²·dim`.
    pub max_points: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            embedding: EmbeddingConfig::default(),
            seed: 0,
            blocks: 2,
            max_points: 256,
        }
    }
}

#[derive(Debug, Clone)]
struct Projections {
    query: DMatrix<f64>,
    key: DMatrix<f64>,
    value: DMatrix<f64>,
    output: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct Block {
    self_attn: Projections,
    /// Maps the structure embedding into query space.
    relative: DMatrix<f64>,
    cross_attn: Projections,
}

#[derive(Debug, Clone)]
pub struct SeededAttention {
    pub config: AttentionConfig,
    w_distance: DMatrix<f64>,
    w_angular: DMatrix<f64>,
    blocks: Vec<Block>,
}

fn projections(draw: &mut impl FnMut() -> DMatrix<f64>) -> Projections {
    Projections {
        query: draw(),
        key: draw(),
        value: draw(),
        output: draw(),
    }
}

impl SeededAttention {
    pub fn new(config: AttentionConfig) -> Result<Self> {
        config.embedding.validate()?;
        if config.blocks == 0 {
            return Err(Error::invalid("attention.blocks", "must be >= 1"));
        }
        let d = config.embedding.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
        let mut draw = || DMatrix::from_fn(d, d, |_, _| normal.sample(&mut rng));
        let w_distance = draw();
        let w_angular = draw();
        let blocks = (0..config.blocks)
            .map(|_| {
                let self_attn = projections(&mut draw);
                let cross_attn = projections(&mut draw);
                Block {
                    self_attn,
                    relative: draw(),
                    cross_attn,
                }
            })
            .collect();
        Ok(Self {
            config,
            w_distance,
            w_angular,
            blocks,
        })
    }

    pub fn projection_weights(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.w_distance, &self.w_angular)
    }

    pub fn embed(&self, cloud: &PointCloud) -> Result<GeometricEmbedding> {
        self.check_size(cloud)?;
        embed_cloud(cloud, &self.config.embedding, &self.w_distance, &self.w_angular)
    }

    fn check_size(&self, cloud: &PointCloud) -> Result<()> {
        let min = self.config.embedding.k_angular + 1;
        if cloud.len() < min {
            return Err(Error::NotEnoughPoints {
                needed: min,
                available: cloud.len(),
            });
        }
        if cloud.len() > self.config.max_points {
            return Err(Error::invalid(
                "attention.max_points",
                format!(
                    "cloud has {} points, extractor accepts at most {}",
                    cloud.len(),
                    self.config.max_points
                ),
            ));
        }
        Ok(())
    }

    /// Self-attention-only features from a precomputed embedding of `cloud`.
    pub fn features_from_embedding(&self, cloud: &PointCloud, emb: &GeometricEmbedding) -> Result<FeatureSet> {
        self.check_size(cloud)?;
        if emb.n() != cloud.len() || emb.dim() != self.config.embedding.dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding ({}, {}) for a cloud of {} points, dim {}",
                emb.n(),
                emb.dim(),
                cloud.len(),
                self.config.embedding.dim
            )));
        }
        let mut x = initial_state(emb);
        for block in &self.blocks {
            x = self_attention(&x, emb, block);
        }
        self.finish(x)
    }

    fn finish(&self, x: Vec<f64>) -> Result<FeatureSet> {
        let n = x.len() / self.config.embedding.dim;
        FeatureSet::from_rows(self.config.embedding.dim, x, (0..n).collect())
    }
}

fn initial_state(emb: &GeometricEmbedding) -> Vec<f64> {
    let (n, d) = (emb.n(), emb.dim());
    let mut x = vec![0.0; n * d];
    x.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        for j in 0..n {
            row.iter_mut().zip(emb.get(i, j)).for_each(|(r, e)| *r += e);
        }
        row.iter_mut().for_each(|r| *r /= n as f64);
        layer_norm(row);
    });
    x
}

fn layer_norm(row: &mut [f64]) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-12).sqrt();
    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

fn project(m: &DMatrix<f64>, x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(d)
        .zip(x.par_chunks(d))
        .for_each(|(o, row)| matvec(m, row, o));
    out
}

fn matvec(m: &DMatrix<f64>, v: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (c, &vc) in v.iter().enumerate() {
        for (o, &mrc) in out.iter_mut().zip(m.column(c).iter()) {
            *o += mrc * vc;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax-weighted sum of `values` rows under `scores` (in place on scores).
fn attend(scores: &mut [f64], values: &[f64], d: usize, out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    out.fill(0.0);
    for (s, v) in scores.iter().zip(values.chunks(d)) {
        let w = s / total;
        out.iter_mut().zip(v).for_each(|(o, vv)| *o += w * vv);
    }
}

fn residual_update(x: &[f64], attended: &[f64], output: &DMatrix<f64>, d: usize) -> Vec<f64> {
    let mut next = vec![0.0; x.len()];
    next.par_chunks_mut(d)
        .zip(x.par_chunks(d).zip(attended.par_chunks(d)))
        .for_each(|(n, (xi, ai))| {
            matvec(output, ai, n);
            n.iter_mut().zip(xi).for_each(|(nv, xv)| *nv += xv);
            layer_norm(n);
        });
    next
}

fn self_attention(x: &[f64], emb: &GeometricEmbedding, block: &Block) -> Vec<f64> {
    let d = emb.dim();
    let n = emb.n();
    let p = &block.self_attn;
    let q = project(&p.query, x, d);
    let k = project(&p.key, x, d);
    let v = project(&p.value, x, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut attended = vec![0.0; x.len()];
    attended.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        let qi = &q[i * d..(i + 1) * d];
        // q·(e W_R) == e·(W_R q)
        let mut u = vec![0.0; d];
        matvec(&block.relative, qi, &mut u);
        let mut scores: Vec<f64> = (0..n)
            .map(|j| (dot(qi, &k[j * d..(j + 1) * d]) + dot(emb.get(i, j), &u)) * scale)
            .collect();
        attend(&mut scores, &v, d, out);
    });
    residual_update(x, &attended, &p.output, d)
}

fn cross_attention(x: &[f64], other: &[f64], p: &Projections, d: usize) -> Vec<f64> {
    let q = project(&p.query, x, d);
    let k = project(&p.key, other, d);
    let v = project(&p.value, other, d);
    let scale = 1.0 / (d as f64).sqrt();
    let m = other.len() / d;
    let mut attended = vec![0.0; x.len()];
    attended.par_chunks_mut(d).enumerate().for_each(|(i, out)| {
        let qi = &q[i * d..(i + 1) * d];
        let mut scores: Vec<f64> = (0..m).map(|j| dot(qi, &k[j * d..(j + 1) * d]) * scale).collect();
        attend(&mut scores, &v, d, out);
    });
    residual_update(x, &attended, &p.output, d)
}

impl FeatureExtractor for SeededAttention {
    fn name(&self) -> &'static str {
        "seeded-attention"
    }

    fn extract(&self, cloud: &PointCloud) -> Result<FeatureSet> {
        let emb = self.embed(cloud)?;
        self.features_from_embedding(cloud, &emb)
    }

    fn extract_pair(&self, source: &PointCloud, target: &PointCloud) -> Result<(FeatureSet, FeatureSet)> {
        let d = self.config.embedding.dim;
        let emb_s = self.embed(source)?;
        let emb_t = self.embed(target)?;
        let mut xs = initial_state(&emb_s);
        let mut xt = initial_state(&emb_t);
        for block in &self.blocks {
            xs = self_attention(&xs, &emb_s, block);
            xt = self_attention(&xt, &emb_t, block);
            let next_s = cross_attention(&xs, &xt, &block.cross_attn, d);
            let next_t = cross_attention(&xt, &xs, &block.cross_attn, d);
            xs = next_s;
            xt = next_t;
        }
        Ok((self.finish(xs)?, self.finish(xt)?))
    }
}
