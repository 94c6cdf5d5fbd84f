//! Synthetic search world with frozen ground-truth click probabilities.
//!
//! A world holds latent vectors for users and items, observable feature
//! vectors derived from them, and a frozen noise term per user-item pair. The
//! click probability of a pair is
//! `sigmoid(dot(user_latent, item_latent) + logit_bias + noise_scale * n)`
//! with `n ~ N(0, 1)` drawn once at generation time, so every sampled label has
//! an exactly known expectation.
//!
//! Observable features start with the latent coordinates and continue with
//! fixed random projections of them, plus independent per-entity feature
//! noise. The scorer can approximate the CTR surface but never sees the
//! frozen pair noise.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};
use crate::losses::DumpedContext;
use crate::math::{dot, sigmoid};
use crate::matrix::Matrix;
use crate::rng::{self, StreamRng};

const WORLD_MAGIC: &[u8; 8] = b"CALRWLD1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub query_dim: usize,
    pub item_dim: usize,
    /// Inclusive `(min, max)` number of candidates per query.
    pub candidates_per_query: (usize, usize),
    pub latent_dim: usize,
    pub logit_bias: f64,
    pub noise_scale: f64,
    /// Standard deviation of `dot(user_latent, item_latent)`.
    pub signal_scale: f64,
    /// Standard deviation of the independent noise added to observable features.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_users: 2000,
            num_items: 1000,
            query_dim: 8,
            item_dim: 8,
            candidates_per_query: (6, 12),
            latent_dim: 4,
            logit_bias: -2.0,
            noise_scale: 0.3,
            signal_scale: 1.5,
            feature_noise: 0.1,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.candidates_per_query;
        if lo < 2 {
            return Err(config("candidates_per_query.min must be at least 2"));
        }
        if hi < lo {
            return Err(config("candidates_per_query.max must be >= min"));
        }
        for (name, v) in [
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("query_dim", self.query_dim),
            ("item_dim", self.item_dim),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(config(format!("{name} must be at least 1")));
            }
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(config("noise_scale must be finite and >= 0"));
        }
        if !self.logit_bias.is_finite() {
            return Err(config("logit_bias must be finite"));
        }
        if !self.signal_scale.is_finite() || self.signal_scale < 0.0 {
            return Err(config("signal_scale must be finite and >= 0"));
        }
        if !self.feature_noise.is_finite() || self.feature_noise < 0.0 {
            return Err(config("feature_noise must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub user_latents: Matrix,
    pub item_latents: Matrix,
    pub user_features: Matrix,
    pub item_features: Matrix,
    /// Frozen standard-normal noise per (user, item).
    pair_noise: Matrix,
    ctr: Matrix,
}

/// One request: a user, its candidates and the sampled feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub query_id: u64,
    pub user_id: usize,
    pub query_features: Vec<f64>,
    pub item_ids: Vec<usize>,
    pub item_features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub true_ctrs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dumped: Option<DumpedContext>,
}

impl QueryGroup {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut StreamRng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Maps latents to observable features: identity on the first coordinates,
/// fixed random projections after that, plus feature noise.
fn observe(latents: &Matrix, dim: usize, noise: f64, rng: &mut StreamRng) -> Matrix {
    let latent_dim = latents.cols();
    let direct = latent_dim.min(dim);
    let projection = gaussian_matrix(dim - direct, latent_dim, 1.0 / (latent_dim as f64).sqrt(), rng);
    let nuisance = gaussian_matrix(latents.rows(), dim, noise, rng);
    Matrix::from_fn(latents.rows(), dim, |r, c| {
        let base = if c < direct {
            latents.get(r, c)
        } else {
            dot(projection.row(c - direct), latents.row(r))
        };
        base + nuisance.get(r, c)
    })
}

fn ctr_table(config: &WorldConfig, users: &Matrix, items: &Matrix, noise: &Matrix) -> Matrix {
    Matrix::from_fn(config.num_users, config.num_items, |u, i| {
        let z = dot(users.row(u), items.row(i)) + config.logit_bias + config.noise_scale * noise.get(u, i);
        sigmoid(z)
    })
}

/// Draw order on the world stream: user latents, item latents, user
/// projections and feature noise, item projections and feature noise, pair
/// noise (all row-major).
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, rng::STREAM_WORLD);
    // Per-coordinate std chosen so that dot(u, v) has std `signal_scale`.
    let coord_std = config.signal_scale.sqrt() / (config.latent_dim as f64).powf(0.25);
    let user_latents = gaussian_matrix(config.num_users, config.latent_dim, coord_std, &mut rng);
    let item_latents = gaussian_matrix(config.num_items, config.latent_dim, coord_std, &mut rng);
    SyntheticWorld::assemble(config.clone(), user_latents, item_latents, &mut rng)
}

impl SyntheticWorld {
    /// Builds a world around caller-supplied latents; features and pair noise
    /// still come from the config seed.
    pub fn from_latents(config: WorldConfig, user_latents: Matrix, item_latents: Matrix) -> Result<Self> {
        config.validate()?;
        if user_latents.rows() != config.num_users
            || item_latents.rows() != config.num_items
            || user_latents.cols() != config.latent_dim
            || item_latents.cols() != config.latent_dim
        {
            return Err(config_err_dims());
        }
        let mut rng = rng::stream(config.seed, rng::STREAM_WORLD);
        Self::assemble(config, user_latents, item_latents, &mut rng)
    }

    fn assemble(config: WorldConfig, user_latents: Matrix, item_latents: Matrix, rng: &mut StreamRng) -> Result<Self> {
        let user_features = observe(&user_latents, config.query_dim, config.feature_noise, rng);
        let item_features = observe(&item_latents, config.item_dim, config.feature_noise, rng);
        let pair_noise = gaussian_matrix(config.num_users, config.num_items, 1.0, rng);
        let ctr = ctr_table(&config, &user_latents, &item_latents, &pair_noise);
        Ok(SyntheticWorld { config, user_latents, item_latents, user_features, item_features, pair_noise, ctr })
    }

    pub fn true_ctr(&self, user_id: usize, item_id: usize) -> Result<f64> {
        if user_id >= self.config.num_users {
            return Err(Error::Lookup(format!("user id {user_id} out of range")));
        }
        if item_id >= self.config.num_items {
            return Err(Error::Lookup(format!("item id {item_id} out of range")));
        }
        Ok(self.ctr.get(user_id, item_id))
    }

    /// Serialises every matrix as little-endian f64 after a fixed header.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WORLD_MAGIC);
        for m in self.matrices() {
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        }
        for m in self.matrices() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_blob(config: WorldConfig, blob: &[u8]) -> Result<Self> {
        config.validate()?;
        if blob.len() < 8 || &blob[..8] != WORLD_MAGIC {
            return Err(Error::Format("world blob: bad magic".into()));
        }
        let mut cursor = &blob[8..];
        let mut dims = Vec::with_capacity(5);
        for _ in 0..5 {
            let rows = read_u64(&mut cursor)? as usize;
            let cols = read_u64(&mut cursor)? as usize;
            dims.push((rows, cols));
        }
        let mut mats = Vec::with_capacity(5);
        for (rows, cols) in dims {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_bits(read_u64(&mut cursor)?));
            }
            mats.push(Matrix::from_vec(rows, cols, data));
        }
        if !cursor.is_empty() {
            return Err(Error::Format("world blob: trailing bytes".into()));
        }
        let pair_noise = mats.pop().unwrap();
        let item_features = mats.pop().unwrap();
        let user_features = mats.pop().unwrap();
        let item_latents = mats.pop().unwrap();
        let user_latents = mats.pop().unwrap();
        if user_latents.rows() != config.num_users
            || item_latents.rows() != config.num_items
            || user_features.cols() != config.query_dim
            || item_features.cols() != config.item_dim
            || pair_noise.rows() != config.num_users
            || pair_noise.cols() != config.num_items
        {
            return Err(config_err_dims());
        }
        let ctr = ctr_table(&config, &user_latents, &item_latents, &pair_noise);
        Ok(SyntheticWorld { config, user_latents, item_latents, user_features, item_features, pair_noise, ctr })
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_blob()))
    }

    fn matrices(&self) -> [&Matrix; 5] {
        [&self.user_latents, &self.item_latents, &self.user_features, &self.item_features, &self.pair_noise]
    }

    /// Writes `world.bin` and `world.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let blob = self.to_blob();
        std::fs::File::create(dir.join("world.bin"))?.write_all(&blob)?;
        let header = WorldHeader {
            format: "calrank-world-v1".into(),
            num_users: self.config.num_users,
            num_items: self.config.num_items,
            query_dim: self.config.query_dim,
            item_dim: self.config.item_dim,
            latent_dim: self.config.latent_dim,
            seed: self.config.seed,
            sha256: hex::encode(Sha256::digest(&blob)),
            config: self.config.clone(),
        };
        std::fs::write(dir.join("world.json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    pub fn read_from_dir(dir: &Path) -> Result<Self> {
        let header: WorldHeader = serde_json::from_str(&std::fs::read_to_string(dir.join("world.json"))?)?;
        let mut blob = Vec::new();
        std::fs::File::open(dir.join("world.bin"))?.read_to_end(&mut blob)?;
        if hex::encode(Sha256::digest(&blob)) != header.sha256 {
            return Err(Error::Format("world blob hash mismatch".into()));
        }
        Self::from_blob(header.config, &blob)
    }
}

fn config_err_dims() -> Error {
    config("matrix dimensions do not match the world config")
}

fn read_u64(cursor: &mut &[u8]) -> Result<u64> {
    if cursor.len() < 8 {
        return Err(Error::Format("world blob truncated".into()));
    }
    let (head, rest) = cursor.split_at(8);
    *cursor = rest;
    Ok(u64::from_le_bytes(head.try_into().unwrap()))
}

/// Human-readable companion of `world.bin`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldHeader {
    pub format: String,
    pub num_users: usize,
    pub num_items: usize,
    pub query_dim: usize,
    pub item_dim: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub sha256: String,
    pub config: WorldConfig,
}

/// Draws one query: a uniform user, a uniform group size in the configured
/// range, candidates without replacement and Bernoulli labels.
pub fn sample_query_group(world: &SyntheticWorld, rng: &mut StreamRng, query_id: u64) -> Result<QueryGroup> {
    let cfg = &world.config;
    let (lo, hi) = cfg.candidates_per_query;
    if hi > cfg.num_items {
        return Err(config(format!(
            "candidates_per_query.max ({hi}) exceeds num_items ({})",
            cfg.num_items
        )));
    }
    let user_id = rng.random_range(0..cfg.num_users);
    let n = rng.random_range(lo..=hi);
    let item_ids: Vec<usize> = index::sample(rng, cfg.num_items, n).into_vec();
    let mut labels = Vec::with_capacity(n);
    let mut true_ctrs = Vec::with_capacity(n);
    for &item in &item_ids {
        let p = world.ctr.get(user_id, item);
        let u: f64 = rng.random();
        labels.push(u8::from(u < p));
        true_ctrs.push(p);
    }
    Ok(QueryGroup {
        query_id,
        user_id,
        query_features: world.user_features.row(user_id).to_vec(),
        item_features: item_ids.iter().map(|&i| world.item_features.row(i).to_vec()).collect(),
        item_ids,
        labels,
        true_ctrs,
        dumped: None,
    })
}

/// Endless numbered query stream over one RNG stream.
pub struct QueryStream<'w> {
    world: &'w SyntheticWorld,
    rng: StreamRng,
    next_id: u64,
}

impl<'w> QueryStream<'w> {
    pub fn new(world: &'w SyntheticWorld, seed: u64, stream_id: u64, first_id: u64) -> Self {
        QueryStream { world, rng: rng::stream(seed, stream_id), next_id: first_id }
    }

    pub fn next_group(&mut self) -> Result<QueryGroup> {
        let g = sample_query_group(self.world, &mut self.rng, self.next_id)?;
        self.next_id += 1;
        Ok(g)
    }

    pub fn take_groups(&mut self, n: usize) -> Result<Vec<QueryGroup>> {
        (0..n).map(|_| self.next_group()).collect()
    }
}

/// One line of the query-group NDJSON log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLogLine {
    pub query_id: u64,
    pub user_id: usize,
    pub item_ids: Vec<usize>,
    pub labels: Vec<u8>,
    pub dumped_scores: Option<Vec<f64>>,
    pub dumped_labels: Option<Vec<u8>>,
    pub model_version: Option<u64>,
}

impl From<&QueryGroup> for QueryLogLine {
    fn from(g: &QueryGroup) -> Self {
        QueryLogLine {
            query_id: g.query_id,
            user_id: g.user_id,
            item_ids: g.item_ids.clone(),
            labels: g.labels.clone(),
            dumped_scores: g.dumped.as_ref().map(|d| d.scores.clone()),
            dumped_labels: g.dumped.as_ref().map(|d| d.labels.clone()),
            model_version: g.dumped.as_ref().map(|d| d.model_version),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            num_users: 10,
            num_items: 20,
            latent_dim: 2,
            query_dim: 3,
            item_dim: 4,
            candidates_per_query: (2, 5),
            seed: 5,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a.to_blob(), b.to_blob());
        let mut other = small();
        other.seed = 6;
        assert_ne!(a.to_blob(), generate_world(&other).unwrap().to_blob());
    }

    #[test]
    fn orthogonal_latents_without_noise_give_half() {
        let cfg = WorldConfig { noise_scale: 0.0, logit_bias: 0.0, num_users: 2, num_items: 2, ..small() };
        let users = Matrix::from_vec(2, 2, vec![1.0, 0.0, 2.0, 0.0]);
        let items = Matrix::from_vec(2, 2, vec![0.0, 1.0, 0.0, -3.0]);
        let w = SyntheticWorld::from_latents(cfg, users, items).unwrap();
        for u in 0..2 {
            for i in 0..2 {
                assert_eq!(w.true_ctr(u, i).unwrap(), 0.5);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small();
        c.candidates_per_query = (1, 3);
        assert!(matches!(generate_world(&c), Err(Error::Config(_))));
        let mut c = small();
        c.latent_dim = 0;
        assert!(matches!(generate_world(&c), Err(Error::Config(_))));
        let mut c = small();
        c.noise_scale = f64::NAN;
        assert!(matches!(generate_world(&c), Err(Error::Config(_))));
    }

    #[test]
    fn true_ctr_range_and_lookup_errors() {
        let w = generate_world(&small()).unwrap();
        for u in 0..10 {
            for i in 0..20 {
                let p = w.true_ctr(u, i).unwrap();
                assert!(p > 0.0 && p < 1.0);
                assert_eq!(p, w.true_ctr(u, i).unwrap());
            }
        }
        assert!(matches!(w.true_ctr(10, 0), Err(Error::Lookup(_))));
        assert!(matches!(w.true_ctr(0, 20), Err(Error::Lookup(_))));
    }

    #[test]
    fn full_range_sampling_covers_every_item_once() {
        let cfg = WorldConfig { num_items: 5, candidates_per_query: (5, 5), ..small() };
        let w = generate_world(&cfg).unwrap();
        let mut s = QueryStream::new(&w, 1, rng::STREAM_TRAIN_QUERIES, 0);
        for _ in 0..50 {
            let g = s.next_group().unwrap();
            let mut ids = g.item_ids.clone();
            ids.sort_unstable();
            assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn oversized_candidate_range_is_a_config_error() {
        let mut w = generate_world(&small()).unwrap();
        w.config.candidates_per_query = (2, 21);
        let mut r = rng::stream(0, 0);
        assert!(matches!(sample_query_group(&w, &mut r, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_replays_from_the_same_stream() {
        let w = generate_world(&small()).unwrap();
        let a = QueryStream::new(&w, 3, rng::STREAM_TRAIN_QUERIES, 0).take_groups(100).unwrap();
        let b = QueryStream::new(&w, 3, rng::STREAM_TRAIN_QUERIES, 0).take_groups(100).unwrap();
        assert_eq!(a, b);
        for g in &a {
            assert!(g.len() >= 2 && g.len() <= 5);
            assert!(g.labels.iter().all(|&y| y <= 1));
        }
    }

    #[test]
    fn near_certain_ctr_gives_almost_all_positive_labels() {
        let cfg = WorldConfig { logit_bias: 40.0, ..small() };
        let w = generate_world(&cfg).unwrap();
        let groups = QueryStream::new(&w, 0, rng::STREAM_TRAIN_QUERIES, 0).take_groups(10_000).unwrap();
        let total: usize = groups.iter().map(|g| g.len()).sum();
        let pos: usize = groups.iter().flat_map(|g| &g.labels).map(|&y| y as usize).sum();
        assert!(pos as f64 / total as f64 > 0.9999);
    }

    #[test]
    fn blob_round_trip() {
        let w = generate_world(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_to_dir(dir.path()).unwrap();
        let back = SyntheticWorld::read_from_dir(dir.path()).unwrap();
        assert_eq!(back, w);
        let hdr: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("world.json")).unwrap()).unwrap();
        assert_eq!(hdr["sha256"].as_str().unwrap(), w.content_hash());
    }
}
