use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{dot, LabError};

/// Shape of a synthetic preference world.
///
/// Each candidate response is a feature vector. The last feature is
/// spurious: it carries no true reward but is correlated with it
/// (`spurious_correlation`) in ordinary candidates, and every evaluation pool
/// contains one degenerate candidate with a large spurious value and negative
/// true reward. Mislabeled training pairs have their labeled winner's
/// spurious feature boosted, so a scorer that leans on the spurious feature
/// is rewarded by noisy labels and punished at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub d: usize,
    pub k: usize,
    pub n_pairs: usize,
    pub noise: f64,
    pub prompts: usize,
    pub spurious_correlation: f64,
    pub degenerate_spurious: f64,
    pub degenerate_pull: f64,
    pub flip_boost: f64,
    pub init_alignment: f64,
    pub init_spurious: f64,
    pub init_jitter: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            d: 32,
            k: 4,
            n_pairs: 2000,
            noise: 0.1,
            prompts: 256,
            spurious_correlation: 0.5,
            degenerate_spurious: 6.0,
            degenerate_pull: 1.5,
            flip_boost: 2.0,
            init_alignment: 1.0,
            init_spurious: -1.0,
            init_jitter: 0.3,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: &str| Err(LabError::InvalidWorld(m.to_string()));
        if self.d < 2 {
            return bad("d must be at least 2");
        }
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if self.n_pairs < 1 {
            return bad("n_pairs must be at least 1");
        }
        if !(0.0..0.5).contains(&self.noise) {
            return bad("noise must lie in [0, 0.5)");
        }
        if self.prompts < 1 {
            return bad("prompts must be at least 1");
        }
        if !(-1.0..=1.0).contains(&self.spurious_correlation) {
            return bad("spurious_correlation must lie in [-1, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    /// True when the label disagrees with the true reward.
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub r_star: Vec<f64>,
    pub spurious: usize,
    pub pairs: Vec<PreferencePair>,
    /// `prompts * k` candidates, pool by pool.
    pub pools: Vec<Vec<f64>>,
    /// `r_star . x` for every pool candidate, same layout as `pools`.
    pub pool_rewards: Vec<f64>,
    /// Initial ("SFT") scorer.
    pub theta0: Vec<f64>,
}

impl LabWorld {
    pub fn pool(&self, prompt: usize) -> &[Vec<f64>] {
        let k = self.config.k;
        &self.pools[prompt * k..(prompt + 1) * k]
    }

    pub fn true_reward_of(&self, x: &[f64]) -> f64 {
        dot(&self.r_star, x)
    }
}

pub fn make_world(
    d: usize,
    k: usize,
    n_pairs: usize,
    noise: f64,
    seed: u64,
) -> Result<LabWorld, LabError> {
    make_world_with(
        WorldConfig {
            d,
            k,
            n_pairs,
            noise,
            ..WorldConfig::default()
        },
        seed,
    )
}

pub fn make_world_with(config: WorldConfig, seed: u64) -> Result<LabWorld, LabError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d;
    let s = d - 1;

    let mut r_star = normal_vec(&mut rng, d);
    r_star[s] = 0.0;
    let len = dot(&r_star, &r_star).sqrt();
    r_star.iter_mut().for_each(|x| *x /= len);

    let rho = config.spurious_correlation;
    let candidate = |rng: &mut ChaCha8Rng| {
        let mut x = normal_vec(rng, d);
        x[s] = 0.0;
        let reward = dot(&r_star, &x);
        let e: f64 = rng.sample(StandardNormal);
        x[s] = rho * reward + (1.0 - rho * rho).sqrt() * e;
        x
    };

    let mut pairs = Vec::with_capacity(config.n_pairs);
    for _ in 0..config.n_pairs {
        let a = candidate(&mut rng);
        let b = candidate(&mut rng);
        let (winner, loser) = if dot(&r_star, &a) >= dot(&r_star, &b) {
            (a, b)
        } else {
            (b, a)
        };
        pairs.push(PreferencePair {
            winner,
            loser,
            flipped: false,
        });
    }

    let n_flip = (config.noise * config.n_pairs as f64).round() as usize;
    let mut flips = index::sample(&mut rng, config.n_pairs, n_flip).into_vec();
    flips.sort_unstable();
    for i in flips {
        let pair = &mut pairs[i];
        std::mem::swap(&mut pair.winner, &mut pair.loser);
        pair.flipped = true;
        let e: f64 = rng.sample(StandardNormal);
        pair.winner[s] += config.flip_boost * (1.0 + e.abs());
    }

    let mut pools = Vec::with_capacity(config.prompts * config.k);
    for _ in 0..config.prompts {
        for _ in 0..config.k - 1 {
            pools.push(candidate(&mut rng));
        }
        let mut degenerate: Vec<f64> = r_star
            .iter()
            .map(|&r| {
                let e: f64 = rng.sample(StandardNormal);
                -config.degenerate_pull * r + 0.3 * e
            })
            .collect();
        degenerate[s] = config.degenerate_spurious;
        pools.push(degenerate);
    }
    let pool_rewards = pools.iter().map(|x| dot(&r_star, x)).collect();

    let mut theta0: Vec<f64> = r_star
        .iter()
        .map(|&r| {
            let e: f64 = rng.sample(StandardNormal);
            config.init_alignment * r + config.init_jitter * e
        })
        .collect();
    theta0[s] = config.init_spurious;

    Ok(LabWorld {
        config,
        seed,
        r_star,
        spurious: s,
        pairs,
        pools,
        pool_rewards,
        theta0,
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `omega(theta)`: over all prompts, the mean of the true reward of the
/// pool candidates weighted by `softmax(theta . x)`.
pub fn true_reward(world: &LabWorld, theta: &[f64]) -> f64 {
    let k = world.config.k;
    let mut total = 0.0;
    let mut scores = vec![0.0; k];
    for p in 0..world.config.prompts {
        let pool = world.pool(p);
        for (s, x) in scores.iter_mut().zip(pool) {
            *s = dot(theta, x);
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut acc = 0.0;
        for (j, &s) in scores.iter().enumerate() {
            let w = (s - max).exp();
            z += w;
            acc += w * world.pool_rewards[p * k + j];
        }
        total += acc / z;
    }
    total / world.config.prompts as f64
}
