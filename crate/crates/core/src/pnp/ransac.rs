use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec2, Vec3};

use super::{epnp, refine_lm, reprojection_error};

const SAMPLE_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RansacParams {
    /// Inlier reprojection threshold in pixels.
    pub theta_re: f64,
    pub max_iters: usize,
    /// Early-exit probability of having drawn an all-inlier sample.
    pub confidence: f64,
    pub seed: u64,
    /// RNG stream, e.g. the detection index.
    pub stream: u64,
    /// Restricts sampling to the first `n` correspondences.
    pub sample_limit: Option<usize>,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            theta_re: 3.0,
            max_iters: 300,
            confidence: 0.99,
            seed: 0,
            stream: 0,
            sample_limit: None,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_re > 0.0) {
            return Err(Error::Config("theta_re must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("RANSAC needs at least one iteration".into()));
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return Err(Error::Config("confidence must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: Pose,
    /// Indices with reprojection error below the threshold under `pose`.
    pub inliers: Vec<usize>,
    /// Mean reprojection error over the inliers.
    pub mean_reproj_error: f64,
    pub iterations: usize,
}

struct Scored {
    pose: Pose,
    inliers: Vec<usize>,
    mean_err: f64,
}

fn score(pose: Pose, points: &[Vec3], pixels: &[Vec2], k: &CameraIntrinsics, theta: f64) -> Scored {
    let mut inliers = Vec::new();
    let mut sum = 0.0;
    for (i, (p, u)) in points.iter().zip(pixels).enumerate() {
        let e = reprojection_error(&pose, p, u, k);
        if e < theta {
            inliers.push(i);
            sum += e;
        }
    }
    let mean_err = if inliers.is_empty() {
        f64::INFINITY
    } else {
        sum / inliers.len() as f64
    };
    Scored {
        pose,
        inliers,
        mean_err,
    }
}

fn better(a: &Scored, b: &Scored) -> bool {
    a.inliers.len() > b.inliers.len()
        || (a.inliers.len() == b.inliers.len() && a.mean_err < b.mean_err)
}

fn subset<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

pub fn solve_pnp_ransac(
    points: &[Vec3],
    pixels: &[Vec2],
    k: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<RansacResult> {
    params.validate()?;
    let n = points.len();
    if n != pixels.len() {
        return Err(Error::Input("points and pixels differ in length".into()));
    }
    if n < SAMPLE_SIZE {
        return Err(Error::InsufficientCorrespondences { found: n });
    }
    let pool = params.sample_limit.unwrap_or(n).min(n);
    if pool < SAMPLE_SIZE {
        return Err(Error::InsufficientCorrespondences { found: pool });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(params.stream);

    let mut best: Option<Scored> = None;
    let mut iterations = 0;
    let mut needed = params.max_iters;
    while iterations < needed.min(params.max_iters) {
        iterations += 1;
        let sample = rand::seq::index::sample(&mut rng, pool, SAMPLE_SIZE).into_vec();
        let Ok(pose) = epnp(&subset(points, &sample), &subset(pixels, &sample), k) else {
            continue;
        };
        let s = score(pose, points, pixels, k, params.theta_re);
        // Strictly better only, so ties keep the earlier iteration.
        if best.as_ref().is_none_or(|b| better(&s, b)) {
            let pool_inliers = s.inliers.iter().filter(|&&i| i < pool).count();
            best = Some(s);
            needed = iterations_needed(pool_inliers, pool, params.confidence);
        }
    }

    let best = match best {
        Some(b) if b.inliers.len() >= SAMPLE_SIZE => b,
        _ => {
            return Err(Error::PoseFailure(
                "no RANSAC hypothesis reached 4 inliers".into(),
            ))
        }
    };

    let refined = refine_on_inliers(&best, points, pixels, k, params.theta_re);
    let chosen = match refined {
        Some(r) if !better(&best, &r) => r,
        _ => best,
    };
    Ok(RansacResult {
        pose: chosen.pose,
        mean_reproj_error: chosen.mean_err,
        inliers: chosen.inliers,
        iterations,
    })
}

fn refine_on_inliers(
    hyp: &Scored,
    points: &[Vec3],
    pixels: &[Vec2],
    k: &CameraIntrinsics,
    theta: f64,
) -> Option<Scored> {
    let p = subset(points, &hyp.inliers);
    let u = subset(pixels, &hyp.inliers);
    let start = epnp(&p, &u, k).unwrap_or(hyp.pose);
    let first = score(refine_lm(&start, &p, &u, k), points, pixels, k, theta);
    if first.inliers.len() < SAMPLE_SIZE {
        return None;
    }
    let p = subset(points, &first.inliers);
    let u = subset(pixels, &first.inliers);
    let second = score(refine_lm(&first.pose, &p, &u, k), points, pixels, k, theta);
    if better(&first, &second) {
        Some(first)
    } else {
        Some(second)
    }
}

fn iterations_needed(inliers: usize, total: usize, confidence: f64) -> usize {
    if confidence >= 1.0 {
        return usize::MAX;
    }
    let w = inliers as f64 / total as f64;
    let p_good = w.powi(SAMPLE_SIZE as i32);
    if p_good >= 1.0 {
        return 0;
    }
    if p_good <= 0.0 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        n.ceil().max(0.0) as usize
    } else {
        usize::MAX
    }
}
