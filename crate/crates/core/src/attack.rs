//! The random-search attack engine: stripe initialization, energy-weighted
//! eigenpatch sampling, tiling/cropping, sign-scaled placement, greedy
//! acceptance, and tiling halving on "hopeless" stalls — plus a square
//! baseline that runs the same harness with homogeneously colored squares.
//!
//! One run owns its oracle and seed exclusively and executes sequentially,
//! so records are bit-reproducible. Every image gets its own RNG stream
//! derived from the run seed, which keeps per-image draw sequences
//! independent of which other images are still active.

use std::fs::OpenOptions;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, EnergyBasis};
use crate::nnet::Image;
use crate::oracle::{margin_loss, LogitModel, OracleError, QueryOracle};
use crate::util::sign0;
use crate::whitebox::Perturbation;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// When to consider the current tiling size stalled.
///
/// `Batch` fires after `tau` consecutive steps in which no active image
/// improved. `Probabilistic` decouples images entirely: an image's tiling
/// halves after [`PROB_STREAK`] consecutive non-improving steps of its own,
/// the point at which the per-step advance probability is below
/// [`PROB_ADVANCE`] with confidence [`PROB_CONFIDENCE`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HopelessStrategy {
    Batch { tau: u32 },
    Probabilistic,
}

/// Advance-probability bound inferred by the probabilistic strategy.
pub const PROB_ADVANCE: f64 = 0.15;
/// Confidence level of that inference.
pub const PROB_CONFIDENCE: f64 = 0.90;
/// Failure streak after which the inference holds: (1 − 0.15)^15 < 0.10.
pub const PROB_STREAK: u32 = 15;

impl std::fmt::Display for HopelessStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HopelessStrategy::Batch { tau } => write!(f, "batch:{tau}"),
            HopelessStrategy::Probabilistic => write!(f, "prob"),
        }
    }
}

/// Decide whether the tiling factor should halve.
///
/// `improved` holds this step's per-image improvement flags (active images
/// only); `fail_streak` is the consecutive-failure count *including* this
/// step. Any improvement vetoes the decision and resets the streak.
pub fn hopeless_fired(strategy: &HopelessStrategy, improved: &[bool], fail_streak: u32) -> bool {
    if improved.iter().any(|&b| b) {
        return false;
    }
    match strategy {
        HopelessStrategy::Batch { tau } => fail_streak >= *tau,
        HopelessStrategy::Probabilistic => fail_streak >= PROB_STREAK,
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Per-image query budget.
    pub max_queries: u64,
    /// Patch side for the tiling schedule (for the energy attack this must
    /// match the basis).
    pub patch_side: usize,
    pub strategy: HopelessStrategy,
}

impl AttackConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(AttackError::InvalidConfig(
                "epsilon must be positive".to_string(),
            ));
        }
        if self.max_queries < 1 {
            return Err(AttackError::InvalidConfig(
                "max_queries must be >= 1".to_string(),
            ));
        }
        if self.patch_side < 3 {
            return Err(AttackError::InvalidConfig(
                "patch side must be >= 3 (the crop stage needs a 3x3 window)".to_string(),
            ));
        }
        if let HopelessStrategy::Batch { tau } = self.strategy {
            if tau < 1 {
                return Err(AttackError::InvalidConfig("tau must be >= 1".to_string()));
            }
        }
        Ok(())
    }
}

/// Per-image search state.
#[derive(Debug, Clone)]
pub struct AttackState {
    /// Current best perturbation, always inside the ε-ball and the box.
    pub delta: Vec<f64>,
    /// Best margin loss seen; non-decreasing over the run.
    pub best_loss: f64,
    /// Current tiling factor; non-increasing, floored at 0 (crop mode).
    pub tiling: usize,
    /// Consecutive non-improving steps (probabilistic strategy).
    pub fail_streak: u32,
    pub queries_used: u64,
    pub success: bool,
}

/// Per-image outcome of a run. `loss_history` holds the best loss after
/// each of the image's queries (so it is non-decreasing by construction and
/// its length equals `queries`).
#[derive(Debug, Clone)]
pub struct AttackRecord {
    pub image_id: usize,
    pub success: bool,
    pub queries: u64,
    pub final_margin: f64,
    pub loss_history: Vec<f64>,
}

/// One JSONL line of the results stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub image_id: usize,
    pub seed: u64,
    pub success: bool,
    pub queries: u64,
    pub final_margin: f64,
    pub epsilon: f64,
    pub strategy: String,
    pub basis_tag: String,
}

impl RunRecord {
    pub fn from_attack(
        rec: &AttackRecord,
        seed: u64,
        cfg: &AttackConfig,
        basis_tag: &str,
    ) -> RunRecord {
        RunRecord {
            image_id: rec.image_id,
            seed,
            success: rec.success,
            queries: rec.queries,
            final_margin: rec.final_margin,
            epsilon: cfg.epsilon,
            strategy: cfg.strategy.to_string(),
            basis_tag: basis_tag.to_string(),
        }
    }
}

/// Append records to a JSONL file, one object per line.
pub fn append_records_jsonl<'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a RunRecord>,
) -> io::Result<()> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Indices of images that are neither successful nor out of budget.
pub fn filter_active(states: &[AttackState], max_queries: u64) -> Vec<usize> {
    states
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.success && s.queries_used < max_queries)
        .map(|(i, _)| i)
        .collect()
}

/// Vertical-stripe initialization: every 1-pixel column gets, per channel,
/// a value drawn uniformly from {−ε, +ε}, constant down the column. The
/// result is the raw stripe pattern; box clipping happens at application.
pub fn init_stripes<R: Rng + ?Sized>(
    shape: (usize, usize, usize),
    epsilon: f64,
    rng: &mut R,
) -> Perturbation {
    let (c, h, w) = shape;
    let mut delta = vec![0.0; c * h * w];
    for ch in 0..c {
        for x in 0..w {
            let v = if rng.random::<bool>() {
                epsilon
            } else {
                -epsilon
            };
            for y in 0..h {
                delta[ch * h * w + y * w + x] = v;
            }
        }
    }
    Perturbation {
        delta,
        epsilon,
        channels: c,
        height: h,
        width: w,
    }
}

/// Tile a flattened `c × s_p × s_p` patch `t` times on each side, producing
/// a flattened `c × t·s_p × t·s_p` block where `(y, x)` reads the patch at
/// `(y mod s_p, x mod s_p)`.
pub fn tile(v: &[f64], channels: usize, patch_side: usize, t: usize) -> Vec<f64> {
    assert!(
        t >= 1,
        "tile factor must be >= 1; use the crop path at t = 0"
    );
    assert_eq!(
        v.len(),
        channels * patch_side * patch_side,
        "patch length mismatch"
    );
    let side = t * patch_side;
    let mut out = vec![0.0; channels * side * side];
    for ch in 0..channels {
        for y in 0..side {
            for x in 0..side {
                out[ch * side * side + y * side + x] = v[ch * patch_side * patch_side
                    + (y % patch_side) * patch_side
                    + (x % patch_side)];
            }
        }
    }
    out
}

/// Uniformly random 3×3 spatial crop of a flattened `c × s_p × s_p` patch,
/// the same window across all channels.
pub fn crop3<R: Rng + ?Sized>(
    v: &[f64],
    channels: usize,
    patch_side: usize,
    rng: &mut R,
) -> Result<Vec<f64>, AttackError> {
    if patch_side < 3 {
        return Err(AttackError::InvalidConfig(format!(
            "cannot crop 3x3 from a {patch_side}x{patch_side} patch"
        )));
    }
    assert_eq!(
        v.len(),
        channels * patch_side * patch_side,
        "patch length mismatch"
    );
    let dy = rng.random_range(0..=patch_side - 3);
    let dx = rng.random_range(0..=patch_side - 3);
    let mut out = vec![0.0; channels * 9];
    for ch in 0..channels {
        for y in 0..3 {
            for x in 0..3 {
                out[ch * 9 + y * 3 + x] =
                    v[ch * patch_side * patch_side + (dy + y) * patch_side + (dx + x)];
            }
        }
    }
    Ok(out)
}

/// Replace a uniformly placed `side × side` region of `current` with the
/// prepared block (entries already in {−ε, 0, +ε}) and clamp the result
/// into the ε-ball intersected with the pixel box of `x`.
fn place_block<R: Rng + ?Sized>(
    current: &[f64],
    block: &[f64],
    channels: usize,
    side: usize,
    x: &Image,
    epsilon: f64,
    rng: &mut R,
) -> Vec<f64> {
    let (h, w) = (x.height, x.width);
    debug_assert!(side <= h && side <= w, "block exceeds image");
    let oy = rng.random_range(0..=h - side);
    let ox = rng.random_range(0..=w - side);
    let mut cand = current.to_vec();
    for ch in 0..channels {
        for y in 0..side {
            for xx in 0..side {
                let i = ch * h * w + (oy + y) * w + (ox + xx);
                let p = x.pixels[i];
                cand[i] = block[ch * side * side + y * side + xx]
                    .clamp(-epsilon, epsilon)
                    .clamp(-p, 1.0 - p);
            }
        }
    }
    cand
}

/// Build a candidate perturbation: one scalar sign `s ∈ {−1, +1}`, block
/// `P = ε · s · sign(V)`, placed at a uniformly random position and clipped
/// so `x + δ'` stays in `[0, 1]`.
pub fn propose<R: Rng + ?Sized>(
    current: &[f64],
    v_block: &[f64],
    channels: usize,
    block_side: usize,
    x: &Image,
    epsilon: f64,
    rng: &mut R,
) -> Vec<f64> {
    let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let block: Vec<f64> = v_block.iter().map(|&v| epsilon * s * sign0(v)).collect();
    place_block(current, &block, channels, block_side, x, epsilon, rng)
}

/// The energy attack: random search over sign-scaled eigenpatch tilings,
/// sampled by energy. Runs the whole batch against one oracle; per-image
/// budgets are `cfg.max_queries`, so the oracle must carry at least
/// `images.len() · max_queries` budget.
pub fn energy_attack<M: LogitModel>(
    oracle: &mut QueryOracle<M>,
    basis: &EnergyBasis,
    images: &[Image],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<AttackRecord>, AttackError> {
    cfg.validate()?;
    if basis.total_energy() <= 0.0 {
        return Err(AttackError::Basis(BasisError::DegenerateBasis));
    }
    if basis.patch_side < 3 {
        return Err(AttackError::InvalidConfig(
            "basis patch side must be >= 3".to_string(),
        ));
    }
    let s_p = basis.patch_side;
    let channels = basis.channels;
    run_search(
        oracle,
        images,
        cfg,
        seed,
        s_p,
        channels,
        |state, image, rng| {
            let v = basis.sample_patch(rng)?;
            let (block, side) = if state.tiling > 0 {
                (tile(&v, channels, s_p, state.tiling), state.tiling * s_p)
            } else {
                (crop3(&v, channels, s_p, rng)?, 3)
            };
            Ok(propose(
                &state.delta,
                &block,
                channels,
                side,
                image,
                cfg.epsilon,
                rng,
            ))
        },
    )
}

/// Square-style baseline: same harness, same tiling schedule, but each
/// candidate block is a homogeneously colored square — one value from
/// {−ε, +ε} per channel.
pub fn square_baseline<M: LogitModel>(
    oracle: &mut QueryOracle<M>,
    images: &[Image],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Vec<AttackRecord>, AttackError> {
    cfg.validate()?;
    let s_p = cfg.patch_side;
    let channels = images.first().map_or(1, |i| i.channels);
    run_search(
        oracle,
        images,
        cfg,
        seed,
        s_p,
        channels,
        |state, image, rng| {
            let side = if state.tiling > 0 {
                state.tiling * s_p
            } else {
                3
            };
            let mut block = vec![0.0; channels * side * side];
            for ch in 0..channels {
                let v = if rng.random::<bool>() {
                    cfg.epsilon
                } else {
                    -cfg.epsilon
                };
                block[ch * side * side..(ch + 1) * side * side].fill(v);
            }
            Ok(place_block(
                &state.delta,
                &block,
                channels,
                side,
                image,
                cfg.epsilon,
                rng,
            ))
        },
    )
}

fn run_search<M, F>(
    oracle: &mut QueryOracle<M>,
    images: &[Image],
    cfg: &AttackConfig,
    seed: u64,
    s_p: usize,
    channels: usize,
    mut make_candidate: F,
) -> Result<Vec<AttackRecord>, AttackError>
where
    M: LogitModel,
    F: FnMut(&AttackState, &Image, &mut ChaCha12Rng) -> Result<Vec<f64>, AttackError>,
{
    if images.is_empty() {
        return Err(AttackError::InvalidConfig(
            "no images to attack".to_string(),
        ));
    }
    let shape = images[0].shape();
    if images.iter().any(|i| i.shape() != shape) {
        return Err(AttackError::InvalidConfig(
            "all images in a batch must share one shape".to_string(),
        ));
    }
    let (c, h, w) = shape;
    if c != channels {
        return Err(AttackError::InvalidConfig(format!(
            "images have {c} channels, attack is configured for {channels}"
        )));
    }
    if h < 3 || w < 3 {
        return Err(AttackError::InvalidConfig(
            "images must be at least 3x3".to_string(),
        ));
    }
    let num_classes = oracle.num_classes();
    if images.iter().any(|i| i.label >= num_classes) {
        return Err(AttackError::InvalidConfig(
            "image label out of range for the victim".to_string(),
        ));
    }

    let t0 = h.min(w) / s_p;
    let mut master = ChaCha12Rng::seed_from_u64(seed);
    let mut rngs: Vec<ChaCha12Rng> = (0..images.len())
        .map(|_| ChaCha12Rng::seed_from_u64(master.random::<u64>()))
        .collect();

    // Stripe init, clipped per image, evaluated with one query per image.
    let mut states: Vec<AttackState> = Vec::with_capacity(images.len());
    for (img, rng) in images.iter().zip(&mut rngs) {
        let stripes = init_stripes(shape, cfg.epsilon, rng);
        let delta: Vec<f64> = stripes
            .delta
            .iter()
            .zip(&img.pixels)
            .map(|(&d, &p)| d.clamp(-p, 1.0 - p))
            .collect();
        states.push(AttackState {
            delta,
            best_loss: f64::NEG_INFINITY,
            tiling: t0,
            fail_streak: 0,
            queries_used: 0,
            success: false,
        });
    }
    let initial: Vec<Image> = states
        .iter()
        .zip(images)
        .map(|(s, img)| perturbed_image(img, &s.delta))
        .collect();
    let refs: Vec<&Image> = initial.iter().collect();
    let logits = oracle.query(&refs)?;
    let mut histories: Vec<Vec<f64>> = vec![Vec::new(); images.len()];
    for (i, (state, img)) in states.iter_mut().zip(images).enumerate() {
        let margin = margin_loss(&logits[i], img.label);
        state.best_loss = margin;
        state.queries_used = 1;
        state.success = margin >= 0.0;
        histories[i].push(margin);
    }

    search_loop(
        oracle,
        images,
        cfg,
        states,
        histories,
        rngs,
        &mut make_candidate,
    )
}

fn search_loop<M, F>(
    oracle: &mut QueryOracle<M>,
    images: &[Image],
    cfg: &AttackConfig,
    mut states: Vec<AttackState>,
    mut histories: Vec<Vec<f64>>,
    mut rngs: Vec<ChaCha12Rng>,
    make_candidate: &mut F,
) -> Result<Vec<AttackRecord>, AttackError>
where
    M: LogitModel,
    F: FnMut(&AttackState, &Image, &mut ChaCha12Rng) -> Result<Vec<f64>, AttackError>,
{
    let mut batch_streak: u32 = 0;
    loop {
        let active = filter_active(&states, cfg.max_queries);
        if active.is_empty() {
            break;
        }
        let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(active.len());
        for &i in &active {
            candidates.push(make_candidate(&states[i], &images[i], &mut rngs[i])?);
        }
        let cand_images: Vec<Image> = active
            .iter()
            .zip(&candidates)
            .map(|(&i, delta)| perturbed_image(&images[i], delta))
            .collect();
        let refs: Vec<&Image> = cand_images.iter().collect();
        let logits = oracle.query(&refs)?;

        let mut improved = vec![false; active.len()];
        for (k, &i) in active.iter().enumerate() {
            let state = &mut states[i];
            let margin = margin_loss(&logits[k], images[i].label);
            state.queries_used += 1;
            if margin > state.best_loss {
                state.best_loss = margin;
                state.delta = std::mem::take(&mut candidates[k]);
                improved[k] = true;
            }
            if margin >= 0.0 {
                state.success = true;
            }
            histories[i].push(state.best_loss);
        }

        match cfg.strategy {
            HopelessStrategy::Batch { .. } => {
                batch_streak = if improved.iter().any(|&b| b) {
                    0
                } else {
                    batch_streak + 1
                };
                if hopeless_fired(&cfg.strategy, &improved, batch_streak) {
                    for state in &mut states {
                        state.tiling /= 2;
                    }
                    batch_streak = 0;
                }
            }
            HopelessStrategy::Probabilistic => {
                for (k, &i) in active.iter().enumerate() {
                    let state = &mut states[i];
                    state.fail_streak = if improved[k] {
                        0
                    } else {
                        state.fail_streak + 1
                    };
                    if hopeless_fired(&cfg.strategy, &improved[k..=k], state.fail_streak) {
                        state.tiling /= 2;
                        state.fail_streak = 0;
                    }
                }
            }
        }
    }

    Ok(states
        .into_iter()
        .zip(histories)
        .enumerate()
        .map(|(i, (s, h))| AttackRecord {
            image_id: i,
            success: s.success,
            queries: s.queries_used,
            final_margin: s.best_loss,
            loss_history: h,
        })
        .collect())
}

fn perturbed_image(x: &Image, delta: &[f64]) -> Image {
    let pixels: Vec<f64> = x.pixels.iter().zip(delta).map(|(&p, &d)| p + d).collect();
    Image::new(x.channels, x.height, x.width, pixels, x.label)
        .expect("clamped deltas keep pixels in [0,1]")
}
