//! L∞-bounded white-box attacks on a surrogate model, used in the
//! preparation phase to generate the perturbations that patches are
//! harvested from.
//!
//! Both backends maximize the margin loss, start from the clean image, keep
//! every iterate inside the ε-ball intersected with the `[0,1]` pixel box,
//! and return the best iterate seen. `frank_wolfe_attack` follows the
//! classical conditional-gradient schedule γ_k = 2/(k+2); `pgd_attack` takes
//! fixed sign-gradient steps with projection. On a linear model both land in
//! the same corner of the feasible set.

use crate::nnet::{Image, LossKind, Model, NnetError};
use crate::util::sign0;

/// An additive perturbation for one image, with its L∞ budget and shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    pub epsilon: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Perturbation {
    pub fn zeros(shape: (usize, usize, usize), epsilon: f64) -> Self {
        let (channels, height, width) = shape;
        Perturbation {
            delta: vec![0.0; channels * height * width],
            epsilon,
            channels,
            height,
            width,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn linf_norm(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Check the two perturbation invariants against a base image:
    /// `‖δ‖∞ ≤ ε + 1e-12` and `x + δ ∈ [0, 1]` elementwise.
    pub fn satisfies_constraints(&self, x: &Image) -> bool {
        if x.shape() != self.shape() {
            return false;
        }
        self.delta
            .iter()
            .zip(&x.pixels)
            .all(|(&d, &p)| d.abs() <= self.epsilon + 1e-12 && (0.0..=1.0).contains(&(p + d)))
    }

    /// Apply to a base image, producing valid pixels.
    pub fn apply(&self, x: &Image) -> Result<Image, NnetError> {
        let pixels: Vec<f64> = x
            .pixels
            .iter()
            .zip(&self.delta)
            .map(|(&p, &d)| (p + d).clamp(0.0, 1.0))
            .collect();
        Image::new(self.channels, self.height, self.width, pixels, x.label)
    }
}

/// Clamp a delta coordinatewise into the ε-ball intersected with the box
/// `x + δ ∈ [0, 1]`. The upper bound `1 − x` rounds such that `x + δ` can
/// never exceed 1.0 in f64.
fn project(delta: &mut [f64], x: &[f64], epsilon: f64) {
    for (d, &p) in delta.iter_mut().zip(x) {
        *d = d.clamp(-epsilon, epsilon).clamp(-p, 1.0 - p);
    }
}

/// Evaluate margin and gradient at `x + δ`, tracking the best-margin delta.
fn best_of(
    model: &Model,
    x: &Image,
    y: usize,
    delta: &[f64],
    best: &mut (f64, Vec<f64>),
) -> Result<(f64, Vec<f64>), NnetError> {
    let adv = Image::new(
        x.channels,
        x.height,
        x.width,
        x.pixels
            .iter()
            .zip(delta)
            .map(|(&p, &d)| (p + d).clamp(0.0, 1.0))
            .collect(),
        x.label,
    )?;
    let (margin, grad) = model.loss_and_input_gradient(&adv, y, LossKind::Margin)?;
    if margin > best.0 {
        best.0 = margin;
        best.1 = delta.to_vec();
    }
    Ok((margin, grad))
}

/// Frank-Wolfe (conditional gradient) attack: the linear-maximization
/// oracle over the feasible set picks the corner
/// `s = clip(x + ε·sign(∇ℓ), 0, 1)` and the iterate moves by
/// `x_{k+1} = x_k + γ_k (s_k − x_k)` with γ_k = 2/(k+2). Returns the
/// best-margin iterate.
pub fn frank_wolfe_attack(
    model: &Model,
    x: &Image,
    y: usize,
    epsilon: f64,
    iters: usize,
) -> Result<Perturbation, NnetError> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(NnetError::InvalidInput(
            "epsilon must be positive".to_string(),
        ));
    }
    if iters == 0 {
        return Err(NnetError::InvalidInput(
            "need at least one iteration".to_string(),
        ));
    }
    let n = x.pixels.len();
    let mut delta = vec![0.0; n];
    let mut best = (f64::NEG_INFINITY, delta.clone());
    let (_, mut grad) = best_of(model, x, y, &delta, &mut best)?;
    for k in 0..iters {
        let gamma = 2.0 / (k as f64 + 2.0);
        for i in 0..n {
            let corner = (x.pixels[i] + epsilon * sign0(grad[i])).clamp(0.0, 1.0);
            // Move in image space toward the corner; expressed on the delta.
            let target = corner - x.pixels[i];
            delta[i] += gamma * (target - delta[i]);
        }
        // Convex combinations stay feasible; projection only trims the
        // last-bit rounding so downstream invariants hold exactly.
        project(&mut delta, &x.pixels, epsilon);
        let (_, g) = best_of(model, x, y, &delta, &mut best)?;
        grad = g;
    }
    Ok(Perturbation {
        delta: best.1,
        epsilon,
        channels: x.channels,
        height: x.height,
        width: x.width,
    })
}

/// Projected sign-gradient ascent on the margin loss with a fixed step,
/// projected onto the ε-ball and the pixel box each iteration. Returns the
/// best-margin iterate.
pub fn pgd_attack(
    model: &Model,
    x: &Image,
    y: usize,
    epsilon: f64,
    iters: usize,
    step: f64,
) -> Result<Perturbation, NnetError> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(NnetError::InvalidInput(
            "epsilon must be positive".to_string(),
        ));
    }
    if iters == 0 {
        return Err(NnetError::InvalidInput(
            "need at least one iteration".to_string(),
        ));
    }
    if step < 0.0 || !step.is_finite() {
        return Err(NnetError::InvalidInput(
            "step must be non-negative".to_string(),
        ));
    }
    let n = x.pixels.len();
    let mut delta = vec![0.0; n];
    let mut best = (f64::NEG_INFINITY, delta.clone());
    let (_, mut grad) = best_of(model, x, y, &delta, &mut best)?;
    for _ in 0..iters {
        for i in 0..n {
            delta[i] += step * sign0(grad[i]);
        }
        project(&mut delta, &x.pixels, epsilon);
        let (_, g) = best_of(model, x, y, &delta, &mut best)?;
        grad = g;
    }
    Ok(Perturbation {
        delta: best.1,
        epsilon,
        channels: x.channels,
        height: x.height,
        width: x.width,
    })
}
