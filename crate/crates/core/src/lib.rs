//! Query-efficient black-box L∞ adversarial attacks driven by transfer priors.
//!
//! The pipeline has two halves. In the preparation half, a white-box attack
//! ([`whitebox`]) on a fully accessible surrogate model produces bounded
//! perturbations; every small square patch of those perturbations feeds a
//! streaming second-moment accumulator, and an eigendecomposition of the
//! accumulated matrix yields an orthonormal set of *eigenpatches* together
//! with the energy each one captures ([`basis`]). In the attack half, a
//! random-search loop ([`attack`]) repeatedly samples an eigenpatch with
//! probability proportional to its energy, tiles or crops it, scales it to
//! the ε-ball corners, and greedily keeps any placement that increases the
//! victim's margin loss — using nothing but logit queries ([`oracle`]).
//!
//! [`analysis`] adds the bookkeeping around that: attack-success-rate and
//! query statistics, plus pairwise cosine-similarity grids that show how
//! well eigenpatch bases transfer between independently trained models.
//! [`nnet`] and [`data`] provide the small self-trained classifiers and
//! datasets everything runs against, and [`cli`] wires the stages into a
//! command-line front end.

pub mod analysis;
pub mod attack;
pub mod basis;
pub mod cli;
pub mod data;
pub mod linalg;
pub mod nnet;
pub mod oracle;
pub mod whitebox;

pub(crate) mod util;
