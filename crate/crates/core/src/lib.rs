//! Semi-supervised underwater image restoration: a mean-teacher trainer with a
//! quality-scored bank of pseudo labels, contrastive regularization, the
//! two-branch restoration network and the no-reference metric tooling used to
//! pick the bank's scorer.

pub mod imaging;
pub mod checkpoint;
pub mod model;
pub mod aimnet;
pub mod features;
pub mod iqa;
pub mod bank;
pub mod losses;
pub mod optim;
pub mod trainer;
pub mod eval;
pub mod plot;
