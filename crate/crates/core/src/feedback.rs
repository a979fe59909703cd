//! User ratings and their mapping onto the canonical feedback range [-1, 1].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rating {
    Binary(BinaryRating),
    /// Scalar score in [0, 1].
    Scalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryRating {
    Like,
    Dislike,
}

impl Rating {
    pub const LIKE: Rating = Rating::Binary(BinaryRating::Like);
    pub const DISLIKE: Rating = Rating::Binary(BinaryRating::Dislike);

    pub fn is_like(&self) -> bool {
        matches!(self, Rating::Binary(BinaryRating::Like))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeedbackError {
    #[error("scalar rating {0} is outside [0, 1]")]
    ScalarOutOfRange(f64),
    #[error("rating scale maps [0, 1] outside [-1, 1]")]
    InvalidScale,
}

/// Affine map `slope * s + intercept` for scalar ratings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub slope: f64,
    pub intercept: f64,
}

impl Default for RatingScale {
    fn default() -> Self {
        Self {
            slope: 2.0,
            intercept: -1.0,
        }
    }
}

impl RatingScale {
    pub fn new(slope: f64, intercept: f64) -> Result<Self, FeedbackError> {
        let scale = Self { slope, intercept };
        let ends = [intercept, slope + intercept];
        if ends.iter().all(|e| (-1.0..=1.0).contains(e)) {
            Ok(scale)
        } else {
            Err(FeedbackError::InvalidScale)
        }
    }

    /// like -> 1, dislike -> -1, scalar -> affine map.
    pub fn map(&self, rating: Rating) -> Result<f64, FeedbackError> {
        match rating {
            Rating::Binary(BinaryRating::Like) => Ok(1.0),
            Rating::Binary(BinaryRating::Dislike) => Ok(-1.0),
            Rating::Scalar(s) if (0.0..=1.0).contains(&s) => {
                Ok((self.slope * s + self.intercept).clamp(-1.0, 1.0))
            }
            Rating::Scalar(s) => Err(FeedbackError::ScalarOutOfRange(s)),
        }
    }
}

/// Maps a rating with the default scale.
pub fn map_rating(rating: Rating) -> Result<f64, FeedbackError> {
    RatingScale::default().map(rating)
}
