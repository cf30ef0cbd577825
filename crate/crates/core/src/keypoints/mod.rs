//! Keypoint detection on equalized range images, descriptor matching and
//! assembly of matched 3D point pairs.

pub mod matching;
pub mod mkp;
pub mod sift;

pub use matching::{match_descriptors, Match, MatchParams};
pub use mkp::{extract_mkps, Frame, MkpExtraction, MkpSet};
pub use sift::{detect_and_describe, DetectorParams, Keypoint};
