//! Track files shipped with the crate.

use std::path::Path;

use super::track::TrackMap;
use crate::error::{Error, Result};

/// Tracks used to record demonstrations.
pub const TRAINING_TRACKS: [&str; 2] = ["oval", "s-curve"];

/// Held out from training and used for races.
pub const UNSEEN_TRACK: &str = "pinch-chicane";

const FILES: [(&str, &str); 3] = [
    ("oval", include_str!("../../tracks/oval.track")),
    ("s-curve", include_str!("../../tracks/s-curve.track")),
    ("pinch-chicane", include_str!("../../tracks/pinch-chicane.track")),
];

pub fn bundled_names() -> Vec<&'static str> {
    FILES.iter().map(|(n, _)| *n).collect()
}

pub fn bundled_track(name: &str) -> Result<TrackMap> {
    let (_, text) = FILES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown track `{name}` (bundled: {})", bundled_names().join(", "))))?;
    TrackMap::parse(text, Path::new(&format!("<bundled>/{name}.track")))
}

/// A bundled track name, or else a path to a track file.
pub fn resolve_track(spec: &str) -> Result<TrackMap> {
    if bundled_names().contains(&spec) {
        bundled_track(spec)
    } else if Path::new(spec).exists() {
        TrackMap::load(Path::new(spec))
    } else {
        Err(Error::Config(format!(
            "`{spec}` is neither a bundled track ({}) nor an existing file",
            bundled_names().join(", ")
        )))
    }
}
