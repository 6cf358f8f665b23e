//! Plain-text LiDAR scans for `filter-demo`.
//!
//! One range per line, ordered from the leftmost beam (+135°) to the
//! rightmost (-135°), evenly spaced.
//! Blank lines and `#` comments are skipped. An optional `max_range <m>`
//! line overrides the configured sensor range.

use std::path::Path;

use racer::Error;

pub fn parse(text: &str, origin: &Path, default_max: f64) -> racer::Result<(Vec<f64>, f64)> {
    let mut ranges = Vec::new();
    let mut max_range = default_max;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::parse(origin, i + 1, msg);
        if let Some(rest) = line.strip_prefix("max_range") {
            max_range = rest
                .trim()
                .parse()
                .map_err(|_| err(format!("bad max_range value {:?}", rest.trim())))?;
            if !ranges.is_empty() {
                return Err(err("max_range must precede the ranges".into()));
            }
            continue;
        }
        let r: f64 = line.parse().map_err(|_| err(format!("expected a range, got {line:?}")))?;
        if !(r > 0.0 && r <= max_range) {
            return Err(err(format!("range {r} is outside (0, {max_range}]")));
        }
        ranges.push(r);
    }
    if ranges.is_empty() {
        return Err(Error::parse(origin, 0, "no ranges"));
    }
    Ok((ranges, max_range))
}

pub fn read(path: &Path, default_max: f64) -> racer::Result<(Vec<f64>, f64)> {
    let text = std::fs::read_to_string(path)?;
    parse(&text, path, default_max)
}
