use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{data_err, Error, Result};
use crate::nd::Tensor;

/// Ordered fixation points. Row order is temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeTrajectory {
    points: Vec<[f64; 2]>,
    extent: [f64; 2],
}

impl GazeTrajectory {
    /// Validates that the frame is positive and every point lies inside
    /// `[0, width] × [0, height]`.
    pub fn new(points: Vec<[f64; 2]>, extent: [f64; 2]) -> Result<Self> {
        if !(extent[0] > 0.0 && extent[1] > 0.0) || !extent.iter().all(|v| v.is_finite()) {
            return Err(data_err!("gaze extent {extent:?} must be positive"));
        }
        for (i, p) in points.iter().enumerate() {
            let inside = (0.0..=extent[0]).contains(&p[0]) && (0.0..=extent[1]).contains(&p[1]);
            if !inside {
                return Err(data_err!(
                    "gaze point {i} ({}, {}) lies outside the {}x{} frame",
                    p[0],
                    p[1],
                    extent[0],
                    extent[1]
                ));
            }
        }
        Ok(GazeTrajectory { points, extent })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn extent(&self) -> [f64; 2] {
        self.extent
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `L×2` tensor, one fixation per row.
    pub fn to_tensor(&self) -> Result<Tensor> {
        if self.points.is_empty() {
            return Err(data_err!("empty gaze trajectory"));
        }
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::new(&[self.points.len(), 2], data)
    }
}

/// Parses `x,y` rows. A leading `x,y` header is skipped; blank lines are ignored.
pub fn parse_gaze_csv(text: &str, path: &Path) -> Result<Vec<[f64; 2]>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if points.is_empty() && line.replace(' ', "").eq_ignore_ascii_case("x,y") {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(parse_err(format!(
                "expected exactly two coordinates, found {} fields",
                fields.len()
            )));
        }
        let mut p = [0.0; 2];
        for (slot, field) in p.iter_mut().zip(&fields) {
            *slot = field
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("{:?} is not a finite number", field.trim())))?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(data_err!("{} contains no gaze points", path.display()));
    }
    Ok(points)
}

/// Loads a gaze CSV whose coordinates live in a frame of size `extent`.
pub fn load_gaze_csv(path: impl AsRef<Path>, extent: [f64; 2]) -> Result<GazeTrajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GazeTrajectory::new(parse_gaze_csv(&text, path)?, extent)
}

/// Writes `x,y` with a header. Values use the shortest representation that
/// parses back to the same `f64`, so the round trip is exact.
pub fn write_gaze_csv(path: impl AsRef<Path>, gaze: &GazeTrajectory) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("x,y\n");
    for p in &gaze.points {
        writeln!(out, "{},{}", p[0], p[1]).expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rescales both axes linearly so the frame becomes `dst × dst`.
pub fn normalize_gaze(gaze: &GazeTrajectory, dst: f64) -> Result<GazeTrajectory> {
    let [w, h] = gaze.extent;
    if !(w > 0.0 && h > 0.0) {
        return Err(data_err!("cannot normalize gaze with extent {w}x{h}"));
    }
    if !(dst > 0.0 && dst.is_finite()) {
        return Err(data_err!("normalization target {dst} must be positive"));
    }
    let (sx, sy) = (dst / w, dst / h);
    let points = gaze
        .points
        .iter()
        .map(|p| [(p[0] * sx).min(dst), (p[1] * sy).min(dst)])
        .collect();
    Ok(GazeTrajectory {
        points,
        extent: [dst, dst],
    })
}

/// Truncates to the first `len` points or pads by repeating the last point.
pub fn fit_length(gaze: &GazeTrajectory, len: usize) -> Result<GazeTrajectory> {
    if len == 0 {
        return Err(data_err!("target trajectory length must be at least 1"));
    }
    let last = *gaze
        .points
        .last()
        .ok_or_else(|| data_err!("cannot fit an empty trajectory"))?;
    let mut points: Vec<[f64; 2]> = gaze.points.iter().take(len).copied().collect();
    points.resize(len, last);
    Ok(GazeTrajectory {
        points,
        extent: gaze.extent,
    })
}
