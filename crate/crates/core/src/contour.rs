//! Marching-squares iso-lines on a rectilinear grid.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub level: f64,
    /// Each polyline is a list of `(x, y)` points; closed loops repeat
    /// their first point at the end.
    pub polylines: Vec<Vec<[f64; 2]>>,
}

/// Identifies a grid edge: `(horizontal?, row, col)` of its lower corner.
type EdgeId = (bool, usize, usize);

/// Extracts the `level` set of `z`, given row-major as `z[r][c]` sampled at
/// `(xs[c], ys[r])`, with linear interpolation along cell edges.
pub fn contour(xs: &[f64], ys: &[f64], z: &[Vec<f64>], level: f64) -> Result<Contour> {
    if z.len() != ys.len() || z.iter().any(|row| row.len() != xs.len()) {
        return Err(Error::shape("contour grid does not match its axes"));
    }
    let above = |r: usize, c: usize| z[r][c] >= level;
    let point = |id: EdgeId| -> [f64; 2] {
        let (horizontal, r, c) = id;
        let (r2, c2) = if horizontal { (r, c + 1) } else { (r + 1, c) };
        let (a, b) = (z[r][c], z[r2][c2]);
        let t = if a == b { 0.5 } else { (level - a) / (b - a) };
        [xs[c] + t * (xs[c2] - xs[c]), ys[r] + t * (ys[r2] - ys[r])]
    };
    let mut segments: Vec<(EdgeId, EdgeId)> = Vec::new();
    for r in 0..ys.len().saturating_sub(1) {
        for c in 0..xs.len().saturating_sub(1) {
            // corners counter-clockwise from (r, c)
            let bits = (above(r, c) as u8)
                | (above(r, c + 1) as u8) << 1
                | (above(r + 1, c + 1) as u8) << 2
                | (above(r + 1, c) as u8) << 3;
            let bottom = (true, r, c);
            let right = (false, r, c + 1);
            let top = (true, r + 1, c);
            let left = (false, r, c);
            let center_above = 0.25 * (z[r][c] + z[r][c + 1] + z[r + 1][c] + z[r + 1][c + 1]) >= level;
            match bits {
                0 | 15 => {}
                1 | 14 => segments.push((left, bottom)),
                2 | 13 => segments.push((bottom, right)),
                3 | 12 => segments.push((left, right)),
                4 | 11 => segments.push((right, top)),
                6 | 9 => segments.push((bottom, top)),
                7 | 8 => segments.push((left, top)),
                5 => {
                    if center_above {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    } else {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    }
                }
                10 => {
                    if center_above {
                        segments.push((left, bottom));
                        segments.push((right, top));
                    } else {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    let chains = chain(&segments);
    Ok(Contour {
        level,
        polylines: chains
            .into_iter()
            .map(|ids| ids.into_iter().map(point).collect())
            .collect(),
    })
}

/// Joins segments that share a grid edge into maximal chains.
fn chain(segments: &[(EdgeId, EdgeId)]) -> Vec<Vec<EdgeId>> {
    let mut at: HashMap<EdgeId, Vec<usize>> = HashMap::new();
    for (k, &(a, b)) in segments.iter().enumerate() {
        at.entry(a).or_default().push(k);
        at.entry(b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut out = Vec::new();
    let next = |from: EdgeId, used: &[bool]| at[&from].iter().copied().find(|&k| !used[k]);
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segments[start];
        let mut line = vec![a, b];
        while let Some(k) = next(*line.last().expect("non-empty"), &used) {
            used[k] = true;
            let (p, q) = segments[k];
            line.push(if p == *line.last().expect("non-empty") { q } else { p });
        }
        while let Some(k) = next(line[0], &used) {
            used[k] = true;
            let (p, q) = segments[k];
            line.insert(0, if p == line[0] { q } else { p });
        }
        out.push(line);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertical_line_of_linear_field() {
        let xs: Vec<f64> = (0..6).map(|i| i as f64 * 0.04).collect();
        let ys = vec![0.0, 1.0, 2.0];
        let z: Vec<Vec<f64>> = ys.iter().map(|_| xs.clone()).collect();
        let c = contour(&xs, &ys, &z, 0.07).unwrap();
        assert_eq!(c.polylines.len(), 1);
        assert_eq!(c.polylines[0].len(), 3);
        for p in &c.polylines[0] {
            assert!((p[0] - 0.07).abs() < 1e-15);
        }
    }

    #[test]
    fn circle_closes() {
        let xs: Vec<f64> = (0..41).map(|i| -1.0 + i as f64 * 0.05).collect();
        let z: Vec<Vec<f64>> = xs
            .iter()
            .map(|&y| xs.iter().map(|&x| x * x + y * y).collect())
            .collect();
        let c = contour(&xs, &xs, &z, 0.25).unwrap();
        assert_eq!(c.polylines.len(), 1);
        let line = &c.polylines[0];
        assert_eq!(line.first(), line.last());
    }

    #[test]
    fn level_outside_range_is_empty() {
        let z = vec![vec![0.0, 1.0], vec![1.0, 2.0]];
        assert!(contour(&[0.0, 1.0], &[0.0, 1.0], &z, 5.0).unwrap().polylines.is_empty());
    }
}
