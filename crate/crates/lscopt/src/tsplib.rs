//! TSPLIB instance parsing (symmetric EUC_2D instances with a
//! NODE_COORD_SECTION).
//!
//! Coordinates are min-max scaled into `[0,1]^2` using the joint min/max over
//! both axes, which preserves the aspect ratio so all distances shrink by the
//! same factor. The complete Euclidean weight matrix is computed from the
//! scaled coordinates and then sparsified to `min(50, n-1)` nearest neighbors.

use crate::error::{Error, Result};
use crate::gen::knn_sparsify;
use crate::graph::Graph;

/// Neighbor count used for TSPLIB instances.
pub const TSPLIB_KNN: usize = 50;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parses a TSPLIB-format text into a [`Graph`].
pub fn parse_tsplib(text: &str) -> Result<Graph> {
    let mut dimension: Option<usize> = None;
    let mut edge_weight_type: Option<String> = None;
    let mut problem_type: Option<String> = None;
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut in_coords = false;
    let mut coord_section_seen = false;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if in_coords {
            if line == "EOF" {
                in_coords = false;
                continue;
            }
            // A new section keyword also ends the coordinate list.
            if line.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
                && line.split_whitespace().count() == 1
            {
                in_coords = false;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(lineno, format!("expected 'index x y', got '{line}'")));
            }
            let x: f64 = fields[1]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad x coordinate '{}'", fields[1])))?;
            let y: f64 = fields[2]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad y coordinate '{}'", fields[2])))?;
            coords.push((x, y));
            continue;
        }
        if line == "NODE_COORD_SECTION" {
            in_coords = true;
            coord_section_seen = true;
            continue;
        }
        if line == "EOF" {
            break;
        }
        if let Some((key, value)) = line.split_once(':') {
            let key = key.trim();
            let value = value.trim();
            match key {
                "DIMENSION" => {
                    dimension = Some(value.parse().map_err(|_| {
                        parse_err(lineno, format!("bad DIMENSION value '{value}'"))
                    })?);
                }
                "EDGE_WEIGHT_TYPE" => edge_weight_type = Some(value.to_string()),
                "TYPE" => problem_type = Some(value.to_string()),
                _ => {} // NAME, COMMENT, and friends are informational
            }
        }
        // Bare keywords for other sections (DISPLAY_DATA_SECTION etc.) are
        // skipped; only the coordinate section is interpreted.
    }

    if !coord_section_seen {
        return Err(parse_err(0, "missing NODE_COORD_SECTION"));
    }
    if let Some(t) = &problem_type {
        if t != "TSP" {
            return Err(parse_err(0, format!("unsupported TYPE '{t}', expected TSP")));
        }
    }
    match edge_weight_type.as_deref() {
        Some("EUC_2D") => {}
        Some(other) => {
            return Err(parse_err(0, format!("unsupported EDGE_WEIGHT_TYPE '{other}', expected EUC_2D")))
        }
        None => return Err(parse_err(0, "missing EDGE_WEIGHT_TYPE")),
    }
    let n = dimension.ok_or_else(|| parse_err(0, "missing DIMENSION"))?;
    if coords.len() != n {
        return Err(parse_err(
            0,
            format!("DIMENSION is {n} but {} coordinate lines were read", coords.len()),
        ));
    }
    if n == 0 {
        return Err(parse_err(0, "DIMENSION must be >= 1"));
    }

    let scaled = scale_unit_square(&coords);
    let g = Graph::from_coords(n, 2, scaled)?;
    Ok(knn_sparsify(&g, TSPLIB_KNN.min(n.saturating_sub(1)).max(1)))
}

/// Joint min-max scaling of 2-D points into the unit square.
fn scale_unit_square(coords: &[(f64, f64)]) -> Vec<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &(x, y) in coords {
        lo = lo.min(x).min(y);
        hi = hi.max(x).max(y);
    }
    let range = hi - lo;
    let mut out = Vec::with_capacity(coords.len() * 2);
    for &(x, y) in coords {
        if range > 0.0 {
            out.push((x - lo) / range);
            out.push((y - lo) / range);
        } else {
            out.push(0.0);
            out.push(0.0);
        }
    }
    out
}
