//! Plain-text keypoint files:
//!
//! ```text
//! version: 1
//! n_points: 20
//! {
//! 159.128 108.541
//! ...
//! }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse_pts(text: &str, path: &Path) -> Result<Vec<(f64, f64)>> {
    let err = |line: usize, m: String| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {}: {m}", line + 1),
    };
    let mut declared = None;
    let mut points = Vec::new();
    let mut in_body = false;
    let mut closed = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || closed {
            continue;
        }
        if !in_body {
            if line == "{" {
                in_body = true;
            } else if let Some(n) = line.strip_prefix("n_points:") {
                declared = Some(
                    n.trim()
                        .parse::<usize>()
                        .map_err(|_| err(i, format!("bad point count {:?}", n.trim())))?,
                );
            }
            continue;
        }
        if line == "}" {
            closed = true;
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(x), Some(y), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(err(i, format!("expected \"x y\", got {line:?}")));
        };
        let parse = |v: &str| v.parse::<f64>().ok().filter(|f| f.is_finite());
        match (parse(x), parse(y)) {
            (Some(x), Some(y)) => points.push((x, y)),
            _ => return Err(err(i, format!("non-numeric coordinates {line:?}"))),
        }
    }
    if !closed {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: "missing point block".into(),
        });
    }
    if let Some(n) = declared {
        if n != points.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("header declares {n} points, found {}", points.len()),
            });
        }
    }
    Ok(points)
}

pub fn read_pts(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pts(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_block() {
        let text = "version: 1\nn_points: 2\n{\n1.5 2\n 3 4.25 \n}\n";
        assert_eq!(parse_pts(text, Path::new("a.pts")).unwrap(), vec![(1.5, 2.0), (3.0, 4.25)]);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let text = "n_points: 3\n{\n1 2\n}\n";
        assert!(parse_pts(text, Path::new("a.pts")).is_err());
    }

    #[test]
    fn garbage_is_an_error() {
        assert!(parse_pts("{\n1 two\n}", Path::new("a.pts")).is_err());
        assert!(parse_pts("1 2\n", Path::new("a.pts")).is_err());
    }
}
