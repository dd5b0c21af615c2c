//! Reader for NTU RGB+D `.skeleton` text files.
//!
//! Layout: a frame-count line; per frame a body-count line; per body a
//! 10-field info line, a joint-count line, then one 12-field line per joint
//! whose first three fields are x, y, z.

use std::path::Path;

use crate::data::sequence::SkeletonSequence;
use crate::error::{Result, StfError};
use crate::tensor::Tensor;

pub const NTU_JOINTS: usize = 25;

struct Cursor<'a> {
    lines: std::iter::Filter<std::str::Lines<'a>, fn(&&str) -> bool>,
    frame: usize,
}

impl<'a> Cursor<'a> {
    fn next_fields(&mut self, what: &str) -> Result<Vec<&'a str>> {
        self.lines
            .next()
            .map(|l| l.split_whitespace().collect())
            .ok_or_else(|| StfError::Truncated {
                frame: self.frame,
                message: format!("missing {what}"),
            })
    }

    fn next_count(&mut self, what: &str) -> Result<usize> {
        let fields = self.next_fields(what)?;
        fields
            .first()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| StfError::Truncated {
                frame: self.frame,
                message: format!("malformed {what}"),
            })
    }
}

/// Parses the first listed body of every frame into a 4×T×25 sequence
/// (x, y, z, visibility). Frames without bodies are zero with visibility 0.
pub fn parse_ntu_skeleton_str(text: &str) -> Result<SkeletonSequence> {
    let mut cur = Cursor {
        lines: text.lines().filter(|l: &&str| !l.trim().is_empty()),
        frame: 0,
    };
    let frames = cur.next_count("frame count")?;
    if frames == 0 {
        return Err(StfError::DegenerateSequence("skeleton file has no frames".into()));
    }
    let mut data = Tensor::zeros(&[4, frames, NTU_JOINTS]);
    for t in 0..frames {
        cur.frame = t;
        let bodies = cur.next_count("body count")?;
        for b in 0..bodies {
            let info = cur.next_fields("body info line")?;
            if info.len() != 10 {
                return Err(StfError::Truncated {
                    frame: t,
                    message: format!("body info line has {} fields, expected 10", info.len()),
                });
            }
            let joints = cur.next_count("joint count")?;
            if joints != NTU_JOINTS {
                return Err(StfError::InvalidArgument(format!(
                    "frame {t}: joint count {joints}, expected {NTU_JOINTS}"
                )));
            }
            for v in 0..joints {
                let fields = cur.next_fields("joint line")?;
                if fields.len() != 12 {
                    return Err(StfError::Truncated {
                        frame: t,
                        message: format!("joint {v} line has {} fields, expected 12", fields.len()),
                    });
                }
                if b > 0 {
                    continue;
                }
                for c in 0..3 {
                    let x: f64 = fields[c].parse().map_err(|_| StfError::Truncated {
                        frame: t,
                        message: format!("joint {v}: non-numeric coordinate `{}`", fields[c]),
                    })?;
                    data.set(&[c, t, v], x);
                }
                data.set(&[3, t, v], 1.0);
            }
        }
    }
    SkeletonSequence::new(data, 0)
}

pub fn parse_ntu_skeleton(path: &Path) -> Result<SkeletonSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| StfError::io(path, e))?;
    Ok(parse_ntu_skeleton_str(&text)?.with_source(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    fn body(s: &mut String, seed: f64) {
        s.push_str("72057594037931101 0 1 1 1 1 0 0.1 0.2 2\n25\n");
        for v in 0..NTU_JOINTS {
            let _ = writeln!(
                s,
                "{} {} {} 250.1 180.2 1000.3 500.4 0.1 0.2 0.3 0.4 2",
                seed + v as f64,
                seed - v as f64,
                seed * 0.5 + v as f64 * 0.25
            );
        }
    }

    #[test]
    fn reads_handcrafted_file() {
        let mut s = String::from("2\n1\n");
        body(&mut s, 1.0);
        s.push_str("1\n");
        body(&mut s, 2.0);
        let seq = parse_ntu_skeleton_str(&s).unwrap();
        assert_eq!(seq.data.shape(), &[4, 2, 25]);
        assert_eq!(seq.data.at(&[0, 0, 3]), 4.0);
        assert_eq!(seq.data.at(&[1, 1, 3]), -1.0);
        assert_eq!(seq.data.at(&[2, 1, 4]), 2.0);
        assert_eq!(seq.visibility(1, 24), 1.0);
    }

    #[test]
    fn empty_frame_is_invisible() {
        let mut s = String::from("2\n0\n2\n");
        body(&mut s, 1.0);
        body(&mut s, 9.0);
        let seq = parse_ntu_skeleton_str(&s).unwrap();
        for v in 0..NTU_JOINTS {
            assert_eq!(seq.visibility(0, v), 0.0);
            assert_eq!(seq.data.at(&[0, 0, v]), 0.0);
        }
        // first body wins
        assert_eq!(seq.data.at(&[0, 1, 0]), 1.0);
    }

    #[test]
    fn truncation_reports_frame() {
        let mut s = String::from("3\n1\n");
        body(&mut s, 1.0);
        s.push_str("1\n");
        let mut partial = String::new();
        body(&mut partial, 2.0);
        s.extend(partial.lines().take(10).map(|l| format!("{l}\n")));
        match parse_ntu_skeleton_str(&s) {
            Err(StfError::Truncated { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn wrong_joint_count() {
        let s = "1\n1\n1 0 1 1 1 1 0 0.1 0.2 2\n24\n";
        assert!(parse_ntu_skeleton_str(s).is_err());
    }
}
