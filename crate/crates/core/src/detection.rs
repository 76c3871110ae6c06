//! The detector/post-processing interface tuple and its JSON-lines encoding:
//! one object per line, `{"score":..,"box":[x0,y0,x1,y1],"occ":..,"cls":..}`.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoundingBox;

/// Class labels run from 1 to the number of classes.
pub type ClassLabel = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Objectness score in `[0, 1]`.
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Occlusion score in `[0, 1]`; higher means more in front.
    pub occ: f64,
    pub cls: ClassLabel,
}

impl Detection {
    pub fn new(score: f64, bbox: BoundingBox, occ: f64, cls: ClassLabel) -> Result<Self> {
        let d = Self {
            score,
            bbox,
            occ,
            cls,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) || !(0.0..=1.0).contains(&self.occ) {
            return Err(Error::Config(format!(
                "detection score {} / occ {} outside [0,1]",
                self.score, self.occ
            )));
        }
        Ok(())
    }
}

/// Orders by score descending; equal scores keep input order (stable sort),
/// so the lower index wins ties.
pub fn sort_by_score_desc(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
}

pub fn write_jsonl(dets: &[Detection], w: &mut impl Write) -> std::io::Result<()> {
    for d in dets {
        serde_json::to_writer(&mut *w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<detections>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line).map_err(|source| Error::Json {
            context: format!("detection line {}", lineno + 1),
            source,
        })?;
        d.validate()?;
        out.push(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let d = Detection::new(0.9, BoundingBox::new(1.0, 2.0, 3.0, 4.0).unwrap(), 0.5, 3).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"score":0.9,"box":[1.0,2.0,3.0,4.0],"occ":0.5,"cls":3}"#);
        let mut buf = Vec::new();
        write_jsonl(&[d, d], &mut buf).unwrap();
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, vec![d, d]);
    }

    #[test]
    fn rejects_bad_lines() {
        let bad = br#"{"score":0.9,"box":[3.0,2.0,1.0,4.0],"occ":0.5,"cls":3}"#;
        assert!(read_jsonl(&bad[..]).is_err());
        let bad = br#"{"score":1.9,"box":[0.0,2.0,1.0,4.0],"occ":0.5,"cls":3}"#;
        assert!(read_jsonl(&bad[..]).is_err());
    }

    #[test]
    fn sort_is_stable_on_ties() {
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let mut v = vec![
            Detection::new(0.5, b, 0.0, 1).unwrap(),
            Detection::new(0.9, b, 0.0, 2).unwrap(),
            Detection::new(0.5, b, 0.0, 3).unwrap(),
        ];
        sort_by_score_desc(&mut v);
        assert_eq!(v.iter().map(|d| d.cls).collect::<Vec<_>>(), vec![2, 1, 3]);
    }
}
