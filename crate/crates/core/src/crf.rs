//! Learnable camera response function bridging HDR renders and LDR
//! observations.
//!
//! N output levels are fixed uniformly in [0, 1]; each is paired with a
//! trainable HDR intensity (the control nodes). Inside [0, 1] the
//! response linearly interpolates node intensities to levels; outside it
//! leaks with a small slope so gradients never die:
//! `a*x` below zero and `-a/sqrt(x) + a + 1` above one.

use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{EvsplatError, Result};
use crate::img::ColorImage;

pub const DEFAULT_LEAK: f64 = 0.01;
pub const NODE_MIN_GAP: f64 = 1e-5;

/// Trainable piecewise-linear CRF shared across frames, applied
/// channel-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfNodes {
    /// Fixed output levels, uniform in [0, 1].
    pub levels: Vec<f64>,
    /// Trainable HDR intensities, strictly increasing within [0, 1].
    pub node_hdr: Vec<f64>,
    pub leak: f64,
}

/// Derivative information at one evaluation point.
#[derive(Debug, Clone, Copy)]
pub struct CrfDeriv {
    /// d(ldr)/d(hdr input).
    pub d_input: f64,
    /// Active segment and the derivative w.r.t. its two nodes, if the
    /// input fell on an interpolation segment.
    pub segment: Option<(usize, f64, f64)>,
}

impl CrfNodes {
    /// Identity initialization: node intensities equal the levels, so
    /// the CRF is a no-op on [0, 1].
    pub fn identity(n: usize) -> Self {
        assert!(n >= 2, "need at least two control nodes");
        let levels: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        Self {
            node_hdr: levels.clone(),
            levels,
            leak: DEFAULT_LEAK,
        }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// True when the node intensities still equal the identity mapping.
    pub fn is_identity(&self) -> bool {
        self.levels
            .iter()
            .zip(self.node_hdr.iter())
            .all(|(l, q)| (l - q).abs() < 1e-12)
    }

    /// Applies the response to one HDR value.
    pub fn apply(&self, x: f64) -> f64 {
        if x < 0.0 {
            return self.leak * x;
        }
        if x > 1.0 {
            return -self.leak / x.sqrt() + self.leak + 1.0;
        }
        self.interp(x)
    }

    fn interp(&self, x: f64) -> f64 {
        let q = &self.node_hdr;
        let n = q.len();
        if x <= q[0] {
            return self.levels[0];
        }
        if x >= q[n - 1] {
            return self.levels[n - 1];
        }
        let i = match q.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        };
        let dq = q[i + 1] - q[i];
        let t = (x - q[i]) / dq;
        self.levels[i] + t * (self.levels[i + 1] - self.levels[i])
    }

    /// Value and exact sub-gradients at `x`. At branch boundaries the
    /// interior-branch derivative is used.
    pub fn apply_with_deriv(&self, x: f64) -> (f64, CrfDeriv) {
        if x < 0.0 {
            return (
                self.leak * x,
                CrfDeriv {
                    d_input: self.leak,
                    segment: None,
                },
            );
        }
        if x > 1.0 {
            let v = -self.leak / x.sqrt() + self.leak + 1.0;
            return (
                v,
                CrfDeriv {
                    d_input: 0.5 * self.leak / (x * x.sqrt()),
                    segment: None,
                },
            );
        }
        let q = &self.node_hdr;
        let n = q.len();
        if x < q[0] || x > q[n - 1] {
            // Clamped interpolation region: flat.
            return (
                self.interp(x),
                CrfDeriv {
                    d_input: 0.0,
                    segment: None,
                },
            );
        }
        let i = match q.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        };
        let dq = q[i + 1] - q[i];
        let dl = self.levels[i + 1] - self.levels[i];
        let value = self.levels[i] + (x - q[i]) / dq * dl;
        let d_qi = dl * (x - q[i + 1]) / (dq * dq);
        let d_qi1 = -dl * (x - q[i]) / (dq * dq);
        (
            value,
            CrfDeriv {
                d_input: dl / dq,
                segment: Some((i, d_qi, d_qi1)),
            },
        )
    }

    /// Applies the response channel-wise to an HDR image.
    pub fn apply_image(&self, hdr: &ColorImage) -> ColorImage {
        let mut out = hdr.clone();
        for px in out.data.iter_mut() {
            for c in 0..3 {
                px[c] = self.apply(px[c]);
            }
        }
        out
    }

    /// Projects node intensities back to a strictly increasing sequence
    /// in [0, 1] with a minimum gap. Sorting first keeps the projection
    /// stable under large optimizer steps.
    pub fn project_monotone(&mut self) {
        for q in self.node_hdr.iter_mut() {
            *q = q.clamp(0.0, 1.0);
        }
        self.node_hdr.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = self.node_hdr.len();
        for i in 1..n {
            if self.node_hdr[i] < self.node_hdr[i - 1] + NODE_MIN_GAP {
                self.node_hdr[i] = self.node_hdr[i - 1] + NODE_MIN_GAP;
            }
        }
        if self.node_hdr[n - 1] > 1.0 {
            self.node_hdr[n - 1] = 1.0;
            for i in (0..n - 1).rev() {
                if self.node_hdr[i] > self.node_hdr[i + 1] - NODE_MIN_GAP {
                    self.node_hdr[i] = self.node_hdr[i + 1] - NODE_MIN_GAP;
                }
            }
        }
        debug_assert!(self.node_hdr[0] >= 0.0);
    }

    /// Checkpoint: `crf v1 N` header, then one `level node_hdr` pair per
    /// line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("crf v1 {}\n", self.len());
        for (l, q) in self.levels.iter().zip(self.node_hdr.iter()) {
            out.push_str(&format!("{l} {q}\n"));
        }
        std::fs::write(path, out).map_err(|e| EvsplatError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| EvsplatError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "empty CRF checkpoint".into(),
            })?
            .map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "crf" || parts[1] != "v1" {
            return Err(EvsplatError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("bad header {header:?}"),
            });
        }
        let n: usize = parts[2].parse().map_err(|_| EvsplatError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "bad node count".into(),
        })?;
        let mut levels = Vec::with_capacity(n);
        let mut node_hdr = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| EvsplatError::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    msg: e.to_string(),
                })?;
            if vals.len() != 2 {
                return Err(EvsplatError::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    msg: format!("expected 2 values, got {}", vals.len()),
                });
            }
            levels.push(vals[0]);
            node_hdr.push(vals[1]);
        }
        if levels.len() != n {
            return Err(EvsplatError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: format!("header count {n} != rows {}", levels.len()),
            });
        }
        Ok(Self {
            levels,
            node_hdr,
            leak: DEFAULT_LEAK,
        })
    }
}
