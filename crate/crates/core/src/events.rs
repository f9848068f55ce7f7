//! Event stream densification and the event / no-event losses.
//!
//! Raw events are aggregated per pixel and polarity over the exposure
//! sub-intervals into dense signed count maps. Predicted maps come from
//! log-luma differences of consecutive latent renders; the loss compares
//! the two on event-active pixels and penalizes predicted change on
//! event-silent pixels.

use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{EvsplatError, Result};
use crate::img::{ColorImage, ScalarImage};
use crate::imaging::luma;

/// One asynchronous brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Seconds; relative to the exposure start once ingested into a
    /// frame bundle, absolute in dataset files.
    pub t: f64,
    /// +1 or -1.
    pub polarity: i8,
}

/// Dense signed event counts over one sub-interval.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMap {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<i32>,
    /// Half-open interval (t0, t1] this map covers.
    pub t0: f64,
    pub t1: f64,
}

impl EventMap {
    pub fn zeros(width: usize, height: usize, t0: f64, t1: f64) -> Self {
        Self {
            width,
            height,
            counts: vec![0; width * height],
            t0,
            t1,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> i32 {
        self.counts[y * self.width + x]
    }
}

/// Event-model constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventParams {
    /// Contrast threshold theta > 0.
    pub theta: f64,
    /// Weight of the no-event loss.
    pub lambda_ne: f64,
    /// Floor added inside both logarithms.
    pub log_eps: f64,
}

impl Default for EventParams {
    fn default() -> Self {
        Self {
            theta: 0.25,
            lambda_ne: 0.4,
            log_eps: 1e-3,
        }
    }
}

/// Bins events into one map per sub-interval: event `e` lands in map `k`
/// iff `sub_times[k-1] < e.t <= sub_times[k]`. Returns the maps and the
/// count of events falling outside `(sub_times[0], sub_times[K]]`.
pub fn accumulate_events(
    events: &[Event],
    sub_times: &[f64],
    width: usize,
    height: usize,
) -> (Vec<EventMap>, usize) {
    let k = sub_times.len() - 1;
    let mut maps: Vec<EventMap> = (0..k)
        .map(|i| EventMap::zeros(width, height, sub_times[i], sub_times[i + 1]))
        .collect();
    let mut dropped = 0usize;
    for e in events {
        if e.t <= sub_times[0] || e.t > sub_times[k] {
            dropped += 1;
            continue;
        }
        // First boundary with sub_times[i] >= t gives the interval index.
        let idx = match sub_times[1..].binary_search_by(|v| v.partial_cmp(&e.t).unwrap()) {
            Ok(i) => i,
            Err(i) => i,
        };
        let map = &mut maps[idx.min(k - 1)];
        if (e.x as usize) < width && (e.y as usize) < height {
            map.counts[e.y as usize * width + e.x as usize] += e.polarity as i32;
        } else {
            dropped += 1;
        }
    }
    (maps, dropped)
}

/// Predicted event map: per-pixel log-luma difference between two
/// consecutive latent HDR renders.
pub fn render_event_map(
    latent_prev: &ColorImage,
    latent_cur: &ColorImage,
    log_eps: f64,
) -> Result<ScalarImage> {
    if !latent_prev.same_dims(latent_cur) {
        return Err(EvsplatError::DimensionMismatch {
            expected: format!("{}x{}", latent_prev.width, latent_prev.height),
            got: format!("{}x{}", latent_cur.width, latent_cur.height),
        });
    }
    let mut out = ScalarImage::new(latent_prev.width, latent_prev.height);
    for px in 0..out.data.len() {
        let lp = (luma(&latent_prev.data[px]) + log_eps).max(1e-12);
        let lc = (luma(&latent_cur.data[px]) + log_eps).max(1e-12);
        out.data[px] = lc.ln() - lp.ln();
    }
    Ok(out)
}

/// Event loss decomposition and its gradient w.r.t. the predicted maps.
#[derive(Debug, Clone)]
pub struct EventLoss {
    pub l_he: f64,
    pub l_ne: f64,
    /// l_he + lambda_ne * l_ne.
    pub l_e: f64,
    /// d(l_e)/d(pred_k), including the lambda_ne factor.
    pub grad_preds: Vec<ScalarImage>,
}

/// Compares accumulated and predicted maps. Active pixels (count != 0)
/// contribute `|theta * E - Ehat|` to the event loss, silent pixels
/// contribute `|Ehat|` to the no-event loss. Each per-interval sum is
/// normalized by the total pixel count (resolution independence), then
/// averaged over intervals, so the event term's weight scales with
/// event density: quantization-noise events on a nearly static frame
/// stay negligible against the photometric term, while dense genuine
/// event activity carries proportional weight.
pub fn event_loss(maps: &[EventMap], preds: &[ScalarImage], params: &EventParams) -> Result<EventLoss> {
    if maps.len() != preds.len() {
        return Err(EvsplatError::DimensionMismatch {
            expected: format!("{} event maps", maps.len()),
            got: format!("{} predictions", preds.len()),
        });
    }
    let k = maps.len();
    let mut l_he = 0.0;
    let mut l_ne = 0.0;
    let mut grad_preds = Vec::with_capacity(k);
    for (map, pred) in maps.iter().zip(preds.iter()) {
        if map.width != pred.width || map.height != pred.height {
            return Err(EvsplatError::DimensionMismatch {
                expected: format!("{}x{}", map.width, map.height),
                got: format!("{}x{}", pred.width, pred.height),
            });
        }
        let total = map.counts.len();
        let inv = 1.0 / (k as f64 * total as f64);
        let mut grad = ScalarImage::new(pred.width, pred.height);
        let mut he = 0.0;
        let mut ne = 0.0;
        for px in 0..total {
            let e = map.counts[px];
            let p = pred.data[px];
            if e != 0 {
                let r = params.theta * e as f64 - p;
                he += r.abs();
                // d|theta E - p|/dp = -sign(theta E - p)
                grad.data[px] = -sign(r) * inv;
            } else {
                ne += p.abs();
                grad.data[px] = params.lambda_ne * sign(p) * inv;
            }
        }
        l_he += he / total as f64;
        l_ne += ne / total as f64;
        grad_preds.push(grad);
    }
    l_he /= k as f64;
    l_ne /= k as f64;
    Ok(EventLoss {
        l_he,
        l_ne,
        l_e: l_he + params.lambda_ne * l_ne,
        grad_preds,
    })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Writes an event file: `# width height` header, then one `t x y p`
/// line per event, sorted by time.
pub fn write_events(path: &Path, events: &[Event], width: usize, height: usize) -> Result<()> {
    let mut out = format!("# {width} {height}\n");
    for e in events {
        out.push_str(&format!("{} {} {} {}\n", e.t, e.x, e.y, e.polarity));
    }
    std::fs::write(path, out).map_err(|e| EvsplatError::io(path.display().to_string(), e))
}

/// Reads an event file written by [`write_events`]. Returns the events
/// and the sensor size from the header.
pub fn read_events(path: &Path) -> Result<(Vec<Event>, usize, usize)> {
    let file =
        std::fs::File::open(path).map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| EvsplatError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "empty event file".into(),
    })?;
    let header = header.map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "#" {
        return Err(EvsplatError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("bad header {header:?}"),
        });
    }
    let width: usize = parts[1].parse().map_err(|_| EvsplatError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "bad width".into(),
    })?;
    let height: usize = parts[2].parse().map_err(|_| EvsplatError::Parse {
        path: path.display().to_string(),
        line: 1,
        msg: "bad height".into(),
    })?;
    let mut events = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(EvsplatError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected 4 fields, got {}", f.len()),
            });
        }
        let parse_err = |msg: &str| EvsplatError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: msg.into(),
        };
        events.push(Event {
            t: f[0].parse().map_err(|_| parse_err("bad t"))?,
            x: f[1].parse().map_err(|_| parse_err("bad x"))?,
            y: f[2].parse().map_err(|_| parse_err("bad y"))?,
            polarity: f[3].parse().map_err(|_| parse_err("bad p"))?,
        });
    }
    Ok((events, width, height))
}
