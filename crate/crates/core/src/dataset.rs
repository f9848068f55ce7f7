//! On-disk dataset layout and readers.
//!
//! A dataset directory holds `intrinsics.txt` (fx fy cx cy W H),
//! `images/%06d.png` (8-bit blurred observations), `depth/%06d.bin`
//! (row-major little-endian f32, zero = invalid), `sharp_gt/%06d.png`,
//! `events.txt` (see the event module), `groundtruth_traj.txt` (two TUM
//! lines per frame: exposure start and end), and `manifest.txt`
//! (key = value).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::camera::CameraIntrinsics;
use crate::error::{EvsplatError, Result};
use crate::events::{read_events, Event};
use crate::imaging::FrameBundle;
use crate::img::{ColorImage, ScalarImage};
use crate::se3::{format_tum_line, parse_tum_line, Pose};

pub fn write_intrinsics(path: &Path, intr: &CameraIntrinsics) -> Result<()> {
    std::fs::write(
        path,
        format!(
            "{} {} {} {} {} {}\n",
            intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height
        ),
    )
    .map_err(|e| EvsplatError::io(path.display().to_string(), e))
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
    let f: Vec<&str> = text.split_whitespace().collect();
    if f.len() != 6 {
        return Err(EvsplatError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("expected 6 fields, got {}", f.len()),
        });
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse().map_err(|_| EvsplatError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("bad number {s:?}"),
        })
    };
    CameraIntrinsics::new(
        parse(f[0])?,
        parse(f[1])?,
        parse(f[2])?,
        parse(f[3])?,
        parse(f[4])? as usize,
        parse(f[5])? as usize,
    )
}

pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, out).map_err(|e| EvsplatError::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once(" = ") else {
            return Err(EvsplatError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("expected 'key = value', got {line:?}"),
            });
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Saves an LDR image as 8-bit PNG (values clamped to [0, 1]).
pub fn save_png(path: &Path, img: &ColorImage) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for y in 0..img.height {
        for x in 0..img.width {
            let px = img.get(x, y);
            let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            buf.put_pixel(x as u32, y as u32, image::Rgb([to8(px[0]), to8(px[1]), to8(px[2])]));
        }
    }
    buf.save(path)
        .map_err(|e| EvsplatError::Dataset {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
}

pub fn load_png(path: &Path) -> Result<ColorImage> {
    let img = image::open(path)
        .map_err(|e| EvsplatError::Dataset {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ColorImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            out.set(
                x,
                y,
                [
                    px[0] as f64 / 255.0,
                    px[1] as f64 / 255.0,
                    px[2] as f64 / 255.0,
                ],
            );
        }
    }
    Ok(out)
}

/// Row-major little-endian f32 depth.
pub fn save_depth_bin(path: &Path, depth: &ScalarImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(depth.data.len() * 4);
    for &d in &depth.data {
        bytes.extend_from_slice(&(d as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| EvsplatError::io(path.display().to_string(), e))
}

pub fn load_depth_bin(path: &Path, width: usize, height: usize) -> Result<ScalarImage> {
    let bytes =
        std::fs::read(path).map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
    if bytes.len() != width * height * 4 {
        return Err(EvsplatError::Dataset {
            path: path.display().to_string(),
            msg: format!(
                "depth size {} != {}x{}x4",
                bytes.len(),
                width,
                height
            ),
        });
    }
    let mut out = ScalarImage::new(width, height);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        out.data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
    }
    Ok(out)
}

/// Writes TUM trajectory lines (`timestamp tx ty tz qx qy qz qw`).
pub fn write_trajectory(path: &Path, entries: &[(f64, Pose)]) -> Result<()> {
    let mut out = String::new();
    for (ts, pose) in entries {
        out.push_str(&format_tum_line(*ts, pose));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| EvsplatError::io(path.display().to_string(), e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed = parse_tum_line(line).map_err(|e| EvsplatError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

/// A loaded dataset with lazily-read frames.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub manifest: BTreeMap<String, String>,
    pub frames: usize,
    pub exposure: f64,
    /// All events, absolute timestamps, sorted.
    pub events: Vec<Event>,
    /// Ground-truth (start, end) world-to-camera poses per frame, when
    /// the dataset provides them.
    pub gt_traj: Option<Vec<(Pose, Pose)>>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let intrinsics = read_intrinsics(&root.join("intrinsics.txt"))?;
        let manifest = read_manifest(&root.join("manifest.txt"))?;
        let frames: usize = manifest
            .get("frames")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| EvsplatError::Dataset {
                path: root.display().to_string(),
                msg: "manifest missing frames".into(),
            })?;
        let exposure: f64 = manifest
            .get("exposure")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| EvsplatError::Dataset {
                path: root.display().to_string(),
                msg: "manifest missing exposure".into(),
            })?;
        let events_path = root.join("events.txt");
        let events = if events_path.exists() {
            let (events, w, h) = read_events(&events_path)?;
            if w != intrinsics.width || h != intrinsics.height {
                return Err(EvsplatError::Dataset {
                    path: events_path.display().to_string(),
                    msg: format!("event sensor {w}x{h} != image {}x{}", intrinsics.width, intrinsics.height),
                });
            }
            events
        } else {
            Vec::new()
        };
        let gt_path = root.join("groundtruth_traj.txt");
        let gt_traj = if gt_path.exists() {
            let lines = read_trajectory(&gt_path)?;
            if lines.len() != 2 * frames {
                return Err(EvsplatError::Dataset {
                    path: gt_path.display().to_string(),
                    msg: format!("expected {} TUM lines, got {}", 2 * frames, lines.len()),
                });
            }
            Some(
                lines
                    .chunks_exact(2)
                    .map(|pair| (pair[0].1, pair[1].1))
                    .collect(),
            )
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            intrinsics,
            manifest,
            frames,
            exposure,
            events,
            gt_traj,
        })
    }

    pub fn frame_times(&self, index: usize) -> (f64, f64) {
        let t0 = index as f64 * self.exposure;
        (t0, t0 + self.exposure)
    }

    /// Reads frame `index` and windows its events (relative times in
    /// `(0, exposure]`).
    pub fn frame_bundle(&self, index: usize) -> Result<FrameBundle> {
        if index >= self.frames {
            return Err(EvsplatError::Dataset {
                path: self.root.display().to_string(),
                msg: format!("frame {index} out of range ({} frames)", self.frames),
            });
        }
        let image_obs = load_png(&self.root.join(format!("images/{index:06}.png")))?;
        let depth_obs = load_depth_bin(
            &self.root.join(format!("depth/{index:06}.bin")),
            self.intrinsics.width,
            self.intrinsics.height,
        )?;
        let (t_start, t_end) = self.frame_times(index);
        let events: Vec<Event> = self
            .events
            .iter()
            .filter(|e| e.t > t_start && e.t <= t_end)
            .map(|e| Event {
                t: e.t - t_start,
                ..*e
            })
            .collect();
        Ok(FrameBundle {
            image_obs,
            depth_obs,
            t_start,
            exposure: self.exposure,
            events,
        })
    }

    pub fn sharp_gt(&self, index: usize) -> Result<ColorImage> {
        load_png(&self.root.join(format!("sharp_gt/{index:06}.png")))
    }

    pub fn has_sharp_gt(&self) -> bool {
        self.root.join("sharp_gt").is_dir()
    }
}
