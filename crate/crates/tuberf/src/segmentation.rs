//! Region division: split a camera trajectory into overlapping blocks at
//! bends (cumulative heading turns above a threshold).
//!
//! Cut points partition the frames into block cores; each adjacent pair of
//! cores then shares an overlap region of round(overlap * smaller core
//! length) frames, split across the cut. Blocks always cover every frame
//! and cores remain a partition.

use serde::{Deserialize, Serialize};

use crate::geometry::{vadd, vdot, vnorm, vnormalize, vscale, Pose, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum SegmentationError {
    #[error("trajectory needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("frame ids must be unique and sorted (offender at position {0})")]
    BadIds(usize),
}

/// Ordered camera trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    entries: Vec<(usize, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(usize, Pose)>) -> Result<Self, SegmentationError> {
        if entries.len() < 2 {
            return Err(SegmentationError::TooShort(entries.len()));
        }
        for i in 1..entries.len() {
            if entries[i].0 <= entries[i - 1].0 {
                return Err(SegmentationError::BadIds(i));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pose(&self, position: usize) -> &Pose {
        &self.entries[position].1
    }

    pub fn frame_id(&self, position: usize) -> usize {
        self.entries[position].0
    }

    pub fn positions(&self) -> &[(usize, Pose)] {
        &self.entries
    }
}

/// One trajectory segment. Ranges are positions into the trajectory,
/// half-open; the core ranges partition the frames while [start, end)
/// includes the overlap margins shared with neighbors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub core_start: usize,
    pub core_end: usize,
    pub center: Vec3,
}

impl Block {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn core_len(&self) -> usize {
        self.core_end - self.core_start
    }

    pub fn contains(&self, position: usize) -> bool {
        (self.start..self.end).contains(&position)
    }

    /// Leading overlap margin (shared with the previous block).
    pub fn leading_margin(&self) -> std::ops::Range<usize> {
        self.start..self.core_start
    }

    /// Trailing overlap margin (shared with the next block).
    pub fn trailing_margin(&self) -> std::ops::Range<usize> {
        self.core_end..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivideConfig {
    pub angle_threshold_deg: f64,
    pub min_block: usize,
    pub overlap: f64,
    /// Boxcar width for heading smoothing.
    pub smoothing: usize,
}

impl Default for DivideConfig {
    fn default() -> Self {
        Self {
            angle_threshold_deg: 25.0,
            min_block: 20,
            overlap: 0.30,
            smoothing: 5,
        }
    }
}

/// Per-frame diagnostics emitted alongside the block manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivideDiagnostics {
    /// Cumulative smoothed heading turn (degrees) since the last cut,
    /// evaluated at each frame.
    pub cumulative_turn_deg: Vec<f64>,
    /// Positions where cuts were placed before merging.
    pub raw_cuts: Vec<usize>,
}

/// Smoothed forward axis per frame (boxcar over the window).
fn smoothed_headings(traj: &Trajectory, width: usize) -> Vec<Vec3> {
    let n = traj.len();
    let half = width / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let mut acc = [0.0; 3];
            for j in lo..hi {
                acc = vadd(acc, traj.pose(j).forward());
            }
            vnormalize(acc)
        })
        .collect()
}

fn angle_between(a: Vec3, b: Vec3) -> f64 {
    let cross = crate::geometry::vcross(a, b);
    vnorm(cross).atan2(vdot(a, b))
}

/// Split the trajectory into overlapping blocks at bends.
pub fn divide(traj: &Trajectory, config: &DivideConfig) -> (Vec<Block>, DivideDiagnostics) {
    let n = traj.len();
    let headings = smoothed_headings(traj, config.smoothing.max(1));
    let threshold = config.angle_threshold_deg.to_radians();

    // Cumulative turn since the last cut; a cut resets the accumulator.
    let mut cuts: Vec<usize> = Vec::new();
    let mut cumulative = vec![0.0f64; n];
    let mut acc = 0.0;
    for i in 1..n {
        acc += angle_between(headings[i - 1], headings[i]);
        if acc > threshold {
            cuts.push(i);
            acc = 0.0;
        }
        cumulative[i] = acc;
    }
    let raw_cuts = cuts.clone();

    // Core ranges from cuts, then merge cores shorter than min_block.
    let mut cores: Vec<(usize, usize)> = Vec::new();
    let mut start = 0usize;
    for &c in &cuts {
        cores.push((start, c));
        start = c;
    }
    cores.push((start, n));
    loop {
        let Some(pos) = cores
            .iter()
            .position(|&(s, e)| e - s < config.min_block && cores.len() > 1)
        else {
            break;
        };
        if pos + 1 < cores.len() {
            let (s, _) = cores[pos];
            let (_, e2) = cores[pos + 1];
            cores[pos] = (s, e2);
            cores.remove(pos + 1);
        } else {
            let (s1, _) = cores[pos - 1];
            let (_, e) = cores[pos];
            cores[pos - 1] = (s1, e);
            cores.remove(pos);
        }
    }

    // Extend each adjacent pair by a shared overlap region of
    // round(overlap * min(core lengths)) frames, split across the cut.
    let m = cores.len();
    let mut starts: Vec<usize> = cores.iter().map(|&(s, _)| s).collect();
    let mut ends: Vec<usize> = cores.iter().map(|&(_, e)| e).collect();
    for i in 0..m.saturating_sub(1) {
        let len_a = cores[i].1 - cores[i].0;
        let len_b = cores[i + 1].1 - cores[i + 1].0;
        let ov = (config.overlap * len_a.min(len_b) as f64).round() as usize;
        let cut = cores[i].1;
        let back = (ov / 2).min(cut - cores[i].0);
        let fwd = (ov - ov / 2).min(cores[i + 1].1 - cut);
        starts[i + 1] = cut - back;
        ends[i] = cut + fwd;
    }

    let blocks: Vec<Block> = (0..m)
        .map(|i| {
            let core = cores[i];
            let mut b = Block {
                index: i,
                start: starts[i],
                end: ends[i],
                core_start: core.0,
                core_end: core.1,
                center: [0.0; 3],
            };
            b.center = block_center(&b, traj);
            b
        })
        .collect();

    (
        blocks,
        DivideDiagnostics {
            cumulative_turn_deg: cumulative.iter().map(|r| r.to_degrees()).collect(),
            raw_cuts,
        },
    )
}

/// Arithmetic mean of the core-frame camera positions.
pub fn block_center(block: &Block, traj: &Trajectory) -> Vec3 {
    let mut acc = [0.0; 3];
    let count = block.core_len().max(1);
    for i in block.core_start..block.core_end {
        acc = vadd(acc, traj.pose(i).translation);
    }
    vscale(acc, 1.0 / count as f64)
}
